"""Finite-difference verification of analytic gradients.

The generic checker perturbs a sample of coordinates of each input tensor and
compares central differences of a scalar objective against the tape gradient.
The named check suite (one entry per differentiable subsystem) lives here too
and backs the ``gradcheck`` CLI command.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["CheckResult", "GradCheckReport", "fd_check", "run_all_checks"]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    n_coords: int
    passed: bool

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status:4s}  {self.name:38s} max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tolerance:.1e} coords={self.n_coords}")


@dataclass
class GradCheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {
                    "name": r.name,
                    "max_rel_err": r.max_rel_err,
                    "tolerance": r.tolerance,
                    "coords": r.n_coords,
                    "passed": r.passed,
                }
                for r in self.results
            ],
        }


def fd_check(fn, inputs, *, rtol=1e-4, atol=1e-8, h=1e-5, max_coords=24,
             rng=None, name="check", corrupt=False) -> CheckResult:
    """Compare tape gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must return a scalar Tensor built from ``inputs`` (all float64
    tensors with ``requires_grad=True``). Per input, up to ``max_coords``
    coordinates are probed, always including the one with the largest
    analytic gradient. Pass criterion per coordinate:
    ``|fd - an| <= atol + rtol * max(|fd|, |an|)``.

    ``corrupt=True`` biases the analytic gradients before comparison; it
    exists so the negative-control test can prove failures are detected.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("gradcheck objective must be scalar")
    out.backward()
    grads = [None if t.grad is None else t.grad.copy() for t in inputs]
    if corrupt:
        grads = [None if g is None else 1.5 * g + 0.37 for g in grads]

    max_rel = 0.0
    worst = 0.0
    n_total = 0
    ok = True
    for t, an in zip(inputs, grads):
        n = t.data.size
        an_flat = np.zeros(n) if an is None else an.reshape(-1)
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
            top = int(np.argmax(np.abs(an_flat)))
            if top not in coords:
                coords = np.append(coords, top)
        for c in coords:
            # direct nd-indexing: a flat reshape may silently copy when the
            # underlying array is not C-contiguous
            loc = np.unravel_index(c, t.data.shape)
            orig = t.data[loc]
            step = h * max(1.0, abs(orig))
            t.data[loc] = orig + step
            f_plus = float(fn().data)
            t.data[loc] = orig - step
            f_minus = float(fn().data)
            t.data[loc] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            diff = abs(fd - an_flat[c])
            denom = max(abs(fd), abs(an_flat[c]))
            rel = diff / (denom + atol)
            max_rel = max(max_rel, rel)
            if diff > atol + rtol * denom:
                ok = False
                worst = max(worst, diff)
            n_total += 1
    return CheckResult(name=name, max_rel_err=max_rel, tolerance=rtol,
                       n_coords=n_total, passed=ok)


def run_all_checks(corrupt: str | None = None, verbose: bool = False) -> GradCheckReport:
    """Run the named finite-difference suite at float64 on fixed seeds.

    ``corrupt`` names a check whose analytic gradient is deliberately biased;
    it is a negative control used by the tests.
    """
    from . import checks as _checks

    report = GradCheckReport()
    for name, builder in _checks.named_checks():
        result = builder(corrupt=(corrupt == name))
        result.name = name
        report.results.append(result)
        if verbose:
            print(result.line())
    return report
