"""Harness: config, dataset generation, training loop, eval, CLI, visualize."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from xpd import autodiff as ad
from xpd import harness
from xpd import losses as lmod
from xpd.cli import main
from xpd.config import RunConfig
from xpd.data import SceneDataset, augment_sample, plain_sample, prepare_scene
from xpd.errors import CheckpointMismatchError, ConfigurationError
from xpd.net import XPDNet, save_checkpoint
from xpd.scene import boundary_mask, generate_scene


def tiny_config(tmp_path, **over):
    d = {
        "seed": 3,
        "out_dir": str(tmp_path / "out"),
        "dataset": str(tmp_path / "data"),
        "eval_dataset": str(tmp_path / "data"),
        "variant": "xpd",
        "generate": {"num_scenes": 4, "image_size": [48, 64], "num_planes": [2, 4],
                     "depth_range": [1.5, 5.0], "corruption_radius": 4},
        "train": {"epochs": 1, "batch_size": 2, "boundary_loss": "dgbpl"},
        "eval": {"labels": "clean"},
    }
    for key, value in over.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return RunConfig.from_dict(d).validate()


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_validation_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, **{"train.epochs": 0})
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, **{"train.boundary_loss": "sharp"})
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, **{"variant": "resnet"})
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, **{"generate.image_size": [50, 64]})
    with pytest.raises(ConfigurationError):
        tiny_config(tmp_path, **{"train.loss_weights": {"dice": -1.0}})


def test_config_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"daataset": "x"})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"train": {"epoks": 3}})


def test_config_override_paths(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 1, "out_dir": str(tmp_path / "o")}))
    cfg = RunConfig.from_file(cfg_file, overrides=["train.optimizer.lr=0.01",
                                                   "variant=pad_net",
                                                   "generate.num_planes=[2,3]"])
    assert cfg.train.optimizer.lr == 0.01
    assert cfg.variant == "pad_net"
    assert cfg.generate.num_planes == (2, 3)


def test_config_seed_env_override(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 1}))
    cfg = RunConfig.from_file(cfg_file, seed_env="42")
    assert cfg.seed == 42
    with pytest.raises(ConfigurationError):
        RunConfig.from_file(cfg_file, seed_env="not-an-int")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_writes_dataset_and_is_reproducible(tmp_path):
    cfg_a = tiny_config(tmp_path, dataset=str(tmp_path / "a"))
    cfg_b = tiny_config(tmp_path, dataset=str(tmp_path / "b"))
    harness.cmd_generate(cfg_a)
    harness.cmd_generate(cfg_b)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_corrupted_labels_differ_only_near_boundary(tmp_path):
    from scipy import ndimage

    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    ds = SceneDataset(cfg.dataset)
    radius = cfg.generate.corruption_radius
    found_change = False
    for i in range(len(ds)):
        scene, noisy = ds.load(i)
        assert noisy is not None
        changed = noisy != scene.labels
        if changed.any():
            found_change = True
            dist = ndimage.distance_transform_cdt(~boundary_mask(scene.labels),
                                                  metric="chessboard")
            assert dist[changed].max() <= radius
    assert found_change


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_smoke_writes_artifacts_and_log_audit(tmp_path):
    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    ckpt = harness.cmd_train(cfg)
    out = Path(cfg.out_dir)
    assert ckpt.exists()
    assert (out / "config.json").exists()
    assert (out / "ckpt-epoch1.npz").exists()
    assert (out / "report.json").exists()
    lines = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    assert len(lines) == 2  # 4 scenes / batch 2
    w = cfg.train.loss_weights
    for rec in lines:
        manual = (w.focal * rec["focal"] + w.dice * rec["dice"] + w.rmse * rec["rmse"]
                  + w.boundary * rec["boundary"] + w.constraints * rec["constraints"])
        assert abs(rec["total"] - manual) < 1e-9
    # checkpoint loads back into a matching net
    from xpd.net import load_checkpoint

    load_checkpoint(ckpt, net=XPDNet(variant="xpd", seed=0, dtype=np.float32))


def test_train_boundary_off_logs_zero_boundary(tmp_path):
    cfg = tiny_config(tmp_path, **{"train.boundary_loss": "off"})
    harness.cmd_generate(cfg)
    harness.cmd_train(cfg)
    lines = [json.loads(line) for line in
             (Path(cfg.out_dir) / "log.jsonl").read_text().splitlines()]
    assert all(rec["boundary"] == 0.0 for rec in lines)


def test_train_nan_abort_reports_step(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    real_step = harness.train_step
    calls = {"n": 0}

    def exploding(net, batch, weights, kind, w_squared, constraints_fn=None):
        total, bd = real_step(net, batch, weights, kind, w_squared, constraints_fn)
        if calls["n"] == 1:
            bd.total = float("nan")
        calls["n"] += 1
        return total, bd

    monkeypatch.setattr(harness, "train_step", exploding)
    with pytest.raises(RuntimeError, match="step 1"):
        harness.cmd_train(cfg)


def test_flip_equivariance_with_constant_heads(tmp_path):
    """With zeroed head weights the network output is flip-invariant, so the
    loss must match exactly between a scene and its flipped twin."""
    scene = generate_scene(5, tiny_config(tmp_path).generate.scene_config())
    prep = prepare_scene(scene, scene.labels, need_weights=True, dtype=np.float64)
    net = XPDNet(variant="xpd", seed=0, dtype=np.float64)
    for layer in (net.cat_out, net.kern_out, net.depth_out, net.mask_conv2):
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0

    class FlipSpec:
        hflip, vflip, noise_sigma, jitter = 1.0, 0.0, 0.0, 0.0

    rng = np.random.default_rng(0)
    plain = plain_sample(prep)
    flipped = augment_sample(prep, rng, FlipSpec())
    _, bd_plain = harness.train_step(net, [plain], lmod.LossWeights(), "dgbpl", True)
    _, bd_flip = harness.train_step(net, [flipped], lmod.LossWeights(), "dgbpl", True)
    assert bd_plain.total == pytest.approx(bd_flip.total, abs=1e-12)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_oracle_injection_perfect_scores(tmp_path):
    cfg = tiny_config(tmp_path, **{"eval.oracle": True})
    harness.cmd_generate(cfg)
    report = harness.cmd_eval(cfg)
    assert report.ap_m == pytest.approx(1.0)
    assert report.ap_b == pytest.approx(1.0)
    assert report.boundary_iou == pytest.approx(1.0)
    assert report.rel == 0.0


def test_eval_empty_prediction_model_zero_ap(tmp_path):
    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    net = XPDNet(variant="xpd", seed=0, dtype=np.float32)
    net.cat_out.weight.data[...] = 0.0
    net.cat_out.bias.data[...] = -12.0  # scores ~ 0
    ckpt = tmp_path / "empty.npz"
    save_checkpoint(net, ckpt)
    cfg.eval.checkpoint = str(ckpt)
    report = harness.cmd_eval(cfg)
    assert report.ap_m == 0.0
    assert report.counts["predictions"] == 0


def test_eval_deterministic_reports(tmp_path):
    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    net = XPDNet(variant="xpd", seed=1, dtype=np.float32)
    ckpt = tmp_path / "net.npz"
    save_checkpoint(net, ckpt)
    cfg.eval.checkpoint = str(ckpt)
    r1 = harness.cmd_eval(cfg).to_dict()
    r2 = harness.cmd_eval(cfg).to_dict()
    assert r1 == r2


def test_eval_checkpoint_hash_mismatch(tmp_path):
    cfg = tiny_config(tmp_path, variant="none")
    harness.cmd_generate(cfg)
    net = XPDNet(variant="xpd", seed=0, dtype=np.float32)
    ckpt = tmp_path / "x.npz"
    save_checkpoint(net, ckpt)
    cfg.eval.checkpoint = str(ckpt)
    with pytest.raises(CheckpointMismatchError, match="hash"):
        harness.cmd_eval(cfg)


# ---------------------------------------------------------------------------
# gradcheck command
# ---------------------------------------------------------------------------

def test_gradcheck_negative_control():
    report = harness.cmd_gradcheck(verbose=False, corrupt="composite_loss")
    names = {r.name: r.passed for r in report.results}
    assert not names["composite_loss"]
    assert not report.passed


def test_gradcheck_coverage_contract():
    from xpd.checks import named_checks

    assert len(named_checks()) >= 6


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _write_cfg(tmp_path, cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return str(path)


def test_cli_generate_train_eval_roundtrip(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    cfg_path = _write_cfg(tmp_path, cfg)
    assert main(["generate", "--config", cfg_path]) == 0
    assert main(["train", "--config", cfg_path]) == 0
    ckpt = Path(cfg.out_dir) / "checkpoint.npz"
    assert main(["eval", "--config", cfg_path,
                 "--set", f"eval.checkpoint={json.dumps(str(ckpt))}"]) == 0
    out = capsys.readouterr().out
    assert "Boundary IoU" in out


def test_cli_validation_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochs": -1}}))
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["eval", "--config", str(bad)]) == 2
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing)]) == 2


def test_cli_check_failure_exit_code(monkeypatch):
    from xpd.gradcheck import CheckResult, GradCheckReport

    failing = GradCheckReport(results=[CheckResult("x", 1.0, 1e-4, 3, False)])
    monkeypatch.setattr(harness, "cmd_gradcheck", lambda **kw: failing)
    assert main(["gradcheck"]) == 3


def test_cli_xpd_seed_env(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path, dataset=str(tmp_path / "seeded"))
    cfg_path = _write_cfg(tmp_path, cfg)
    monkeypatch.setenv("XPD_SEED", "77")
    assert main(["generate", "--config", cfg_path]) == 0
    manifest = json.loads((tmp_path / "seeded" / "manifest.json").read_text())
    assert manifest["base_seed"] == 77
    echoed = json.loads((Path(cfg.out_dir) / "config.json").read_text())
    assert echoed["seed"] == 77


# ---------------------------------------------------------------------------
# visualize
# ---------------------------------------------------------------------------

def test_visualize_scene_outputs(tmp_path):
    cfg = tiny_config(tmp_path, **{"generate.num_planes": [1, 1],
                                   "generate.depth_range": [2.0, 2.0],
                                   "generate.rotation_scale": 0.0,
                                   "generate.corruption_radius": 0})
    harness.cmd_generate(cfg)
    out = harness.cmd_visualize(cfg, max_scenes=1)
    overlay = np.asarray(Image.open(out / "scene0000_overlay.png"))
    assert overlay.shape[:2] == tuple(cfg.generate.image_size)
    normals = np.asarray(Image.open(out / "scene0000_normals.png"))
    # fronto-parallel plane: recovered normal (0, 0, -1) -> color (127, 127, 0)
    center = normals[20:28, 28:36].reshape(-1, 3).mean(axis=0)
    assert abs(center[0] - 127.5) < 3 and abs(center[1] - 127.5) < 3 and center[2] < 6
    assert (out / "scene0000_depth.png").exists()
    # raw 16-bit debug dumps exist at mask resolution
    g16 = np.asarray(Image.open(out / "scene0000_gradient16.png"))
    assert g16.shape == (cfg.generate.image_size[0] // 4, cfg.generate.image_size[1] // 4)
    assert (out / "scene0000_boundary16.png").exists()
    assert (out / "scene0000_weights16.png").exists()


def test_incomplete_marker_lifecycle(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    assert not (Path(cfg.dataset) / harness.INCOMPLETE_MARKER).exists()

    def boom(*a, **kw):
        raise RuntimeError("induced failure")

    monkeypatch.setattr(harness, "train_step", boom)
    with pytest.raises(RuntimeError):
        harness.cmd_train(cfg)
    assert (Path(cfg.out_dir) / harness.INCOMPLETE_MARKER).exists()
    monkeypatch.undo()
    harness.cmd_train(cfg)
    assert not (Path(cfg.out_dir) / harness.INCOMPLETE_MARKER).exists()


def test_visualize_weight_map_peaks_on_true_discontinuity(tmp_path):
    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    ds = SceneDataset(cfg.dataset)
    scene, _ = ds.load(0)
    from xpd.harness import _combined_weight_map
    from xpd.metrics import DOWNSAMPLE_OFFSET
    from xpd.raster import pool_depth, sobel_gradient_mask, windowed_std

    w = _combined_weight_map(scene, scene.labels)
    pooled, pooled_valid = pool_depth(scene.depth, 4)
    g, g_valid = sobel_gradient_mask(pooled, pooled_valid)
    std = windowed_std(g, valid=g_valid)
    ds_labels = scene.labels[DOWNSAMPLE_OFFSET::4, DOWNSAMPLE_OFFSET::4]
    edges = boundary_mask(ds_labels)
    interior = ~ndimage_dilate(edges, 2)
    assert w[edges].mean() > w[interior].mean()


def ndimage_dilate(mask, it):
    from scipy import ndimage

    return ndimage.binary_dilation(mask, np.ones((3, 3), bool), iterations=it)


def test_visualize_prediction_mode(tmp_path):
    cfg = tiny_config(tmp_path)
    harness.cmd_generate(cfg)
    net = XPDNet(variant="xpd", seed=2, dtype=np.float32)
    ckpt = tmp_path / "viz.npz"
    save_checkpoint(net, ckpt)
    cfg.eval.checkpoint = str(ckpt)
    out = harness.cmd_visualize(cfg, max_scenes=1)
    assert (out / "scene0000_overlay.png").exists()
    assert (out / "scene0000_weights.png").exists()
