"""A miniature end-to-end run: generate data, train briefly, evaluate.

Uses deliberately tiny settings so it finishes in about two minutes on a
laptop CPU; the directional experiments in the acceptance suite use longer
schedules. Artifacts (config echo, per-step loss log, checkpoints, metric
report, visualizations) land in demos/out/run.
"""

import json
import warnings
from pathlib import Path

from xpd import harness
from xpd.config import RunConfig

warnings.filterwarnings("ignore")
ROOT = Path(__file__).parent / "out"

config = RunConfig.from_dict({
    "seed": 0,
    "out_dir": str(ROOT / "run"),
    "dataset": str(ROOT / "run_data"),
    "eval_dataset": str(ROOT / "run_data"),
    "variant": "xpd",
    "generate": {"num_scenes": 16, "image_size": [96, 128], "num_planes": [3, 6],
                 "depth_range": [1.5, 6.0], "corruption_radius": 8},
    "train": {"epochs": 6, "batch_size": 8, "boundary_loss": "dgbpl",
              "labels": "corrupted"},
    "eval": {"labels": "clean", "score_thresh": 0.3, "nms_iou": 0.5},
}).validate()

print("generating", config.generate.num_scenes, "scenes ...")
harness.cmd_generate(config)

print("training", config.train.epochs, "epochs ...")
harness.cmd_train(config)

log = [json.loads(line) for line in (Path(config.out_dir) / "log.jsonl").read_text().splitlines()]
print(f"loss: total {log[0]['total']:.3f} -> {log[-1]['total']:.3f} over {len(log)} steps "
      f"(rmse {log[0]['rmse']:.2f} -> {log[-1]['rmse']:.2f} m)")

report = json.loads((Path(config.out_dir) / "report.json").read_text())
print("\nmetrics on clean labels:")
print((Path(config.out_dir) / "report.txt").read_text())

config.eval.checkpoint = str(Path(config.out_dir) / "checkpoint.npz")
viz = harness.cmd_visualize(config, max_scenes=2)
print(f"prediction visualizations in {viz}")
