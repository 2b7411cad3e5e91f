"""
A small ablation grid and its report
====================================

Drives the command-line entry point the same way a shell would: writes a config,
runs two variants over two seeds, then reruns the same command to show that
finished cells are skipped. The report directory ends up with the comparison
figures and summary.tsv.
"""

import json
import tempfile
from pathlib import Path

from segdreamer import cli
from segdreamer.config import RunConfig, apply_overrides, from_dict, save_config, to_dict
from segdreamer.evalkit import read_summary

overrides = [
    "masks.kind=simulated_fm", "total_env_steps=150", "prefill_steps=60", "eval_every=75",
    "log_every=25", "batch_size=2", "seq_len=8", "env.episode_length=30", "env.image_size=32",
    "model.det_dim=16", "model.hidden_dim=16", "model.stoch_groups=4", "model.stoch_classes=4",
    "model.cnn_depth=4", "agent.hidden_dim=16", "agent.horizon=3",
]
work = Path(tempfile.mkdtemp(prefix="segdreamer_ablate_"))
cfg_path = save_config(from_dict(apply_overrides(to_dict(RunConfig()), overrides)).validate(), work / "cfg.yaml")

args = ["ablate", "--config", str(cfg_path), "--variants", "sd_selective,sd_naive",
        "--seeds", "0,1", "--out", str(work / "grid")]
cli.main(args)

# second call: nothing left to train
cli.main(args)

for row in read_summary(work / "grid" / "report" / "summary.tsv"):
    print(row["label"], "final return", row["final_return_mean"], "+-", row["final_return_sem"])
print(json.dumps(sorted(p.name for p in (work / "grid" / "report").iterdir())))
