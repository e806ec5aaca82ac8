"""Run the staged pipeline with caching, then look at what the defenses see.

    python3 demos/pipeline_and_defenses.py [artifact_root]

Uses the bundled desk preset with shortened training so it finishes in a few
minutes; a second invocation reuses every cached stage.
"""

import json
import sys

import torch

from pood_backdoor.config import load_preset
from pood_backdoor.pipeline import run_pipeline

torch.set_num_threads(1)
root = sys.argv[1] if len(sys.argv) > 1 else "demo-artifacts"
quick = {"decoder.epochs": 15, "encoder.epochs": 8, "victim.epochs": 18, "defenses.nc_steps": 60, "artifact_root": root}
cfg = load_preset("desk").replace(**quick)

for mode in ("fixed", "badnets-d"):
    m = run_pipeline(cfg.replace(**{"attack.mode": mode}))
    print(f"== {mode}: manifest {m.path}")
    print("   stage events:", m.events)
    r = m.report
    print(f"   ACC {r.acc:.1f}  Tar-ACC {r.tar_acc:.1f}  ASR {r.asr:.1f}")
    d = m.metrics["defend"]
    print(f"   Neural Cleanse anomaly index of the target: {d['nc_anomaly_target']:.2f} (flagged: {d['nc_flagged']})")
    print(f"   STRIP mean entropy clean {d['strip_clean_mean']:.3f} vs triggered {d['strip_triggered_mean']:.3f}")
    print("   pruning:", json.dumps([{k: round(v, 1) for k, v in p.items() if k != 'n_pruned'} for p in d["pruning"]]))
    print("   figures in", m.artifact_path("defend"))
