"""Train one adapter-free model per desk task and freeze its dev scores.

    python3 scripts/compute_single_task_oracle.py [--config configs/desk.yaml]

Each task gets its own model with the full step budget, and this is repeated
for every configured seed.  The mean score per task is written to
tests/data/single_task_oracle.json, the reference used by the acceptance test
comparing multi-task adapters against single-task training.
"""

import argparse
import json
import logging
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from palkit.adapters import AdapterSpec
from palkit.cli import run_training
from palkit.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--out", default=str(ROOT / "tests" / "data" / "single_task_oracle.json"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load_config(args.config)
    scores, per_seed, seconds = {}, {}, {}
    for task in base.tasks:
        cfg = replace(base, adapter=AdapterSpec("None"), tasks=(task,),
                      model=replace(base.model, n_tasks=1))
        t0 = time.perf_counter()
        with tempfile.TemporaryDirectory() as tmp:
            res = run_training(cfg, Path(tmp))
        seconds[task.name] = round(time.perf_counter() - t0, 1)
        per_seed[task.name] = [res["per_seed"][s][task.name] for s in cfg.seeds]
        scores[task.name] = float(np.mean(per_seed[task.name]))
        logging.info("%s: %.4f (%s s)", task.name, scores[task.name], seconds[task.name])

    payload = {"config": Path(args.config).name, "seeds": list(base.seeds),
               "total_steps": base.run.total_steps, "scores": scores,
               "per_seed": per_seed, "seconds": seconds}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
