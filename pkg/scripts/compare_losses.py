"""Train ntp and ntp+lll models on identical data and seeds, then compare grounding metrics.

    python scripts/compare_losses.py --lr 1e-3 --json results.json
"""

import argparse
import json
import logging
from dataclasses import asdict, fields

from patchlens.experiment import ComparisonConfig, run_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(ComparisonConfig):
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    ap.add_argument("--modes", default="ntp,ntp+lll")
    ap.add_argument("--json", help="write config and aggregate metrics here")
    args = vars(ap.parse_args())
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    modes = tuple(args.pop("modes").split(","))
    out_path = args.pop("json")
    cfg = ComparisonConfig(**args)
    comp = run_comparison(cfg, modes)
    print(comp.table())
    if out_path:
        with open(out_path, "w") as f:
            json.dump({"config": asdict(cfg), "metrics": {m: r.metrics for m, r in comp.results.items()},
                       "thresholds": {m: r.threshold for m, r in comp.results.items()}}, f, indent=2)


if __name__ == "__main__":
    main()
