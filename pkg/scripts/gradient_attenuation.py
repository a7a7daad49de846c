"""Compare LLL and NTP gradient strength at object patches in single-layer models.

For each random single-layer model and shape-world example, reports the median
gradient norm at the object's patches for both losses, how often the text-side
gradient cap is hit, and how well attention explains the NTP gradient.

    python scripts/gradient_attenuation.py --models 10 --examples 8
"""

import argparse

import numpy as np

from patchlens.analysis import ntp_attenuation_report
from patchlens.config import ModelConfig
from patchlens.grounding import generate_dataset
from patchlens.model import init_params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--models", type=int, default=10)
    ap.add_argument("--examples", type=int, default=8)
    ap.add_argument("--init-std", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = [ex for ex in generate_dataset(args.examples, seed=args.seed + 100) if ex.is_yes][: args.examples]
    print(f"{'model':>5} {'median LLL':>12} {'median NTP':>12} {'ratio':>10} {'corr':>7} {'cap hits':>8}")
    ratios = []
    for m in range(args.models):
        params = init_params(ModelConfig(n_layers=1, init_std=args.init_std, seed=args.seed + m))
        reps = [ntp_attenuation_report(params, ex.image, ex.question, ex.answer, ex.grounding()) for ex in data]
        lll = np.median([np.median(np.asarray(r.lll_grad_visual)[r.positives]) for r in reps])
        ntp = np.median([np.median(np.asarray(r.ntp_grad_visual)[r.positives]) for r in reps])
        corr = np.nanmean([r.correlation for r in reps])
        hits = sum(r.cap_violations for r in reps)
        ratios.append(lll / ntp)
        print(f"{m:>5} {lll:>12.4e} {ntp:>12.4e} {lll / ntp:>10.1f} {corr:>7.3f} {hits:>8}")
    print(f"median LLL/NTP gradient ratio at object patches: {np.median(ratios):.1f}")


if __name__ == "__main__":
    main()
