"""Counterfactual fairness audit on the loan SCM with G as the sensitive node.

    python3 scripts/fairness.py --seeds 10 --out results/fairness.json
"""

import argparse
import json
from pathlib import Path

from vaca.experiments import BUDGET, loan_fairness_run, summarize
from vaca.fairness import SELECTORS
from vaca.model import VacaConfig


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--out", default="results/fairness.json")
    args = p.parse_args()
    reports = []
    for seed in range(args.seeds):
        rep, train = loan_fairness_run(seed, VacaConfig(**BUDGET, max_epochs=args.max_epochs), m=args.m)
        reports.append(rep.to_dict())
        line = "  ".join(f"{s}: uf={rep.results[s]['uf']:.4f} f1={rep.results[s]['f1']:.3f}" for s in SELECTORS)
        print(f"seed {seed} ({train.epochs_run} epochs)  {line}")
    for s in SELECTORS:
        uf = summarize([r["results"][s]["uf"] for r in reports])
        f1 = summarize([r["results"][s]["f1"] for r in reports])
        print(f"{s:8s} uf {100 * uf[0]:.2f}±{100 * uf[1]:.2f}  f1 {100 * f1[0]:.2f}±{100 * f1[1]:.2f} (x100)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(reports, indent=2))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
