"""Unfairness of the loan classifiers under exact (oracle) counterfactuals.

Reference point for the VACA audit: the same classifiers and label, with
counterfactuals from the true structural equations instead of a trained model.

    python3 scripts/oracle_fairness.py --seeds 10
"""

import argparse

import numpy as np

from vaca.data import normalize
from vaca.fairness import fit_classifier, loan_demo_label, unfairness_from_pairs
from vaca.scm import builtin_scm, counterfactual_oracle, sample_observational


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--rows", type=int, default=1000, help="test rows to audit")
    args = p.parse_args()
    scm = builtin_scm("loan")
    g = scm.graph
    hits = 0
    for seed in range(args.seeds):
        raw = sample_observational(scm, 10_000, seed)
        ds = normalize(raw)
        y = loan_demo_label(raw.x, seed)
        test = np.arange(ds.n)[ds.rows("test")][: args.rows]
        same = ds.x[test]
        # abduction is exact, so one counterfactual per branch suffices
        flip = ds.normalization.apply(np.vstack([
            counterfactual_oracle(scm, raw, r, ("G", 1.0 - raw.x[r, 0])) for r in test
        ]))
        uf, w_g = {}, 0.0
        for sel in ("full", "unaware", "fair-x"):
            spec = fit_classifier(sel, ds.x_of("train"), y[ds.rows("train")], g, 0)
            uf[sel] = unfairness_from_pairs(spec, same, flip, 1, g)
            if sel == "full":
                w_g = float(spec.clf.weights[0])
        ok = uf["full"] > uf["unaware"] > uf["fair-x"]
        hits += ok
        print(f"seed {seed}: full {uf['full']:.4f}  unaware {uf['unaware']:.4f}  fair-x {uf['fair-x']:.4f}  "
              f"w_G {w_g:+.3f}  ranking {'holds' if ok else 'fails'}")
    print(f"ranking full > unaware > fair-x holds in {hits}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
