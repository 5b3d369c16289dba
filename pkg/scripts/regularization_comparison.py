"""Compare prior schemes on synthetic hierarchical data and write a long-format CSV.

Usage: python scripts/regularization_comparison.py --replications 20 --out comparison.csv
"""

import argparse
import json

from hierlattice.simulate import SimConfig, run_regularization_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replications", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--N", type=int, default=10000)
    ap.add_argument("--rho", type=float, default=0.3)
    ap.add_argument("--out", default="comparison.csv")
    args = ap.parse_args()
    res = run_regularization_comparison(SimConfig(N=args.N, rho=args.rho), args.replications, args.seed)
    with open(args.out, "w") as fh:
        fh.write(res.to_csv())
    for row in res.summary("test_ll_improvement"):
        print(json.dumps(row))


if __name__ == "__main__":
    main()
