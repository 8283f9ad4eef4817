"""Map where the positive-real margin and the KYP storage search agree.

For each (a, b) on a grid, compares the closed-form margin 1 - a / b**2 with the
outcome of the numerical storage-function search and writes the table as CSV.
"""
import argparse
import itertools
from pathlib import Path

import numpy as np

from selftune import cli
from selftune.analysis import kyp_storage, positive_real_margin
from selftune.errors import Infeasible


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--a", type=cli.float_list, default="0.1,0.25,0.5,1,2,3,4,4.1,5,6,8")
    parser.add_argument("--b", type=cli.float_list, default="0.5,1,2")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output-dir")
    args = parser.parse_args()

    rows = []
    for a, b in itertools.product(args.a, args.b):
        margin = positive_real_margin(a, b)
        try:
            form = kyp_storage(a, b, seed=args.seed)
            feasible, p11, p12, p22 = True, *form.P[np.triu_indices(2)]
        except Infeasible:
            feasible, p11, p12, p22 = False, None, None, None
        rows.append([a, b, margin, feasible, feasible == (margin >= 0), p11, p12, p22])
        print(f"a={a:<5g} b={b:<4g} margin={margin:+.4f} feasible={feasible!s:<5} "
              f"{'ok' if rows[-1][4] else 'MISMATCH'}")
    out = cli.output_dir(args.output_dir) / "kyp-boundary.csv"
    cli.write_table(Path(out), ("a", "b", "margin", "feasible", "agrees", "P11", "P12", "P22"),
                    rows)
    print(f"{sum(r[4] for r in rows)}/{len(rows)} agree; wrote {out}")


if __name__ == "__main__":
    main()
