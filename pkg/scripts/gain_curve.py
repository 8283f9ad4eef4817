"""Forced response of the full hair-cell oscillator against forcing amplitude.

Runs the self-tuned loop and a detuned control (mu frozen well below the
critical value) and prints the log-log slope between neighbouring amplitudes.
A self-tuned loop is compressive (slope well below 1); the detuned control is
linear (slope close to 1).
"""
import argparse
import math

from selftune import cli
from selftune.scenario import load


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--amplitudes", type=cli.float_list,
                        default="0,0.005,0.01,0.02,0.04,0.08,0.16")
    parser.add_argument("--frequency", type=float)
    parser.add_argument("--detuned-mu", type=float, default=-0.7)
    parser.add_argument("--output-dir")
    args = parser.parse_args()

    base = load("hair-cell-forced")
    detuned = base.with_value("frozen_mu", True).with_value("initial.mu", args.detuned_mu)
    detuned = detuned.with_value("name", "hair-cell-detuned")
    for sc in (base, detuned):
        amps = [a for a in args.amplitudes if a > 0 or sc is base]
        rows, path = cli.gain_curve(sc, amps, args.frequency, args.output_dir)
        print(f"# {sc.name} -> {path}")
        print(f"{'F':>10} {'response':>12} {'slope':>8} {'unsettled':>10}")
        for r in rows:
            slope = "" if r["slope"] is None else f"{r['slope']:.3f}"
            print(f"{r['F']:>10.4g} {r['response']:>12.6f} {slope:>8} {str(r['unsettled']):>10}")
        nonzero = [r for r in rows if r["F"] > 0]
        if len(nonzero) > 1:
            lo, hi = nonzero[0], nonzero[-1]
            overall = math.log(hi["response"] / lo["response"]) / math.log(hi["F"] / lo["F"])
            print(f"overall slope {overall:.3f}\n")


if __name__ == "__main__":
    main()
