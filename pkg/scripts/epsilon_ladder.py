"""Practical-stability search and residual sweep over a ladder of epsilon.

For the first-order loop and the reduced oscillator (both with the log law and
p = sin t), runs the falsifier, then measures the steady distance from the
target set for each epsilon and fits residual ~ C * epsilon.
"""
import argparse

from selftune import cli
from selftune.adaptation import custom_law, log_law
from selftune.dynamics import FirstOrderLoop, FirstOrderModel, OscillatorLoop, OscillatorModel
from selftune.stabcert import (Budget, EpsilonFamily, TargetSet, epsilon_residual_sweep,
                               falsify_practical_stability, fit_linear_constant)


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--epsilons", type=cli.float_list, default="3e-2,1e-2,3e-3,1e-3")
    parser.add_argument("--residual-epsilons", type=cli.float_list, default="1e-1,3e-2,1e-2,3e-3,1e-3")
    parser.add_argument("--perturbation", default="sin(t)")
    parser.add_argument("--radius", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output-dir")
    args = parser.parse_args()

    systems = {
        "first-order": FirstOrderLoop(FirstOrderModel(0.5), log_law()),
        "oscillator": OscillatorLoop(OscillatorModel(0.3), log_law()),
        "first-order-flipped": FirstOrderLoop(FirstOrderModel(0.5), custom_law("ln(x)", "mu")),
    }
    budget = Budget(epsilons=tuple(args.epsilons), seed=args.seed)
    rows = []
    for name, loop in systems.items():
        fam = EpsilonFamily.from_source(loop, args.perturbation)
        target = TargetSet(loop)
        verdict = falsify_practical_stability(fam, target, args.radius, budget)
        print(f"{name}: {verdict.outcome}")
        if verdict.falsified:
            continue
        sweep = epsilon_residual_sweep(fam, target, args.residual_epsilons)
        C = fit_linear_constant(sweep)
        for eps, res in sweep:
            rows.append([name, eps, res, res / eps])
            print(f"  eps={eps:<8g} residual={res:.4e} ratio={res / eps:.3f}")
        print(f"  fitted C = {C:.4f}")
    out = cli.output_dir(args.output_dir) / "epsilon-ladder.csv"
    cli.write_table(out, ("system", "epsilon", "residual", "ratio"), rows)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
