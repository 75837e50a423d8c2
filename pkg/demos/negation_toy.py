"""Sign-flip toy: a rank-1 core learns to undo a negated target domain.

Every factorized layer has R_in = R_out = 1, so its core is a single scalar
filter. Negating the input is then fixable by flipping core signs, which is
what core-only SHOT finds without any target labels.

    python demos/negation_toy.py
"""
import numpy as np

from tuckersfda.configs import TOY_NEGATION, TOY_NEGATION_PROTOCOL, TOY_NEGATION_TASK
from tuckersfda.experiments import prepare, run_arm
from tuckersfda.training import evaluate


def main(seeds=(0, 1, 2)):
    gains = []
    for s in seeds:
        prep = prepare(TOY_NEGATION_TASK, TOY_NEGATION, TOY_NEGATION_PROTOCOL, s)
        src = evaluate(prep.factorized, prep.pair.source_test)["f1"]
        before = evaluate(prep.factorized, prep.pair.target_test)["f1"]
        adapted, log = run_arm(prep, TOY_NEGATION_PROTOCOL, "core", s)
        after = log.records[-1]["f1"]
        gains.append(after - before)
        cores = {l.name: np.round(l.params["core"].ravel(), 2) for l in adapted.layers()
                 if l.kind == "FactorizedConv1d"}
        print(f"seed {s}: source F1 {src:.3f}, target F1 {before:.3f} -> {after:.3f}")
        for name, c in cores.items():
            print(f"  {name} core {c}")
    print(f"mean gain {100 * np.mean(gains):.1f} F1 points")


if __name__ == "__main__":
    main()
