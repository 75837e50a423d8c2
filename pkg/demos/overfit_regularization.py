"""Full fine-tuning vs core-only adaptation on a target split with two samples per class.

Prints the seed-averaged target F1 curve of both arms, their mean per-layer
weight distance from the source model, and the PAC complexity term each
distance implies.

    python demos/overfit_regularization.py
"""
import numpy as np

from tuckersfda.configs import OVERFIT, OVERFIT_PROTOCOL, OVERFIT_TASK
from tuckersfda.diagnostics import (
    BoundInputs, layer_distances, mean_weight_distance, pac_bound_term, weight_layer_names,
)
from tuckersfda.experiments import prepare, run_arm


def main(seeds=(0, 1, 2)):
    curves = {"full": [], "core": []}
    dist = {"full": [], "core": []}
    sq = {"full": [], "core": []}
    for s in seeds:
        prep = prepare(OVERFIT_TASK, OVERFIT, OVERFIT_PROTOCOL, s)
        for arm in curves:
            adapted, log = run_arm(prep, OVERFIT_PROTOCOL, arm, s)
            start = prep.dense if arm == "full" else prep.factorized
            d = layer_distances(start, adapted)
            names = weight_layer_names(start)
            curves[arm].append(log.column("f1"))
            dist[arm].append(mean_weight_distance(d, names))
            sq[arm].append(sum(d[n]["recon"] ** 2 for n in names))
    bound = BoundInputs.report_defaults(OVERFIT_TASK.n_target * OVERFIT_TASK.n_classes, OVERFIT_TASK.n_classes)
    for arm, c in curves.items():
        mean = 100 * np.mean(c, axis=0)
        print(f"{arm:>4}: F1 by epoch {' '.join(f'{v:.0f}' for v in mean)}")
        print(f"      best {mean.max():.2f}, final {mean[-1]:.2f}, drop {mean.max() - mean[-1]:.2f}; "
              f"mean distance {np.mean(dist[arm]):.3f}; PAC term {pac_bound_term(np.mean(sq[arm]), bound):.3f}")


if __name__ == "__main__":
    main()
