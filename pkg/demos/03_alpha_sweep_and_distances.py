"""Sweep the fixed alpha and look at how spread out the embeddings end up.

``collapse`` is the mean pairwise distance of test embeddings (0 means every
input maps to one point). The histogram shows negative-pair distances of the
alpha=0.3 encoder.
"""
from ainfonce import analysis
from ainfonce.persistence import parse_config
from ainfonce.train_eval import pretrain

cfg = parse_config({"seed": 0,
                    "data": {"classes": 5, "dim": 16, "n_train": 40, "n_test": 20},
                    "encoder": {"hidden": [64], "k": 16},
                    "train": {"epochs": 20}, "finetune": {"epochs": 20}})
for row in analysis.alpha_sweep(cfg, [0.0, 0.3, 0.5, 1.0]):
    print("alpha={alpha:.1f}  SA={SA:.3f}  RA={RA:.3f}  collapse={collapse:.3f}".format(**row))

train, test = cfg.datasets()
enc, _ = pretrain(cfg.train_config(), train)
for b in analysis.distance_histogram(enc, test, bins=10):
    print(f"[{b['bin_lo']:.1f}, {b['bin_hi']:.1f})  {'#' * round(100 * b['count'])}")
