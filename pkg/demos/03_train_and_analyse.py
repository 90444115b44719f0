"""A small Even Pairs run with full and top-k attention, then the stability
report and a coarse loss landscape for each trained model.

Run: python demos/03_train_and_analyse.py   (a few minutes on one core)
"""
import numpy as np

from sparselab import landscape as ls
from sparselab.stability import stability_report
from sparselab.tasks import make_splits
from sparselab.training import TrainConfig, train_run

train, hold = make_splits("even_pairs", 1000, 250, L=40, seed=0)
print(f"even_pairs: {len(train)} train / {len(hold)} holdout, length {train.tokens.shape[1]}")

# Plain SGD at lr 0.1 on unscaled scores is touchy: a run can reach 100% and
# then collapse to chance within an epoch, which the holdout column exposes.
models = {}
for mask in ("full", "topk:5"):
    cfg = TrainConfig(task="even_pairs", mask=mask, epochs=12, seed=4, dtype="float32")
    log, params = train_run(train, cfg, holdout=hold)
    models[mask] = params
    print(f"\n{mask}: train acc by epoch {[round(a, 2) for a in log.train_acc]}")
    print(f"  epochs to 95% train: {log.epochs_to_95}, final holdout {log.final_holdout:.3f}")

# Dispersion statistics and the stability comparison they imply.
for mask, params in models.items():
    rep = stability_report(params, train.subset(np.arange(100)), mask, k=5)
    pct = rep.percentiles
    print(f"\n{mask}: 95th percentile dispersion, full {pct['delta_s'][95]:.2f} vs top-5 {pct['delta_h'][95]:.2f}")
    # below 1 means the top-k constants are the smaller ones at that percentile
    print(f"  corollary LHS at p95: W {rep.lhs[95]['lhs_W']:.3f}, X {rep.lhs[95]['lhs_X']:.3f}")

# Loss surface around each model on two filter-normalized directions.
sub = train.subset(np.arange(64))
for mask, params in models.items():
    d1, d2 = ls.sample_direction(params, 0), ls.sample_direction(params, 1)
    grid = ls.scan(params, d1, d2, step=0.25, radius=1.0, dataset=sub, mask=mask)
    curves = ls.percentile_curves(grid, [0.5, 1.0])
    print(f"\n{mask}: centre loss {grid.center:.4f}")
    for row in curves:
        print(f"  r={row['radius']}: p95 Lipschitz estimate {row['p95']:.3f}")
