"""Adversarial contrastive pretraining on small blobs, then a linear probe.

Compares the inferior-positive loss against symmetric InfoNCE and a clean-only
baseline whose adversary has zero radius. Runs in well under a minute.
"""
from ainfonce.attack import AttackConfig
from ainfonce.data import default_blobs
from ainfonce.train_eval import FinetuneConfig, TrainConfig, evaluate, finetune, pretrain

train, test = default_blobs(seed=0, classes=5, dim=16, n_train=60, n_test=30)
runs = {
    "clean-only": TrainConfig(loss_kind="infonce", epochs=30, hidden=(64,), k=16,
                              attack=AttackConfig(0.0, 0.025, 5, True)),
    "infonce": TrainConfig(loss_kind="infonce", epochs=30, hidden=(64,), k=16),
    "ip": TrainConfig(loss_kind="ip", epochs=30, hidden=(64,), k=16),
}
for name, cfg in runs.items():
    enc, hist = pretrain(cfg, train)
    model = finetune(enc, train, "LP", FinetuneConfig(epochs=30))
    rep = evaluate(model, test, seed=0)
    print(f"{name:>10}: loss {hist[0]['loss_total']:.3f} -> {hist[-1]['loss_total']:.3f}  "
          f"alpha {hist[-1]['alpha']:.3f}  SA {rep.sa:.3f}  RA {rep.ra:.3f}")
