"""Fixed-budget desk experiments comparing heads and projection widths.

Every run uses the same protocol: the default synthetic spec with the given
seed, a stratified 80/20 split, the default backbone, and a two-stage schedule
sized so that all trend runs fit in well under half an hour on one CPU core.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .backbone import default_desk_config
from .data import Dataset, SyntheticSpec, generate_synthetic
from .trainer import TrainConfig, build_model, sgd_step, train_two_stage

TREND_SEEDS = (0, 1, 2, 3, 4)
TREND_WIDTHS = (8, 32, 128)


@dataclass(frozen=True)
class TrendProtocol:
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-3, stage1_lr=0.3, epochs_stage1=5, epochs_stage2=15, batch_size=16))
    test_fraction: float = 0.2


def trend_data(seed: int, protocol: TrendProtocol = TrendProtocol()) -> tuple[Dataset, Dataset]:
    ds = generate_synthetic(replace(protocol.spec, seed=seed))
    return ds.split(seed, protocol.test_fraction)


def trend_run(variant: str, d: int, seed: int, protocol: TrendProtocol = TrendProtocol()) -> float:
    """Final test accuracy of one fixed-budget run."""
    train, test = trend_data(seed, protocol)
    config = replace(protocol.train, variant=variant, d=d, seed=seed)
    model = build_model(variant, d, protocol.spec.classes, default_desk_config(), seed=seed)
    return train_two_stage(train, model, config, test).final_test_acc


def pixel_baseline(seed: int, protocol: TrendProtocol = TrendProtocol(), epochs: int = 20,
                   lr: float = 0.05) -> float:
    """Softmax regression on raw pixels, the no-pooling reference point."""
    train, test = trend_data(seed, protocol)
    x_tr = train.images.reshape(len(train), -1)
    x_te = test.images.reshape(len(test), -1)
    mean = x_tr.mean(axis=0)
    x_tr, x_te = x_tr - mean, x_te - mean
    rng = np.random.default_rng([seed, 0xBA5E])
    w = {"W": np.zeros((x_tr.shape[1], protocol.spec.classes))}
    cfg = replace(protocol.train, weight_decay=5e-4)
    state: dict = {}
    bs = protocol.train.batch_size
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for s in range(0, len(order), bs):
            idx = order[s:s + bs]
            _, tape = ad.record(lambda p: ad.softmax_cross_entropy(ad.matmul(x_tr[idx], p["W"]),
                                                                   train.labels[idx]), w)
            w, state = sgd_step(w, ad.backward(tape, 1.0), state, cfg, lr)
    return float(np.mean((x_te @ w["W"]).argmax(axis=1) == test.labels))
