"""Two-stage SGD training of backbone + pooling head.

Stage 1 fits only the classifier ``P`` on frozen features with softmax
cross-entropy (step size ``stage1_lr``). Stage 2 fine-tunes every parameter with momentum SGD, weight
decay and horizontal-flip augmentation. The learning rate of each stage
starts at ``lr`` and is multiplied by ``anneal_factor`` every
``anneal_every`` epochs of that stage.
"""
from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import pooling
from . import tensor as T
from .autodiff import NumericalError
from .backbone import BackboneConfig, BackboneParams, backbone_forward, init_backbone
from .data import Dataset, read_tensors, write_tensors

logger = logging.getLogger(__name__)

BACKBONE_PREFIX = "backbone."
EVAL_CHUNK = 128


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr: float = 1e-3
    # classifier-only stage on unit-norm pooled features needs a far larger step
    stage1_lr: float = 0.3
    anneal_factor: float = 0.5
    anneal_every: int = 10
    epochs_stage1: int = 5
    epochs_stage2: int = 20
    seed: int = 0
    normalize: bool = True
    d: int = 64
    variant: str = "HBP"

    def validate(self) -> None:
        if self.batch_size <= 0 or self.anneal_every <= 0 or self.d <= 0:
            raise ValueError("batch_size, anneal_every and d must be positive")
        if self.lr <= 0 or self.stage1_lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive; momentum and weight_decay non-negative")
        if not 0 < self.anneal_factor <= 1:
            raise ValueError(f"anneal_factor must lie in (0, 1], got {self.anneal_factor}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be non-negative")
        self.variant = pooling.check_variant(self.variant)

    def lr_at(self, epoch: int, stage: int = 2) -> float:
        """Learning rate for the 0-based epoch index within a stage."""
        base = self.stage1_lr if stage == 1 else self.lr
        return base * self.anneal_factor ** (epoch // self.anneal_every)


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    """A pooling head, optionally on top of a backbone.

    Without a backbone the model consumes precomputed feature-map triples.
    """

    variant: str
    head: dict[str, np.ndarray]
    normalize: bool = True
    backbone: BackboneParams | None = None

    def __post_init__(self):
        self.variant = pooling.check_variant(self.variant)
        names = ["U", "V", "S", "P"] if self.variant == "HBP" else ["U", "V", "P"]
        if sorted(self.head) != sorted(names):
            raise ValueError(f"{self.variant} head needs {names}, got {sorted(self.head)}")
        # constructor validates shapes
        (pooling.HbpParams if self.variant == "HBP" else pooling.FbpParams)(**self.head)

    @property
    def c(self) -> int:
        return self.head["U"].shape[0]

    @property
    def d(self) -> int:
        return self.head["U"].shape[1]

    @property
    def o(self) -> int:
        return self.head["P"].shape[1]

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.head)
        if self.backbone is not None:
            out.update({BACKBONE_PREFIX + k: v for k, v in self.backbone.kernels.items()})
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            if name.startswith(BACKBONE_PREFIX):
                self.backbone.kernels[name[len(BACKBONE_PREFIX):]] = value
            else:
                self.head[name] = value

    def quantized(self) -> "Model":
        """Copy with every weight rounded to float32, as stored in a checkpoint."""
        q = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
        bb = None
        if self.backbone is not None:
            bb = BackboneParams(self.backbone.config, {k: q(v) for k, v in self.backbone.kernels.items()})
        return Model(self.variant, {k: q(v) for k, v in self.head.items()}, self.normalize, bb)

    def taps(self, inputs, params=None, ops=T):
        """All three feature maps for a batch of images (or the given triple)."""
        if self.backbone is None:
            return tuple(inputs)
        params = params if params is not None else self.params()
        kernels = {k[len(BACKBONE_PREFIX):]: v for k, v in params.items() if k.startswith(BACKBONE_PREFIX)}
        return backbone_forward(inputs, kernels, self.backbone.config, ops)

    def select(self, taps):
        """Maps consumed by the head: last layer (FBP), last two (CBP) or all three (HBP)."""
        return list(taps[3 - pooling.n_layers(self.variant):])

    def scores(self, inputs, params=None, ops=T):
        params = params if params is not None else self.params()
        maps = self.select(self.taps(inputs, params, ops))
        return pooling.head_scores(maps, params, self.variant, self.normalize, ops)

    def pooled(self, inputs):
        """Normalized (if enabled) concatenated pooled features, eager."""
        maps = self.select(self.taps(inputs))
        blocks = pooling.pooled_blocks(maps, self.head, self.variant)
        if self.normalize:
            blocks = [T.l2_normalize(T.signed_sqrt(b)) for b in blocks]
        return blocks[0] if len(blocks) == 1 else T.concat(blocks)


def build_model(
    variant: str,
    d: int,
    n_classes: int,
    backbone: BackboneConfig | None = None,
    channels: int | None = None,
    normalize: bool = True,
    seed: int = 0,
) -> Model:
    """Initialize a model; pass ``backbone`` for images or ``channels`` for feature inputs."""
    rng = np.random.default_rng([seed, 0xB11])
    bb = None
    if backbone is not None:
        bb = init_backbone(backbone, rng)
        channels = backbone.tap_channels
    if channels is None:
        raise ValueError("need a backbone config or a channel count")
    head = pooling.init_head(variant, channels, d, n_classes, rng).as_dict()
    return Model(variant, head, normalize, bb)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: dict, grads: dict, state: dict, config: TrainConfig, lr: float | None = None):
    """Momentum SGD with L2 weight decay; returns new ``(params, state)``.

    ``v <- momentum * v - lr * (g + weight_decay * theta)``, ``theta <- theta + v``.
    Only names present in ``grads`` are updated.
    """
    lr = config.lr if lr is None else lr
    new_params, new_state = dict(params), dict(state)
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {name!r} ({bad} of {g.size} entries)")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ValueError(f"optimizer state for {name!r} has shape {v.shape}, parameter {theta.shape}")
        v = config.momentum * v - lr * (g + config.weight_decay * theta)
        new_state[name] = v
        new_params[name] = theta + v
    return new_params, new_state


# ---------------------------------------------------------------------------
# evaluation


def predict_scores(dataset: Dataset, model: Model) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), EVAL_CHUNK):
        part = dataset.subset(np.arange(start, min(start + EVAL_CHUNK, len(dataset))))
        out.append(model.scores(part.inputs))
    return np.concatenate(out) if out else np.zeros((0, model.o))


def evaluate(dataset: Dataset, model: Model) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(dataset) == 0:
        return 0.0
    pred = predict_scores(dataset, model).argmax(axis=1)
    return float(np.mean(pred == dataset.labels))


def mean_loss(dataset: Dataset, model: Model) -> float:
    scores = predict_scores(dataset, model)
    return float(ad.softmax_xent_kernel(scores, dataset.labels)[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRow:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float
    lr: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    checkpoint: Path | None = None
    wall_clock: float = 0.0
    final_train_acc: float = 0.0
    final_test_acc: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,loss,train_acc,test_acc,lr\n")
        for r in self.rows:
            buf.write(f"{r.epoch},{r.loss:.10f},{r.train_acc:.6f},{r.test_acc:.6f},{r.lr:.10g}\n")
        return buf.getvalue()

    def summary(self) -> str:
        last = self.rows[-1] if self.rows else None
        lines = [f"epochs run: {len(self.rows) - 1}"]
        if last is not None:
            lines.append(f"last epoch loss: {last.loss:.6f}")
        lines += [
            f"final train accuracy: {self.final_train_acc:.6f}",
            f"final test accuracy: {self.final_test_acc:.6f}",
            f"checkpoint: {self.checkpoint if self.checkpoint else '-'}",
            f"wall clock: {self.wall_clock:.1f} s",
        ]
        return "\n".join(lines)


def _flip(inputs, mask):
    if not mask.any():
        return inputs
    out = inputs.copy()
    out[mask] = out[mask][:, :, ::-1, :]
    return out


def _run_epoch(order, batch_size, step: Callable[[np.ndarray], tuple[float, int]]):
    total_loss, correct = 0.0, 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        loss, hits = step(idx)
        total_loss += loss * len(idx)
        correct += hits
    return total_loss / len(order), correct / len(order)


def train_two_stage(
    train: Dataset,
    model: Model,
    config: TrainConfig,
    test: Dataset | None = None,
    checkpoint: str | Path | None = None,
    on_epoch: Callable[[EpochRow], None] | None = None,
) -> TrainReport:
    """Train ``model`` in place and return the per-epoch report.

    Row 0 is the evaluation at initialization. ``train_acc`` of later rows is
    the running accuracy over that epoch's minibatches. If a checkpoint path is
    given it is rewritten after every finite epoch, so a diverging run leaves
    the last good parameters on disk.
    """
    config.validate()
    if len(train) == 0:
        raise TrainingError("training set is empty")
    if train.n_classes != model.o:
        raise TrainingError(f"dataset has {train.n_classes} classes, model scores {model.o}")
    t0 = time.perf_counter()
    rng = np.random.default_rng([config.seed, 0x7EA1])
    report = TrainReport(checkpoint=Path(checkpoint) if checkpoint else None)

    def test_acc() -> float:
        return evaluate(test, model) if test is not None and len(test) else 0.0

    def finish_epoch(row: EpochRow) -> None:
        if not np.isfinite(row.loss):
            raise NumericalError(f"loss became non-finite at epoch {row.epoch}")
        for name, value in model.params().items():
            if not np.all(np.isfinite(value.astype(np.float32))):
                raise NumericalError(f"parameter {name} left the float32 range at epoch {row.epoch}")
        report.rows.append(row)
        if report.checkpoint is not None:
            save_checkpoint(report.checkpoint, model)
        logger.info("epoch %d loss %.4f train %.3f test %.3f lr %.3g",
                    row.epoch, row.loss, row.train_acc, row.test_acc, row.lr)
        if on_epoch is not None:
            on_epoch(row)

    first_stage = 1 if config.epochs_stage1 else 2
    try:
        finish_epoch(EpochRow(0, mean_loss(train, model), evaluate(train, model), test_acc(),
                              config.lr_at(0, first_stage)))
        _train_stages(train, model, config, rng, test_acc, finish_epoch)
    except NumericalError as exc:
        where = f"; last good checkpoint kept at {report.checkpoint}" if report.checkpoint else ""
        raise TrainingError(f"training diverged: {exc}{where}") from exc

    # checkpoints hold float32; the final accuracies are those of exactly those weights
    if report.checkpoint is not None:
        save_checkpoint(report.checkpoint, model)
    stored = model.quantized()
    report.final_train_acc = evaluate(train, stored)
    report.final_test_acc = evaluate(test, stored) if test is not None and len(test) else 0.0
    report.wall_clock = time.perf_counter() - t0
    return report


def _train_stages(train, model, config, rng, test_acc, finish_epoch):
    epoch = 0
    # stage 1: classifier only, on frozen pooled features
    if config.epochs_stage1:
        feats = np.concatenate([
            model.pooled(train.subset(np.arange(s, min(s + EVAL_CHUNK, len(train)))).inputs)
            for s in range(0, len(train), EVAL_CHUNK)
        ])
        state: dict = {}
        for e in range(config.epochs_stage1):
            lr = config.lr_at(e, stage=1)

            def step(idx):
                nonlocal state
                y = train.labels[idx]
                holder = {}

                def fn(p):
                    holder["scores"] = ad.project(feats[idx], p["P"])
                    return ad.softmax_cross_entropy(holder["scores"], y)

                out, tape = ad.record(fn, {"P": model.head["P"]})
                grads = ad.backward(tape, 1.0)
                new, state = sgd_step({"P": model.head["P"]}, grads, state, config, lr)
                model.head["P"] = new["P"]
                return float(out.value), int(np.sum(holder["scores"].value.argmax(axis=1) == y))

            epoch += 1
            loss, acc = _run_epoch(rng.permutation(len(train)), config.batch_size, step)
            finish_epoch(EpochRow(epoch, loss, acc, test_acc(), lr))

    # stage 2: everything, with horizontal flips on image inputs
    if config.epochs_stage2:
        state = {}
        for e in range(config.epochs_stage2):
            lr = config.lr_at(e, stage=2)

            def step(idx):
                nonlocal state
                y = train.labels[idx]
                if train.images is not None:
                    inputs = _flip(train.images[idx], rng.random(len(idx)) < 0.5)
                else:
                    inputs = tuple(f[idx] for f in train.features)
                params = model.params()
                holder = {}

                def fn(p):
                    holder["scores"] = model.scores(inputs, p, ad)
                    return ad.softmax_cross_entropy(holder["scores"], y)

                out, tape = ad.record(fn, params)
                grads = ad.backward(tape, 1.0)
                new, state = sgd_step(params, grads, state, config, lr)
                model.set_params(new)
                return float(out.value), int(np.sum(holder["scores"].value.argmax(axis=1) == y))

            epoch += 1
            loss, acc = _run_epoch(rng.permutation(len(train)), config.batch_size, step)
            finish_epoch(EpochRow(epoch, loss, acc, test_acc(), lr))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_tensors(model: Model) -> dict[str, np.ndarray]:
    variant_id = pooling.VARIANTS.index(model.variant)
    out = {"header": np.array([model.c, model.d, model.o, variant_id, int(model.normalize)], dtype=float)}
    out.update(model.head)
    if model.backbone is not None:
        cfg = model.backbone.config
        layout = [cfg.input_size, cfg.tap_channels]
        for ch, pool in cfg.stem:
            layout += [ch, int(pool)]
        out["backbone.layout"] = np.array(layout, dtype=float)
        out.update({BACKBONE_PREFIX + k: v for k, v in model.backbone.kernels.items()})
    return out


def save_checkpoint(path, model: Model) -> None:
    write_tensors(path, checkpoint_tensors(model))


def model_from_tensors(entries: dict[str, np.ndarray]) -> Model:
    if "header" not in entries:
        raise ValueError("checkpoint has no header entry")
    c, d, o, variant_id, norm = (int(round(v)) for v in entries["header"])
    variant = pooling.VARIANTS[variant_id]
    names = ["U", "V", "S", "P"] if variant == "HBP" else ["U", "V", "P"]
    missing = [n for n in names if n not in entries]
    if missing:
        raise ValueError(f"checkpoint lacks head entries {missing}")
    head = {n: entries[n] for n in names}
    backbone = None
    if "backbone.layout" in entries:
        layout = [int(round(v)) for v in entries["backbone.layout"]]
        stem = tuple((layout[i], bool(layout[i + 1])) for i in range(2, len(layout), 2))
        cfg = BackboneConfig(input_size=layout[0], stem=stem, tap_channels=layout[1])
        kernels = {k: entries[BACKBONE_PREFIX + k] for k in cfg.kernel_shapes()}
        backbone = BackboneParams(cfg, kernels)
    model = Model(variant, head, bool(norm), backbone)
    if (model.c, model.d, model.o) != (c, d, o):
        raise ValueError(f"header dims {(c, d, o)} disagree with stored tensors {(model.c, model.d, model.o)}")
    return model


def load_checkpoint(path) -> Model:
    return model_from_tensors(read_tensors(path))
