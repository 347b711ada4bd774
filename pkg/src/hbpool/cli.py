"""``hbpool`` command line.

Every setting lives in a flat ``key = value`` namespace. Values come from the
built-in defaults, then ``--config FILE``, then command-line flags (one flag
per key, dashes for underscores).

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path


from . import checks, data, pooling, vis
from .autodiff import NumericalError
from .backbone import BackboneConfig
from .data import SyntheticSpec
from .tensor import ShapeError
from .trainer import (
    TrainConfig,
    TrainingError,
    build_model,
    evaluate,
    load_checkpoint,
    train_two_stage,
)

logger = logging.getLogger("hbpool")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    # optimization (TrainConfig)
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr: float = 1e-3
    stage1_lr: float = 0.3
    anneal_factor: float = 0.5
    anneal_every: int = 10
    epochs_stage1: int = 5
    epochs_stage2: int = 20
    seed: int = 0
    normalize: bool = True
    d: int = 64
    variant: str = "hbp"
    # synthetic data (SyntheticSpec)
    classes: int = 16
    image_size: int = 32
    palette_a: int = 4
    palette_b: int = 4
    noise_std: float = 0.1
    samples_per_class: int = 100
    patch_size: int = 10
    test_fraction: float = 0.2
    # backbone: comma list of stem stages, "16p" = 16 channels then 2x2 maxpool
    stem: str = "16p,32p"
    tap_channels: int = 32
    # paths; an empty data path means "generate the synthetic set in memory"
    data: str = ""
    out: str = "out"
    checkpoint: str = ""
    image: str = ""
    tensors: str = ""
    # self-checks
    n: int = 100
    tolerance: float = 1e-5
    op: str = ""
    gradcheck_seeds: int = 20
    inject_fault: bool = False
    explicit: set = field(default_factory=set, repr=False, compare=False)

    # -- conversions -------------------------------------------------------
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, momentum=self.momentum, weight_decay=self.weight_decay,
            lr=self.lr, stage1_lr=self.stage1_lr, anneal_factor=self.anneal_factor,
            anneal_every=self.anneal_every, epochs_stage1=self.epochs_stage1,
            epochs_stage2=self.epochs_stage2, seed=self.seed, normalize=self.normalize,
            d=self.d, variant=self.variant.upper(),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            classes=self.classes, image_size=self.image_size, palette_a=self.palette_a,
            palette_b=self.palette_b, noise_std=self.noise_std,
            samples_per_class=self.samples_per_class, seed=self.seed, patch_size=self.patch_size,
        )

    def backbone_config(self) -> BackboneConfig:
        stages = []
        for token in filter(None, (t.strip() for t in self.stem.split(","))):
            pool = token.endswith("p")
            stages.append((int(token.rstrip("p")), pool))
        return BackboneConfig(input_size=self.image_size, stem=tuple(stages),
                              tap_channels=self.tap_channels, seed=self.seed)

    def dump(self) -> str:
        lines = []
        for f in config_fields():
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def effective(self) -> dict:
        return {f.name: getattr(self, f.name) for f in config_fields()}


def config_fields():
    return [f for f in fields(CliConfig) if f.name != "explicit"]


_TYPES = {f.name: f.type for f in config_fields()}


def parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = parse_value(key, raw)
    return values


def apply_values(cfg: CliConfig, values: dict) -> CliConfig:
    cfg = dataclasses.replace(cfg, **values)
    cfg.explicit = set(cfg.explicit) | set(values)
    return cfg


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(), str(path))


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


SUBCOMMANDS = ("train", "eval", "pool", "gradcheck", "oracle-check", "vis", "gen-data", "dump-config")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hbpool", description="Hierarchical bilinear pooling toolkit.")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    for f in config_fields():
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, dest=f.name, action="store_const", const=True, default=argparse.SUPPRESS)
            parser.add_argument("--no-" + f.name.replace("_", "-"), dest=f.name, action="store_const",
                                const=False, default=argparse.SUPPRESS)
        else:
            parser.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, metavar=f.name.upper())
    return parser


def resolve_config(args: argparse.Namespace) -> CliConfig:
    cfg = CliConfig()
    if args.config:
        cfg = apply_values(cfg, load_config_file(args.config))
    flags = {}
    for f in config_fields():
        if hasattr(args, f.name):
            value = getattr(args, f.name)
            flags[f.name] = value if isinstance(value, bool) else parse_value(f.name, value)
    cfg = apply_values(cfg, flags)
    if cfg.variant.upper() not in pooling.VARIANTS:
        raise UsageError(f"variant must be one of fbp, cbp, hbp (got {cfg.variant!r})")
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _load_dataset(cfg: CliConfig):
    if cfg.data:
        path = Path(cfg.data)
        if not path.exists():
            raise FileNotFoundError(f"dataset path {path} does not exist")
        ds = data.load_manifest(path, n_classes=cfg.classes)
    else:
        ds = data.generate_synthetic(cfg.synthetic_spec())
    return ds.split(cfg.seed, cfg.test_fraction)


def _checkpoint_path(cfg: CliConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "checkpoint.hbpt"


def cmd_train(cfg: CliConfig) -> int:
    train, test = _load_dataset(cfg)
    tc = cfg.train_config()
    model = build_model(tc.variant, tc.d, train.n_classes, cfg.backbone_config(), normalize=tc.normalize, seed=tc.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = _checkpoint_path(cfg)
    report = train_two_stage(train, model, tc, test, checkpoint=ckpt)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return EXIT_OK


def cmd_eval(cfg: CliConfig) -> int:
    model = load_checkpoint(_checkpoint_path(cfg))
    train, test = _load_dataset(cfg)
    print(f"train_acc,{evaluate(train, model):.6f}")
    print(f"test_acc,{evaluate(test, model):.6f}")
    return EXIT_OK


def cmd_pool(cfg: CliConfig) -> int:
    if not cfg.tensors:
        raise UsageError("pool needs --tensors FILE holding X[, Y[, Z]]")
    model = load_checkpoint(_checkpoint_path(cfg))
    if "normalize" in cfg.explicit:
        model.normalize = cfg.normalize
    entries = data.read_tensors(cfg.tensors)
    names = ["X", "Y", "Z"][:pooling.n_layers(model.variant)]
    missing = [n for n in names if n not in entries]
    if missing:
        raise UsageError(f"{model.variant} checkpoint needs tensors {names}; missing {missing}")
    maps = [entries[n] for n in names]
    single = maps[0].ndim == 3
    if single:
        maps = [m[None] for m in maps]
    scores = pooling.head_scores(maps, model.head, model.variant, model.normalize)
    print(",".join(f"score_{j}" for j in range(model.o)))
    for row in scores:
        print(",".join(repr(float(v)) for v in row))
    return EXIT_OK


def cmd_gradcheck(cfg: CliConfig) -> int:
    names = [cfg.op] if cfg.op else None
    try:
        outcomes = checks.gradcheck_suite(names, seeds=range(cfg.gradcheck_seeds), tolerance=cfg.tolerance)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    failed = 0
    by_case: dict[str, list] = {}
    for o in outcomes:
        by_case.setdefault(o.name, []).append(o)
    for name, runs in by_case.items():
        worst = max(r.report.worst()[1] for r in runs)
        bad = [r.seed for r in runs if not r.report.passed]
        failed += len(bad)
        status = "ok" if not bad else f"FAIL seeds {bad}"
        print(f"{name:24s} max_rel_err={worst:.3e} {status}")
    print(f"tolerance {cfg.tolerance:g}: {'all passed' if not failed else f'{failed} failures'}")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_oracle_check(cfg: CliConfig) -> int:
    fault = 1e-3 if cfg.inject_fault else 0.0
    result = checks.oracle_suite(cfg.n, seed=cfg.seed, fault=fault)
    print(f"instances {cfg.n} max_rel_err {result.worst:.3e} tolerance {result.tolerance:g}")
    return EXIT_OK if result.passed else EXIT_NUMERIC


def cmd_vis(cfg: CliConfig) -> int:
    if not cfg.image:
        raise UsageError("vis needs --image FILE.ppm")
    model = load_checkpoint(_checkpoint_path(cfg))
    if model.backbone is None:
        raise UsageError("vis needs a checkpoint that includes backbone weights")
    image = data.load_ppm(cfg.image)
    size = model.backbone.config.input_size
    if image.shape != (size, size, 3):
        raise ShapeError(f"image is {image.shape[1]}x{image.shape[0]}, checkpoint expects {size}x{size}")
    maps = vis.response_maps(model, image)
    for path in vis.export_maps(maps, cfg.out):
        print(path)
    data.write_tensors(Path(cfg.out) / "maps.hbpt", maps)
    return EXIT_OK


def cmd_gen_data(cfg: CliConfig) -> int:
    ds = data.generate_synthetic(cfg.synthetic_spec())
    manifest = data.write_image_dataset(cfg.out, ds)
    print(f"{len(ds)} images, manifest {manifest}")
    return EXIT_OK


def cmd_dump_config(cfg: CliConfig) -> int:
    sys.stdout.write(cfg.dump())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "pool": cmd_pool,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
    "vis": cmd_vis,
    "gen-data": cmd_gen_data,
    "dump-config": cmd_dump_config,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"hbpool: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, TrainingError, FloatingPointError) as exc:
        print(f"hbpool: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, data.TensorFileError, data.ImageFormatError) as exc:
        print(f"hbpool: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"hbpool: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
