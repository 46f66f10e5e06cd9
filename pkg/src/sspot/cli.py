"""Command-line entry point: ``sspot synth|train|eval|predict|gradcheck|export-features``.

Settings resolve as built-in defaults, then the ``--config`` JSON file, then
flags given on the command line. The resolved settings are written to
``<out>/config.resolved.json`` before the command runs, and passing that file
back through ``--config`` repeats the run.

Exit status: 0 success, 1 validation failure (bad input, failed check),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

log = logging.getLogger("sspot")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SPECS = ("default", "temporal")


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    out: str = "."
    # data
    dataset: str | None = None
    spec: str = "default"
    days: int = 40
    test_days: int = 0
    drop_rate: float = 0.0
    # model
    variant: str = "3d"
    capacity: float = 1.0
    box_activation: str = "linear"
    # training
    mode: str = "semi"
    lam: float = 1.0
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 5e-4
    alpha: float = 5.0
    beta: float = 7.0
    gamma: float = 0.5
    split: str = "train"
    eval_split: str | None = None
    eval_every: int = 0
    augment: bool = False
    # eval / predict / export
    checkpoint: str | None = None
    conf_floor: float | None = None
    nms: bool = False
    sample: int = 0
    channel: int = 0
    n_days: int | None = None
    # gradcheck
    samples_per_tensor: int = 4

    @classmethod
    def resolve(cls, command: str, file_values: dict, flag_values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**file_values, **{k: v for k, v in flag_values.items() if k in known}}
        merged["command"] = command
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.spec not in SPECS:
            raise ValidationError(f"spec must be one of {SPECS}, got {self.spec!r}")
        if self.variant not in ("2d", "3d"):
            raise ValidationError(f"variant must be 2d or 3d, got {self.variant!r}")
        if self.mode not in ("semi", "supervised"):
            raise ValidationError(f"mode must be semi or supervised, got {self.mode!r}")
        if self.days < 1 or not 0 <= self.test_days < self.days:
            raise ValidationError("need days >= 1 and 0 <= test_days < days")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValidationError("drop rate must lie in [0, 1)")
        if self.lam < 0 or self.capacity <= 0 or self.epochs < 1:
            raise ValidationError("lambda must be >= 0, capacity > 0 and epochs >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file of settings; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="sspot", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, argument_default=argparse.SUPPRESS)

    p = add("synth", "write a synthetic dataset")
    p.add_argument("--days", type=int)
    p.add_argument("--test-days", type=int, dest="test_days")
    p.add_argument("--drop-rate", type=float, dest="drop_rate")
    p.add_argument("--spec", choices=SPECS)

    p = add("train", "train a model on a dataset")
    p.add_argument("--dataset")
    p.add_argument("--mode", choices=["semi", "supervised"])
    p.add_argument("--variant", choices=["2d", "3d"])
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--capacity", type=float)
    p.add_argument("--box-activation", choices=["linear", "relu"], dest="box_activation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--split")
    p.add_argument("--eval-split", dest="eval_split")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--augment", action="store_true", help="seeded random flips and circular shifts of training samples")

    p = add("eval", "score a checkpoint on a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--conf-floor", type=float, dest="conf_floor")
    p.add_argument("--nms", action="store_true")

    p = add("predict", "draw ground truth and confident predictions for one sample")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--sample", type=int)
    p.add_argument("--channel", type=int)
    p.add_argument("--conf-floor", type=float, dest="conf_floor")

    p = add("gradcheck", "finite-difference check of every differentiable op")
    p.add_argument("--samples-per-tensor", type=int, dest="samples_per_tensor")

    p = add("export-features", "write code-layer vectors per cell as CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--n-days", type=int, dest="n_days")
    p.add_argument("--split")
    return parser


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise ValidationError(f"{cfg.command} needs --{' --'.join(m.replace('_', '-') for m in missing)}")


def _load_params(cfg: RunConfig):
    from .checkpoint import load_checkpoint

    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise ValidationError(f"checkpoint {path} does not exist")
    params, _ = load_checkpoint(path)
    return params


def _open_dataset(cfg: RunConfig):
    from .data import Dataset

    path = Path(cfg.dataset)
    if not (path / "manifest.json").is_file():
        raise ValidationError(f"no dataset at {path} (manifest.json missing)")
    return Dataset(path)


def cmd_synth(cfg: RunConfig) -> int:
    from .data import SyntheticEventSpec, generate_synthetic_dataset

    spec_cls = SyntheticEventSpec.default if cfg.spec == "default" else SyntheticEventSpec.temporal
    spec = spec_cls(drop_rate=cfg.drop_rate)
    ds = generate_synthetic_dataset(spec, cfg.out, cfg.days, cfg.seed, test_days=cfg.test_days)
    m = ds.manifest
    print(f"wrote {m.sample_count} samples to {cfg.out}")
    print(f"  shape [C,T,H,W] = {list(m.sample_shape)}; classes {m.class_names}")
    print("  splits: " + ", ".join(f"{k}={len(v)}" for k, v in m.splits.items()))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .training import TrainConfig, model_config_for, train

    _require(cfg, "dataset")
    ds = _open_dataset(cfg)
    model = model_config_for(ds, cfg.variant, capacity_multiplier=cfg.capacity, box_activation=cfg.box_activation)
    tc = TrainConfig(
        dataset=cfg.dataset, out_dir=cfg.out, model=model, mode=cfg.mode, lam=cfg.lam, epochs=cfg.epochs,
        seed=cfg.seed, lr=cfg.lr, weight_decay=cfg.weight_decay, alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma,
        split=cfg.split, eval_split=cfg.eval_split, eval_every=cfg.eval_every, augment=cfg.augment,
    )
    result = train(tc)
    print(f"trained {cfg.epochs} epochs; final mean loss {result.epoch_losses[-1]:.6g}")
    print(f"checkpoint {result.checkpoint_path}; metrics {result.metrics_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from .evaluation import evaluate_dataset
    from .training import check_compatible

    _require(cfg, "checkpoint", "dataset")
    params = _load_params(cfg)
    ds = _open_dataset(cfg)
    check_compatible(params.config, ds)
    report = evaluate_dataset(params, ds, ds.split(cfg.split), conf_floor=cfg.conf_floor or 0.0, use_nms=cfg.nms)
    print(report.table())
    out = Path(cfg.out) / "eval.json"
    out.write_text(report.to_json() + "\n")
    print(f"report {out}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    from .evaluation import extract_detections, predict_heads
    from .overlay import render_overlay, write_ppm
    from .training import check_compatible

    _require(cfg, "checkpoint", "dataset")
    params = _load_params(cfg)
    ds = _open_dataset(cfg)
    check_compatible(params.config, ds)
    m = ds.manifest
    if not 0 <= cfg.channel < m.channels:
        raise ValidationError(f"channel {cfg.channel} outside [0, {m.channels})")
    if not 0 <= cfg.sample < len(ds):
        raise ValidationError(f"sample {cfg.sample} outside [0, {len(ds)})")
    floor = 0.8 if cfg.conf_floor is None else cfg.conf_floor
    x, boxes = ds.load_sample(cfg.sample)
    frames = list(params.config.labeled_frames)
    dets = extract_detections(*predict_heads(params, x), params.config.grid, floor, frames)
    for f, frame_dets in zip(frames, dets):
        gt = [b for b in boxes if b.frame == f]
        img = render_overlay(x.data[cfg.channel, f], gt, [d.box for d in frame_dets])
        path = write_ppm(Path(cfg.out) / f"day{cfg.sample:05d}_frame{f}_ch{cfg.channel}.ppm", img)
        print(f"{path}: {len(gt)} ground truth, {len(frame_dets)} predictions >= {floor:g}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=cfg.seed, samples_per_tensor=cfg.samples_per_tensor)
    print(report.table())
    (Path(cfg.out) / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_INVALID


def export_features(params, dataset, indices, path: str | Path) -> int:
    """One CSV row per (day, frame, cell); returns the row count."""
    from .geometry import assign_targets
    from .model import encoder_layers
    from .tensor import no_grad

    cfg = params.config
    grid = cfg.grid
    width = cfg.widths[-1]
    header = ["day", "frame", "row", "col", "label"] + [f"f{i}" for i in range(width)]
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for day in indices:
            x, boxes = dataset.load_sample(int(day))
            with no_grad():
                for code in encoder_layers(params, x):
                    pass
            feats = code.data  # [width, T, rows, cols]
            target = assign_targets(boxes, grid, cfg.labeled_frames, cfg.num_classes)
            slot = {f: k for k, f in enumerate(cfg.labeled_frames)}
            for t in range(feats.shape[1]):
                for r in range(grid.rows):
                    for c in range(grid.cols):
                        label = -1
                        if t in slot and target.obj[slot[t], r, c] > 0:
                            label = int(target.class_ids[slot[t], r, c])
                        writer.writerow([int(day), t, r, c, label] + [repr(float(v)) for v in feats[:, t, r, c]])
                        rows += 1
    return rows


def cmd_export_features(cfg: RunConfig) -> int:
    from .training import check_compatible

    _require(cfg, "checkpoint", "dataset")
    params = _load_params(cfg)
    ds = _open_dataset(cfg)
    check_compatible(params.config, ds)
    indices = ds.split(cfg.split)
    if cfg.n_days is not None:
        indices = indices[: cfg.n_days]
    path = Path(cfg.out) / "features.csv"
    n = export_features(params, ds, indices, path)
    print(f"wrote {n} rows of {params.config.widths[-1]} features to {path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "export-features": cmd_export_features,
}


def main(argv: list[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    logging.basicConfig(level=args.pop("log_level", "INFO"), format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    try:
        file_values = {}
        if "config" in args:
            config_path = Path(args.pop("config"))
            try:
                file_values = json.loads(config_path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ValidationError(f"cannot read config {config_path}: {exc}") from None
            file_values.pop("command", None)
        cfg = RunConfig.resolve(command, file_values, args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        return COMMANDS[command](cfg)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        # CheckpointError and ValidationError are ValueErrors
        log.error("%s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
