"""``cubemix`` command-line interface.

Exit codes: 0 success, 1 gradient check failure, 2 invalid config, 3 invalid
data, 4 numeric abort. Failures print one JSON line on stderr, e.g.
``{"error": "DataError", "message": "...", "path": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset, synth_dataset, write_dataset
from .errors import ConfigError, DataError, NonFiniteError, NumericAbort
from .gradcheck import run_gradcheck
from .layers import CubeMLPConfig, forward_batch
from .trainer import (
    TrainConfig,
    ablate,
    ablation_csv,
    ablation_table,
    account,
    dim_sweep,
    evaluate_split,
    sweep_csv,
    train,
)

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
SEED_ENV = "CUBEMIX_SEED"


class RunConfig:
    """Parsed config file: model structure, training settings and dataset path."""

    def __init__(self, model: CubeMLPConfig, train: TrainConfig, dataset: Path | None):
        self.model = model
        self.train = train
        self.dataset = dataset

    @classmethod
    def load(cls, path, seed: int | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or "model" not in raw:
            raise ConfigError("config must be an object with a 'model' section")
        unknown = set(raw) - {"model", "train", "dataset"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = CubeMLPConfig.from_dict(raw["model"])
        train_d = dict(raw.get("train", {}))
        if seed is not None:
            train_d["seed"] = seed
        train_cfg = TrainConfig.from_dict(train_d)
        dataset = raw.get("dataset")
        if dataset is not None:
            dataset = Path(dataset)
            if not dataset.is_absolute():
                dataset = path.parent / dataset
        return cls(model, train_cfg, dataset)


def resolve_seed(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _dataset_for(cfg: RunConfig, override) -> Dataset:
    path = Path(override) if override else cfg.dataset
    if path is None:
        raise ConfigError("no dataset path given (config 'dataset' or --data)")
    ds = load_dataset(path)
    if ds.shape != cfg.model.input_shape:
        raise DataError(
            f"dataset cube {ds.shape.as_tuple()} does not match model input "
            f"{cfg.model.input_shape.as_tuple()}",
            path=str(path),
        )
    return ds


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = resolve_seed(args.seed)
    seed = 0 if seed is None else seed
    ds = synth_dataset(seed, args.n, tuple(args.shape), args.noise)
    write_dataset(args.out, ds, projection_seed=seed)
    print(f"wrote {args.n} samples of shape {tuple(args.shape)} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, resolve_seed(args.seed))
    ds = _dataset_for(cfg, args.data)
    out = _out_dir(args.out)

    def progress(e):
        if args.verbose:
            print(f"epoch {e.epoch} lr={e.lr:.2e} loss={e.train_loss:.5f}", file=sys.stderr)

    record = train(cfg.model, cfg.train, ds, progress=progress)
    record.write(out)
    save_checkpoint(out / "best.ckpt", cfg.model, record.params, extra={"best_epoch": record.best_epoch})
    save_checkpoint(out / "final.ckpt", cfg.model, record.final_params)
    _write_json(out / "account.json", account(cfg.model, cfg.train.batch_size))
    print(f"trained {cfg.train.epochs} epochs; train MAE {record.final_train.mae:.5f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model_cfg, params = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = RunConfig.load(args.config)
        if cfg.model != model_cfg:
            raise ConfigError("checkpoint config differs from the config file")
    else:
        cfg = RunConfig(model_cfg, TrainConfig(), None)
    ds = _dataset_for(cfg, args.data)
    if args.split not in ds.splits:
        raise ConfigError(f"unknown split {args.split!r}")
    report = evaluate_split(model_cfg, params, ds.splits[args.split])
    if report is None:
        raise DataError(f"split {args.split!r} is empty")
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.csv").write_text(report.to_csv())
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config, resolve_seed(args.seed))
    ds = _dataset_for(cfg, args.data)
    rows = ablate(cfg.model, ds, cfg.train, jobs=args.jobs)
    out = _out_dir(args.out)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    for row in rows:
        row.record.write(out / f"model{row.model}")
    print(ablation_table(rows))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config, resolve_seed(args.seed))
    ds = _dataset_for(cfg, args.data)
    points = dim_sweep(cfg.model, ds, cfg.train, args.axis, args.values, jobs=args.jobs)
    out = _out_dir(args.out)
    letter = args.axis.upper()[0]
    (out / f"sweep_{letter}.csv").write_text(sweep_csv(points))
    print(sweep_csv(points), end="")
    return EXIT_OK


def _perturb_head(analytic, analytic_x):
    # test hook: corrupt one gradient so the detector must fire
    for name in analytic:
        if name.startswith("head."):
            analytic[name] *= 1.01


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    seed = resolve_seed(args.seed)
    report = run_gradcheck(
        seed=0 if seed is None else seed,
        trials=args.trials,
        perturb=_perturb_head if args.perturb_hook else None,
    )
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM, min-max normalized; a constant image maps to all zeros."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi > lo:
        px = np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        px = np.zeros(img.shape, dtype=np.uint8)
    rows, cols = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def export_features(model_cfg: CubeMLPConfig, params, cube: np.ndarray, out_dir) -> list[Path]:
    """Per block, one L' x D' image and CSV for each of its M' modality slices."""
    out = _out_dir(out_dir)
    collected: list[np.ndarray] = []
    forward_batch(cube[None], model_cfg, params, collect=collected)
    written = []
    for b, feats in enumerate(collected, start=1):
        feats = feats[0]
        for m in range(feats.shape[1]):
            img = feats[:, m, :]
            stem = out / f"block{b}_mod{m + 1}"
            write_pgm(stem.with_suffix(".pgm"), img)
            np.savetxt(stem.with_suffix(".csv"), img, delimiter=",", fmt="%.9g")
            written.append(stem.with_suffix(".pgm"))
    return written


def cmd_export_features(args) -> int:
    model_cfg, params = load_checkpoint(args.checkpoint)
    ds = _dataset_for(RunConfig(model_cfg, TrainConfig(), None), args.data)
    try:
        split, idx = ds.find(args.sample)
    except KeyError:
        raise DataError(f"unknown sample id {args.sample!r}", sample_id=args.sample) from None
    written = export_features(model_cfg, params, ds.splits[split].x[idx], args.out)
    print(f"wrote {len(written)} images to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cubemix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset tree")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--shape", type=int, nargs=3, default=[8, 3, 4], metavar=("L", "M", "D"))
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    def run_args(p, needs_out=True):
        p.add_argument("--config", required=True)
        p.add_argument("--data", help="dataset directory (overrides the config)")
        p.add_argument("--seed", type=int)
        if needs_out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model")
    run_args(p)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the seven unit subsets")
    run_args(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep the final block's output extent on one axis")
    run_args(p)
    p.add_argument("--axis", required=True, choices=["L", "M", "D", "l", "m", "d"])
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the reverse pass")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--perturb-hook", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-features", help="dump per-block feature maps as PGM + CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def _fail(code: int, exc: Exception) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "sample_id", "epoch", "batch"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = value
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, exc)
    except (NumericAbort, NonFiniteError) as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())
