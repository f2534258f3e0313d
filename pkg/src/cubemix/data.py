"""Precomputed-feature datasets and the synthetic multimodal generator.

On-disk layout (all paths relative to the dataset root)::

    manifest.json                 format_version, modalities, target_l, target_d,
                                  splits, label_range, projection_seed
    labels.csv                    header ``id,label``
    samples/<id>/meta.json        {"id": ..., "lengths": {<modality>: length}}
    samples/<id>/<modality>.f32   little-endian float32, row-major (length x width)

Every sample is zero-padded at the tail or truncated to its head to reach
``target_l`` rows, then each modality is mapped to ``target_d`` channels by a
fixed affine projection (identity when the widths already agree).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MissingFileError, NonFiniteDataError, SampleShapeError
from .tensor3 import Shape3, Tensor3

FORMAT_VERSION = 1
LABEL_RANGE = (-3.0, 3.0)
# Per-modality weights on the channel-0 means that define the synthetic label.
SYNTH_WEIGHTS = (1.5, 1.0, 0.5)
DEFAULT_MODALITIES = ("text", "audio", "visual")
SPLIT_NAMES = ("train", "val", "test")
_F32LE = np.dtype("<f4")


@dataclass
class RawSample:
    id: str
    features: dict[str, np.ndarray]
    label: float


@dataclass
class AlignedSample:
    id: str
    cube: Tensor3
    label: float


@dataclass
class Split:
    ids: list[str]
    x: np.ndarray  # (N, L, M, D)
    y: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.ids)

    def samples(self):
        for i, sid in enumerate(self.ids):
            yield AlignedSample(sid, Tensor3(self.x[i], dtype=self.x.dtype), float(self.y[i]))

    def index(self, sample_id: str) -> int:
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise KeyError(sample_id) from None


@dataclass
class Dataset:
    shape: Shape3
    modalities: list[str]
    splits: dict[str, Split] = field(default_factory=dict)

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def val(self) -> Split:
        return self.splits["val"]

    @property
    def test(self) -> Split:
        return self.splits["test"]

    def find(self, sample_id: str) -> tuple[str, int]:
        for name, split in self.splits.items():
            if sample_id in split.ids:
                return name, split.index(sample_id)
        raise KeyError(sample_id)

    def pooled(self) -> "Dataset":
        """Same samples with every split folded into ``train``."""
        names = [n for n in SPLIT_NAMES if n in self.splits]
        ids = [i for n in names for i in self.splits[n].ids]
        x = np.concatenate([self.splits[n].x for n in names])
        y = np.concatenate([self.splits[n].y for n in names])
        empty = lambda: Split([], x[:0], y[:0])  # noqa: E731
        return Dataset(self.shape, list(self.modalities), {"train": Split(ids, x, y), "val": empty(), "test": empty()})


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


def pad_or_truncate(seq, target_l: int) -> np.ndarray:
    """Zero-pad at the tail or keep the first ``target_l`` rows."""
    if target_l < 1:
        raise ValueError("target_l must be >= 1")
    seq = np.asarray(seq)
    if seq.ndim != 2:
        raise ValueError(f"expected a (length, width) matrix, got ndim={seq.ndim}")
    n = seq.shape[0]
    if n >= target_l:
        return seq[:target_l].copy()
    out = np.zeros((target_l, seq.shape[1]), dtype=seq.dtype)
    out[:n] = seq
    return out


def make_projection(width: int, target_d: int, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (width -> target_d) projection for modality ``index``; identity if widths agree."""
    if width == target_d:
        return np.eye(width), np.zeros(target_d)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2, index)))
    w = rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, target_d))
    return w, np.zeros(target_d)


def project_channels(seq, target_d: int, proj) -> np.ndarray:
    """Row-wise affine map to ``target_d`` channels. ``proj`` is a matrix or (matrix, bias)."""
    seq = np.asarray(seq)
    if isinstance(proj, tuple):
        w, b = proj
    else:
        w, b = proj, np.zeros(target_d)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.shape != (seq.shape[1], target_d):
        raise SampleShapeError(
            f"projection {w.shape} does not map width {seq.shape[1]} to {target_d}"
        )
    return (seq.astype(np.float64) @ w + b).astype(seq.dtype)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synthetic_label(cube) -> float:
    """clamp(sum_m w_m * mean_l cube[l, m, 0], -3, 3) for the first three modalities."""
    cube = np.asarray(cube.array if isinstance(cube, Tensor3) else cube, dtype=np.float64)
    means = cube[:, :, 0].mean(axis=0)
    weights = np.zeros(cube.shape[1])
    k = min(len(SYNTH_WEIGHTS), cube.shape[1])
    weights[:k] = SYNTH_WEIGHTS[:k]
    return float(np.clip(float(weights @ means), *LABEL_RANGE))


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(n * 0.70)
    n_val = int(n * 0.15)
    return n_train, n_val, n - n_train - n_val


def synth_dataset(
    seed: int,
    n_samples: int,
    shape=(8, 3, 4),
    noise_sigma: float = 0.0,
    dtype=np.float32,
    ar_coef: float = 0.8,
) -> Dataset:
    """Seeded multimodal cubes with a known label function.

    Each (modality, channel) sequence is a per-sample Gaussian level plus a
    stationary AR(1) Gaussian process of standard deviation 0.5.
    """
    shape = Shape3.of(shape)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(3,)))
    l, m, d = shape.as_tuple()
    level = rng.normal(0.0, 1.0, size=(n_samples, 1, m, d))
    innov = rng.normal(0.0, 1.0, size=(n_samples, l, m, d))
    proc = np.empty_like(innov)
    proc[:, 0] = innov[:, 0]
    scale = math.sqrt(1.0 - ar_coef * ar_coef)
    for t in range(1, l):
        proc[:, t] = ar_coef * proc[:, t - 1] + scale * innov[:, t]
    x = (level + 0.5 * proc).astype(dtype)
    noise = rng.normal(0.0, 1.0, size=n_samples)
    y = np.array([synthetic_label(x[i]) for i in range(n_samples)])
    if noise_sigma:
        y = np.clip(y + noise_sigma * noise, *LABEL_RANGE)
    ids = [f"s{i:05d}" for i in range(n_samples)]
    n_train, n_val, _ = split_sizes(n_samples)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_samples)}
    splits = {
        name: Split(ids[a:b], x[a:b].copy(), y[a:b].copy()) for name, (a, b) in bounds.items()
    }
    return Dataset(shape, modality_names(m), splits)


def modality_names(m: int) -> list[str]:
    if m <= len(DEFAULT_MODALITIES):
        return list(DEFAULT_MODALITIES[:m])
    return [f"m{i}" for i in range(m)]


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def write_dataset(root, dataset: Dataset, projection_seed: int = 0) -> Path:
    """Write ``dataset`` in the directory format (modality widths = D, no padding needed)."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    shape = dataset.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "modalities": [{"name": n, "width": shape.d} for n in dataset.modalities],
        "target_l": shape.l,
        "target_d": shape.d,
        "splits": {name: list(dataset.splits[name].ids) for name in SPLIT_NAMES if name in dataset.splits},
        "label_range": list(LABEL_RANGE),
        "projection_seed": projection_seed,
    }
    rows = []
    for name in SPLIT_NAMES:
        split = dataset.splits.get(name)
        if split is None:
            continue
        for i, sid in enumerate(split.ids):
            feats = {mod: split.x[i][:, j, :] for j, mod in enumerate(dataset.modalities)}
            write_sample(root, RawSample(sid, feats, float(split.y[i])))
            rows.append((sid, float(split.y[i])))
    _write_json(root / "manifest.json", manifest)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for sid, label in rows:
            w.writerow([sid, repr(label)])
    return root


def write_sample(root, sample: RawSample) -> None:
    sdir = Path(root) / "samples" / sample.id
    sdir.mkdir(parents=True, exist_ok=True)
    lengths = {}
    for mod, mat in sample.features.items():
        mat = np.ascontiguousarray(mat, dtype=_F32LE)
        lengths[mod] = int(mat.shape[0])
        (sdir / f"{mod}.f32").write_bytes(mat.tobytes())
    _write_json(sdir / "meta.json", {"id": sample.id, "lengths": lengths})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path, sample_id=None):
    if not path.is_file():
        raise MissingFileError(f"missing file {path}", sample_id=sample_id, path=str(path))
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}", sample_id=sample_id, path=str(path)) from exc


def read_manifest(root) -> dict:
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"dataset directory not found: {root}", path=str(root))
    manifest = _read_json(root / "manifest.json")
    for key in ("format_version", "modalities", "target_l", "target_d", "splits"):
        if key not in manifest:
            raise DataError(f"manifest.json lacks {key!r}", path=str(root / "manifest.json"))
    if manifest["format_version"] != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format {manifest['format_version']!r}", path=str(root))
    return manifest


def read_labels(root) -> dict[str, float]:
    path = Path(root) / "labels.csv"
    if not path.is_file():
        raise MissingFileError(f"missing file {path}", path=str(path))
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "label"]:
            raise DataError(f"labels.csv header must be 'id,label', got {reader.fieldnames}", path=str(path))
        return {row["id"]: float(row["label"]) for row in reader}


def read_raw_sample(root, sample_id: str, modalities: list[dict], label: float) -> RawSample:
    sdir = Path(root) / "samples" / sample_id
    if not sdir.is_dir():
        raise MissingFileError(f"sample {sample_id!r} not found at {sdir}", sample_id=sample_id, path=str(sdir))
    meta = _read_json(sdir / "meta.json", sample_id)
    lengths = meta.get("lengths", {})
    feats = {}
    for mod in modalities:
        name, width = mod["name"], int(mod["width"])
        path = sdir / f"{name}.f32"
        if not path.is_file():
            raise MissingFileError(f"sample {sample_id!r}: missing {path.name}", sample_id=sample_id, path=str(path))
        if name not in lengths:
            raise SampleShapeError(f"sample {sample_id!r}: meta.json has no length for {name}", sample_id=sample_id)
        length = int(lengths[name])
        raw = np.fromfile(path, dtype=_F32LE)
        if raw.size != length * width:
            raise SampleShapeError(
                f"sample {sample_id!r}: {name}.f32 holds {raw.size} values, expected {length}x{width}",
                sample_id=sample_id,
                path=str(path),
            )
        mat = raw.reshape(length, width)
        if not np.all(np.isfinite(mat)):
            raise NonFiniteDataError(f"sample {sample_id!r}: non-finite values in {name}", sample_id=sample_id, path=str(path))
        feats[name] = mat
    return RawSample(sample_id, feats, label)


def align_sample(raw: RawSample, modalities: list[dict], target_l: int, target_d: int, projections) -> np.ndarray:
    cols = []
    for j, mod in enumerate(modalities):
        seq = pad_or_truncate(raw.features[mod["name"]], target_l)
        cols.append(project_channels(seq, target_d, projections[j]))
    return np.stack(cols, axis=1)


def load_dataset(root, dtype=np.float32) -> Dataset:
    """Read, align and stack every split listed in the manifest, in manifest order."""
    root = Path(root)
    manifest = read_manifest(root)
    labels = read_labels(root)
    modalities = manifest["modalities"]
    target_l, target_d = int(manifest["target_l"]), int(manifest["target_d"])
    shape = Shape3(target_l, len(modalities), target_d)
    seed = int(manifest.get("projection_seed", 0))
    projections = [make_projection(int(m["width"]), target_d, seed, j) for j, m in enumerate(modalities)]
    splits = {}
    for name in SPLIT_NAMES:
        ids = list(manifest["splits"].get(name, []))
        xs, ys = [], []
        for sid in ids:
            if sid not in labels:
                raise DataError(f"sample {sid!r} has no entry in labels.csv", sample_id=sid)
            raw = read_raw_sample(root, sid, modalities, labels[sid])
            xs.append(align_sample(raw, modalities, target_l, target_d, projections))
            ys.append(raw.label)
        x = np.stack(xs).astype(dtype) if xs else np.zeros((0, *shape.as_tuple()), dtype=dtype)
        splits[name] = Split(ids, x, np.asarray(ys, dtype=np.float64))
    return Dataset(shape, [m["name"] for m in modalities], splits)
