"""Trajectories, normalization statistics, splits and the ``.pdet`` containers.

Container layout (dataset and checkpoint share the framing)::

    8 bytes   magic  (b"PDETDATA" for datasets, b"PDETCKPT" for checkpoints)
    8 bytes   little-endian u64 manifest length N
    N bytes   UTF-8 JSON manifest
    ...       raw little-endian payload blocks, offsets relative to payload start
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATA_MAGIC = b"PDETDATA"
CKPT_MAGIC = b"PDETCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sQ")

FIELD_TYPES = (
    "density", "concentration", "concentration_a", "concentration_b",
    "velocity_x", "velocity_y", "vorticity",
)


class FormatError(ValueError):
    """Base class for container parse errors."""


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ManifestError(FormatError):
    pass


@dataclass
class Snapshot:
    values: np.ndarray  # [f, x, y]
    field_types: list
    time: float

    def __post_init__(self):
        if self.values.ndim != 3 or len(self.field_types) != self.values.shape[0]:
            raise ValueError(
                f"snapshot has {self.values.shape[0] if self.values.ndim == 3 else '?'} fields "
                f"but {len(self.field_types)} field types")


@dataclass
class Trajectory:
    """Uniformly spaced snapshots ``data[k]`` at time ``t0 + k * dt``."""

    data: np.ndarray  # [t, f, x, y]
    field_types: list
    dt: float
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"trajectory data must be [t, f, x, y], got shape {self.data.shape}")
        if len(self.field_types) != self.data.shape[1]:
            raise ValueError(f"{self.data.shape[1]} fields but field_types={self.field_types}")
        self.field_types = list(self.field_types)

    def __len__(self):
        return self.data.shape[0]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def num_fields(self):
        return self.data.shape[1]

    @property
    def resolution(self):
        return self.data.shape[2:]

    def snapshot(self, k) -> Snapshot:
        return Snapshot(self.data[k], list(self.field_types), float(self.times[k]))

    @property
    def snapshots(self):
        return [self.snapshot(k) for k in range(len(self))]

    def with_data(self, data):
        return Trajectory(data, list(self.field_types), self.dt, self.t0, dict(self.meta))


# -- container I/O ---------------------------------------------------------------

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_container(path, magic, manifest, blocks):
    """Write ``blocks`` (list of little-endian ndarrays) after the JSON manifest.

    Offsets and dtypes for each block are filled into ``manifest["blocks"]``.
    """
    entries = []
    offset = 0
    for arr in blocks:
        arr = np.ascontiguousarray(arr)
        entries.append({"offset": offset, "nbytes": arr.nbytes, "shape": list(arr.shape),
                        "dtype": arr.dtype.str})
        offset += arr.nbytes
    manifest = dict(manifest)
    manifest["blocks"] = entries
    raw = json.dumps(_to_jsonable(manifest), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, len(raw)))
        fh.write(raw)
        for arr in blocks:
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_container(path, magic):
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    got, n = _HEADER.unpack_from(buf)
    if got != magic:
        raise MagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    start = _HEADER.size + n
    if len(buf) < start:
        raise TruncatedError(f"{path}: manifest declares {n} bytes but file ends early")
    try:
        manifest = json.loads(buf[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON: {exc}") from exc
    blocks = []
    for i, entry in enumerate(manifest.get("blocks", [])):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * dtype.itemsize
        if expected != entry["nbytes"]:
            raise ManifestError(f"{path}: block {i} shape {shape} disagrees with nbytes {entry['nbytes']}")
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(buf):
            raise TruncatedError(f"{path}: block {i} needs bytes [{lo}, {hi}) but file has {len(buf)}")
        blocks.append(np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=lo).reshape(shape).copy())
    return manifest, blocks


def write_dataset(trajs, path):
    """Store trajectories as float32 blocks, one per trajectory."""
    trajs = list(trajs)
    if not trajs:
        raise ValueError("write_dataset needs at least one trajectory")
    ref = trajs[0]
    for i, tr in enumerate(trajs):
        if tr.data.shape[1:] != ref.data.shape[1:] or tr.field_types != ref.field_types:
            raise ValueError(f"trajectory {i} shape/fields {tr.data.shape}/{tr.field_types} "
                             f"disagree with {ref.data.shape}/{ref.field_types}")
    manifest = {
        "format": "pdet",
        "version": FORMAT_VERSION,
        "field_types": ref.field_types,
        "num_trajectories": len(trajs),
        "trajectories": [{"dt": tr.dt, "t0": tr.t0, "meta": tr.meta} for tr in trajs],
    }
    blocks = [tr.data.astype("<f4") for tr in trajs]
    write_container(path, DATA_MAGIC, manifest, blocks)


def read_dataset(path):
    manifest, blocks = read_container(path, DATA_MAGIC)
    try:
        field_types = manifest["field_types"]
        records = manifest["trajectories"]
    except KeyError as exc:
        raise ManifestError(f"{path}: manifest missing key {exc}") from exc
    if len(records) != len(blocks) or manifest.get("num_trajectories", len(blocks)) != len(blocks):
        raise ManifestError(f"{path}: {len(records)} trajectory records but {len(blocks)} payload blocks")
    out = []
    for rec, arr in zip(records, blocks):
        if arr.ndim != 4 or arr.shape[1] != len(field_types):
            raise ManifestError(f"{path}: block shape {arr.shape} does not match {len(field_types)} fields")
        out.append(Trajectory(arr, list(field_types), rec["dt"], rec.get("t0", 0.0), rec.get("meta", {})))
    return out


def dataset_header_size(path):
    buf = Path(path).read_bytes()[:_HEADER.size]
    _, n = _HEADER.unpack(buf)
    return _HEADER.size + n


# -- normalization -----------------------------------------------------------------

@dataclass
class FieldStats:
    mean: np.ndarray
    std: np.ndarray
    field_types: list = None

    MIN_STD = 1e-12

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "field_types": self.field_types}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   d.get("field_types"))


def compute_stats(train_trajs) -> FieldStats:
    """Per-field mean/std pooled over every snapshot of the training trajectories."""
    train_trajs = list(train_trajs)
    if not train_trajs:
        raise ValueError("cannot compute statistics from zero trajectories")
    nf = train_trajs[0].num_fields
    total = np.zeros(nf)
    sq = np.zeros(nf)
    count = 0
    for tr in train_trajs:
        d = tr.data.astype(np.float64)
        total += d.sum(axis=(0, 2, 3))
        count += d.shape[0] * d.shape[2] * d.shape[3]
    mean = total / count
    for tr in train_trajs:
        d = tr.data.astype(np.float64) - mean[None, :, None, None]
        sq += (d * d).sum(axis=(0, 2, 3))
    std = np.sqrt(sq / count)
    return FieldStats(mean, std, list(train_trajs[0].field_types))


def _guarded_std(stats, nf):
    if len(stats.mean) != nf or len(stats.std) != nf:
        raise ValueError(f"stats cover {len(stats.mean)} fields but trajectory has {nf}")
    std = np.array(stats.std, dtype=np.float64)
    bad = std <= FieldStats.MIN_STD
    if bad.any():
        log.warning("fields %s have zero std; leaving their scale unchanged", np.flatnonzero(bad).tolist())
        std[bad] = 1.0
    return std


def normalize_array(x, stats, axis=-3):
    """Normalize an array whose field axis is ``axis`` (default: [..., f, x, y])."""
    nf = x.shape[axis]
    std = _guarded_std(stats, nf)
    shape = [1] * x.ndim
    shape[axis] = nf
    return (x - np.reshape(stats.mean, shape)) / np.reshape(std, shape)


def denormalize_array(x, stats, axis=-3):
    nf = x.shape[axis]
    std = _guarded_std(stats, nf)
    shape = [1] * x.ndim
    shape[axis] = nf
    return x * np.reshape(std, shape) + np.reshape(stats.mean, shape)


def normalize(traj: Trajectory, stats: FieldStats) -> Trajectory:
    return traj.with_data(normalize_array(traj.data.astype(np.float64), stats))


def denormalize(traj: Trajectory, stats: FieldStats) -> Trajectory:
    return traj.with_data(denormalize_array(traj.data.astype(np.float64), stats))


# -- splitting ----------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def to_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def split(trajs, seed, fractions=(0.7, 0.15, 0.15), test_ids=None) -> DatasetSplit:
    """Deterministic disjoint train/val/test index lists.

    With ``test_ids`` the test set is fixed (e.g. the trailing block of
    simulations) and ``fractions[1]`` is the validation share of the rest.
    """
    n = trajs if isinstance(trajs, int) else len(trajs)
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or min(fr) < 0 or sum(fr) > 1 + 1e-12:
        raise ValueError(f"fractions must be three non-negative numbers summing to <= 1, got {fractions}")
    rng = np.random.default_rng(seed)
    if test_ids is not None:
        test = sorted(int(i) for i in test_ids)
        if test and (test[0] < 0 or test[-1] >= n):
            raise ValueError(f"test ids must lie in [0, {n})")
        pool = np.array(sorted(set(range(n)) - set(test)))
        perm = pool[rng.permutation(len(pool))]
        n_val = int(round(fr[1] * len(pool)))
        val = sorted(perm[:n_val].tolist())
        train = sorted(perm[n_val:].tolist())
        return DatasetSplit(train, val, test)
    perm = rng.permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    n_test = min(n_test, n - n_train - n_val)
    train = sorted(perm[:n_train].tolist())
    val = sorted(perm[n_train:n_train + n_val].tolist())
    test = sorted(perm[n_train + n_val:n_train + n_val + n_test].tolist())
    return DatasetSplit(train, val, test)


def paper_style_split(n, seed, val_fraction=0.15):
    """Trailing sixth of simulations as test, random validation share of the rest."""
    n_test = n // 6
    return split(n, seed, (1.0 - val_fraction, val_fraction, 0.0), test_ids=range(n - n_test, n))
