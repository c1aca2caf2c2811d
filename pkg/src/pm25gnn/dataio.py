"""Dataset directories, the ``.knt`` tensor format, splits and checkpoints.

A dataset directory holds::

    manifest.json    name, sizes, t0, step, feature names, sha256 per file
    nodes.csv        id,name,lat,lon,altitude
    elevation.grid   "lat0 lon0 dlat dlon nrows ncols" + nrows lines of heights
    meteo.knt        [T, N, 8] raw meteorology
    pm25.knt         [T, N] concentrations (NaN where missing)

``.knt`` is little-endian: ``b"KNT1"``, u32 dtype code (0=f32, 1=f64),
u32 rank, rank x u64 dims, then the row-major payload.
"""

from __future__ import annotations

import calendar
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .featurize import METEO_FEATURES, STEP_SECONDS, Standardizer
from .geograph import City, ElevationGrid, read_elevation_grid, read_nodes_csv, write_elevation_grid, write_nodes_csv
from .model import ModelSpec, param_shapes

KNT_MAGIC = b"KNT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
CHECKPOINT_VERSION = 1
DATASET_FILES = ("nodes.csv", "elevation.grid", "meteo.knt", "pm25.knt")


class DataError(Exception):
    """Base class for dataset and checkpoint problems."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class ChecksumError(DataError):
    pass


class HeaderError(DataError):
    """Shape/header inconsistency in a file."""


class SplitError(DataError, ValueError):
    pass


class CheckpointError(DataError):
    pass


# -- atomic writes and the tensor format ---------------------------------------------


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_knt(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        a = a.astype(np.float64)
    code = _CODES[a.dtype]
    head = KNT_MAGIC + struct.pack("<II", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode_knt(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 12 or buf[:4] != KNT_MAGIC:
        raise HeaderError(f"{name}: not a KNT1 tensor file")
    code, rank = struct.unpack_from("<II", buf, 4)
    if code not in _DTYPES:
        raise HeaderError(f"{name}: unknown dtype code {code}")
    off = 12 + 8 * rank
    if len(buf) < off:
        raise HeaderError(f"{name}: header truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    dt = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise HeaderError(f"{name}: header declares shape {dims} ({expected} bytes) but payload has {len(buf) - off} bytes")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_knt(path, array) -> None:
    atomic_write(path, encode_knt(array))


def read_knt(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing tensor file: {path}")
    return decode_knt(path.read_bytes(), str(path))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- datasets --------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    n_cities: int
    n_timesteps: int
    t0: int
    step_seconds: int = STEP_SECONDS
    meteo_features: list[str] = field(default_factory=lambda: list(METEO_FEATURES))
    checksums: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.step_seconds != STEP_SECONDS:
            raise HeaderError(f"step_seconds must be {STEP_SECONDS}, got {self.step_seconds}")

    @property
    def t_end(self) -> int:
        return self.t0 + self.n_timesteps * self.step_seconds

    @property
    def timestamps(self) -> np.ndarray:
        return self.t0 + self.step_seconds * np.arange(self.n_timesteps, dtype=np.int64)


@dataclass
class Dataset:
    manifest: DatasetManifest
    cities: list[City]
    grid: ElevationGrid
    meteo: np.ndarray  # [T, N, 8]
    pm25: np.ndarray  # [T, N]

    @property
    def timestamps(self) -> np.ndarray:
        return self.manifest.timestamps


def save_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n_t, n = ds.pm25.shape
    if ds.meteo.shape != (n_t, n, len(METEO_FEATURES)) or len(ds.cities) != n:
        raise HeaderError(f"inconsistent dataset shapes: meteo {ds.meteo.shape}, pm25 {ds.pm25.shape}, {len(ds.cities)} cities")
    write_nodes_csv(d / "nodes.csv", ds.cities)
    write_elevation_grid(d / "elevation.grid", ds.grid)
    write_knt(d / "meteo.knt", ds.meteo)
    write_knt(d / "pm25.knt", ds.pm25)
    ds.manifest.n_cities, ds.manifest.n_timesteps = n, n_t
    ds.manifest.checksums = {f: sha256_file(d / f) for f in DATASET_FILES}
    atomic_write(d / "manifest.json", json.dumps(asdict(ds.manifest), indent=1))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for f in ("manifest.json",) + DATASET_FILES:
        if not (d / f).exists():
            raise MissingFileError(f"dataset file missing: {d / f}")
    raw = json.loads((d / "manifest.json").read_text())
    try:
        manifest = DatasetManifest(**raw)
    except TypeError as exc:
        raise HeaderError(f"{d / 'manifest.json'}: {exc}") from None
    for f in DATASET_FILES:
        want = manifest.checksums.get(f)
        if want is None:
            raise ChecksumError(f"manifest has no checksum for {f}")
        if sha256_file(d / f) != want:
            raise ChecksumError(f"checksum mismatch for {d / f}")
    cities = read_nodes_csv(d / "nodes.csv")
    if len(cities) != manifest.n_cities:
        raise HeaderError(f"manifest declares {manifest.n_cities} cities but nodes.csv has {len(cities)}")
    grid = read_elevation_grid(d / "elevation.grid")
    meteo = read_knt(d / "meteo.knt")
    pm25 = read_knt(d / "pm25.knt")
    want_m = (manifest.n_timesteps, manifest.n_cities, len(manifest.meteo_features))
    if meteo.shape != want_m:
        raise HeaderError(f"meteo.knt shape {meteo.shape} != manifest {want_m}")
    if pm25.shape != want_m[:2]:
        raise HeaderError(f"pm25.knt shape {pm25.shape} != manifest {want_m[:2]}")
    return Dataset(manifest, cities, grid, meteo, pm25)


def fill_missing(pm25: np.ndarray, max_gap: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Forward-fill gaps of at most ``max_gap`` steps per city.

    Returns the filled array and a boolean ``valid`` mask; entries inside longer
    gaps (or before the first observation) stay NaN and are marked invalid.
    """
    x = np.array(pm25, dtype=float, copy=True)
    n_t, n = x.shape
    for i in range(n):
        last, gap = np.nan, 0
        for t in range(n_t):
            if np.isfinite(x[t, i]):
                last, gap = x[t, i], 0
                continue
            gap += 1
            if gap <= max_gap and np.isfinite(last):
                x[t, i] = last
    # a fill is only allowed if the whole gap is short
    for i in range(n):
        t = 0
        while t < n_t:
            if np.isfinite(pm25[t, i]):
                t += 1
                continue
            s = t
            while t < n_t and not np.isfinite(pm25[t, i]):
                t += 1
            if t - s > max_gap:
                x[s:t, i] = np.nan
    return x, np.isfinite(x)


# -- splits ----------------------------------------------------------------------------


def parse_time(value) -> int:
    """Epoch seconds from an int or an ISO-8601 date/datetime (UTC)."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    dt = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(calendar.timegm(dt.utctimetuple()))


def format_time(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


SPLIT_NAMES = ("train", "validate", "test")


@dataclass
class SplitSpec:
    """Half-open epoch intervals per split name."""

    train: list[tuple[int, int]]
    validate: list[tuple[int, int]]
    test: list[tuple[int, int]]

    @classmethod
    def from_json(cls, payload: dict) -> SplitSpec:
        missing = [k for k in SPLIT_NAMES if k not in payload]
        if missing:
            raise SplitError(f"splits missing {missing}")
        return cls(**{k: [(parse_time(a), parse_time(b)) for a, b in payload[k]] for k in SPLIT_NAMES})

    def to_json(self) -> dict:
        return {k: [[format_time(a), format_time(b)] for a, b in getattr(self, k)] for k in SPLIT_NAMES}


def read_splits(path) -> SplitSpec:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"splits file missing: {path}")
    return SplitSpec.from_json(json.loads(path.read_text()))


def write_splits(path, split: SplitSpec) -> None:
    atomic_write(path, json.dumps(split.to_json(), indent=1))


def resolve_splits(manifest: DatasetManifest, split: SplitSpec) -> dict[str, list[tuple[int, int]]]:
    """Map epoch intervals to timestep index intervals ``[i0, i1)``.

    A timestep belongs to an interval when its timestamp lies in ``[start, end)``.
    """
    out: dict[str, list[tuple[int, int]]] = {}
    step = manifest.step_seconds
    for name in SPLIT_NAMES:
        ranges = []
        for start, end in getattr(split, name):
            if end <= start:
                raise SplitError(f"{name}: interval end precedes start ({format_time(start)} .. {format_time(end)})")
            if start < manifest.t0 or end > manifest.t_end:
                raise SplitError(
                    f"{name}: interval {format_time(start)} .. {format_time(end)} outside dataset "
                    f"{format_time(manifest.t0)} .. {format_time(manifest.t_end)}"
                )
            i0 = -((manifest.t0 - start) // step)
            i1 = -((manifest.t0 - end) // step)
            if i1 > i0:
                ranges.append((int(i0), int(i1)))
        if not ranges:
            raise SplitError(f"split {name!r} is empty")
        out[name] = sorted(ranges)
    flat = sorted((a, b, name) for name, rs in out.items() for a, b in rs)
    for (a0, b0, n0), (a1, b1, n1) in zip(flat, flat[1:]):
        if a1 < b0:
            raise SplitError(f"splits overlap: {n0} [{a0}, {b0}) and {n1} [{a1}, {b1})")
    return out


def ratio_splits(manifest: DatasetManifest, ratios=(2, 1, 1)) -> SplitSpec:
    """Contiguous chronological train/validate/test blocks in the given ratio."""
    total = float(sum(ratios))
    n = manifest.n_timesteps
    b1 = int(round(n * ratios[0] / total))
    b2 = int(round(n * (ratios[0] + ratios[1]) / total))
    ts = lambda i: manifest.t0 + i * manifest.step_seconds  # noqa: E731
    return SplitSpec([(ts(0), ts(b1))], [(ts(b1), ts(b2))], [(ts(b2), ts(n))])


_REFERENCE_SPLITS = {
    1: (("2015-01-01", "2016-12-31"), ("2017-01-01", "2017-12-31"), ("2018-01-01", "2018-12-31")),
    2: (("2015-11-01", "2016-02-28"), ("2016-11-01", "2017-02-28"), ("2017-11-01", "2018-02-28")),
    3: (("2016-09-01", "2016-11-30"), ("2016-12-01", "2016-12-31"), ("2017-01-01", "2017-01-31")),
}


def reference_splits(dataset_id: int) -> SplitSpec:
    """The three reference split configurations; listed end dates are inclusive days."""
    try:
        tr, va, te = _REFERENCE_SPLITS[dataset_id]
    except KeyError:
        raise SplitError(f"unknown reference dataset {dataset_id}; expected 1, 2 or 3") from None
    conv = lambda r: [(parse_time(r[0]), parse_time(r[1]) + 86400)]  # noqa: E731
    return SplitSpec(conv(tr), conv(va), conv(te))


# -- checkpoints -------------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    standardizer: Standardizer
    n_nodes: int
    n_node_features: int
    n_edge_features: int
    config: dict = field(default_factory=dict)
    val_loss: float | None = None
    graph: dict | None = None
    version: int = CHECKPOINT_VERSION


def check_params(params: dict[str, np.ndarray], spec: ModelSpec, n_nodes: int, p: int, q: int) -> None:
    """Raise naming the first tensor whose presence or shape disagrees with ``spec``."""
    want = param_shapes(spec, n_nodes, p, q)
    for name, shape in want.items():
        if name not in params:
            raise CheckpointError(f"tensor {name!r} missing; spec {spec.kind} expects shape {shape}")
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(params[name].shape)}, spec expects {shape}")
    extra = [k for k in params if k not in want]
    if extra:
        raise CheckpointError(f"tensor {extra[0]!r} is not part of spec {spec.kind}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    d = Path(path)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in ckpt.params.items():
        fname = f"tensors/{name}.knt"
        write_knt(d / fname, arr)
        files[name] = {"file": fname, "shape": list(arr.shape), "sha256": sha256_file(d / fname)}
    index = {
        "format_version": ckpt.version,
        "spec": asdict(ckpt.spec),
        "dims": {"n_nodes": ckpt.n_nodes, "n_node_features": ckpt.n_node_features, "n_edge_features": ckpt.n_edge_features},
        "standardizer": ckpt.standardizer.to_json(),
        "config": ckpt.config,
        "val_loss": ckpt.val_loss,
        "graph": ckpt.graph,
        "tensors": files,
    }
    atomic_write(d / "checkpoint.json", json.dumps(index, indent=1))


def load_checkpoint(path, spec: ModelSpec | None = None) -> Checkpoint:
    """Read a checkpoint directory; with ``spec`` given, shapes are checked against it."""
    d = Path(path)
    idx_path = d / "checkpoint.json"
    if not idx_path.exists():
        raise MissingFileError(f"checkpoint index missing: {idx_path}")
    index = json.loads(idx_path.read_text())
    version = index.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (this build reads version "
            f"{CHECKPOINT_VERSION}); re-save it with a matching release or retrain"
        )
    stored_spec = ModelSpec(**index["spec"])
    params = {}
    for name, meta in index["tensors"].items():
        f = d / meta["file"]
        if not f.exists():
            raise MissingFileError(f"checkpoint tensor file missing: {f}")
        if sha256_file(f) != meta["sha256"]:
            raise ChecksumError(f"checksum mismatch for {f}")
        arr = read_knt(f)
        if list(arr.shape) != meta["shape"]:
            raise HeaderError(f"{f}: shape {arr.shape} disagrees with index {meta['shape']}")
        params[name] = arr
    dims = index["dims"]
    check_params(params, spec or stored_spec, dims["n_nodes"], dims["n_node_features"], dims["n_edge_features"])
    return Checkpoint(
        spec=stored_spec,
        params=params,
        standardizer=Standardizer.from_json(index["standardizer"]),
        n_nodes=dims["n_nodes"],
        n_node_features=dims["n_node_features"],
        n_edge_features=dims["n_edge_features"],
        config=index.get("config", {}),
        val_loss=index.get("val_loss"),
        graph=index.get("graph"),
        version=version,
    )
