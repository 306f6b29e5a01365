"""Two-scale stream temperature datasets: CSV I/O, partitions, scaling, label masking.

Directory layout (UTF-8, header row, comma separated)::

    nodes.csv        node_id, scale, length_km, elevation_m, slope, width_m
    edges.csv        scale, from_id, to_id, stream_distance_km
    drivers.csv      date, node_id, air_temp_c, swrad_wm2, precip_mm, pet_mm
    labels.csv       date, node_id, water_temp_c
    cross_scale.csv  fine_id, coarse_id, stream_distance_km[, coincident]

Drivers must be dense (every node on every day). Labels are sparse: a
missing (date, node) row simply means "not observed".
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .stream_graph import STATIC_FIELDS, CrossScaleMap, StreamGraph, build_adjacency, build_cross_scale_matrix

log = logging.getLogger(__name__)

DRIVER_FIELDS = ("air_temp_c", "swrad_wm2", "precip_mm", "pet_mm")
# model input channels, static attributes first
FEATURES = ("slope", "elevation_m", "width_m") + DRIVER_FIELDS
FILES = ("nodes.csv", "edges.csv", "drivers.csv", "labels.csv", "cross_scale.csv")


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    features: tuple = FEATURES

    def apply(self, X):
        return (X - self.mean) / self.std

    def to_dict(self):
        return {"features": list(self.features), "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   tuple(d.get("features", FEATURES)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Dataset:
    """Daily panels for both scales. Label arrays hold NaN where unobserved."""

    dates: np.ndarray  # datetime64[D], strictly daily
    coarse: StreamGraph
    fine: StreamGraph
    cross: CrossScaleMap
    drivers_c: np.ndarray  # [T, M, 4]
    drivers_f: np.ndarray  # [T, N, 4]
    Y_c: np.ndarray
    mask_c: np.ndarray
    Y_f: np.ndarray
    mask_f: np.ndarray
    scaler: Scaler | None = None
    explicit_coincidence: bool = False

    def __post_init__(self):
        T = len(self.dates)
        M, N = self.coarse.n, self.fine.n
        checks = {
            "drivers_c": (self.drivers_c.shape, (T, M, len(DRIVER_FIELDS))),
            "drivers_f": (self.drivers_f.shape, (T, N, len(DRIVER_FIELDS))),
            "Y_c": (self.Y_c.shape, (T, M)), "mask_c": (self.mask_c.shape, (T, M)),
            "Y_f": (self.Y_f.shape, (T, N)), "mask_f": (self.mask_f.shape, (T, N)),
            "D": (self.cross.d_matrix.shape, (N, M)),
        }
        for name, (got, want) in checks.items():
            if got != want:
                raise ValidationError(f"{name} has shape {got}, expected {want}")
        if T > 1 and np.any(np.diff(self.dates).astype(np.int64) != 1):
            raise ValidationError("dates must be consecutive days")

    @property
    def T(self):
        return len(self.dates)

    def labels(self, scale):
        return (self.Y_c, self.mask_c) if scale == "coarse" else (self.Y_f, self.mask_f)

    def raw_features(self, scale) -> np.ndarray:
        g = self.coarse if scale == "coarse" else self.fine
        drv = self.drivers_c if scale == "coarse" else self.drivers_f
        static = np.stack([g.attr("slope"), g.attr("elevation_m"), g.attr("width_m")], axis=1)
        static = np.broadcast_to(static, (self.T,) + static.shape)
        return np.concatenate([static, drv], axis=2)

    def features(self, scale) -> np.ndarray:
        """[T, nodes, 7] model inputs in ``FEATURES`` order, scaled if a scaler is attached."""
        X = self.raw_features(scale)
        return self.scaler.apply(X) if self.scaler is not None else X

    def with_labels(self, *, Y_c=None, mask_c=None, Y_f=None, mask_f=None) -> "Dataset":
        kw = {k: v for k, v in dict(Y_c=Y_c, mask_c=mask_c, Y_f=Y_f, mask_f=mask_f).items()
              if v is not None}
        return replace(self, **kw)


@dataclass
class Partition:
    """Contiguous half-open day-index ranges ``[start, stop)``."""

    train: tuple
    val: tuple
    test: tuple
    pretrain: tuple | None = None
    dates: list = field(default_factory=list)

    def __post_init__(self):
        spans = sorted([tuple(self.train), tuple(self.val), tuple(self.test)])
        for a, b in spans:
            if not 0 <= a <= b:
                raise ValidationError(f"bad range {(a, b)}")
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise ValidationError(f"partition ranges overlap: {(a0, b0)} and {(a1, b1)}")
        if self.train[1] <= self.train[0]:
            raise ValidationError("empty training range")

    def slice(self, name) -> slice:
        a, b = getattr(self, name) if name != "pretrain" else self.pretrain_range()
        return slice(a, b)

    def pretrain_range(self):
        if self.pretrain is not None:
            return tuple(self.pretrain)
        return (min(self.train[0], self.val[0]), max(self.train[1], self.val[1]))

    def which(self, day: int) -> str | None:
        for name in ("train", "val", "test"):
            a, b = getattr(self, name)
            if a <= day < b:
                return name
        return None

    def to_dict(self, dates=None):
        d = {"train": list(self.train), "val": list(self.val), "test": list(self.test)}
        if self.pretrain is not None:
            d["pretrain"] = list(self.pretrain)
        if dates is not None:
            d["dates"] = {k: [str(dates[v[0]]), str(dates[v[1] - 1])] if v[1] > v[0] else []
                          for k, v in d.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]),
                   tuple(d["pretrain"]) if d.get("pretrain") else None)

    def save(self, path, dates=None):
        Path(path).write_text(json.dumps(self.to_dict(dates), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_partition(T: int, fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> Partition:
    """Chronological train/val/test split by day counts."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValidationError(f"fractions must be three nonnegative values summing to 1: {fractions}")
    a = int(round(T * fractions[0]))
    b = a + int(round(T * fractions[1]))
    return Partition((0, a), (a, b), (b, T))


# -- CSV reading ----------------------------------------------------------------


def _rows(path: Path, required: Sequence[str]):
    if not path.exists():
        raise ValidationError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path.name}: missing columns {missing}")
        for i, row in enumerate(reader, start=2):
            yield i, row


def _float(path, line, row, key):
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise ValidationError(f"{path.name} line {line}: bad {key} value {row[key]!r}") from None


def load_dataset(path, coincidence_from_file: bool = True) -> Dataset:
    """Read and validate the five CSV files in directory ``path``."""
    root = Path(path)
    p = root / "nodes.csv"
    attrs = {"coarse": {}, "fine": {}}
    for line, row in _rows(p, ("node_id", "scale") + STATIC_FIELDS):
        scale = row["scale"]
        if scale not in attrs:
            raise ValidationError(f"nodes.csv line {line}: unknown scale {scale!r}")
        nid = row["node_id"]
        if nid in attrs["coarse"] or nid in attrs["fine"]:
            raise ValidationError(f"nodes.csv line {line}: duplicate node {nid!r}")
        attrs[scale][nid] = [_float(p, line, row, k) for k in STATIC_FIELDS]
    ids = {s: sorted(a) for s, a in attrs.items()}
    for s in ids:
        if not ids[s]:
            raise ValidationError(f"nodes.csv: no {s} nodes")

    p = root / "edges.csv"
    edges = {"coarse": [], "fine": []}
    for line, row in _rows(p, ("scale", "from_id", "to_id", "stream_distance_km")):
        scale = row["scale"]
        if scale not in edges:
            raise ValidationError(f"edges.csv line {line}: unknown scale {scale!r}")
        for key in ("from_id", "to_id"):
            if row[key] not in attrs[scale]:
                raise ValidationError(f"edges.csv line {line}: unknown {scale} node {row[key]!r}")
        edges[scale].append((row["from_id"], row["to_id"], _float(p, line, row, "stream_distance_km")))
    graphs = {}
    for s in ("coarse", "fine"):
        try:
            A = build_adjacency(edges[s], ids[s])
        except ValidationError as e:
            raise ValidationError(f"edges.csv ({s}): {e}") from None
        graphs[s] = StreamGraph(s, ids[s], np.array([attrs[s][k] for k in ids[s]]), A)

    p = root / "cross_scale.csv"
    pairs, coin = [], {}
    for line, row in _rows(p, ("fine_id", "coarse_id", "stream_distance_km")):
        f, c = row["fine_id"], row["coarse_id"]
        if f not in attrs["fine"]:
            raise ValidationError(f"cross_scale.csv line {line}: unknown fine node {f!r}")
        if c not in attrs["coarse"]:
            raise ValidationError(f"cross_scale.csv line {line}: unknown coarse node {c!r}")
        pairs.append((f, c, _float(p, line, row, "stream_distance_km")))
        if coincidence_from_file and row.get("coincident") not in (None, "", "0"):
            if row["coincident"] != "1":
                raise ValidationError(f"cross_scale.csv line {line}: coincident must be 0 or 1")
            if f in coin:
                raise ValidationError(f"cross_scale.csv line {line}: second coincident row for {f!r}")
            coin[f] = c
    try:
        cross = build_cross_scale_matrix(pairs, ids["fine"], ids["coarse"], coin or None)
    except ValidationError as e:
        raise ValidationError(f"cross_scale.csv: {e}") from None

    pos = {s: {k: i for i, k in enumerate(ids[s])} for s in ids}
    scale_of = {k: s for s in ids for k in ids[s]}

    p = root / "drivers.csv"
    raw = []
    for line, row in _rows(p, ("date", "node_id") + DRIVER_FIELDS):
        nid = row["node_id"]
        if nid not in scale_of:
            raise ValidationError(f"drivers.csv line {line}: unknown node {nid!r}")
        raw.append((line, row["date"], nid, [_float(p, line, row, k) for k in DRIVER_FIELDS]))
    if not raw:
        raise ValidationError("drivers.csv: no rows")
    try:
        days = np.array([r[1] for r in raw], dtype="datetime64[D]")
    except ValueError as e:
        raise ValidationError(f"drivers.csv: bad date ({e})") from None
    dates = np.unique(days)
    if np.any(np.diff(dates).astype(np.int64) != 1):
        gap = int(np.flatnonzero(np.diff(dates).astype(np.int64) != 1)[0])
        raise ValidationError(f"drivers.csv: dates not daily after {dates[gap]}")
    T = len(dates)
    t_idx = (days - dates[0]).astype(np.int64)
    drv = {s: np.full((T, len(ids[s]), len(DRIVER_FIELDS)), np.nan) for s in ids}
    seen = {s: np.zeros((T, len(ids[s])), dtype=bool) for s in ids}
    for (line, _, nid, vals), t in zip(raw, t_idx):
        s = scale_of[nid]
        j = pos[s][nid]
        if seen[s][t, j]:
            raise ValidationError(f"drivers.csv line {line}: duplicate row for ({dates[t]}, {nid})")
        seen[s][t, j] = True
        drv[s][t, j] = vals
    for s in ids:
        if not seen[s].all():
            t, j = np.argwhere(~seen[s])[0]
            raise ValidationError(f"drivers.csv: no row for ({dates[t]}, {ids[s][j]})")

    p = root / "labels.csv"
    Y = {s: np.full((T, len(ids[s])), np.nan) for s in ids}
    for line, row in _rows(p, ("date", "node_id", "water_temp_c")):
        nid = row["node_id"]
        if nid not in scale_of:
            raise ValidationError(f"labels.csv line {line}: unknown node {nid!r}")
        try:
            t = int((np.datetime64(row["date"], "D") - dates[0]).astype(np.int64))
        except ValueError:
            raise ValidationError(f"labels.csv line {line}: bad date {row['date']!r}") from None
        if not 0 <= t < T:
            raise ValidationError(f"labels.csv line {line}: date {row['date']} outside driver range")
        s = scale_of[nid]
        j = pos[s][nid]
        if not np.isnan(Y[s][t, j]):
            raise ValidationError(f"labels.csv line {line}: duplicate row for ({row['date']}, {nid})")
        v = _float(p, line, row, "water_temp_c")
        if not math.isfinite(v):
            raise ValidationError(f"labels.csv line {line}: non-finite label")
        Y[s][t, j] = v

    return Dataset(dates, graphs["coarse"], graphs["fine"], cross, drv["coarse"], drv["fine"],
                   Y["coarse"], ~np.isnan(Y["coarse"]), Y["fine"], ~np.isnan(Y["fine"]),
                   explicit_coincidence=bool(coin))


# -- CSV writing ------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def _write(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_labels(path, dates, node_ids, Y, mask):
    rows = ([str(dates[t]), node_ids[j], _fmt(Y[t, j])] for t, j in np.argwhere(mask))
    _write(Path(path), ("date", "node_id", "water_temp_c"), rows)


def save_dataset(ds: Dataset, path, edges: dict | None = None, pairs=None,
                 coincidence_column: bool | None = None):
    """Write ``ds`` in the CSV layout. Labels are written for observed entries only.

    Adjacency is row-normalized, so the original stream distances cannot be
    recovered from it; pass ``edges`` ({scale: [(from, to, km)]}) and ``pairs``
    ([(fine, coarse, km)]) to write them exactly. Without them, distances are
    written as the reciprocal normalized weights, which rebuild the same
    matrices on reload.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    node_rows = []
    for g in (ds.coarse, ds.fine):
        for k, vals in zip(g.node_ids, g.static_attrs):
            node_rows.append([k, g.scale] + [_fmt(v) for v in vals])
    _write(root / "nodes.csv", ("node_id", "scale") + STATIC_FIELDS, node_rows)

    if edges is None:
        edges = {}
        for g in (ds.coarse, ds.fine):
            edges[g.scale] = [(g.node_ids[u], g.node_ids[v], 1.0 / g.adjacency[v, u])
                              for v, u in np.argwhere(g.adjacency > 0)]
    _write(root / "edges.csv", ("scale", "from_id", "to_id", "stream_distance_km"),
           ([s, u, v, _fmt(d)] for s in ("coarse", "fine") for u, v, d in edges.get(s, [])))

    cm = ds.cross
    if pairs is None:
        pairs = [(cm.fine_ids[i], cm.coarse_ids[j], 1.0 / cm.d_matrix[i, j])
                 for i, j in np.argwhere(cm.d_matrix > 0)]
    if coincidence_column is None:
        coincidence_column = ds.explicit_coincidence
    header = ("fine_id", "coarse_id", "stream_distance_km")
    if coincidence_column:
        header += ("coincident",)
        rows = ([f, c, _fmt(d), "1" if cm.coincidence.get(f) == c else "0"] for f, c, d in pairs)
    else:
        rows = ([f, c, _fmt(d)] for f, c, d in pairs)
    _write(root / "cross_scale.csv", header, rows)

    def drv_rows():
        for t, day in enumerate(ds.dates):
            day = str(day)
            for g, D in ((ds.coarse, ds.drivers_c), (ds.fine, ds.drivers_f)):
                for j, k in enumerate(g.node_ids):
                    yield [day, k] + [_fmt(v) for v in D[t, j]]

    _write(root / "drivers.csv", ("date", "node_id") + DRIVER_FIELDS, drv_rows())

    def lab_rows():
        for t, day in enumerate(ds.dates):
            day = str(day)
            for g, Y, m in ((ds.coarse, ds.Y_c, ds.mask_c), (ds.fine, ds.Y_f, ds.mask_f)):
                for j in np.flatnonzero(m[t]):
                    yield [day, g.node_ids[j], _fmt(Y[t, j])]

    _write(root / "labels.csv", ("date", "node_id", "water_temp_c"), lab_rows())


# -- scaling --------------------------------------------------------------------


def fit_scaler(ds: Dataset, part: Partition) -> Scaler:
    sl = part.slice("train")
    pooled = np.concatenate([ds.raw_features("coarse")[sl].reshape(-1, len(FEATURES)),
                             ds.raw_features("fine")[sl].reshape(-1, len(FEATURES))])
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    zero = std == 0
    if zero.any():
        log.warning("zero variance in features %s; using std 1",
                    [FEATURES[i] for i in np.flatnonzero(zero)])
        std = np.where(zero, 1.0, std)
    return Scaler(mean, std)


def standardize(ds: Dataset, part: Partition) -> tuple[Dataset, Scaler]:
    """Attach a z-score scaler fit on the training days of both scales together."""
    scaler = fit_scaler(ds, part)
    return replace(ds, scaler=scaler), scaler


# -- label masking ----------------------------------------------------------------
#
# Reproducible subsampling, portable to any language with 64-bit integers:
#
#   splitmix64(state):  state += 0x9E3779B97F4A7C15
#                       z = state
#                       z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
#                       z = (z ^ (z >> 27)) * 0x94D049BB133111EB
#                       return z ^ (z >> 31)              (all mod 2**64)
#
#   The generator starts from state = seed mod 2**64. The observed entries in
#   the range are listed in row-major (day, node) order, shuffled by
#   Fisher-Yates (for i = n-1 .. 1: j = splitmix64() mod (i+1); swap i, j),
#   and the first k = max(1, floor(p*n + 0.5)) entries stay observed.

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def shuffle_indices(n: int, seed: int) -> np.ndarray:
    idx = list(range(n))
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return np.asarray(idx, dtype=np.intp)


def retained_count(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n + 0.5)))


def mask_labels(mask: np.ndarray, retain_fraction: float, seed: int,
                rng_range: tuple | slice | None = None) -> np.ndarray:
    """New mask keeping a seeded subset of the observed entries inside ``rng_range``.

    ``mask`` is [T, nodes]; ``rng_range`` selects days (``(start, stop)`` or a
    slice, default all). Entries outside the range are copied unchanged.
    """
    if not 0.0 < retain_fraction <= 1.0:
        raise ValidationError(f"retain fraction must be in (0, 1], got {retain_fraction}")
    mask = np.asarray(mask, dtype=bool)
    if rng_range is None:
        sl = slice(0, mask.shape[0])
    elif isinstance(rng_range, slice):
        sl = rng_range
    else:
        sl = slice(*rng_range)
    out = mask.copy()
    block = out[sl]
    obs = np.flatnonzero(block)
    if obs.size == 0:
        raise ValidationError("no observed labels in the masking range")
    k = retained_count(obs.size, retain_fraction)
    keep = obs[shuffle_indices(obs.size, seed)[:k]]
    flat = np.zeros(block.size, dtype=bool)
    flat[keep] = True
    out[sl] = flat.reshape(block.shape)
    return out


def sparsify(ds: Dataset, part: Partition, fraction: float, seed: int,
             scale: str = "fine", ranges=("train", "val")) -> Dataset:
    """Mask labels of one scale in the train and validation ranges separately.

    The validation range uses ``seed + 1`` so the two draws are independent.
    """
    _, mask = ds.labels(scale)
    for offset, name in enumerate(ranges):
        mask = mask_labels(mask, fraction, seed + offset, part.slice(name))
    return ds.with_labels(**({"mask_f": mask} if scale == "fine" else {"mask_c": mask}))
