"""Synthetic two-scale river basins with a known stream temperature process.

A random binary tree of coarse reaches is built, and every coarse reach is cut
into ``subdivision`` equal fine reaches. Fine water temperature follows

    w_i(t) = (1-a) ((1-k) w_i(t-1) + k (air_i(t) + offset_i)) + a u_i(t-1) + noise

where ``u_i`` is the length-weighted mean of the reaches flowing into ``i``
(its own previous value for a headwater). Coarse labels and coarse drivers are
length-weighted means over each coarse reach's fine children.

Fine drivers, static attributes and temperatures are rounded to 4 decimals
before aggregation, so coarse values are exact means of what is written.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data_io import Dataset, save_dataset, write_labels
from .errors import ValidationError
from .stream_graph import StreamGraph, build_adjacency, build_cross_scale_matrix, epsilon_spread


@dataclass
class BasinSpec:
    n_coarse: int = 10
    subdivision: int = 8
    branch_prob: float = 0.5
    coarse_length_km: float = 10.5
    k: float = 0.3  # relaxation toward air temperature
    a: float = 0.2  # upstream advection weight
    noise: float = 0.3  # degC
    offset_range: float = 2.0  # groundwater offsets uniform in +-offset_range
    days: int = 1500
    seed: int = 0
    start_date: str = "2000-01-01"

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValidationError("n_coarse must be >= 2")
        if self.subdivision < 1:
            raise ValidationError("subdivision must be >= 1")
        if not 0 <= self.a < 1:
            raise ValidationError("advection weight a must be in [0, 1)")
        if not 0 <= self.k <= 1:
            raise ValidationError("coupling k must be in [0, 1]")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        if not 0 <= self.branch_prob <= 1:
            raise ValidationError("branch_prob must be in [0, 1]")
        if self.days < 2:
            raise ValidationError("days must be >= 2")
        if self.coarse_length_km <= 0:
            raise ValidationError("coarse_length_km must be > 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown basin spec fields: {sorted(unknown)}")
        return cls(**d)


class Geometry:
    """Tree of coarse reaches; points are (coarse reach, km above its downstream end)."""

    def __init__(self, parent, lengths, subdivision):
        self.parent = list(parent)  # downstream coarse reach, -1 at the outlet
        self.lengths = np.asarray(lengths, dtype=np.float64)
        self.sub = subdivision
        M = len(self.parent)
        self.children = [[] for _ in range(M)]
        for c, p in enumerate(self.parent):
            if p >= 0:
                self.children[p].append(c)
        self.ancestors = []
        self.base = np.zeros(M)
        for c in range(M):
            chain, p = [], self.parent[c]
            while p >= 0:
                chain.append(p)
                p = self.parent[p]
            self.ancestors.append(chain)
            self.base[c] = self.lengths[chain].sum()

    @property
    def M(self):
        return len(self.parent)

    def depth(self, seg, x):
        return self.base[seg] + x

    def distance(self, a, x, b, y):
        """Stream distance between two points on the tree."""
        if a == b:
            return abs(x - y)
        da, db = self.depth(a, x), self.depth(b, y)
        if a in self.ancestors[b] or b in self.ancestors[a]:
            return abs(da - db)
        common = set(self.ancestors[a]) & set(self.ancestors[b])
        lca = max(common, key=lambda s: self.base[s])
        junction = self.base[lca] + self.lengths[lca]
        return da + db - 2.0 * junction

    def coarse_mid(self, c):
        return c, 0.5 * self.lengths[c]

    def fine_mid(self, c, j):
        # j = 0 is the most upstream piece of coarse reach c
        return c, (self.sub - j - 0.5) * self.lengths[c] / self.sub

    def fine_points(self):
        return [(c, j) for c in range(self.M) for j in range(self.sub)]


def random_geometry(spec: BasinSpec, rng) -> Geometry:
    M = spec.n_coarse
    parent = [-1]
    nkids = [0]
    for c in range(1, M):
        open_ = [p for p in range(c) if nkids[p] < 2]
        one = [p for p in open_ if nkids[p] == 1]
        zero = [p for p in open_ if nkids[p] == 0]
        pool = one if (one and (not zero or rng.random() < spec.branch_prob)) else zero
        p = pool[int(rng.integers(len(pool)))]
        parent.append(p)
        nkids[p] += 1
        nkids.append(0)
    lengths = spec.coarse_length_km * rng.uniform(0.7, 1.3, size=M)
    return Geometry(parent, np.round(lengths, 4), spec.subdivision)


def _r4(x):
    return np.round(x, 4)


def _names(M, sub):
    cw = max(2, len(str(M - 1)))
    fw = max(3, len(str(M * sub - 1)))
    coarse = [f"c{c:0{cw}d}" for c in range(M)]
    fine = [f"f{i:0{fw}d}" for i in range(M * sub)]
    return coarse, fine


def _build(spec: BasinSpec):
    rng = np.random.default_rng(spec.seed)
    geo = random_geometry(spec, rng)
    M, S = geo.M, spec.subdivision
    N = M * S
    cid, fid = _names(M, S)
    owner = np.repeat(np.arange(M), S)  # coarse reach of each fine reach
    flen = np.repeat(geo.lengths / S, S)

    # static attributes
    offsets = rng.uniform(-spec.offset_range, spec.offset_range, size=N)
    mids = [geo.fine_mid(c, j) for c, j in geo.fine_points()]
    depth = np.array([geo.depth(c, x) for c, x in mids])
    upstream_km = np.zeros(M)
    for c in sorted(range(M), key=lambda c: -geo.base[c]):
        upstream_km[c] += geo.lengths[c]
        if geo.parent[c] >= 0:
            upstream_km[geo.parent[c]] += upstream_km[c]
    elevation = _r4(50.0 + 4.0 * depth + rng.normal(0, 5.0, N))
    # groundwater-fed reaches run steeper here, so the offset is partly visible
    slope = _r4(np.clip(0.006 + 0.0015 * offsets + rng.normal(0, 0.0008, N), 1e-4, None))
    width = _r4(2.0 + 0.6 * np.sqrt(upstream_km[owner]) + rng.normal(0, 0.2, N))
    f_static = np.stack([flen, elevation, slope, width], axis=1)

    # drivers
    T = spec.days
    t = np.arange(T)
    season = np.sin(2 * np.pi * (t - 110) / 365.25)
    basin_anom = np.zeros(T)
    local_anom = np.zeros((T, M))
    e1 = rng.normal(0, 1.8, T)
    e2 = rng.normal(0, 0.8, (T, M))
    for d in range(1, T):
        basin_anom[d] = 0.7 * basin_anom[d - 1] + e1[d]
        local_anom[d] = 0.6 * local_anom[d - 1] + e2[d]
    air = (10.0 + 12.0 * season)[:, None] + basin_anom[:, None] + local_anom[:, owner] \
        - 6.5e-3 * (elevation - 50.0)[None, :]
    cloud =np.clip(0.4 + 0.25 * rng.normal(size=T), 0.0, 1.0)
    swrad = (210.0 + 110.0 * season)[:, None] * (1.0 - 0.5 * cloud)[:, None] \
        + rng.normal(0, 8.0, (T, N))
    wet = rng.random((T, M)) < (0.15 + 0.4 * cloud[:, None])
    precip = np.where(wet, rng.gamma(0.8, 6.0, (T, M)), 0.0)[:, owner] * rng.uniform(0.8, 1.2, (T, N))
    pet = np.clip(0.8 + 0.12 * air + 0.006 * swrad, 0.0, None)
    f_drv = _r4(np.stack([air, swrad, precip, pet], axis=2))

    # topology: fine reaches chained inside each coarse reach, heads fed by child outlets
    inflow: list[list[int]] = [[] for _ in range(N)]
    for c in range(M):
        for j in range(1, S):
            inflow[c * S + j].append(c * S + j - 1)
        for ch in geo.children[c]:
            inflow[c * S].append(ch * S + S - 1)
    U = np.zeros((N, N))
    for i, ups in enumerate(inflow):
        if ups:
            w = flen[ups] / flen[ups].sum()
            U[i, ups] = w
        else:
            U[i, i] = 1.0

    # temperature process
    air_eff = f_drv[:, :, 0] + offsets[None, :]
    noise = rng.normal(0, spec.noise, (T, N)) if spec.noise > 0 else np.zeros((T, N))
    w = np.empty((T, N))
    w[0] = air_eff[0]
    k, a = spec.k, spec.a
    for d in range(1, T):
        prev = w[d - 1]
        w[d] = (1 - a) * ((1 - k) * prev + k * air_eff[d]) + a * (U @ prev) + noise[d]
    truth = _r4(w)

    # coarse aggregation (length weighted)
    Wagg = np.zeros((M, N))
    Wagg[owner, np.arange(N)] = flen
    Wagg /= Wagg.sum(axis=1, keepdims=True)
    c_static = np.column_stack([geo.lengths, Wagg @ f_static[:, 1:]])
    c_drv = np.einsum("mn,tnf->tmf", Wagg, f_drv)
    y_c = truth @ Wagg.T

    # graphs and cross-scale map
    c_edges = [(cid[c], cid[p], float(0.5 * (geo.lengths[c] + geo.lengths[p])))
               for c, p in enumerate(geo.parent) if p >= 0]
    f_edges = [(fid[u], fid[i], float(0.5 * (flen[u] + flen[i])))
               for i, ups in enumerate(inflow) for u in ups]
    pairs = []
    for i, (c, j) in enumerate(geo.fine_points()):
        fc, fx = geo.fine_mid(c, j)
        for b in range(M):
            bc, bx = geo.coarse_mid(b)
            pairs.append((fid[i], cid[b], float(geo.distance(fc, fx, bc, bx))))
    coincidence = {fid[i]: cid[owner[i]] for i in range(N)}

    coarse = StreamGraph("coarse", cid, c_static, build_adjacency(c_edges, cid))
    fine = StreamGraph("fine", fid, f_static, build_adjacency(f_edges, fid))
    cross = build_cross_scale_matrix(pairs, fid, cid, coincidence)
    dates = np.datetime64(spec.start_date, "D") + np.arange(T)
    ds = Dataset(dates, coarse, fine, cross, c_drv, f_drv, y_c, np.ones((T, M), bool),
                 truth.copy(), np.ones((T, N), bool), explicit_coincidence=True)
    extras = {"geometry": geo, "edges": {"coarse": c_edges, "fine": f_edges}, "pairs": pairs,
              "offsets": offsets, "aggregation": Wagg}
    return ds, truth, extras


def generate_basin(spec: BasinSpec | None = None, **overrides) -> tuple[Dataset, np.ndarray]:
    """Synthetic dataset (dense labels at both scales) and the dense fine truth [T, N]."""
    spec = _spec(spec, overrides)
    ds, truth, _ = _build(spec)
    return ds, truth


def _spec(spec, overrides):
    if spec is None:
        return BasinSpec(**overrides)
    if overrides:
        return BasinSpec(**{**asdict(spec), **overrides})
    return spec


def write_basin(spec: BasinSpec, out) -> Dataset:
    """Write the CSV files, truth.csv and basin.json for ``spec`` into ``out``."""
    ds, truth, extra = _build(spec)
    out = Path(out)
    save_dataset(ds, out, edges=extra["edges"], pairs=extra["pairs"], coincidence_column=True)
    write_labels(out / "truth.csv", ds.dates, ds.fine.node_ids, truth, np.ones_like(truth, bool))
    (out / "basin.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    return ds


def spread_experiment(spec: BasinSpec, eps_list, n_pairs: int | None = None,
                      seed: int = 0) -> dict:
    """Worst-case cross-scale spread over coarse pairs (A, B) for each eps.

    For each eps, the neighborhood of B is the fine reaches whose midpoint is
    within eps of B's midpoint; the spread is max - min of d(A, B') over it.
    Returns {eps: spread or None when every neighborhood is empty}.
    """
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list):
        raise ValidationError("eps values must be positive")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValidationError("eps_list must be strictly decreasing")
    geo = random_geometry(spec, np.random.default_rng(spec.seed))
    M = geo.M
    all_pairs = [(a, b) for a in range(M) for b in range(M) if a != b]
    if n_pairs is not None and n_pairs < len(all_pairs):
        pick = np.random.default_rng(seed).choice(len(all_pairs), n_pairs, replace=False)
        all_pairs = [all_pairs[i] for i in sorted(pick)]
    fine = [geo.fine_mid(c, j) for c, j in geo.fine_points()]
    out = {}
    for eps in eps_list:
        worst = None
        for a, b in all_pairs:
            ac, ax = geo.coarse_mid(a)
            bc, bx = geo.coarse_mid(b)
            to_b = np.array([geo.distance(fc, fx, bc, bx) for fc, fx in fine])
            near = np.flatnonzero(to_b <= eps)
            if near.size == 0:
                continue
            to_a = [geo.distance(ac, ax, *fine[i]) for i in near]
            s = epsilon_spread(to_a, eps, to_b[near])
            worst = s if worst is None else max(worst, s)
        out[eps] = worst
    return out
