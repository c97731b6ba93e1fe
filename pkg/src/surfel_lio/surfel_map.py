"""Octree of multi-scale surfels with incremental (Welford) statistics.

Every node at every depth keeps the raw moments (N, S, C) of the points that
fall inside its voxel. Depth 0 holds the leaves of size ``leaf_size``; a node
at depth ``d`` spans ``2**d * leaf_size``. Parent indices are the child
indices arithmetically shifted right by one, so the key chain of a point is
computed once from its leaf index.

Storage is one struct-of-arrays table per depth, addressed through a dict
from packed key codes to slots. Derived attributes (mean, normal,
planarity, ...) are recomputed for touched nodes at the end of each write,
and a sorted table of association-eligible nodes is cached per map version
so candidate queries vectorize over whole clouds.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

_OFFSET = 1 << 20
_MASK = (1 << 21) - 1
EIGEN_TIE_TOL = 1e-12
DEGENERATE_TRACE = 1e-12


class InvalidRemoval(ValueError):
    """Removing more points from a node than it holds, or from a missing node."""


class InsufficientPoints(ValueError):
    pass


class DegenerateSurfel(ValueError):
    pass


@dataclass(frozen=True)
class MapConfig:
    leaf_size: float = 0.1
    max_depth: int = 5
    min_points: int = 6
    min_planarity: float = 0.5
    search_radius: float = 0.1
    max_plane_dist: float = 0.3

    def __post_init__(self):
        if not self.leaf_size > 0:
            raise ValueError("leaf_size must be positive")
        if not 1 <= self.max_depth <= 21:
            raise ValueError("max_depth must be in [1, 21]")
        if self.min_points < 3:
            raise ValueError("min_points must be >= 3")
        if not 0.0 <= self.min_planarity <= 1.0:
            raise ValueError("min_planarity must be in [0, 1]")
        if not self.search_radius > 0 or not self.max_plane_dist > 0:
            raise ValueError("search_radius and max_plane_dist must be positive")


@dataclass(frozen=True, order=True)
class NodeKey:
    depth: int
    ix: int
    iy: int
    iz: int

    def parent(self) -> "NodeKey":
        return NodeKey(self.depth + 1, self.ix >> 1, self.iy >> 1, self.iz >> 1)


def node_scale(key: NodeKey | int, cfg: MapConfig) -> float:
    depth = key.depth if isinstance(key, NodeKey) else int(key)
    if depth > cfg.max_depth:
        raise ValueError(f"depth {depth} exceeds max_depth {cfg.max_depth}")
    return (2 ** depth) * cfg.leaf_size


def encode_keys(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -_OFFSET or idx.max() >= _OFFSET):
        raise ValueError("voxel index outside the representable map extent")
    shifted = idx + _OFFSET
    return (shifted[..., 0] << 42) | (shifted[..., 1] << 21) | shifted[..., 2]


def decode_keys(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return np.stack([(codes >> 42) & _MASK, (codes >> 21) & _MASK, codes & _MASK], axis=-1) - _OFFSET


def leaf_indices(points: np.ndarray, leaf_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / leaf_size).astype(np.int64)


# --------------------------------------------------------------------------
# statistics

@dataclass
class SurfelStats:
    N: int = 0
    S: np.ndarray = field(default_factory=lambda: np.zeros(3))
    C: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @classmethod
    def empty(cls) -> "SurfelStats":
        return cls()

    @classmethod
    def from_points(cls, points) -> "SurfelStats":
        """Two-pass batch moments; the reference the incremental path must match."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(pts)
        if n == 0:
            return cls()
        mean = pts.mean(axis=0)
        d = pts - mean
        C = d.T @ d if n > 1 else np.zeros((3, 3))
        return cls(n, pts.sum(axis=0), C)

    def copy(self) -> "SurfelStats":
        return SurfelStats(self.N, self.S.copy(), self.C.copy())


def _merge_arrays(Na, Sa, Ca, Nb, Sb, Cb):
    N = Na + Nb
    both = (Na > 0) & (Nb > 0)
    den = np.where(both, Na * Nb * np.maximum(N, 1), 1).astype(float)
    alpha = np.where(both, 1.0 / den, 0.0)
    beta = Nb[:, None] * Sa - Na[:, None] * Sb
    C = Ca + Cb + alpha[:, None, None] * beta[:, :, None] * beta[:, None, :]
    return N, Sa + Sb, C


def _remove_arrays(Ni, Si, Ci, Nn, Sn, Cn):
    N = Ni - Nn
    S = Si - Sn
    both = (N > 0) & (Nn > 0)
    den = np.where(both, N * Nn * np.maximum(N + Nn, 1), 1).astype(float)
    alpha = np.where(both, 1.0 / den, 0.0)
    beta = Nn[:, None] * S - N[:, None] * Sn
    C = Ci - Cn - alpha[:, None, None] * beta[:, :, None] * beta[:, None, :]
    C = 0.5 * (C + np.swapaxes(C, 1, 2))
    C[N <= 1] = 0.0
    S[N == 0] = 0.0
    return N, S, C


def stats_merge(a: SurfelStats, b: SurfelStats) -> SurfelStats:
    if a.N < 0 or b.N < 0:
        raise ValueError("negative point count")
    if a.N == 0:
        return b.copy()
    if b.N == 0:
        return a.copy()
    N, S, C = _merge_arrays(np.array([a.N]), a.S[None], a.C[None],
                            np.array([b.N]), b.S[None], b.C[None])
    return SurfelStats(int(N[0]), S[0], C[0])


def stats_remove(parent: SurfelStats, child: SurfelStats) -> SurfelStats:
    if child.N > parent.N:
        raise InvalidRemoval(f"cannot remove {child.N} points from a node holding {parent.N}")
    if child.N == 0:
        return parent.copy()
    N, S, C = _remove_arrays(np.array([parent.N]), parent.S[None], parent.C[None],
                             np.array([child.N]), child.S[None], child.C[None])
    return SurfelStats(int(N[0]), S[0], C[0])


# --------------------------------------------------------------------------
# derived attributes

@dataclass(frozen=True)
class SurfelAttributes:
    mean: np.ndarray
    covariance: np.ndarray
    eigenvalues: np.ndarray
    normal: np.ndarray
    offset: float
    planarity: float


def _orient_normals(normal, mean, viewpoint, has_view):
    normal = normal.copy()
    if has_view is not None and np.any(has_view):
        flip = has_view & (np.einsum("ij,ij->i", normal, viewpoint - mean) < 0)
        normal[flip] *= -1.0
    rest = ~has_view if has_view is not None else np.ones(len(normal), bool)
    if np.any(rest):
        big = np.argmax(np.abs(normal[rest]), axis=1)
        neg = normal[rest][np.arange(len(big)), big] < 0
        sub = normal[rest]
        sub[neg] *= -1.0
        normal[rest] = sub
    return normal


def _attributes_batch(N, S, C, viewpoint=None, has_view=None):
    """Vectorized attribute derivation over parallel (N, S, C) arrays."""
    Nf = N.astype(float)
    mean = S / Nf[:, None]
    cov = C / np.maximum(Nf - 1.0, 1.0)[:, None, None]
    lam, vec = np.linalg.eigh(cov)
    normal = _orient_normals(vec[:, :, 0], mean, viewpoint, has_view)
    total = lam.sum(axis=1)
    degenerate = total < DEGENERATE_TRACE
    rho = 2.0 * (lam[:, 1] - lam[:, 0]) / np.where(degenerate, 1.0, total)
    rho = np.clip(rho, 0.0, 1.0)
    tie = (lam[:, 1] - lam[:, 0]) <= EIGEN_TIE_TOL
    return mean, cov, lam, normal, rho, degenerate, tie


def derive_attributes(s: SurfelStats, viewpoint=None) -> SurfelAttributes:
    if s.N < 3:
        raise InsufficientPoints(f"surfel needs at least 3 points, has {s.N}")
    view = None if viewpoint is None else np.asarray(viewpoint, float)[None]
    has = None if viewpoint is None else np.array([True])
    mean, cov, lam, normal, rho, degenerate, _ = _attributes_batch(
        np.array([s.N]), s.S[None], s.C[None], view, has)
    if degenerate[0]:
        raise DegenerateSurfel("covariance trace below 1e-12")
    assert 0.0 <= rho[0] <= 1.0
    n = normal[0]
    return SurfelAttributes(mean[0], cov[0], lam[0], n, float(-n @ mean[0]), float(rho[0]))


# --------------------------------------------------------------------------
# concurrency

class ReadWriteLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


# --------------------------------------------------------------------------
# map storage

class _Level:
    def __init__(self, capacity: int = 1024):
        self.index: dict[int, int] = {}
        self.free: list[int] = []
        self.size = 0
        self._alloc(capacity)

    def _alloc(self, cap):
        self.cap = cap
        self.code = np.zeros(cap, np.int64)
        self.alive = np.zeros(cap, bool)
        self.N = np.zeros(cap, np.int64)
        self.S = np.zeros((cap, 3))
        self.C = np.zeros((cap, 3, 3))
        self.view = np.zeros((cap, 3))
        self.has_view = np.zeros(cap, bool)
        self.mean = np.zeros((cap, 3))
        self.normal = np.zeros((cap, 3))
        self.rho = np.zeros(cap)
        self.lam = np.zeros((cap, 3))
        self.ok = np.zeros(cap, bool)  # N >= 3, non-degenerate, no eigen tie

    def _grow(self, need):
        cap = self.cap
        while cap < need:
            cap *= 2
        if cap == self.cap:
            return
        old = {k: getattr(self, k) for k in
               ("code", "alive", "N", "S", "C", "view", "has_view", "mean", "normal", "rho", "lam", "ok")}
        n = self.cap
        self._alloc(cap)
        for k, v in old.items():
            getattr(self, k)[:n] = v

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        get = self.index.get
        return np.fromiter((get(c, -1) for c in codes.tolist()), np.int64, len(codes))

    def allocate(self, codes: np.ndarray) -> np.ndarray:
        slots = np.empty(len(codes), np.int64)
        n_free = min(len(self.free), len(codes))
        for i in range(n_free):
            slots[i] = self.free.pop()
        rest = len(codes) - n_free
        if rest:
            self._grow(self.size + rest)
            slots[n_free:] = np.arange(self.size, self.size + rest)
            self.size += rest
        for c, s in zip(codes.tolist(), slots.tolist()):
            self.index[c] = s
        self.code[slots] = codes
        self.alive[slots] = True
        self.N[slots] = 0
        self.S[slots] = 0.0
        self.C[slots] = 0.0
        self.has_view[slots] = False
        self.ok[slots] = False
        return slots

    def release(self, slots: np.ndarray):
        for c in self.code[slots].tolist():
            del self.index[c]
        self.alive[slots] = False
        self.ok[slots] = False
        self.N[slots] = 0
        self.free.extend(slots.tolist())

    def refresh(self, slots: np.ndarray):
        if len(slots) == 0:
            return
        N = self.N[slots]
        enough = N >= 3
        self.ok[slots] = False
        sel = slots[enough]
        if len(sel) == 0:
            return
        mean, _, lam, normal, rho, degenerate, tie = _attributes_batch(
            self.N[sel], self.S[sel], self.C[sel], self.view[sel], self.has_view[sel])
        self.mean[sel] = mean
        self.normal[sel] = normal
        self.lam[sel] = lam
        self.rho[sel] = rho
        self.ok[sel] = ~degenerate & ~tie


def _group(codes: np.ndarray, points: np.ndarray):
    """Per-key batch moments of ``points`` grouped by ``codes``."""
    uniq, inv = np.unique(codes, return_inverse=True)
    inv = inv.reshape(-1)
    m = len(uniq)
    n = np.bincount(inv, minlength=m)
    S = np.stack([np.bincount(inv, points[:, k], minlength=m) for k in range(3)], axis=1)
    d = points - (S / n[:, None])[inv]
    C = np.empty((m, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            v = np.bincount(inv, d[:, i] * d[:, j], minlength=m)
            C[:, i, j] = v
            C[:, j, i] = v
    C[n <= 1] = 0.0
    return uniq, n.astype(np.int64), S, C


@dataclass
class UpdateSummary:
    nodes_created: int = 0
    nodes_touched: int = 0
    nodes_deleted: int = 0


@dataclass
class CandidateSet:
    """Flat (point, surfel) candidate pairs from a batched query."""

    point_index: np.ndarray
    depth: np.ndarray
    code: np.ndarray
    mean: np.ndarray
    normal: np.ndarray

    def __len__(self):
        return len(self.point_index)


class SurfelMap:
    def __init__(self, config: MapConfig | None = None):
        self.config = config or MapConfig()
        self.levels = [_Level() for _ in range(self.config.max_depth + 1)]
        self.version = 0
        self.lock = ReadWriteLock()
        self._cache_lock = threading.Lock()
        self._snapshots: dict[int, tuple[int, np.ndarray, np.ndarray]] = {}

    # -- bookkeeping -----------------------------------------------------
    def __len__(self) -> int:
        return sum(len(lv.index) for lv in self.levels)

    def is_empty(self) -> bool:
        return len(self.levels[0].index) == 0

    def node_count(self, depth: int | None = None) -> int:
        if depth is None:
            return len(self)
        return len(self.levels[depth].index)

    def keys(self, depth: int | None = None) -> Iterator[NodeKey]:
        depths = range(len(self.levels)) if depth is None else [depth]
        for d in depths:
            lv = self.levels[d]
            codes = np.array(sorted(lv.index), dtype=np.int64)
            for c, ijk in zip(codes.tolist(), decode_keys(codes).tolist()):
                yield NodeKey(d, *ijk)

    def stats(self, key: NodeKey) -> SurfelStats | None:
        lv = self.levels[key.depth]
        slot = lv.index.get(int(encode_keys(np.array([key.ix, key.iy, key.iz]))))
        if slot is None:
            return None
        return SurfelStats(int(lv.N[slot]), lv.S[slot].copy(), lv.C[slot].copy())

    def attributes(self, key: NodeKey) -> SurfelAttributes | None:
        lv = self.levels[key.depth]
        slot = lv.index.get(int(encode_keys(np.array([key.ix, key.iy, key.iz]))))
        if slot is None or lv.N[slot] < 3:
            return None
        view = lv.view[slot] if lv.has_view[slot] else None
        return derive_attributes(SurfelStats(int(lv.N[slot]), lv.S[slot], lv.C[slot]), view)

    def node_bounds(self, key: NodeKey) -> tuple[np.ndarray, np.ndarray]:
        s = node_scale(key, self.config)
        lo = np.array([key.ix, key.iy, key.iz], float) * s
        return lo, lo + s

    # -- updates ---------------------------------------------------------
    def insert_cloud(self, points, viewpoint=None) -> UpdateSummary:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        summary = UpdateSummary()
        if len(pts) == 0:
            return summary
        leaf = leaf_indices(pts, self.config.leaf_size)
        view = None if viewpoint is None else np.asarray(viewpoint, dtype=float)
        with self.lock.write():
            for d, lv in enumerate(self.levels):
                codes, n, S, C = _group(encode_keys(leaf >> d), pts)
                slots = lv.lookup(codes)
                new = slots < 0
                if np.any(new):
                    slots[new] = lv.allocate(codes[new])
                    summary.nodes_created += int(new.sum())
                summary.nodes_touched += len(codes)
                N2, S2, C2 = _merge_arrays(lv.N[slots], lv.S[slots], lv.C[slots], n, S, C)
                lv.N[slots], lv.S[slots], lv.C[slots] = N2, S2, C2
                if view is not None:
                    lv.view[slots] = view
                    lv.has_view[slots] = True
                lv.refresh(slots)
            self.version += 1
        return summary

    def remove_cloud(self, points) -> UpdateSummary:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        summary = UpdateSummary()
        if len(pts) == 0:
            return summary
        leaf = leaf_indices(pts, self.config.leaf_size)
        with self.lock.write():
            plan = []
            for d, lv in enumerate(self.levels):
                codes, n, S, C = _group(encode_keys(leaf >> d), pts)
                slots = lv.lookup(codes)
                if np.any(slots < 0):
                    raise InvalidRemoval(f"removing points from an empty node at depth {d}")
                if np.any(lv.N[slots] < n):
                    raise InvalidRemoval(f"removal exceeds node point count at depth {d}")
                plan.append((lv, slots, n, S, C))
            for lv, slots, n, S, C in plan:
                N2, S2, C2 = _remove_arrays(lv.N[slots], lv.S[slots], lv.C[slots], n, S, C)
                lv.N[slots], lv.S[slots], lv.C[slots] = N2, S2, C2
                summary.nodes_touched += len(slots)
                dead = slots[N2 == 0]
                if len(dead):
                    lv.release(dead)
                    summary.nodes_deleted += len(dead)
                lv.refresh(slots[N2 > 0])
            self.version += 1
        return summary

    # -- queries ---------------------------------------------------------
    def _eligible(self, depth: int) -> tuple[np.ndarray, np.ndarray]:
        with self._cache_lock:
            cached = self._snapshots.get(depth)
            if cached is not None and cached[0] == self.version:
                return cached[1], cached[2]
            lv = self.levels[depth]
            cfg = self.config
            m = lv.size
            mask = (lv.alive[:m] & lv.ok[:m] & (lv.N[:m] >= cfg.min_points)
                    & (lv.rho[:m] > cfg.min_planarity))
            slots = np.nonzero(mask)[0]
            codes = lv.code[slots]
            order = np.argsort(codes, kind="stable")
            snap = (self.version, codes[order], slots[order])
            self._snapshots[depth] = snap
            return snap[1], snap[2]

    def query_batch(self, points, depths: Sequence[int] | None = None) -> CandidateSet:
        """All (point, node) pairs passing the stage-one predicates."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        cfg = self.config
        if depths is None:
            depths = range(1, cfg.max_depth + 1)
        depths = sorted(d for d in set(depths) if 1 <= d <= cfg.max_depth)
        r = cfg.search_radius
        out_p, out_d, out_c, out_mean, out_normal = [], [], [], [], []
        with self.lock.read():
            lo_leaf = leaf_indices(pts - r, cfg.leaf_size)
            hi_leaf = leaf_indices(pts + r, cfg.leaf_size)
            for d in depths:
                codes_sorted, slots_sorted = self._eligible(d)
                if len(codes_sorted) == 0 or len(pts) == 0:
                    continue
                scale = (2 ** d) * cfg.leaf_size
                lo, hi = lo_leaf >> d, hi_leaf >> d
                span = hi - lo
                m = int(span.max()) + 1
                g = np.arange(m)
                off = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
                ok = np.all(off[None, :, :] <= span[:, None, :], axis=2)
                pi, oi = np.nonzero(ok)
                cand = lo[pi] + off[oi]
                codes = encode_keys(cand)
                pos = np.searchsorted(codes_sorted, codes)
                pos_c = np.minimum(pos, len(codes_sorted) - 1)
                found = codes_sorted[pos_c] == codes
                if not np.any(found):
                    continue
                pi, cand, codes, pos_c = pi[found], cand[found], codes[found], pos_c[found]
                lower = cand * scale
                f = pts[pi]
                gap = np.maximum(np.maximum(lower - f, 0.0), f - (lower + scale))
                hit = np.einsum("ij,ij->i", gap, gap) <= r * r
                out_p.append(pi[hit])
                out_d.append(np.full(int(hit.sum()), d, np.int64))
                out_c.append(codes[hit])
                sel = slots_sorted[pos_c[hit]]
                out_mean.append(self.levels[d].mean[sel])
                out_normal.append(self.levels[d].normal[sel])
            if not out_p:
                e = np.zeros(0, np.int64)
                return CandidateSet(e, e.copy(), e.copy(), np.zeros((0, 3)), np.zeros((0, 3)))
            p = np.concatenate(out_p)
            dd = np.concatenate(out_d)
            cc = np.concatenate(out_c)
            mean = np.concatenate(out_mean)
            normal = np.concatenate(out_normal)
        order = np.lexsort((cc, dd, p))
        return CandidateSet(p[order], dd[order], cc[order], mean[order], normal[order])

    def query_candidates(self, f, depths: Sequence[int] | None = None) -> list[tuple[NodeKey, SurfelAttributes]]:
        cs = self.query_batch(np.asarray(f, dtype=float)[None], depths)
        out = []
        for d, c in zip(cs.depth.tolist(), cs.code.tolist()):
            key = NodeKey(d, *decode_keys(np.array(c)).tolist())
            out.append((key, self.attributes(key)))
        return out

    # -- export ----------------------------------------------------------
    def leaf_means(self) -> tuple[np.ndarray, np.ndarray]:
        lv = self.levels[0]
        slots = np.array(sorted(lv.index.values()), dtype=np.int64)
        if len(slots) == 0:
            return np.zeros((0, 3)), np.zeros(0, np.int64)
        return lv.S[slots] / lv.N[slots, None], lv.N[slots].copy()

    def export_ply(self, path) -> int:
        """Binary little-endian PLY, one vertex per leaf mean, intensity = N."""
        means, counts = self.leaf_means()
        header = ("ply\nformat binary_little_endian 1.0\n"
                  f"element vertex {len(means)}\n"
                  "property float x\nproperty float y\nproperty float z\n"
                  "property float intensity\nend_header\n")
        body = np.empty((len(means), 4), dtype="<f4")
        body[:, :3] = means
        body[:, 3] = counts
        with open(Path(path), "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(body.tobytes())
        return len(means)


def read_ply(path) -> np.ndarray:
    """Read back a PLY written by :meth:`SurfelMap.export_ply` as (n, 4) float32."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n = int(next(line.split()[2] for line in header if line.startswith("element vertex")))
    body = np.frombuffer(data[end:], dtype="<f4", count=n * 4)
    return body.reshape(n, 4)


__all__ = [
    "MapConfig", "NodeKey", "SurfelStats", "SurfelAttributes", "SurfelMap", "UpdateSummary",
    "CandidateSet", "InvalidRemoval", "InsufficientPoints", "DegenerateSurfel",
    "node_scale", "stats_merge", "stats_remove", "derive_attributes", "read_ply",
    "encode_keys", "decode_keys",
]
