"""Tri-plane quadtree feature grid.

A query point is projected onto the three axis-aligned planes (XY, YZ, XZ).
Each plane carries a pyramid of feature levels: the finest level has cell
size ``leaf_resolution``, each coarser level doubles it.  Per plane and
level, the four surrounding vertex features are interpolated bilinearly;
the results are summed across levels and planes (optionally concatenated
across planes).

Vertex features live in sparse hash-backed tables keyed by quantized 2D
vertex coordinates, and only vertices touched by training queries are
materialized — that is what keeps the map small.  A vertex's initial value
is a pure function of (seed, plane, level, key), so grid state depends only
on the *set* of touched vertices, never on insertion order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Aabb
from .optim import Param

PLANE_AXES = ((0, 1), (1, 2), (0, 2))  # XY, YZ, XZ
PLANE_NAMES = ("xy", "yz", "xz")

_MAGIC = b"RMESHGRD"
_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class MapFormatError(ValueError):
    """Raised when a serialized grid cannot be decoded."""


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _hash_init(keys: np.ndarray, salt: int, feature_dim: int, scale: float,
               dtype) -> np.ndarray:
    """Deterministic per-key uniform init in [-scale, scale]."""
    base = _splitmix64(keys.astype(np.uint64) ^ np.uint64(salt))
    lanes = _splitmix64(base[:, None] + np.arange(1, feature_dim + 1, dtype=np.uint64))
    unit = (lanes >> np.uint64(11)).astype(np.float64) * (2.0**-53)
    return ((unit * 2.0 - 1.0) * scale).astype(dtype)


class _VertexTable:
    """Sorted-key sparse table of per-vertex features for one plane level."""

    def __init__(self, salt: int, feature_dim: int, init_scale: float, dtype):
        self.salt = salt
        self.feature_dim = feature_dim
        self.init_scale = init_scale
        self.dtype = dtype
        self.keys = np.empty(0, dtype=np.int64)
        self.feats = Param(np.empty((0, feature_dim), dtype=dtype))

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, packed: np.ndarray) -> np.ndarray:
        """Row index per key, -1 where absent."""
        if len(self.keys) == 0:
            return np.full(packed.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, packed)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        found = self.keys[pos_c] == packed
        return np.where(found, pos_c, -1)

    def ensure(self, packed: np.ndarray):
        """Materialize missing keys, preserving existing values and moments."""
        wanted = np.unique(packed)
        if len(self.keys):
            new = wanted[self.lookup(wanted) < 0]
        else:
            new = wanted
        if len(new) == 0:
            return
        merged = np.union1d(self.keys, new)
        feats = Param(_hash_init(merged, self.salt, self.feature_dim,
                                 self.init_scale, self.dtype))
        if len(self.keys):
            old_pos = np.searchsorted(merged, self.keys)
            feats.value[old_pos] = self.feats.value
            feats.grad[old_pos] = self.feats.grad
            feats.m[old_pos] = self.feats.m
            feats.v[old_pos] = self.feats.v
        # swap arrays inside the existing Param so optimizer references survive
        self.feats.value = feats.value
        self.feats.grad = feats.grad
        self.feats.m = feats.m
        self.feats.v = feats.v
        self.keys = merged


def _pack(iu: np.ndarray, iv: np.ndarray) -> np.ndarray:
    return (iu.astype(np.int64) << 32) | iv.astype(np.int64)


def _unpack(packed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return packed >> 32, packed & 0xFFFFFFFF


@dataclass
class FeatureQueryResult:
    """Single-point query: combined feature plus its interpolation footprint.

    ``contributions`` lists (plane, level, key, weight) for every vertex that
    entered the bilinear combination; per plane-level the four weights sum
    to one.
    """

    feature: np.ndarray
    contributions: list[tuple[int, int, tuple[int, int], float]]
    clamped: bool


class GridQuery:
    """Batched query result retaining everything backward needs.

    Holds, per (plane, level): vertex rows, bilinear weights, the weights'
    spatial derivatives, and the gathered vertex features.
    """

    def __init__(self, grid: "TriPlaneGrid", n: int, clamped: np.ndarray):
        self.grid = grid
        self.n = n
        self.clamped = clamped
        self.rows: dict[tuple[int, int], np.ndarray] = {}
        self.weights: dict[tuple[int, int], np.ndarray] = {}
        self.dw: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.gathered: dict[tuple[int, int], np.ndarray] = {}

    def _blocks(self, arr: np.ndarray, plane: int) -> np.ndarray:
        if self.grid.combine == "concat":
            f = self.grid.feature_dim
            return arr[:, plane * f : (plane + 1) * f]
        return arr

    def features(self) -> np.ndarray:
        out = np.zeros((self.n, self.grid.output_dim), dtype=self.grid.dtype)
        for (plane, level), gathered in self.gathered.items():
            w = self.weights[(plane, level)]
            block = self._blocks(out, plane)
            block += np.einsum("bk,bkf->bf", w, gathered)
        return out

    def normal_contribution(self, u_grid: np.ndarray) -> np.ndarray:
        """Accumulate (d feature / d x)^T u for the SDF spatial gradient."""
        out = np.zeros((self.n, 3), dtype=self.grid.dtype)
        for (plane, level), gathered in self.gathered.items():
            a1, a2 = PLANE_AXES[plane]
            proj = np.einsum("bkf,bf->bk", gathered, self._blocks(u_grid, plane))
            dwu, dwv = self.dw[(plane, level)]
            out[:, a1] += np.sum(proj * dwu, axis=1)
            out[:, a2] += np.sum(proj * dwv, axis=1)
        return out

    def tangent_input(self, q: np.ndarray) -> np.ndarray:
        """Directional derivative of the feature along q: (d feature / d x) q."""
        out = np.zeros((self.n, self.grid.output_dim), dtype=self.grid.dtype)
        for (plane, level), gathered in self.gathered.items():
            a1, a2 = PLANE_AXES[plane]
            dwu, dwv = self.dw[(plane, level)]
            c = dwu * q[:, a1 : a1 + 1] + dwv * q[:, a2 : a2 + 1]
            block = self._blocks(out, plane)
            block += np.einsum("bk,bkf->bf", c, gathered)
        return out

    def scatter(self, d_feature: np.ndarray):
        """Accumulate feature gradients: grad[vertex] += weight * upstream."""
        for (plane, level), rows in self.rows.items():
            table = self.grid.tables[(plane, level)]
            if np.any(rows < 0):
                raise RuntimeError("gradient scatter hit unmaterialized vertices")
            w = self.weights[(plane, level)]
            up = self._blocks(d_feature, plane)
            contrib = w[:, :, None] * up[:, None, :]
            np.add.at(table.feats.grad, rows.reshape(-1), contrib.reshape(-1, up.shape[1]))

    def scatter_tangent(self, q: np.ndarray, u_grid: np.ndarray):
        """Gradient of q . normal w.r.t. features through the weight derivatives."""
        for (plane, level), rows in self.rows.items():
            table = self.grid.tables[(plane, level)]
            if np.any(rows < 0):
                raise RuntimeError("gradient scatter hit unmaterialized vertices")
            a1, a2 = PLANE_AXES[plane]
            dwu, dwv = self.dw[(plane, level)]
            c = dwu * q[:, a1 : a1 + 1] + dwv * q[:, a2 : a2 + 1]
            up = self._blocks(u_grid, plane)
            contrib = c[:, :, None] * up[:, None, :]
            np.add.at(table.feats.grad, rows.reshape(-1), contrib.reshape(-1, up.shape[1]))


class TriPlaneGrid:
    def __init__(self, aabb: Aabb, leaf_resolution: float = 0.2, levels: int = 3,
                 feature_dim: int = 8, combine: str = "sum", seed: int = 0,
                 init_scale: float = 1e-4, dtype=np.float32):
        if leaf_resolution <= 0:
            raise ValueError("leaf_resolution must be positive")
        if levels < 1:
            raise ValueError("levels must be >= 1")
        if combine not in ("sum", "concat"):
            raise ValueError(f"unknown combine mode {combine!r}")
        self.aabb = aabb
        self.leaf_resolution = float(leaf_resolution)
        self.levels = int(levels)
        self.feature_dim = int(feature_dim)
        self.combine = combine
        self.seed = int(seed)
        self.init_scale = float(init_scale)
        self.dtype = np.dtype(dtype)
        self.tables = {
            (plane, level): _VertexTable(
                self._salt(plane, level), feature_dim, init_scale, self.dtype
            )
            for plane in range(3)
            for level in range(levels)
        }

    def _salt(self, plane: int, level: int) -> int:
        return (self.seed * 0x10001 + plane * 0x51 + level * 0xA7 + 1) & 0xFFFFFFFFFFFFFFFF

    @property
    def output_dim(self) -> int:
        return self.feature_dim * (3 if self.combine == "concat" else 1)

    def cell_size(self, level: int) -> float:
        return self.leaf_resolution * 2.0 ** (self.levels - 1 - level)

    def num_vertices(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def parameters(self) -> list[Param]:
        return [self.tables[(p, l)].feats for p in range(3) for l in range(self.levels)]

    def _cells_and_fracs(self, points: np.ndarray, plane: int, level: int):
        a1, a2 = PLANE_AXES[plane]
        cs = self.cell_size(level)
        rel_u = (points[:, a1] - self.aabb.min[a1]) / cs
        rel_v = (points[:, a2] - self.aabb.min[a2]) / cs
        n_u = max(1, int(np.ceil(self.aabb.extent[a1] / cs)))
        n_v = max(1, int(np.ceil(self.aabb.extent[a2] / cs)))
        iu = np.clip(np.floor(rel_u).astype(np.int64), 0, n_u - 1)
        iv = np.clip(np.floor(rel_v).astype(np.int64), 0, n_v - 1)
        return iu, iv, rel_u - iu, rel_v - iv, cs

    def query_batch(self, points: np.ndarray, create: bool = False) -> GridQuery:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = self.aabb.contains(points)
        clamped = ~inside
        if np.any(clamped):
            points = self.aabb.clamp(points)
        q = GridQuery(self, len(points), clamped)
        offs = np.array([(0, 0), (1, 0), (0, 1), (1, 1)], dtype=np.int64)
        for plane in range(3):
            for level in range(self.levels):
                table = self.tables[(plane, level)]
                iu, iv, fu, fv, cs = self._cells_and_fracs(points, plane, level)
                cu = iu[:, None] + offs[None, :, 0]
                cv = iv[:, None] + offs[None, :, 1]
                packed = _pack(cu, cv)
                w = np.stack(
                    [
                        (1 - fu) * (1 - fv),
                        fu * (1 - fv),
                        (1 - fu) * fv,
                        fu * fv,
                    ],
                    axis=1,
                )
                dwu = np.stack([-(1 - fv), (1 - fv), -fv, fv], axis=1) / cs
                dwv = np.stack([-(1 - fu), -fu, (1 - fu), fu], axis=1) / cs
                if create:
                    table.ensure(packed.reshape(-1))
                rows = table.lookup(packed)
                gathered = np.zeros((len(points), 4, self.feature_dim), dtype=self.dtype)
                found = rows >= 0
                if np.any(found):
                    gathered[found] = table.feats.value[rows[found]]
                key = (plane, level)
                q.rows[key] = rows
                q.weights[key] = w
                q.dw[key] = (dwu, dwv)
                q.gathered[key] = gathered
        return q

    def query(self, x: np.ndarray, create: bool = False) -> FeatureQueryResult:
        """Single-point query reporting the interpolation footprint."""
        batch = self.query_batch(np.asarray(x, dtype=np.float64).reshape(1, 3), create)
        contributions = []
        clamped_pt = self.aabb.clamp(np.asarray(x, dtype=np.float64).reshape(1, 3))
        offs = np.array([(0, 0), (1, 0), (0, 1), (1, 1)], dtype=np.int64)
        for plane in range(3):
            for level in range(self.levels):
                iu, iv, _, _, _ = self._cells_and_fracs(clamped_pt, plane, level)
                w = batch.weights[(plane, level)][0]
                for k in range(4):
                    key = (int(iu[0] + offs[k, 0]), int(iv[0] + offs[k, 1]))
                    contributions.append((plane, level, key, float(w[k])))
        return FeatureQueryResult(
            feature=batch.features()[0],
            contributions=contributions,
            clamped=bool(batch.clamped[0]),
        )

    def scatter_gradient(self, result: FeatureQueryResult, upstream: np.ndarray):
        """Accumulate upstream feature gradient into vertex gradient buffers."""
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != (self.output_dim,):
            raise ValueError(f"upstream gradient must have length {self.output_dim}")
        for plane, level, key, weight in result.contributions:
            table = self.tables[(plane, level)]
            row = table.lookup(np.array([_pack(np.int64(key[0]), np.int64(key[1]))]))[0]
            if row < 0:
                raise RuntimeError(f"vertex {key} missing from table ({plane},{level})")
            if self.combine == "concat":
                f = self.feature_dim
                table.feats.grad[row] += weight * upstream[plane * f : (plane + 1) * f]
            else:
                table.feats.grad[row] += weight * upstream

    def materialize(self, points: np.ndarray, chunk: int = 262144):
        """Create all vertices the given training positions will touch."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        points = self.aabb.clamp(points)
        offs = np.array([(0, 0), (1, 0), (0, 1), (1, 1)], dtype=np.int64)
        for start in range(0, len(points), chunk):
            block = points[start : start + chunk]
            for plane in range(3):
                for level in range(self.levels):
                    iu, iv, _, _, _ = self._cells_and_fracs(block, plane, level)
                    cu = iu[:, None] + offs[None, :, 0]
                    cv = iv[:, None] + offs[None, :, 1]
                    self.tables[(plane, level)].ensure(_pack(cu, cv).reshape(-1))

    # -- serialization ------------------------------------------------------

    def serialize(self) -> bytes:
        parts = [_MAGIC, struct.pack("<I", _VERSION)]
        parts.append(
            struct.pack(
                "<BBIId",
                _DTYPE_CODES[self.dtype],
                0 if self.combine == "sum" else 1,
                self.levels,
                self.feature_dim,
                self.leaf_resolution,
            )
        )
        parts.append(struct.pack("<6d", *self.aabb.min, *self.aabb.max))
        parts.append(struct.pack("<dq", self.init_scale, self.seed))
        for plane in range(3):
            for level in range(self.levels):
                table = self.tables[(plane, level)]
                order = np.argsort(table.keys, kind="stable")
                parts.append(struct.pack("<Q", len(table)))
                parts.append(table.keys[order].astype("<i8").tobytes())
                parts.append(
                    np.ascontiguousarray(table.feats.value[order]).astype(
                        self.dtype.newbyteorder("<")
                    ).tobytes()
                )
        return b"".join(parts)

    @classmethod
    def deserialize(cls, blob: bytes) -> "TriPlaneGrid":
        view = memoryview(blob)
        if len(view) < len(_MAGIC) + 4 or bytes(view[: len(_MAGIC)]) != _MAGIC:
            raise MapFormatError("not a feature grid map (bad magic)")
        off = len(_MAGIC)
        (version,) = struct.unpack_from("<I", view, off)
        off += 4
        if version != _VERSION:
            raise MapFormatError(f"unsupported map version {version}")
        try:
            dtype_code, combine_code, levels, fdim, leaf = struct.unpack_from(
                "<BBIId", view, off
            )
            off += struct.calcsize("<BBIId")
            box = struct.unpack_from("<6d", view, off)
            off += 48
            init_scale, seed = struct.unpack_from("<dq", view, off)
            off += struct.calcsize("<dq")
            grid = cls(
                Aabb(np.array(box[:3]), np.array(box[3:])),
                leaf_resolution=leaf,
                levels=levels,
                feature_dim=fdim,
                combine="sum" if combine_code == 0 else "concat",
                seed=seed,
                init_scale=init_scale,
                dtype=_DTYPES[dtype_code],
            )
            itemsize = grid.dtype.itemsize
            for plane in range(3):
                for level in range(levels):
                    (count,) = struct.unpack_from("<Q", view, off)
                    off += 8
                    keys = np.frombuffer(view, dtype="<i8", count=count, offset=off)
                    off += 8 * count
                    feats = np.frombuffer(
                        view, dtype=grid.dtype.newbyteorder("<"),
                        count=count * fdim, offset=off,
                    )
                    off += itemsize * count * fdim
                    table = grid.tables[(plane, level)]
                    table.keys = keys.astype(np.int64)
                    table.feats = Param(
                        feats.astype(grid.dtype).reshape(count, fdim).copy()
                    )
        except (struct.error, ValueError) as exc:
            raise MapFormatError(f"truncated or corrupt map: {exc}") from exc
        if off != len(view):
            raise MapFormatError("trailing bytes after map payload")
        return grid
