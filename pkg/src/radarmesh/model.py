"""Joint surface/intensity field model.

A query position is encoded twice (learned tri-plane feature + Fourier
encoding) and passed to the distance network, which outputs the signed
distance ``d``, optionally a learned geometry feature ``g`` and the spatial
SDF gradient ``n`` (exact through the network and Fourier encoding; the
grid contribution uses the piecewise-bilinear derivative, the one non-smooth
term).  The intensity network consumes the Fourier-encoded position, the
spherical-harmonics-encoded viewing direction, and (unless ablated) ``d``,
``g`` and ``n``, and emits a sigmoid-bounded intensity in [0, 1].

Backward is exact reverse mode.  Intensity-loss gradients flow through
``d``/``g``/``n`` back into the distance network and the feature grid
(config-toggleable, and discarded once the distance network is frozen).
The ``n`` path needs the gradient of an input gradient; see
:meth:`mlp.Mlp.accumulate_tangent_grads` for why ReLU makes that cheap.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoding import (FourierConfig, SphericalHarmonicsConfig,
                       fourier_encode, fourier_jacobian, sh_encode)
from .geometry import IntensityRange
from .grid import TriPlaneGrid
from .mlp import Mlp

_CKPT_MAGIC = b"RMESHCKP"
_CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    sdf_hidden: tuple[int, ...] = (64, 64)
    intensity_hidden: tuple[int, ...] = (64, 64)
    geo_feature_dim: int = 15
    use_geo_feature: bool = True
    use_normals: bool = True
    use_sdf_inputs: bool = True
    intensity_grads_to_sdf: bool = True
    dtype: str = "float32"

    def feeds_geo(self) -> bool:
        return self.use_sdf_inputs and self.use_geo_feature

    def feeds_normals(self) -> bool:
        return self.use_sdf_inputs and self.use_normals


@dataclass
class SdfOutput:
    d: float
    g: np.ndarray | None = None
    n: np.ndarray | None = None


@dataclass
class IntensityOutput:
    i: float


class ForwardState:
    """Everything one batched forward pass caches for its backward pass."""

    def __init__(self):
        self.n_samples = 0
        self.grid_query = None
        self.phi = None
        self.phi_jac = None
        self.sdf_cache = None
        self.d = None
        self.g = None
        self.u = None
        self.reverse = None
        self.normals = None
        self.intensity_cache = None
        self.intensity = None
        self.consumed = False


class RadarFieldModel:
    def __init__(self, grid: TriPlaneGrid, fourier: FourierConfig | None = None,
                 sh: SphericalHarmonicsConfig | None = None,
                 net: NetworkConfig | None = None,
                 intensity_range: IntensityRange | None = None, seed: int = 0):
        self.grid = grid
        self.fourier = fourier or FourierConfig()
        self.sh = sh or SphericalHarmonicsConfig()
        self.net = net or NetworkConfig()
        self.intensity_range = intensity_range
        self.seed = int(seed)
        self.dtype = np.dtype(self.net.dtype)
        if self.dtype != grid.dtype:
            raise ValueError("grid dtype and network dtype must match")

        self.scene_center = grid.aabb.center
        self.scene_scale = float(np.max(grid.aabb.extent) / 2.0) or 1.0

        sdf_in = grid.output_dim + self.fourier.output_dim
        sdf_out = 1 + (self.net.geo_feature_dim if self.net.use_geo_feature else 0)
        rng = np.random.default_rng(self.seed)
        self.sdf_mlp = Mlp([sdf_in, *self.net.sdf_hidden, sdf_out], rng, self.dtype)
        self.intensity_mlp = Mlp(
            [self.intensity_input_dim(), *self.net.intensity_hidden, 1], rng, self.dtype
        )

    # -- layout --------------------------------------------------------------

    def intensity_input_dim(self) -> int:
        dim = self.fourier.output_dim + self.sh.output_dim
        if self.net.use_sdf_inputs:
            dim += 1
            if self.net.use_geo_feature:
                dim += self.net.geo_feature_dim
            if self.net.use_normals:
                dim += 3
        return dim

    def normalize_positions(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.scene_center) / self.scene_scale

    # -- forward ---------------------------------------------------------------

    def forward(self, x: np.ndarray, v: np.ndarray | None = None,
                create: bool = False, with_intensity: bool = True) -> ForwardState:
        st = ForwardState()
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        st.n_samples = len(x)
        x_hat = self.normalize_positions(x)

        st.grid_query = self.grid.query_batch(x, create=create)
        feats = st.grid_query.features()
        st.phi = fourier_encode(x_hat, self.fourier).astype(self.dtype)
        z0 = np.concatenate([feats.astype(self.dtype), st.phi], axis=1)
        out, st.sdf_cache = self.sdf_mlp.forward(z0)
        st.d = out[:, 0]
        if self.net.use_geo_feature:
            st.g = out[:, 1:]

        if self.net.use_normals:
            st.u, st.reverse = self.sdf_mlp.input_gradient(st.sdf_cache, 0)
            gdim = self.grid.output_dim
            st.normals = st.grid_query.normal_contribution(st.u[:, :gdim].astype(np.float64))
            jac_vals, jac_axes = fourier_jacobian(x_hat, self.fourier)
            st.phi_jac = (jac_vals, jac_axes)
            u_phi = st.u[:, gdim:].astype(np.float64)
            for axis in range(3):
                mask = jac_axes == axis
                st.normals[:, axis] += np.sum(u_phi[:, mask] * jac_vals[:, mask], axis=1) / self.scene_scale

        if with_intensity:
            if v is None:
                raise ValueError("viewing directions required for intensity forward")
            v = np.atleast_2d(np.asarray(v, dtype=np.float64))
            sh_vals = sh_encode(v, self.sh).astype(self.dtype)
            parts = [st.phi, sh_vals]
            if self.net.use_sdf_inputs:
                parts.append(st.d[:, None].astype(self.dtype))
                if self.net.use_geo_feature:
                    parts.append(st.g.astype(self.dtype))
                if self.net.use_normals:
                    parts.append(st.normals.astype(self.dtype))
            z1 = np.concatenate(parts, axis=1)
            logit, st.intensity_cache = self.intensity_mlp.forward(z1)
            st.intensity = 1.0 / (1.0 + np.exp(-logit[:, 0]))
        return st

    # -- backward --------------------------------------------------------------

    def backward(self, st: ForwardState, d_intensity: np.ndarray | None,
                 d_sdf: np.ndarray | None, train_sdf: bool = True):
        """Accumulate parameter and feature gradients for one batch.

        ``d_intensity`` and ``d_sdf`` are the loss gradients w.r.t. the
        predicted intensity and the predicted signed distance.  With
        ``train_sdf=False`` every gradient into the distance network and the
        feature grid is discarded (freeze semantics).
        """
        if st.consumed:
            raise RuntimeError("backward called twice on one forward state")
        st.consumed = True

        d_total = np.zeros(st.n_samples, dtype=self.dtype)
        if d_sdf is not None:
            d_total += np.asarray(d_sdf, dtype=self.dtype)
        dg = None
        q = None

        if d_intensity is not None and st.intensity is not None:
            i = st.intensity
            dlogit = (np.asarray(d_intensity, dtype=np.float64) * i * (1.0 - i)).astype(self.dtype)
            dz1 = self.intensity_mlp.backward(st.intensity_cache, dlogit[:, None])
            if self.net.use_sdf_inputs and self.net.intensity_grads_to_sdf and train_sdf:
                pos = self.fourier.output_dim + self.sh.output_dim
                d_total += dz1[:, pos]
                pos += 1
                if self.net.use_geo_feature:
                    dg = dz1[:, pos : pos + self.net.geo_feature_dim]
                    pos += self.net.geo_feature_dim
                if self.net.use_normals:
                    q = dz1[:, pos : pos + 3].astype(np.float64)

        if not train_sdf:
            return

        d_out = np.zeros((st.n_samples, self.sdf_mlp.sizes[-1]), dtype=self.dtype)
        d_out[:, 0] = d_total
        if dg is not None:
            d_out[:, 1:] = dg
        dz0 = self.sdf_mlp.backward(st.sdf_cache, d_out)

        if q is not None and np.any(q):
            gdim = self.grid.output_dim
            u_grid = st.u[:, :gdim].astype(np.float64)
            t_grid = st.grid_query.tangent_input(q)
            jac_vals, jac_axes = st.phi_jac
            t_phi = jac_vals * q[:, jac_axes] / self.scene_scale
            t0 = np.concatenate([t_grid, t_phi], axis=1).astype(self.dtype)
            tangents = self.sdf_mlp.tangent(st.sdf_cache, t0)
            self.sdf_mlp.accumulate_tangent_grads(st.reverse, tangents)
            st.grid_query.scatter_tangent(q, u_grid)

        gdim = self.grid.output_dim
        st.grid_query.scatter(dz0[:, :gdim].astype(np.float64))

    # -- read-only queries -------------------------------------------------------

    def query_sdf(self, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(len(points), dtype=np.float64)
        for s in range(0, len(points), chunk):
            st = self.forward(points[s : s + chunk], with_intensity=False)
            out[s : s + chunk] = st.d
        return out

    def query_sdf_gradient(self, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
        if not self.net.use_normals:
            raise ValueError("model configured without SDF normals")
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty((len(points), 3), dtype=np.float64)
        for s in range(0, len(points), chunk):
            st = self.forward(points[s : s + chunk], with_intensity=False)
            out[s : s + chunk] = st.normals
        return out

    def query_intensity(self, points: np.ndarray, dirs: np.ndarray,
                        chunk: int = 65536) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        out = np.empty(len(points), dtype=np.float64)
        for s in range(0, len(points), chunk):
            st = self.forward(points[s : s + chunk], dirs[s : s + chunk])
            out[s : s + chunk] = st.intensity
        return out

    # -- granular single-point API -------------------------------------------------

    def sdf_forward(self, x: np.ndarray) -> SdfOutput:
        st = self.forward(np.asarray(x, dtype=np.float64).reshape(1, 3), with_intensity=False)
        return SdfOutput(
            d=float(st.d[0]),
            g=None if st.g is None else st.g[0].astype(np.float64),
            n=None if st.normals is None else st.normals[0],
        )

    def intensity_forward(self, x: np.ndarray, v: np.ndarray) -> IntensityOutput:
        st = self.forward(
            np.asarray(x, dtype=np.float64).reshape(1, 3),
            np.asarray(v, dtype=np.float64).reshape(1, 3),
        )
        return IntensityOutput(i=float(st.intensity[0]))

    # -- persistence -----------------------------------------------------------------

    def checkpoint_bytes(self) -> bytes:
        meta = {
            "fourier": {
                "num_frequencies": self.fourier.num_frequencies,
                "base_frequency": self.fourier.base_frequency,
                "include_input": self.fourier.include_input,
            },
            "sh": {"degree": self.sh.degree},
            "net": {
                "sdf_hidden": list(self.net.sdf_hidden),
                "intensity_hidden": list(self.net.intensity_hidden),
                "geo_feature_dim": self.net.geo_feature_dim,
                "use_geo_feature": self.net.use_geo_feature,
                "use_normals": self.net.use_normals,
                "use_sdf_inputs": self.net.use_sdf_inputs,
                "intensity_grads_to_sdf": self.net.intensity_grads_to_sdf,
                "dtype": self.net.dtype,
            },
            "intensity_range": None
            if self.intensity_range is None
            else [self.intensity_range.i_min, self.intensity_range.i_max],
            "seed": self.seed,
        }
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        parts = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(blob)), blob]
        arrays = []
        for mlp in (self.sdf_mlp, self.intensity_mlp):
            for w, b in zip(mlp.weights, mlp.biases):
                arrays.extend([w.value, b.value])
        parts.append(struct.pack("<I", len(arrays)))
        for a in arrays:
            parts.append(struct.pack("<B", a.ndim))
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
            parts.append(np.ascontiguousarray(a).astype(self.dtype.newbyteorder("<")).tobytes())
        return b"".join(parts)

    def save(self, checkpoint_path, map_path):
        with open(checkpoint_path, "wb") as f:
            f.write(self.checkpoint_bytes())
        with open(map_path, "wb") as f:
            f.write(self.grid.serialize())

    def map_size_bytes(self) -> int:
        """Stored parameter bytes: grid map plus network checkpoint."""
        return len(self.grid.serialize()) + len(self.checkpoint_bytes())

    @classmethod
    def load(cls, checkpoint_path, map_path) -> "RadarFieldModel":
        with open(map_path, "rb") as f:
            grid = TriPlaneGrid.deserialize(f.read())
        with open(checkpoint_path, "rb") as f:
            blob = f.read()
        if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
            raise CheckpointFormatError("not a model checkpoint (bad magic)")
        off = len(_CKPT_MAGIC)
        try:
            version, meta_len = struct.unpack_from("<II", blob, off)
            off += 8
            if version != _CKPT_VERSION:
                raise CheckpointFormatError(f"unsupported checkpoint version {version}")
            meta = json.loads(blob[off : off + meta_len].decode())
            off += meta_len
            net = NetworkConfig(
                sdf_hidden=tuple(meta["net"]["sdf_hidden"]),
                intensity_hidden=tuple(meta["net"]["intensity_hidden"]),
                geo_feature_dim=meta["net"]["geo_feature_dim"],
                use_geo_feature=meta["net"]["use_geo_feature"],
                use_normals=meta["net"]["use_normals"],
                use_sdf_inputs=meta["net"]["use_sdf_inputs"],
                intensity_grads_to_sdf=meta["net"]["intensity_grads_to_sdf"],
                dtype=meta["net"]["dtype"],
            )
            rng_range = meta["intensity_range"]
            model = cls(
                grid,
                fourier=FourierConfig(**meta["fourier"]),
                sh=SphericalHarmonicsConfig(**meta["sh"]),
                net=net,
                intensity_range=None if rng_range is None else IntensityRange(*rng_range),
                seed=meta["seed"],
            )
            (n_arrays,) = struct.unpack_from("<I", blob, off)
            off += 4
            arrays = []
            for _ in range(n_arrays):
                (ndim,) = struct.unpack_from("<B", blob, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}I", blob, off)
                off += 4 * ndim
                count = int(np.prod(shape))
                data = np.frombuffer(
                    blob, dtype=model.dtype.newbyteorder("<"), count=count, offset=off
                )
                off += model.dtype.itemsize * count
                arrays.append(data.astype(model.dtype).reshape(shape).copy())
        except (struct.error, KeyError, ValueError) as exc:
            raise CheckpointFormatError(f"corrupt checkpoint: {exc}") from exc
        it = iter(arrays)
        for mlp in (model.sdf_mlp, model.intensity_mlp):
            for w, b in zip(mlp.weights, mlp.biases):
                w.value[...] = next(it)
                b.value[...] = next(it)
        return model
