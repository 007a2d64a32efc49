"""Deterministic input encodings.

Fourier positional encoding of (normalized) positions and a real spherical
harmonics basis for viewing directions.  Both are pure functions; batched
variants operate on ``(N, 3)`` arrays and are what the model uses internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FourierConfig:
    """sin/cos encoding at frequencies base * 2^j, j = 0..num_frequencies-1."""

    num_frequencies: int = 6
    base_frequency: float = 1.0
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")
        if self.base_frequency <= 0:
            raise ValueError("base_frequency must be positive")

    @property
    def output_dim(self) -> int:
        return 6 * self.num_frequencies + (3 if self.include_input else 0)


def fourier_encode(x: np.ndarray, cfg: FourierConfig) -> np.ndarray:
    """Encode positions in the normalized scene cube [-1, 1]^3.

    Layout: optional raw (x, y, z), then per frequency j a block
    [sin(w_j x), sin(w_j y), sin(w_j z), cos(w_j x), cos(w_j y), cos(w_j z)]
    with w_j = 2^j * pi * base_frequency.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    omegas = _omegas(cfg)
    phases = x[:, None, :] * omegas[None, :, None]  # (N, L, 3)
    blocks = np.concatenate([np.sin(phases), np.cos(phases)], axis=2)  # (N, L, 6)
    out = blocks.reshape(len(x), -1)
    if cfg.include_input:
        out = np.concatenate([x, out], axis=1)
    return out


def fourier_jacobian(x: np.ndarray, cfg: FourierConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise derivative of every encoding entry w.r.t. its source axis.

    Each output entry depends on exactly one input coordinate; returns
    (values (N, D), axis (D,)) where ``axis[p]`` names that coordinate,
    so the full Jacobian never has to be materialized.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    omegas = _omegas(cfg)
    phases = x[:, None, :] * omegas[None, :, None]
    dsin = np.cos(phases) * omegas[None, :, None]
    dcos = -np.sin(phases) * omegas[None, :, None]
    vals = np.concatenate([dsin, dcos], axis=2).reshape(len(x), -1)
    axes = np.tile(np.concatenate([np.arange(3), np.arange(3)]), cfg.num_frequencies)
    if cfg.include_input:
        vals = np.concatenate([np.ones((len(x), 3)), vals], axis=1)
        axes = np.concatenate([np.arange(3), axes])
    return vals, axes.astype(np.int64)


def _omegas(cfg: FourierConfig) -> np.ndarray:
    return np.pi * cfg.base_frequency * 2.0 ** np.arange(cfg.num_frequencies)


@dataclass(frozen=True)
class SphericalHarmonicsConfig:
    """Real spherical harmonics bands 0..degree-1; output dim = degree^2."""

    degree: int = 4

    def __post_init__(self):
        if not 1 <= self.degree <= 4:
            raise ValueError("degree must be in 1..4")

    @property
    def output_dim(self) -> int:
        return self.degree**2


# Real SH basis in Cartesian polynomial form, geodesy normalization, no
# Condon-Shortley phase: band 1 is c1 * (y, z, x).
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = np.array([1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
                1.0925484305920792, 0.5462742152960396])
_C3 = np.array([0.5900435899266435, 2.890611442640554, 0.4570457994644658,
                0.3731763325901154, 0.4570457994644658, 1.445305721320277,
                0.5900435899266435])


def sh_encode(v: np.ndarray, cfg: SphericalHarmonicsConfig) -> np.ndarray:
    """Evaluate the real SH basis on unit directions.

    Directions within 1e-3 of unit norm are renormalized; anything further
    off is rejected.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    norms = np.linalg.norm(v, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3) or np.any(~np.isfinite(norms)):
        bad = np.nonzero(np.abs(norms - 1.0) > 1e-3)[0]
        raise ValueError(f"non-unit viewing directions at indices {bad[:10].tolist()}")
    v = v / norms[:, None]
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    cols = [np.full(len(v), _C0)]
    if cfg.degree >= 2:
        cols += [_C1 * y, _C1 * z, _C1 * x]
    if cfg.degree >= 3:
        cols += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (3.0 * z * z - 1.0),
            _C2[3] * x * z,
            _C2[4] * (x * x - y * y),
        ]
    if cfg.degree >= 4:
        cols += [
            _C3[0] * y * (3.0 * x * x - y * y),
            _C3[1] * x * y * z,
            _C3[2] * y * (5.0 * z * z - 1.0),
            _C3[3] * z * (5.0 * z * z - 3.0),
            _C3[4] * x * (5.0 * z * z - 1.0),
            _C3[5] * z * (x * x - y * y),
            _C3[6] * x * (x * x - 3.0 * y * y),
        ]
    return np.stack(cols, axis=1)
