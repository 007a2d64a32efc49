"""Joint optimization of the distance and intensity networks.

Per batch: a sigmoid/binary-cross-entropy loss on signed distances (both
prediction and label squashed by sigmoid(d / sigmoid_scale)) plus a
weighted L1 loss on intensities.  Adam updates everything jointly until
``freeze_sdf_after`` iterations, after which the distance network and the
feature grid stop receiving updates.  No Eikonal or other regularization
terms are applied.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .model import RadarFieldModel
from .optim import Adam
from .sampling import SamplePool

log = logging.getLogger("radarmesh.training")

_P_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    iterations: int = 4000
    learning_rate: float = 1e-3
    freeze_sdf_after: int = 1000
    sigmoid_scale: float = 0.05
    intensity_weight: float = 1.0
    batch_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not self.iterations >= self.freeze_sdf_after >= 0:
            raise ValueError("need iterations >= freeze_sdf_after >= 0")
        if self.sigmoid_scale <= 0:
            raise ValueError("sigmoid_scale must be positive")
        if self.intensity_weight < 0:
            raise ValueError("intensity_weight must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainingReport:
    sdf_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    intensity_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    total_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    wall_time_s: float = 0.0
    map_size_bytes: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "sdf_loss", "intensity_loss"])
            for it, (s, i) in enumerate(zip(self.sdf_losses, self.intensity_losses)):
                writer.writerow([it, repr(float(s)), repr(float(i))])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def sdf_loss(d_pred, d_label, sigmoid_scale: float):
    """BCE between sigmoid-squashed prediction and label, elementwise."""
    if sigmoid_scale <= 0:
        raise ValueError("sigmoid_scale must be positive")
    p = np.clip(_sigmoid(np.asarray(d_pred) / sigmoid_scale), _P_CLAMP, 1.0 - _P_CLAMP)
    q = _sigmoid(np.asarray(d_label) / sigmoid_scale)
    out = -(q * np.log(p) + (1.0 - q) * np.log1p(-p))
    return out if out.ndim else float(out)


def sdf_loss_grad(d_pred, d_label, sigmoid_scale: float):
    """d loss / d prediction: (p - q) / sigmoid_scale, zero where p clamps."""
    p = _sigmoid(np.asarray(d_pred) / sigmoid_scale)
    q = _sigmoid(np.asarray(d_label) / sigmoid_scale)
    grad = np.where(
        (p > _P_CLAMP) & (p < 1.0 - _P_CLAMP), (p - q) / sigmoid_scale, 0.0
    )
    return grad if grad.ndim else float(grad)


def intensity_loss(i_pred, i_label):
    out = np.abs(np.asarray(i_pred, dtype=np.float64) - np.asarray(i_label, dtype=np.float64))
    return out if out.ndim else float(out)


def train(pool: SamplePool, model: RadarFieldModel, cfg: TrainerConfig,
          log_path=None) -> TrainingReport:
    """Run the optimization; deterministic under a fixed seed.

    Raises :class:`TrainingDiverged` on a non-finite loss, after restoring
    the most recent snapshot (taken every 25 iterations) so the model holds
    the last known-good parameters.
    """
    if len(pool) == 0:
        raise ValueError("empty sample pool")
    rng = np.random.default_rng(cfg.seed)
    model.grid.materialize(pool.positions)
    groups = {
        "sdf": self_paramsisdf(model),
        "intensity": model.intensity_mlp.parameters(),
    }
    adam = Adam(groups, lr=cfg.learning_rate)

    sdf_losses = np.zeros(cfg.iterations)
    int_losses = np.zeros(cfg.iterations)
    snapshot = _snapshot(model)
    start = time.perf_counter()
    n = len(pool)
    lam = cfg.intensity_weight
    for it in range(cfg.iterations):
        if it % 25 == 0:
            snapshot = _snapshot(model)
        idx = rng.integers(0, n, size=cfg.batch_size)
        x = pool.positions[idx]
        v = pool.view_dirs[idx]
        d_label = np.clip(pool.sdf_labels[idx], -pool.truncation, pool.truncation)
        i_label = pool.intensity_labels[idx]
        train_sdf = it < cfg.freeze_sdf_after

        try:
            st = model.forward(x, v)
        except FloatingPointError as exc:
            _restore(model, snapshot)
            raise TrainingDiverged(f"non-finite forward at iteration {it}") from exc

        sdf_l = float(np.mean(sdf_loss(st.d, d_label, cfg.sigmoid_scale)))
        int_l = float(np.mean(intensity_loss(st.intensity, i_label)))
        if not (np.isfinite(sdf_l) and np.isfinite(int_l)):
            _restore(model, snapshot)
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        sdf_losses[it] = sdf_l
        int_losses[it] = int_l

        b = cfg.batch_size
        d_sdf = sdf_loss_grad(st.d, d_label, cfg.sigmoid_scale) / b
        d_int = lam * np.sign(st.intensity - i_label) / b
        model.backward(st, d_int, d_sdf, train_sdf=train_sdf)
        adam.step(frozen=frozenset() if train_sdf else frozenset(("sdf",)))

    report = TrainingReport(
        sdf_losses=sdf_losses,
        intensity_losses=int_losses,
        total_losses=sdf_losses + lam * int_losses,
        wall_time_s=time.perf_counter() - start,
        map_size_bytes=model.map_size_bytes(),
    )
    if log_path is not None:
        report.write_csv(log_path)
    return report


def self_params isdf(model):
    pass


def _snapshot(model: RadarFieldModel) -> list[np.ndarray]:
    return [p.value.copy() for p in _all_params(model)]


def _restore(model: RadarFieldModel, snapshot: list[np.ndarray]):
    for p, saved in zip(_all_params(model), snapshot):
        if p.value.shape == saved.shape:
            p.value[...] = saved


def _all_params(model: RadarFieldModel):
    return (model.sdf_mlp.parameters() + model.intensity_mlp.parameters()
            + model.grid.parameters())
