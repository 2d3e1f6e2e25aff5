"""Lifted particle objective: Laplace-kernel affinities and the drift loss.

Per tap and spatial cell, each student feature vector feels an attractive
pull toward the teacher-target cloud and a repulsive push from a cyclic
shift of its own batch. The multi-bandwidth displacement is frozen
(stop-gradient) and regressed against, so the autodiff gradient w.r.t. the
student features has a closed form the tests pin exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DRIFT_SPACES = ("feature", "pixel")


@dataclass(frozen=True)
class DriftConfig:
    bandwidths: tuple[float, ...] = (0.02, 0.05, 0.2)
    eps_rms: float = 1e-8
    space: str = "feature"
    taps: tuple[int, ...] = (1, 2, 3, 4)
    spatial: bool = True

    def __post_init__(self):
        if not self.bandwidths:
            raise ValueError("drift.bandwidths must be nonempty")
        if any(h <= 0 for h in self.bandwidths):
            raise ValueError(f"drift.bandwidths must be positive, got {self.bandwidths}")
        if len(set(self.bandwidths)) != len(self.bandwidths):
            raise ValueError(f"drift.bandwidths must be distinct, got {self.bandwidths}")
        if self.space not in DRIFT_SPACES:
            raise ValueError(f"drift.space must be one of {DRIFT_SPACES}, got {self.space!r}")


def cyclic_shift(batch: int) -> np.ndarray:
    return (np.arange(batch) + 1) % batch


@dataclass
class DriftBatch:
    """Paired student/teacher features over batch x taps x cells x feat."""

    student: Tensor          # (B, T, S, F), lives on the tape
    targets: np.ndarray      # same shape, detached
    shift: np.ndarray = field(default=None)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.student.shape != self.targets.shape:
            raise ValueError(
                f"drift batch: student {self.student.shape} vs targets {self.targets.shape}"
            )
        if len(self.student.shape) != 4:
            raise ValueError("drift batch: features must be (B, taps, cells, F)")
        if self.shift is None:
            self.shift = cyclic_shift(self.student.shape[0])
        self.shift = np.asarray(self.shift, dtype=np.int64)

    @property
    def batch(self) -> int:
        return self.student.shape[0]


def affinities(anchors: np.ndarray, targets: np.ndarray, bandwidth: float) -> np.ndarray:
    """Doubly-normalized Laplace-kernel affinities, one (B, B) matrix.

    Row softmax of -dist/bandwidth, then column normalization, then a final
    row renormalization so rows sum to one.
    """
    if bandwidth <= 0:
        raise ValueError(f"affinities: bandwidth must be positive, got {bandwidth}")
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if anchors.shape[0] < 2:
        raise ValueError("affinities: need a batch of at least 2")
    diff = anchors[:, None, :] - targets[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    logits = -dist / bandwidth
    logits -= logits.max(axis=1, keepdims=True)
    mat = np.exp(logits)
    mat /= mat.sum(axis=1, keepdims=True)     # row softmax
    mat /= mat.sum(axis=0, keepdims=True)     # column normalization
    mat /= mat.sum(axis=1, keepdims=True)     # row renormalization
    return mat


def drift_vectors(student: np.ndarray, targets: np.ndarray, shift: np.ndarray,
                  bandwidth: float) -> np.ndarray:
    """Attractive-minus-repulsive displacement per (tap, cell); detached."""
    student = np.asarray(student, dtype=np.float64)
    if student.shape[0] < 2:
        raise ValueError("drift: batch must be >= 2 (negatives need a nontrivial shift)")
    batch, ntap, ncell, _ = student.shape
    shifted = student[shift]
    out = np.zeros_like(student)
    for tap in range(ntap):
        for cell in range(ncell):
            x = student[:, tap, cell, :]
            y = targets[:, tap, cell, :]
            xs = shifted[:, tap, cell, :]
            pos = affinities(x, y, bandwidth)
            neg = affinities(x, xs, bandwidth)
            attract = pos @ y - pos.sum(axis=1, keepdims=True) * x
            repel = neg @ xs - neg.sum(axis=1, keepdims=True) * x
            out[:, tap, cell, :] = attract - repel
    return out


def rms_normalizer(vectors: np.ndarray, floor: float) -> float:
    """RMS over (batch, tap, cell) of the per-term L2 norms, floored."""
    norms_sq = (vectors * vectors).sum(axis=-1)
    return max(float(np.sqrt(norms_sq.mean())), floor)


def drift_loss(batch: DriftBatch, cfg: DriftConfig) -> tuple[Tensor, dict]:
    """Multi-bandwidth stop-gradient regression onto the displaced targets.

    Only the anchor copy of the student features is live; the displaced
    target X + V and the per-bandwidth normalizer are constants, so
    d(loss)/dX = -2 * sum_h V_h / (Z_h * N) with N = B * taps * cells.
    """
    x_live = batch.student
    x_now = x_live.values
    n_terms = int(np.prod(x_now.shape[:3]))
    info = {"bandwidths": {}, "n_terms": n_terms}
    total = None
    for h in cfg.bandwidths:
        vec = drift_vectors(x_now, batch.targets, batch.shift, h)
        z = rms_normalizer(vec, cfg.eps_rms)
        displaced = Tensor(x_now + vec)  # stop-gradient target
        diff = ad.sub(x_live, displaced)
        per_term = ad.sum_(ad.square(diff), axis=-1)
        contrib = ad.mul(ad.mean_(per_term), 1.0 / z)
        total = contrib if total is None else ad.add(total, contrib)
        info["bandwidths"][h] = {"normalizer": z, "vectors": vec}
    return total, info


def analytic_student_grad(info: dict) -> np.ndarray:
    """Closed-form d(drift_loss)/d(student features) at the evaluation point."""
    n = info["n_terms"]
    grad = None
    for entry in info["bandwidths"].values():
        g = -2.0 * entry["vectors"] / (entry["normalizer"] * n)
        grad = g if grad is None else grad + g
    return grad
