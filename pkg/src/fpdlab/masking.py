"""Forward corruption, noise schedules, re-masking, and confidence selection."""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .rng import RngStream, resolve_rng

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone masking level gamma: [0,1] -> [0,1] with exact endpoints."""

    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule.kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")

    def gamma(self, t):
        t_arr = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            out = t_arr.copy() if t_arr.ndim else np.float64(t_arr)
        else:
            out = 1.0 - np.cos(0.5 * np.pi * t_arr)
        # pin the endpoints exactly; cos(pi/2) is only ~6e-17 in floats
        out = np.where(t_arr <= 0.0, 0.0, np.where(t_arr >= 1.0, 1.0, out))
        return float(out) if np.ndim(t) == 0 else out

    def gamma_inv(self, level: float, tol: float = 1e-9) -> float:
        """Invert gamma by bisection (monotone, so this is exact enough)."""
        r = float(level)
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"gamma_inv: level must lie in [0,1], got {r}")
        if r == 0.0:
            return 0.0
        if r == 1.0:
            return 1.0
        lo, hi = 0.0, 1.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.gamma(mid) < r:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


@dataclass
class MaskState:
    """Token array that may contain mask_id, plus the matching boolean mask."""

    tokens: np.ndarray
    mask: np.ndarray
    mask_id: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.shape != self.mask.shape:
            raise ValueError("MaskState: tokens and mask shapes differ")
        if not np.array_equal(self.mask, self.tokens == self.mask_id):
            raise ValueError("MaskState: mask does not match mask_id positions")

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, mask_id: int) -> "MaskState":
        tokens = np.asarray(tokens, dtype=np.int64)
        return cls(tokens=tokens, mask=tokens == mask_id, mask_id=mask_id)

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def is_complete(self) -> bool:
        return not self.mask.any()


def corrupt(tokens, t: float, schedule: NoiseSchedule, seed, mask_id: int) -> MaskState:
    """Independently mask each position with probability gamma(t)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"corrupt: t must lie in [0,1], got {t}")
    rng = resolve_rng(seed)
    tokens = np.asarray(tokens, dtype=np.int64)
    level = schedule.gamma(t)
    mask = rng.random(tokens.shape) < level
    out = tokens.copy()
    out[mask] = mask_id
    return MaskState(tokens=out, mask=mask, mask_id=mask_id)


def corrupt_batch(tokens: np.ndarray, t: np.ndarray, schedule: NoiseSchedule,
                  rng: RngStream, mask_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched corrupt with a per-row time; returns (tokens, mask)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    level = schedule.gamma(np.asarray(t, dtype=np.float64))[:, None]
    mask = rng.random(tokens.shape) < level
    out = tokens.copy()
    out[mask] = mask_id
    return out, mask


def exact_mask_count(ratio: float, length: int) -> int:
    return int(ceil(ratio * length - 1e-12))


def remask(tokens, ratio: float, seed, mask_id: int) -> MaskState:
    """Mask exactly ceil(ratio*L) uniformly chosen positions of a complete seq."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"remask: ratio must lie in (0,1), got {ratio}")
    rng = resolve_rng(seed)
    tokens = np.asarray(tokens, dtype=np.int64)
    if (tokens == mask_id).any():
        raise ValueError("remask: input sequence must be complete")
    length = tokens.shape[-1]
    count = exact_mask_count(ratio, length)
    out = tokens.copy()
    mask = np.zeros_like(tokens, dtype=bool)
    if tokens.ndim == 1:
        pos = rng.permutation(length)[:count]
        mask[pos] = True
    else:
        for row in range(tokens.shape[0]):
            pos = rng.permutation(length)[:count]
            mask[row, pos] = True
    out[mask] = mask_id
    return MaskState(tokens=out, mask=mask, mask_id=mask_id)


def remask_batch(tokens: np.ndarray, ratios: np.ndarray, rng: RngStream,
                 mask_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row exact-count masking at per-row ratios."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n, length = tokens.shape
    out = tokens.copy()
    mask = np.zeros_like(tokens, dtype=bool)
    for row in range(n):
        count = exact_mask_count(float(ratios[row]), length)
        pos = rng.permutation(length)[:count]
        mask[row, pos] = True
    out[mask] = mask_id
    return out, mask


def init_draft(r_init: float, length: int, vocab: int, seed, mask_id: int) -> MaskState:
    """Nearly fully masked start; unmasked slots get uniform random tokens."""
    if not 0.0 < r_init <= 1.0:
        raise ValueError(f"init_draft: r_init must lie in (0,1], got {r_init}")
    rng = resolve_rng(seed)
    count = exact_mask_count(r_init, length)
    tokens = rng.integers(0, vocab, size=length).astype(np.int64)
    pos = rng.permutation(length)[:count]
    mask = np.zeros(length, dtype=bool)
    mask[pos] = True
    tokens[mask] = mask_id
    return MaskState(tokens=tokens, mask=mask, mask_id=mask_id)


def init_draft_batch(r_init: float, n: int, length: int, vocab: int,
                     rng: RngStream, mask_id: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < r_init <= 1.0:
        raise ValueError(f"init_draft: r_init must lie in (0,1], got {r_init}")
    count = exact_mask_count(r_init, length)
    tokens = rng.integers(0, vocab, size=(n, length)).astype(np.int64)
    mask = np.zeros((n, length), dtype=bool)
    for row in range(n):
        pos = rng.permutation(length)[:count]
        mask[row, pos] = True
    tokens[mask] = mask_id
    return tokens, mask


def select_top_confidence(probs: np.ndarray, sampled: np.ndarray,
                          masked_positions: np.ndarray, keep: int) -> np.ndarray:
    """Pick the `keep` masked positions whose sampled token has highest prob.

    Ties break toward the lowest position index. Returns positions sorted
    ascending.
    """
    masked_positions = np.asarray(masked_positions, dtype=np.int64)
    if keep > masked_positions.size:
        raise ValueError(
            f"select_top_confidence: keep={keep} exceeds {masked_positions.size} masked positions"
        )
    if keep < 0:
        raise ValueError("select_top_confidence: keep must be nonnegative")
    if keep == 0:
        return np.empty(0, dtype=np.int64)
    conf = probs[masked_positions, sampled[masked_positions]]
    order = np.argsort(-conf, kind="stable")  # stable => ties to lower index
    chosen = masked_positions[order[:keep]]
    return np.sort(chosen)


def top_confidence_rows(conf: np.ndarray, mask: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Batched top-k by confidence among masked slots; returns a reveal mask.

    conf: (N, L) confidence scores; mask: (N, L) currently-masked flags;
    keep: (N,) per-row reveal counts. Unmasked slots never get revealed.
    """
    n, length = conf.shape
    scored = np.where(mask, conf, -np.inf)
    reveal = np.zeros_like(mask)
    keep = np.asarray(keep)
    if keep.size and (keep == keep.flat[0]).all():
        k = int(keep.flat[0])
        if k > 0:
            order = np.argsort(-scored, axis=1, kind="stable")
            reveal[np.arange(n)[:, None], order[:, :k]] = True
    else:
        for row in range(n):
            k = int(keep[row])
            if k <= 0:
                continue
            order = np.argsort(-scored[row], kind="stable")
            reveal[row, order[:k]] = True
    return reveal & mask
