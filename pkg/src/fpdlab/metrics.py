"""Evaluation: exact TV oracle, Fréchet feature proxy, fixed-point residual."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distill import DistillConfig, make_target, student_draft
from .drift import DriftConfig
from .masking import NoiseSchedule
from .rng import RngStream, child_seed, resolve_rng
from .teacher import DenoiserNet
from .toyworld import World, sequence_index

ENUMERATION_LIMIT = 100_000


def tv_exact(sampler, cls: int, n: int, seed, world: World) -> float:
    """Half L1 distance between the sampler's empirical distribution and the
    exact data distribution, over every sequence in the token space.

    `sampler(cls, n, rng) -> (n, L) int array`. Requires K**L within the
    enumeration limit.
    """
    p = world.params
    if p.vocab**p.length > ENUMERATION_LIMIT:
        raise ValueError(
            f"tv_exact: token space {p.vocab}**{p.length} exceeds {ENUMERATION_LIMIT}; "
            "use frechet_proxy instead"
        )
    rng = resolve_rng(seed)
    tokens = np.asarray(sampler(cls, n, rng), dtype=np.int64)
    if tokens.shape != (n, p.length):
        raise ValueError(f"tv_exact: sampler returned shape {tokens.shape}, wanted ({n}, {p.length})")
    exact = world.dataset.exact_prob_table(cls)
    counts = np.bincount(sequence_index(tokens, p.vocab), minlength=exact.size)
    return 0.5 * float(np.abs(counts / n - exact).sum())


def tv_from_probs(probs: np.ndarray, cls: int, world: World) -> float:
    """TV between an explicit distribution over all sequences and the data."""
    exact = world.dataset.exact_prob_table(cls)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != exact.shape:
        raise ValueError(f"tv_from_probs: got {probs.shape}, wanted {exact.shape}")
    return 0.5 * float(np.abs(probs - exact).sum())


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_proxy(fake_features: np.ndarray, real_features: np.ndarray,
                  return_flag: bool = False):
    """Fréchet distance between Gaussian fits of two feature clouds.

    Symmetric PSD square root via eigendecomposition with negative eigenvalues
    clipped at zero. Near-singular covariances get a 1e-6 diagonal
    regularization; pass return_flag=True to also receive that flag.
    """
    fake = np.asarray(fake_features, dtype=np.float64)
    real = np.asarray(real_features, dtype=np.float64)
    if fake.ndim != 2 or real.ndim != 2 or fake.shape[1] != real.shape[1]:
        raise ValueError("frechet_proxy: inputs must be (n, F) with matching F")
    dim = fake.shape[1]
    if fake.shape[0] < dim + 1 or real.shape[0] < dim + 1:
        raise ValueError(f"frechet_proxy: need at least F+1 = {dim + 1} samples per side")

    mu_f, mu_r = fake.mean(0), real.mean(0)
    cov_f = np.cov(fake, rowvar=False, ddof=1)
    cov_r = np.cov(real, rowvar=False, ddof=1)

    regularized = False
    tol = 1e-10
    if min(np.linalg.eigvalsh(cov_f).min(), np.linalg.eigvalsh(cov_r).min()) < tol:
        cov_f = cov_f + 1e-6 * np.eye(dim)
        cov_r = cov_r + 1e-6 * np.eye(dim)
        regularized = True

    root_r = _psd_sqrt(cov_r)
    cross = _psd_sqrt(root_r @ cov_f @ root_r)
    mean_term = float(((mu_f - mu_r) ** 2).sum())
    value = mean_term + float(np.trace(cov_f) + np.trace(cov_r) - 2.0 * np.trace(cross))
    value = max(value, 0.0)
    return (value, regularized) if return_flag else value


def fixed_point_residual(student: DenoiserNet, teacher: DenoiserNet, world: World,
                         schedule: NoiseSchedule, cfg: DistillConfig,
                         drift_cfg: DriftConfig, n: int, seed,
                         target_fn=None) -> float:
    """Mean lifted-feature distance between drafts and their refined targets.

    target_fn(draft_tokens, classes, rng) -> tokens can replace the standard
    re-mask-and-refine construction (the identity map gives residual 0).
    """
    from .distill import lift_features  # local import to avoid cycle at module load

    rng = resolve_rng(seed)
    classes = rng.integers(0, world.params.classes, size=n).astype(np.int64)
    draft = student_draft(student, world, schedule, cfg, classes, rng)
    if target_fn is None:
        targets, _ = make_target(draft.tokens, classes, teacher, world, schedule, cfg, rng)
    else:
        targets = target_fn(draft.tokens, classes, rng)
    x = lift_features(world, world.decode_tokens(draft.tokens, classes), drift_cfg).values
    y = lift_features(world, world.decode_tokens(targets, classes), drift_cfg).values
    return float(np.sqrt(((x - y) ** 2).sum(-1)).mean())


@dataclass
class EvalReport:
    tv_by_condition: dict[int, float] = field(default_factory=dict)
    frechet: float = 0.0
    frechet_regularized: bool = False
    fp_residual: float = 0.0
    sample_count: int = 0
    seed: int = 0
    config_fingerprint: str = ""

    def validate(self) -> None:
        for cls, tv in self.tv_by_condition.items():
            if not 0.0 <= tv <= 1.0:
                raise ValueError(f"tv for class {cls} outside [0,1]: {tv}")
        if self.frechet < 0.0:
            raise ValueError(f"frechet must be >= 0, got {self.frechet}")

    def to_text(self) -> str:
        self.validate()
        lines = {
            "config_fingerprint": self.config_fingerprint,
            "fp_residual": repr(self.fp_residual),
            "frechet": repr(self.frechet),
            "frechet_regularized": "1" if self.frechet_regularized else "0",
            "sample_count": str(self.sample_count),
            "seed": str(self.seed),
        }
        for cls in sorted(self.tv_by_condition):
            lines[f"tv.class{cls}"] = repr(self.tv_by_condition[cls])
        return "".join(f"{k}={lines[k]}\n" for k in sorted(lines))

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            kv[key] = value
        report = cls(
            frechet=float(kv["frechet"]),
            frechet_regularized=kv["frechet_regularized"] == "1",
            fp_residual=float(kv["fp_residual"]),
            sample_count=int(kv["sample_count"]),
            seed=int(kv["seed"]),
            config_fingerprint=kv["config_fingerprint"],
        )
        for key, value in kv.items():
            if key.startswith("tv.class"):
                report.tv_by_condition[int(key[len("tv.class"):])] = float(value)
        return report


def mean_tv(sampler, world: World, n: int, seed: int) -> tuple[float, dict[int, float]]:
    """tv_exact averaged over all classes (each with its own substream)."""
    per_class = {}
    for cls in range(world.params.classes):
        rng = RngStream(child_seed(seed, f"tv-class{cls}"))
        per_class[cls] = tv_exact(sampler, cls, n, rng, world)
    return float(np.mean(list(per_class.values()))), per_class
