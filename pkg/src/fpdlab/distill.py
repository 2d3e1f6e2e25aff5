"""One-step student distillation against re-mask-and-refine teacher targets.

The student drafts a full sequence from a nearly fully masked start; the
draft is partially re-masked and refined once by the frozen teacher; both
sides are decoded and lifted, and the drift loss pulls the student's feature
cloud onto the target cloud. Gradients cross the discrete sampling step via
a hard-forward / soft-backward straight-through embedding.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .drift import DriftBatch, DriftConfig, drift_loss
from .masking import NoiseSchedule, exact_mask_count, init_draft_batch, remask_batch
from .optim import RmsScaledSgd
from .rng import RngStream, categorical, child_seed, resolve_rng
from .teacher import ConfidenceRule, DenoiserNet, refine_batch
from .toyworld import World

ESTIMATORS = ("ste", "soft")
REFINEMENT_SOURCES = ("student", "random")


@dataclass(frozen=True)
class DistillConfig:
    r_init: float = 0.95
    r_lo: float = 0.3
    r_hi: float = 0.7
    lambda_gan: float = 0.0
    refinement_source: str = "student"
    estimator: str = "ste"
    refine_mode: str = "sample"
    batch: int = 8
    steps: int = 2000
    lr: float = 1e-4
    disc_lr: float = 1e-4
    disc_hidden: int = 32

    def __post_init__(self):
        if not 0.0 < self.r_init <= 1.0:
            raise ValueError(f"distill.r_init must lie in (0,1], got {self.r_init}")
        if not 0.0 < self.r_lo < self.r_hi < 1.0:
            raise ValueError(
                f"distill ratio window needs 0 < r_lo < r_hi < 1, got [{self.r_lo}, {self.r_hi}]"
            )
        if self.lambda_gan < 0.0:
            raise ValueError("distill.lambda_gan must be >= 0")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"distill.estimator must be one of {ESTIMATORS}")
        if self.refinement_source not in REFINEMENT_SOURCES:
            raise ValueError(f"distill.refinement_source must be one of {REFINEMENT_SOURCES}")
        if self.batch < 2:
            raise ValueError("distill.batch must be >= 2 (drift negatives need it)")


class Discriminator:
    """Small unconditional MLP from pixel vectors to a realness score."""

    def __init__(self, pixel_dim: int, hidden: int, rng: RngStream):
        self.params: dict[str, Tensor] = {
            "w1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(pixel_dim), (pixel_dim, hidden)),
                         requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1)),
                         requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }

    def forward(self, pixels: Tensor, train_disc: bool) -> Tensor:
        """(B, P) -> (B, 1) logits. With train_disc=False the parameters are
        frozen constants so generator gradients stop at the input."""
        P = self.params
        if train_disc:
            w1, b1, w2, b2 = P["w1"], P["b1"], P["w2"], P["b2"]
        else:
            w1, b1 = Tensor(P["w1"].values), Tensor(P["b1"].values)
            w2, b2 = Tensor(P["w2"].values), Tensor(P["b2"].values)
        h = ad.gelu(ad.add(ad.matmul(pixels, w1), b1))
        return ad.add(ad.matmul(h, w2), b2)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.values = np.array(arrays[name], dtype=np.float64)


def build_student(teacher: DenoiserNet) -> DenoiserNet:
    """Student = trainable copy of the trained teacher."""
    return teacher.clone(trainable=True)


def build_discriminator(world: World, cfg: DistillConfig, seed: int) -> Discriminator:
    rng = RngStream(child_seed(seed, "disc-init"))
    return Discriminator(world.params.pixel_dim, cfg.disc_hidden, rng)


# ---------------------------------------------------------------------------
# pipeline pieces


@dataclass
class Draft:
    logits: Tensor        # (B, L, K)
    probs: Tensor         # (B, L, K), on the tape
    tokens: np.ndarray    # (B, L) hard samples
    init_tokens: np.ndarray
    t_draft: float


def draft_time(schedule: NoiseSchedule, r_init: float, length: int) -> float:
    return schedule.gamma_inv(exact_mask_count(r_init, length) / length)


def student_draft(student: DenoiserNet, world: World, schedule: NoiseSchedule,
                  cfg: DistillConfig, classes: np.ndarray, rng: RngStream) -> Draft:
    """One-shot full-sequence draft from a masked initialization.

    Every position is re-predicted, including the randomly filled unmasked
    ones in the initialization.
    """
    classes = np.asarray(classes, dtype=np.int64)
    p = world.params
    init_tokens, _ = init_draft_batch(cfg.r_init, classes.shape[0], p.length, p.vocab,
                                      rng, p.mask_id)
    t_draft = draft_time(schedule, cfg.r_init, p.length)
    logits = student.forward(init_tokens, classes, t_draft)
    probs = ad.softmax(logits, axis=-1)
    tokens = categorical(rng, probs.values)
    return Draft(logits=logits, probs=probs, tokens=tokens,
                 init_tokens=init_tokens, t_draft=t_draft)


def ste_embed(tokens: np.ndarray, probs: Tensor, codebook_table: np.ndarray) -> Tensor:
    """Hard codebook rows forward; soft-mixture gradients backward.

    Forward values are bit-identical to table[tokens]; the backward pass
    routes through the probability-weighted mixture of codebook rows.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    table = np.asarray(codebook_table, dtype=np.float64)
    if (tokens < 0).any() or (tokens >= table.shape[0]).any():
        raise ValueError("ste_embed: sequence must be complete (no mask symbol)")
    soft = ad.matmul(probs, Tensor(table))
    hard = table[tokens]
    return ad.straight_through(soft, hard)


def soft_embed(probs: Tensor, codebook_table: np.ndarray) -> Tensor:
    """Probability-weighted codebook mixture (the off-manifold relaxation)."""
    return ad.matmul(probs, Tensor(np.asarray(codebook_table, dtype=np.float64)))


def make_target(draft_tokens: np.ndarray, classes: np.ndarray, teacher: DenoiserNet,
                world: World, schedule: NoiseSchedule, cfg: DistillConfig,
                rng: RngStream,
                confidence: ConfidenceRule = ConfidenceRule()) -> tuple[np.ndarray, np.ndarray]:
    """Re-mask the draft at r ~ U[r_lo, r_hi] and refine once with the teacher.

    refinement_source="random" swaps the draft for uniform random tokens
    before re-masking, so the kept context carries no information. Returns
    (target tokens, sampled ratios); the result is complete and detached.
    """
    p = world.params
    draft_tokens = np.asarray(draft_tokens, dtype=np.int64)
    batch = draft_tokens.shape[0]
    ratios = cfg.r_lo + (cfg.r_hi - cfg.r_lo) * rng.random(batch)
    if cfg.refinement_source == "random":
        canvas = rng.integers(0, p.vocab, size=draft_tokens.shape).astype(np.int64)
    else:
        canvas = draft_tokens
    masked, mask = remask_batch(canvas, ratios, rng, p.mask_id)
    t_eff = np.array([schedule.gamma_inv(float(r)) for r in ratios])
    keep = mask.sum(axis=1)
    refined, left = refine_batch(teacher, masked, mask, classes, t_eff, keep, rng,
                                 decode_mode=cfg.refine_mode, confidence=confidence)
    assert not left.any()
    return refined, ratios


def gan_losses(fake_pixels: Tensor, real_pixels: np.ndarray,
               disc: Discriminator) -> tuple[Tensor, Tensor]:
    """Non-saturating losses; fake gradients flow to the student, the
    discriminator trains only on detached fakes and real pixels."""
    real = np.asarray(real_pixels, dtype=np.float64)
    if fake_pixels.shape[0] == 0 or real.shape[0] == 0:
        raise ValueError("gan_losses: batches must be nonempty")
    gen_scores = disc.forward(fake_pixels, train_disc=False)
    gen_loss = ad.mean_(ad.softplus(ad.mul(gen_scores, -1.0)))
    real_scores = disc.forward(Tensor(real), train_disc=True)
    fake_scores = disc.forward(Tensor(fake_pixels.values.copy()), train_disc=True)
    disc_loss = ad.add(ad.mean_(ad.softplus(ad.mul(real_scores, -1.0))),
                       ad.mean_(ad.softplus(fake_scores)))
    return gen_loss, disc_loss


def lift_features(world: World, pixels: Tensor, drift_cfg: DriftConfig) -> Tensor:
    """Feature-space lift, or the decoder output as a 1-tap 1-cell feature."""
    if drift_cfg.space == "pixel":
        return ad.reshape(pixels, (pixels.shape[0], 1, 1, pixels.shape[1]))
    return world.lift(pixels, drift_cfg.taps, drift_cfg.spatial)


# ---------------------------------------------------------------------------
# the training step


def distill_step(world: World, schedule: NoiseSchedule, teacher: DenoiserNet,
                 student: DenoiserNet, disc: Discriminator | None,
                 cfg: DistillConfig, drift_cfg: DriftConfig, classes: np.ndarray,
                 rng: RngStream, student_opt: RmsScaledSgd,
                 disc_opt: RmsScaledSgd | None,
                 confidence: ConfidenceRule = ConfidenceRule()) -> dict:
    """Draft -> embed -> decode -> lift, target-side ditto, drift (+GAN), update."""
    t0 = _time.perf_counter()
    classes = np.asarray(classes, dtype=np.int64)

    draft = student_draft(student, world, schedule, cfg, classes, rng)
    if cfg.estimator == "ste":
        emb = ste_embed(draft.tokens, draft.probs, world.codebook.table)
    else:
        emb = soft_embed(draft.probs, world.codebook.table)
    fake_pixels = world.decode_embeddings(emb, classes)
    student_feats = lift_features(world, fake_pixels, drift_cfg)

    target_tokens, _ = make_target(draft.tokens, classes, teacher, world, schedule,
                                   cfg, rng, confidence)
    target_pixels = world.decode_tokens(target_tokens, classes)
    target_feats = lift_features(world, target_pixels, drift_cfg).values

    batch = DriftBatch(student=student_feats, targets=target_feats)
    loss, _info = drift_loss(batch, drift_cfg)
    fp_residual = float(np.sqrt(((student_feats.values - target_feats) ** 2).sum(-1)).mean())

    metrics = {
        "drift_loss": loss.item(),
        "gan_gen": None,
        "gan_disc": None,
        "fp_residual": fp_residual,
    }

    if cfg.lambda_gan > 0.0:
        if disc is None or disc_opt is None:
            raise ValueError("lambda_gan > 0 requires a discriminator")
        real_classes = rng.integers(0, world.params.classes, size=classes.shape[0]).astype(np.int64)
        real_tokens = world.dataset.sample_batch(real_classes, rng)
        real_pixels = world.decode_tokens(real_tokens, real_classes).values
        gen_loss, disc_loss = gan_losses(fake_pixels, real_pixels, disc)
        metrics["gan_gen"] = gen_loss.item()
        metrics["gan_disc"] = disc_loss.item()
        loss = ad.add(loss, ad.mul(gen_loss, cfg.lambda_gan))

        disc_opt.zero_grad()
        ad.backward(disc_loss)
        disc_opt.step()

    metrics["total_loss"] = loss.item()
    student_opt.zero_grad()
    ad.backward(loss)
    student_opt.step()

    metrics["wall_ms"] = (_time.perf_counter() - t0) * 1e3
    return metrics


def student_sample(student: DenoiserNet, world: World, schedule: NoiseSchedule,
                   cfg: DistillConfig, cls: int, seed) -> np.ndarray:
    """Single-forward-pass generation; shares the draft code path with
    training so the operating points coincide."""
    rng = resolve_rng(seed)
    draft = student_draft(student, world, schedule, cfg, np.array([cls]), rng)
    return draft.tokens[0]


def student_sample_batch(student: DenoiserNet, world: World, schedule: NoiseSchedule,
                         cfg: DistillConfig, classes: np.ndarray,
                         rng: RngStream) -> np.ndarray:
    draft = student_draft(student, world, schedule, cfg, classes, rng)
    return draft.tokens
