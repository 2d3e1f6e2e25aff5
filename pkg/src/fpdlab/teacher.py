"""Multi-step masked-diffusion teacher: denoiser net, training, sampling.

The denoiser is a position-mixing residual MLP (no attention needed at this
scale): shared token embeddings from the frozen codebook plus a learned
mask-symbol row, class and time conditioning, two residual blocks, and an
L x K logit head. The same class instantiates the one-step student.
"""

from __future__ import annotations

import hashlib
import time as _time
from dataclasses import dataclass
from math import ceil

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import MaskState, NoiseSchedule, corrupt_batch, top_confidence_rows
from .optim import RmsScaledSgd
from .rng import RngStream, categorical, child_seed, resolve_rng
from .toyworld import World

TIME_FREQS = 8
CONFIDENCE_RULES = ("prob", "gumbel", "random")


def time_features(times: np.ndarray) -> np.ndarray:
    """Fixed sinusoidal features of a continuous time in [0,1]."""
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))[:, None]
    k = np.arange(1, TIME_FREQS + 1, dtype=np.float64)[None, :]
    return np.concatenate([np.sin(np.pi * k * t), np.cos(np.pi * k * t)], axis=1)


class DenoiserNet:
    """Map (corrupted tokens, class, time) to per-position vocab logits."""

    def __init__(self, codebook_table: np.ndarray, length: int, classes: int,
                 width: int, mlp_mult: int, rng: RngStream):
        self.codebook = np.asarray(codebook_table, dtype=np.float64)
        self.vocab, self.embed_dim = self.codebook.shape
        self.length = length
        self.classes = classes
        self.width = width
        self.mlp_mult = mlp_mult
        self.eval_count = 0

        d, m, L = self.embed_dim, width, length
        hm = mlp_mult * m

        def p(shape, scale):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "mask_emb": p((1, d), 1.0),
            "in_w": p((d, m), 1.0 / np.sqrt(d)),
            "in_b": Tensor(np.zeros(m), requires_grad=True),
            "cls_emb": p((classes, m), 0.1),
            "time_w": p((2 * TIME_FREQS, m), 0.1 / np.sqrt(2 * TIME_FREQS)),
            "time_b": Tensor(np.zeros(m), requires_grad=True),
        }
        for blk in (1, 2):
            self.params[f"mix_w{blk}"] = p((L, L), 1.0 / np.sqrt(L))
            self.params[f"mix_b{blk}"] = Tensor(np.zeros((L, 1)), requires_grad=True)
            self.params[f"mlp_w1_{blk}"] = p((m, hm), 1.0 / np.sqrt(m))
            self.params[f"mlp_b1_{blk}"] = Tensor(np.zeros(hm), requires_grad=True)
            self.params[f"mlp_w2_{blk}"] = p((hm, m), 1.0 / np.sqrt(hm))
            self.params[f"mlp_b2_{blk}"] = Tensor(np.zeros(m), requires_grad=True)
        # zero head => exactly uniform predictions before training
        self.params["head_w"] = Tensor(np.zeros((m, self.vocab)), requires_grad=True)
        self.params["head_b"] = Tensor(np.zeros(self.vocab), requires_grad=True)

    @property
    def mask_id(self) -> int:
        return self.vocab

    def forward(self, tokens: np.ndarray, classes: np.ndarray, times) -> Tensor:
        """tokens (B,L) ints possibly containing mask_id -> logits (B,L,K)."""
        self.eval_count += 1
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        batch = tokens.shape[0]
        if tokens.shape[1] != self.length:
            raise ValueError(f"denoiser: expected length {self.length}, got {tokens.shape[1]}")
        classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (batch,))
        times = np.broadcast_to(np.asarray(times, dtype=np.float64), (batch,))
        P = self.params

        table = ad.concat([Tensor(self.codebook), P["mask_emb"]], axis=0)
        x = ad.gather_rows(table, tokens)
        x = ad.add(ad.matmul(x, P["in_w"]), P["in_b"])
        cls = ad.reshape(ad.gather_rows(P["cls_emb"], classes), (batch, 1, self.width))
        x = ad.add(x, cls)
        tf = ad.add(ad.matmul(Tensor(time_features(times)), P["time_w"]), P["time_b"])
        x = ad.add(x, ad.reshape(tf, (batch, 1, self.width)))

        for blk in (1, 2):
            h = ad.layer_norm(x)
            h = ad.add(ad.matmul(P[f"mix_w{blk}"], h), P[f"mix_b{blk}"])
            x = ad.add(x, h)
            h = ad.layer_norm(x)
            h = ad.gelu(ad.add(ad.matmul(h, P[f"mlp_w1_{blk}"]), P[f"mlp_b1_{blk}"]))
            h = ad.add(ad.matmul(h, P[f"mlp_w2_{blk}"]), P[f"mlp_b2_{blk}"])
            x = ad.add(x, h)

        h = ad.layer_norm(x)
        return ad.add(ad.matmul(h, P["head_w"]), P["head_b"])

    # -- parameter plumbing --------------------------------------------------

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def clone(self, trainable: bool) -> "DenoiserNet":
        twin = DenoiserNet.__new__(DenoiserNet)
        twin.codebook = self.codebook
        twin.vocab = self.vocab
        twin.embed_dim = self.embed_dim
        twin.length = self.length
        twin.classes = self.classes
        twin.width = self.width
        twin.mlp_mult = self.mlp_mult
        twin.eval_count = 0
        twin.params = {
            name: Tensor(p.values.copy(), requires_grad=trainable)
            for name, p in self.params.items()
        }
        return twin

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.values = np.array(arrays[name], dtype=np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].values).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# training objective


def teacher_loss(net: DenoiserNet, tokens: np.ndarray, classes: np.ndarray,
                 schedule: NoiseSchedule, rng: RngStream, t_sampler=None) -> Tensor:
    """Masked cross-entropy: mean over the batch of -sum_masked log p(z_i)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("teacher_loss: need a nonempty (B, L) token batch")
    if (tokens == net.mask_id).any():
        raise ValueError("teacher_loss: training sequences must be complete")
    batch = tokens.shape[0]
    times = t_sampler(rng, batch) if t_sampler is not None else rng.random(batch)
    corrupted, mask = corrupt_batch(tokens, times, schedule, rng, net.mask_id)

    logits = net.forward(corrupted, classes, times)
    logp = ad.log(ad.softmax(logits, axis=-1), eps=1e-12)
    onehot = np.zeros(logits.shape)
    b_ix, l_ix = np.indices(tokens.shape)
    onehot[b_ix, l_ix, tokens] = 1.0
    picked = ad.sum_(ad.mul(logp, Tensor(onehot)), axis=-1)
    total = ad.sum_(ad.mul(picked, Tensor(mask.astype(np.float64))))
    return ad.mul(total, -1.0 / batch)


@dataclass
class TeacherTrainConfig:
    steps: int = 5000
    batch: int = 64
    lr: float = 3e-3
    width: int = 64
    mlp_mult: int = 3


def build_denoiser(world: World, width: int, mlp_mult: int, seed: int) -> DenoiserNet:
    rng = RngStream(child_seed(seed, "denoiser-init"))
    return DenoiserNet(world.codebook.table, world.params.length, world.params.classes,
                       width, mlp_mult, rng)


def train_teacher(world: World, schedule: NoiseSchedule, cfg: TeacherTrainConfig,
                  seed: int) -> tuple[DenoiserNet, list[tuple[int, float, float]]]:
    """Pretrain a denoiser on the synthetic dataset; returns (net, history)."""
    net = build_denoiser(world, cfg.width, cfg.mlp_mult, seed)
    rng = RngStream(child_seed(seed, "teacher-train"))
    opt = RmsScaledSgd(net.params, lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        t0 = _time.perf_counter()
        classes = rng.integers(0, world.params.classes, size=cfg.batch).astype(np.int64)
        tokens = world.dataset.sample_batch(classes, rng)
        loss = teacher_loss(net, tokens, classes, schedule, rng)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        history.append((step, loss.item(), (_time.perf_counter() - t0) * 1e3))
    net.set_trainable(False)
    return net, history


# ---------------------------------------------------------------------------
# iterative refinement / sampling


@dataclass(frozen=True)
class ConfidenceRule:
    """How the sampler scores sampled tokens when picking what to reveal."""

    kind: str = "prob"
    gumbel_temp: float = 1.0

    def __post_init__(self):
        if self.kind not in CONFIDENCE_RULES:
            raise ValueError(f"confidence rule must be one of {CONFIDENCE_RULES}")


def refine_batch(net: DenoiserNet, tokens: np.ndarray, mask: np.ndarray,
                 classes: np.ndarray, t_eff, keep: np.ndarray, rng: RngStream,
                 decode_mode: str = "sample",
                 confidence: ConfidenceRule = ConfidenceRule()) -> tuple[np.ndarray, np.ndarray]:
    """One denoising pass: sample masked slots, reveal top-`keep` per row.

    tokens/mask: (N, L); keep: (N,) reveal budgets. Never touches revealed
    tokens. Returns updated (tokens, mask).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    keep = np.broadcast_to(np.asarray(keep, dtype=np.int64), (tokens.shape[0],))
    if (keep > mask.sum(axis=1)).any():
        raise ValueError("refine: keep budget exceeds masked count")
    if not mask.any():
        return tokens.copy(), mask.copy()

    logits = net.forward(tokens, classes, t_eff)
    probs = ad.softmax(logits, axis=-1).values
    if decode_mode == "argmax":
        sampled = probs.argmax(axis=-1)
    elif decode_mode == "sample":
        sampled = categorical(rng, probs)
    else:
        raise ValueError(f"decode_mode must be 'sample' or 'argmax', got {decode_mode!r}")

    flat_conf = np.take_along_axis(probs, sampled[..., None], axis=-1)[..., 0]
    if decode_mode == "argmax" or confidence.kind == "prob":
        conf = flat_conf
    elif confidence.kind == "gumbel":
        conf = np.log(flat_conf + 1e-300) + confidence.gumbel_temp * rng.gumbel(flat_conf.shape)
    else:  # random: value-independent selection order
        conf = rng.random(flat_conf.shape)

    reveal = top_confidence_rows(conf, mask, keep)
    out = np.where(reveal, sampled, tokens)
    return out.astype(np.int64), mask & ~reveal


def refine_step(net: DenoiserNet, state: MaskState, cls: int, t_eff: float,
                keep: int, seed, decode_mode: str = "sample",
                confidence: ConfidenceRule = ConfidenceRule()) -> MaskState:
    """Single-sequence teacher refinement at an effective time t_eff."""
    if keep > int(state.mask.sum()):
        raise ValueError(f"refine_step: keep={keep} exceeds {int(state.mask.sum())} masked")
    if not state.mask.any():
        return MaskState(state.tokens.copy(), state.mask.copy(), state.mask_id)
    rng = resolve_rng(seed)
    toks, mask = refine_batch(net, state.tokens[None], state.mask[None],
                              np.array([cls]), t_eff, np.array([keep]), rng,
                              decode_mode, confidence)
    return MaskState(toks[0], mask[0], state.mask_id)


@dataclass(frozen=True)
class SamplerPlan:
    """Step count, schedule, and the induced per-step unmask budgets."""

    steps: int
    schedule: NoiseSchedule
    length: int
    masked_after: tuple[int, ...]
    budgets: tuple[int, ...]
    t_eff: tuple[float, ...]

    @classmethod
    def build(cls, steps: int, schedule: NoiseSchedule, length: int) -> "SamplerPlan":
        if steps < 1:
            raise ValueError("sampler plan needs at least one step")
        masked = [length]
        for k in range(1, steps + 1):
            level = schedule.gamma(1.0 - k / steps)
            masked.append(min(masked[-1], int(ceil(level * length - 1e-12))))
        masked[-1] = 0  # gamma(0) = 0
        budgets = tuple(masked[k - 1] - masked[k] for k in range(1, steps + 1))
        teff = tuple(schedule.gamma_inv(masked[k - 1] / length) for k in range(1, steps + 1))
        return cls(steps=steps, schedule=schedule, length=length,
                   masked_after=tuple(masked), budgets=budgets, t_eff=teff)


def sample_iterative_batch(net: DenoiserNet, classes: np.ndarray, plan: SamplerPlan,
                           rng: RngStream, decode_mode: str = "sample",
                           confidence: ConfidenceRule = ConfidenceRule()) -> np.ndarray:
    """Run the plan from fully masked; zero-budget steps are skipped."""
    classes = np.asarray(classes, dtype=np.int64)
    n = classes.shape[0]
    tokens = np.full((n, plan.length), net.mask_id, dtype=np.int64)
    mask = np.ones_like(tokens, dtype=bool)
    for k in range(plan.steps):
        budget = plan.budgets[k]
        if budget == 0:
            continue
        keep = np.full(n, budget, dtype=np.int64)
        tokens, mask = refine_batch(net, tokens, mask, classes, plan.t_eff[k], keep,
                                    rng, decode_mode, confidence)
    return tokens


def sample_iterative(net: DenoiserNet, cls: int, plan: SamplerPlan, seed,
                     decode_mode: str = "sample",
                     confidence: ConfidenceRule = ConfidenceRule()) -> np.ndarray:
    rng = resolve_rng(seed)
    return sample_iterative_batch(net, np.array([cls]), plan, rng, decode_mode, confidence)[0]
