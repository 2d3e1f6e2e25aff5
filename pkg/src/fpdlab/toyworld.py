"""Frozen stand-ins for the tokenizer world plus a synthetic token dataset.

Everything here is fixed at construction from a seeded generator: the codebook,
a small nonlinear decoder from token embeddings to a P-dim "pixel" vector, and
a 4-block feature backbone with per-block taps. The dataset is a per-class
template corrupted independently per position, so every sequence probability
has a closed form and the whole distribution can be enumerated at small K^L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream, child_seed, resolve_rng

NUM_TAPS = 4


class InjectivityError(RuntimeError):
    """Two distinct token sequences decoded to (nearly) the same pixel vector."""


@dataclass
class WorldParams:
    vocab: int = 16          # K
    length: int = 16         # L
    embed_dim: int = 8       # d
    pixel_dim: int = 32      # P
    feat_dim: int = 24       # F per tap
    grid: int = 2            # G (G*G spatial cells per tap)
    classes: int = 4         # C
    rho: float = 0.1         # template corruption rate

    def __post_init__(self):
        for name in ("vocab", "length", "embed_dim", "pixel_dim", "feat_dim", "grid", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"world.{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"world.rho must lie in [0,1], got {self.rho}")

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def cells(self) -> int:
        return self.grid * self.grid

    @property
    def tap_width(self) -> int:
        return self.cells * self.feat_dim


class Codebook:
    """Frozen K x d embedding table; rows pairwise distinct."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)
        self.vocab, self.embed_dim = self.table.shape
        diff = self.table[:, None, :] - self.table[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 1e-9:
            raise ValueError("codebook rows must be pairwise distinct")

    @property
    def mask_id(self) -> int:
        return self.vocab

    def lookup(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if (tokens < 0).any() or (tokens >= self.vocab).any():
            raise ValueError("codebook lookup: token id out of range (mask tokens not allowed)")
        return self.table[tokens]


class FrozenDecoder:
    """Fixed 2-layer map from L x d token embeddings (+class shift) to pixels."""

    def __init__(self, params: WorldParams, rng: RngStream):
        p = params
        flat = p.length * p.embed_dim
        hidden = 2 * p.pixel_dim
        self.params = p
        self.cls_shift = rng.normal(0.0, 1.0, (p.classes, flat))
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(flat), (flat, hidden))
        self.b1 = rng.normal(0.0, 0.1, (hidden,))
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, p.pixel_dim))
        self.b2 = rng.normal(0.0, 0.1, (p.pixel_dim,))

    def forward(self, emb: Tensor, classes: np.ndarray) -> Tensor:
        """emb: (B, L, d) tape tensor -> (B, P). Differentiable in emb."""
        p = self.params
        classes = np.asarray(classes, dtype=np.int64)
        if classes.ndim != 1 or emb.shape[0] != classes.shape[0]:
            raise ValueError("decoder: classes must be a (B,) array matching the batch")
        if (classes < 0).any() or (classes >= p.classes).any():
            raise ValueError(f"decoder: class id out of range [0, {p.classes})")
        flat = ad.reshape(emb, (emb.shape[0], p.length * p.embed_dim))
        shifted = ad.add(flat, Tensor(self.cls_shift[classes]))
        h = ad.gelu(ad.add(ad.matmul(shifted, Tensor(self.w1)), Tensor(self.b1)))
        return ad.add(ad.matmul(h, Tensor(self.w2)), Tensor(self.b2))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "cls_shift": self.cls_shift,
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
        }


class FrozenBackbone:
    """Fixed 4-block net over pixel vectors; taps are unit-RMS normalized."""

    def __init__(self, params: WorldParams, rng: RngStream):
        p = params
        width = p.tap_width
        self.params = p
        self.weights = []
        self.biases = []
        in_dim = p.pixel_dim
        for _ in range(NUM_TAPS):
            self.weights.append(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, width)))
            self.biases.append(rng.normal(0.0, 0.1, (width,)))
            in_dim = width

    def forward(self, pixels: Tensor, taps: tuple[int, ...], spatial: bool) -> Tensor:
        """pixels: (B, P) -> features (B, n_taps, cells, F) tape tensor.

        With spatial off the cell axis is mean-pooled and has extent 1.
        """
        p = self.params
        taps = tuple(sorted(set(int(t) for t in taps)))
        if not taps:
            raise ValueError("lift: tap subset must be nonempty")
        if any(t < 1 or t > NUM_TAPS for t in taps):
            raise ValueError(f"lift: taps must be within 1..{NUM_TAPS}, got {taps}")
        batch = pixels.shape[0]
        h = pixels
        outputs = []
        for block in range(1, NUM_TAPS + 1):
            w, b = self.weights[block - 1], self.biases[block - 1]
            h = ad.gelu(ad.add(ad.matmul(h, Tensor(w)), Tensor(b)))
            if block not in taps:
                continue
            msq = ad.mean_(ad.square(h), axis=-1, keepdims=True)
            rms = ad.sqrt(ad.add(msq, 1e-12))
            tap = ad.div(h, rms)
            tap = ad.reshape(tap, (batch, 1, p.cells, p.feat_dim))
            if not spatial:
                tap = ad.mean_(tap, axis=2, keepdims=True)
            outputs.append(tap)
        return outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=1)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


class SyntheticDataset:
    """Per-class template sequences corrupted i.i.d. per position."""

    def __init__(self, params: WorldParams, templates: np.ndarray):
        self.params = params
        self.templates = np.asarray(templates, dtype=np.int64)
        if self.templates.shape != (params.classes, params.length):
            raise ValueError("dataset templates have the wrong shape")

    def sample(self, cls: int, n: int, seed) -> np.ndarray:
        """n i.i.d. draws from the class-`cls` corruption model, shape (n, L)."""
        if n < 1:
            raise ValueError("sample_data: n must be >= 1")
        self._check_class(cls)
        rng = resolve_rng(seed)
        return self.sample_batch(np.full(n, cls, dtype=np.int64), rng)

    def sample_batch(self, classes: np.ndarray, rng: RngStream) -> np.ndarray:
        p = self.params
        classes = np.asarray(classes, dtype=np.int64)
        base = self.templates[classes]
        hit = rng.random(base.shape) < p.rho
        resampled = rng.integers(0, p.vocab, size=base.shape)
        return np.where(hit, resampled, base).astype(np.int64)

    def exact_prob(self, tokens: np.ndarray, cls: int) -> float:
        """Closed-form probability of a complete sequence under class `cls`."""
        self._check_class(cls)
        p = self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if (tokens == p.mask_id).any():
            raise ValueError("exact_prob: sequence must be complete")
        match = tokens == self.templates[cls]
        per_pos = (1.0 - p.rho) * match + p.rho / p.vocab
        return float(np.prod(per_pos))

    def exact_prob_table(self, cls: int) -> np.ndarray:
        """Probabilities for every sequence in enumeration order."""
        self._check_class(cls)
        p = self.params
        seqs = enumerate_sequences(p.vocab, p.length)
        match = seqs == self.templates[cls][None, :]
        per_pos = (1.0 - p.rho) * match + p.rho / p.vocab
        return per_pos.prod(axis=1)

    def _check_class(self, cls: int) -> None:
        if not 0 <= int(cls) < self.params.classes:
            raise ValueError(f"unknown class id {cls} (have {self.params.classes})")


def enumerate_sequences(vocab: int, length: int) -> np.ndarray:
    """All vocab**length sequences, ordered base-K with position 0 as the
    most significant digit."""
    total = vocab**length
    idx = np.arange(total)
    out = np.empty((total, length), dtype=np.int64)
    for pos in range(length - 1, -1, -1):
        out[:, pos] = idx % vocab
        idx //= vocab
    return out


def sequence_index(tokens: np.ndarray, vocab: int) -> np.ndarray:
    """Inverse of enumerate_sequences ordering for a (..., L) token array."""
    tokens = np.asarray(tokens, dtype=np.int64)
    length = tokens.shape[-1]
    powers = vocab ** np.arange(length - 1, -1, -1, dtype=np.int64)
    return tokens @ powers


@dataclass
class World:
    """Everything frozen: codebook, decoder, backbone, dataset."""

    params: WorldParams
    codebook: Codebook
    decoder: FrozenDecoder
    backbone: FrozenBackbone
    dataset: SyntheticDataset
    seed: int = 0
    injectivity_margin: float = field(default=float("nan"))

    @classmethod
    def build(cls, params: WorldParams, seed: int, validate: bool = True) -> "World":
        rng = RngStream(child_seed(seed, "world"))
        table = rng.normal(0.0, 1.0, (params.vocab, params.embed_dim))
        templates = _draw_distinct_templates(params, rng)
        decoder = FrozenDecoder(params, rng)
        backbone = FrozenBackbone(params, rng)
        world = cls(
            params=params,
            codebook=Codebook(table),
            decoder=decoder,
            backbone=backbone,
            dataset=SyntheticDataset(params, templates),
            seed=seed,
        )
        if validate:
            world.validate_injectivity()
        return world

    # -- pixel space -------------------------------------------------------

    def decode_tokens(self, tokens: np.ndarray, classes) -> Tensor:
        """Hard-token decode; rejects masked input. (B, L) or (L,) -> (B, P)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
        if (tokens == self.params.mask_id).any():
            raise ValueError("decode: sequence contains the mask symbol")
        emb = Tensor(self.codebook.lookup(tokens))
        return self.decoder.forward(emb, classes)

    def decode_embeddings(self, emb: Tensor, classes: np.ndarray) -> Tensor:
        """Differentiable decode for tape-born embeddings (the STE path)."""
        return self.decoder.forward(emb, classes)

    def lift(self, pixels: Tensor, taps=(1, 2, 3, 4), spatial: bool = True) -> Tensor:
        return self.backbone.forward(pixels, tuple(taps), spatial)

    # -- checks / serialization --------------------------------------------

    def validate_injectivity(self, limit: int = 100_000, min_gap: float = 1e-6) -> None:
        """Exhaustive pairwise decode-distance check on small token spaces."""
        p = self.params
        if p.vocab**p.length > limit:
            return
        seqs = enumerate_sequences(p.vocab, p.length)
        worst = np.inf
        for cls in range(p.classes):
            classes = np.full(seqs.shape[0], cls, dtype=np.int64)
            pix = self.decode_tokens(seqs, classes).values
            sq = ((pix[:, None, :] - pix[None, :, :]) ** 2).sum(-1)
            np.fill_diagonal(sq, np.inf)
            flat = int(np.argmin(sq))
            i, j = divmod(flat, sq.shape[0])
            gap = float(np.sqrt(sq[i, j]))
            if gap < worst:
                worst = gap
            if gap < min_gap:
                raise InjectivityError(
                    f"decoder not injective for class {cls}: sequences "
                    f"{seqs[i].tolist()} and {seqs[j].tolist()} are {gap:.3e} apart"
                )
        self.injectivity_margin = worst

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"codebook": self.codebook.table, "templates": self.dataset.templates.astype(np.float64)}
        for name, arr in self.decoder.arrays().items():
            out[f"decoder.{name}"] = arr
        for name, arr in self.backbone.arrays().items():
            out[f"backbone.{name}"] = arr
        return out

    def meta(self) -> dict:
        p = self.params
        return {
            "vocab": p.vocab,
            "length": p.length,
            "embed_dim": p.embed_dim,
            "pixel_dim": p.pixel_dim,
            "feat_dim": p.feat_dim,
            "grid": p.grid,
            "classes": p.classes,
            "rho": p.rho,
            "seed": self.seed,
        }

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "World":
        params = WorldParams(
            vocab=int(meta["vocab"]),
            length=int(meta["length"]),
            embed_dim=int(meta["embed_dim"]),
            pixel_dim=int(meta["pixel_dim"]),
            feat_dim=int(meta["feat_dim"]),
            grid=int(meta["grid"]),
            classes=int(meta["classes"]),
            rho=float(meta["rho"]),
        )
        world = cls.__new__(cls)
        world.params = params
        world.seed = int(meta["seed"])
        world.injectivity_margin = float("nan")
        world.codebook = Codebook(arrays["codebook"])
        world.decoder = FrozenDecoder.__new__(FrozenDecoder)
        world.decoder.params = params
        world.decoder.cls_shift = np.array(arrays["decoder.cls_shift"])
        world.decoder.w1 = np.array(arrays["decoder.w1"])
        world.decoder.b1 = np.array(arrays["decoder.b1"])
        world.decoder.w2 = np.array(arrays["decoder.w2"])
        world.decoder.b2 = np.array(arrays["decoder.b2"])
        world.backbone = FrozenBackbone.__new__(FrozenBackbone)
        world.backbone.params = params
        world.backbone.weights = [np.array(arrays[f"backbone.w{i}"]) for i in range(1, NUM_TAPS + 1)]
        world.backbone.biases = [np.array(arrays[f"backbone.b{i}"]) for i in range(1, NUM_TAPS + 1)]
        world.dataset = SyntheticDataset(params, np.array(arrays["templates"], dtype=np.int64))
        return world


def _draw_distinct_templates(params: WorldParams, rng: RngStream) -> np.ndarray:
    """Per-class templates, redrawn until all classes differ."""
    for _ in range(64):
        t = rng.integers(0, params.vocab, size=(params.classes, params.length)).astype(np.int64)
        if len({tuple(row) for row in t}) == params.classes:
            return t
    raise RuntimeError("could not draw distinct class templates (vocab too small?)")
