"""VQ-VAE tokenizer that turns a 32^3 LUT into 64 codebook indices.

Encoder: three stride-2 convolutions (kernel 4, padding 1) take the LUT's
residual from the identity lattice 32^3 -> 16^3 -> 8^3 -> 4^3, followed by a
1x1 projection to the latent width D. Decoder: 1x1 projection, then three
stages of nearest-neighbour upsampling and kernel-3 convolution back to 32^3.
The last convolution is added to the logit of the identity lattice and passed
through a sigmoid, so outputs always lie in [0, 1] and an untrained decoder
starts near the identity.

Codebook entries are maintained by exponential moving averages of the encoder
outputs assigned to them and never receive gradients. The encoder is trained
through the straight-through estimator plus the commitment term.

Tokens are numbered in raster order over the 4^3 latent grid, with the grid
axes following the LUT layout (blue, green, red; red fastest).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import checkpoint
from .autograd import Tensor, conv3d, upsample_nearest
from .config import from_mapping
from .errors import InputError, NumericError
from .fileio import codebook_hash
from .lut import Lut3d, apply_lut, identity_lut, resample_lut, sample_random_perturbation
from .metrics import mean_delta_e, psnr
from .nn import Adam, ParamStore, he_uniform

RESOLUTION = 32
GRID = 4
N_TOKENS = GRID**3
CHECKPOINT_KIND = "tokenizer"
# identity lattice clipped away from 0/1 before taking its logit
_PRIOR_EPS = 0.02


@dataclass(frozen=True)
class TokenizerConfig:
    widths: tuple[int, ...] = (64, 128, 256)
    latent_dim: int = 64
    codebook_size: int = 256
    commit_weight: float = 0.25
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5
    dead_threshold: float = 1.0
    dead_steps: int = 100
    lr: float = 2e-4
    lr_min: float = 0.0  # cosine decay floor; equal to lr for a constant rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 500
    augment: str = "low"
    seed: int = 0

    def validate(self) -> list[str]:
        bad = []
        if len(self.widths) != 3 or min(self.widths) < 1:
            bad.append("widths: need three positive channel widths")
        for name in ("latent_dim", "codebook_size", "batch_size", "epochs", "dead_steps"):
            if getattr(self, name) < 1:
                bad.append(f"{name}: must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            bad.append("ema_decay: must lie in [0, 1)")
        if self.ema_epsilon <= 0:
            bad.append("ema_epsilon: must be positive")
        if self.lr <= 0:
            bad.append("lr: must be positive")
        if not 0 <= self.lr_min <= self.lr:
            bad.append("lr_min: must lie in [0, lr]")
        if self.commit_weight < 0:
            bad.append("commit_weight: must be >= 0")
        if self.augment not in ("none", "low", "high"):
            bad.append("augment: one of none, low, high")
        return bad

    @classmethod
    def from_mapping(cls, values: dict[str, str], base=None) -> "TokenizerConfig":
        return from_mapping(cls, values, base)


# Desk-scale recipe: narrower channels, tiny batches for more optimizer
# steps per epoch, cosine decay and a faster codebook, so that 50 CPU epochs
# on a 64-LUT corpus converge.
DESK_CONFIG = TokenizerConfig(
    widths=(16, 32, 64),
    batch_size=2,
    epochs=50,
    lr=3e-3,
    lr_min=2e-5,
    ema_decay=0.9,
    dead_steps=25,
)


class Codebook:
    """K x D embedding table updated by exponential moving averages."""

    def __init__(self, entries: np.ndarray, decay: float = 0.99, epsilon: float = 1e-5,
                 dead_threshold: float = 1.0, dead_steps: int = 100):
        self.entries = np.array(entries, dtype=np.float64)
        k = self.entries.shape[0]
        self.ema_counts = np.ones(k)
        self.ema_sums = self.entries.copy()
        self.idle = np.zeros(k, dtype=np.int64)
        self.decay = decay
        self.epsilon = epsilon
        self.dead_threshold = dead_threshold
        self.dead_steps = dead_steps

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def hash(self) -> str:
        return codebook_hash(self.entries)

    def nearest(self, vectors: np.ndarray) -> np.ndarray:
        """Index of the nearest entry (squared Euclidean, lowest index on ties)."""
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, self.dim)
        out = np.empty(len(vectors), dtype=np.int64)
        step = max(1, 2_000_000 // (self.size * self.dim))
        for s in range(0, len(vectors), step):
            diff = vectors[s : s + step, None, :] - self.entries[None, :, :]
            out[s : s + step] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
        return out

    def quantize(self, latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map each D-vector on the trailing axis to its nearest entry.

        Returns ``(tokens, quantized)`` with ``tokens`` shaped like the leading
        axes of ``latent`` and ``quantized`` like ``latent``.
        """
        latent = np.asarray(latent)
        if latent.shape[-1] != self.dim:
            raise InputError(f"latent width {latent.shape[-1]} != codebook dim {self.dim}")
        tokens = self.nearest(latent).reshape(latent.shape[:-1])
        return tokens, self.entries[tokens].astype(latent.dtype, copy=False)

    def ema_update(self, latent: np.ndarray, tokens: np.ndarray, rng: np.random.Generator | None = None) -> None:
        flat = np.asarray(latent, dtype=np.float64).reshape(-1, self.dim)
        tok = np.asarray(tokens).reshape(-1)
        counts = np.bincount(tok, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.ema_sums)
        np.add.at(sums, tok, flat)
        d = self.decay
        self.ema_counts = d * self.ema_counts + (1.0 - d) * counts
        self.ema_sums = d * self.ema_sums + (1.0 - d) * sums
        n = self.ema_counts.sum()
        smoothed = (self.ema_counts + self.epsilon) / (n + self.size * self.epsilon) * n
        self.entries = self.ema_sums / smoothed[:, None]

        self.idle = np.where(counts >= self.dead_threshold, 0, self.idle + 1)
        dead = np.flatnonzero(self.idle >= self.dead_steps)
        if dead.size:
            rng = rng if rng is not None else np.random.default_rng(0)
            picks = rng.integers(0, len(flat), size=dead.size)
            self.entries[dead] = flat[picks]
            self.ema_sums[dead] = flat[picks]
            self.ema_counts[dead] = 1.0
            self.idle[dead] = 0

    def state(self) -> dict[str, np.ndarray]:
        return {
            "codebook.entries": self.entries,
            "codebook.ema_counts": self.ema_counts,
            "codebook.ema_sums": self.ema_sums,
            "codebook.idle": self.idle.astype(np.float64),
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.entries = state["codebook.entries"].astype(np.float64)
        self.ema_counts = state["codebook.ema_counts"].astype(np.float64)
        self.ema_sums = state["codebook.ema_sums"].astype(np.float64)
        self.idle = state["codebook.idle"].astype(np.int64)


def _prior_logit(dtype) -> np.ndarray:
    ident = np.clip(identity_lut(RESOLUTION).data, _PRIOR_EPS, 1.0 - _PRIOR_EPS)
    return np.log(ident / (1.0 - ident)).astype(dtype)


class TokenizerModel:
    """Encoder, decoder and codebook of the LUT tokenizer."""

    def __init__(self, config: TokenizerConfig = TokenizerConfig(), seed: int | None = None, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        w1, w2, w3 = config.widths
        d = config.latent_dim
        p = ParamStore(dtype)
        for i, (cin, cout) in enumerate(((3, w1), (w1, w2), (w2, w3))):
            p.add(f"enc{i}.w", he_uniform(rng, (4, 4, 4, cin, cout), 64 * cin))
            p.add(f"enc{i}.b", np.zeros(cout))
        p.add("enc_proj.w", he_uniform(rng, (w3, d), w3) * 0.5)
        p.add("enc_proj.b", np.zeros(d))
        p.add("dec_proj.w", he_uniform(rng, (d, w3), d))
        p.add("dec_proj.b", np.zeros(w3))
        for i, (cin, cout) in enumerate(((w3, w2), (w2, w1))):
            p.add(f"dec{i}.w", he_uniform(rng, (3, 3, 3, cin, cout), 27 * cin))
            p.add(f"dec{i}.b", np.zeros(cout))
        p.add("dec_out.w", np.zeros((3, 3, 3, w1, 3)))
        p.add("dec_out.b", np.zeros(3))
        self.params = p
        self.codebook = Codebook(
            rng.normal(0.0, 1.0, size=(config.codebook_size, d)),
            config.ema_decay,
            config.ema_epsilon,
            config.dead_threshold,
            config.dead_steps,
        )
        self._identity = identity_lut(RESOLUTION).data.astype(dtype)
        self._prior = _prior_logit(dtype)

    @property
    def dtype(self):
        return self.params.dtype

    def astype(self, dtype) -> "TokenizerModel":
        self.params.astype(dtype)
        self._identity = self._identity.astype(dtype)
        self._prior = self._prior.astype(dtype)
        return self

    def parameter_count(self) -> int:
        return self.params.count() + self.codebook.entries.size

    # -- differentiable pieces ------------------------------------------------

    def encode_t(self, x) -> Tensor:
        """``(B, 32, 32, 32, 3)`` LUT batch -> ``(B, 4, 4, 4, D)`` latent."""
        p = self.params
        h = Tensor(np.asarray(x, dtype=self.dtype) - self._identity) if not isinstance(x, Tensor) else x - self._identity
        for i in range(3):
            h = conv3d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1).silu()
        return h @ p["enc_proj.w"] + p["enc_proj.b"]

    def decode_t(self, z: Tensor) -> Tensor:
        """``(B, 4, 4, 4, D)`` latent -> ``(B, 32, 32, 32, 3)`` LUT values."""
        p = self.params
        h = (z @ p["dec_proj.w"] + p["dec_proj.b"]).silu()
        for i in range(2):
            h = conv3d(upsample_nearest(h), p[f"dec{i}.w"], p[f"dec{i}.b"], padding=1).silu()
        h = conv3d(upsample_nearest(h), p["dec_out.w"], p["dec_out.b"], padding=1)
        return (h + self._prior).sigmoid()

    def loss_t(self, batch: np.ndarray):
        """Tokenizer objective on a ``(B, 32, 32, 32, 3)`` batch.

        Returns ``(total, rec, commit, latent, tokens)``; ``total`` is a
        differentiable scalar, ``rec`` and ``commit`` are Tensors too.
        """
        x = np.asarray(batch, dtype=self.dtype)
        e = self.encode_t(x)
        tokens, q = self.codebook.quantize(e.data)
        # straight-through: forward value q, gradient copied onto e
        zq = e + (q - e.data)
        recon = self.decode_t(zq)
        rec = ((recon - x) ** 2).mean()
        commit = ((e - q) ** 2).mean()
        total = rec + self.config.commit_weight * commit
        return total, rec, commit, e.data, tokens

    # -- public, array-level API ----------------------------------------------

    def _lut_batch(self, luts) -> np.ndarray:
        luts = [luts] if isinstance(luts, Lut3d) else list(luts)
        for lut in luts:
            if lut.size != RESOLUTION:
                raise InputError(f"tokenizer expects {RESOLUTION}^3 LUTs, got {lut.size}^3")
        return np.stack([lut.data for lut in luts]).astype(self.dtype)

    def encode(self, lut: Lut3d) -> np.ndarray:
        """Latent of one LUT as a ``(D, 4, 4, 4)`` array."""
        e = self.encode_t(self._lut_batch(lut)).data[0]
        return np.moveaxis(e, -1, 0)

    def quantize(self, latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(D, 4, 4, 4)`` latent -> (64 tokens, quantized ``(D, 4, 4, 4)``)."""
        latent = np.asarray(latent)
        if latent.shape != (self.codebook.dim, GRID, GRID, GRID):
            raise InputError(f"latent must have shape (D, 4, 4, 4), got {latent.shape}")
        tokens, q = self.codebook.quantize(np.moveaxis(latent, 0, -1))
        return tokens.reshape(-1), np.moveaxis(q, -1, 0)

    def tokenize(self, luts) -> np.ndarray:
        """Token sequences for one LUT ``(64,)`` or a list ``(n, 64)``."""
        single = isinstance(luts, Lut3d)
        e = self.encode_t(self._lut_batch(luts)).data
        tokens = self.codebook.quantize(e)[0].reshape(len(e), N_TOKENS)
        return tokens[0] if single else tokens

    def check_tokens(self, tokens) -> np.ndarray:
        t = np.asarray(tokens)
        if t.shape[-1] != N_TOKENS:
            raise InputError(f"expected {N_TOKENS} tokens, got {t.shape[-1]}")
        if t.size and (t.min() < 0 or t.max() >= self.codebook.size):
            raise InputError(f"token outside [0, {self.codebook.size})")
        return t.astype(np.int64)

    def decode_array(self, tokens) -> np.ndarray:
        """Token batch ``(n, 64)`` -> LUT data ``(n, 32, 32, 32, 3)``."""
        t = self.check_tokens(np.atleast_2d(tokens))
        z = self.codebook.entries[t].reshape(len(t), GRID, GRID, GRID, -1).astype(self.dtype)
        out = self.decode_t(Tensor(z)).data.astype(np.float64)
        return np.clip(out, 0.0, 1.0)

    def decode(self, tokens) -> Lut3d | list[Lut3d]:
        t = np.asarray(tokens)
        data = self.decode_array(t)
        luts = [Lut3d(d) for d in data]
        return luts[0] if t.ndim == 1 else luts

    def reconstruct(self, lut: Lut3d) -> Lut3d:
        return self.decode(self.tokenize(lut))

    # -- persistence ------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        s = self.params.state()
        s.update(self.codebook.state())
        return s

    def save(self, path) -> None:
        checkpoint.save(path, CHECKPOINT_KIND, self.state(), config=_config_dict(self.config),
                        D=self.config.latent_dim, K=self.config.codebook_size,
                        meta={"codebook_hash": self.codebook.hash()})

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        header, arrays = checkpoint.load(path, CHECKPOINT_KIND)
        cfg = TokenizerConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()})
        model = cls(cfg)
        model.codebook.load_state(arrays)
        model.params.load_state({k: v for k, v in arrays.items() if not k.startswith("codebook.")})
        return model


def _config_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def augment_lut(lut: Lut3d, seed, intensity: str) -> Lut3d:
    if intensity == "none":
        return lut
    from .lut import apply_perturbation

    return apply_perturbation(sample_random_perturbation(seed, intensity, n=lut.size), lut)


def train_tokenizer(
    luts: list[Lut3d],
    config: TokenizerConfig = TokenizerConfig(),
    on_epoch: Callable[[dict], None] | None = None,
    dtype=np.float32,
) -> tuple[TokenizerModel, list[dict]]:
    """Train a tokenizer on ``luts`` (resampled to 32^3 when needed).

    Each epoch visits every LUT once in a random order, with a fresh random
    perturbation applied. Returns the model and one log row per epoch with
    mean ``rec`` and ``commit`` losses and codebook ``utilization``.
    """
    if not luts:
        raise InputError("training corpus is empty")
    corpus = [lut if lut.size == RESOLUTION else resample_lut(lut, RESOLUTION) for lut in luts]
    rng = np.random.default_rng(config.seed)
    model = TokenizerModel(config, seed=int(rng.integers(2**31)), dtype=dtype)
    opt = Adam(list(model.params), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)
    log: list[dict] = []
    initialized = False
    steps_per_epoch = -(-len(corpus) // config.batch_size)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(corpus))
        used = np.zeros(config.codebook_size, dtype=bool)
        recs, commits = [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            seeds = rng.integers(2**63, size=len(idx))
            batch = np.stack([augment_lut(corpus[i], int(s), config.augment).data for i, s in zip(idx, seeds)])
            if not initialized:
                _init_codebook(model, batch, rng)
                initialized = True
            total, rec, commit, latent, tokens = model.loss_t(batch)
            if not math.isfinite(total.item()):
                raise NumericError(
                    f"non-finite tokenizer loss at epoch {epoch}: rec={rec.item()} commit={commit.item()}"
                )
            opt.zero_grad()
            total.backward()
            opt.lr = config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
            opt.step()
            step += 1
            model.codebook.ema_update(latent, tokens, rng)
            used[np.unique(tokens)] = True
            recs.append(rec.item())
            commits.append(commit.item())
        row = {
            "epoch": epoch,
            "rec": float(np.mean(recs)),
            "commit": float(np.mean(commits)),
            "utilization": float(used.mean()),
        }
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return model, log


def _init_codebook(model: TokenizerModel, batch: np.ndarray, rng: np.random.Generator) -> None:
    # seed entries with jittered encoder outputs so that the first
    # assignments are spread over the table
    latent = model.encode_t(batch).data.reshape(-1, model.codebook.dim).astype(np.float64)
    picks = rng.integers(0, len(latent), size=model.codebook.size)
    scale = latent.std() * 0.1 + 1e-6
    entries = latent[picks] + rng.normal(0.0, scale, size=(model.codebook.size, model.codebook.dim))
    cb = model.codebook
    cb.entries = entries
    cb.ema_sums = entries.copy()
    cb.ema_counts = np.ones(cb.size)
    cb.idle = np.zeros(cb.size, dtype=np.int64)


def evaluate_tokenizer(model: TokenizerModel, luts: list[Lut3d], images: list[np.ndarray]) -> dict:
    """Mean LUT PSNR and mean image-space dE between original and
    reconstructed LUTs applied to ``images``."""
    psnrs, des = [], []
    for lut in luts:
        rec = model.reconstruct(lut)
        psnrs.append(psnr(lut, rec))
        des.append(np.mean([mean_delta_e(apply_lut(lut, im), apply_lut(rec, im)) for im in images]))
    return {"psnr": float(np.mean(psnrs)), "delta_e": float(np.mean(des)), "per_lut_psnr": psnrs}


def compression_ratio(n_tokens: int = N_TOKENS, codebook_size: int = 256, resolution: int = RESOLUTION,
                      float_bits: int = 32) -> float:
    """Fraction of bits saved by storing tokens instead of float32 lattices."""
    token_bits = n_tokens * math.ceil(math.log2(codebook_size))
    lut_bits = 3 * resolution**3 * float_bits
    return 1.0 - token_bits / lut_bits


def with_overrides(cfg: TokenizerConfig, **kw) -> TokenizerConfig:
    return replace(cfg, **kw)
