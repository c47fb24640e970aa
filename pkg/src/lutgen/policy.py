"""Conditional autoregressive model over LUT token sequences.

A condition vector (color statistics of a query image, of an optional
reference image, and a one-hot instruction tag) is projected into the first
slot of a small causal transformer. The remaining slots hold a begin token
followed by the sequence shifted right, so the output at slot ``t + 1``
predicts token ``t``.

Training runs through :mod:`lutgen.autograd`. Sampling uses a separate numpy
path with a key/value cache that mirrors the training forward pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .autograd import Tensor, concat, embedding, layer_norm
from .config import from_mapping
from .curation import CONDITION_TAGS, DatasetTuple
from .errors import InputError, NumericError
from .lut import Lut3d, apply_lut, apply_perturbation, sample_random_perturbation
from .nn import Adam, ParamStore

CHECKPOINT_KIND = "policy"
HIST_BINS = 16
_IMAGE_FEATURES = 3 * HIST_BINS + 6


# -- condition vectors --------------------------------------------------------


def condition_schema() -> dict[str, dict[str, int]]:
    """Named ``{offset, length}`` slices of the condition vector."""
    layout = []
    for prefix in ("query", "reference"):
        for ch in "rgb":
            layout.append((f"{prefix}_hist_{ch}", HIST_BINS))
        layout.append((f"{prefix}_mean", 3))
        layout.append((f"{prefix}_std", 3))
    layout.append(("tag", len(CONDITION_TAGS)))
    out, pos = {}, 0
    for name, n in layout:
        out[name] = {"offset": pos, "length": n}
        pos += n
    return out


CONDITION_DIM = 2 * _IMAGE_FEATURES + len(CONDITION_TAGS)


def image_features(img: np.ndarray) -> np.ndarray:
    """Per-channel normalized histograms, then channel means and stds."""
    px = np.asarray(img, dtype=np.float64).reshape(-1, 3)
    bins = np.minimum((np.clip(px, 0.0, 1.0) * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    hists = [np.bincount(bins[:, c], minlength=HIST_BINS) / len(px) for c in range(3)]
    return np.concatenate(hists + [px.mean(axis=0), px.std(axis=0)])


def condition_vector(query: np.ndarray, reference: np.ndarray | None = None, tag: str | None = None) -> np.ndarray:
    ref = np.zeros(_IMAGE_FEATURES) if reference is None else image_features(reference)
    onehot = np.zeros(len(CONDITION_TAGS))
    if tag is not None:
        if tag not in CONDITION_TAGS:
            raise InputError(f"unknown condition tag {tag!r}")
        onehot[CONDITION_TAGS.index(tag)] = 1.0
    return np.concatenate([image_features(query), ref, onehot])


@dataclass
class Prompt:
    """A tuple materialized into arrays: what the policy sees and what a
    rollout is scored against."""

    id: str
    task: str
    condition: np.ndarray
    query: np.ndarray
    target: np.ndarray  # query graded with the ground-truth LUT
    lut_id: str


def materialize(tup: DatasetTuple, images, luts, index: int = 0) -> Prompt:
    """Build the condition and images for one tuple.

    Transfer tuples see the perturbed query and the perturbed reference graded
    by the target LUT. Instruct tuples see the query and the tag.
    """
    try:
        lut = luts[tup.lut_id]
        query = images[tup.query_image_id]
        ref_img = images[tup.reference_image_id] if tup.reference_image_id is not None else None
    except KeyError as exc:
        raise InputError(f"tuple references unknown id {exc.args[0]!r}") from None
    pid = f"{index}:{tup.task}:{tup.query_image_id}:{tup.lut_id}"
    if tup.task == "transfer":
        if ref_img is None:
            raise InputError("transfer tuple without a reference image")
        ss = np.random.SeedSequence(tup.perturbation_seed).spawn(2)
        q = apply_perturbation(sample_random_perturbation(ss[0], "low"), query)
        r = apply_perturbation(sample_random_perturbation(ss[1], "low"), ref_img)
        cond = condition_vector(q, apply_lut(lut, r))
        return Prompt(pid, tup.task, cond, q, apply_lut(lut, q), tup.lut_id)
    cond = condition_vector(query, None, tup.condition)
    return Prompt(pid, tup.task, cond, query, apply_lut(lut, query), tup.lut_id)


# -- model --------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyConfig:
    vocab: int = 256
    seq_len: int = 64
    cond_dim: int = CONDITION_DIM
    width: int = 128
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 4
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 300
    seed: int = 0

    def validate(self) -> list[str]:
        bad = []
        for name in ("vocab", "seq_len", "cond_dim", "width", "heads", "blocks", "mlp_ratio", "batch_size"):
            if getattr(self, name) < 1:
                bad.append(f"{name} must be >= 1")
        if self.heads >= 1 and self.width % self.heads:
            bad.append("width must be divisible by heads")
        if self.lr <= 0:
            bad.append("lr must be > 0")
        if self.steps < 0:
            bad.append("steps must be >= 0")
        return bad

    @classmethod
    def from_mapping(cls, values, base=None):
        return from_mapping(cls, values, base)


def _gelu_np(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _log_softmax_np(x):
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class PolicyModel:
    def __init__(self, config: PolicyConfig | None = None, seed: int | None = None, dtype=np.float32):
        self.config = config or PolicyConfig()
        bad = self.config.validate()
        if bad:
            raise InputError("; ".join(bad))
        c = self.config
        rng = np.random.default_rng(c.seed if seed is None else seed)
        p = self.params = ParamStore(dtype)
        w, hidden = c.width, c.width * c.mlp_ratio
        resid = 0.02 / math.sqrt(2 * c.blocks)
        p.add("cond.w", rng.normal(0.0, 1.0 / math.sqrt(c.cond_dim), (c.cond_dim, w)))
        p.add("cond.b", np.zeros(w))
        p.add("tok_emb", rng.normal(0.0, 0.02, (c.vocab + 1, w)))
        p.add("pos_emb", rng.normal(0.0, 0.02, (c.seq_len + 1, w)))
        for i in range(c.blocks):
            p.add(f"b{i}.ln1.g", np.ones(w))
            p.add(f"b{i}.ln1.b", np.zeros(w))
            p.add(f"b{i}.qkv.w", rng.normal(0.0, 0.02, (w, 3 * w)))
            p.add(f"b{i}.qkv.b", np.zeros(3 * w))
            p.add(f"b{i}.proj.w", rng.normal(0.0, resid, (w, w)))
            p.add(f"b{i}.proj.b", np.zeros(w))
            p.add(f"b{i}.ln2.g", np.ones(w))
            p.add(f"b{i}.ln2.b", np.zeros(w))
            p.add(f"b{i}.fc1.w", rng.normal(0.0, 0.02, (w, hidden)))
            p.add(f"b{i}.fc1.b", np.zeros(hidden))
            p.add(f"b{i}.fc2.w", rng.normal(0.0, resid, (hidden, w)))
            p.add(f"b{i}.fc2.b", np.zeros(w))
        p.add("ln_f.g", np.ones(w))
        p.add("ln_f.b", np.zeros(w))
        # zero output layer: an untrained policy is uniform over the vocabulary
        p.add("out.w", np.zeros((w, c.vocab)))
        p.add("out.b", np.zeros(c.vocab))
        s = c.seq_len + 1
        self._mask = np.triu(np.full((s, s), -1e9), k=1)

    @property
    def dtype(self):
        return self.params.dtype

    def parameter_count(self) -> int:
        return self.params.count()

    # -- checks -----------------------------------------------------------------

    def _check(self, condition, tokens=None):
        c = self.config
        cond = np.atleast_2d(np.asarray(condition, dtype=self.dtype))
        if cond.shape[-1] != c.cond_dim:
            raise InputError(f"condition must have {c.cond_dim} entries, got {cond.shape[-1]}")
        if tokens is None:
            return cond, None
        t = np.atleast_2d(np.asarray(tokens))
        if t.shape[-1] != c.seq_len:
            raise InputError(f"expected {c.seq_len} tokens, got {t.shape[-1]}")
        if t.size and (t.min() < 0 or t.max() >= c.vocab):
            raise InputError(f"token outside [0, {c.vocab})")
        if len(cond) == 1 and len(t) > 1:
            cond = np.repeat(cond, len(t), axis=0)
        if len(cond) != len(t):
            raise InputError("condition and token batches differ in length")
        return cond, t.astype(np.int64)

    # -- differentiable forward --------------------------------------------------

    def log_probs_t(self, condition: np.ndarray, tokens: np.ndarray) -> Tensor:
        """Full ``(B, T, K)`` log-distributions for teacher-forced tokens."""
        cond, tok = self._check(condition, tokens)
        c, p = self.config, self.params
        bsz, t_len = tok.shape
        w, h = c.width, c.heads
        dh = w // h
        inp = np.concatenate([np.full((bsz, 1), c.vocab), tok[:, :-1]], axis=1)
        prefix = (Tensor(cond) @ p["cond.w"] + p["cond.b"]).reshape(bsz, 1, w)
        x = concat([prefix, embedding(p["tok_emb"], inp)], axis=1) + p["pos_emb"]
        s = t_len + 1
        scale = 1.0 / math.sqrt(dh)
        for i in range(c.blocks):
            y = layer_norm(x, p[f"b{i}.ln1.g"], p[f"b{i}.ln1.b"])
            qkv = (y @ p[f"b{i}.qkv.w"] + p[f"b{i}.qkv.b"]).reshape(bsz, s, 3, h, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = ((q @ k.transpose(0, 1, 3, 2)) * scale + self._mask[:s, :s]).softmax(axis=-1)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, s, w)
            x = x + (y @ p[f"b{i}.proj.w"] + p[f"b{i}.proj.b"])
            y = layer_norm(x, p[f"b{i}.ln2.g"], p[f"b{i}.ln2.b"])
            y = (y @ p[f"b{i}.fc1.w"] + p[f"b{i}.fc1.b"]).gelu()
            x = x + (y @ p[f"b{i}.fc2.w"] + p[f"b{i}.fc2.b"])
        x = layer_norm(x[:, 1:, :], p["ln_f.g"], p["ln_f.b"])
        return (x @ p["out.w"] + p["out.b"]).log_softmax(axis=-1)

    def token_log_probs_t(self, condition, tokens) -> tuple[Tensor, Tensor]:
        """(log-probabilities of the given tokens ``(B, T)``, full ``(B, T, K)``)."""
        _, tok = self._check(condition, tokens)
        logp = self.log_probs_t(condition, tok)
        b, t = tok.shape
        chosen = logp[np.arange(b)[:, None], np.arange(t)[None, :], tok]
        return chosen, logp

    def nll_t(self, condition, tokens) -> Tensor:
        """Mean over the batch of the summed sequence negative log-likelihood."""
        chosen, _ = self.token_log_probs_t(condition, tokens)
        return -chosen.sum() * (1.0 / chosen.shape[0])

    def log_probs(self, condition, tokens) -> np.ndarray:
        """Per-position log-probabilities ``(T,)`` (or ``(B, T)`` for batches)."""
        single = np.asarray(tokens).ndim == 1
        chosen, _ = self.token_log_probs_t(condition, tokens)
        out = chosen.data.astype(np.float64)
        return out[0] if single else out

    def distributions(self, condition, tokens) -> np.ndarray:
        """Per-position probability tables ``(B, T, K)``."""
        return np.exp(self.log_probs_t(condition, tokens).data.astype(np.float64))

    # -- cached inference ---------------------------------------------------------

    def _step_logits(self, x, cache, pos):
        """Advance every sequence by one slot; ``x`` is ``(B, W)``."""
        c, p = self.config, self.params
        h = c.heads
        dh = c.width // h
        bsz = x.shape[0]
        x = x + p["pos_emb"].data[pos]
        for i in range(c.blocks):
            y = _ln_np(x, p[f"b{i}.ln1.g"].data, p[f"b{i}.ln1.b"].data)
            qkv = (y @ p[f"b{i}.qkv.w"].data + p[f"b{i}.qkv.b"].data).reshape(bsz, 3, h, dh)
            kc, vc = cache[i]
            kc[:, :, pos] = qkv[:, 1]
            vc[:, :, pos] = qkv[:, 2]
            scores = np.einsum("bhd,bhsd->bhs", qkv[:, 0], kc[:, :, : pos + 1]) / math.sqrt(dh)
            scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
            att = scores / scores.sum(axis=-1, keepdims=True)
            y = np.einsum("bhs,bhsd->bhd", att, vc[:, :, : pos + 1]).reshape(bsz, c.width)
            x = x + (y @ p[f"b{i}.proj.w"].data + p[f"b{i}.proj.b"].data)
            y = _ln_np(x, p[f"b{i}.ln2.g"].data, p[f"b{i}.ln2.b"].data)
            y = _gelu_np(y @ p[f"b{i}.fc1.w"].data + p[f"b{i}.fc1.b"].data)
            x = x + (y @ p[f"b{i}.fc2.w"].data + p[f"b{i}.fc2.b"].data)
        y = _ln_np(x, p["ln_f.g"].data, p["ln_f.b"].data)
        return y @ p["out.w"].data + p["out.b"].data

    def sample(self, condition, n: int = 1, temperature: float = 1.0, seed=0, greedy: bool = False):
        """Ancestral sampling of ``n`` sequences with a key/value cache.

        Returns ``(tokens, log_probs)`` of shape ``(n, T)``. The log-probs are
        those of the sampled tokens under the untempered distribution.
        """
        if not greedy and not temperature > 0:
            raise InputError("temperature must be > 0")
        cond, _ = self._check(condition)
        if len(cond) == 1:
            cond = np.repeat(cond, n, axis=0)
        n = len(cond)
        c, p = self.config, self.params
        dh = c.width // c.heads
        rng = np.random.default_rng(seed)
        cache = [
            (np.zeros((n, c.heads, c.seq_len + 1, dh), self.dtype), np.zeros((n, c.heads, c.seq_len + 1, dh), self.dtype))
            for _ in range(c.blocks)
        ]
        self._step_logits(cond @ p["cond.w"].data + p["cond.b"].data, cache, 0)
        prev = np.full(n, c.vocab)
        tokens = np.zeros((n, c.seq_len), dtype=np.int64)
        logps = np.zeros((n, c.seq_len))
        for t in range(c.seq_len):
            logits = self._step_logits(p["tok_emb"].data[prev], cache, t + 1).astype(np.float64)
            lp = _log_softmax_np(logits)
            if greedy:
                nxt = np.argmax(lp, axis=-1)
            else:
                probs = np.exp(_log_softmax_np(logits / temperature))
                cdf = np.cumsum(probs, axis=-1)
                u = rng.random(n)[:, None] * cdf[:, -1:]
                nxt = np.minimum((cdf <= u).sum(axis=-1), c.vocab - 1)
            tokens[:, t] = nxt
            logps[:, t] = lp[np.arange(n), nxt]
            prev = nxt
        return tokens, logps

    def greedy(self, condition) -> np.ndarray:
        tokens, _ = self.sample(condition, greedy=True)
        return tokens[0] if np.asarray(condition).ndim == 1 else tokens

    # -- persistence ------------------------------------------------------------

    def copy(self) -> "PolicyModel":
        other = PolicyModel(self.config, dtype=self.dtype)
        other.params.load_state(self.params.state())
        return other

    def save(self, path) -> None:
        checkpoint.save(path, CHECKPOINT_KIND, self.params.state(), config=asdict(self.config),
                        K=self.config.vocab, meta={"condition_schema": condition_schema()})

    @classmethod
    def load(cls, path) -> "PolicyModel":
        header, arrays = checkpoint.load(path, CHECKPOINT_KIND)
        cfg = dict(header["config"])
        model = cls(PolicyConfig(**cfg))
        model.params.load_state(arrays)
        return model


# -- likelihood training ---------------------------------------------------------


def build_examples(prompts: Sequence[Prompt], lut_tokens: dict[str, np.ndarray]):
    """Stack conditions and target token sequences, grouped by task."""
    groups: dict[str, tuple[list, list]] = {}
    for pr in prompts:
        conds, toks = groups.setdefault(pr.task, ([], []))
        conds.append(pr.condition)
        toks.append(lut_tokens[pr.lut_id])
    return {k: (np.stack(v[0]), np.stack(v[1]).astype(np.int64)) for k, v in sorted(groups.items())}


def train_nll(policy: PolicyModel, examples, config: PolicyConfig | None = None,
              on_step: Callable[[dict], None] | None = None):
    """Minimize the mean sequence NLL with Adam.

    ``examples`` maps a task name to ``(conditions, tokens)``. When several
    tasks are present each batch draws an equal share from each of them.
    Returns ``(policy, log)`` with one ``{step, nll}`` row per step.
    """
    cfg = config or policy.config
    if isinstance(examples, tuple):
        examples = {"all": examples}
    pools = [(np.asarray(c), np.asarray(t)) for c, t in examples.values() if len(t)]
    if not pools:
        raise InputError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(policy.params, lr=cfg.lr)
    share = max(1, cfg.batch_size // len(pools))
    log = []
    for step in range(cfg.steps):
        conds, toks = [], []
        for c, t in pools:
            idx = rng.integers(len(t), size=min(share, len(t)))
            conds.append(c[idx])
            toks.append(t[idx])
        opt.zero_grad()
        loss = policy.nll_t(np.concatenate(conds), np.concatenate(toks))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite NLL at step {step}")
        loss.backward()
        opt.step()
        row = {"step": step, "nll": value}
        log.append(row)
        if on_step is not None:
            on_step(row)
    return policy, log


def with_overrides(config: PolicyConfig, **kw) -> PolicyConfig:
    return replace(config, **kw)
