"""Group-relative policy optimization for the token policy.

Each step samples a group of sequences for one prompt, scores them, turns the
rewards into group-normalized advantages and takes one Adam step on the
clipped importance-weighted surrogate minus a KL penalty to a frozen
reference policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor
from .config import from_mapping
from .errors import InputError, NumericError
from .lut import apply_lut
from .metrics import DEFAULT_SCORER, aesthetic_reward, color_reward_from_delta_e, mean_delta_e
from .nn import Adam
from .policy import PolicyModel, Prompt

MAX_LOG_RATIO = 30.0


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_beta: float = 0.02
    lr: float = 3e-5
    steps: int = 200
    std_floor: float = 1e-6
    color_weight: float = 1.0
    aesthetic_weight: float = 1.0
    temperature: float = 1.0
    kl_ceiling: float = 50.0
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> list[str]:
        bad = []
        if self.group_size < 2:
            bad.append("group_size must be >= 2")
        if not 0.0 < self.clip_epsilon < 1.0:
            bad.append("clip_epsilon must lie in (0, 1)")
        if self.kl_beta < 0:
            bad.append("kl_beta must be >= 0")
        if self.lr <= 0:
            bad.append("lr must be > 0")
        if self.steps < 0:
            bad.append("steps must be >= 0")
        if self.std_floor < 0:
            bad.append("std_floor must be >= 0")
        if self.temperature <= 0:
            bad.append("temperature must be > 0")
        return bad

    @classmethod
    def from_mapping(cls, values, base=None):
        return from_mapping(cls, values, base)


@dataclass
class RolloutBatch:
    prompt_id: str
    condition: np.ndarray
    tokens: np.ndarray  # (G, T)
    old_log_probs: np.ndarray  # (G, T)
    ref_log_probs: np.ndarray  # (G, T)
    rewards: np.ndarray  # (G,)
    color_rewards: np.ndarray
    aesthetic_rewards: np.ndarray
    delta_e: np.ndarray
    lut_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens.ndim != 2 or len(self.tokens) < 2:
            raise InputError("a rollout group needs at least two sequences")
        if not np.all(np.isfinite(self.rewards)):
            raise NumericError(f"non-finite reward in group {self.prompt_id}")


# -- rewards --------------------------------------------------------------------


@dataclass
class Scores:
    total: np.ndarray
    color: np.ndarray
    aesthetic: np.ndarray
    delta_e: np.ndarray


class LutReward:
    """Decode each sequence to a LUT, grade the query and score the result
    against the ground-truth grade plus an aesthetic term."""

    def __init__(self, tokenizer, scorer=None, color_weight: float = 1.0, aesthetic_weight: float = 1.0):
        self.tokenizer = tokenizer
        self.scorer = scorer or DEFAULT_SCORER
        self.color_weight = color_weight
        self.aesthetic_weight = aesthetic_weight

    def __call__(self, prompt: Prompt, tokens: np.ndarray) -> Scores:
        luts = self.tokenizer.decode(np.atleast_2d(tokens))
        de, color, aes = [], [], []
        for lut in luts:
            graded = apply_lut(lut, prompt.query)
            d = mean_delta_e(graded, prompt.target)
            de.append(d)
            color.append(color_reward_from_delta_e(d))
            aes.append(aesthetic_reward(graded, self.scorer))
        color, aes = np.array(color), np.array(aes)
        return Scores(self.color_weight * color + self.aesthetic_weight * aes, color, aes, np.array(de))


class PlantedReward:
    """Reward 2 for one planted sequence, otherwise a small bonus per
    matching position (at most 0.1)."""

    def __init__(self, target: Sequence[int]):
        self.target = np.asarray(target, dtype=np.int64)

    def __call__(self, prompt, tokens: np.ndarray) -> Scores:
        t = np.atleast_2d(tokens)
        hits = (t == self.target).mean(axis=1)
        total = np.where(hits == 1.0, 2.0, 0.1 * hits)
        zeros = np.zeros(len(t))
        return Scores(total, total, zeros, zeros)


# -- core operations ---------------------------------------------------------------


def rollout(policy: PolicyModel, ref_policy: PolicyModel, prompt: Prompt, group_size: int, seed,
            reward: Callable[[Prompt, np.ndarray], Scores], temperature: float = 1.0) -> RolloutBatch:
    """Sample a group for ``prompt`` and score it.

    The behaviour log-probs are recomputed with the same batched forward pass
    that :func:`grpo_step` uses, so the first ratio after a rollout is
    exactly one.
    """
    tokens, _ = policy.sample(prompt.condition, n=group_size, temperature=temperature, seed=seed)
    old = policy.log_probs(prompt.condition, tokens)
    ref = ref_policy.log_probs(prompt.condition, tokens)
    s = reward(prompt, tokens)
    return RolloutBatch(
        prompt_id=prompt.id,
        condition=np.asarray(prompt.condition),
        tokens=tokens,
        old_log_probs=old,
        ref_log_probs=ref,
        rewards=np.asarray(s.total, dtype=np.float64),
        color_rewards=np.asarray(s.color, dtype=np.float64),
        aesthetic_rewards=np.asarray(s.aesthetic, dtype=np.float64),
        delta_e=np.asarray(s.delta_e, dtype=np.float64),
        lut_ids=[f"{prompt.id}#{i}" for i in range(len(tokens))],
    )


def advantages(rewards, std_floor: float = 1e-6) -> np.ndarray:
    """Group-normalized advantages using the population standard deviation.

    Groups whose spread is below ``std_floor`` get all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise InputError("advantages need a group of at least two rewards")
    std = r.std()
    if std < std_floor or std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_excess(delta: Tensor, adv: np.ndarray, epsilon: float) -> Tensor:
    """``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) - A`` with ``delta = rho - 1``.

    The gradient flows through whichever branch is selected; a clipped branch
    is constant in the parameters.
    """
    d = delta.data
    a = np.broadcast_to(adv, d.shape)
    clipped = np.clip(d, -epsilon, epsilon) * a
    use_raw = d * a <= clipped
    return delta * np.where(use_raw, a, 0.0) + np.where(use_raw, 0.0, clipped)


def clipped_surrogate(ratio: Tensor, adv: np.ndarray, epsilon: float) -> Tensor:
    """Elementwise ``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)``."""
    return clipped_excess(ratio - 1.0, adv, epsilon) + np.broadcast_to(adv, ratio.shape)


def objective_t(policy: PolicyModel, ref_policy: PolicyModel, batch: RolloutBatch, config: GrpoConfig,
                adv: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(total, surrogate, kl) of the clipped objective as graph nodes."""
    normalized = adv is None
    if normalized:
        adv = advantages(batch.rewards, config.std_floor)
    chosen, logp = policy.token_log_probs_t(batch.condition, batch.tokens)
    gap = chosen.data - batch.old_log_probs
    if not np.all(np.isfinite(gap)) or np.abs(gap).max() > MAX_LOG_RATIO:
        raise NumericError(
            f"log-prob gap {np.nanmax(np.abs(gap)):.3g} exceeds {MAX_LOG_RATIO} for {batch.prompt_id}; batch rejected"
        )
    # group-normalized advantages sum to zero, so the surrogate equals the mean
    # excess over rho = 1; this form is exactly zero on-policy
    offset = 0.0 if normalized else float(np.mean(adv))
    delta = (chosen - batch.old_log_probs).exp() - 1.0
    surrogate = clipped_excess(delta, adv[:, None], config.clip_epsilon).mean() + offset
    ref = ref_policy.log_probs_t(batch.condition, batch.tokens).data
    p = logp.exp()
    kl = (p * (logp - ref)).sum(axis=-1).mean()
    total = surrogate - kl * config.kl_beta
    return total, surrogate, kl


def grpo_step(policy: PolicyModel, ref_policy: PolicyModel, batch: RolloutBatch, config: GrpoConfig,
              optimizer: Adam | None = None) -> dict:
    """One ascent step on the objective; returns the pre-update values."""
    opt = optimizer or Adam(policy.params, lr=config.lr)
    opt.zero_grad()
    total, surrogate, kl = objective_t(policy, ref_policy, batch, config)
    values = {"surrogate": surrogate.item(), "kl": kl.item(), "total": total.item()}
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite objective for {batch.prompt_id}")
    (-total).backward()
    opt.step()
    return values


def train_grpo(policy: PolicyModel, ref_policy: PolicyModel, prompts: Sequence[Prompt], config: GrpoConfig,
               reward: Callable[[Prompt, np.ndarray], Scores], log_path=None, checkpoint_path=None,
               on_step: Callable[[dict], None] | None = None):
    """Rollout, normalize, update; repeated for ``config.steps`` steps.

    Prompts are visited in a fixed cyclic order, so equally long windows of
    steps see the same prompts. Returns ``(policy, log)``.
    """
    if not prompts:
        raise InputError("no prompts to train on")
    opt = Adam(policy.params, lr=config.lr)
    seeds = np.random.SeedSequence(config.seed).generate_state(max(config.steps, 1))
    order = np.random.default_rng(config.seed).permutation(len(prompts))
    log = []
    stream = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for step in range(config.steps):
            prompt = prompts[order[step % len(prompts)]]
            batch = rollout(policy, ref_policy, prompt, config.group_size, int(seeds[step]), reward,
                            config.temperature)
            values = grpo_step(policy, ref_policy, batch, config, opt)
            if values["kl"] > config.kl_ceiling:
                raise NumericError(f"KL {values['kl']:.3g} above ceiling {config.kl_ceiling} at step {step}")
            row = {
                "step": step,
                "mean_reward": float(batch.rewards.mean()),
                "mean_color": float(batch.color_rewards.mean()),
                "mean_aes": float(batch.aesthetic_rewards.mean()),
                "mean_delta_e": float(batch.delta_e.mean()),
                "kl": values["kl"],
                "surrogate": values["surrogate"],
            }
            log.append(row)
            if stream is not None:
                stream.write(json.dumps(row, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(row)
            if checkpoint_path is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                policy.save(checkpoint_path)
    finally:
        if stream is not None:
            stream.close()
    if checkpoint_path is not None:
        policy.save(Path(checkpoint_path))
    return policy, log


def with_overrides(config: GrpoConfig, **kw) -> GrpoConfig:
    return replace(config, **kw)
