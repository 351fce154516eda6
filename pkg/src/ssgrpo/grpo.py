"""Group-relative advantages, the clipped KL-regularized objective, and steps.

One GRPO step on a query: sample ``G`` completions from the old policy,
score them, z-score the rewards within the group, and take a gradient
ascent step on

    (1/G) * sum_i [ min(rho_i * A_i, clip(rho_i, 1-eps, 1+eps) * A_i) - beta * KL_i ]

where ``rho_i = pi(s_i) / pi_old(s_i)`` uses the log-prob recorded at
sampling time and ``KL_i = u - log u - 1`` with ``u = pi_ref(s_i) / pi(s_i)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ssgrpo.core import GroundingSample
from ssgrpo.embed import SimilarityProvider
from ssgrpo.errors import GroupTooSmall, InvalidConfig, NonFiniteObjective
from ssgrpo.policy import (
    Completion,
    PolicyParams,
    log_prob,
    log_prob_grad,
    make_completion,
    nearest_bin,
    sample_completion,
)
from ssgrpo.rewards import RewardBreakdown, RewardWeights, total_reward

KL_CLAMP = 50.0
REGIMES = ("grpo", "sft")


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 4
    beta: float = 0.04
    eps: float = 0.2
    refresh_interval: int = 1
    learning_rate: float = 1.0
    steps: int = 5000
    seed: int = 0
    advantage_epsilon: float = 1e-8
    iou_threshold: float = 0.5
    reward_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bins: int = 16
    regime: str = "grpo"
    checkpoint_interval: int = 500

    def validate(self) -> None:
        if self.group_size < 2:
            raise InvalidConfig("group_size", "must be at least 2")
        if not self.beta >= 0:
            raise InvalidConfig("beta", "must be non-negative")
        if not 0 < self.eps < 1:
            raise InvalidConfig("eps", "must lie in (0, 1)")
        if self.refresh_interval < 1:
            raise InvalidConfig("refresh_interval", "must be at least 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate", "must be positive")
        if self.steps < 0:
            raise InvalidConfig("steps", "must be non-negative")
        if not self.advantage_epsilon > 0:
            raise InvalidConfig("advantage_epsilon", "must be positive")
        if len(self.reward_weights) != 3:
            raise InvalidConfig("reward_weights", "needs three weights (format, spatial, semantic)")
        if self.bins < 2:
            raise InvalidConfig("bins", "must be at least 2")
        if self.regime not in REGIMES:
            raise InvalidConfig("regime", f"must be one of {REGIMES}")
        if self.checkpoint_interval < 1:
            raise InvalidConfig("checkpoint_interval", "must be at least 1")

    @property
    def weights(self) -> RewardWeights:
        return RewardWeights(*self.reward_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward_weights"] = list(self.reward_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fields = cls.__dataclass_fields__
        out = {}
        for name, value in d.items():
            if name not in fields:
                raise InvalidConfig(name, "unknown field")
            default = fields[name].default
            try:
                if name == "reward_weights":
                    value = tuple(float(v) for v in value)
                elif name == "regime":
                    value = str(value)
                elif isinstance(default, bool) or isinstance(value, bool):
                    raise TypeError
                elif isinstance(default, int):
                    if float(value) != int(value):
                        raise TypeError
                    value = int(value)
                else:
                    value = float(value)
            except (TypeError, ValueError):
                raise InvalidConfig(name, f"bad value {value!r}") from None
            out[name] = value
        cfg = cls(**out)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class CompletionGroup:
    sample_id: str
    members: tuple[Completion, ...]
    breakdowns: tuple[RewardBreakdown, ...]
    advantages: np.ndarray

    @property
    def rewards(self) -> np.ndarray:
        return np.array([b.total for b in self.breakdowns])


@dataclass(frozen=True)
class TrainState:
    params_current: PolicyParams
    params_old: PolicyParams
    params_ref: PolicyParams
    step: int
    seed: int

    @classmethod
    def initial(cls, params: PolicyParams, seed: int) -> "TrainState":
        return cls(params.copy(), params.copy(), params.copy(), 0, seed)


@dataclass(frozen=True)
class StepRecord:
    step: int
    mean_reward: float
    mean_format: float
    mean_spatial: float
    mean_semantic: float
    objective: float
    mean_kl: float
    clipped_fraction: float
    batch_acc: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_advantages(rewards: Sequence[float], advantage_epsilon: float = 1e-8) -> np.ndarray:
    """Z-score rewards within a group using the population std.

    A group whose std falls below ``advantage_epsilon`` carries no ranking
    signal and gets all-zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"a group needs at least 2 rewards, got {r.size}")
    if not np.isfinite(r).all():
        raise NonFiniteObjective("non-finite reward in group")
    std = r.std()
    if std < advantage_epsilon:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def kl_estimate(logp_ref: float, logp_cur: float) -> float:
    """u - log u - 1 with u = pi_ref / pi_cur; zero iff the log-probs agree."""
    d = min(max(logp_ref - logp_cur, -KL_CLAMP), KL_CLAMP)
    return max(0.0, math.expm1(d) - d)


def _kl_dlogp_cur(logp_ref: float, logp_cur: float) -> float:
    d = logp_ref - logp_cur
    if abs(d) > KL_CLAMP:
        return 0.0
    return 1.0 - math.exp(d)


def clipped_term(ratio: float, advantage: float, eps: float) -> float:
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * advantage, clipped * advantage)


def _member_terms(c: Completion, a: float, params, params_ref, cfg: TrainConfig):
    lp_cur = log_prob(params, c)
    lp_ref = log_prob(params_ref, c)
    try:
        ratio = math.exp(lp_cur - c.logprob_old)
    except OverflowError:
        raise NonFiniteObjective(f"ratio overflow for completion {c.slots}") from None
    unclipped = ratio * a
    clipped = min(max(ratio, 1.0 - cfg.eps), 1.0 + cfg.eps) * a
    kl = kl_estimate(lp_ref, lp_cur)
    value = min(unclipped, clipped) - cfg.beta * kl
    is_clipped = clipped < unclipped
    # d value / d log pi_cur; the clipped branch is constant in theta
    coef = (0.0 if is_clipped else unclipped) - cfg.beta * _kl_dlogp_cur(lp_ref, lp_cur)
    return value, coef, kl, is_clipped


def grpo_objective(
    group: CompletionGroup,
    params: PolicyParams,
    params_ref: PolicyParams,
    cfg: TrainConfig,
    details: Optional[dict] = None,
) -> tuple[float, PolicyParams]:
    """Objective value and its analytic gradient with respect to ``params``.

    Ratios divide by each member's stored sampling-time log-prob. On a tie
    between the two branches of the min, the unclipped branch supplies the
    gradient. ``details`` (if given) receives mean KL and clipped fraction.
    """
    g = len(group.members)
    grad = params.zeros_like()
    total = 0.0
    kls, n_clipped = [], 0
    for c, a in zip(group.members, group.advantages):
        value, coef, kl, is_clipped = _member_terms(c, float(a), params, params_ref, cfg)
        total += value
        kls.append(kl)
        n_clipped += is_clipped
        if coef != 0.0:
            grad = grad.add(log_prob_grad(params, c), coef / g)
    value = total / g
    if not math.isfinite(value) or not grad.is_finite():
        raise NonFiniteObjective(f"objective {value} or its gradient is not finite")
    if details is not None:
        details["mean_kl"] = float(np.mean(kls))
        details["clipped_fraction"] = n_clipped / g
    return value, grad


def member_rng(seed: int, step: int, member: int) -> np.random.Generator:
    """Independent stream per (seed, step, member), independent of scheduling."""
    return np.random.default_rng([seed, step, member])


def sample_group(
    params_old: PolicyParams,
    sample: GroundingSample,
    provider: SimilarityProvider,
    cfg: TrainConfig,
    step: int,
    seed: int,
) -> CompletionGroup:
    members = tuple(
        sample_completion(params_old, sample, member_rng(seed, step, i)) for i in range(cfg.group_size)
    )
    breakdowns = tuple(
        total_reward(c.text, sample, provider, cfg.weights, cfg.iou_threshold) for c in members
    )
    adv = compute_advantages([b.total for b in breakdowns], cfg.advantage_epsilon)
    return CompletionGroup(sample.id, members, breakdowns, adv)


def _reward_means(breakdowns: Sequence[RewardBreakdown]) -> dict:
    return {
        "mean_reward": float(np.mean([b.total for b in breakdowns])),
        "mean_format": float(np.mean([b.format for b in breakdowns])),
        "mean_spatial": float(np.mean([b.spatial for b in breakdowns])),
        "mean_semantic": float(np.mean([b.semantic for b in breakdowns])),
        # batch accuracy shares the strict IoU threshold with the spatial reward
        "batch_acc": float(np.mean([b.spatial for b in breakdowns])),
    }


def train_step(
    state: TrainState,
    sample: GroundingSample,
    provider: SimilarityProvider,
    cfg: TrainConfig,
) -> tuple[TrainState, StepRecord]:
    params_old = state.params_old
    if state.step % cfg.refresh_interval == 0:
        params_old = state.params_current.copy()
    group = sample_group(params_old, sample, provider, cfg, state.step, state.seed)
    details: dict = {}
    value, grad = grpo_objective(group, state.params_current, state.params_ref, cfg, details)
    new_params = state.params_current.add(grad, cfg.learning_rate)
    if not new_params.is_finite():
        raise NonFiniteObjective(f"parameters became non-finite at step {state.step}")
    record = StepRecord(
        step=state.step,
        objective=value,
        mean_kl=details["mean_kl"],
        clipped_fraction=details["clipped_fraction"],
        **_reward_means(group.breakdowns),
    )
    new_state = replace(state, params_current=new_params, params_old=params_old, step=state.step + 1)
    return new_state, record


def sft_target(params: PolicyParams, sample: GroundingSample) -> Completion:
    """First format-valid template with the ground-truth box snapped to bins."""
    bins = params.spec.bins
    gt = sample.gt_box
    slots = (
        params.spec.valid_templates[0],
        nearest_bin(gt.x1, bins, sample.width),
        nearest_bin(gt.y1, bins, sample.height),
        nearest_bin(gt.x2, bins, sample.width),
        nearest_bin(gt.y2, bins, sample.height),
    )
    return make_completion(params, sample, slots)


def sft_step(
    state: TrainState,
    sample: GroundingSample,
    cfg: TrainConfig,
    provider: Optional[SimilarityProvider] = None,
) -> tuple[TrainState, StepRecord]:
    """Gradient ascent on the log-prob of the quantized ground-truth completion.

    The record's reward statistics come from a diagnostic group sampled from
    the pre-update policy; without a provider the semantic reward reads 0.
    """
    params = state.params_current
    target = sft_target(params, sample)
    objective = log_prob(params, target)
    new_params = params.add(log_prob_grad(params, target), cfg.learning_rate)
    if not math.isfinite(objective) or not new_params.is_finite():
        raise NonFiniteObjective(f"SFT step {state.step} produced non-finite values")

    scorer = provider if provider is not None else _NullProvider()
    group = sample_group(params, sample, scorer, cfg, state.step, state.seed)
    kls = [kl_estimate(log_prob(state.params_ref, c), log_prob(params, c)) for c in group.members]
    record = StepRecord(
        step=state.step,
        objective=objective,
        mean_kl=float(np.mean(kls)),
        clipped_fraction=0.0,
        **_reward_means(group.breakdowns),
    )
    new_state = replace(state, params_current=new_params, params_old=new_params.copy(), step=state.step + 1)
    return new_state, record


class _NullProvider:
    def similarity(self, image, box, phrase) -> float:
        return 0.0


def run_training(
    state: TrainState,
    dataset: Sequence[GroundingSample],
    provider: SimilarityProvider,
    cfg: TrainConfig,
    until: Optional[int] = None,
    on_record=None,
) -> TrainState:
    """Round-robin over ``dataset`` until ``state.step`` reaches ``until`` (default cfg.steps)."""
    until = cfg.steps if until is None else until
    while state.step < until:
        sample = dataset[state.step % len(dataset)]
        if cfg.regime == "sft":
            state, record = sft_step(state, sample, cfg, provider)
        else:
            state, record = train_step(state, sample, provider, cfg)
        if on_record is not None:
            on_record(state, record)
    return state
