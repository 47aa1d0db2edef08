"""Redundant query pool and the three-stage selection schedule.

Training proceeds through three stages. In the warm-up stage the k
highest-scoring queries are used. In the rewards-guided stage each query is
kept or dropped by an independent Bernoulli draw on sigmoid(score); a
realized per-query reward (zero for queries that sat out the round) feeds a
score-function estimator with a mean baseline plus an entropy bonus, and
the resulting gradient updates the scores. After the last epoch the final
stage deploys the top-k queries by score.

Rewards blend a per-query local term (cosine agreement with pooled image
and point features) and a shared global term (reciprocal task loss); the
blend coefficient alpha = 1 - exp(-epoch/tau) shifts weight from global to
local as training progresses while tau itself decays toward a floor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError, ContractViolationError, DegenerateInputError,
)
from .numerics import cosine_similarity, sigmoid
from .rng import Rng

_PROB_CLAMP = 1e-12
_TAU_DECAY_PERIOD = 10


class Stage(enum.Enum):
    WARM_UP = "warmup"
    REWARDS_GUIDED = "rewards"
    FINAL = "final"


@dataclass
class RewardConfig:
    tau: float = 20.0
    tau_decay: float = 0.9
    tau_min: float = 5.0
    beta_mask: float = 0.3
    mu_entropy: float = 0.01
    stage1_epochs: int = 15
    stage2_period: int = 5
    eps_loss: float = 1e-6

    def __post_init__(self):
        if not (self.tau >= self.tau_min > 0):
            raise ConfigurationError("require tau >= tau_min > 0")
        if not (0.0 <= self.beta_mask < 1.0):
            raise ConfigurationError("beta_mask must be in [0, 1)")
        if self.mu_entropy < 0:
            raise ConfigurationError("mu_entropy must be nonnegative")


@dataclass
class QueryPool:
    queries: np.ndarray  # (M, C)
    scores: np.ndarray   # (M,)
    k: int
    stage: Stage = Stage.WARM_UP

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        m = self.queries.shape[0]
        if self.scores.shape != (m,):
            raise ConfigurationError("scores must have one entry per query")
        if not (m >= self.k >= 1):
            raise ConfigurationError(f"need M >= k >= 1, got M={m}, k={self.k}")

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    def probabilities(self) -> np.ndarray:
        return sigmoid(self.scores)


def new_pool(m: int, c: int, k: int, rng: Rng, query_scale: float = 0.5) -> QueryPool:
    """Fresh pool: random queries, zero scores (selection probability 0.5)."""
    return QueryPool(queries=rng.normal(0.0, query_scale, (m, c)),
                     scores=np.zeros(m), k=k)


@dataclass
class SelectionOutcome:
    actions: np.ndarray     # (M,) in {0, 1}
    soft_masks: np.ndarray  # (M,) = beta + (1 - beta) * action
    log_probs: np.ndarray   # (M,) log P(action)
    probs: np.ndarray       # (M,) sigmoid(score) at sampling time
    rewards: np.ndarray | None = None   # realized per-query reward
    baseline: float | None = None


@dataclass
class ReinforceResult:
    loss: float
    grad_scores: np.ndarray
    degenerate_baseline: bool = False


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties break toward the lower index."""
    values = np.asarray(values)
    if k > values.shape[0]:
        raise ConfigurationError(f"k={k} exceeds pool size {values.shape[0]}")
    order = np.argsort(-values, kind="stable")[:k]
    return np.sort(order)


def warmup_topk(pool: QueryPool) -> np.ndarray:
    return top_k_indices(pool.scores, pool.k)


def final_select(pool: QueryPool) -> np.ndarray:
    return top_k_indices(pool.scores, pool.k)


def local_reward(f_q: np.ndarray, f_i_pooled: np.ndarray,
                 f_p_pooled: np.ndarray) -> float:
    """Mean cosine agreement of a query with the two pooled modality features.

    A zero-norm operand contributes 0 instead of erroring: degenerate
    queries earn a neutral reward rather than poisoning the batch.
    """
    total = 0.0
    for other in (f_i_pooled, f_p_pooled):
        try:
            total += cosine_similarity(f_q, other)
        except DegenerateInputError:
            pass
    return 0.5 * total


def global_reward(task_loss: float, eps_loss: float = 1e-6) -> float:
    if task_loss < 0:
        raise ContractViolationError(f"task loss must be nonnegative, got {task_loss}")
    return 1.0 / max(task_loss, eps_loss)


def fusion_alpha(epoch: int, tau: float) -> float:
    """Blend coefficient 1 - exp(-epoch/tau); 0 at epoch 0, increasing."""
    return 1.0 - float(np.exp(-epoch / tau))


def fused_reward(local: float, global_: float, alpha: float) -> float:
    return alpha * local + (1.0 - alpha) * global_


def decay_tau(cfg: RewardConfig, epoch: int) -> float:
    """tau after `epoch` epochs: factor cfg.tau_decay every 10, floored."""
    steps = epoch // _TAU_DECAY_PERIOD
    return max(cfg.tau_min, cfg.tau * cfg.tau_decay ** steps)


def stage_of_epoch(epoch: int, cfg: RewardConfig,
                   total_epochs: int | None = None) -> Stage:
    """Schedule: warm-up through stage1_epochs, then the rewards-guided
    stage on every stage2_period-th epoch, warm-up otherwise; epochs past
    the configured total are the deployment stage."""
    if epoch < 1:
        raise ContractViolationError("epochs are 1-based")
    if total_epochs is not None and epoch > total_epochs:
        return Stage.FINAL
    if epoch <= cfg.stage1_epochs:
        return Stage.WARM_UP
    if epoch % cfg.stage2_period == 0:
        return Stage.REWARDS_GUIDED
    return Stage.WARM_UP


def sample_actions(pool: QueryPool, rng: Rng,
                   beta_mask: float = 0.3) -> SelectionOutcome:
    """Independent Bernoulli keep/drop per query with soft masking.

    If every draw comes up zero the single highest-probability query is
    forced on, so at least one query always participates.
    """
    p = pool.probabilities()
    actions = rng.bernoulli(p)
    if not actions.any():
        actions[int(np.argmax(p))] = 1.0
    soft = beta_mask + (1.0 - beta_mask) * actions
    pc = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    log_probs = actions * np.log(pc) + (1.0 - actions) * np.log(1.0 - pc)
    return SelectionOutcome(actions=actions, soft_masks=soft,
                            log_probs=log_probs, probs=p)


def attach_rewards(outcome: SelectionOutcome, fused: np.ndarray) -> SelectionOutcome:
    """Realize rewards for this round: a query earns its fused reward only
    when it was sampled in, otherwise 0 (it did not participate). The
    baseline is the mean realized reward across the whole pool."""
    fused = np.asarray(fused, dtype=np.float64)
    outcome.rewards = outcome.actions * fused
    outcome.baseline = float(outcome.rewards.mean())
    return outcome


def reinforce_loss(outcome: SelectionOutcome) -> ReinforceResult:
    """Score-function loss -(r - rbar) . log P(a) and its score gradient.

    Rewards and baseline are constants of the estimator; the gradient of
    log P(a_i) w.r.t. the score is (a_i - p_i).
    """
    if outcome.rewards is None or outcome.baseline is None:
        raise ContractViolationError("rewards must be attached before the loss")
    m = outcome.actions.shape[0]
    if m < 2:
        return ReinforceResult(loss=0.0, grad_scores=np.zeros(m),
                               degenerate_baseline=True)
    advantage = outcome.rewards - outcome.baseline
    loss = float(-np.sum(advantage * outcome.log_probs))
    grad = -advantage * (outcome.actions - outcome.probs)
    return ReinforceResult(loss=loss, grad_scores=grad)


def entropy_bonus(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-query Bernoulli entropy of sigmoid(score) and its score gradient."""
    p = sigmoid(np.asarray(scores, dtype=np.float64))
    pc = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    entropy = -(pc * np.log(pc) + (1.0 - pc) * np.log(1.0 - pc))
    grad = np.log((1.0 - pc) / pc) * p * (1.0 - p)
    return entropy, grad


def stage2_objective(reinforce: ReinforceResult, scores: np.ndarray,
                     mu_entropy: float) -> tuple[float, np.ndarray]:
    """Full stage-II objective: reinforce loss minus the entropy bonus."""
    entropy, d_entropy = entropy_bonus(scores)
    loss = reinforce.loss - mu_entropy * float(entropy.sum())
    grad = reinforce.grad_scores - mu_entropy * d_entropy
    return loss, grad


# --- schedule driver on a fixed reward landscape ----------------------------

@dataclass
class ScheduleResult:
    selected: np.ndarray
    scores: np.ndarray
    stage2_epochs: list[int] = field(default_factory=list)


def run_selection_schedule(pool: QueryPool, f_i_pooled: np.ndarray,
                           f_p_pooled: np.ndarray, cfg: RewardConfig,
                           epochs: int, rng: Rng, tri_stage: bool = True,
                           samples_per_epoch: int = 16,
                           score_lr: float = 2.0) -> ScheduleResult:
    """Run the staged schedule when queries themselves are fixed.

    This is the selection dynamics in isolation (used by the planted-query
    recovery suite): only the scores move. The per-round task loss is taken
    as one minus the mean local reward of the participating queries, so
    rounds that sample informative queries earn a larger global reward.
    """
    locals_ = np.array([local_reward(q, f_i_pooled, f_p_pooled)
                        for q in pool.queries])
    stage2_epochs = []
    for epoch in range(1, epochs + 1):
        stage = stage_of_epoch(epoch, cfg) if tri_stage else Stage.WARM_UP
        pool.stage = stage
        if stage is not Stage.REWARDS_GUIDED:
            continue
        stage2_epochs.append(epoch)
        tau = decay_tau(cfg, epoch)
        alpha = fusion_alpha(epoch, tau)
        grad_sum = np.zeros(pool.size)
        for draw in range(samples_per_epoch):
            outcome = sample_actions(pool, rng.derive(epoch, draw),
                                     beta_mask=cfg.beta_mask)
            sampled = outcome.actions > 0
            task_loss = max(0.0, 1.0 - float(locals_[sampled].mean()))
            g = global_reward(task_loss, cfg.eps_loss)
            fused = np.array([fused_reward(lo, g, alpha) for lo in locals_])
            attach_rewards(outcome, fused)
            rl = reinforce_loss(outcome)
            _, grad = stage2_objective(rl, pool.scores, cfg.mu_entropy)
            grad_sum += grad
        pool.scores = pool.scores - score_lr * grad_sum / samples_per_epoch
    pool.stage = Stage.FINAL
    return ScheduleResult(selected=final_select(pool), scores=pool.scores.copy(),
                          stage2_epochs=stage2_epochs)
