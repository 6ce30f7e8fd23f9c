"""Batched rollouts, the three training losses and the optimisation loop.

One iteration rolls out a batch of freshly reset students, builds::

    total = policy_term + alpha * kt_loss + beta * rank_loss

and takes one Adam step. The policy term is the REINFORCE loss for the
policy-gradient methods and a one-step TD loss for the value-based learner.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .domain import LearningTarget
from .ranking import RankingAlignment, RankLossConfig
from .recommender import Recommender, sample_actions
from .simulator import RuleBasedEnv

log = logging.getLogger(__name__)

METHODS = ("rar_s", "rar_a", "reinforce", "epsilon_greedy", "random", "value_based",
           "value_based+ram")
EVAL_SEED_BASE = 2 ** 40
EVAL_ACTION_SEED = 20240917
_TRAIN_SEED_STRIDE = 2 ** 24


class TrainingError(RuntimeError):
    pass


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Backward recursion ``G_t = r_t + gamma * G_{t+1}`` along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[-1] == 0:
        raise ValueError("discounted_returns needs at least one reward")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    out = np.empty_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        running = rewards[..., t] + gamma * running
        out[..., t] = running
    return out


@dataclass
class Trajectory:
    """A batch of equal-length episodes; per-step arrays are (batch, steps)."""

    actions: np.ndarray
    rewards: np.ndarray
    correctness: np.ndarray
    mastery: np.ndarray               # summed target mastery, (batch, steps + 1)
    supremum: np.ndarray
    targets: list[LearningTarget]
    seeds: list[int]
    probs: np.ndarray | None = None   # policy output used for acting, (batch, steps, |Q|)

    def __len__(self) -> int:
        return self.actions.shape[1]

    @property
    def batch(self) -> int:
        return self.actions.shape[0]

    def learning_effect(self, t: int | None = None) -> np.ndarray:
        """Per-student learning effect after ``t`` steps (all steps by default)."""
        t = len(self) if t is None else t
        if not 0 <= t <= len(self):
            raise ValueError(f"t={t} outside [0, {len(self)}]")
        begin = self.mastery[:, 0]
        return (self.mastery[:, t] - begin) / (self.supremum - begin)


@dataclass
class Outputs:
    """Differentiable model outputs for a trajectory, each with leading (steps, batch)."""

    log_probs: Tensor        # log-probability of the action taken
    probs: Tensor            # emitted policy output, (steps, batch, |Q|)
    kt_preds: Tensor
    q_values: Tensor | None = None


@dataclass(frozen=True)
class LossBundle:
    L_p: float
    L_k: float
    L_r: float
    alpha: float
    beta: float

    @property
    def total(self) -> float:
        return self.L_p + self.alpha * self.L_k + self.beta * self.L_r


def policy_loss(log_probs, rewards, gamma: float, baseline: bool = False) -> Tensor:
    """REINFORCE loss ``-sum_t G_t log p(q_t)`` summed over the batch; returns are constants.

    ``log_probs`` is (steps, batch); ``rewards`` is (batch, steps).
    """
    returns = discounted_returns(rewards, gamma)
    if baseline:
        returns = returns - returns.mean(axis=0, keepdims=True)
    logp = ad.stack(log_probs, axis=0) if isinstance(log_probs, (list, tuple)) else log_probs
    if logp.shape != returns.T.shape:
        raise ValueError(f"policy_loss: log_probs {logp.shape} vs rewards {returns.shape}")
    return ad.tsum(logp * (-returns.T))


def kt_loss(correctness, preds) -> Tensor:
    """Binary cross-entropy summed over steps (and batch)."""
    if isinstance(preds, (list, tuple)):
        preds = ad.stack(preds, axis=0)
    preds = ad.as_tensor(preds)
    y = np.asarray(correctness, dtype=np.float64)
    if y.shape != preds.shape:
        y = y.T
    if y.shape != preds.shape:
        raise ValueError(f"kt_loss: labels {y.shape} do not match predictions {preds.shape}")
    if ((preds.data <= 0) | (preds.data >= 1)).any():
        raise ValueError("kt_loss: predictions must lie strictly inside (0, 1)")
    ll = ad.log(preds) * y + ad.log(1.0 - preds) * (1.0 - y)
    return -ad.tsum(ll)


def total_loss(L_p, L_k, L_r, alpha: float, beta: float):
    return L_p + alpha * L_k + beta * L_r


def td_loss(q_values: Tensor, actions, rewards, gamma: float) -> Tensor:
    """Squared one-step Q-learning error with detached bootstrap targets.

    ``q_values`` is (steps, batch, |Q|); ``actions`` and ``rewards`` are (batch, steps).
    """
    actions = np.asarray(actions, dtype=np.intp).T
    rewards = np.asarray(rewards, dtype=np.float64).T
    n, B, Q = q_values.shape
    nxt = np.zeros((n, B))
    nxt[:-1] = q_values.data[1:].max(axis=2)
    targets = rewards + gamma * nxt
    chosen = ad.pick(ad.reshape(q_values, (n * B, Q)), actions.ravel())
    err = chosen - targets.ravel()
    return ad.tsum(err * err)


def linear_schedule(start: float, end: float, iteration: int, total: int) -> float:
    if total <= 1:
        return end
    frac = min(1.0, iteration / (total - 1))
    return start + (end - start) * frac


class Learner:
    """A recommender plus the rule for picking actions and building its loss."""

    uses_model = True

    def __init__(self, model: Recommender, alpha: float = 0.1, gamma: float = 0.99,
                 lr: float = 1e-3, ranking: RankingAlignment | None = None, beta: float = 0.0,
                 baseline: bool = False):
        self.model = model
        self.alpha = alpha
        self.gamma = gamma
        self.lr = lr
        self.ranking = ranking
        self.beta = beta
        self.baseline = baseline
        params = model.parameters() + (ranking.parameters() if ranking else [])
        self.optimizer = Adam(params, lr=lr)

    def _kwargs(self) -> dict:
        return dict(alpha=self.alpha, gamma=self.gamma, lr=self.lr, baseline=self.baseline)

    def policy_probs(self, logits: Tensor) -> tuple[Tensor, Tensor]:
        """(log-probabilities, probabilities) of the emitted policy output."""
        logp = ad.log_softmax(logits, axis=-1)
        return logp, ad.exp(logp)

    def act(self, probs: np.ndarray, logits: np.ndarray, rng: np.random.Generator,
            progress: float, explore: bool) -> np.ndarray:
        return sample_actions(probs, rng)

    def outputs(self, traj: Trajectory) -> Outputs:
        replay = self.model.replay(traj.targets, traj.actions, traj.correctness)
        logp, probs = self.policy_probs(replay.logits)
        n, B, Q = logp.shape
        taken = ad.reshape(ad.pick(ad.reshape(logp, (n * B, Q)), traj.actions.T.ravel()), (n, B))
        return Outputs(taken, probs, replay.kt_preds, replay.logits)

    def policy_term(self, traj: Trajectory, out: Outputs) -> Tensor:
        return policy_loss(out.log_probs, traj.rewards, self.gamma, self.baseline)

    def rank_term(self, traj: Trajectory, out: Outputs) -> Tensor | None:
        if self.ranking is None:
            return None
        if self.beta == 0.0:
            # logged only: keeps the beta = 0 ablation bitwise equal to plain training
            with ad.no_grad():
                return self.ranking.loss(out.probs, traj.targets)
        return self.ranking.loss(out.probs, traj.targets)

    def losses(self, traj: Trajectory) -> tuple[Tensor, LossBundle]:
        try:
            out = self.outputs(traj)
        except FloatingPointError as exc:
            raise TrainingError(f"model outputs are not finite: {exc}") from exc
        terms = {}
        for name, fn in (("L_p", self.policy_term),
                         ("L_k", lambda tr, o: kt_loss(tr.correctness, o.kt_preds)),
                         ("L_r", self.rank_term)):
            try:
                terms[name] = fn(traj, out)
            except (FloatingPointError, ValueError) as exc:
                raise TrainingError(f"{name} is not finite: {exc}") from exc
        for name, t in terms.items():
            if t is not None and not np.isfinite(t.data).all():
                raise TrainingError(f"{name} is not finite ({t.data})")
        loss = terms["L_p"]
        if self.alpha != 0.0:
            loss = loss + self.alpha * terms["L_k"]
        if terms["L_r"] is not None and self.beta != 0.0:
            loss = loss + self.beta * terms["L_r"]
        L_r = 0.0 if terms["L_r"] is None else float(terms["L_r"].data)
        bundle = LossBundle(float(terms["L_p"].data), float(terms["L_k"].data), L_r,
                            self.alpha, self.beta)
        return loss, bundle

    def update(self, traj: Trajectory) -> LossBundle:
        loss, bundle = self.losses(traj)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return bundle


class PolicyGradientLearner(Learner):
    """REINFORCE with the auxiliary KT loss; optional epsilon exploration."""

    def __init__(self, model: Recommender, epsilon: tuple[float, float] = (0.0, 0.0), **kw):
        super().__init__(model, **kw)
        self.epsilon = epsilon

    def _kwargs(self) -> dict:
        return dict(super()._kwargs(), epsilon=self.epsilon)

    def act(self, probs, logits, rng, progress, explore):
        actions = sample_actions(probs, rng)
        if explore and self.epsilon[0] > 0.0:
            eps = self.epsilon[0] + (self.epsilon[1] - self.epsilon[0]) * progress
            swap = rng.random(len(actions)) < eps
            random_q = rng.integers(0, probs.shape[1], size=len(actions))
            actions = np.where(swap, random_q, actions)
        return actions


class ValueLearner(Learner):
    """Q-learning over the same state encoder: Q(s, .) = f_p(s).

    The emitted policy output, used only by the rank loss, is softmax(Q / temperature).
    """

    def __init__(self, model: Recommender, epsilon: tuple[float, float] = (0.1, 0.01),
                 temperature: float = 0.05, **kw):
        super().__init__(model, **kw)
        self.epsilon = epsilon
        self.temperature = temperature

    def _kwargs(self) -> dict:
        return dict(super()._kwargs(), epsilon=self.epsilon, temperature=self.temperature)

    def policy_probs(self, logits):
        logp = ad.log_softmax(logits * (1.0 / self.temperature), axis=-1)
        return logp, ad.exp(logp)

    def act(self, probs, logits, rng, progress, explore):
        actions = logits.argmax(axis=1)
        if explore:
            eps = self.epsilon[0] + (self.epsilon[1] - self.epsilon[0]) * progress
            swap = rng.random(len(actions)) < eps
            random_q = rng.integers(0, logits.shape[1], size=len(actions))
            actions = np.where(swap, random_q, actions)
        return actions

    def policy_term(self, traj, out):
        return td_loss(out.q_values, traj.actions, traj.rewards, self.gamma)


class RandomLearner:
    """Uniform recommendations; nothing to train."""

    uses_model = False
    ranking = None
    alpha = beta = 0.0

    def __init__(self, num_questions: int):
        self.num_questions = num_questions

    def act(self, probs, logits, rng, progress, explore):
        return rng.integers(0, self.num_questions, size=probs.shape[0])

    def update(self, traj: Trajectory) -> LossBundle:
        return LossBundle(0.0, 0.0, 0.0, 0.0, 0.0)


def attach_ranking_alignment(baseline: Learner, variant: str = "additive",
                             config: RankLossConfig | None = None, beta: float = 0.1,
                             seed: int = 0, width: int = 128) -> Learner:
    """A fresh learner of the same kind, sharing the model, with ``beta * L_r`` added.

    Call before training: optimiser state is not carried over.
    """
    ranking = RankingAlignment(variant, baseline.model.num_questions, config, width, seed)
    return type(baseline)(baseline.model, ranking=ranking, beta=beta, **baseline._kwargs())


def rollout(env: RuleBasedEnv, learner, seeds: Sequence[int], horizon: int | None,
            rng: np.random.Generator, progress: float = 0.0, explore: bool = True,
            greedy: bool = False) -> Trajectory:
    """Run one batched episode: policy -> action -> env.step, ``horizon`` times.

    Acting needs no gradients; :meth:`Learner.outputs` replays the finished
    batch as a single graph when the losses are built.
    """
    horizon = env.horizon if horizon is None else horizon
    if horizon > env.horizon:
        raise ValueError(f"horizon {horizon} exceeds the environment's {env.horizon}")
    students = env.reset_batch(seeds)
    B, n, Q = len(students), horizon, env.num_questions
    actions = np.zeros((B, n), dtype=np.int64)
    rewards = np.zeros((B, n))
    correct = np.zeros((B, n), dtype=np.int64)
    mastery = np.zeros((B, n + 1))
    mastery[:, 0] = [s.begin_mastery for s in students]
    supremum = np.array([env.supremum(s) for s in students])
    targets = [s.target for s in students]
    model = learner.model if learner.uses_model else None
    uniform = np.full((B, Q), 1.0 / Q)
    probs = np.zeros((B, n, Q))
    with ad.no_grad():
        ep = model.begin(targets) if model is not None else None
        for t in range(n):
            if model is not None:
                logits = model.logits(model.state(ep))
                logits_np = logits.data
                p_np = learner.policy_probs(logits)[1].data
            else:
                p_np = logits_np = uniform
            probs[:, t] = p_np
            if greedy:
                a = logits_np.argmax(axis=1)
            else:
                a = learner.act(p_np, logits_np, rng, progress, explore)
            actions[:, t] = a
            correct[:, t], rewards[:, t] = env.step_batch(students, a)
            mastery[:, t + 1] = env.target_mastery_batch(students)
            if model is not None and t + 1 < n:
                model.advance(ep, a, correct[:, t])
    return Trajectory(actions, rewards, correct, mastery, supremum, targets, list(seeds),
                      probs)


def eval_seeds(count: int) -> list[int]:
    return [EVAL_SEED_BASE + j for j in range(count)]


def train_seeds(run_seed: int, iteration: int, batch: int) -> list[int]:
    base = run_seed * _TRAIN_SEED_STRIDE + iteration * batch
    if base + batch >= EVAL_SEED_BASE:
        raise ValueError("training seed range would overlap the evaluation seeds")
    return list(range(base, base + batch))


def evaluate(env: RuleBasedEnv, learner, seeds: Sequence[int], steps: Sequence[int] = (10, 30),
             greedy: bool | None = None, chunk: int = 200) -> dict[int, tuple[float, float]]:
    """Mean and std of the learning effect after each number of steps in ``steps``."""
    steps = list(steps)
    if any(t < 0 for t in steps):
        raise ValueError("evaluation steps must be non-negative")
    if greedy is None:
        greedy = isinstance(learner, ValueLearner)
    horizon = max(steps) if steps else 0
    effects = {t: [] for t in steps}
    rng = np.random.default_rng(EVAL_ACTION_SEED)
    with ad.no_grad():
        for i in range(0, len(seeds), chunk):
            part = list(seeds[i:i + chunk])
            if horizon == 0:
                for t in steps:
                    effects[t].append(np.zeros(len(part)))
                continue
            traj = rollout(env, learner, part, horizon, rng, explore=False, greedy=greedy)
            for t in steps:
                effects[t].append(traj.learning_effect(t))
    out = {}
    for t in steps:
        vals = np.concatenate(effects[t])
        out[t] = (float(vals.mean()), float(vals.std()))
    return out


@dataclass
class TrainConfig:
    method: str = "rar_a"
    alpha: float = 0.1
    beta: float = 0.1
    psi: float = 0.1
    omega: float = 5.0
    m: int = 4
    gamma: float = 0.99
    lr: float = 1e-3
    batch: int = 32
    iterations: int = 2000
    horizon: int = 30
    seed: int = 0
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    temperature: float = 0.05
    mean_baseline: bool = False
    target_pool: str = "mean"
    rar_width: int = 128
    eval_every: int = 100
    eval_students: int = 200
    eval_steps: tuple[int, ...] = (10, 30)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("batch", "iterations", "horizon", "m", "eval_every", "eval_students",
                     "rar_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m > self.batch - 1 and self.method in ("rar_s", "rar_a", "value_based+ram"):
            raise ValueError(f"m={self.m} needs a batch of at least {self.m + 1}")
        for name in ("alpha", "beta", "lr", "psi", "omega", "temperature"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be a non-negative finite number")
        if self.lr == 0 or self.psi == 0 or self.omega == 0 or self.temperature == 0:
            raise ValueError("lr, psi, omega and temperature must be positive")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.seed < 0 or self.seed >= EVAL_SEED_BASE // _TRAIN_SEED_STRIDE:
            raise ValueError("seed out of range")
        if self.target_pool not in ("mean", "attention"):
            raise ValueError("target_pool must be 'mean' or 'attention'")
        if not self.eval_steps or any(t < 0 or t > self.horizon for t in self.eval_steps):
            raise ValueError("eval_steps must lie within [0, horizon]")


def build_learner(cfg: TrainConfig, num_questions: int):
    if cfg.method == "random":
        return RandomLearner(num_questions)
    init_seq, rank_seq = np.random.SeedSequence([cfg.seed, 1]).spawn(2)
    model = Recommender(num_questions, target_pool=cfg.target_pool,
                        seed=int(init_seq.generate_state(1)[0]))
    common = dict(alpha=cfg.alpha, gamma=cfg.gamma, lr=cfg.lr, baseline=cfg.mean_baseline)
    rank_cfg = RankLossConfig(cfg.psi, cfg.omega, cfg.m)
    rank_seed = int(rank_seq.generate_state(1)[0])
    if cfg.method in ("value_based", "value_based+ram"):
        learner = ValueLearner(model, epsilon=(cfg.epsilon_start, cfg.epsilon_end),
                               temperature=cfg.temperature, **common)
        if cfg.method == "value_based+ram":
            learner = attach_ranking_alignment(learner, "additive", rank_cfg, cfg.beta,
                                               rank_seed, cfg.rar_width)
        return learner
    eps = (cfg.epsilon_start, cfg.epsilon_end) if cfg.method == "epsilon_greedy" else (0.0, 0.0)
    learner = PolicyGradientLearner(model, epsilon=eps, **common)
    if cfg.method in ("rar_s", "rar_a"):
        variant = "sequential" if cfg.method == "rar_s" else "additive"
        learner = attach_ranking_alignment(learner, variant, rank_cfg, cfg.beta, rank_seed,
                                           cfg.rar_width)
    return learner


METRIC_FIELDS = ("iteration", "mean_reward", "L_p", "L_k", "L_r", "total",
                 "eval_delta_t10", "eval_delta_t30")


@dataclass
class TrainResult:
    learner: object
    history: list[dict] = field(default_factory=list)
    final_eval: dict[int, tuple[float, float]] = field(default_factory=dict)


def train(cfg: TrainConfig, env: RuleBasedEnv | None = None,
          on_iteration: Callable[[dict], None] | None = None) -> TrainResult:
    """Roll out, update, and periodically evaluate for ``cfg.iterations`` iterations."""
    env = env or RuleBasedEnv()
    if cfg.horizon > env.horizon:
        raise ValueError(f"horizon {cfg.horizon} exceeds the environment's {env.horizon}")
    learner = build_learner(cfg, env.num_questions)
    action_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    held_out = eval_seeds(cfg.eval_students)
    result = TrainResult(learner)
    for it in range(cfg.iterations):
        progress = it / max(1, cfg.iterations - 1)
        traj = rollout(env, learner, train_seeds(cfg.seed, it, cfg.batch), cfg.horizon,
                       action_rng, progress=progress)
        bundle = learner.update(traj)
        row = dict(iteration=it, mean_reward=float(traj.rewards.sum(axis=1).mean()),
                   L_p=bundle.L_p, L_k=bundle.L_k, L_r=bundle.L_r, total=bundle.total,
                   eval_delta_t10=None, eval_delta_t30=None)
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations:
            table = evaluate(env, learner, held_out, cfg.eval_steps)
            row["eval_delta_t10"] = table.get(10, (None,))[0]
            row["eval_delta_t30"] = table.get(30, (None,))[0]
            result.final_eval = table
            log.info("iter %d mean_reward %.4f eval %s", it, row["mean_reward"], table)
        result.history.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return result


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["eval_steps"] = ",".join(str(t) for t in cfg.eval_steps)
    return d
