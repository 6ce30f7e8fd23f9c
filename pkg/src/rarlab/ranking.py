"""Ranking alignment between learning-target distances and recommendation distances.

For students u and v the target distance is ``|T_u ^ T_v|`` and the
recommendation distance is the L2 distance between representations of their
recommendation-probability sequences, either a GRU summary (``"sequential"``)
or the plain sum of probability vectors (``"additive"``). The rank loss::

    L_r = sum_u sum_{v in peers(u)} clip(psi * d_target(u, v) - d_rec(u, v), 0, omega)

is zero once every sampled pair's recommendations are at least ``psi`` times as
far apart as their targets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .domain import LearningTarget
from .recommender import GRU

VARIANTS = ("sequential", "additive")


def student_distance(tu: LearningTarget, tv: LearningTarget) -> int:
    return len(frozenset(tu) ^ frozenset(tv))


def target_distance_matrix(targets: Sequence[LearningTarget]) -> np.ndarray:
    n = len(targets)
    out = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = student_distance(targets[i], targets[j])
    return out


@dataclass(frozen=True)
class RecommendationRepr:
    variant: str
    vector: Tensor

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown representation variant {self.variant!r}")


class SequenceEncoder:
    """The dedicated recurrent encoder over probability vectors."""

    def __init__(self, num_questions: int, width: int = 128, seed: int = 0):
        self.gru = GRU("f_s", num_questions, width, np.random.default_rng(seed))

    def __call__(self, probs) -> Tensor:
        """Final hidden state over a (steps, |Q|) or (steps, B, |Q|) sequence."""
        probs = _as_sequence(probs)
        single = probs.ndim == 2
        if single:
            probs = ad.reshape(probs, (probs.shape[0], 1, probs.shape[1]))
        n, B, Q = probs.shape
        gx = ad.reshape(self.gru.project(ad.reshape(probs, (n * B, Q))), (n, B, -1))
        hs = ad.gru_sequence(gx, self.gru.h0, self.gru.w_h, self.gru.b_h)
        self.gru.calls += n
        return hs[n - 1, 0] if single else hs[n - 1]

    def parameters(self) -> list[Parameter]:
        return self.gru.parameters()


def _as_sequence(probs) -> Tensor:
    """Stack a list of per-step probability vectors; a tensor passes through."""
    if isinstance(probs, Tensor):
        seq = probs
    elif len(probs) == 0:
        seq = Tensor(np.zeros((0, 0)))
    else:
        seq = ad.stack([ad.as_tensor(p) for p in probs], axis=0)
    if seq.shape[0] == 0:
        raise ValueError("cannot represent an empty recommendation sequence")
    return seq


def sequential_repr(probs, encoder: SequenceEncoder) -> RecommendationRepr:
    return RecommendationRepr("sequential", encoder(probs))


def additive_repr(probs) -> RecommendationRepr:
    return RecommendationRepr("additive", ad.tsum(_as_sequence(probs), axis=0))


def recommendation_distance(bu: RecommendationRepr, bv: RecommendationRepr) -> Tensor:
    if bu.variant != bv.variant:
        raise ValueError(f"cannot compare {bu.variant} with {bv.variant} representations")
    if bu.vector.shape != bv.vector.shape:
        raise ValueError(f"representation shapes differ: {bu.vector.shape} vs {bv.vector.shape}")
    return ad.l2_distance(bu.vector, bv.vector)


def select_peers(batch, u: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct indices from the batch other than ``u``, uniformly without replacement."""
    n = batch if isinstance(batch, (int, np.integer)) else len(batch)
    if not 0 <= u < n:
        raise IndexError(f"student {u} outside a batch of {n}")
    if m > n - 1 or m < 0:
        raise ValueError(f"cannot pick {m} peers from a batch of {n}")
    others = np.delete(np.arange(n), u)
    return rng.choice(others, size=m, replace=False)


@dataclass(frozen=True)
class RankLossConfig:
    psi: float = 0.1
    omega: float = 5.0
    m: int = 4

    def __post_init__(self):
        if self.psi <= 0 or self.omega <= 0:
            raise ValueError("psi and omega must be positive")
        if self.m < 1:
            raise ValueError("m must be at least 1")


def pair_terms(reprs: Tensor, target_dist: np.ndarray, us: np.ndarray, vs: np.ndarray,
               psi: float, omega: float) -> Tensor:
    """Clipped hinge term for each (u, v) pair, in the given order."""
    d_rec = ad.l2_distance(ad.take_rows(reprs, us), ad.take_rows(reprs, vs))
    d_tgt = np.asarray(target_dist[us, vs], dtype=np.float64)
    return ad.clip(psi * d_tgt - d_rec, 0.0, omega)


def rank_loss(reprs, targets: Sequence[LearningTarget], config: RankLossConfig,
              rng: np.random.Generator | None = None,
              peers: Sequence[Sequence[int]] | None = None) -> Tensor:
    """Sum of clipped hinge terms over every student and its sampled peers.

    ``reprs`` is a (B, d) tensor or a list of :class:`RecommendationRepr`.
    Either pass ``peers`` explicitly or an ``rng`` to draw ``config.m`` per student.
    """
    if not isinstance(reprs, Tensor):
        variants = {r.variant for r in reprs}
        if len(variants) > 1:
            raise ValueError(f"mixed representation variants {sorted(variants)}")
        reprs = ad.stack([r.vector for r in reprs])
    n = reprs.shape[0]
    if len(targets) != n:
        raise ValueError(f"{n} representations but {len(targets)} targets")
    if peers is None:
        if rng is None:
            raise ValueError("rank_loss needs either peers or an rng")
        m = min(config.m, n - 1)
        peers = [select_peers(n, u, m, rng) for u in range(n)]
    us = np.concatenate([np.full(len(p), u) for u, p in enumerate(peers)]).astype(np.intp)
    vs = np.concatenate([np.asarray(p) for p in peers]).astype(np.intp)
    if len(us) == 0:
        return Tensor(0.0)
    terms = pair_terms(reprs, target_distance_matrix(targets), us, vs, config.psi, config.omega)
    return ad.tsum(terms)


class RankingAlignment:
    """Stateful rank-loss module: owns the peer RNG and, for RAR-S, the encoder."""

    def __init__(self, variant: str, num_questions: int, config: RankLossConfig | None = None,
                 width: int = 128, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.config = config or RankLossConfig()
        ss = np.random.SeedSequence([seed, 0x52414d])
        init_seq, peer_seq = ss.spawn(2)
        self.encoder = (SequenceEncoder(num_questions, width, seed=init_seq.generate_state(1)[0])
                        if variant == "sequential" else None)
        self.rng = np.random.default_rng(peer_seq)

    def parameters(self) -> list[Parameter]:
        return [] if self.encoder is None else self.encoder.parameters()

    def represent(self, probs) -> Tensor:
        """(B, d) representations from (steps, B, |Q|) probabilities or a list of steps."""
        if self.encoder is not None:
            return self.encoder(probs)
        return additive_repr(probs).vector

    def loss(self, probs, targets: Sequence[LearningTarget]) -> Tensor:
        return rank_loss(self.represent(probs), targets, self.config, rng=self.rng)
