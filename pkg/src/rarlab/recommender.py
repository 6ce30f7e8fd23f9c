"""Attention-based question recommender.

Pipeline per step, for a batch of students::

    E      = f_e(one_hot(Q))                      question embeddings, |Q| x d_e
    R      = Attn(f_r(E), E, E) ++ f_r(E)         attentive reprs, |Q| x d_r
    a      = pool(R[target])                      target repr
    h      = GRU over f_v(e_q ++ y) for the history
    s      = f_1(r_prev) + f_2(a) + f_3(h)
    p      = softmax(f_p(s))

``R``, ``f_1(R)`` and ``f_2(a)`` depend only on parameters and targets, so a
rollout computes them once per episode batch (see :meth:`Recommender.begin`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .domain import HistoricalRecord, LearningTarget


_KT_EPS = float(np.finfo(np.float64).eps)


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)), f"{name}.weight")
        self.bias = Parameter(rng.uniform(-bound, bound, n_out), f"{name}.bias") if bias else None

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class GRU:
    """Gated recurrent cell with a learned initial state."""

    def __init__(self, name: str, n_in: int, n_hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_hidden)
        self.w_x = Parameter(rng.uniform(-bound, bound, (n_in, 3 * n_hidden)), f"{name}.w_x")
        self.w_h = Parameter(rng.uniform(-bound, bound, (n_hidden, 3 * n_hidden)), f"{name}.w_h")
        self.b_x = Parameter(rng.uniform(-bound, bound, 3 * n_hidden), f"{name}.b_x")
        self.b_h = Parameter(rng.uniform(-bound, bound, 3 * n_hidden), f"{name}.b_h")
        self.h0 = Parameter(np.zeros(n_hidden), f"{name}.h0")
        self.calls = 0

    @property
    def hidden_size(self) -> int:
        return self.h0.shape[0]

    def cell(self, x, h) -> Tensor:
        self.calls += 1
        return ad.gru_cell(x, h, self.w_x, self.w_h, self.b_x, self.b_h)

    def project(self, x) -> Tensor:
        """Input-side gate pre-activations ``x @ w_x + b_x``."""
        return ad.linear(x, self.w_x, self.b_x)

    def step(self, gx, h) -> Tensor:
        self.calls += 1
        return ad.gru_step(gx, h, self.w_h, self.b_h)

    def run(self, xs: Sequence) -> Tensor:
        h = self.h0
        for x in xs:
            h = self.cell(x, h)
        return h

    def parameters(self) -> list[Parameter]:
        return [self.w_x, self.w_h, self.b_x, self.b_h, self.h0]


@dataclass
class EpisodeState:
    """Batched per-episode tensors threaded through a rollout."""

    E: Tensor            # question embeddings
    R: Tensor            # attentive question representations
    prev_proj: Tensor    # f_1 applied to every row of R
    start_proj: Tensor   # f_1 applied to the start token
    target_proj: Tensor  # f_2(a), one row per student
    h: Tensor            # history representation, one row per student
    gates: Tensor        # GRU input projection for every (question, correctness) pair
    prev: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.target_proj.shape[0]


class Recommender:
    def __init__(self, num_questions: int, d_e: int = 48, d_r: int = 128, d_h: int = 128,
                 d_v: int = 128, d_s: int = 128, heads: int = 1, target_pool: str = "mean",
                 seed: int = 0):
        if d_r % 2:
            raise ValueError("d_r must be even: it holds two concatenated halves")
        if target_pool not in ("mean", "attention"):
            raise ValueError(f"target_pool must be 'mean' or 'attention', got {target_pool!r}")
        rng = np.random.default_rng(seed)
        self.num_questions = num_questions
        self.dims = dict(d_e=d_e, d_r=d_r, d_h=d_h, d_v=d_v, d_s=d_s)
        self.heads = heads
        self.target_pool = target_pool
        half = d_r // 2
        self.f_e = Linear("f_e", num_questions, d_e, rng)
        self.f_r = Linear("f_r", d_e, half, rng)
        self.attn_q = Linear("attn.query", half, half, rng)
        self.attn_k = Linear("attn.key", d_e, half, rng)
        self.attn_v = Linear("attn.value", d_e, half, rng)
        self.f_v = Linear("f_v", d_e + 1, d_v, rng)
        self.sem = GRU("sem", d_v, d_h, rng)
        self.start = Parameter(rng.uniform(-0.1, 0.1, d_r), "start")
        self.f_1 = Linear("f_1", d_r, d_s, rng)
        self.f_2 = Linear("f_2", d_r, d_s, rng)
        self.f_3 = Linear("f_3", d_h, d_s, rng)
        self.f_p = Linear("f_p", d_s, num_questions, rng)
        self.f_k = Linear("f_k", d_h, 1, rng)
        self.pool_query = (Parameter(rng.uniform(-0.1, 0.1, d_r), "pool.query")
                           if target_pool == "attention" else None)

    # parameters and checkpoints

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for layer in (self.f_e, self.f_r, self.attn_q, self.attn_k, self.attn_v, self.f_v,
                      self.sem):
            params += layer.parameters()
        params.append(self.start)
        for layer in (self.f_1, self.f_2, self.f_3, self.f_p, self.f_k):
            params += layer.parameters()
        if self.pool_query is not None:
            params.append(self.pool_query)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(
                    f"checkpoint mismatch for {name}: file has shape {state[name].shape}, "
                    f"model expects {p.shape}"
                )
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float64)

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> Recommender:
        num_questions, d_e = state["f_e.weight"].shape
        model = cls(
            num_questions,
            d_e=d_e,
            d_r=state["start"].shape[0],
            d_h=state["sem.h0"].shape[0],
            d_v=state["f_v.weight"].shape[1],
            d_s=state["f_1.weight"].shape[1],
            target_pool="attention" if "pool.query" in state else "mean",
        )
        model.load_state_dict(state)
        return model

    # encoders

    def question_embeddings(self) -> Tensor:
        # f_e(one_hot(q)) for every q at once: the one-hot matrix is the identity
        return ad.add(self.f_e.weight, self.f_e.bias)

    def encode_question(self, q: int) -> Tensor:
        onehot = np.zeros(self.num_questions)
        onehot[q] = 1.0
        return self.f_e(onehot)

    def question_reprs(self, E: Tensor | None = None) -> Tensor:
        E = self.question_embeddings() if E is None else E
        proj = self.f_r(E)
        attended = ad.scaled_dot_product_attention(
            self.attn_q(proj), self.attn_k(E), self.attn_v(E), heads=self.heads)
        return ad.concat([attended, proj], axis=-1)

    def attentive_representation(self, q: int) -> Tensor:
        E = self.question_embeddings()
        proj = self.f_r(ad.reshape(self.encode_question(q), (1, -1)))
        attended = ad.scaled_dot_product_attention(
            self.attn_q(proj), self.attn_k(E), self.attn_v(E), heads=self.heads)
        return ad.concat([attended, proj], axis=-1)[0]

    def _pool(self, R: Tensor, indicator: np.ndarray) -> Tensor:
        """Pool rows of R for each student; ``indicator`` is (B, |Q|) 0/1."""
        if self.pool_query is None:
            weights = indicator / indicator.sum(axis=1, keepdims=True)
            return ad.matmul(Tensor(weights), R)
        scores = ad.matmul(R, ad.reshape(self.pool_query, (-1, 1)))
        scores = ad.reshape(scores, (1, -1)) * (1.0 / np.sqrt(R.shape[1]))
        masked = scores + Tensor(np.where(indicator > 0, 0.0, -1e30))
        return ad.matmul(ad.softmax(masked, axis=-1), R)

    def encode_target(self, target: LearningTarget, R: Tensor | None = None) -> Tensor:
        if not target:
            raise ValueError("cannot encode an empty learning target")
        R = self.question_reprs() if R is None else R
        return self._pool(R, target.indicator(self.num_questions)[None, :])[0]

    def history_input(self, E: Tensor, questions, correctness) -> Tensor:
        e = ad.take_rows(E, np.asarray(questions))
        y = np.asarray(correctness, dtype=np.float64).reshape(-1, 1)
        return self.f_v(ad.concat([e, Tensor(y)], axis=-1))

    def history_gates(self, E: Tensor) -> Tensor:
        """GRU input projections for all 2|Q| interactions; row ``q + |Q| * y``."""
        Q = self.num_questions
        e = ad.concat([E, E], axis=0)
        y = np.repeat([0.0, 1.0], Q).reshape(-1, 1)
        return self.sem.project(self.f_v(ad.concat([e, Tensor(y)], axis=-1)))

    def encode_history(self, record: HistoricalRecord, E: Tensor | None = None) -> Tensor:
        if len(record) == 0:
            return self.sem.h0
        E = self.question_embeddings() if E is None else E
        v = self.history_input(E, record.questions, record.correctness)
        h = self.sem.h0
        for i in range(len(record)):
            h = self.sem.cell(v[i:i + 1], h)
        return h[0]

    def blend_state(self, prev_q: int | None, a: Tensor, h: Tensor,
                    R: Tensor | None = None) -> Tensor:
        if prev_q is None:
            r_prev = self.start
        else:
            R = self.question_reprs() if R is None else R
            r_prev = R[prev_q]
        return self.f_1(r_prev) + self.f_2(a) + self.f_3(h)

    def logits(self, s: Tensor) -> Tensor:
        return self.f_p(s)

    def policy(self, s: Tensor) -> Tensor:
        return ad.softmax(self.f_p(s), axis=-1)

    def kt_logit(self, h: Tensor) -> Tensor:
        return self.f_k(h)

    def predict_correctness(self, h: Tensor) -> Tensor:
        return ad.reshape(self._kt(self.f_k(h)), h.shape[:-1])

    @staticmethod
    def _kt(logit: Tensor) -> Tensor:
        # float64 sigmoid rounds to exactly 0 or 1 beyond |x| ~ 37; keep it strictly inside
        return ad.clip(ad.sigmoid(logit), _KT_EPS, 1.0 - _KT_EPS)

    def forward(self, record: HistoricalRecord, target: LearningTarget) -> Tensor:
        """Probability vector for one student."""
        E = self.question_embeddings()
        R = self.question_reprs(E)
        a = self.encode_target(target, R)
        h = self.encode_history(record, E)
        return self.policy(self.blend_state(record.last_question, a, h, R))

    # batched rollout path

    def begin(self, targets: Sequence[LearningTarget]) -> EpisodeState:
        E = self.question_embeddings()
        R = self.question_reprs(E)
        indicator = np.stack([t.indicator(self.num_questions) for t in targets])
        A = self._pool(R, indicator)
        h = self.sem.h0 + Tensor(np.zeros((len(targets), self.sem.hidden_size)))
        return EpisodeState(E=E, R=R, prev_proj=self.f_1(R), start_proj=self.f_1(self.start),
                            target_proj=self.f_2(A), h=h, gates=self.history_gates(E))

    def state(self, ep: EpisodeState) -> Tensor:
        prev = ep.start_proj if ep.prev is None else ad.take_rows(ep.prev_proj, ep.prev)
        return ep.target_proj + prev + self.f_3(ep.h)

    def advance(self, ep: EpisodeState, questions: np.ndarray, correctness: np.ndarray) -> None:
        rows = np.asarray(questions) + self.num_questions * np.asarray(correctness)
        ep.h = self.sem.step(ad.take_rows(ep.gates, rows), ep.h)
        ep.prev = np.asarray(questions, dtype=np.intp)


    def replay(self, targets: Sequence[LearningTarget], questions: np.ndarray,
               correctness: np.ndarray) -> Replay:
        """Recompute a finished batch of episodes as one differentiable graph.

        ``questions`` and ``correctness`` are (B, steps). Step ``t`` sees the
        first ``t`` interactions, exactly as in the step-by-step rollout.
        """
        questions = np.asarray(questions, dtype=np.intp)
        correctness = np.asarray(correctness, dtype=np.intp)
        B, n = questions.shape
        Q, H = self.num_questions, self.sem.hidden_size
        ep = self.begin(targets)
        h_first = ad.reshape(ep.h, (1, B, H))
        if n > 1:
            rows = (questions[:, :-1] + Q * correctness[:, :-1]).T.ravel()
            gx = ad.reshape(ad.take_rows(ep.gates, rows), (n - 1, B, 3 * H))
            later = ad.gru_sequence(gx, ep.h, self.sem.w_h, self.sem.b_h)
            hidden = ad.reshape(ad.concat([h_first, later], axis=0), (n * B, H))
        else:
            hidden = ad.reshape(h_first, (B, H))
        # row Q of the table is the start token, used at t = 0
        table = ad.concat([ep.prev_proj, ad.reshape(ep.start_proj, (1, -1))], axis=0)
        prev_idx = np.concatenate([np.full(B, Q), questions[:, :-1].T.ravel()])
        d_s = table.shape[1]
        s = (ad.reshape(ad.take_rows(table, prev_idx), (n, B, d_s)) + ep.target_proj
             + ad.reshape(self.f_3(hidden), (n, B, d_s)))
        flat = ad.reshape(s, (n * B, d_s))
        kt = ad.reshape(self._kt(self.f_k(hidden)), (n, B))
        return Replay(states=s, logits=ad.reshape(self.f_p(flat), (n, B, Q)), kt_preds=kt)


@dataclass
class Replay:
    """Differentiable per-step outputs of a replayed batch, all leading (steps, B)."""

    states: Tensor
    logits: Tensor
    kt_preds: Tensor


def sample_action(p, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of one index from probability vector ``p``."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(p) - 1)


def sample_actions(P, rng: np.random.Generator) -> np.ndarray:
    """Row-wise inverse-CDF draws from a (B, |Q|) probability matrix."""
    P = P.data if isinstance(P, Tensor) else np.asarray(P)
    cdf = np.cumsum(P, axis=1)
    u = rng.random(P.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, P.shape[1] - 1)
