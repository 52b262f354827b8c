"""Dual-pointer route construction on top of the encoded graph.

The decoder builds one tour autoregressively.  At every step it forms
two context vectors from the graph embedding — one anchored at the
current position, one at the running sum of everything visited so far —
and turns each into a pointer over the nodes.  The two pointer scores
are squashed to ``[-clip, +clip]`` and added, so a single fused logit
never leaves ``[-2*clip, +2*clip]``.  Infeasible nodes are masked to
probability exactly zero.

Feasibility bookkeeping is integral: remaining vehicle capacity is an
``int`` that decreases by each served demand and resets at the depot,
so "demand fits" comparisons are exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import reduce

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncodedGraph, ModelConfig
from .errors import ContractViolation, MalformedSolutionError
from .params import ParameterStore, xavier_fill
from .routes import Solution

__all__ = [
    "DecodeState",
    "DecoderParams",
    "Rollout",
    "StepDistribution",
    "StepTrace",
    "build_decoder_params",
    "feasible_mask",
    "initial_state",
    "is_finished",
    "rollout",
    "step",
    "step_distribution",
    "trajectory_log_prob",
]


@dataclass
class DecoderParams:
    """Decoder weights; the history branch is absent for the
    single-pointer variant."""

    ctx_cur_w: Tensor
    ctx_cur_b: Tensor
    ptr_cur_q: Tensor
    ptr_cur_k: Tensor
    ctx_hist_w: Tensor | None = None
    ctx_hist_b: Tensor | None = None
    ptr_hist_q: Tensor | None = None
    ptr_hist_k: Tensor | None = None

    @property
    def dual(self) -> bool:
        return self.ctx_hist_w is not None


def build_decoder_params(store: ParameterStore, cfg: ModelConfig,
                         rng: np.random.Generator) -> DecoderParams:
    """Register decoder weights (all policy-gradient trained) and return
    typed handles.  Context layers map ``(2d+1,) -> (d,)``: graph
    embedding, anchor embedding, and the remaining-capacity fraction."""
    d = cfg.hidden_dim
    ctx_in = 2 * d + 1

    def weight(name: str, shape: tuple[int, ...]) -> Tensor:
        return store.add(name, xavier_fill(shape, rng), "rl")

    def bias(name: str, width: int) -> Tensor:
        return store.add(name, np.zeros(width), "rl")

    params = DecoderParams(
        ctx_cur_w=weight("dec.ctx_current.w", (ctx_in, d)),
        ctx_cur_b=bias("dec.ctx_current.b", d),
        ptr_cur_q=weight("dec.ptr_current.q", (d, d)),
        ptr_cur_k=weight("dec.ptr_current.k", (d, d)),
    )
    if cfg.variant != "no_dual_pointer":
        params.ctx_hist_w = weight("dec.ctx_hist.w", (ctx_in, d))
        params.ctx_hist_b = bias("dec.ctx_hist.b", d)
        params.ptr_hist_q = weight("dec.ptr_hist.q", (d, d))
        params.ptr_hist_k = weight("dec.ptr_hist.k", (d, d))
    return params


@dataclass(frozen=True)
class DecodeState:
    """Immutable snapshot of a partially built tour."""

    visited: np.ndarray        # bool (n,) — customers served so far
    current: int               # node id of the current position
    remaining: int             # integer capacity left in the vehicle
    capacity: int              # full vehicle capacity
    visits: tuple[int, ...]    # visit sequence so far, starts with 0
    hist: Tensor               # (d,) sum of embeddings of all visits
    t: int                     # decisions taken so far

    @property
    def load_fraction(self) -> float:
        """Remaining capacity as a fraction of the full vehicle."""
        return self.remaining / self.capacity


def initial_state(graph: EncodedGraph) -> DecodeState:
    """Fresh state: at the depot with a full vehicle."""
    inst = graph.inst
    return DecodeState(
        visited=np.zeros(inst.n, dtype=bool),
        current=0,
        remaining=int(inst.capacity),
        capacity=int(inst.capacity),
        visits=(0,),
        hist=ad.gather_rows(graph.h, 0),
        t=0,
    )


def is_finished(state: DecodeState) -> bool:
    """The tour is complete once every customer is served and the
    vehicle is back at the depot."""
    return bool(state.visited.all()) and state.current == 0


def feasible_mask(state: DecodeState, demands: np.ndarray) -> np.ndarray:
    """Boolean mask over node ids ``0..n``: which moves are legal now.

    A customer is legal iff unserved and its demand fits the remaining
    capacity.  The depot is legal exactly when the vehicle is away from
    it — returning is always allowed, staying (or departing into an
    empty route) never is.
    """
    mask = np.empty(len(demands) + 1, dtype=bool)
    mask[0] = state.current != 0
    mask[1:] = ~state.visited & (demands <= state.remaining)
    return mask


def step(graph: EncodedGraph, state: DecodeState, choice: int) -> DecodeState:
    """Advance by one move.  Serving a customer consumes its demand;
    touching the depot restores full capacity."""
    inst = graph.inst
    if not feasible_mask(state, inst.demands)[choice]:
        raise ContractViolation(
            f"move to node {choice} is infeasible at step {state.t}")
    if choice == 0:
        visited = state.visited
        remaining = state.capacity
    else:
        visited = state.visited.copy()
        visited[choice - 1] = True
        remaining = state.remaining - int(inst.demands[choice - 1])
    return replace(
        state,
        visited=visited,
        current=choice,
        remaining=remaining,
        visits=state.visits + (choice,),
        hist=ad.add(state.hist, ad.gather_rows(graph.h, choice)),
        t=state.t + 1,
    )


@dataclass(frozen=True)
class StepDistribution:
    """One decoding step's action distribution."""

    probs: Tensor              # (n+1,), masked entries exactly 0
    logits: Tensor             # (n+1,), fused clipped pointer scores
    mask: np.ndarray           # bool (n+1,)


class _PointerKeys:
    """Per-rollout cache of the key projections, which depend only on
    the node embeddings and can be shared across every step."""

    def __init__(self, graph: EncodedGraph, params: DecoderParams):
        self.cur = ad.matmul(graph.h, params.ptr_cur_k)
        self.hist = (ad.matmul(graph.h, params.ptr_hist_k)
                     if params.dual else None)


def _pointer_logits(ctx_in: Tensor, w: Tensor, b: Tensor, q: Tensor,
                    keys: Tensor, mask: np.ndarray, clip: float) -> Tensor:
    """One pointer branch: context projection, scaled dot scores against
    the cached keys, then a tanh squash into ``[-clip, +clip]``.
    Masked positions are pinned to ``-inf`` before the squash, which
    both saturates them at ``-clip`` and zeroes their gradient."""
    d = keys.shape[1]
    ctx = ad.add(ad.matmul(ctx_in, w), b)
    u = ad.scale(ad.matmul(keys, ad.matmul(ctx, q)), 1.0 / math.sqrt(d))
    return ad.scale(ad.tanh(ad.where_mask(u, mask, -np.inf)), clip)


def step_distribution(graph: EncodedGraph, params: DecoderParams,
                      state: DecodeState, cfg: ModelConfig,
                      keys: _PointerKeys | None = None,
                      mask: np.ndarray | None = None) -> StepDistribution:
    """Action distribution for the next move from ``state``.

    Both context vectors concatenate the graph embedding, an anchor
    embedding, and the remaining-capacity fraction.  The current-node
    branch anchors at the present position; the history branch anchors
    at the sum of everything visited so far (at the first step both
    anchors are the depot embedding).  Each branch scores nodes with a
    scaled dot pointer, is squashed to ``[-clip, clip]``, and the two
    squashed scores add, so fused logits stay within ``[-2*clip,
    +2*clip]``.  The final softmax renormalizes over legal moves only;
    illegal moves get probability exactly zero.
    """
    if keys is None:
        keys = _PointerKeys(graph, params)
    if mask is None:
        mask = feasible_mask(state, graph.inst.demands)
    if not mask.any():
        raise ContractViolation("no feasible move from this state")
    frac = Tensor(np.array([state.load_fraction]))
    ctx_cur_in = ad.concat([graph.graph_emb,
                            ad.gather_rows(graph.h, state.current), frac],
                           axis=0)
    logits = _pointer_logits(ctx_cur_in, params.ctx_cur_w, params.ctx_cur_b,
                             params.ptr_cur_q, keys.cur, mask, cfg.clip)
    if params.dual:
        ctx_hist_in = ad.concat([graph.graph_emb, state.hist, frac], axis=0)
        hist_logits = _pointer_logits(ctx_hist_in, params.ctx_hist_w,
                                      params.ctx_hist_b, params.ptr_hist_q,
                                      keys.hist, mask, cfg.clip)
        logits = ad.add(logits, hist_logits)
    probs = ad.masked_softmax(logits, mask)
    return StepDistribution(probs=probs, logits=logits, mask=mask)


@dataclass(frozen=True)
class StepTrace:
    """Diagnostic record of one decoding step."""

    mask: np.ndarray
    choice: int
    forced: bool
    probs: np.ndarray | None   # None when the step was forced
    logits: np.ndarray | None


@dataclass(frozen=True)
class Rollout:
    """A complete decoded tour with its differentiable log-probability."""

    visits: tuple[int, ...]
    log_prob: Tensor           # scalar; exactly 0.0 when every step was forced
    solution: Solution
    trace: tuple[StepTrace, ...] = ()


def _sample_choice(probs: np.ndarray, mask: np.ndarray,
                   rng: np.random.Generator) -> int:
    """Draw one legal move by inverse transform over the legal subset.
    The search index is clamped so floating-point undersum of the
    cumulative weights can never select past the last legal move."""
    valid = np.flatnonzero(mask)
    cumulative = np.cumsum(probs[valid])
    idx = int(np.searchsorted(cumulative, rng.random(), side="right"))
    return int(valid[min(idx, valid.size - 1)])


def _sum_log_terms(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(np.float64(0.0))
    return reduce(ad.add, terms)


def rollout(graph: EncodedGraph, params: DecoderParams, cfg: ModelConfig,
            mode: str = "greedy", rng: np.random.Generator | None = None,
            record_trace: bool = False) -> Rollout:
    """Decode one full tour.

    ``mode="greedy"`` takes the most probable legal move each step;
    ``mode="sampled"`` draws from the step distribution and needs
    ``rng``.  Steps with a single legal move are taken directly and
    contribute exactly 0.0 to the log-probability.  Terminates in at
    most ``2n + 1`` visits.
    """
    if mode not in ("greedy", "sampled"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "sampled" and rng is None:
        raise ValueError("sampled rollouts need an rng")
    inst = graph.inst
    state = initial_state(graph)
    keys = _PointerKeys(graph, params)
    log_terms: list[Tensor] = []
    trace: list[StepTrace] = []
    while not is_finished(state):
        # an unfinished tour has taken at most 2n - 1 moves: each route
        # serves at least one customer, so depot returns never outnumber
        # customer visits
        if state.t >= 2 * inst.n:
            raise ContractViolation("tour exceeded the visit budget")
        mask = feasible_mask(state, inst.demands)
        legal = int(mask.sum())
        if legal == 0:
            raise ContractViolation("no feasible move mid-rollout")
        if legal == 1:
            choice = int(np.flatnonzero(mask)[0])
            if record_trace:
                trace.append(StepTrace(mask=mask, choice=choice, forced=True,
                                       probs=None, logits=None))
        else:
            dist = step_distribution(graph, params, state, cfg,
                                     keys=keys, mask=mask)
            if mode == "greedy":
                choice = int(np.argmax(dist.probs.data))
            else:
                choice = _sample_choice(dist.probs.data, mask, rng)
            log_terms.append(ad.log(ad.gather_rows(dist.probs, choice)))
            if record_trace:
                trace.append(StepTrace(mask=mask, choice=choice, forced=False,
                                       probs=dist.probs.data.copy(),
                                       logits=dist.logits.data.copy()))
        state = step(graph, state, choice)
    return Rollout(
        visits=state.visits,
        log_prob=_sum_log_terms(log_terms),
        solution=Solution.from_visits(state.visits, inst),
        trace=tuple(trace),
    )


def trajectory_log_prob(graph: EncodedGraph, params: DecoderParams,
                        cfg: ModelConfig,
                        visits: tuple[int, ...]) -> Tensor:
    """Log-probability of an existing visit sequence under the current
    weights, teacher-forced.  Uses the same forced-step rule as
    ``rollout``, so replaying a rollout's visits reproduces its
    ``log_prob`` exactly."""
    if len(visits) < 3 or visits[0] != 0 or visits[-1] != 0:
        raise MalformedSolutionError(
            "a visit sequence must start and end at the depot and serve "
            "at least one customer")
    inst = graph.inst
    state = initial_state(graph)
    keys = _PointerKeys(graph, params)
    log_terms: list[Tensor] = []
    for choice in visits[1:]:
        mask = feasible_mask(state, inst.demands)
        if not mask[choice]:
            raise MalformedSolutionError(
                f"visit {choice} at step {state.t} is infeasible")
        if int(mask.sum()) > 1:
            dist = step_distribution(graph, params, state, cfg,
                                     keys=keys, mask=mask)
            log_terms.append(ad.log(ad.gather_rows(dist.probs, choice)))
        state = step(graph, state, choice)
    if not is_finished(state):
        raise MalformedSolutionError("visit sequence ends before the tour "
                                     "is complete")
    return _sum_log_terms(log_terms)
