"""Constraint-oriented hypergraph encoder.

Pipeline per instance (``N = n + 1`` nodes, depot at row 0):

1. **Initial embedding** — the augmented feature rows go through
   separate depot/customer linear branches into a shared width ``d``,
   then batch normalization over all rows of the batch, then one
   residual graph-attention layer over the complete graph (self-loops
   included) to give ``H0``.
2. **Hyperedge selection** — a shared learned projection scores every
   node pair, ``S[i][v] = <sel(H0[i]), sel(H0[v])> / sqrt(d)`` (symmetric
   by construction).  For each *master* node ``i`` and each configured
   constraint, candidate members are the nodes ``v != i`` with
   ``S[i][v] > delta`` (strict).  The capacity constraint keeps all
   candidates and charges a soft penalty for demand overflow; the
   proximity constraint hard-filters candidates beyond a radius and
   charges the excluded fraction.
3. **Hyperedge embeddings** — each edge is the coefficient-weighted mean
   of its members' initial embeddings (master coefficient 1, members
   their selection score, everyone else 0), divided by the degree.
4. **Attention fusion** — every master attends over its hyperedges with
   multi-head attention (one ``d x d`` matrix per role, read as ``k``
   stacked ``d/k``-wide head blocks); the fused rows are the final node
   embeddings and their mean is the graph embedding.

The encoder losses (reconstruction + sparsity + constraint penalties)
are returned alongside so the trainer can step the selection/projection
parameters separately from everything else.  Selection coefficients are
*detached* on the path into the fused embeddings: reinforcement
gradients reach ``H0`` but never the selection matrix, whose only
gradient source is the reconstruction loss.  The constraint penalty is
piecewise constant in the parameters (membership is a threshold event),
so it contributes value but no gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import ContractViolation
from .instances import Instance, augment_features
from .params import ParameterStore, xavier_fill

__all__ = [
    "CONSTRAINT_KINDS", "VARIANTS", "ModelConfig",
    "EncoderParams", "build_encoder_params",
    "Hyperedge", "HyperedgeSet",
    "initial_embedding", "selection_scores", "select_candidates",
    "apply_constraint", "gat_layer",
    "EncoderLosses", "EncodedGraph", "encode_batch", "encode_one",
]

CONSTRAINT_KINDS = ("capacity", "proximity")
VARIANTS = ("full", "no_hypergraph", "no_augmentation", "no_dual_pointer")

# Initial batch-norm gain.  Downstream magnitudes compound steeply: the
# selection scores are quadratic in the embedding scale, the hyperedge
# embeddings are weighted by those raw scores, and the decoder's pointer
# products multiply two projections of the result, so unit-scale initial
# embeddings drive every fused logit into tanh saturation (+-2*clip) and
# the policy gradient to zero before training starts.  Starting the gain
# at 0.3 puts the initial logits in the linear range (|logit| ~ 3 at
# d=128) while leaving the scale fully learnable.
BN_GAIN_INIT = 0.3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by encoder and decoder."""

    hidden_dim: int = 256
    heads: int = 8
    delta: float = 0.0          # selection threshold (strict >)
    lam: float = 0.2            # L2 sparsity weight in the reconstruction loss
    gamma: float = 1.0          # constraint-penalty weight in the total loss
    constraints: tuple[str, ...] = ("capacity",)
    r_prox: float = 0.35        # proximity constraint radius
    clip: float = 10.0          # tanh logit clipping scale in the decoder
    variant: str = "full"

    def __post_init__(self):
        if self.hidden_dim < 1 or self.heads < 1:
            raise ValueError("hidden_dim and heads must be positive")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"heads ({self.heads}) must divide hidden_dim ({self.hidden_dim})")
        if not self.constraints:
            raise ValueError("at least one constraint kind is required")
        for c in self.constraints:
            if c not in CONSTRAINT_KINDS:
                raise ValueError(f"unknown constraint kind {c!r}")
        if len(set(self.constraints)) != len(self.constraints):
            raise ValueError("duplicate constraint kinds")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def feature_widths(self) -> tuple[int, int]:
        """(depot row width, customer row width) after augmentation."""
        if self.variant == "no_augmentation":
            return (2, 3)
        return (6, 7)


@dataclass
class EncoderParams:
    """Named tensors of the encoder; the same objects live in the store."""

    ff_depot_w: Tensor
    ff_depot_b: Tensor
    ff_cust_w: Tensor
    ff_cust_b: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_running: RunningStats
    gat_w: Tensor
    gat_a_src: Tensor
    gat_a_dst: Tensor
    sel: Tensor | None = None    # hyperedge selection projection ("hg" group)
    proj: Tensor | None = None   # reconstruction projection ("hg" group)
    mha_q: Tensor | None = None
    mha_k: Tensor | None = None
    mha_v: Tensor | None = None
    gat2_w: Tensor | None = None     # no_hypergraph variant only
    gat2_a_src: Tensor | None = None
    gat2_a_dst: Tensor | None = None


def build_encoder_params(store: ParameterStore, cfg: ModelConfig,
                         rng: np.random.Generator) -> EncoderParams:
    """Create and register all encoder parameters (fixed draw order)."""
    d = cfg.hidden_dim
    wd, wc = cfg.feature_widths

    def p(name, shape, group="rl"):
        return store.add(name, xavier_fill(shape, rng), group)

    out = EncoderParams(
        ff_depot_w=p("enc.ff_depot.w", (wd, d)),
        ff_depot_b=store.add("enc.ff_depot.b", np.zeros(d), "rl"),
        ff_cust_w=p("enc.ff_cust.w", (wc, d)),
        ff_cust_b=store.add("enc.ff_cust.b", np.zeros(d), "rl"),
        bn_gamma=store.add("enc.bn.gamma", np.full(d, BN_GAIN_INIT), "rl"),
        bn_beta=store.add("enc.bn.beta", np.zeros(d), "rl"),
        bn_running=RunningStats(d),
        gat_w=p("enc.gat.w", (d, d)),
        gat_a_src=p("enc.gat.a_src", (d,)),
        gat_a_dst=p("enc.gat.a_dst", (d,)),
    )
    if cfg.variant == "no_hypergraph":
        out.gat2_w = p("enc.gat2.w", (d, d))
        out.gat2_a_src = p("enc.gat2.a_src", (d,))
        out.gat2_a_dst = p("enc.gat2.a_dst", (d,))
    else:
        out.sel = p("enc.sel", (d, d), group="hg")
        out.proj = p("enc.proj", (d, d), group="hg")
        out.mha_q = p("enc.mha.q", (d, d))
        out.mha_k = p("enc.mha.k", (d, d))
        out.mha_v = p("enc.mha.v", (d, d))
    return out


# ---------------------------------------------------------------------------
# Stage 1: initial embedding
# ---------------------------------------------------------------------------

def _feature_rows(inst: Instance, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.variant == "no_augmentation":
        depot = np.asarray(inst.depot, dtype=np.float64)
        cust = np.concatenate(
            [inst.customers, (inst.demands / inst.capacity)[:, None]], axis=1)
        return depot, cust
    feats = augment_features(inst)
    return feats.depot_row, feats.customer_rows


def gat_layer(h: Tensor, w: Tensor, a_src: Tensor, a_dst: Tensor) -> Tensor:
    """One residual graph-attention layer over the complete graph.

    Additive attention scores ``LeakyReLU(a_src . Wh_i + a_dst . Wh_j)``
    are row-softmaxed over all nodes (self-loop included); the attended
    mix of transformed rows is added back onto the input.
    """
    n = h.shape[0]
    wh = ad.matmul(h, w)
    s_src = ad.reshape(ad.matmul(wh, a_src), (n, 1))
    s_dst = ad.reshape(ad.matmul(wh, a_dst), (1, n))
    scores = ad.leaky_relu(ad.add(s_src, s_dst), slope=0.2)
    attn = ad.masked_softmax(scores, axis=-1)
    return ad.add(h, ad.matmul(attn, wh))


def initial_embedding(instances: list[Instance], params: EncoderParams,
                      cfg: ModelConfig, training: bool = True,
                      update_running: bool = False) -> list[Tensor]:
    """Branch feed-forward + shared batch norm + graph attention.

    Batch normalization runs over the stacked rows of every instance in
    the batch (training mode) or the stored running statistics (eval
    mode); ``update_running`` folds the batch statistics into the
    running buffers.
    """
    raw: list[Tensor] = []
    sizes: list[int] = []
    for inst in instances:
        depot_row, cust_rows = _feature_rows(inst, cfg)
        dep = ad.add(ad.matmul(Tensor(depot_row[None, :]), params.ff_depot_w),
                     params.ff_depot_b)
        cus = ad.add(ad.matmul(Tensor(cust_rows), params.ff_cust_w),
                     params.ff_cust_b)
        rows = ad.concat([dep, cus], axis=0)
        raw.append(rows)
        sizes.append(rows.shape[0])
    stacked = ad.concat(raw, axis=0) if len(raw) > 1 else raw[0]
    normed = ad.batch_norm(stacked, params.bn_gamma, params.bn_beta,
                           running=params.bn_running, training=training,
                           update_running=update_running)
    pieces = ad.split(normed, sizes, axis=0) if len(raw) > 1 else [normed]
    return [gat_layer(piece, params.gat_w, params.gat_a_src, params.gat_a_dst)
            for piece in pieces]


# ---------------------------------------------------------------------------
# Stage 2: hyperedge selection and constraints
# ---------------------------------------------------------------------------

def selection_scores(h0: Tensor, sel: Tensor) -> Tensor:
    """Pairwise selection scores ``S = P P^T / sqrt(d)`` with
    ``P = H0 @ sel``.  Symmetric; the diagonal is present but ignored by
    selection (the master joins its own edge by rule, coefficient 1)."""
    d = h0.shape[1]
    p = ad.matmul(h0, sel)
    return ad.scale(ad.matmul(p, ad.transpose(p)), 1.0 / math.sqrt(d))


def select_candidates(scores: np.ndarray, delta: float) -> list[np.ndarray]:
    """Per master ``i``: indices ``v != i`` with ``scores[i, v] > delta``
    (strict), ascending."""
    n = scores.shape[0]
    out = []
    for i in range(n):
        mask = scores[i] > delta
        mask[i] = False
        out.append(np.flatnonzero(mask))
    return out


@dataclass(frozen=True)
class Hyperedge:
    """One constraint-oriented hyperedge, for inspection and tests.

    ``members`` lists the master first, then candidate members
    ascending; ``coefficients`` aligns with it (the master's is exactly
    1, members carry their selection score).  ``degree`` counts all
    members including the master.
    """

    master: int
    constraint: str
    members: tuple[int, ...]
    coefficients: tuple[float, ...]
    degree: int
    penalty: float


@dataclass(frozen=True)
class HyperedgeSet:
    """All hyperedges of one instance, constraint-major, masters ascending."""

    edges: tuple[Hyperedge, ...]
    node_count: int
    constraints: tuple[str, ...]

    def edges_for(self, constraint: str) -> list[Hyperedge]:
        return [e for e in self.edges if e.constraint == constraint]

    def mean_degree(self) -> float:
        if not self.edges:
            return 0.0
        return float(np.mean([e.degree for e in self.edges]))

    def total_penalty(self) -> float:
        return float(sum(e.penalty for e in self.edges))


def apply_constraint(kind: str, master: int, candidates: np.ndarray,
                     inst: Instance, r_prox: float = 0.35) -> tuple[np.ndarray, float]:
    """Resolve one constraint for one master: the final members
    (excluding the master, ascending) and the penalty.

    * ``capacity`` keeps every candidate; the penalty is the relative
      demand overflow ``max(0, (q(master) + sum q(members) - Q) / Q)``
      — soft, so an overloaded neighborhood still forms an edge.
    * ``proximity`` hard-filters candidates farther than ``r_prox`` from
      the master; the penalty is the excluded fraction of the candidate
      set (0 when there were no candidates).
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if kind == "capacity":
        total = inst.demand_of(master) + sum(inst.demand_of(int(v)) for v in candidates)
        overflow = max(0.0, (total - inst.capacity) / inst.capacity)
        return candidates, overflow
    if kind == "proximity":
        if candidates.size == 0:
            return candidates, 0.0
        coords = inst.coords()
        d = np.hypot(coords[candidates, 0] - coords[master, 0],
                     coords[candidates, 1] - coords[master, 1])
        keep = candidates[d <= r_prox]
        excluded = candidates.size - keep.size
        return keep, excluded / candidates.size
    raise ValueError(f"unknown constraint kind {kind!r}")


def build_hyperedges(scores: np.ndarray, inst: Instance,
                     cfg: ModelConfig) -> HyperedgeSet:
    """Materialize every (master, constraint) hyperedge from the score
    matrix.  Pure numpy on detached scores; the differentiable path is
    reconstructed from the membership masks in :func:`encode_batch`."""
    n_nodes = inst.n + 1
    if scores.shape != (n_nodes, n_nodes):
        raise ContractViolation(
            f"score matrix {scores.shape} does not match {n_nodes} nodes")
    candidates = select_candidates(scores, cfg.delta)
    edges: list[Hyperedge] = []
    for kind in cfg.constraints:
        for master in range(n_nodes):
            members, penalty = apply_constraint(kind, master, candidates[master],
                                                inst, r_prox=cfg.r_prox)
            coeffs = (1.0, *(float(scores[master, v]) for v in members))
            edges.append(Hyperedge(
                master=master, constraint=kind,
                members=(master, *(int(v) for v in members)),
                coefficients=coeffs,
                degree=1 + len(members),
                penalty=float(penalty),
            ))
    return HyperedgeSet(edges=tuple(edges), node_count=n_nodes,
                        constraints=tuple(cfg.constraints))


def _membership_masks(hyperedges: HyperedgeSet) -> list[np.ndarray]:
    """One 0/1 matrix per constraint: ``M[i, v] = 1`` iff ``v`` is a
    non-master member of master ``i``'s edge."""
    n = hyperedges.node_count
    masks = []
    for kind in hyperedges.constraints:
        m = np.zeros((n, n))
        for edge in hyperedges.edges_for(kind):
            for v in edge.members[1:]:
                m[edge.master, v] = 1.0
        masks.append(m)
    return masks


# ---------------------------------------------------------------------------
# Stage 3/4: losses, hyperedge embeddings, attention fusion
# ---------------------------------------------------------------------------

@dataclass
class EncoderLosses:
    """Encoder loss terms for one instance (tensors share one graph).

    ``total`` is what the per-epoch update differentiates:
    reconstruction + sparsity + gamma * constraint penalty.  The penalty
    term is piecewise constant (membership is a threshold event), so it
    enters as a constant tensor: full value, zero gradient.
    """

    node: Tensor
    rec: Tensor
    con: Tensor
    total: Tensor


def _zero_losses() -> EncoderLosses:
    z = Tensor(np.float64(0.0))
    return EncoderLosses(node=z, rec=z, con=z, total=z)


@dataclass
class EncodedGraph:
    """Everything the decoder and trainer need for one instance."""

    inst: Instance
    h0: Tensor               # (N, d) initial embeddings
    h: Tensor                # (N, d) fused node embeddings
    graph_emb: Tensor        # (d,) mean of fused rows
    hyperedges: HyperedgeSet
    losses: EncoderLosses
    # one (N, d) matrix per constraint: row i is master i's hyperedge
    # embedding (coefficient-weighted member mean, coefficients detached)
    edge_embeddings: tuple[Tensor, ...] = ()


def _hypergraph_stage(h0: Tensor, inst: Instance, params: EncoderParams,
                      cfg: ModelConfig) -> EncodedGraph:
    n_nodes = inst.n + 1
    d = cfg.hidden_dim
    scores = selection_scores(h0, params.sel)
    hyperedges = build_hyperedges(scores.data, inst, cfg)
    masks = _membership_masks(hyperedges)
    eye = Tensor(np.eye(n_nodes))

    proj_all = ad.matmul(h0, params.proj)            # (N, d)
    node_terms: list[Tensor] = []
    masked_list: list[Tensor] = []
    edge_embeds: list[Tensor] = []
    for mask in masks:
        sm = ad.mul(scores, Tensor(mask))            # member coefficients
        coeff = ad.add(sm, eye)                      # + master coefficient 1
        recon = ad.matmul(coeff, h0)                 # sum of coeff-weighted rows
        residual = ad.sub(proj_all, recon)
        node_terms.append(ad.asum(ad.l2_norm_rows(residual)))
        masked_list.append(sm)
        # decoder-path edge embeddings: coefficients detached, mean over
        # the degree (members + master)
        degrees = mask.sum(axis=1) + 1.0
        coeff_const = Tensor(scores.data * mask + np.eye(n_nodes))
        edge = ad.mul(ad.matmul(coeff_const, h0), Tensor(1.0 / degrees[:, None]))
        edge_embeds.append(edge)

    l_node = node_terms[0]
    for t in node_terms[1:]:
        l_node = ad.add(l_node, t)
    coeff_stack = ad.stack(masked_list, axis=0)
    l_rec = ad.add(l_node, ad.add(ad.l1_norm(coeff_stack),
                                  ad.scale(ad.l2_norm(coeff_stack), cfg.lam)))
    l_con = Tensor(np.float64(hyperedges.total_penalty()))
    l_total = ad.add(l_rec, ad.scale(l_con, cfg.gamma))

    fused = _mha_fuse(h0, edge_embeds, params, cfg)
    graph_emb = ad.mean_over_rows(fused)
    return EncodedGraph(
        inst=inst, h0=h0, h=fused, graph_emb=graph_emb,
        hyperedges=hyperedges,
        losses=EncoderLosses(node=l_node, rec=l_rec, con=l_con, total=l_total),
        edge_embeddings=tuple(edge_embeds),
    )


def _mha_fuse(h0: Tensor, edge_embeds: list[Tensor], params: EncoderParams,
              cfg: ModelConfig, return_weights: bool = False):
    """Multi-head attention of each master over its hyperedge embeddings.

    The three ``d x d`` projections are read as ``k`` stacked head
    blocks of width ``d/k``; per head, the master's query attends over
    the ``m`` edges and mixes their value projections; head outputs are
    concatenated (no residual).
    """
    n = h0.shape[0]
    d = cfg.hidden_dim
    k = cfg.heads
    dk = d // k
    m = len(edge_embeds)
    q = ad.reshape(ad.matmul(h0, params.mha_q), (n, k, dk))
    compat: list[Tensor] = []
    values: list[Tensor] = []
    for e in edge_embeds:
        ke = ad.reshape(ad.matmul(e, params.mha_k), (n, k, dk))
        ve = ad.reshape(ad.matmul(e, params.mha_v), (n, k, dk))
        compat.append(ad.scale(ad.asum(ad.mul(q, ke), axis=2), 1.0 / math.sqrt(dk)))
        values.append(ve)
    u = ad.stack(compat, axis=1)                 # (N, m, k)
    w = ad.masked_softmax(u, axis=1)             # attention over edges
    v = ad.stack(values, axis=1)                 # (N, m, k, dk)
    mixed = ad.asum(ad.mul(ad.reshape(w, (n, m, k, 1)), v), axis=1)
    fused = ad.reshape(mixed, (n, d))
    if return_weights:
        return fused, w
    return fused


def encode_batch(instances: list[Instance], params: EncoderParams,
                 cfg: ModelConfig, training: bool = True,
                 update_running: bool = False) -> list[EncodedGraph]:
    """Encode a batch of instances (batch norm couples them in training
    mode; everything else is per-instance)."""
    h0_list = initial_embedding(instances, params, cfg, training=training,
                                update_running=update_running)
    out: list[EncodedGraph] = []
    for inst, h0 in zip(instances, h0_list):
        if cfg.variant == "no_hypergraph":
            h = gat_layer(h0, params.gat2_w, params.gat2_a_src, params.gat2_a_dst)
            out.append(EncodedGraph(
                inst=inst, h0=h0, h=h, graph_emb=ad.mean_over_rows(h),
                hyperedges=HyperedgeSet(edges=(), node_count=inst.n + 1,
                                        constraints=()),
                losses=_zero_losses(),
            ))
        else:
            out.append(_hypergraph_stage(h0, inst, params, cfg))
    return out


def encode_one(inst: Instance, params: EncoderParams, cfg: ModelConfig,
               training: bool = True, update_running: bool = False) -> EncodedGraph:
    return encode_batch([inst], params, cfg, training=training,
                        update_running=update_running)[0]
