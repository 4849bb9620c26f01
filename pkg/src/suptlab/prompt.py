"""Prompt functions applied to node features before the frozen backbone.

Variants: ``ft`` (no prompt), ``gpf`` (one shared vector), ``gpf_plus``
(bases mixed by attention on each node's own features), ``supt_soft`` and
``supt_hard`` (bases assigned by scores from normalized-adjacency
propagation; soft mixes them per node, hard gives each basis only to its
top-ranked nodes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .graph import GraphBatch, as_batch
from .numerics import (
    TUNABLE,
    ContractError,
    ParamGroup,
    ShapeError,
    Tensor,
    add_rows,
    as_tensor,
    elementwise,
    matmul,
    propagate,
    reduce,
    rng,
    row_softmax,
    segment_col_softmax,
    sigmoid,
    take_rows,
    transpose,
)

VARIANTS = ("ft", "gpf", "gpf_plus", "supt_soft", "supt_hard")
SUPT = ("supt_soft", "supt_hard")
_ALIASES = {"none": "ft", "gpf-plus": "gpf_plus", "supt-soft": "supt_soft", "supt-hard": "supt_hard"}


def canonical_variant(name: str) -> str:
    v = _ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ValueError(f"unknown prompt variant {name!r}; choose from {', '.join(VARIANTS)}")
    return v


@dataclass
class ScoreMatrix:
    alpha: Tensor
    normalized: Tensor


@dataclass
class PromptedGraph:
    base: GraphBatch
    x_star: Tensor
    scores: ScoreMatrix | None = None
    # boolean N x k membership; column j marks the nodes that received basis j
    mask: np.ndarray | None = None

    @property
    def selection(self) -> list[np.ndarray] | None:
        if self.mask is None:
            return None
        return [np.flatnonzero(self.mask[:, j]) for j in range(self.mask.shape[1])]


@dataclass
class PromptParams:
    variant: str
    k: int
    params: ParamGroup
    r: float = 0.2
    m: int = 1
    overlap_normalize: bool = False
    column_softmax: bool = False

    @classmethod
    def init(
        cls,
        variant: str,
        d: int,
        k: int = 1,
        seed: int = 0,
        r: float = 0.2,
        m: int = 1,
        overlap_normalize: bool = False,
        column_softmax: bool = False,
    ) -> "PromptParams":
        """Uniform(-1/sqrt(d), 1/sqrt(d)) initialization of every prompt tensor.

        ``b`` and GPF's ``p`` come from the same stream, so ``gpf`` and a
        ``k=1`` SUPT variant with equal seeds start from the same vector.
        """
        variant = canonical_variant(variant)
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not 0.0 < r <= 1.0:
            raise ValueError(f"pooling ratio r must lie in (0, 1], got {r}")
        if m < 1:
            raise ValueError(f"hops m must be >= 1, got {m}")
        bound = 1.0 / np.sqrt(d)
        arrays = {}
        if variant == "gpf":
            k = 1
            arrays["prompt.p"] = rng(seed, "prompt.b").uniform(-bound, bound, size=(1, d))
        elif variant != "ft":
            arrays["prompt.b"] = rng(seed, "prompt.b").uniform(-bound, bound, size=(k, d))
            if variant == "gpf_plus":
                arrays["prompt.a"] = rng(seed, "prompt.a").uniform(-bound, bound, size=(k, d))
            else:
                arrays["prompt.w"] = rng(seed, "prompt.w").uniform(-bound, bound, size=(d, k))
        return cls(variant, k, ParamGroup.from_arrays(arrays, TUNABLE), r, m, overlap_normalize, column_softmax)

    def _get(self, name):
        key = f"prompt.{name}"
        return self.params[key] if key in self.params else None

    @property
    def b(self):
        return self._get("b")

    @property
    def w(self):
        return self._get("w")

    @property
    def a(self):
        return self._get("a")

    @property
    def p(self):
        return self._get("p")

    def count(self) -> int:
        return prompt_param_count(self)

    def apply(self, g, x=None, fixed_mask: np.ndarray | None = None) -> PromptedGraph:
        """Prompted features for a graph or batch (``x`` defaults to the batch features).

        ``fixed_mask`` pins the SUPT-hard selection, e.g. while probing
        finite differences.
        """
        batch = as_batch(g)
        x = as_tensor(batch.x if x is None else x)
        v = self.variant
        if v == "ft":
            return PromptedGraph(batch, x)
        if v == "gpf":
            return PromptedGraph(batch, gpf_apply(x, self.p))
        if v == "gpf_plus":
            scores, feats = gpf_plus_apply(x, self.b, self.a)
            return PromptedGraph(batch, feats, scores)
        scores = supt_scores(x, batch, self)
        if v == "supt_soft":
            return PromptedGraph(batch, supt_soft_apply(x, scores, self.b, check=not self.column_softmax), scores)
        return supt_hard_apply(x, scores, self, batch, fixed_mask=fixed_mask)


# ------------------------------------------------------------------ GPF family


def gpf_apply(x, p) -> Tensor:
    """Add the shared vector ``p`` to every node."""
    x, p = as_tensor(x), as_tensor(p)
    if p.shape != (1, x.cols):
        raise ShapeError(f"prompt shape {p.shape} does not match feature width {x.cols}")
    return x + p


def gpf_plus_apply(x, b, a) -> tuple[ScoreMatrix, Tensor]:
    """Per-node softmax attention over bases, keyed on the node's own features."""
    x, b, a = as_tensor(x), as_tensor(b), as_tensor(a)
    if b.shape != a.shape or b.cols != x.cols:
        raise ShapeError(f"bases {b.shape} and projections {a.shape} must both be k x {x.cols}")
    logits = matmul(x, transpose(a))
    alpha = row_softmax(logits)
    return ScoreMatrix(logits, alpha), x + matmul(alpha, b)


# ------------------------------------------------------------------ SUPT


def supt_scores(x, g, params: PromptParams) -> ScoreMatrix:
    """Raw ``S^m (X (+) sum_j b_j) W`` and its normalized form.

    The projection by ``W`` is applied before propagation (same product,
    ``k`` columns propagated instead of ``d``).  For ``supt_hard`` the
    normalized matrix is the raw one; selection happens downstream.
    """
    if params.variant not in SUPT:
        raise ContractError(f"supt_scores needs a SUPT variant, got {params.variant!r}")
    if params.m < 1:
        raise ValueError(f"hops m must be >= 1, got {params.m}")
    x = as_tensor(x)
    batch = as_batch(g)
    b, w = params.b, params.w
    if b.cols != x.cols or w.rows != x.cols or w.cols != b.rows:
        raise ShapeError(f"bases {b.shape}, weights {w.shape} incompatible with features {x.shape}")
    shifted = x + reduce("sum_cols", b)
    h = matmul(shifted, w)
    w_edge, w_self = batch.gcn_weights
    for _ in range(params.m):
        h = propagate(h, batch.src, batch.dst, w_edge, w_self)
    if params.variant == "supt_hard":
        return ScoreMatrix(h, h)
    if params.column_softmax:
        return ScoreMatrix(h, segment_col_softmax(h, batch.ptr))
    return ScoreMatrix(h, row_softmax(h))


def supt_soft_apply(x, scores: ScoreMatrix, b, check: bool = True) -> Tensor:
    """``x_i + sum_j normalized_ij b_j``."""
    x, b = as_tensor(x), as_tensor(b)
    s = scores.normalized
    if check:
        dev = np.abs(s.data.sum(axis=1) - 1.0).max(initial=0.0)
        if dev > 1e-9:
            raise ContractError(f"soft scores must be row-normalized (max row-sum error {dev:.2e})")
    return x + matmul(s, b)


def top_rank(column, count: int) -> np.ndarray:
    """Indices of the ``count`` largest entries, ties to the smaller index, ascending."""
    col = np.asarray(column, dtype=np.float64).reshape(-1)
    if not 1 <= count <= col.size:
        raise ValueError(f"count must be in [1, {col.size}], got {count}")
    order = np.argsort(-col, kind="stable")
    return np.sort(order[:count])


def supt_hard_apply(x, scores: ScoreMatrix, params: PromptParams, g=None, fixed_mask=None) -> PromptedGraph:
    """Each basis goes to its top ``ceil(r N)`` nodes, gated by ``sigmoid(alpha)``.

    Selection is constant with respect to differentiation; the gate carries
    the gradient.  Rows chosen by no basis are copied bit for bit.
    """
    if params.variant != "supt_hard":
        raise ContractError(f"supt_hard_apply needs variant supt_hard, got {params.variant!r}")
    x = as_tensor(x)
    # without a graph the rows form one segment
    base = as_batch(g) if g is not None else None
    ptr = base.ptr if base is not None else np.array([0, x.rows], dtype=np.int64)
    alpha = scores.alpha
    if fixed_mask is None:
        mask = _kernels.segment_topk_mask(np.ascontiguousarray(alpha.data), ptr, float(params.r))
    else:
        mask = np.asarray(fixed_mask, dtype=bool)
    weight = mask.astype(np.float64)
    hits = mask.sum(axis=1)
    if params.overlap_normalize:
        weight = weight / np.maximum(hits, 1)[:, None]
    gate = elementwise("mul", sigmoid(alpha), Tensor.wrap(weight))
    delta = matmul(gate, params.b)
    return PromptedGraph(base, add_rows(x, delta, hits > 0), scores, mask)


def aux_link_loss(g, scores: ScoreMatrix) -> Tensor:
    """``||A - a a^T||_F`` with the loopless adjacency and normalized scores.

    For a batch, the per-graph norms are averaged.
    """
    batch = as_batch(g)
    s = scores.normalized
    total = None
    for gi, graph in enumerate(batch.graphs):
        lo, hi = batch.ptr[gi], batch.ptr[gi + 1]
        part = s if batch.num_graphs == 1 else take_rows(s, np.arange(lo, hi))
        resid = Tensor.wrap(graph.adjacency()) - matmul(part, transpose(part))
        norm = reduce("frobenius", resid)
        total = norm if total is None else total + norm
    if batch.num_graphs > 1:
        total = total * (1.0 / batch.num_graphs)
    return total


def prompt_param_count(params: PromptParams) -> int:
    """Tuned prompt entries: d for GPF, 2kd for GPF-plus and both SUPT variants."""
    return params.params.count("all")


def expected_param_count(variant: str, d: int, k: int = 1) -> int:
    variant = canonical_variant(variant)
    if variant == "ft":
        return 0
    if variant == "gpf":
        return d
    return 2 * k * d
