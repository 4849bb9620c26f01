"""Small self-supervised objectives that give a backbone non-trivial weights.

These are stand-ins for the published strategies, not reimplementations:
edge prediction with uniform negatives, attribute masking with zero
replacement, and a node-vs-graph mutual-information discriminator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, Checkpoint, GinConfig, backbone_forward, readout
from .graph import Dataset, Graph, GraphBatch, as_batch
from .numerics import (
    FROZEN,
    TUNABLE,
    AdamState,
    GradTape,
    NumericError,
    ParamGroup,
    Tensor,
    adam_step,
    backward,
    elementwise,
    matmul,
    reduce,
    rng,
    softplus,
    take_rows,
    transpose,
)

log = logging.getLogger(__name__)

TASKS = ("edgepred", "attrmask", "infomax")


class PretrainError(RuntimeError):
    """Pre-training cannot proceed on the given input."""


@dataclass(frozen=True)
class PretrainConfig:
    task: str = "edgepred"
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.0
    mask_fraction: float = 0.15
    negative_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"pretrain task must be one of {', '.join(TASKS)}, got {self.task!r}")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must lie in (0, 1)")
        if self.negative_ratio <= 0:
            raise ValueError("negative_ratio must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _bce_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    per = softplus(logits) - elementwise("mul", logits, Tensor.wrap(targets))
    return reduce("sum_all", per) * (1.0 / logits.data.size)


def _non_edges(g: Graph) -> np.ndarray:
    a = g.adjacency()
    iu, iv = np.triu_indices(g.num_nodes, 1)
    keep = a[iu, iv] == 0
    return np.stack([iu[keep], iv[keep]], axis=1)


def _edge_pairs(batch: GraphBatch, gen: np.random.Generator, negative_ratio: float):
    pos, neg = [], []
    for gi, g in enumerate(batch.graphs):
        if not g.edges.size:
            continue
        off = batch.ptr[gi]
        candidates = _non_edges(g)
        if not len(candidates):
            # complete graph: its positives still count, negatives come from the others
            pos.append(g.edges + off)
            continue
        count = max(1, int(round(negative_ratio * len(g.edges))))
        pick = gen.integers(0, len(candidates), size=count)
        pos.append(g.edges + off)
        neg.append(candidates[pick] + off)
    if not pos:
        raise PretrainError("edge prediction needs at least one edge")
    if not neg:
        raise PretrainError("edge prediction needs at least one non-adjacent node pair")
    return np.concatenate(pos), np.concatenate(neg)


def edgepred_loss(backbone: Backbone, g, seed: int = 0, negative_ratio: float = 1.0) -> Tensor:
    """BCE on ``sigmoid(z_u . z_v)``: true edges vs uniformly drawn non-edges."""
    batch = as_batch(g)
    pos, neg = _edge_pairs(batch, rng(seed, "edgepred"), negative_ratio)
    z = backbone_forward(backbone, batch)
    return pair_bce(z, pos, neg)


def pair_bce(z: Tensor, pos: np.ndarray, neg: np.ndarray) -> Tensor:
    pairs = np.concatenate([pos, neg])
    targets = np.r_[np.ones(len(pos)), np.zeros(len(neg))][:, None]
    dots = reduce("sum_rows", elementwise("mul", take_rows(z, pairs[:, 0]), take_rows(z, pairs[:, 1])))
    return _bce_logits(dots, targets)


def mask_rows(batch: GraphBatch, fraction: float, seed: int) -> np.ndarray:
    """Global indices of ``ceil(fraction * n_g)`` random rows per graph."""
    gen = rng(seed, "attrmask")
    picked = []
    for gi in range(batch.num_graphs):
        lo, hi = batch.ptr[gi], batch.ptr[gi + 1]
        count = max(1, math.ceil(fraction * (hi - lo) - 1e-9))
        picked.append(lo + np.sort(gen.choice(hi - lo, size=count, replace=False)))
    return np.concatenate(picked)


def attrmask_loss(backbone: Backbone, g, decoder: Tensor, mask_fraction: float = 0.15, seed: int = 0) -> Tensor:
    """Zero out masked rows, embed, decode linearly, MSE on the masked rows.

    The error of a row is its squared Euclidean distance to the original
    features; the loss is the mean over masked rows.
    """
    batch = as_batch(g)
    rows = mask_rows(batch, mask_fraction, seed)
    x = batch.x.copy()
    target = x[rows].copy()
    x[rows] = 0.0
    z = backbone_forward(backbone, batch, Tensor.wrap(x))
    recon = matmul(take_rows(z, rows), decoder)
    diff = recon - Tensor.wrap(target)
    return reduce("sum_all", elementwise("mul", diff, diff)) * (1.0 / len(rows))


def corrupt_permutation(n: int, gen: np.random.Generator) -> np.ndarray:
    """Random permutation of ``range(n)`` that is never the identity (n >= 2)."""
    if n < 2:
        raise PretrainError("infomax corruption needs at least 2 nodes")
    while True:
        perm = gen.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


def infomax_loss(backbone: Backbone, g, disc: Tensor, seed: int = 0) -> Tensor:
    """Bilinear discriminator ``sigmoid(z_i^T M s)`` with ``s`` the mean readout.

    Positives are nodes of the real graph, negatives nodes embedded from a
    row-shuffled copy of the features; the summary always comes from the
    real graph.
    """
    batch = as_batch(g)
    gen = rng(seed, "infomax")
    shuffled = np.empty_like(batch.x)
    for gi in range(batch.num_graphs):
        lo, hi = batch.ptr[gi], batch.ptr[gi + 1]
        shuffled[lo:hi] = batch.x[lo:hi][corrupt_permutation(hi - lo, gen)]
    z_pos = backbone_forward(backbone, batch)
    z_neg = backbone_forward(backbone, batch, Tensor.wrap(shuffled))
    summary = readout(z_pos, batch, "mean")
    s_nodes = take_rows(summary, batch.node_graph)
    ms = matmul(s_nodes, transpose(disc))
    pos = reduce("sum_rows", elementwise("mul", z_pos, ms))
    neg = reduce("sum_rows", elementwise("mul", z_neg, ms))
    n = batch.num_nodes
    per_pos = softplus(pos) - pos
    per_neg = softplus(neg)
    return (reduce("sum_all", per_pos) + reduce("sum_all", per_neg)) * (1.0 / (2 * n))


def pretrain_run(cfg: PretrainConfig, ds: Dataset, gin: GinConfig | None = None) -> Checkpoint:
    """Full-batch Adam on the chosen objective; returns a frozen-role checkpoint.

    ``checkpoint.history`` holds the per-epoch training loss.
    """
    gin = gin or GinConfig(input_dim=ds.feature_dim, num_layers=3, hidden_dim=64)
    if gin.input_dim != ds.feature_dim:
        raise PretrainError(f"backbone input_dim {gin.input_dim} != dataset feature_dim {ds.feature_dim}")
    backbone = Backbone.init(gin, cfg.seed, role=TUNABLE)
    h, d = gin.hidden_dim, ds.feature_dim
    gen = rng(cfg.seed, "pretrain-aux")
    aux = ParamGroup()
    if cfg.task == "attrmask":
        aux = ParamGroup([("decoder", Tensor(gen.uniform(-1, 1, (h, d)) / np.sqrt(h)), TUNABLE)])
    elif cfg.task == "infomax":
        aux = ParamGroup([("disc", Tensor(gen.uniform(-1, 1, (h, h)) / np.sqrt(h)), TUNABLE)])
    params = backbone.params.merged(aux)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    batch = GraphBatch.from_graphs(ds.graphs)
    history = []
    for epoch in range(cfg.epochs):
        step_seed = cfg.seed * 1_000_003 + epoch
        with GradTape() as tape:
            if cfg.task == "edgepred":
                loss = edgepred_loss(backbone, batch, step_seed, cfg.negative_ratio)
            elif cfg.task == "attrmask":
                loss = attrmask_loss(backbone, batch, aux["decoder"], cfg.mask_fraction, step_seed)
            else:
                loss = infomax_loss(backbone, batch, aux["disc"], step_seed)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"{cfg.task} loss became non-finite at epoch {epoch}")
        history.append(value)
        grads = backward(tape, loss, [e.tensor for e in params.tunable()])
        adam_step(state, params, grads)
        log.info("pretrain %s epoch %d loss %.6f", cfg.task, epoch, value)
    frozen = Backbone(gin, ParamGroup.from_arrays(backbone.params.arrays(), FROZEN))
    return Checkpoint.from_backbone(frozen, cfg.task, cfg.seed, history)
