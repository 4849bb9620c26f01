"""Registered differentiable programs for finite-difference verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import Backbone, GinConfig, Head
from .graph import Graph, GraphBatch
from .numerics import (
    TUNABLE,
    GradCheckReport,
    ParamGroup,
    Tensor,
    elementwise,
    finite_diff_check,
    add_rows,
    matmul,
    propagate,
    reduce,
    rng,
    row_softmax,
    segment_col_softmax,
    segment_sum,
    take_rows,
    transpose,
)
from .prompt import VARIANTS, PromptParams
from .tune import Model, model_loss


def random_graph(gen: np.random.Generator, n: int, d: int, num_tasks: int = 2, p_edge: float = 0.4) -> Graph:
    iu, iv = np.triu_indices(n, 1)
    keep = gen.random(iu.size) < p_edge
    y = (gen.random(num_tasks) < 0.5).astype(np.float64)
    mask = gen.random(num_tasks) < 0.8
    mask[0] = True
    return Graph.build(n, np.stack([iu[keep], iv[keep]], axis=1), gen.standard_normal((n, d)), y, mask)


def random_labelled_batch(gen, graphs: int, n_max: int, d: int, num_tasks: int = 2) -> GraphBatch:
    out = []
    for i in range(graphs):
        g = random_graph(gen, int(gen.integers(2, n_max + 1)), d, num_tasks)
        # force both classes onto task 0 across the batch
        y = g.y.copy()
        y[0] = float(i % 2)
        out.append(Graph.build(g.num_nodes, g.edges, g.x, y, g.y_mask))
    return GraphBatch.from_graphs(out)


@dataclass
class Program:
    name: str
    loss: Callable[[], Tensor]
    params: ParamGroup


def end_to_end_program(variant: str, seed: int, aux_lp_lambda: float = 0.0) -> Program:
    """prompt -> frozen GIN -> readout -> head -> masked BCE (+ aux term)."""
    gen = rng(seed, "gradcheck", variant)
    d, h, tasks = 4, 5, 2
    batch = random_labelled_batch(gen, graphs=3, n_max=6, d=d, num_tasks=tasks)
    cfg = GinConfig(input_dim=d, num_layers=2, hidden_dim=h)
    role = TUNABLE if variant == "ft" else "frozen"
    backbone = Backbone.init(cfg, seed, role=role)
    k = 1 + seed % 3
    prompt = PromptParams.init(variant, d, k=k, seed=seed, r=0.5, m=1 + seed % 2, overlap_normalize=bool(seed % 2))
    # prompts well away from zero so the check exercises them
    for e in prompt.params:
        e.tensor.data *= 3.0
    head = Head.init(h, tasks, num_layers=1 + seed % 2, seed=seed)
    model = Model(backbone, prompt, head, "sum" if seed % 2 else "mean")
    fixed = None
    if variant == "supt_hard":
        fixed = prompt.apply(batch).mask
    lam = aux_lp_lambda if variant == "supt_soft" else 0.0

    def loss():
        return model_loss(model, batch, lam, fixed_mask=fixed)

    return Program(f"e2e/{variant}/seed{seed}", loss, model.tunable())


def primitive_programs(seed: int) -> list[Program]:
    """One small program per primitive family, shapes up to 8 x 8."""
    gen = rng(seed, "prims")
    r, c, k = (int(v) for v in gen.integers(1, 9, size=3))
    a = Tensor(gen.standard_normal((r, c)))
    b = Tensor(gen.standard_normal((c, k)))
    row = Tensor(gen.standard_normal((1, c)))
    same = Tensor(gen.standard_normal((r, c)))
    group = ParamGroup([("a", a, TUNABLE), ("b", b, TUNABLE), ("row", row, TUNABLE), ("same", same, TUNABLE)])
    weights = Tensor.wrap(gen.standard_normal((r, c)))
    # graph primitives run on a random edge list over the r rows
    iu, iv = np.triu_indices(r, 1)
    keep = gen.random(iu.size) < 0.5
    src, dst = iu[keep].astype(np.int64), iv[keep].astype(np.int64)
    w_edge, w_self = gen.uniform(0.1, 1.0, src.size), gen.uniform(0.1, 1.0, r)
    ptr = np.array(sorted({0, int(gen.integers(0, r + 1)), r}), dtype=np.int64)
    ptr = ptr[np.r_[True, np.diff(ptr) > 0]]
    rows = gen.random(r) < 0.5
    idx = gen.integers(0, r, size=r + 2)
    progs = {
        "matmul": lambda: reduce("sum_all", elementwise("mul", matmul(a, b), matmul(a, b))),
        "add_broadcast": lambda: reduce("frobenius", a + row),
        "sub": lambda: reduce("sum_all", elementwise("mul", a - same, weights)),
        "mul": lambda: reduce("sum_all", elementwise("mul", a, same)),
        "sigmoid": lambda: reduce("sum_all", elementwise("mul", elementwise("sigmoid", a), weights)),
        "relu": lambda: reduce("sum_all", elementwise("mul", elementwise("relu", a), weights)),
        "softplus": lambda: reduce("sum_all", elementwise("softplus", a)),
        "scale": lambda: reduce("sum_all", elementwise("mul", a * 2.5, weights)),
        "row_softmax": lambda: reduce("sum_all", elementwise("mul", row_softmax(a), weights)),
        "transpose": lambda: reduce("sum_all", elementwise("mul", transpose(transpose(a)), weights)),
        "sum_rows": lambda: reduce("frobenius", reduce("sum_rows", a)),
        "sum_cols": lambda: reduce("frobenius", reduce("sum_cols", a)),
        "frobenius": lambda: reduce("frobenius", a),
        "propagate": lambda: reduce("sum_all", elementwise("mul", propagate(a, src, dst, w_edge, w_self), weights)),
        "segment_sum": lambda: reduce("frobenius", segment_sum(a, ptr)),
        "segment_col_softmax": lambda: reduce("sum_all", elementwise("mul", segment_col_softmax(a, ptr), weights)),
        "take_rows": lambda: reduce("frobenius", take_rows(a, idx)),
        "add_rows": lambda: reduce("sum_all", elementwise("mul", add_rows(same, a * 1.5, rows), weights)),
    }
    return [Program(f"prim/{name}/seed{seed}", fn, group) for name, fn in progs.items()]


def run_programs(programs, step: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    return [(p.name, finite_diff_check(p.loss, p.params, step=step, tol=tol)) for p in programs]


def registered_programs(instances: int = 50, aux_lp_lambda: float = 0.1) -> list[Program]:
    progs = []
    for seed in range(instances):
        for v in VARIANTS:
            progs.append(end_to_end_program(v, seed, aux_lp_lambda))
    return progs
