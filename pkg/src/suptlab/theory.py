"""Constructive check that subset prompts can match a shared prompt, and prompt timing.

Setting: a single linear GIN layer ``Z = (A + (1+eps) I) X W`` with sum
readout.  Adding ``p`` to every node shifts the graph embedding by
``(D + N(1+eps)) p W``; adding ``p_hat`` to the nodes of a subset ``S``
shifts it by ``(sum_{s in S} d_s + (1+eps)|S|) p_hat W``.  Scaling ``p`` by
the ratio of the two coefficients makes the embeddings equal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, GinConfig, backbone_forward, readout
from .gradcheck import random_graph
from .graph import Graph, as_batch
from .numerics import ContractError, Tensor, rng
from .prompt import PromptParams


@dataclass(frozen=True)
class UniversalityWitness:
    subset: tuple
    base_prompt: np.ndarray
    scaled_prompt: np.ndarray
    scale: float
    total_degree: float
    num_nodes: int
    epsilon: float


def universality_witness(g: Graph, subset, epsilon: float, p) -> UniversalityWitness:
    subset = tuple(sorted(set(int(s) for s in subset)))
    if not subset:
        raise ValueError("subset must contain at least one node")
    if any(s < 0 or s >= g.num_nodes for s in subset):
        raise ValueError(f"subset indices must lie in [0, {g.num_nodes})")
    if epsilon <= -1.0:
        raise ValueError(f"epsilon must exceed -1, got {epsilon}")
    deg = g.degrees
    total = float(deg.sum())
    numer = total + g.num_nodes * (1.0 + epsilon)
    denom = float(deg[list(subset)].sum()) + (1.0 + epsilon) * len(subset)
    if denom <= 0.0:
        raise ValueError(f"subset coefficient must be positive, got {denom}")
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    scale = numer / denom
    return UniversalityWitness(subset, p, scale * p, scale, total, g.num_nodes, float(epsilon))


@dataclass
class UniversalityResult:
    status: str  # "pass" | "fail" | "out of proof scope"
    residual: float
    reason: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def proof_scope_violation(backbone: Backbone, pooling: str) -> str | None:
    cfg = backbone.config
    if cfg.num_layers != 1:
        return f"backbone has {cfg.num_layers} layers; the construction needs exactly 1"
    if cfg.mlp_per_layer:
        return "backbone layer carries an MLP; the construction needs a single linear map"
    if pooling != "sum":
        return f"readout is {pooling!r}; the construction needs sum"
    return None


def universality_check(
    g: Graph,
    witness: UniversalityWitness,
    backbone: Backbone,
    tol: float = 1e-9,
    pooling: str = "sum",
    strict: bool = True,
) -> UniversalityResult:
    """Compare the subset-prompted embedding against the shared-prompt one.

    Outside the construction's assumptions the result is ``"out of proof
    scope"``; with ``strict=True`` that raises :class:`ContractError` instead.
    """
    why = proof_scope_violation(backbone, pooling)
    if why is None and abs(backbone.config.epsilon - witness.epsilon) > 0.0:
        why = f"witness built for eps={witness.epsilon}, backbone has eps={backbone.config.epsilon}"
    if why is not None:
        if strict:
            raise ContractError(why)
        return UniversalityResult("out of proof scope", float("nan"), why)
    batch = as_batch(g)
    x = g.x
    x_shared = x + witness.base_prompt
    x_subset = x.copy()
    x_subset[list(witness.subset)] += witness.scaled_prompt
    z_shared = readout(backbone_forward(backbone, batch, Tensor(x_shared)), batch, pooling).data
    z_subset = readout(backbone_forward(backbone, batch, Tensor(x_subset)), batch, pooling).data
    residual = float(np.max(np.abs(z_subset - z_shared), initial=0.0))
    status = "pass" if residual <= tol else "fail"
    return UniversalityResult(status, residual)


def timing_probe(variant: str, g: Graph, params: PromptParams | None, repetitions: int = 1000, blocks: int = 5) -> float:
    """Mean seconds per prompt application (prompt only, no backbone).

    One warm-up call precedes timing.  The repetitions are split into
    ``blocks`` and the fastest block mean is reported, which damps
    scheduler noise without changing what is measured.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    batch = as_batch(g)
    x = Tensor(batch.x)
    if variant == "ft" or params is None or params.variant == "ft":
        def run():
            return x
    else:
        def run():
            return params.apply(batch, x).x_star
    run()
    blocks = max(1, min(blocks, repetitions))
    per_block = max(1, repetitions // blocks)
    best = float("inf")
    for _ in range(blocks):
        t0 = time.perf_counter()
        for _ in range(per_block):
            run()
        best = min(best, (time.perf_counter() - t0) / per_block)
    return best


def universality_trials(
    trials: int = 1000,
    seed: int = 0,
    n_max: int = 8,
    eps_values=(0.0, 0.5),
    tol: float = 1e-9,
) -> dict:
    """Randomized graphs, subsets and prompts through :func:`universality_check`."""
    failures = []
    worst = 0.0
    for trial in range(trials):
        gen = rng(seed, "universality", trial)
        n = int(gen.integers(1, n_max + 1))
        d = int(gen.integers(1, 6))
        h = int(gen.integers(1, 6))
        eps = float(eps_values[trial % len(eps_values)])
        g = random_graph(gen, n, d, num_tasks=1, p_edge=float(gen.uniform(0.1, 0.9)))
        size = int(gen.integers(1, n + 1))
        subset = gen.choice(n, size=size, replace=False)
        p = gen.standard_normal(d)
        backbone = Backbone.init(GinConfig(input_dim=d, num_layers=1, hidden_dim=h, epsilon=eps), seed=trial)
        res = universality_check(g, universality_witness(g, subset, eps, p), backbone, tol=tol)
        worst = max(worst, res.residual)
        if not res.passed:
            failures.append({"trial": trial, "residual": res.residual})
    return {"trials": trials, "failures": len(failures), "max_residual": worst, "tol": tol, "failed": failures}
