"""Fine-tuning and prompt tuning with masked multi-task BCE and seed sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbone import Backbone, Checkpoint, Head, backbone_forward, head_forward, readout
from .graph import Dataset, GraphBatch, SplitSpec, few_shot_sample
from .metrics import masked_bce_loss, per_task_auc
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
)
from .prompt import PromptParams, aux_link_loss, canonical_variant

log = logging.getLogger(__name__)

GRID = {
    "k": (1, 2, 3, 4, 5),
    "r": (0.2, 0.4, 0.6),
    "m": (1,),
    "lr": (1e-3, 5e-4, 1e-4),
    "weight_decay": (1e-3, 1e-4, 1e-5),
    "head_layers": (1, 2, 3, 4),
    "pooling": ("sum", "mean"),
    "epochs": (50, 100, 300),
}

CSV_FIELDS = (
    "dataset", "pretrain", "variant", "k", "r", "m", "seed", "shots",
    "valid_auc", "test_auc", "params_tuned", "wall_ms",
)


class TuneError(RuntimeError):
    """Tuning cannot proceed with the given inputs."""


class EvaluationError(RuntimeError):
    """No task could be scored on the given subset."""


@dataclass(frozen=True)
class TuneConfig:
    variant: str = "supt_soft"
    k: int = 3
    r: float = 0.4
    m: int = 1
    lr: float = 1e-3
    weight_decay: float = 1e-5
    head_layers: int = 1
    pooling: str = "sum"
    epochs: int = 100
    shots: int | str = "full"
    seed: int = 0
    aux_lp_lambda: float = 0.0
    overlap_normalize: bool = False
    column_softmax: bool = False
    grid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.pooling not in ("sum", "mean"):
            raise ValueError(f"pooling must be sum or mean, got {self.pooling!r}")
        if self.aux_lp_lambda < 0:
            raise ValueError("aux_lp_lambda must be >= 0")
        if self.aux_lp_lambda > 0 and self.variant != "supt_soft":
            raise ValueError("the auxiliary link loss applies to supt_soft only")
        if self.shots != "full" and (not isinstance(self.shots, int) or self.shots < 1):
            raise ValueError(f"shots must be 'full' or a positive integer, got {self.shots!r}")
        off = self.off_grid()
        if self.grid and off:
            raise ValueError("values outside the search grid: " + ", ".join(off))

    def off_grid(self) -> list[str]:
        out = []
        for key, allowed in GRID.items():
            value = getattr(self, key)
            if not any(value == a for a in allowed):
                out.append(f"{key}={value} (grid {list(allowed)})")
        return out


@dataclass
class Model:
    backbone: Backbone
    prompt: PromptParams
    head: Head
    pooling: str

    def tunable(self) -> ParamGroup:
        groups = ParamGroup()
        for g in (self.backbone.params, self.prompt.params, self.head.params):
            groups = groups.merged(ParamGroup((e.name, e.tensor, e.role) for e in g.tunable()))
        return groups


@dataclass
class TrainResult:
    best_valid_auc: float
    test_auc_at_best_valid: float
    best_epoch: int
    loss_curve: list
    valid_curve: list
    params_tuned: int
    prompt_params: int
    head_params: int
    wall_ms: float
    model: Model | None = field(default=None, repr=False)
    test_per_task: np.ndarray | None = None


def build_model(cfg: TuneConfig, checkpoint: Checkpoint, ds: Dataset) -> Model:
    if checkpoint.config.input_dim != ds.feature_dim:
        raise TuneError(
            f"checkpoint input_dim {checkpoint.config.input_dim} != dataset feature_dim {ds.feature_dim}"
        )
    role = TUNABLE if cfg.variant == "ft" else FROZEN
    backbone = checkpoint.backbone(role)
    prompt = PromptParams.init(
        cfg.variant, ds.feature_dim, cfg.k, cfg.seed, cfg.r, cfg.m, cfg.overlap_normalize, cfg.column_softmax
    )
    head = Head.init(checkpoint.config.hidden_dim, ds.num_tasks, cfg.head_layers, cfg.seed)
    return Model(backbone, prompt, head, cfg.pooling)


def forward(model: Model, batch: GraphBatch, fixed_mask=None):
    """Graph logits through prompt, backbone, readout and head."""
    pg = model.prompt.apply(batch, fixed_mask=fixed_mask)
    z = backbone_forward(model.backbone, batch, pg.x_star)
    logits = head_forward(model.head, readout(z, batch, model.pooling))
    return logits, pg


def model_loss(model: Model, batch: GraphBatch, aux_lp_lambda: float = 0.0, fixed_mask=None) -> Tensor:
    logits, pg = forward(model, batch, fixed_mask)
    y, mask = batch.labels
    loss = masked_bce_loss(logits, y, mask)
    if aux_lp_lambda > 0:
        loss = loss + aux_link_loss(batch, pg.scores) * aux_lp_lambda
    return loss


def evaluate_model(checkpoint, prompt: PromptParams, head: Head, ds: Dataset, indices, pooling: str = "sum"):
    """Per-task test AUC (NaN for skipped single-class tasks) and their mean.

    ``checkpoint`` may be a :class:`Checkpoint` or an already built backbone.
    """
    if not len(indices):
        raise EvaluationError("evaluation needs a non-empty index set")
    backbone = checkpoint.backbone() if isinstance(checkpoint, Checkpoint) else checkpoint
    return _evaluate(Model(backbone, prompt, head, pooling), ds.batch(indices))


def _evaluate(model: Model, batch: GraphBatch):
    logits, _ = forward(model, batch)
    y, mask = batch.labels
    aucs = per_task_auc(logits.data, y, mask)
    if np.all(np.isnan(aucs)):
        raise EvaluationError("every task has a single class in this subset")
    return aucs, float(np.nanmean(aucs))


def tune_run(cfg: TuneConfig, checkpoint: Checkpoint, ds: Dataset, split: SplitSpec) -> TrainResult:
    """Full-batch Adam over the training split with best-validation model selection.

    ``ft`` tunes backbone and head; every other variant tunes prompt and
    head while the backbone stays frozen.
    """
    t0 = time.perf_counter()
    if cfg.shots != "full":
        split = few_shot_sample(split, cfg.shots, cfg.seed)
    if not split.valid or not split.test:
        raise TuneError("tuning needs non-empty validation and test splits")
    model = build_model(cfg, checkpoint, ds)
    train_b, valid_b, test_b = ds.batch(split.train), ds.batch(split.valid), ds.batch(split.test)
    params = model.tunable()
    wrt = [e.tensor for e in params]
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses, valid_curve = [], []
    best = (-math.inf, math.nan, -1, None)

    def score(epoch):
        nonlocal best
        _, v = _evaluate(model, valid_b)
        valid_curve.append(v)
        if v > best[0]:
            tp, t = _evaluate(model, test_b)
            best = (v, t, epoch, tp)

    if cfg.epochs == 0:
        score(0)
    for epoch in range(cfg.epochs):
        with GradTape() as tape:
            loss = model_loss(model, train_b, cfg.aux_lp_lambda)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"training loss became non-finite at epoch {epoch}")
        losses.append(value)
        adam_step(state, params, backward(tape, loss, wrt))
        score(epoch + 1)
    prompt_n = model.prompt.count()
    head_n = model.head.params.count("all")
    return TrainResult(
        best_valid_auc=best[0],
        test_auc_at_best_valid=best[1],
        best_epoch=best[2],
        loss_curve=losses,
        valid_curve=valid_curve,
        params_tuned=params.count("all"),
        prompt_params=prompt_n,
        head_params=head_n,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        model=model,
        test_per_task=best[3],
    )


# ------------------------------------------------------------------ sweeps


@dataclass
class SweepResult:
    runs: dict
    failures: dict
    mean_test_auc: float
    std_test_auc: float
    rows: list

    def csv_body(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()


def result_row(cfg: TuneConfig, res: TrainResult, dataset: str, pretrain: str) -> dict:
    return {
        "dataset": dataset,
        "pretrain": pretrain,
        "variant": cfg.variant,
        "k": cfg.k,
        "r": cfg.r,
        "m": cfg.m,
        "seed": cfg.seed,
        "shots": cfg.shots,
        "valid_auc": f"{res.best_valid_auc:.6f}",
        "test_auc": f"{res.test_auc_at_best_valid:.6f}",
        "params_tuned": res.params_tuned,
        "wall_ms": f"{res.wall_ms:.1f}",
    }


def _sweep_one(args):
    cfg, checkpoint, ds, split = args
    try:
        res = tune_run(cfg, checkpoint, ds, split)
        res.model = None
        return cfg.seed, res, None
    except Exception as exc:  # reported per seed
        return cfg.seed, None, f"{type(exc).__name__}: {exc}"


def seed_sweep(
    cfg: TuneConfig,
    seeds: Sequence[int],
    checkpoint: Checkpoint,
    ds: Dataset,
    split: SplitSpec,
    workers: int = 1,
    allow_partial: bool = False,
) -> SweepResult:
    """Run ``tune_run`` once per seed and aggregate test AUC (sample stddev)."""
    if not seeds:
        raise ValueError("seed_sweep needs at least one seed")
    jobs = [(replace(cfg, seed=int(s)), checkpoint, ds, split) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_one, jobs))
    else:
        outcomes = [_sweep_one(j) for j in jobs]
    runs, failures, rows = {}, {}, []
    for (job_cfg, *_), (seed, res, err) in zip(jobs, outcomes):
        if err is not None:
            failures[seed] = err
            continue
        runs[seed] = res
        rows.append(result_row(job_cfg, res, ds.name, checkpoint.pretrain))
    if failures and not allow_partial:
        first = next(iter(failures.items()))
        raise TuneError(f"seed {first[0]} failed: {first[1]}")
    if not runs:
        raise TuneError("every seed failed")
    tests = np.array([r.test_auc_at_best_valid for r in runs.values()])
    std = float(tests.std(ddof=1)) if tests.size > 1 else 0.0
    return SweepResult(runs, failures, float(tests.mean()), std, rows)


def config_dict(cfg: TuneConfig) -> dict:
    return asdict(cfg)
