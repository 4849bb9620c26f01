"""``suptlab`` command line: datagen, pretrain, tune, sweep, eval, gradcheck,
universality, timing.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import CheckpointError, GinConfig, Head, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config, parse_seeds, require
from .graph import (
    Dataset,
    DatasetError,
    GraphError,
    SplitError,
    load_dataset_jsonl,
    save_dataset_jsonl,
    split_dataset,
    synth_motif_dataset,
)
from .gradcheck import primitive_programs, registered_programs, run_programs
from .metrics import EmptyMaskError, MetricError
from .numerics import ContractError, NumericError, ParamGroup, TUNABLE
from .pretrain import PretrainConfig, PretrainError, pretrain_run
from .prompt import VARIANTS, PromptParams
from .theory import timing_probe, universality_trials
from .tune import (
    CSV_FIELDS,
    GRID,
    EvaluationError,
    TuneConfig,
    TuneError,
    evaluate_model,
    result_row,
    seed_sweep,
    tune_run,
)

log = logging.getLogger("suptlab")

COMMANDS = ("datagen", "pretrain", "tune", "sweep", "eval", "gradcheck", "universality", "timing")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5


class VerificationFailed(RuntimeError):
    pass


def _grid_text() -> str:
    lines = ["search grids (enforced with --grid true):"]
    for key, values in GRID.items():
        lines.append(f"  {key:<13} {', '.join(str(v) for v in values)}")
    lines.append(f"  {'prompt':<13} ft, gpf, gpf-plus, supt-soft, supt-hard")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="suptlab",
        description="Graph prompt tuning lab: SUPT, GPF, GPF-plus and fine-tuning on frozen GIN backbones.",
        epilog=_grid_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"suptlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, epilog=_grid_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key=value config file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            kw = {"dest": f.name, "default": None, "help": f"default: {f.default}"}
            if f.type == "bool":
                kw.update(nargs="?", const="true", metavar="BOOL")
            p.add_argument(flag, **kw)
    return parser


# ------------------------------------------------------------------ artifacts


def provenance(cfg: RunConfig, command: str) -> dict:
    return {"tool": "suptlab", "version": __version__, "command": command, "config": cfg.to_dict()}


def write_csv(path, rows, prov: dict) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {prov['tool']} {prov['version']} {prov['command']}\n")
        fh.write("# config " + json.dumps(prov["config"], sort_keys=True) + "\n")
        fh.write(f"# created {created}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv_body(path) -> str:
    """CSV text with the ``#`` provenance header stripped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    return "".join(line for line in lines if not line.startswith("#"))


def write_json(path, payload: dict, prov: dict) -> None:
    doc = dict(prov)
    doc["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    doc.update(payload)
    text = json.dumps(doc, indent=2, sort_keys=True, default=float)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")
    print(text)


def save_model(path, prompt: PromptParams, head: Head, cfg: TuneConfig, prov: dict) -> None:
    arrays = {name: arr for name, arr in prompt.params.arrays().items()}
    arrays.update(head.params.arrays())
    meta = {"tune": asdict(cfg), "provenance": prov}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_model(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    tcfg = TuneConfig(**meta["tune"])
    prompt_arrays = {k: v for k, v in arrays.items() if k.startswith("prompt.")}
    k = prompt_arrays["prompt.b"].shape[0] if "prompt.b" in prompt_arrays else 1
    prompt = PromptParams(
        tcfg.variant, k, ParamGroup.from_arrays(prompt_arrays, TUNABLE),
        tcfg.r, tcfg.m, tcfg.overlap_normalize, tcfg.column_softmax,
    )
    head = Head.from_arrays({k: v for k, v in arrays.items() if k.startswith("head.")})
    return tcfg, prompt, head


# ------------------------------------------------------------------ config glue


def tune_config(cfg: RunConfig, seed: int | None = None) -> TuneConfig:
    shots = cfg.shots if cfg.shots == "full" else int(cfg.shots)
    tcfg = TuneConfig(
        variant=cfg.prompt, k=cfg.k, r=cfg.r, m=cfg.m, lr=cfg.lr, weight_decay=cfg.weight_decay,
        head_layers=cfg.head_layers, pooling=cfg.pooling, epochs=cfg.epochs, shots=shots,
        seed=cfg.seed if seed is None else seed, aux_lp_lambda=cfg.aux_lp_lambda,
        overlap_normalize=cfg.overlap_normalize, column_softmax=cfg.column_softmax, grid=cfg.grid,
    )
    for msg in tcfg.off_grid():
        log.warning("exploratory value outside the search grid: %s", msg)
    return tcfg


def _split(cfg: RunConfig, ds: Dataset):
    try:
        ratios = tuple(float(v) for v in cfg.split_ratios.split(","))
    except ValueError:
        raise ConfigError(f"split_ratios must be three comma-separated numbers, got {cfg.split_ratios!r}") from None
    return split_dataset(ds, ratios, cfg.split_seed)


# ------------------------------------------------------------------ commands


def cmd_datagen(cfg: RunConfig, prov: dict) -> int:
    require(cfg, "out")
    ds = synth_motif_dataset(cfg.data_seed, cfg.num_graphs, (cfg.n_min, cfg.n_max), cfg.feature_dim, cfg.num_tasks, cfg.noise)
    save_dataset_jsonl(ds, cfg.out)
    meta = dict(prov, graphs=len(ds), feature_dim=ds.feature_dim, num_tasks=ds.num_tasks)
    Path(str(cfg.out) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} graphs to {cfg.out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, prov: dict) -> int:
    require(cfg, "dataset", "out")
    ds = load_dataset_jsonl(cfg.dataset)
    gin = GinConfig(ds.feature_dim, cfg.num_layers, cfg.hidden_dim, cfg.gin_epsilon, cfg.mlp_per_layer)
    pcfg = PretrainConfig(
        cfg.pretrain_task, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.pretrain_weight_decay,
        cfg.mask_fraction, cfg.negative_ratio, cfg.seed,
    )
    ck = pretrain_run(pcfg, ds, gin)
    ck.provenance = prov
    save_checkpoint(cfg.out, ck)
    if ck.history:
        print(f"{pcfg.task}: loss {ck.history[0]:.6f} -> {ck.history[-1]:.6f} over {len(ck.history)} epochs")
    print(f"wrote checkpoint to {cfg.out}")
    return EXIT_OK


def cmd_tune(cfg: RunConfig, prov: dict) -> int:
    require(cfg, "dataset", "checkpoint")
    ds = load_dataset_jsonl(cfg.dataset)
    ck = load_checkpoint(cfg.checkpoint)
    tcfg = tune_config(cfg)
    res = tune_run(tcfg, ck, ds, _split(cfg, ds))
    row = result_row(tcfg, res, ds.name, ck.pretrain)
    if cfg.out:
        write_csv(cfg.out, [row], prov)
    if cfg.model:
        save_model(cfg.model, res.model.prompt, res.model.head, tcfg, prov)
    print(",".join(CSV_FIELDS))
    print(",".join(str(row[k]) for k in CSV_FIELDS))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, prov: dict) -> int:
    require(cfg, "dataset", "checkpoint", "out")
    ds = load_dataset_jsonl(cfg.dataset)
    ck = load_checkpoint(cfg.checkpoint)
    seeds = parse_seeds(cfg.seeds)
    workers = cfg.workers or os.cpu_count() or 1
    sweep = seed_sweep(tune_config(cfg), seeds, ck, ds, _split(cfg, ds), workers, cfg.allow_partial)
    write_csv(cfg.out, sweep.rows, prov)
    for seed, err in sweep.failures.items():
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    print(f"{len(sweep.runs)} seeds: test AUC {sweep.mean_test_auc:.4f} +/- {sweep.std_test_auc:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, prov: dict) -> int:
    require(cfg, "dataset", "checkpoint", "model")
    ds = load_dataset_jsonl(cfg.dataset)
    ck = load_checkpoint(cfg.checkpoint)
    tcfg, prompt, head = load_model(cfg.model)
    split = _split(cfg, ds)
    per_task, mean = evaluate_model(ck, prompt, head, ds, split.test, tcfg.pooling)
    per_task_out = [None if np.isnan(v) else float(v) for v in per_task]
    write_json(cfg.out, {"per_task_auc": per_task_out, "mean_auc": mean, "graphs": len(split.test)}, prov)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, prov: dict) -> int:
    programs = registered_programs(cfg.instances, aux_lp_lambda=0.1)
    for seed in range(min(cfg.instances, 20)):
        programs.extend(primitive_programs(seed))
    results = run_programs(programs)
    failed = [(n, r) for n, r in results if not r.passed]
    payload = {
        "programs": len(results),
        "failures": len(failed),
        "max_rel_error": max(r.max_rel_error for _, r in results),
        "failed": [{"program": n, "entry": r.worst, "rel_error": r.max_rel_error} for n, r in failed],
    }
    write_json(cfg.out, payload, prov)
    if failed:
        raise VerificationFailed(f"{len(failed)} of {len(results)} gradient programs failed")
    return EXIT_OK


def cmd_universality(cfg: RunConfig, prov: dict) -> int:
    report = universality_trials(cfg.trials, cfg.seed, tol=cfg.tol)
    write_json(cfg.out, report, prov)
    if report["failures"]:
        raise VerificationFailed(f"{report['failures']} of {report['trials']} universality trials failed")
    return EXIT_OK


def cmd_timing(cfg: RunConfig, prov: dict) -> int:
    from .gradcheck import random_graph
    from .numerics import rng

    gen = rng(cfg.seed, "timing-graph")
    n = cfg.timing_nodes
    g = random_graph(gen, n, cfg.feature_dim, p_edge=min(1.0, 3.0 / max(n - 1, 1)))
    rows = []
    for variant in VARIANTS:
        for k in (1, 3, 5) if variant in ("gpf_plus", "supt_soft", "supt_hard") else (1,):
            params = None if variant == "ft" else PromptParams.init(variant, cfg.feature_dim, k, cfg.seed, r=cfg.r, m=cfg.m)
            sec = timing_probe(variant, g, params, cfg.repetitions)
            rows.append({"variant": variant, "k": k, "seconds_per_graph": sec})
    write_json(cfg.out, {"nodes": n, "edges": int(len(g.edges)), "repetitions": cfg.repetitions, "timings": rows}, prov)
    return EXIT_OK


HANDLERS = {
    "datagen": cmd_datagen,
    "pretrain": cmd_pretrain,
    "tune": cmd_tune,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "universality": cmd_universality,
    "timing": cmd_timing,
}


def dispatch(command: str, cfg: RunConfig) -> int:
    prov = provenance(cfg, command)
    try:
        return HANDLERS[command](cfg, prov)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (DatasetError, GraphError, SplitError, CheckpointError, MetricError, EmptyMaskError)):
            print(f"{command}: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"{command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"{command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TuneError, EvaluationError, PretrainError, ContractError, FloatingPointError) as exc:
        print(f"{command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed as exc:
        print(f"{command}: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"{args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
