import math

import numpy as np
import pytest

from suptlab.metrics import EmptyMaskError, masked_bce_loss
from suptlab.numerics import Tensor
from suptlab.tune import (
    CSV_FIELDS,
    EvaluationError,
    TuneConfig,
    TuneError,
    _evaluate,
    build_model,
    evaluate_model,
    seed_sweep,
    tune_run,
)

FAST = dict(epochs=8, lr=5e-3)


class TestMaskedBce:
    def test_saturated(self):
        assert masked_bce_loss(Tensor([[25.0]]), [[1.0]], [[True]]).item() < 1e-10

    def test_at_zero(self):
        assert masked_bce_loss(Tensor([[0.0]]), [[1.0]], [[True]]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_all_masked(self):
        with pytest.raises(EmptyMaskError):
            masked_bce_loss(Tensor([[0.0, 1.0]]), [[1.0, 0.0]], [[False, False]])

    def test_masked_entries_ignored(self):
        a = masked_bce_loss(Tensor([[0.0, 50.0]]), [[1.0, 0.0]], [[True, False]]).item()
        assert a == pytest.approx(math.log(2), abs=1e-15)

    def test_masked_nan_label_does_not_leak(self):
        out = masked_bce_loss(Tensor([[0.0, 3.0]]), [[1.0, np.nan]], [[True, False]]).item()
        assert out == pytest.approx(math.log(2), abs=1e-15)


class TestTuneConfig:
    def test_grid_enforced(self):
        with pytest.raises(ValueError, match="k=7"):
            TuneConfig(k=7, grid=True)

    def test_exploratory_allowed(self):
        assert TuneConfig(k=7).off_grid()

    def test_aux_only_for_soft(self):
        with pytest.raises(ValueError):
            TuneConfig(variant="gpf", aux_lp_lambda=0.1)

    def test_alias(self):
        assert TuneConfig(variant="supt-hard").variant == "supt_hard"


class TestTuneRun:
    @pytest.mark.parametrize("variant", ["gpf", "gpf_plus", "supt_soft", "supt_hard"])
    def test_backbone_frozen(self, small_ck, small_ds, small_split, variant):
        before = {k: v.tobytes() for k, v in small_ck.tensors.items()}
        res = tune_run(TuneConfig(variant=variant, **FAST), small_ck, small_ds, small_split)
        for name, arr in res.model.backbone.params.arrays().items():
            assert arr.tobytes() == before[name]
        assert {k: v.tobytes() for k, v in small_ck.tensors.items()} == before

    @pytest.mark.parametrize("variant", ["gpf", "gpf_plus", "supt_soft", "supt_hard"])
    def test_tuned_count(self, small_ck, small_ds, small_split, variant):
        res = tune_run(TuneConfig(variant=variant, epochs=1), small_ck, small_ds, small_split)
        assert res.params_tuned == res.prompt_params + res.head_params

    def test_fine_tuning_moves_backbone_only_in_copy(self, small_ck, small_ds, small_split):
        before = {k: v.tobytes() for k, v in small_ck.tensors.items()}
        res = tune_run(TuneConfig(variant="ft", **FAST), small_ck, small_ds, small_split)
        assert res.params_tuned == sum(v.size for v in small_ck.tensors.values()) + res.head_params
        assert any(res.model.backbone.params[k].data.tobytes() != b for k, b in before.items())
        assert {k: v.tobytes() for k, v in small_ck.tensors.items()} == before

    def test_zero_epochs(self, small_ck, small_ds, small_split):
        cfg = TuneConfig(variant="supt_soft", epochs=0)
        a = tune_run(cfg, small_ck, small_ds, small_split)
        b = tune_run(cfg, small_ck, small_ds, small_split)
        assert a.best_epoch == 0 and not a.loss_curve
        assert a.test_auc_at_best_valid == b.test_auc_at_best_valid

    def test_deterministic(self, small_ck, small_ds, small_split):
        cfg = TuneConfig(variant="supt_hard", seed=4, **FAST)
        a = tune_run(cfg, small_ck, small_ds, small_split)
        b = tune_run(cfg, small_ck, small_ds, small_split)
        assert a.loss_curve == b.loss_curve and a.valid_curve == b.valid_curve

    def test_gpf_equivalence(self, small_ck, small_ds, small_split):
        gpf = tune_run(TuneConfig(variant="gpf", k=1, seed=2, epochs=20), small_ck, small_ds, small_split)
        soft = tune_run(TuneConfig(variant="supt_soft", k=1, seed=2, epochs=20), small_ck, small_ds, small_split)
        assert np.abs(np.subtract(gpf.loss_curve, soft.loss_curve)).max() <= 1e-10

    def test_aux_loss_runs(self, small_ck, small_ds, small_split):
        res = tune_run(TuneConfig(variant="supt_soft", aux_lp_lambda=0.1, **FAST), small_ck, small_ds, small_split)
        assert all(np.isfinite(res.loss_curve))

    def test_test_metric_at_best_valid(self, small_ck, small_ds, small_split):
        res = tune_run(TuneConfig(variant="gpf", **FAST), small_ck, small_ds, small_split)
        assert res.best_valid_auc == max(res.valid_curve)
        assert res.valid_curve.index(res.best_valid_auc) == res.best_epoch - 1

    def test_few_shot(self, small_ck, small_ds, small_split):
        res = tune_run(TuneConfig(variant="gpf", shots=10, **FAST), small_ck, small_ds, small_split)
        assert np.isfinite(res.test_auc_at_best_valid)

    def test_width_mismatch(self, small_ck, small_ds, small_split):
        from suptlab.graph import synth_motif_dataset, split_dataset

        other = synth_motif_dataset(0, num_graphs=20, n_range=(6, 8), d=6)
        with pytest.raises(TuneError):
            tune_run(TuneConfig(epochs=1), small_ck, other, split_dataset(other))


class TestEvaluate:
    def model(self, small_ck, small_ds):
        return build_model(TuneConfig(variant="gpf"), small_ck, small_ds)

    @pytest.mark.parametrize("sign,want", [(1.0, 1.0), (-1.0, 0.0)])
    def test_perfect_and_reversed(self, small_ck, small_ds, small_split, monkeypatch, sign, want):
        from suptlab import tune as tune_mod

        m = self.model(small_ck, small_ds)
        batch = small_ds.batch(list(small_split.test))
        y, _ = batch.labels
        monkeypatch.setattr(tune_mod, "forward", lambda model, b, fixed_mask=None: (Tensor(sign * (2 * y - 1)), None))
        _, mean = _evaluate(m, batch)
        assert mean == want

    def test_single_class_task_skipped(self, small_ck, small_ds):
        m = self.model(small_ck, small_ds)
        pos = [i for i, g in enumerate(small_ds.graphs) if g.y[0] == 1.0][:6]
        aucs, mean = evaluate_model(m.backbone, m.prompt, m.head, small_ds, pos)
        assert np.isnan(aucs[0])
        assert mean == pytest.approx(np.nanmean(aucs))

    def test_all_skipped(self, small_ck, small_ds):
        m = self.model(small_ck, small_ds)
        with pytest.raises(EvaluationError):
            evaluate_model(m.backbone, m.prompt, m.head, small_ds, [0])

    def test_empty_indices(self, small_ck, small_ds):
        m = self.model(small_ck, small_ds)
        with pytest.raises(EvaluationError):
            evaluate_model(small_ck, m.prompt, m.head, small_ds, [])


class TestSweep:
    def test_single_seed(self, small_ck, small_ds, small_split):
        cfg = TuneConfig(variant="gpf", **FAST)
        sweep = seed_sweep(cfg, [3], small_ck, small_ds, small_split)
        assert sweep.std_test_auc == 0.0
        assert sweep.mean_test_auc == sweep.runs[3].test_auc_at_best_valid

    def test_repeated_seed(self, small_ck, small_ds, small_split):
        sweep = seed_sweep(TuneConfig(variant="gpf", **FAST), [1, 1, 1], small_ck, small_ds, small_split)
        assert sweep.std_test_auc == 0.0

    def test_rows_and_csv(self, small_ck, small_ds, small_split):
        sweep = seed_sweep(TuneConfig(variant="supt_soft", epochs=2), [0, 1, 2], small_ck, small_ds, small_split)
        assert len(sweep.rows) == 3
        header = sweep.csv_body().splitlines()[0]
        assert header == ",".join(CSV_FIELDS)

    def test_parallel_matches_serial(self, small_ck, small_ds, small_split):
        cfg = TuneConfig(variant="supt_hard", epochs=3)
        serial = seed_sweep(cfg, [0, 1], small_ck, small_ds, small_split, workers=1)
        parallel = seed_sweep(cfg, [0, 1], small_ck, small_ds, small_split, workers=2)
        assert serial.mean_test_auc == parallel.mean_test_auc

    def test_failure_names_seed(self, small_ck, small_ds, small_split):
        cfg = TuneConfig(variant="gpf", shots=10_000, epochs=1)
        with pytest.raises(TuneError, match="seed 5"):
            seed_sweep(cfg, [5], small_ck, small_ds, small_split)

    def test_partial(self, small_ck, small_ds, small_split, monkeypatch):
        from suptlab import tune as tune_mod

        real = tune_mod.tune_run

        def flaky(cfg, *args):
            if cfg.seed == 1:
                raise FloatingPointError("boom")
            return real(cfg, *args)

        monkeypatch.setattr(tune_mod, "tune_run", flaky)
        cfg = TuneConfig(variant="gpf", epochs=1)
        sweep = seed_sweep(cfg, [0, 1], small_ck, small_ds, small_split, allow_partial=True)
        assert list(sweep.runs) == [0] and 1 in sweep.failures
        with pytest.raises(TuneError, match="seed 1"):
            seed_sweep(cfg, [0, 1], small_ck, small_ds, small_split)

    def test_empty(self, small_ck, small_ds, small_split):
        with pytest.raises(ValueError):
            seed_sweep(TuneConfig(), [], small_ck, small_ds, small_split)
