import math

import numpy as np
import pytest

from asatse import harness
from asatse.data import load_split
from asatse.errors import InvalidArgumentError, InvalidStateError
from asatse.harness import (Adam, EvalReport, EvalRow, TrainConfig, TrainingDiverged, bench_attention,
                            clip_grad_norm, evaluate, evaluate_checkpoint, train)
from asatse.autodiff import ParamRegistry
from asatse.network import NetConfig

SMALL = NetConfig(n_filters=32, bottleneck=16, hidden=32, blocks=2, repeats=2)


@pytest.fixture(scope="module")
def small_sets(small_corpus):
    return load_split(small_corpus, "train"), load_split(small_corpus, "val"), load_split(small_corpus, "test")


@pytest.fixture(scope="module")
def smoke_run(small_sets, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    tr, va, _ = small_sets
    return train(SMALL, TrainConfig(max_epochs=2), tr[:8], va, out_dir=out), out


def test_smoke_training(smoke_run):
    result, out = smoke_run
    assert len(result.history) == 2
    assert all(math.isfinite(h[1]) and math.isfinite(h[2]) for h in result.history)
    lines = (out / "train_log.tsv").read_text().splitlines()
    assert lines[0].startswith("#epoch") and len(lines) == 3
    assert all(len(line.split("\t")) == 4 for line in lines)
    assert result.checkpoint == out / "best.ckpt" and result.checkpoint.exists()


def test_best_epoch_is_restored(smoke_run, small_sets):
    result, _ = smoke_run
    vals = [h[2] for h in result.history]
    assert result.best_val == max(vals[:result.best_epoch])
    assert all(result.best_val >= v for v in vals[:result.best_epoch])
    assert evaluate(result.model, small_sets[1]).mean_improvement == pytest.approx(result.best_val, abs=1e-12)


def test_checkpoint_round_trip_gives_identical_report(smoke_run, small_corpus):
    result, _ = smoke_run
    direct = evaluate(result.model, load_split(small_corpus, "test"))
    loaded = evaluate_checkpoint(result.checkpoint, small_corpus, "test", expect=SMALL)
    assert direct == loaded
    with pytest.raises(InvalidStateError):
        evaluate_checkpoint(result.checkpoint, small_corpus, "test", expect=NetConfig())


def test_early_stopping_stops_after_patience(small_sets, monkeypatch):
    scripted = iter([1.0, 3.0, 2.0, 2.5, 9.0])

    class Fake:
        @property
        def mean_improvement(self):
            return next(scripted)

    monkeypatch.setattr(harness, "evaluate", lambda model, examples: Fake())
    tr, va, _ = small_sets
    result = train(SMALL, TrainConfig(max_epochs=10, patience=2), tr[:1], va[:1])
    assert result.best_epoch == 2 and result.best_val == 3.0
    assert [h[2] for h in result.history] == [1.0, 3.0, 2.0, 2.5]


def test_overfit_single_mixture(small_sets):
    ex = small_sets[0][:1]
    result = train(NetConfig(), TrainConfig(batch_size=1, max_epochs=200, patience=200), ex, [])
    assert len(result.history) == 200
    report = evaluate(result.model, ex)
    assert report.mean_sisdr > 15.0


def test_identity_model_has_zero_improvement(small_sets):
    report = evaluate(lambda mix, adapt: (mix[0].samples, None), small_sets[2])
    assert all(r.improvement == 0.0 for r in report.rows)
    assert report.mean_improvement == 0.0 and report.entropy is None


def test_aggregates_equal_recomputed_means(smoke_run, small_sets, tmp_path):
    report = evaluate(smoke_run[0].model, small_sets[0])
    for tag, agg in report.aggregates.items():
        members = [r for r in report.rows if tag == "all" or r.condition == tag]
        assert agg["count"] == len(members)
        for key in ("sisdr_est", "sisdr_mix", "improvement"):
            assert abs(agg[key] - sum(getattr(r, key) for r in members) / len(members)) < 1e-12
    assert report.entropy is not None and 0 < report.entropy["min"] <= math.log(160)
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "record,condition,sisdr_est,sisdr_mix,improvement,entropy"
    assert len(lines) == len(report.rows) + 1
    table = report.table()
    assert table.splitlines()[0].split()[:2] == ["condition", "count"] and "all" in table


def test_from_rows_groups_by_condition():
    rows = [EvalRow("a", "hard", 1.0, 0.0, 1.0), EvalRow("b", "easy", 4.0, 1.0, 3.0), EvalRow("c", "easy", 2.0, 1.0, 1.0)]
    rep = EvalReport.from_rows(rows)
    assert rep.aggregates["hard"]["improvement"] == 1.0
    assert rep.aggregates["easy"]["improvement"] == 2.0
    assert rep.aggregates["all"]["improvement"] == pytest.approx(5 / 3)


def test_mtl_training_requires_speakers(small_sets):
    tr, va, _ = small_sets
    with pytest.raises(InvalidArgumentError):
        train(SMALL, TrainConfig(alpha=0.5, max_epochs=1), tr[:2], va[:1])
    cfg = NetConfig(n_filters=32, bottleneck=16, hidden=32, blocks=2, num_speakers=8)
    result = train(cfg, TrainConfig(alpha=0.5, max_epochs=1), tr[:2], va[:1])
    assert math.isfinite(result.history[0][1])


def test_divergence_dumps_last_batch(small_sets, tmp_path, monkeypatch):
    real = harness.mtl_loss

    def poisoned(*args, **kwargs):
        total, rep = real(*args, **kwargs)
        return total, type(rep)(float("nan"), rep.sisdr_term, rep.ce_term, rep.alpha, rep.ce_evaluated)

    monkeypatch.setattr(harness, "mtl_loss", poisoned)
    with pytest.raises(TrainingDiverged):
        train(SMALL, TrainConfig(max_epochs=1), small_sets[0][:2], [], out_dir=tmp_path)
    dumps = list(tmp_path.glob("diverged_*.npz"))
    assert len(dumps) == 1 and "mix0" in np.load(dumps[0]).files


def test_train_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(lr=0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(alpha=-1)


def test_clip_and_adam():
    reg = ParamRegistry()
    p = reg.add("w", np.zeros(4))
    p.grad = np.array([3.0, 4.0, 0.0, 0.0])
    norm = clip_grad_norm(reg, 1.0)
    assert norm == pytest.approx(5.0) and np.linalg.norm(p.grad) == pytest.approx(1.0)
    opt = Adam(reg, lr=0.1)
    opt.step()
    # the first Adam step moves each coordinate by lr * sign(grad)
    np.testing.assert_allclose(p.data, [-0.1, -0.1, 0.0, 0.0], atol=1e-6)


def test_bench_counts():
    rep = bench_attention(64, 3199, 20, reps=3)
    assert rep.pooled_frames == 160
    assert rep.asa_macs == 20480 and rep.score_macs == 1_638_400
    assert rep.mac_ratio == 80.0 and rep.full_mac_ratio == 160.0
    assert rep.asa_counted == rep.asa_macs and rep.matrix_counted == rep.matrix_macs
    assert rep.asa_seconds > 0 and rep.matrix_seconds > 0
    assert "80.00x" in rep.table()
    unpooled = bench_attention(8, 3199, 1, reps=1)
    assert unpooled.mac_ratio == pytest.approx(3199 / 2)
    with pytest.raises(InvalidArgumentError):
        bench_attention(0, 10, 2, 1)
