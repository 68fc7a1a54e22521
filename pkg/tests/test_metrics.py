import json

import numpy as np
import pytest

from v2sreg.datagen import Sample
from v2sreg.errors import InvalidInput
from v2sreg.metrics import (EvalReport, TimingReport, benchmark, epe,
                            evaluate_corpus, linear_fit_r2, rmse, time_update,
                            update_scaling)


# ---------------------------------------------------------------------------
# metric identities
# ---------------------------------------------------------------------------

def test_epe_exact_values():
    gt = np.zeros((2, 3))
    pred = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    assert epe(pred, gt) == pytest.approx(1.5, abs=1e-12)
    assert epe(gt, gt) == 0.0


def test_rmse_exact_values():
    assert rmse(np.array([[3.0, 0, 0]]), np.zeros((1, 3))) == pytest.approx(np.sqrt(3), abs=1e-12)
    pred = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    assert rmse(pred, np.zeros((2, 3))) == pytest.approx(np.sqrt(5.0 / 6.0), abs=1e-12)
    assert rmse(pred, pred) == 0.0


def test_epe_matches_naive_summation(rng):
    pred = rng.normal(size=(500, 3))
    gt = rng.normal(size=(500, 3))
    naive = sum(float(np.sqrt(((pred[i] - gt[i]) ** 2).sum())) for i in range(500)) / 500
    assert abs(epe(pred, gt) - naive) < 1e-12


def test_metrics_translation_equivariance(rng):
    pred = rng.normal(size=(100, 3))
    gt = rng.normal(size=(100, 3))
    c = np.array([3.0, -1.0, 2.0])
    assert epe(pred + c, gt + c) == pytest.approx(epe(pred, gt), abs=1e-12)
    assert rmse(pred + c, gt + c) == pytest.approx(rmse(pred, gt), abs=1e-12)


def test_epe_rmse_cauchy_schwarz_relation(rng):
    for _ in range(20):
        n = int(rng.integers(1, 200))
        pred = rng.normal(size=(n, 3)) * rng.uniform(0.1, 5)
        gt = rng.normal(size=(n, 3))
        e, r = epe(pred, gt), rmse(pred, gt)
        assert r >= e / np.sqrt(3) - 1e-12
        assert e <= np.sqrt(3) * r + 1e-12


def test_metric_shape_validation(rng):
    with pytest.raises(InvalidInput):
        epe(rng.normal(size=(3, 3)), rng.normal(size=(4, 3)))
    with pytest.raises(InvalidInput):
        rmse(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------

def fake_records(rng, n=6):
    records, samples = [], {}
    for i in range(n):
        p = (rng.normal(size=(40, 3)) * 20).astype(np.float32)
        ii = (p + rng.normal(size=(40, 3)).astype(np.float32))
        sample = Sample(P=p, I=ii, S=ii[:10].copy(), Phi=ii - p,
                        meta={"ratio": [0.25, 0.45][i % 2]})
        rec = {"path": f"s{i}", "meta": sample.meta, "split": "test"}
        records.append(rec)
        samples[f"s{i}"] = sample
    return records, samples


def test_identity_method_equals_mean_phi(rng):
    records, samples = fake_records(rng)
    report = evaluate_corpus(records, lambda r: samples[r["path"]],
                             lambda p, s, sample: np.zeros_like(p), "identity")
    expected = np.mean([np.linalg.norm(samples[r["path"]].Phi.astype(np.float64), axis=1).mean()
                        for r in records])
    assert report.summary()["overall"]["epe"]["mean"] == pytest.approx(expected, rel=1e-12)


def test_grouping_partitions_rows(rng):
    records, samples = fake_records(rng)
    report = evaluate_corpus(records, lambda r: samples[r["path"]],
                             lambda p, s, sample: np.zeros_like(p), "identity",
                             noise_levels=((0.0, 0.0), (1.0, 5.0)),
                             noise_fn=lambda s, level, rec: s + level[0])
    assert len(report.rows) == 12
    summary = report.summary()
    group_n = sum(v["epe"]["n"] for v in summary["by_ratio"].values())
    assert group_n == 12
    noise_n = sum(v["epe"]["n"] for v in summary["by_noise"].values())
    assert noise_n == 12
    assert set(summary["by_noise"]) == {"0,0", "1,5"}


def test_summary_matches_row_recomputation(rng):
    records, samples = fake_records(rng)
    report = evaluate_corpus(records, lambda r: samples[r["path"]],
                             lambda p, s, sample: np.zeros_like(p), "identity")
    vals = [r["epe_mm"] for r in report.rows]
    s = report.summary()["overall"]["epe"]
    assert s["mean"] == pytest.approx(np.mean(vals), rel=1e-15)
    assert s["sd"] == pytest.approx(np.std(vals, ddof=1), rel=1e-12)


def test_report_serialization(rng):
    records, samples = fake_records(rng, 2)
    report = evaluate_corpus(records, lambda r: samples[r["path"]],
                             lambda p, s, sample: np.zeros_like(p), "identity")
    doc = json.loads(report.to_json())
    assert "summary" in doc and "rows" in doc
    csv = report.to_csv()
    header = csv.splitlines()[0].split(",")
    assert header == ["method", "group", "epe_mean", "epe_sd", "rmse_mean", "rmse_sd"]
    assert len(csv.splitlines()) >= 2


def test_empty_split_rejected():
    with pytest.raises(InvalidInput):
        evaluate_corpus([], None, None, "identity")


# ---------------------------------------------------------------------------
# timing harness
# ---------------------------------------------------------------------------

def test_timing_report_identities():
    rep = TimingReport.from_components(10.0, 2.5)
    assert rep.t_total_ms == 12.5
    assert rep.fps * rep.t_total_ms == pytest.approx(1000.0, abs=1e-9)


def test_benchmark_discards_warmup_and_medians():
    calls = []

    def run_once():
        calls.append(1)
        # warm-up call is slow; the harness must not let it skew the median
        return (100.0, 10.0) if len(calls) == 1 else (2.0, 1.0)

    rep = benchmark(run_once, repetitions=5)
    assert len(calls) == 5
    assert rep.t_inference_ms == 2.0
    assert rep.t_update_ms == 1.0
    assert rep.t_total_ms == 3.0


def test_benchmark_needs_three_reps():
    with pytest.raises(InvalidInput):
        benchmark(lambda: (1.0, 1.0), repetitions=2)


def test_linear_fit_r2_exact_line():
    xs = [1, 2, 3, 4]
    ys = [2.0, 4.0, 6.0, 8.0]
    assert linear_fit_r2(xs, ys) == pytest.approx(1.0, abs=1e-12)
    noisy = [2.1, 3.8, 6.2, 7.9]
    assert linear_fit_r2(xs, noisy) > 0.99


def test_time_update_positive():
    t = time_update(1024, inner_loops=50, repetitions=3)
    assert t > 0


def test_update_scaling_r2():
    out = update_scaling(sizes=(1024, 4096, 16384), inner_loops=100, repetitions=5)
    assert out["r2"] > 0.9
    assert len(out["t_update_ms"]) == 3
