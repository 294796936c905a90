import csv
import json

import numpy as np
import pytest

from spatialplus import harness
from spatialplus.basis import reparameterized_design
from spatialplus.bayes.nuts import MCMCConfig
from spatialplus.errors import NumericError, ParameterError, StudyError
from spatialplus.fieldgen import generate, replicate_seed
from spatialplus.frequentist import fit_spatial_freq
from spatialplus.harness import (
    CoefficientSummary,
    StudyConfig,
    aggregate,
    replicate_dataset,
    run_replicate,
    run_study,
    summarize_tables,
    write_study_outputs,
)

FREQ = ("frequentist", "frequentist+")


def small(**kw):
    base = dict(family="uni", scenario=1, n=60, k_basis=20, n_replicates=4, models=FREQ,
                root_seed=3)
    base.update(kw)
    return StudyConfig(**base)


def test_single_replicate_bias_is_that_replicate():
    cfg = small(n_replicates=1, models=("frequentist",))
    s = run_study(cfg)
    data = generate("uni", 1, 60, replicate_seed(3, 0), fit_basis=20)
    fit = fit_spatial_freq(data, reparameterized_design(data.locations, 20))
    assert s.cell("frequentist").mean_bias == pytest.approx(fit.beta[0] - data.beta_true[0],
                                                             abs=1e-12)


def _same(a, b):
    assert a.cells.keys() == b.cells.keys()
    for key in a.cells:
        x, y = a.cells[key], b.cells[key]
        assert np.array_equal(x.biases, y.biases)
        assert np.array_equal(x.spreads, y.spreads)
        assert np.array_equal(x.covered, y.covered)


def test_execution_order_does_not_matter():
    cfg = small()
    _same(run_study(cfg), run_study(cfg, order=[2, 0, 3, 1]))


def test_worker_pool_matches_sequential():
    _same(run_study(small()), run_study(small(workers=2)))


def test_order_must_be_permutation():
    with pytest.raises(ParameterError):
        run_study(small(), order=[0, 1, 1, 2])


def test_isolated_replicate_reproduces_row():
    cfg = small()
    s = run_study(cfg)
    alone = run_replicate(cfg, 2)
    assert alone.seed == replicate_seed(3, 2) == s.replicates[2].seed
    assert np.array_equal(alone.estimates["frequentist+"].estimate,
                          s.replicates[2].estimates["frequentist+"].estimate)


def test_coverage_is_mean_of_covered():
    s = run_study(small(n_replicates=5))
    for cell in s.cells.values():
        assert cell.coverage == np.mean(cell.covered)


def test_bi_family_has_two_coefficients():
    s = run_study(small(family="bi", scenario=2, n_replicates=2))
    assert set(s.cells) == {(m, j) for m in FREQ for j in (0, 1)}
    csv_text, text = summarize_tables(s)
    assert "bi-2 beta_2" in text and "bi-2 beta_1 coverage" in csv_text


def test_matched_cap_feeds_basis_size():
    data, _ = replicate_dataset(small(), 0)
    ref = generate("uni", 1, 60, replicate_seed(3, 0), fit_basis=20)
    assert np.array_equal(data.X, ref.X)
    with pytest.warns(UserWarning, match="clamped"):
        fixed, _ = replicate_dataset(small(n=60, confounder_cap="fixed"), 0)
    assert not np.array_equal(fixed.X, ref.X)


def test_failures_over_threshold_raise(monkeypatch):
    calls = {"n": 0}
    real = harness.fit_spatial_freq

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] % 3 == 0:
            raise NumericError("boom")
        return real(*a, **k)

    monkeypatch.setattr(harness, "fit_spatial_freq", flaky)
    with pytest.raises(StudyError, match="frequentist: 33%") as exc:
        run_study(small(n_replicates=6, models=("frequentist",)))
    cell = exc.value.summary.cell("frequentist")
    assert cell.n_failed == 2 and cell.n_used == 4


def test_failures_at_threshold_tolerated(monkeypatch):
    real = harness.fit_spatial_freq
    calls = {"n": 0}

    def once(*a, **k):
        calls["n"] += 1
        if calls["n"] == 1:
            raise NumericError("boom")
        return real(*a, **k)

    monkeypatch.setattr(harness, "fit_spatial_freq", once)
    s = run_study(small(n_replicates=5, models=("frequentist",)))
    assert s.failure_fraction("frequentist") == 0.2
    assert s.cell("frequentist").n_used == 4


def test_config_validation():
    with pytest.raises(ParameterError, match=r"\{1, 2, 3\}"):
        small(scenario=9)
    with pytest.raises(ParameterError):
        small(n_replicates=0)
    with pytest.raises(ParameterError, match="57"):
        small(k_basis=58)
    with pytest.raises(ParameterError):
        small(models=("ols",))
    assert small(models=("frequentist+", "frequentist")).models == FREQ


# tables ------------------------------------------------------------------------

def _fake_summary(coverage_hits, biases, model="frequentist"):
    cfg = small(models=(model,))
    cell = CoefficientSummary(biases=np.asarray(biases, float), spreads=np.ones(len(biases)),
                              covered=np.asarray(coverage_hits, bool), n_failed=0, n_flagged=0)
    return harness.StudySummary(config=cfg, beta_true=np.array([1.0]),
                                cells={(model, 0): cell}, replicates=[])


def test_one_by_one_table():
    s = _fake_summary([1] * 9 + [0], [0.01234] * 10)
    csv_text, text = summarize_tables(s)
    rows = list(csv.reader(csv_text.splitlines()))
    assert rows == [["model", "uni-1 coverage", "uni-1 bias"], ["frequentist", "0.90", "0.012"]]
    assert "0.90" in text and "0.012" in text
    assert text.count("frequentist") == 2


def test_table_rows_follow_model_order():
    cfg = small(models=("frequentist", "frequentist+"))
    s = run_study(cfg)
    _, text = summarize_tables([s])
    lines = text.splitlines()
    assert lines[3].startswith("frequentist ") and lines[4].startswith("frequentist+")


def test_summary_statistics():
    c = CoefficientSummary(biases=np.array([1.0, 2.0, 6.0]), spreads=np.array([0.5, 1.5, 1.0]),
                           covered=np.array([True, False, True]), n_failed=1, n_flagged=0)
    assert (c.mean_bias, c.median_bias, c.mean_spread) == (3.0, 2.0, 1.0)
    assert c.sd_estimate == pytest.approx(np.std([1, 2, 6], ddof=1))
    assert c.coverage == pytest.approx(2 / 3)
    empty = CoefficientSummary(np.array([]), np.array([]), np.array([], bool), 3, 0)
    assert np.isnan(empty.coverage) and np.isnan(empty.sd_estimate)


def test_empty_aggregate_rejected():
    with pytest.raises(StudyError):
        aggregate(small(), [])


def test_outputs_written(tmp_path):
    s = run_study(small())
    paths = write_study_outputs(s, tmp_path / "out")
    with open(paths["summary"]) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["model"] for r in rows] == list(FREQ)
    assert rows[0]["mean_bias"] and rows[0]["sd_estimate"]
    with open(paths["replicates"]) as fh:
        reps = list(csv.DictReader(fh))
    assert len(reps) == 8 and {r["status"] for r in reps} == {"ok"}
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["replicate_seeds"] == [replicate_seed(3, i) for i in range(4)]
    assert man["study"]["n"] == 60
    assert (tmp_path / "out" / "study_tables.txt").read_text().startswith("Coverage")


def test_bayesian_models_share_first_pass(monkeypatch):
    calls = []
    real = harness.fit_standard_spatial_bayes

    def spy(*a, **k):
        calls.append(a[2])
        return real(*a, **k)

    monkeypatch.setattr(harness, "fit_standard_spatial_bayes", spy)
    cfg = small(n=50, k_basis=8, n_replicates=1, models=("bayesian", "bayesian+"),
                mcmc=MCMCConfig(warmup=200, draws=200))
    res = run_replicate(cfg, 0)
    assert calls == [res.seed]
    plus = res.estimates["bayesian+"]
    assert plus.error is None and plus.extra["phi_hat"] > 0
    assert res.estimates["bayesian"].spread[0] > 0
