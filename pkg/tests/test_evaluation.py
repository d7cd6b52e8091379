import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vispath import DataError
from vispath.evaluation import (
    EvalConfig,
    ReportRow,
    audit_protocol,
    auc_of_cdf,
    bootstrap_error_cdf,
    compute_auc,
    derive_seed,
    distribution_from_rounds,
    evaluate,
    extract_features,
    random_baseline,
    random_rounds,
    read_report,
    run_leave_one_out,
    summarize_report,
)
from vispath.pathdata import Corpus, CorridorSpec, synthesize_corridor

from conftest import make_journey


@pytest.fixture(scope="module")
def tiny_features(tiny_corpus):
    return extract_features(tiny_corpus, "SF_GABOR")


def _config(**kw):
    base = dict(method="SF_GABOR", encoding="HA", metric="chi2", k=32, trials=500, seed=1, kmeans_max_iter=20)
    base.update(kw)
    return EvalConfig(**base)


def test_config_defaults():
    c = EvalConfig(method="SF_GABOR", encoding="VLAD")
    assert c.k == 256 and c.metric == "hellinger"
    assert EvalConfig().k == 4000 and EvalConfig().metric == "chi2"
    lw = EvalConfig(method="LW_COLOR", encoding="HA")
    assert lw.encoding == "RAW" and lw.k is None
    for bad in (dict(method="HOG3D"), dict(metric="l2"), dict(trials=0), dict(device_split="some")):
        with pytest.raises(ValueError):
            EvalConfig(**bad)


def test_derive_seed_stable():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert 0 <= derive_seed(5, "x") < 2**63


# --- bootstrap and AUC


def test_all_zero_errors():
    d = bootstrap_error_cdf(np.zeros(50), 200, seed=0, range_cm=100.0)
    assert np.all(d.cdf == 1.0) and d.auc == 1.0 and d.mu == 0.0


def test_bootstrap_mean_agreement():
    e = np.random.default_rng(0).exponential(80.0, 400)
    d = bootstrap_error_cdf(e, 10_000, seed=3, range_cm=1000.0)
    assert abs(d.boot_mean - e.mean()) / e.mean() < 0.01
    assert d.mu == pytest.approx(e.mean()) and d.sigma == pytest.approx(e.std())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 5000), min_size=1, max_size=60), st.integers(0, 2**31 - 1))
def test_cdf_monotone_terminal_one(errors, seed):
    d = bootstrap_error_cdf(errors, 50, seed=seed, range_cm=3000.0, grid_points=64)
    assert np.all(np.diff(d.cdf) >= -1e-12)
    assert d.cdf[-1] == pytest.approx(1.0)
    assert 0.0 <= d.auc <= 1.0
    assert np.all(d.cdf_std >= 0)


def test_uniform_errors_auc_half():
    e = np.random.default_rng(1).uniform(0, 1000, 5000)
    d = bootstrap_error_cdf(e, 200, seed=0, range_cm=1000.0)
    assert d.auc == pytest.approx(0.5, abs=0.01)
    assert compute_auc(d, 1000.0) == d.auc


def test_auc_closed_form():
    grid = np.linspace(0, 10, 11)
    assert auc_of_cdf(grid, grid / 10, 10.0) == pytest.approx(0.5)
    assert auc_of_cdf(grid, np.ones(11), 10.0) == 1.0
    with pytest.raises(ValueError):
        auc_of_cdf(grid, grid, 0.0)


def test_bootstrap_deterministic_and_seeded():
    e = np.random.default_rng(2).random(100) * 300
    a = bootstrap_error_cdf(e, 300, seed=7, range_cm=500.0)
    b = bootstrap_error_cdf(e, 300, seed=7, range_cm=500.0)
    c = bootstrap_error_cdf(e, 300, seed=8, range_cm=500.0)
    assert np.array_equal(a.cdf, b.cdf) and a.boot_mean == b.boot_mean
    assert not np.array_equal(a.cdf, c.cdf)


def test_bootstrap_rejects_empty():
    with pytest.raises(ValueError):
        bootstrap_error_cdf([], 10, 0)
    with pytest.raises(DataError):
        distribution_from_rounds([(np.array([]), 100.0)], 10, 0)


def test_distribution_auc_range_from_rounds():
    rounds = [(np.zeros(20), 100.0), (np.full(20, 50.0), 100.0)]
    d = distribution_from_rounds(rounds, 200, 0)
    assert d.auc_min == pytest.approx(0.5, abs=0.01) and d.auc_max == 1.0
    assert d.mu == 25.0


# --- RANDOM baseline


def _long_corpus(n=1200, length=3000.0):
    frames = [np.full((3, 16, 16), 0.5)] * n
    pos = np.linspace(0, length, n)
    js = [make_journey(frames, f"L_pass{p}", "L", ("nexus4", "glass")[p % 2], p, pos, length) for p in (1, 2, 3)]
    return Corpus(js)


def test_random_baseline_third_of_length():
    corpus = _long_corpus()
    d = random_baseline(corpus, seed=0, trials=200)
    assert 0.28 * 3000 <= d.mu <= 0.39 * 3000
    assert d.auc == pytest.approx(2 / 3, abs=0.03)
    again = random_baseline(corpus, seed=0, trials=200)
    assert np.array_equal(d.cdf, again.cdf) and d.mu == again.mu


def test_random_rounds_respect_device_split():
    rounds = random_rounds(_long_corpus(60), seed=1, device_split="cross")
    for r in rounds:
        assert all(dev != r.query_device for dev in r.database_devices)
        assert all(m.db_journey in r.database_ids for m in r.matches)


# --- leave-one-out protocol


def test_leave_one_out_rounds_and_audit(tiny_corpus, tiny_features):
    res = run_leave_one_out(tiny_corpus, _config(), tiny_features)
    assert len(res.rounds) == 4
    for r in res.rounds:
        assert len(r.database_ids) == 3 and r.query_id not in r.database_ids
        assert r.excluded_journey_id == r.query_id
        assert r.query_id not in r.training_journeys and len(r.training_journeys) == 3
        assert len(r.matches) == tiny_corpus.journey(r.query_id).frame_count
    assert audit_protocol(res) == []


def test_audit_detects_leak(tiny_corpus, tiny_features):
    from dataclasses import replace

    res = run_leave_one_out(tiny_corpus, _config(), tiny_features)
    bad = replace(res, rounds=(replace(res.rounds[0], training_journeys=(res.rounds[0].query_id,)),) + res.rounds[1:])
    assert any("training" in p for p in audit_protocol(bad))


def test_device_split_cross(tiny_corpus, tiny_features):
    res = run_leave_one_out(tiny_corpus, _config(device_split="cross"), tiny_features)
    assert len(res.rounds) == 4
    for r in res.rounds:
        assert len(r.database_ids) == 2
        assert all(dev != r.query_device for dev in r.database_devices)
    assert audit_protocol(res) == []


def test_device_split_within(tiny_corpus, tiny_features):
    res = run_leave_one_out(tiny_corpus, _config(device_split="within"), tiny_features)
    for r in res.rounds:
        assert r.database_devices == (r.query_device,)


def test_method_beats_random(tiny_corpus, tiny_features):
    res = run_leave_one_out(tiny_corpus, _config(), tiny_features)
    d = evaluate(res)
    rnd = random_baseline(tiny_corpus, seed=1, trials=500)
    assert d.mu < rnd.mu / 2
    assert d.auc > rnd.auc


def test_leave_one_out_jobs_deterministic(tiny_corpus, tiny_features):
    a = evaluate(run_leave_one_out(tiny_corpus, _config(), tiny_features, jobs=1))
    b = evaluate(run_leave_one_out(tiny_corpus, _config(), tiny_features, jobs=3))
    assert np.array_equal(a.cdf, b.cdf) and a.mu == b.mu and a.auc_runs == b.auc_runs


def test_raw_encoding_runs_without_codebook(tiny_corpus):
    cfg = _config(method="LW_COLOR", k=None)
    res = run_leave_one_out(tiny_corpus, cfg)
    assert all(r.training_journeys == () for r in res.rounds)
    assert audit_protocol(res) == []


def test_single_pass_corridor_skipped(tiny_corpus, tiny_features):
    lone = Corpus([tiny_corpus.journeys[0]])
    assert run_leave_one_out(lone, _config(), tiny_features).rounds == ()


@pytest.mark.slow
def test_blank_corridor_near_random():
    spec = CorridorSpec(corridor_id="blank", length_cm=1500, passes=3, size=(64, 40), supersample=1,
                        texture_richness=0.0)
    corpus = Corpus(synthesize_corridor(spec, seed=2))
    textured = Corpus(synthesize_corridor(CorridorSpec(**{**spec.__dict__, "texture_richness": 1.0}), seed=2))
    blank = evaluate(run_leave_one_out(corpus, _config()))
    rich = evaluate(run_leave_one_out(textured, _config()))
    rnd = random_baseline(corpus, seed=1, trials=500)
    assert blank.mu > 3 * rich.mu
    assert blank.mu > 0.5 * rnd.mu


# --- reports


def _row(method, mu, auc=(0.9, 0.95), external=False):
    return ReportRow(method, "chi2", "HA", 4000, mu, 10.0, auc[0], auc[1], 100, 0, external)


def test_single_row_report_echo():
    d = distribution_from_rounds([(np.array([10.0, 30.0]), 100.0)], 100, 0)
    row = ReportRow.from_distribution(d, "SF_GABOR", "chi2", "HA", 4000)
    rep = summarize_report([row])
    assert len(rep.rows) == 1
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("method,metric") and lines[1].startswith("SF_GABOR,chi2,HA,4000,20.000,10.000")


def test_report_sorted_and_external(tmp_path):
    rows = [_row("ST_GAUSS", 200.0), _row("SF_GABOR", 130.6), _row("HOG3D", 419.6, external=True)]
    rep = summarize_report(rows, "# stage=report\n")
    assert [r.method for r in rep.rows] == ["SF_GABOR", "ST_GAUSS", "HOG3D"]
    text = rep.to_text()
    assert "HOG3D *" in text and "external" in text
    (tmp_path / "r.csv").write_text(rep.to_csv())
    back = read_report(tmp_path / "r.csv")
    assert [r.mu_cm for r in back] == [130.6, 200.0, 419.6]
    with pytest.raises(ValueError):
        summarize_report([])
