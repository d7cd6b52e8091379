"""Acceptance criteria 1-11, one test each; every test records a PASS/FAIL line."""

import csv
import time

import numpy as np
import pytest

from vispath import cli
from vispath.descriptors import DIMS, extract_journey
from vispath.encoding import (
    FrameCode,
    encode_bow,
    encode_journey,
    nearest_centers,
    sample_training_descriptors,
    train_codebook,
    vlad_residuals,
)
from vispath.evaluation import (
    DEFAULT_METRIC,
    EvalConfig,
    audit_protocol,
    bootstrap_error_cdf,
    random_baseline,
    run_leave_one_out,
)
from vispath.imgproc import convolve2d, dense_grid
from vispath.pathdata import Corpus, CorridorSpec, synthesize_corridor
from vispath.retrieval import build_score_matrix, chi2_distance, hellinger_distance, localize_best_match

from conftest import make_journey, record_acceptance
from test_encoding import _codebook, _ds, brute_nearest
from test_imgproc import brute_convolve

DENSE = ("DSIFT", "SF_GABOR", "ST_GABOR", "ST_GAUSS")


def _check(number, ok, detail):
    record_acceptance(number, bool(ok), detail)
    assert ok, detail


@pytest.fixture(scope="module")
def corpus3():
    return Corpus(synthesize_corridor(CorridorSpec(corridor_id="acc", length_cm=800, passes=3), seed=21))


@pytest.fixture(scope="module")
def features3(corpus3):
    t0 = time.perf_counter()
    feats = {m: {j.journey_id: extract_journey(j, m) for j in corpus3} for m in sorted(DIMS)}
    return feats, time.perf_counter() - t0


def test_criterion_01_dimensions(corpus3, features3):
    feats, seconds = features3
    bad = []
    frames = 0
    for method, per_journey in feats.items():
        for jid, sets in per_journey.items():
            frames += len(sets)
            bad += [(method, jid, ds.frame_index) for ds in sets if ds.vectors.shape[1] != DIMS[method]]
    expected = {"DSIFT": 128, "SF_GABOR": 136, "LW_COLOR": 144, "ST_GABOR": 221, "ST_GAUSS": 136}
    ok = not bad and DIMS == expected and seconds < 60 and frames > 0
    _check(1, ok, f"{frames} frame descriptor sets over 5 methods, {len(bad)} wrong dims, extraction {seconds:.1f}s")


def test_criterion_02_density(features3):
    feats, _ = features3
    counts = [len(ds) for m in DENSE for sets in feats[m].values() for ds in sets]
    grid = len(dense_grid(117, 208))
    ok = all(1400 <= c <= 2800 for c in counts) and 1400 <= grid <= 2800
    _check(2, ok, f"descriptors per frame in [{min(counts)}, {max(counts)}] (grid {grid})")


def test_criterion_03_oracles():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        kh, kw = rng.integers(1, 8, size=2)
        plane = rng.normal(size=(rng.integers(kh, 20), rng.integers(kw, 20)))
        kernel = rng.normal(size=(kh, kw))
        got, ref = convolve2d(plane, kernel), brute_convolve(plane, kernel)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))))
    centers = rng.random((500, 64))
    desc = rng.random((1000, 64))
    desc[:100] = centers[rng.integers(0, 500, 100)]
    assign_ok = np.array_equal(nearest_centers(desc, centers), brute_nearest(desc, centers))
    h = rng.random((60, 40)) * (rng.random((60, 40)) < 0.5) + 1e-4
    h /= h.sum(axis=1, keepdims=True)
    codes = lambda rows: [FrameCode("HA", i, r) for i, r in enumerate(rows)]
    exact = True
    for metric, fn in (("chi2", chi2_distance), ("hellinger", hellinger_distance)):
        m = build_score_matrix(codes(h[:20]), {"d": codes(h[20:])}, metric)
        for _ in range(100):
            i, j = rng.integers(20), rng.integers(40)
            exact &= m.values[i, j] == fn(h[i], h[20 + j])
    ok = worst <= 1e-10 and assign_ok and exact
    _check(3, ok, f"convolution max rel err {worst:.2e}; assignment exact={assign_ok}; score matrix exact={exact}")


def test_criterion_04_metric_axioms():
    rng = np.random.default_rng(404)
    violations = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 64))
        a = rng.random(n) * (rng.random(n) < 0.7)
        b = rng.random(n) * (rng.random(n) < 0.7)
        if rng.random() < 0.5:
            a, b = a / max(a.sum(), 1e-12), b / max(b.sum(), 1e-12)
        for d in (chi2_distance, hellinger_distance):
            ab, ba = d(a, b), d(b, a)
            violations += (ab < 0) + (ab != ba) + (d(a, a) != 0)
        violations += chi2_distance(a, b) > (a.sum() + b.sum()) / 2
    # the 1e-12 denominator guard shifts the closed form by about 1e-12
    chi_closed = chi2_distance([1, 0], [0, 1])
    hel_closed = hellinger_distance([1, 0], [0, 1])
    ok = violations == 0 and abs(chi_closed - 1) < 1e-9 and abs(hel_closed - np.sqrt(2)) < 1e-12
    _check(4, ok, f"10000 pairs, {violations} axiom violations; chi2(e1,e2)={chi_closed}, hellinger={hel_closed:.12f}")


def test_criterion_05_encoder_invariants():
    rng = np.random.default_rng(505)
    centers = rng.random((32, 16))
    cb = _codebook(centers)
    zero = not vlad_residuals(_ds(centers[rng.integers(0, 32, 40)]), cb).any()
    a, b = rng.random((70, 16)), rng.random((50, 16))
    add_err = float(np.abs(vlad_residuals(_ds(np.vstack([a, b])), cb)
                           - vlad_residuals(_ds(a), cb) - vlad_residuals(_ds(b), cb)).max())
    l1 = max(abs(encode_bow(_ds(rng.random((int(rng.integers(1, 300)), 16))), cb).vector.sum() - 1) for _ in range(50))
    non_monotone = 0
    for run in range(50):
        x = rng.normal(size=(300, 8)) * rng.random(8)
        log = train_codebook(x, int(rng.integers(2, 40)), seed=run, max_iter=40).distortion_log
        non_monotone += any(b > a for a, b in zip(log, log[1:]))
    ok = zero and add_err <= 1e-8 and l1 <= 1e-10 and non_monotone == 0
    _check(5, ok, f"VLAD zero={zero}, additivity err {add_err:.1e}, HA |L1-1| max {l1:.1e}, "
                  f"{non_monotone}/50 non-monotone k-means runs")


def test_criterion_06_protocol_audit():
    spec = CorridorSpec(corridor_id="audit", length_cm=600, passes=5, size=(64, 40), supersample=1)
    corpus = Corpus(synthesize_corridor(spec, seed=6))
    problems, rounds = [], 0
    for split in ("all", "within", "cross"):
        cfg = EvalConfig(method="SF_GABOR", encoding="HA", k=24, trials=100, device_split=split, kmeans_max_iter=10)
        res = run_leave_one_out(corpus, cfg)
        rounds += len(res.rounds)
        problems += audit_protocol(res)
    _check(6, not problems and rounds == 15, f"{rounds} leave-one-out rounds over 3 device splits, "
                                            f"{len(problems)} leaks found")


def test_criterion_07_self_retrieval(corpus3, features3):
    feats, _ = features3
    worst = (2.0, "")
    combos = 0
    for method in sorted(DIMS):
        encodings = ["RAW"] if method == "LW_COLOR" else ["HA", "VLAD"]
        for enc in encodings:
            cb = None
            if enc != "RAW":
                vecs, _, _ = sample_training_descriptors(feats[method], (), 20_000, seed=7)
                cb = train_codebook(vecs, 256 if enc == "HA" else 32, seed=7, method=method, max_iter=10)
            codes = {jid: encode_journey(sets, enc, cb) for jid, sets in feats[method].items()}
            truth = {j.journey_id: j.positions_cm for j in corpus3}
            for q in corpus3:
                m = build_score_matrix(codes[q.journey_id], codes, DEFAULT_METRIC[enc], query_id=q.journey_id)
                matches = localize_best_match(m, truth, q.positions_cm)
                self_cols = {int(f): c for c, (j, f) in enumerate(zip(m.column_journey, m.column_frame))
                             if m.database_ids[j] == q.journey_id}
                hits = [mt.error_cm == 0 or m.values[r, self_cols[mt.query_frame]] == m.values[r].min()
                        for r, mt in enumerate(matches)]
                frac = float(np.mean(hits))
                worst = min(worst, (frac, f"{method}/{enc}/{q.journey_id}"))
            combos += 1
    _check(7, worst[0] >= 0.99 and combos == 9, f"{combos} method x encoding combinations; "
                                                f"worst self-retrieval rate {worst[0]:.3f} ({worst[1]})")


E2E_CONFIG = """\
methods = SF_GABOR
encodings = HA
metrics = chi2
k_ha = 4000
trials = 10000
seed = 7
train_cap = 50000
kmeans_max_iter = 25
cache = false
include_random = true
synth.corridor_id = corridor1
synth.length_cm = 5000
synth.passes = 5
"""


@pytest.mark.slow
def test_criterion_08_end_to_end(tmp_path):
    (tmp_path / "e2e.cfg").write_text(E2E_CONFIG)
    t0 = time.perf_counter()
    code = cli.main(["run", "--config", str(tmp_path / "e2e.cfg"), "--out", str(tmp_path / "out")])
    minutes = (time.perf_counter() - t0) / 60
    assert code == 0
    with open(tmp_path / "out" / "report.csv") as fh:
        rows = {r["method"]: r for r in csv.DictReader(ln for ln in fh if not ln.startswith("#"))}
    sf, rnd = rows["SF_GABOR"], rows["RANDOM"]
    mu, mu_r = float(sf["mu_cm"]), float(rnd["mu_cm"])
    auc_lo, auc_r_hi = float(sf["auc_min"]), float(rnd["auc_max"])
    ok = mu <= mu_r / 3 and auc_lo > auc_r_hi and minutes <= 15
    _check(8, ok, f"SF_GABOR+HA-4000+chi2 mu={mu:.1f} cm vs RANDOM {mu_r:.1f} cm (ratio {mu / mu_r:.3f}); "
                  f"AUC {auc_lo:.2f}-{float(sf['auc_max']):.2f}% vs RANDOM max {auc_r_hi:.2f}%; {minutes:.1f} min")


def test_criterion_09_statistics():
    rng = np.random.default_rng(909)
    e = rng.gamma(2.0, 60.0, 500)
    d = bootstrap_error_cdf(e, 10_000, seed=1, range_cm=2000.0)
    mean_rel = abs(d.boot_mean - e.mean()) / e.mean()
    monotone = bool(np.all(np.diff(d.cdf) >= 0)) and d.cdf[-1] == pytest.approx(1.0)
    u = bootstrap_error_cdf(rng.uniform(0, 1000, 20_000), 100, seed=2, range_cm=1000.0)
    length = 5000.0
    n = 1500
    frames = [np.full((3, 16, 16), 0.5)] * n
    pos = np.linspace(0, length, n)
    corpus = Corpus([make_journey(frames, f"r{p}", "R", "nexus4", p, pos, length) for p in (1, 2, 3)])
    rnd = random_baseline(corpus, seed=3, trials=200)
    ratio = rnd.mu / length
    ok = mean_rel < 0.01 and monotone and abs(u.auc - 0.5) <= 0.01 and 0.28 <= ratio <= 0.39
    _check(9, ok, f"bootstrap mean rel err {mean_rel:.2e}; CDF monotone, ends at {d.cdf[-1]:.6f}; "
                  f"uniform AUC {u.auc:.4f}; RANDOM mu/R {ratio:.3f} at n={len(rnd.errors)}")


def test_criterion_10_dataset_scale():
    record_acceptance(10, None, "optional; the RSM dataset is not available in this environment")
    pytest.skip("dataset-scale criterion needs the RSM recordings")


DETERMINISM_CONFIG = """\
methods = SF_GABOR, ST_GAUSS
encodings = HA, VLAD
metrics = chi2, hellinger
k_ha = 48
k_vlad = 8
trials = 1000
seed = 11
train_cap = 20000
kmeans_max_iter = 15
frame_width = 64
frame_height = 40
synth.length_cm = 800
synth.passes = 4
synth.supersample = 1
"""


def test_criterion_11_determinism(tmp_path):
    (tmp_path / "det.cfg").write_text(DETERMINISM_CONFIG)
    reports = []
    for name, jobs in (("a", "1"), ("b", "1"), ("c", "3")):
        out = tmp_path / name
        assert cli.main(["run", "--config", str(tmp_path / "det.cfg"), "--out", str(out), "--jobs", jobs]) == 0
        reports.append((out / "report.csv").read_bytes())
    rows = len(reports[0].decode().splitlines()) - 2
    ok = reports[0] == reports[1] == reports[2] and rows == 7
    _check(11, ok, f"3 runs (jobs 1, 1, 3) of a {rows}-row report: byte-identical={ok}")
