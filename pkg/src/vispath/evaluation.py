"""Leave-one-journey-out protocol, bootstrap error CDFs, AUC and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import DataError
from .descriptors import check_method, extract_journey
from .encoding import DEFAULT_K, Codebook, encode_journey, sample_training_descriptors, train_codebook
from .pathdata import Corpus, Journey
from .retrieval import Match, build_score_matrix, localize_best_match

log = logging.getLogger(__name__)

DEVICE_SPLITS = ("within", "cross", "all")
DEFAULT_METRIC = {"HA": "chi2", "VLAD": "hellinger", "RAW": "chi2"}


def derive_seed(master: int, *parts) -> int:
    """Deterministic 63-bit substream seed from a master seed and labels."""
    key = "|".join([str(int(master))] + [str(p) for p in parts]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class EvalConfig:
    method: str = "SF_GABOR"
    encoding: str = "HA"
    metric: str | None = None
    k: int | None = None
    trials: int = 10_000
    seed: int = 0
    device_split: str = "all"
    grid_points: int = 512
    train_cap: int = 200_000
    kmeans_max_iter: int = 100
    codebook_scope: str = "corridor"  # or "global"
    query_sample: int | None = None  # None: every query frame

    def __post_init__(self):
        check_method(self.method)
        if self.method == "LW_COLOR":
            object.__setattr__(self, "encoding", "RAW")
        elif self.encoding not in ("HA", "VLAD"):
            raise ValueError(f"{self.method} needs HA or VLAD encoding, got {self.encoding!r}")
        if self.metric is None:
            object.__setattr__(self, "metric", DEFAULT_METRIC[self.encoding])
        if self.metric not in ("chi2", "hellinger"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.k is None and self.encoding != "RAW":
            object.__setattr__(self, "k", DEFAULT_K[self.encoding])
        if self.trials < 1:
            raise ValueError("bootstrap trials must be >= 1")
        if self.device_split not in DEVICE_SPLITS:
            raise ValueError(f"device split must be one of {DEVICE_SPLITS}")
        if self.codebook_scope not in ("corridor", "global"):
            raise ValueError("codebook scope must be 'corridor' or 'global'")

    @property
    def label(self) -> str:
        return f"{self.method}/{self.encoding}/{self.metric}"


# ---------------------------------------------------------------------------
# error distributions


@dataclass(frozen=True, eq=False)
class ErrorDistribution:
    errors: np.ndarray
    grid: np.ndarray
    cdf: np.ndarray
    cdf_std: np.ndarray
    mu: float
    sigma: float
    auc: float
    range_cm: float
    trials: int
    seed: int
    boot_mean: float
    boot_mean_std: float
    auc_runs: tuple[float, ...] = ()

    @property
    def auc_min(self) -> float:
        return min(self.auc_runs) if self.auc_runs else self.auc

    @property
    def auc_max(self) -> float:
        return max(self.auc_runs) if self.auc_runs else self.auc


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def auc_of_cdf(grid: np.ndarray, cdf: np.ndarray, range_cm: float, points: int | None = None) -> float:
    if range_cm <= 0:
        raise ValueError(f"AUC range must be positive, got {range_cm}")
    n = points or len(grid)
    x = np.linspace(0.0, range_cm, n)
    y = np.interp(x, grid, cdf, right=cdf[-1])
    return _trapezoid(y, x) / range_cm


def compute_auc(dist: ErrorDistribution, range_cm: float) -> float:
    """Normalized trapezoidal area under the CDF over [0, range_cm]."""
    return auc_of_cdf(dist.grid, dist.cdf, range_cm)


def bootstrap_error_cdf(
    errors: Sequence[float],
    trials: int,
    seed: int,
    range_cm: float | None = None,
    grid_points: int = 512,
) -> ErrorDistribution:
    """Average empirical CDF of |error| over ``trials`` resamples with replacement.

    The CDF grid spans [0, max(range_cm, max |error|)] so its last value is 1.
    """
    e = np.abs(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise ValueError("bootstrap needs at least one error sample")
    if trials < 1:
        raise ValueError("bootstrap trials must be >= 1")
    n = e.size
    top = float(e.max())
    if range_cm is None:
        range_cm = top if top > 0 else 1.0
    grid_max = max(range_cm, top)
    grid = np.linspace(0.0, grid_max, grid_points)
    bins = np.searchsorted(grid, e, side="left")  # e <= grid[j]  <=>  bins <= j
    rng = np.random.default_rng(seed)
    g1 = grid_points + 1
    cdf_sum = np.zeros(grid_points)
    cdf_sq = np.zeros(grid_points)
    means = np.empty(trials)
    chunk = max(1, min(trials, 2_000_000 // n))
    done = 0
    while done < trials:
        c = min(chunk, trials - done)
        idx = rng.integers(0, n, size=(c, n))
        means[done:done + c] = e[idx].mean(axis=1)
        flat = (bins[idx] + g1 * np.arange(c)[:, None]).ravel()
        counts = np.bincount(flat, minlength=c * g1).reshape(c, g1)
        rows = np.cumsum(counts[:, :grid_points], axis=1) / n
        cdf_sum += rows.sum(axis=0)
        cdf_sq += (rows * rows).sum(axis=0)
        done += c
    cdf = cdf_sum / trials
    cdf_std = np.sqrt(np.maximum(cdf_sq / trials - cdf * cdf, 0.0))
    return ErrorDistribution(
        errors=e,
        grid=grid,
        cdf=cdf,
        cdf_std=cdf_std,
        mu=float(e.mean()),
        sigma=float(e.std()),
        auc=auc_of_cdf(grid, cdf, range_cm),
        range_cm=float(range_cm),
        trials=trials,
        seed=seed,
        boot_mean=float(means.mean()),
        boot_mean_std=float(means.std()),
    )


# ---------------------------------------------------------------------------
# leave-one-out protocol


@dataclass(frozen=True, eq=False)
class RoundResult:
    corridor_id: str
    query_id: str
    query_device: str
    database_ids: tuple[str, ...]
    database_devices: tuple[str, ...]
    excluded_journey_id: str
    training_journeys: tuple[str, ...]
    length_cm: float
    matches: tuple[Match, ...]
    seed: int

    @property
    def errors(self) -> np.ndarray:
        return np.array([m.error_cm for m in self.matches if m.valid])


@dataclass(frozen=True, eq=False)
class LeaveOneOutResult:
    config: EvalConfig
    rounds: tuple[RoundResult, ...]

    @property
    def matches(self) -> list[Match]:
        return [m for r in self.rounds for m in r.matches]


def _device_ok(mode: str, query_device: str, db_device: str) -> bool:
    if mode == "within":
        return query_device == db_device
    if mode == "cross":
        return query_device != db_device
    return True


def _sample_queries(codes, n: int | None, seed: int):
    if n is None or n >= len(codes):
        return codes
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(codes), size=n, replace=False))
    return [codes[i] for i in keep]


FeatureMap = Mapping[str, Sequence]


def extract_features(corpus: Corpus, method: str, jobs: int = 1) -> dict[str, list]:
    return {j.journey_id: extract_journey(j, method, jobs=jobs) for j in corpus}


def run_leave_one_out(
    corpus: Corpus,
    config: EvalConfig,
    features: FeatureMap | None = None,
    jobs: int = 1,
    codebook_factory: Callable[..., Codebook] | None = None,
) -> LeaveOneOutResult:
    """Query every pass of every corridor against the remaining passes.

    The codebook of each round is trained without the query journey; the
    database is the corridor's other passes, filtered by ``config.device_split``.
    Rounds are independent and run on ``jobs`` threads; results are ordered
    by (corridor, pass) regardless.
    """
    if features is None:
        features = extract_features(corpus, config.method, jobs)
    groups = corpus.by_corridor()
    tasks = []
    for cid, journeys in groups.items():
        if len(journeys) < 2:
            log.warning("corridor %s has a single pass; skipped", cid)
            continue
        for q in journeys:
            tasks.append((cid, q, journeys))
    if codebook_factory is None:
        codebook_factory = _train_round_codebook

    def run(task):
        cid, q, journeys = task
        return _run_round(corpus, config, features, cid, q, journeys, codebook_factory)

    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    return LeaveOneOutResult(config, tuple(r for r in results if r is not None))


def _train_round_codebook(features, pool_ids, query_id, config: EvalConfig, seed: int) -> Codebook:
    pool = {jid: features[jid] for jid in pool_ids}
    vecs, prov, ids = sample_training_descriptors(pool, query_id, config.train_cap, seed)
    counts = np.bincount(prov, minlength=len(ids))
    return train_codebook(
        vecs,
        config.k,
        seed,
        method=config.method,
        max_iter=config.kmeans_max_iter,
        excluded_journey_id=query_id,
        training_counts={jid: int(c) for jid, c in zip(ids, counts) if c > 0},
    )


def _run_round(corpus, config, features, cid, q: Journey, journeys, codebook_factory) -> RoundResult | None:
    seed = derive_seed(config.seed, "round", cid, q.journey_id)
    db = [j for j in journeys if j.journey_id != q.journey_id and _device_ok(config.device_split, q.device_id, j.device_id)]
    if not db:
        log.warning("round %s/%s: no database journeys for device split %r; skipped", cid, q.journey_id, config.device_split)
        return None
    codebook = None
    training: tuple[str, ...] = ()
    if config.encoding != "RAW":
        pool_ids = [j.journey_id for j in (corpus.journeys if config.codebook_scope == "global" else journeys)]
        pool_ids = [jid for jid in pool_ids if jid != q.journey_id]
        codebook = codebook_factory(features, pool_ids, q.journey_id, config, seed)
        training = tuple(sorted(codebook.training_counts))
    q_codes = encode_journey(features[q.journey_id], config.encoding, codebook)
    q_codes = _sample_queries(q_codes, config.query_sample, derive_seed(seed, "queries"))
    db_codes = {j.journey_id: encode_journey(features[j.journey_id], config.encoding, codebook) for j in db}
    matrix = build_score_matrix(q_codes, db_codes, config.metric, query_id=q.journey_id)
    truth = {j.journey_id: j.positions_cm for j in db}
    matches = localize_best_match(matrix, truth, q.positions_cm)
    log.info("round %s/%s: %d queries, mean error %.1f cm", cid, q.journey_id, len(matches),
             np.mean([m.error_cm for m in matches if m.valid]) if matches else float("nan"))
    return RoundResult(
        corridor_id=cid,
        query_id=q.journey_id,
        query_device=q.device_id,
        database_ids=tuple(j.journey_id for j in db),
        database_devices=tuple(j.device_id for j in db),
        excluded_journey_id=codebook.excluded_journey_id if codebook is not None else q.journey_id,
        training_journeys=training,
        length_cm=float(q.length_cm),
        matches=tuple(matches),
        seed=seed,
    )


def audit_protocol(result: LeaveOneOutResult) -> list[str]:
    """Every way a round leaked its query journey into training or the database."""
    problems = []
    for r in result.rounds:
        if r.excluded_journey_id != r.query_id:
            problems.append(f"{r.query_id}: codebook excluded {r.excluded_journey_id!r}")
        if r.query_id in r.training_journeys:
            problems.append(f"{r.query_id}: present in codebook training provenance")
        if r.query_id in r.database_ids:
            problems.append(f"{r.query_id}: present in its own database")
        if any(m.db_journey == r.query_id for m in r.matches):
            problems.append(f"{r.query_id}: matched against itself")
        for dev in r.database_devices:
            if not _device_ok(result.config.device_split, r.query_device, dev):
                problems.append(f"{r.query_id}: database device {dev} violates split {result.config.device_split}")
    return problems


def distribution_from_rounds(
    rounds: Sequence[tuple[np.ndarray, float]],
    trials: int,
    seed: int,
    grid_points: int = 512,
    label: str = "",
) -> ErrorDistribution:
    """Pooled bootstrap distribution plus one AUC per round (each over its corridor length)."""
    rounds = [(np.asarray(e, dtype=np.float64), length) for e, length in rounds if len(e)]
    if not rounds:
        raise DataError("no localization errors to summarize")
    aucs = []
    for i, (e, length) in enumerate(rounds):
        d = bootstrap_error_cdf(e, trials, derive_seed(seed, label, "round", i), length, grid_points)
        aucs.append(d.auc)
    pooled = np.concatenate([e for e, _ in rounds])
    length = max(length for _, length in rounds)
    dist = bootstrap_error_cdf(pooled, trials, derive_seed(seed, label, "pooled"), length, grid_points)
    return replace(dist, auc_runs=tuple(aucs))


def evaluate(result: LeaveOneOutResult) -> ErrorDistribution:
    c = result.config
    return distribution_from_rounds(
        [(r.errors, r.length_cm) for r in result.rounds], c.trials, c.seed, c.grid_points, c.label
    )


def random_rounds(corpus: Corpus, seed: int, device_split: str = "all") -> list[RoundResult]:
    """Leave-one-out rounds whose estimates are uniformly random database frames."""
    out = []
    for cid, journeys in corpus.by_corridor().items():
        if len(journeys) < 2:
            continue
        for q in journeys:
            db = [j for j in journeys if j.journey_id != q.journey_id and _device_ok(device_split, q.device_id, j.device_id)]
            if not db:
                continue
            rseed = derive_seed(seed, "random", cid, q.journey_id)
            rng = np.random.default_rng(rseed)
            pos = np.concatenate([j.positions_cm for j in db])
            owner = np.concatenate([np.full(j.frame_count, i) for i, j in enumerate(db)])
            frame = np.concatenate([np.arange(j.frame_count) for j in db])
            pick = rng.integers(0, len(pos), size=q.frame_count)
            matches = tuple(
                Match(i, db[owner[p]].journey_id, int(frame[p]), float("nan"), float(pos[p]), float(q.positions_cm[i]))
                for i, p in enumerate(pick)
            )
            out.append(RoundResult(cid, q.journey_id, q.device_id, tuple(j.journey_id for j in db),
                                   tuple(j.device_id for j in db), q.journey_id, (), float(q.length_cm), matches, rseed))
    return out


def random_baseline(
    corpus: Corpus,
    seed: int,
    trials: int = 10_000,
    device_split: str = "all",
    grid_points: int = 512,
) -> ErrorDistribution:
    """RANDOM sanity floor: each query frame takes a uniformly random database frame's position."""
    rounds = random_rounds(corpus, seed, device_split)
    return distribution_from_rounds([(r.errors, r.length_cm) for r in rounds], trials, seed, grid_points, "RANDOM")


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ReportRow:
    method: str
    metric: str
    encoding: str
    k: int | None
    mu_cm: float
    sigma_cm: float
    auc_min: float
    auc_max: float
    trials: int
    seed: int
    external: bool = False

    @classmethod
    def from_distribution(cls, dist: ErrorDistribution, method, metric, encoding, k=None) -> "ReportRow":
        return cls(method, metric, encoding, k, dist.mu, dist.sigma, dist.auc_min, dist.auc_max, dist.trials, dist.seed)


REPORT_FIELDS = ["method", "metric", "encoding", "K", "mu_cm", "sigma_cm", "auc_min", "auc_max", "trials", "seed"]


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)
    header: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.rows:
            w.writerow([r.method, r.metric, r.encoding, "" if r.k is None else r.k, f"{r.mu_cm:.3f}",
                        f"{r.sigma_cm:.3f}", f"{100 * r.auc_min:.2f}", f"{100 * r.auc_max:.2f}", r.trials, r.seed])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["Method", "Metric", "Encoding", "mu (cm)", "sigma (cm)", "AUC min %", "AUC max %"]
        body = [[r.method + (" *" if r.external else ""), r.metric, r.encoding + (f"-{r.k}" if r.k else ""),
                 f"{r.mu_cm:.1f}", f"{r.sigma_cm:.1f}", f"{100 * r.auc_min:.2f}", f"{100 * r.auc_max:.2f}"]
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
        if any(r.external for r in self.rows):
            lines.append("* external result, not computed by this run")
        return "\n".join(lines) + "\n"


def summarize_report(rows: Sequence[ReportRow], header: str = "") -> Report:
    """Rows sorted by mean absolute error (ties by method, metric)."""
    if not rows:
        raise ValueError("report needs at least one row")
    return Report(sorted(rows, key=lambda r: (r.mu_cm, r.method, r.metric, r.encoding)), header)


def read_report(path: str | Path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(ReportRow(rec["method"], rec["metric"], rec["encoding"], int(rec["K"]) if rec["K"] else None,
                              float(rec["mu_cm"]), float(rec["sigma_cm"]), float(rec["auc_min"]) / 100,
                              float(rec["auc_max"]) / 100, int(rec["trials"]), int(rec["seed"])))
    return rows


def write_cdf(path: str | Path, dist: ErrorDistribution, header: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("error_cm,cdf,cdf_std\n")
        for x, y, s in zip(dist.grid, dist.cdf, dist.cdf_std):
            fh.write(f"{x:.4f},{y:.6f},{s:.6f}\n")


def write_trace(path: str | Path, matches: Sequence[Match], header: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("query_frame,truth_cm,est_cm\n")
        for m in matches:
            fh.write(f"{m.query_frame},{m.truth_cm:.3f},{m.estimated_cm:.3f}\n")
