"""Command-line front end: synth, extract, train, encode, index, query, eval, report, run."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import DataError, __version__
from .descriptors import DIMS, extract_journey, read_descriptor_dump, write_descriptor_dump
from .encoding import (
    DEFAULT_K,
    encode_journey,
    read_codebook,
    read_codes,
    sample_training_descriptors,
    train_codebook,
    write_codebook,
    write_codes,
)
from .evaluation import (
    DEFAULT_METRIC,
    DEVICE_SPLITS,
    EvalConfig,
    ReportRow,
    derive_seed,
    distribution_from_rounds,
    random_rounds,
    read_report,
    run_leave_one_out,
    summarize_report,
    write_cdf,
    write_trace,
)
from .pathdata import Corpus, CorridorSpec, load_corpus, load_journey, synthesize_corridor, write_corpus
from .retrieval import build_score_matrix, localize_best_match, write_matches

log = logging.getLogger("vispath")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
# bump when an extractor's output changes so stale cache entries are ignored
EXTRACTOR_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("stage %s: done in %.1fs", name, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    dataset: str = ""
    methods: list[str] = field(default_factory=lambda: ["SF_GABOR"])
    encodings: list[str] = field(default_factory=lambda: ["HA"])
    metrics: list[str] = field(default_factory=lambda: ["chi2"])
    k_ha: int = DEFAULT_K["HA"]
    k_vlad: int = DEFAULT_K["VLAD"]
    seed: int = 0
    trials: int = 10_000
    out: str = "results"
    cache: bool = True
    cache_dir: str = ""
    device_split: str = "all"
    include_random: bool = True
    train_cap: int = 200_000
    kmeans_max_iter: int = 100
    codebook_scope: str = "corridor"
    query_sample: int = 0
    frame_width: int = 208
    frame_height: int = 117
    synth: dict = field(default_factory=dict)

    # keys that never change results
    VOLATILE = ("out", "cache", "cache_dir")

    def validate(self) -> "RunConfig":
        for m in self.methods:
            if m not in DIMS:
                raise DataError(f"config: unknown method {m!r}")
        for e in self.encodings:
            if e not in ("HA", "VLAD"):
                raise DataError(f"config: unknown encoding {e!r}")
        for m in self.metrics:
            if m not in ("chi2", "hellinger"):
                raise DataError(f"config: unknown metric {m!r}")
        if self.device_split not in DEVICE_SPLITS:
            raise DataError(f"config: device_split must be one of {DEVICE_SPLITS}")
        if self.dataset and not Path(self.dataset).exists():
            raise DataError(f"config: dataset path does not exist: {self.dataset}")
        if self.trials < 1:
            raise DataError("config: trials must be >= 1")
        corridor_spec(self.synth)
        return self

    def resolved_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "synth":
                spec = asdict(corridor_spec(v))
                for k in sorted(spec):
                    if k == "size":  # frames always use frame_width x frame_height
                        continue
                    lines.append(f"synth.{k} = {_fmt(spec[k])}")
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        text = "\n".join(ln for ln in self.resolved_text().splitlines() if ln.split(" = ")[0] not in self.VOLATILE)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def eval_configs(self) -> list[EvalConfig]:
        out, seen = [], set()
        for method in self.methods:
            for enc in (["RAW"] if method == "LW_COLOR" else self.encodings):
                for metric in self.metrics:
                    key = (method, enc, metric)
                    if key in seen:
                        continue
                    if enc == "VLAD" and metric == "chi2":
                        log.warning("skipping %s/VLAD/chi2: chi-squared needs non-negative codes", method)
                        continue
                    seen.add(key)
                    out.append(EvalConfig(
                        method=method,
                        encoding="HA" if enc == "RAW" else enc,
                        metric=metric,
                        k=None if enc == "RAW" else (self.k_ha if enc == "HA" else self.k_vlad),
                        trials=self.trials,
                        seed=self.seed,
                        device_split=self.device_split,
                        train_cap=self.train_cap,
                        kmeans_max_iter=self.kmeans_max_iter,
                        codebook_scope=self.codebook_scope,
                        query_sample=self.query_sample or None,
                    ))
        return out


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise DataError(f"config: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is list:
        return [x.strip() for x in raw.split(",") if x.strip()]
    return raw


_SYNTH_TYPES = {
    "corridor_id": str, "length_cm": float, "passes": int, "fps": float, "texture_richness": float,
    "noise_level": float, "jitter": float, "width_cm": float, "height_cm": float, "supersample": int,
}


def corridor_spec(synth: dict) -> CorridorSpec:
    kw = {}
    for key, raw in synth.items():
        if key == "speed_range_cm_s":
            lo, hi = (float(x) for x in str(raw).split(","))
            kw[key] = (lo, hi)
        elif key == "devices":
            kw[key] = tuple(x.strip() for x in str(raw).split(",") if x.strip())
        elif key in _SYNTH_TYPES:
            kw[key] = _SYNTH_TYPES[key](raw)
        else:
            raise DataError(f"config: unknown synthetic corridor key synth.{key}")
    return CorridorSpec(**kw)


def parse_config_text(text: str, base: Path | None = None) -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment; lists are comma-separated."""
    cfg = RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    kinds = {"list[str]": list, "int": int, "bool": bool, "str": str, "dict": dict}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"config line {lineno}: expected key = value")
        key = key.strip()
        if key.startswith("synth."):
            cfg.synth[key[6:]] = value.strip()
            continue
        if key not in types or key == "synth":
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _parse_value(value, kinds[str(types[key])]))
        except ValueError as exc:
            raise DataError(f"config line {lineno}: {exc}") from None
    if base is not None:
        for key in ("dataset", "out", "cache_dir"):
            v = getattr(cfg, key)
            if v and not Path(v).is_absolute():
                setattr(cfg, key, str(base / v))
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), path.parent)


# ---------------------------------------------------------------------------
# corpus and cached stages


def get_corpus(cfg: RunConfig) -> Corpus:
    size = (cfg.frame_width, cfg.frame_height)
    if cfg.dataset:
        return load_corpus(cfg.dataset, size)
    spec = replace(corridor_spec(cfg.synth), size=size)
    log.info("no dataset configured; synthesizing %s (%.0f cm, %d passes)", spec.corridor_id, spec.length_cm, spec.passes)
    return Corpus(synthesize_corridor(spec, cfg.seed))


def _cache_root(cfg: RunConfig) -> Path | None:
    if not cfg.cache:
        return None
    root = Path(cfg.cache_dir) if cfg.cache_dir else Path(cfg.out) / "cache"
    root.mkdir(parents=True, exist_ok=True)
    return root


def _key(*parts) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()[:24]


def extract_cached(corpus: Corpus, method: str, cfg: RunConfig, jobs: int = 1) -> tuple[dict, dict]:
    """Descriptors per journey, reusing dump files keyed by journey content and method.

    Returns (features, keys) where keys are the cache keys of each journey.
    """
    root = _cache_root(cfg)
    feats, keys = {}, {}
    for j in corpus:
        key = _key("descriptors", EXTRACTOR_VERSION, method, j.content_hash())
        keys[j.journey_id] = key
        if root is None:
            feats[j.journey_id] = extract_journey(j, method, jobs=jobs)
            continue
        path = root / "descriptors" / f"{key}.vpd"
        if path.is_file():
            log.info("extraction cache hit: %s %s; extraction skipped", j.journey_id, method)
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            sets = extract_journey(j, method, jobs=jobs)
            tmp = path.with_suffix(".tmp")
            write_descriptor_dump(tmp, sets)
            tmp.replace(path)
        feats[j.journey_id] = read_descriptor_dump(path)
    return feats, keys


def _codebook_factory(cfg: RunConfig, feature_keys: dict):
    root = _cache_root(cfg)

    def factory(features, pool_ids, query_id, config: EvalConfig, seed: int):
        pool = {jid: features[jid] for jid in pool_ids}
        key = _key("codebook", config.method, config.k, seed, config.train_cap, config.kmeans_max_iter, query_id,
                   *sorted(feature_keys[j] for j in pool_ids))
        path = root / "codebooks" / f"{key}.vpcb" if root is not None else None
        if path is not None and path.is_file():
            log.info("codebook cache hit: %s excluding %s", config.method, query_id)
            return read_codebook(path)
        vecs, prov, ids = sample_training_descriptors(pool, query_id, config.train_cap, seed)
        counts = np.bincount(prov, minlength=len(ids))
        cb = train_codebook(vecs, config.k, seed, method=config.method, max_iter=config.kmeans_max_iter,
                            excluded_journey_id=query_id,
                            training_counts={jid: int(c) for jid, c in zip(ids, counts) if c > 0})
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            write_codebook(path, cb)
            cb = read_codebook(path)  # identical float32 centers whether cached or fresh
        return cb

    return factory


def _header(stage_name: str, cfg: RunConfig) -> str:
    return f"# stage={stage_name} config={cfg.digest()} vispath={__version__}\n"


def _label(ec: EvalConfig) -> str:
    return f"{ec.method}_{ec.encoding}_{ec.metric}"


# ---------------------------------------------------------------------------
# commands


def command_synth(cfg: RunConfig, seed: int, out_dir: Path) -> list[Path]:
    spec = replace(corridor_spec(cfg.synth), size=(cfg.frame_width, cfg.frame_height))
    journeys = synthesize_corridor(spec, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_corpus(journeys, out_dir)


def command_eval(cfg: RunConfig, jobs: int = 1) -> Path:
    """Leave-one-out runs for every configured combination; writes per-round errors, matches and traces."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.resolved_text())
    with stage("load"):
        corpus = get_corpus(cfg)
    err_dir = out / "errors"
    err_dir.mkdir(exist_ok=True)
    by_method: dict[str, list[EvalConfig]] = {}
    for ec in cfg.eval_configs():
        by_method.setdefault(ec.method, []).append(ec)
    for method, ecs in by_method.items():
        with stage(f"extract:{method}"):
            feats, keys = extract_cached(corpus, method, cfg, jobs)
        for ec in ecs:
            with stage(f"evaluate:{_label(ec)}"):
                res = run_leave_one_out(corpus, ec, feats, jobs=jobs, codebook_factory=_codebook_factory(cfg, keys))
                _write_rounds(err_dir / f"{_label(ec)}.csv", res.rounds, ec, cfg)
                for r in res.rounds:
                    write_matches(_mkdir(out / "matches" / _label(ec)) / f"{r.query_id}.csv", r.matches,
                                  _header("retrieve", cfg))
                    write_trace(_mkdir(out / "traces" / _label(ec)) / f"{r.query_id}.csv", r.matches,
                                _header("retrieve", cfg))
    if cfg.include_random:
        with stage("evaluate:RANDOM"):
            rounds = random_rounds(corpus, cfg.seed, cfg.device_split)
            rec = EvalConfig(method="SF_GABOR", trials=cfg.trials, seed=cfg.seed)
            _write_rounds(err_dir / "RANDOM.csv", rounds, rec, cfg, method="RANDOM", metric="-", encoding="-")
    return out


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


ROUND_FIELDS = ["method", "encoding", "metric", "K", "corridor", "query", "length_cm", "query_frame", "error_cm"]


def _write_rounds(path: Path, rounds, ec: EvalConfig, cfg: RunConfig, method=None, metric=None, encoding=None):
    with open(path, "w", newline="") as fh:
        fh.write(_header("evaluate", cfg))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_FIELDS)
        for r in rounds:
            for m in r.matches:
                if m.valid:
                    w.writerow([method or ec.method, encoding or ec.encoding, metric or ec.metric,
                                "" if (ec.k is None or method == "RANDOM") else ec.k, r.corridor_id, r.query_id,
                                repr(r.length_cm), m.query_frame, repr(m.error_cm)])


def command_report(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    labels = [_label(ec) for ec in cfg.eval_configs()] + (["RANDOM"] if cfg.include_random else [])
    err_files = [out / "errors" / f"{label}.csv" for label in labels]
    missing = [p.name for p in err_files if not p.is_file()]
    if missing:
        raise DataError(f"missing evaluation outputs under {out / 'errors'}: {', '.join(missing)}; run 'eval' first")
    rows = []
    cdf_dir = _mkdir(out / "cdf")
    for path in err_files:
        with open(path, newline="") as fh:
            recs = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
        if not recs:
            continue
        groups: dict[tuple, list] = {}
        for rec in recs:
            groups.setdefault((rec["corridor"], rec["query"], float(rec["length_cm"])), []).append(float(rec["error_cm"]))
        first = recs[0]
        label = "RANDOM" if first["method"] == "RANDOM" else f"{first['method']}/{first['encoding']}/{first['metric']}"
        dist = distribution_from_rounds([(np.array(v), k[2]) for k, v in groups.items()], cfg.trials, cfg.seed,
                                        label=label)
        write_cdf(cdf_dir / f"{path.stem}.csv", dist, _header("report", cfg))
        rows.append(ReportRow.from_distribution(dist, first["method"], first["metric"], first["encoding"],
                                                int(first["K"]) if first["K"] else None))
    external = out / "external.csv"
    if external.is_file():
        rows += [replace(r, external=True) for r in read_report(external)]
    report = summarize_report(rows, _header("report", cfg))
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    return out / "report.csv"


def command_run(cfg: RunConfig, jobs: int = 1) -> Path:
    command_eval(cfg, jobs)
    with stage("report"):
        return command_report(cfg)


def command_train(cfg: RunConfig, method: str, encoding: str, exclude: str, out_path: Path, jobs: int = 1) -> Path:
    corpus = get_corpus(cfg)
    with stage(f"extract:{method}"):
        feats, _ = extract_cached(corpus, method, cfg, jobs)
    if exclude and exclude not in feats:
        raise DataError(f"unknown journey to exclude: {exclude}")
    k = cfg.k_ha if encoding == "HA" else cfg.k_vlad
    seed = derive_seed(cfg.seed, "train", method, exclude)
    with stage("train"):
        vecs, prov, ids = sample_training_descriptors(feats, exclude or (), cfg.train_cap, seed)
        counts = np.bincount(prov, minlength=len(ids))
        cb = train_codebook(vecs, k, seed, method=method, max_iter=cfg.kmeans_max_iter, excluded_journey_id=exclude,
                            training_counts={jid: int(c) for jid, c in zip(ids, counts) if c > 0})
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_codebook(out_path, cb)
    return out_path


def command_encode(cfg: RunConfig, method: str, encoding: str, codebook_path: Path | None, out_dir: Path,
                   jobs: int = 1) -> list[Path]:
    corpus = get_corpus(cfg)
    with stage(f"extract:{method}"):
        feats, _ = extract_cached(corpus, method, cfg, jobs)
    cb = read_codebook(codebook_path) if codebook_path else None
    if cb is not None and cb.method and cb.method != method:
        raise DataError(f"codebook was trained for {cb.method}, not {method}")
    enc = "RAW" if method == "LW_COLOR" else encoding
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with stage("encode"):
        for jid in sorted(feats):
            p = out_dir / f"{jid}.{method}.{enc}.npz"
            write_codes(p, encode_journey(feats[jid], enc, cb), method=method, journey_id=jid)
            paths.append(p)
    return paths


def command_index(cfg: RunConfig, method: str, encoding: str, metric: str | None, out_dir: Path,
                  jobs: int = 1) -> Path:
    """Codebook over every journey plus database codes and positions."""
    corpus = get_corpus(cfg)
    enc = "RAW" if method == "LW_COLOR" else encoding
    metric = metric or DEFAULT_METRIC[enc]
    out_dir.mkdir(parents=True, exist_ok=True)
    with stage(f"extract:{method}"):
        feats, _ = extract_cached(corpus, method, cfg, jobs)
    cb = None
    if enc != "RAW":
        with stage("train"):
            k = cfg.k_ha if enc == "HA" else cfg.k_vlad
            seed = derive_seed(cfg.seed, "index", method)
            vecs, prov, ids = sample_training_descriptors(feats, (), cfg.train_cap, seed)
            counts = np.bincount(prov, minlength=len(ids))
            cb = train_codebook(vecs, k, seed, method=method, max_iter=cfg.kmeans_max_iter,
                                training_counts={jid: int(c) for jid, c in zip(ids, counts) if c > 0})
            write_codebook(out_dir / "codebook.vpcb", cb)
            cb = read_codebook(out_dir / "codebook.vpcb")
    with stage("encode"):
        _mkdir(out_dir / "codes")
        for j in corpus:
            write_codes(out_dir / "codes" / f"{j.journey_id}.npz", encode_journey(feats[j.journey_id], enc, cb),
                        method=method, journey_id=j.journey_id)
            np.save(out_dir / "codes" / f"{j.journey_id}.positions.npy", j.positions_cm)
    meta = {"method": method, "encoding": enc, "metric": metric, "k": cb.k if cb else None,
            "journeys": sorted(j.journey_id for j in corpus), "frame_size": [cfg.frame_width, cfg.frame_height]}
    (out_dir / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def command_query(index_dir: Path, frames_dir: Path, out_path: Path | None, method: str | None = None,
                  encoding: str | None = None, jobs: int = 1) -> list:
    index_dir, frames_dir = Path(index_dir), Path(frames_dir)
    meta_path = index_dir / "index.json"
    if not meta_path.is_file():
        raise DataError(f"not an index directory: {index_dir}")
    meta = json.loads(meta_path.read_text())
    if method and method != meta["method"]:
        raise DataError(f"index was built for {meta['method']}, not {method}")
    if encoding and encoding != meta["encoding"] and not (meta["encoding"] == "RAW"):
        raise DataError(f"index was built with {meta['encoding']} encoding, not {encoding}")
    if not frames_dir.is_dir() or not any(frames_dir.iterdir()):
        raise DataError(f"empty or missing frames directory: {frames_dir}")
    manifest = frames_dir / "manifest.csv"
    if not manifest.is_file():
        raise DataError(f"no manifest.csv in {frames_dir}")
    journey = load_journey(manifest, tuple(meta["frame_size"]))
    sets = extract_journey(journey, meta["method"], jobs=jobs)
    cb = read_codebook(index_dir / "codebook.vpcb") if meta["encoding"] != "RAW" else None
    q_codes = encode_journey(sets, meta["encoding"], cb)
    database, truth = {}, {}
    for jid in meta["journeys"]:
        database[jid], _ = read_codes(index_dir / "codes" / f"{jid}.npz")
        truth[jid] = np.load(index_dir / "codes" / f"{jid}.positions.npy")
    matrix = build_score_matrix(q_codes, database, meta["metric"], query_id=journey.journey_id, jobs=jobs)
    matches = localize_best_match(matrix, truth, journey.positions_cm)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_matches(out_path, matches, f"# stage=query index={meta['method']}/{meta['encoding']}/{meta['metric']}\n")
    return matches


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="master random seed (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--device-split", choices=DEVICE_SPLITS, help="database device filter")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="vispath", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corridor corpus")
    s.add_argument("--passes", type=int)
    s.add_argument("--length-cm", type=float)

    sub.add_parser("extract", parents=[common], help="extract and cache descriptors")

    s = sub.add_parser("train", parents=[common], help="train a codebook")
    s.add_argument("--method", required=True, choices=sorted(DIMS))
    s.add_argument("--encoding", default="HA", choices=["HA", "VLAD"])
    s.add_argument("--exclude", default="", help="journey id left out of training")

    s = sub.add_parser("encode", parents=[common], help="encode journeys with a codebook")
    s.add_argument("--method", required=True, choices=sorted(DIMS))
    s.add_argument("--encoding", default="HA", choices=["HA", "VLAD"])
    s.add_argument("--codebook")

    s = sub.add_parser("index", parents=[common], help="build a query index from the configured corpus")
    s.add_argument("--method", required=True, choices=sorted(DIMS))
    s.add_argument("--encoding", default="HA", choices=["HA", "VLAD"])
    s.add_argument("--metric", choices=["chi2", "hellinger"])

    s = sub.add_parser("query", parents=[common], help="localize a frame sequence against an index")
    s.add_argument("index_dir")
    s.add_argument("frames_dir")
    s.add_argument("--method", choices=sorted(DIMS))
    s.add_argument("--encoding", choices=["HA", "VLAD", "RAW"])

    sub.add_parser("eval", parents=[common], help="leave-one-journey-out evaluation")
    sub.add_parser("report", parents=[common], help="summarize evaluation outputs")
    sub.add_parser("run", parents=[common], help="eval + report")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.device_split:
            cfg.device_split = args.device_split
        if args.out and args.command not in ("train", "query"):
            cfg.out = args.out
        if args.command == "synth":
            if args.passes is not None:
                cfg.synth["passes"] = str(args.passes)
            if args.length_cm is not None:
                cfg.synth["length_cm"] = str(args.length_cm)
        cfg.validate()
        jobs = max(1, args.jobs)
        cmd = args.command
        if cmd == "synth":
            paths = command_synth(cfg, cfg.seed, Path(cfg.out))
            print(f"wrote {len(paths)} journeys under {cfg.out}")
        elif cmd == "extract":
            corpus = get_corpus(cfg)
            for m in cfg.methods:
                with stage(f"extract:{m}"):
                    extract_cached(corpus, m, replace(cfg, cache=True), jobs)
        elif cmd == "train":
            out = Path(args.out or Path(cfg.out) / f"{args.method}_{args.encoding}.vpcb")
            print(command_train(cfg, args.method, args.encoding, args.exclude, out, jobs))
        elif cmd == "encode":
            paths = command_encode(cfg, args.method, args.encoding, Path(args.codebook) if args.codebook else None,
                                   Path(cfg.out) / "codes", jobs)
            print(f"wrote {len(paths)} code archives")
        elif cmd == "index":
            print(command_index(cfg, args.method, args.encoding, args.metric, Path(cfg.out), jobs))
        elif cmd == "query":
            out = Path(args.out) if args.out else None
            matches = command_query(Path(args.index_dir), Path(args.frames_dir), out, args.method, args.encoding, jobs)
            if out is None:
                write_matches("/dev/stdout", matches)
        elif cmd == "eval":
            command_eval(cfg, jobs)
        elif cmd == "report":
            print(Path(command_report(cfg)).read_text(), end="")
        elif cmd == "run":
            path = command_run(cfg, jobs)
            print((path.parent / "report.txt").read_text(), end="")
        return EXIT_OK
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_DATA if isinstance(exc.cause, (DataError, FileNotFoundError)) else EXIT_INTERNAL
    except (DataError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
