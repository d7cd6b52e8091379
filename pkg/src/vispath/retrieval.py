"""Distances between frame codes, score matrices and best-match localization."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CHI2_GUARD = 1e-12
_ROW_BLOCK = 256


def _as_vec(v) -> np.ndarray:
    return np.asarray(getattr(v, "vector", v), dtype=np.float64)


def chi2_rows(h: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Chi-squared distance between ``h`` and each row of ``rows``."""
    num = (rows - h) ** 2
    return 0.5 * np.sum(num / (rows + h + CHI2_GUARD), axis=-1)


def signed_sqrt(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.sqrt(np.abs(v))


def hellinger_rows(s: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Euclidean distance between the already signed-square-rooted ``s`` and ``rows``."""
    diff = rows - s
    return np.sqrt(np.sum(diff * diff, axis=-1))


def chi2_distance(h1, h2) -> float:
    """``0.5 * sum((a - b)^2 / (a + b + 1e-12))`` for non-negative histograms."""
    a, b = _as_vec(h1), _as_vec(h2)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if (a < 0).any() or (b < 0).any():
        raise ValueError("chi-squared distance needs non-negative entries")
    return float(chi2_rows(a, b[None, :])[0])


def hellinger_distance(v1, v2) -> float:
    """Euclidean distance between signed square roots (no 1/sqrt(2) factor)."""
    a, b = _as_vec(v1), _as_vec(v2)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(hellinger_rows(signed_sqrt(a), signed_sqrt(b)[None, :])[0])


METRICS = {"chi2": chi2_distance, "hellinger": hellinger_distance}


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    query_id: str
    database_ids: tuple[str, ...]
    values: np.ndarray  # (Q, N) distances, +inf where a code is flagged empty
    query_frames: np.ndarray  # (Q,) frame indices of the query codes
    column_journey: np.ndarray  # (N,) index into database_ids
    column_frame: np.ndarray  # (N,) frame index within that journey
    metric: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Match:
    query_frame: int
    db_journey: str
    db_frame: int
    distance: float
    estimated_cm: float
    truth_cm: float = float("nan")
    valid: bool = True

    @property
    def error_cm(self) -> float:
        return abs(self.estimated_cm - self.truth_cm)


def _stack(codes) -> tuple[np.ndarray, np.ndarray, np.ndarray, set[str]]:
    vecs = np.stack([_as_vec(c) for c in codes]) if codes else np.zeros((0, 0))
    frames = np.array([c.frame_index for c in codes], dtype=np.int64)
    empty = np.array([bool(getattr(c, "empty", False)) for c in codes], dtype=bool)
    return vecs, frames, empty, {c.encoding for c in codes}


def build_score_matrix(
    query_codes: Sequence,
    database: Mapping[str, Sequence],
    metric: str,
    query_id: str = "query",
    jobs: int = 1,
) -> ScoreMatrix:
    """All query-frame x database-frame distances.

    Database journeys are laid out in sorted id order so that a plain argmin
    prefers the lowest journey id, then the lowest frame index.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if not database or all(len(c) == 0 for c in database.values()):
        raise ValueError("empty database")
    ids = tuple(sorted(database))
    q, q_frames, q_empty, encs = _stack(list(query_codes))
    cols, col_j, col_f, col_empty = [], [], [], []
    for j, jid in enumerate(ids):
        v, f, e, enc = _stack(list(database[jid]))
        if not len(f):
            continue
        encs |= enc
        cols.append(v)
        col_j.append(np.full(len(f), j))
        col_f.append(f)
        col_empty.append(e)
    if len(encs) > 1:
        raise ValueError(f"mixed encodings: {sorted(encs)}")
    db = np.concatenate(cols)
    if len(q) and q.shape[1] != db.shape[1]:
        raise ValueError(f"code length mismatch: {q.shape[1]} vs {db.shape[1]}")
    if metric == "chi2":
        if (db < 0).any() or (q < 0).any():
            raise ValueError("chi-squared distance needs non-negative entries")
        qv, dbv, rowfn = q, db, chi2_rows
    else:
        qv, dbv, rowfn = signed_sqrt(q), signed_sqrt(db), hellinger_rows
    values = np.empty((len(q), len(db)))

    def fill(i):
        for s in range(0, len(db), _ROW_BLOCK):
            values[i, s:s + _ROW_BLOCK] = rowfn(qv[i], dbv[s:s + _ROW_BLOCK])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(fill, range(len(q))))
    else:
        for i in range(len(q)):
            fill(i)
    empty_cols = np.concatenate(col_empty)
    values[:, empty_cols] = np.inf
    values[q_empty, :] = np.inf
    return ScoreMatrix(query_id, ids, values, q_frames, np.concatenate(col_j), np.concatenate(col_f), metric)


def localize_best_match(
    matrix: ScoreMatrix,
    ground_truth: Mapping[str, np.ndarray],
    query_truth: np.ndarray | None = None,
) -> list[Match]:
    """Position of the best (lowest-distance) database frame for each query frame.

    ``ground_truth`` maps database journey id to per-frame positions (indexed
    by frame index); ``query_truth`` likewise for the query journey.
    """
    out = []
    for r, qf in enumerate(matrix.query_frames):
        row = matrix.values[r]
        truth = float(query_truth[qf]) if query_truth is not None else float("nan")
        c = int(np.argmin(row)) if len(row) else 0
        if not len(row) or not np.isfinite(row[c]):
            out.append(Match(int(qf), "", -1, float("inf"), float("nan"), truth, valid=False))
            continue
        jid = matrix.database_ids[matrix.column_journey[c]]
        f = int(matrix.column_frame[c])
        out.append(Match(int(qf), jid, f, float(row[c]), float(ground_truth[jid][f]), truth))
    return out


# ---------------------------------------------------------------------------
# exports


def write_score_matrix(path: str | Path, matrix: ScoreMatrix, header: str = "") -> Path:
    """CSV of distances (one row per query frame) plus a ``.map.csv`` column map."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh)
        for qf, row in zip(matrix.query_frames, matrix.values):
            w.writerow([int(qf)] + [repr(float(v)) for v in row])
    map_path = path.with_suffix(".map.csv")
    with open(map_path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh)
        w.writerow(["column", "db_journey", "db_frame"])
        for c, (j, f) in enumerate(zip(matrix.column_journey, matrix.column_frame)):
            w.writerow([c, matrix.database_ids[j], int(f)])
    return map_path


MATCH_FIELDS = ["query_frame", "db_journey", "db_frame", "distance", "est_cm", "truth_cm", "error_cm"]


def write_matches(path: str | Path, matches: Sequence[Match], header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh)
        w.writerow(MATCH_FIELDS)
        for m in matches:
            w.writerow([m.query_frame, m.db_journey, m.db_frame, f"{m.distance:.10g}",
                        f"{m.estimated_cm:.3f}", f"{m.truth_cm:.3f}", f"{m.error_cm:.3f}"])


def read_matches(path: str | Path) -> list[Match]:
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(rows):
        out.append(Match(int(rec["query_frame"]), rec["db_journey"], int(rec["db_frame"]), float(rec["distance"]),
                         float(rec["est_cm"]), float(rec["truth_cm"]), valid=rec["db_journey"] != ""))
    return out
