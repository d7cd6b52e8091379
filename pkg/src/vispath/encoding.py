"""k-means codebooks and frame encodings (hard-assignment histograms, VLAD)."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import DataError

log = logging.getLogger(__name__)

DEFAULT_K = {"HA": 4000, "VLAD": 256}
_CHUNK = 4096
# float32 expansion distances are re-checked in float64 when the best two are this close
_TIE_RTOL = 1e-5


@dataclass(frozen=True, eq=False)
class Codebook:
    method: str
    centers: np.ndarray  # (K, D) float64
    seed: int
    excluded_journey_id: str = ""
    distortion_log: tuple[float, ...] = ()
    training_counts: Mapping[str, int] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True, eq=False)
class FrameCode:
    encoding: str  # HA | VLAD | RAW
    frame_index: int
    vector: np.ndarray
    empty: bool = False


# ---------------------------------------------------------------------------
# nearest-center search


def _exact_nearest(x: np.ndarray, centers: np.ndarray) -> int:
    d = np.sum((centers - x) ** 2, axis=1)
    return int(np.argmin(d))


def nearest_centers(x: np.ndarray, centers: np.ndarray, centers32: np.ndarray | None = None) -> np.ndarray:
    """Index of the nearest center for each row of ``x`` (Euclidean, ties to lowest index).

    Bulk distances use float32 BLAS; rows whose two best candidates are within
    rounding reach are resolved with an exact float64 scan.
    """
    x = np.asarray(x)
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    centers = np.asarray(centers, dtype=np.float64)
    if centers32 is None:
        centers32 = centers.astype(np.float32)
    cn = np.einsum("ij,ij->i", centers32, centers32)
    cmax = float(cn.max())
    for s in range(0, n, _CHUNK):
        xb = np.asarray(x[s:s + _CHUNK], dtype=np.float32)
        d = cn[None, :] - 2.0 * (xb @ centers32.T)
        first = np.argmin(d, axis=1)
        rows = np.arange(len(xb))
        best = d[rows, first].copy()
        if centers.shape[0] > 1:
            d[rows, first] = np.inf
            second = d.min(axis=1)
            xn = np.einsum("ij,ij->i", xb, xb)
            scale = xn + cmax + 2.0 * np.sqrt(xn * cmax)
            tol = _TIE_RTOL * scale + 1e-30
            suspect = np.flatnonzero(second - best <= tol)
            d[suspect, first[suspect]] = best[suspect]
            for r in suspect:
                # exact float64 rescan over the centers within rounding reach of the best
                cand = np.flatnonzero(d[r] <= best[r] + tol[r])
                first[r] = cand[_exact_nearest(np.asarray(x[s + r], dtype=np.float64), centers[cand])]
        out[s:s + len(xb)] = first
    return out


def group_sums(values: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Row sums of ``values`` grouped by ``labels`` in 0..k-1, (k, D) float64."""
    out = np.zeros((k, values.shape[1]))
    if len(labels) == 0:
        return out
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    present, starts = np.unique(sorted_labels, return_index=True)
    out[present] = np.add.reduceat(np.asarray(values, dtype=np.float64)[order], starts, axis=0)
    return out


def _sq_dist_to_assigned(x: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    for s in range(0, len(x), _CHUNK):
        diff = np.asarray(x[s:s + _CHUNK], dtype=np.float64) - centers[assign[s:s + _CHUNK]]
        out[s:s + _CHUNK] = np.einsum("ij,ij->i", diff, diff)
    return out


# ---------------------------------------------------------------------------
# k-means


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; falls back to uniform picks once all points are covered."""
    n = len(x)
    xs = np.asarray(x, dtype=np.float64)
    idx = [int(rng.integers(n))]
    d2 = np.sum((xs - xs[idx[0]]) ** 2, axis=1)
    x32 = xs.astype(np.float32)
    xn = np.einsum("ij,ij->i", x32, x32)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        else:
            i = int(rng.integers(n))
        idx.append(i)
        c = x32[i]
        np.minimum(d2, np.maximum(xn - 2.0 * (x32 @ c) + xn[i], 0.0), out=d2)
    return xs[idx].copy()


def train_codebook(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    method: str = "",
    max_iter: int = 100,
    excluded_journey_id: str = "",
    training_counts: Mapping[str, int] | None = None,
) -> Codebook:
    """Lloyd's k-means with k-means++ seeding.

    Stops at an assignment fixpoint or after ``max_iter`` iterations. Empty
    clusters are re-seeded with the point farthest from its center. The
    distortion (sum of squared distances) after every assignment step is logged.
    """
    x = np.asarray(descriptors)
    if x.ndim != 2:
        raise ValueError("training descriptors must be a 2-D array")
    n, _ = x.shape
    if n < k:
        raise ValueError(f"need at least K={k} training vectors, got {n}")
    if k < 1:
        raise ValueError(f"K must be positive, got {k}")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(x, k, rng)
    assign = None
    distortions: list[float] = []
    for it in range(max_iter):
        new = nearest_centers(x, centers)
        if assign is not None:
            # keep the old label unless the new center is strictly closer in float64
            d_new = _sq_dist_to_assigned(x, centers, new)
            d_old = _sq_dist_to_assigned(x, centers, assign)
            new = np.where(d_new < d_old, new, assign)
        d = _sq_dist_to_assigned(x, centers, new)
        distortions.append(float(d.sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        sums = group_sums(x, assign, k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            far = np.argsort(-_sq_dist_to_assigned(x, centers, assign), kind="stable")
            for c, i in zip(empty, far):
                centers[c] = x[i]
                assign[i] = c
        log.debug("kmeans iter %d distortion %.6g", it, distortions[-1])
    return Codebook(
        method=method,
        centers=centers,
        seed=seed,
        excluded_journey_id=excluded_journey_id,
        distortion_log=tuple(distortions),
        training_counts=dict(training_counts or {}),
    )


def sample_training_descriptors(
    features: Mapping[str, Sequence],
    exclude: str | Sequence[str],
    cap: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Uniformly sample up to ``cap`` descriptors from every journey not excluded.

    Returns (vectors, provenance index per vector, journey ids indexed by provenance).
    """
    excluded = {exclude} if isinstance(exclude, str) else set(exclude)
    ids = [jid for jid in sorted(features) if jid not in excluded]
    if not ids:
        raise DataError("no journeys left for codebook training")
    sizes = [[len(ds) for ds in features[jid]] for jid in ids]
    totals = np.array([sum(s) for s in sizes], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(totals)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    take = np.arange(total) if total <= cap else np.sort(rng.choice(total, size=cap, replace=False))
    dim = None
    chunks, prov = [], []
    for j, jid in enumerate(ids):
        sel = take[(take >= offsets[j]) & (take < offsets[j + 1])] - offsets[j]
        if sel.size == 0:
            continue
        starts = np.concatenate([[0], np.cumsum(sizes[j])])
        frame_of = np.searchsorted(starts, sel, side="right") - 1
        for f in np.unique(frame_of):
            vec = features[jid][f].vectors
            if dim is None:
                dim = vec.shape[1]
            elif vec.shape[1] != dim:
                raise ValueError(f"descriptor dimension mismatch: {vec.shape[1]} vs {dim}")
            rows = sel[frame_of == f] - starts[f]
            chunks.append(np.asarray(vec[rows], dtype=np.float32))
            prov.append(np.full(len(rows), j, dtype=np.int32))
    return np.concatenate(chunks), np.concatenate(prov), ids


# ---------------------------------------------------------------------------
# encodings


def _check_dim(desc, codebook: Codebook) -> np.ndarray:
    v = np.asarray(desc.vectors)
    if len(v) and v.shape[1] != codebook.dim:
        raise ValueError(f"descriptor dimension {v.shape[1]} does not match codebook dimension {codebook.dim}")
    return v


def encode_bow(desc, codebook: Codebook, centers32: np.ndarray | None = None) -> FrameCode:
    """L1-normalized hard-assignment histogram over the codebook."""
    v = _check_dim(desc, codebook)
    if len(v) == 0:
        return FrameCode("HA", desc.frame_index, np.zeros(codebook.k), empty=True)
    counts = np.bincount(nearest_centers(v, codebook.centers, centers32), minlength=codebook.k)
    return FrameCode("HA", desc.frame_index, counts / counts.sum())


def vlad_residuals(desc, codebook: Codebook, centers32: np.ndarray | None = None) -> np.ndarray:
    """Unnormalized VLAD: per-cluster residual sums, (K, D)."""
    v = np.asarray(_check_dim(desc, codebook), dtype=np.float64)
    if len(v) == 0:
        return np.zeros_like(codebook.centers)
    assign = nearest_centers(v, codebook.centers, centers32)
    return group_sums(v - codebook.centers[assign], assign, codebook.k)


def normalize_vlad(residuals: np.ndarray) -> np.ndarray:
    """Signed square root then global L2; all-zero input stays zero."""
    v = np.sign(residuals) * np.sqrt(np.abs(residuals))
    v = v.ravel()
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.zeros_like(v)


def encode_vlad(desc, codebook: Codebook, centers32: np.ndarray | None = None) -> FrameCode:
    v = _check_dim(desc, codebook)
    vec = normalize_vlad(vlad_residuals(desc, codebook, centers32))
    return FrameCode("VLAD", desc.frame_index, vec, empty=len(v) == 0)


def encode_raw(desc) -> FrameCode:
    """Frame-level descriptor used directly, L1-normalized (non-negative input)."""
    v = np.asarray(desc.vectors, dtype=np.float64).ravel()
    s = np.abs(v).sum()
    if len(v) == 0 or s < 1e-12:
        return FrameCode("RAW", desc.frame_index, np.zeros(v.size), empty=True)
    return FrameCode("RAW", desc.frame_index, v / s)


def encode_journey(sets: Sequence, encoding: str, codebook: Codebook | None = None) -> list[FrameCode]:
    if encoding == "RAW":
        return [encode_raw(ds) for ds in sets]
    if codebook is None:
        raise ValueError(f"{encoding} encoding needs a codebook")
    c32 = codebook.centers.astype(np.float32)
    if encoding == "HA":
        return [encode_bow(ds, codebook, c32) for ds in sets]
    if encoding == "VLAD":
        return [encode_vlad(ds, codebook, c32) for ds in sets]
    raise ValueError(f"unknown encoding {encoding!r}")


# ---------------------------------------------------------------------------
# files

_CB_MAGIC = b"VPCB"
_CB_HEADER = struct.Struct("<4s16sIIQH")  # magic, method, K, D, seed, len(excluded id)


def write_codebook(path: str | Path, cb: Codebook) -> None:
    excluded = cb.excluded_journey_id.encode()
    extra = json.dumps(
        {"distortion_log": list(cb.distortion_log), "training_counts": dict(cb.training_counts)},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CB_HEADER.pack(_CB_MAGIC, cb.method.encode(), cb.k, cb.dim, cb.seed, len(excluded)))
        fh.write(excluded)
        fh.write(np.ascontiguousarray(cb.centers, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(extra)))
        fh.write(extra)


def read_codebook(path: str | Path) -> Codebook:
    data = Path(path).read_bytes()
    magic, method, k, d, seed, n_ex = _CB_HEADER.unpack_from(data, 0)
    if magic != _CB_MAGIC:
        raise DataError(f"{path}: not a codebook file")
    off = _CB_HEADER.size
    excluded = data[off:off + n_ex].decode()
    off += n_ex
    centers = np.frombuffer(data, dtype="<f4", count=k * d, offset=off).reshape(k, d).astype(np.float64)
    off += 4 * k * d
    (n_extra,) = struct.unpack_from("<I", data, off)
    extra = json.loads(data[off + 4:off + 4 + n_extra])
    return Codebook(
        method=method.rstrip(b"\0").decode(),
        centers=centers,
        seed=seed,
        excluded_journey_id=excluded,
        distortion_log=tuple(extra["distortion_log"]),
        training_counts=extra["training_counts"],
    )


def write_codes(path: str | Path, codes: Sequence[FrameCode], **meta) -> None:
    """Archive one journey's frame codes (``.npz``)."""
    enc = {c.encoding for c in codes}
    if len(enc) > 1:
        raise ValueError(f"mixed encodings in one archive: {sorted(enc)}")
    with open(path, "wb") as fh:
        np.savez(
            fh,
            frame_index=np.array([c.frame_index for c in codes], dtype=np.int64),
            vectors=np.stack([c.vector for c in codes]).astype(np.float32) if codes else np.zeros((0, 0), np.float32),
            empty=np.array([c.empty for c in codes], dtype=bool),
            meta=np.array(json.dumps({"encoding": enc.pop() if enc else "", **meta}, sort_keys=True)),
        )


def read_codes(path: str | Path) -> tuple[list[FrameCode], dict]:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        codes = [
            FrameCode(meta["encoding"], int(i), v.astype(np.float64), bool(e))
            for i, v, e in zip(z["frame_index"], z["vectors"], z["empty"])
        ]
    return codes, meta
