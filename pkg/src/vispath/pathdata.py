"""Journeys, ground-truth alignment, manifest I/O and synthetic corridors."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import DataError

FRAME_SIZE = (208, 117)  # (width, height)
WHEEL_RESOLUTION_CM = 10.0


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    timestamp_ms: int
    planes: np.ndarray  # (3, height, width), values in [0, 1]

    def __post_init__(self):
        p = self.planes
        if p.ndim != 3 or p.shape[0] != 3:
            raise DataError(f"frame {self.index}: expected (3, H, W) planes, got {p.shape}")
        if p.shape[1] < 16 or p.shape[2] < 16:
            raise DataError(f"frame {self.index}: {p.shape[2]}x{p.shape[1]} is below 16x16")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise DataError(f"frame {self.index}: intensities must be finite and within [0, 1]")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def gray(self) -> np.ndarray:
        """Channel-mean grayscale plane as float64."""
        return self.planes.astype(np.float64).mean(axis=0)


@dataclass(frozen=True, eq=False)
class GroundTruthTrack:
    """Surveyor-wheel ticks: (timestamp_ms, cumulative distance in cm)."""

    timestamps_ms: np.ndarray
    distances_cm: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps_ms, dtype=np.int64)
        d = np.asarray(self.distances_cm, dtype=np.float64)
        object.__setattr__(self, "timestamps_ms", t)
        object.__setattr__(self, "distances_cm", d)
        if t.ndim != 1 or t.shape != d.shape:
            raise DataError("tick timestamps and distances must be 1-D arrays of equal length")
        if len(t) < 2:
            raise DataError(f"ground-truth track needs at least 2 ticks, got {len(t)}")
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            raise DataError(f"non-monotone tick timestamps at tick {bad[0] + 1}: {t[bad[0]]} -> {t[bad[0] + 1]}")
        bad = np.flatnonzero(np.diff(d) < 0)
        if bad.size:
            raise DataError(f"decreasing tick distance at tick {bad[0] + 1}: {d[bad[0]]} -> {d[bad[0] + 1]}")

    @classmethod
    def from_pairs(cls, ticks: Iterable[tuple[float, float]]) -> "GroundTruthTrack":
        ticks = list(ticks)
        if not ticks:
            raise DataError("ground-truth track needs at least 2 ticks, got 0")
        t, d = zip(*ticks)
        return cls(np.asarray(t), np.asarray(d))


def align_ground_truth(frame_timestamps: Sequence[int], track: GroundTruthTrack) -> np.ndarray:
    """Per-frame distance along the path, interpolated linearly between ticks.

    Timestamps outside the tick range are clamped to the nearest end distance.
    """
    if len(track.timestamps_ms) < 2:
        raise DataError("ground-truth track needs at least 2 ticks")
    ts = np.asarray(frame_timestamps, dtype=np.float64)
    return np.interp(ts, track.timestamps_ms.astype(np.float64), track.distances_cm)


@dataclass(frozen=True, eq=False)
class Journey:
    journey_id: str
    corridor_id: str
    device_id: str
    pass_number: int
    frames: tuple[Frame, ...]
    positions_cm: np.ndarray
    length_cm: float

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        pos = np.asarray(self.positions_cm, dtype=np.float64)
        object.__setattr__(self, "positions_cm", pos)
        if not self.journey_id:
            raise DataError("journey_id must be non-empty")
        if len(pos) != len(self.frames):
            raise DataError(f"{self.journey_id}: {len(pos)} positions for {len(self.frames)} frames")
        if np.any(np.diff(pos) < 0):
            raise DataError(f"{self.journey_id}: positions must be non-decreasing")
        if len(pos) and (pos.min() < 0 or pos.max() > self.length_cm):
            raise DataError(f"{self.journey_id}: positions outside [0, {self.length_cm}]")
        ts = [f.timestamp_ms for f in self.frames]
        bad = np.flatnonzero(np.diff(ts) <= 0)
        if bad.size:
            raise DataError(f"{self.journey_id}: non-monotone timestamps at frame {bad[0] + 1}")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def timestamps_ms(self) -> np.ndarray:
        return np.array([f.timestamp_ms for f in self.frames], dtype=np.int64)

    def content_hash(self) -> str:
        """Stable digest of pixels, timestamps, positions and identity."""
        h = hashlib.sha256()
        h.update(f"{self.journey_id}|{self.corridor_id}|{self.device_id}|{self.pass_number}|{self.length_cm!r}".encode())
        h.update(self.positions_cm.tobytes())
        for f in self.frames:
            h.update(np.int64(f.timestamp_ms).tobytes())
            h.update(np.ascontiguousarray(f.planes, dtype=np.float32).tobytes())
        return h.hexdigest()


@dataclass
class Corpus:
    journeys: list[Journey] = field(default_factory=list)

    def __post_init__(self):
        ids = [j.journey_id for j in self.journeys]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise DataError(f"duplicate journey ids: {sorted(dup)}")

    def __iter__(self):
        return iter(self.journeys)

    def __len__(self):
        return len(self.journeys)

    def by_corridor(self) -> dict[str, list[Journey]]:
        out: dict[str, list[Journey]] = {}
        for j in sorted(self.journeys, key=lambda j: (j.corridor_id, j.pass_number, j.journey_id)):
            out.setdefault(j.corridor_id, []).append(j)
        return out

    def get(self, corridor_id: str, pass_number: int) -> Journey:
        for j in self.journeys:
            if j.corridor_id == corridor_id and j.pass_number == pass_number:
                return j
        raise KeyError((corridor_id, pass_number))

    def journey(self, journey_id: str) -> Journey:
        for j in self.journeys:
            if j.journey_id == journey_id:
                return j
        raise KeyError(journey_id)


# ---------------------------------------------------------------------------
# image preprocessing and manifest I/O


def resize_area(planes: np.ndarray, size: tuple[int, int] = FRAME_SIZE) -> np.ndarray:
    """Area-averaging resize of (C, H, W) float planes to ``size`` = (width, height)."""
    w, h = size
    if planes.shape[1:] == (h, w):
        return planes.astype(np.float32)
    out = np.empty((planes.shape[0], h, w), dtype=np.float32)
    for c, plane in enumerate(planes):
        im = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32), mode="F")
        out[c] = np.asarray(im.resize((w, h), Image.BOX))
    return np.clip(out, 0.0, 1.0)


def read_image(path: Path) -> np.ndarray:
    """Read PNG/PGM/PPM into (3, H, W) float32 planes in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            a = np.asarray(im, dtype=np.float32) / 65535.0
            a = np.stack([a, a, a], axis=-1)
        else:
            a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(a.transpose(2, 0, 1))


def write_image(path: Path, planes: np.ndarray) -> None:
    a = np.clip(np.rint(planes.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="RGB").save(path, format="PNG", optimize=False)


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith("#"):
        raise DataError(f"manifest header must start with '#': {line.strip()!r}")
    meta = {}
    for item in line[1:].split(";"):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition("=")
        if not sep:
            raise DataError(f"malformed manifest header field {item!r}")
        meta[key.strip()] = value.strip()
    return meta


def read_ticks(path: Path) -> GroundTruthTrack:
    if not path.is_file():
        raise DataError(f"missing tick file: {path}")
    ticks = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            ticks.append((int(parts[0]), float(parts[1])))
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: bad tick record {line!r}") from None
    if not ticks:
        raise DataError(f"empty tick file: {path}")
    return GroundTruthTrack.from_pairs(ticks)


def load_journey(manifest_path: str | Path, size: tuple[int, int] = FRAME_SIZE) -> Journey:
    """Load a journey from its manifest, resizing frames to ``size``.

    Manifest layout: one ``#key=value; ...`` header line (journey_id,
    corridor_id, device_id, pass_number, ticks, optional length_cm) followed
    by ``index,timestamp_ms,relative_image_path`` rows.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    lines = [ln for ln in manifest_path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"empty manifest: {manifest_path}")
    meta = _parse_header(lines[0])
    for key in ("journey_id", "corridor_id", "ticks"):
        if key not in meta:
            raise DataError(f"{manifest_path}: header lacks {key!r}")
    root = manifest_path.parent
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise DataError(f"{manifest_path}:{lineno}: expected index,timestamp_ms,path; got {line!r}")
        try:
            rows.append((int(parts[0]), int(parts[1]), parts[2]))
        except ValueError:
            raise DataError(f"{manifest_path}:{lineno}: bad frame record {line!r}") from None
    if not rows:
        raise DataError(f"{manifest_path}: no frame records")
    for prev, cur in zip(rows, rows[1:]):
        if cur[1] <= prev[1]:
            raise DataError(f"{manifest_path}: non-monotone timestamps at frame {cur[0]} ({prev[1]} -> {cur[1]})")
    track = read_ticks(root / meta["ticks"])
    frames = []
    for index, ts, rel in rows:
        img_path = root / rel
        if not img_path.is_file():
            raise DataError(f"{manifest_path}: missing frame file for frame {index}: {img_path}")
        frames.append(Frame(index, ts, resize_area(read_image(img_path), size)))
    positions = align_ground_truth([r[1] for r in rows], track)
    length = float(meta.get("length_cm", track.distances_cm[-1]))
    return Journey(
        journey_id=meta["journey_id"],
        corridor_id=meta["corridor_id"],
        device_id=meta.get("device_id", "unknown"),
        pass_number=int(meta.get("pass_number", 0)),
        frames=tuple(frames),
        positions_cm=positions,
        length_cm=length,
    )


def write_journey(journey: Journey, out_dir: str | Path, track: GroundTruthTrack | None = None) -> Path:
    """Write a journey as manifest + PNG frames + tick file; returns the manifest path.

    Without an explicit ``track`` one tick per frame is written, carrying the
    frame's exact position.
    """
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    if track is None:
        track = GroundTruthTrack(journey.timestamps_ms, journey.positions_cm)
    with open(out_dir / "ticks.csv", "w") as fh:
        for t, d in zip(track.timestamps_ms, track.distances_cm):
            fh.write(f"{int(t)},{float(d)!r}\n")
    lines = [
        f"# journey_id={journey.journey_id}; corridor_id={journey.corridor_id}; "
        f"device_id={journey.device_id}; pass_number={journey.pass_number}; "
        f"ticks=ticks.csv; length_cm={float(journey.length_cm)!r}"
    ]
    for f in journey.frames:
        rel = f"frames/{f.index:06d}.png"
        write_image(out_dir / rel, f.planes)
        lines.append(f"{f.index},{f.timestamp_ms},{rel}")
    manifest = out_dir / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_corpus(root: str | Path, size: tuple[int, int] = FRAME_SIZE) -> Corpus:
    """Load every ``manifest.csv`` found below ``root``."""
    manifests = sorted(Path(root).rglob("manifest.csv"))
    if not manifests:
        raise DataError(f"no manifest.csv found under {root}")
    return Corpus([load_journey(m, size) for m in manifests])


def write_corpus(journeys: Sequence[Journey], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    return [write_journey(j, out_dir / j.corridor_id / j.journey_id) for j in journeys]


# ---------------------------------------------------------------------------
# synthetic corridors


@dataclass(frozen=True)
class CorridorSpec:
    """Parameters of a procedurally textured corridor and its passes."""

    corridor_id: str = "corridor1"
    length_cm: float = 5000.0
    passes: int = 5
    fps: float = 4.0
    speed_range_cm_s: tuple[float, float] = (100.0, 140.0)
    texture_richness: float = 1.0
    noise_level: float = 0.01
    jitter: float = 1.0
    devices: tuple[str, ...] = ("nexus4", "glass")
    width_cm: float = 200.0
    height_cm: float = 260.0
    size: tuple[int, int] = FRAME_SIZE
    supersample: int = 2


_CELL_CM = 2.0  # longitudinal texture resolution
_CROSS_CM = 4.0
_PRE_CM = 500.0  # texture margin behind the start
_POST_CM = 2500.0  # and beyond the end, visible in the distance
_FOG_CM = 900.0


@dataclass
class _Surface:
    texture: np.ndarray  # (3, n_long, n_cross)
    cross_origin_cm: float


def _band_noise(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _make_surface(rng, n_long, n_cross, base, richness, cross_origin, kind):
    base = np.asarray(base, dtype=np.float64)[:, None, None]
    tex = np.broadcast_to(base, (3, n_long, n_cross)).copy()
    if richness <= 0:
        return _Surface(tex, cross_origin)
    coarse = _band_noise(rng, (n_long, n_cross), (25.0, 4.0))
    fine = _band_noise(rng, (n_long, n_cross), (3.0, 1.5))
    tint = rng.uniform(-1, 1, size=(3, 1, 1)) * 0.04
    tex += richness * (0.10 * coarse + 0.05 * fine)[None] + richness * tint * coarse[None]
    long_cm = lambda cm: int(round((cm + _PRE_CM) / _CELL_CM))
    cross_cell = lambda cm: int(round((cm - cross_origin) / _CROSS_CM))
    total_cm = n_long * _CELL_CM - _PRE_CM
    if kind == "wall":
        z = -_PRE_CM + rng.uniform(100, 400)
        while z < total_cm:
            color = rng.uniform(0.05, 0.95, size=3)
            if rng.random() < 0.4:  # door
                w, h, y0 = rng.uniform(80, 110), rng.uniform(190, 215), 0.0
            else:  # poster, sign or panel
                w, h, y0 = rng.uniform(30, 140), rng.uniform(25, 90), rng.uniform(70, 200)
            a0, a1 = long_cm(z), long_cm(z + w)
            b0, b1 = cross_cell(y0), cross_cell(y0 + h)
            region = tex[:, a0:a1, b0:b1]
            patch = color[:, None, None] + 0.08 * rng.standard_normal((3, 1, max(b1 - b0, 1)))
            region[:] = (1 - richness) * region + richness * patch[:, :, : region.shape[2]]
            z += w + rng.uniform(60, 500)
    elif kind == "ceiling":
        z = -_PRE_CM + rng.uniform(50, 300)
        while z < total_cm:
            a0, a1 = long_cm(z), long_cm(z + rng.uniform(40, 120))
            w = rng.uniform(40, 120)
            b0, b1 = cross_cell(-w / 2), cross_cell(w / 2)
            tex[:, a0:a1, b0:b1] += richness * rng.uniform(0.25, 0.5)
            z += rng.uniform(150, 450)
    else:  # floor: mats and stains
        z = -_PRE_CM + rng.uniform(100, 600)
        while z < total_cm:
            a0, a1 = long_cm(z), long_cm(z + rng.uniform(60, 250))
            c0 = rng.uniform(-80, 40)
            b0, b1 = cross_cell(c0), cross_cell(c0 + rng.uniform(40, 120))
            tex[:, a0:a1, b0:b1] = (1 - richness) * tex[:, a0:a1, b0:b1] + richness * rng.uniform(0.05, 0.6, size=(3, 1, 1))
            z += rng.uniform(300, 900)
    return _Surface(np.clip(tex, 0.0, 1.0), cross_origin)


def _build_world(spec: CorridorSpec, seed: int) -> dict[str, _Surface]:
    rng = np.random.default_rng([seed, 0])
    n_long = int(np.ceil((spec.length_cm + _PRE_CM + _POST_CM) / _CELL_CM))
    n_wall = int(np.ceil(spec.height_cm / _CROSS_CM)) + 1
    n_floor = int(np.ceil(spec.width_cm / _CROSS_CM)) + 1
    r = spec.texture_richness
    half = spec.width_cm / 2
    return {
        "left": _make_surface(rng, n_long, n_wall, (0.72, 0.70, 0.62), r, 0.0, "wall"),
        "right": _make_surface(rng, n_long, n_wall, (0.66, 0.68, 0.70), r, 0.0, "wall"),
        "floor": _make_surface(rng, n_long, n_floor, (0.35, 0.33, 0.32), r, -half, "floor"),
        "ceiling": _make_surface(rng, n_long, n_floor, (0.85, 0.85, 0.83), r, -half, "ceiling"),
    }


_DEVICES = {
    # camera height (cm), horizontal field of view (deg), per-channel colour response
    0: (135.0, 62.0, (1.00, 1.00, 1.00)),
    1: (165.0, 54.0, (1.04, 0.99, 0.93)),
}


def _render(world, spec, pos_cm, lateral_cm, cam_h_cm, yaw, hfov_deg, fog_rgb):
    w, h = spec.size
    ss = max(int(spec.supersample), 1)
    W, H = w * ss, h * ss
    f = (W / 2) / np.tan(np.deg2rad(hfov_deg) / 2)
    u = (np.arange(W) + 0.5 - W / 2) / f
    v = -(np.arange(H) + 0.5 - H / 2) / f
    dx0, dy = np.meshgrid(u, v)
    cy, sy = np.cos(yaw), np.sin(yaw)
    dx = dx0 * cy + sy
    dz = -dx0 * sy + cy
    half = spec.width_cm / 2
    inf = np.full(dx.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_left = np.where(dx < 0, (-half - lateral_cm) / dx, inf)
        t_right = np.where(dx > 0, (half - lateral_cm) / dx, inf)
        t_floor = np.where(dy < 0, -cam_h_cm / dy, inf)
        t_ceil = np.where(dy > 0, (spec.height_cm - cam_h_cm) / dy, inf)
    ts = np.stack([t_left, t_right, t_floor, t_ceil])
    which = np.argmin(ts, axis=0)
    t = np.min(ts, axis=0)
    z = pos_cm + t * dz
    x = lateral_cm + t * dx
    y = cam_h_cm + t * dy
    img = np.empty((3, H, W))
    for k, name in enumerate(("left", "right", "floor", "ceiling")):
        m = which == k
        if not m.any():
            continue
        surf = world[name]
        cross = y[m] if k < 2 else x[m]
        a = (z[m] + _PRE_CM) / _CELL_CM
        b = (cross - surf.cross_origin_cm) / _CROSS_CM
        for c in range(3):
            img[c][m] = ndimage.map_coordinates(surf.texture[c], [a, b], order=1, mode="nearest")
    dist = t * np.sqrt(dx0**2 + dy**2 + 1.0)
    fog = np.exp(-dist / _FOG_CM)
    img = img * fog + np.asarray(fog_rgb)[:, None, None] * (1 - fog)
    if ss > 1:
        img = img.reshape(3, h, ss, w, ss).mean(axis=(2, 4))
    return img


def synthesize_corridor(spec: CorridorSpec, seed: int) -> list[Journey]:
    """Render ``spec.passes`` journeys through one procedurally textured corridor.

    The corridor texture depends only on ``seed``; each pass draws its own
    walking speed, frame timing, illumination, camera pose and sensor noise.
    """
    if spec.length_cm <= 0:
        raise DataError(f"corridor length must be positive, got {spec.length_cm}")
    if spec.passes <= 0:
        raise DataError(f"pass count must be positive, got {spec.passes}")
    if spec.fps <= 0:
        raise DataError(f"frame rate must be positive, got {spec.fps}")
    world = _build_world(spec, seed)
    jit = spec.jitter
    journeys = []
    for p in range(spec.passes):
        rng = np.random.default_rng([seed, 1, p])
        devices = spec.devices or ("camera",)
        device = devices[p % len(devices)]
        cam_h, hfov, response = _DEVICES[(p % len(devices)) % len(_DEVICES)]
        cam_h += jit * rng.uniform(-5, 5)
        lateral0 = jit * rng.uniform(-20, 20)
        gain = 1.0 + jit * rng.uniform(-0.15, 0.15)
        offset = jit * rng.uniform(-0.04, 0.04)
        v0 = rng.uniform(*spec.speed_range_cm_s)
        sway_phase = rng.uniform(0, 2 * np.pi)
        speed_phase = rng.uniform(0, 2 * np.pi)
        light_phase = rng.uniform(0, 2 * np.pi, size=2)
        dt_ms = 1000.0 / spec.fps
        frames, positions = [], []
        t_ms, pos, k = 0.0, 0.0, 0
        while True:
            ts = int(round(t_ms))
            tsec = t_ms / 1000.0
            lateral = lateral0 + jit * 6.0 * np.sin(2 * np.pi * tsec / 1.1 + sway_phase)
            yaw = np.deg2rad(jit * 2.0 * np.sin(2 * np.pi * tsec / 3.7 + sway_phase))
            bob = jit * 2.0 * np.sin(2 * np.pi * tsec / 0.55 + sway_phase)
            light = gain * (1.0 + jit * 0.05 * np.sin(2 * np.pi * pos / 1700.0 + light_phase[0]))
            fog_rgb = np.array((0.45, 0.45, 0.45)) * light
            img = _render(world, spec, pos, lateral, cam_h + bob, yaw, hfov, fog_rgb)
            img = img * light * np.asarray(response)[:, None, None] + offset
            img += spec.noise_level * rng.standard_normal(img.shape)
            frames.append(Frame(k, ts, np.clip(img, 0.0, 1.0).astype(np.float32)))
            positions.append(pos)
            if pos >= spec.length_cm:
                break
            step_ms = dt_ms * (1.0 + 0.1 * jit * rng.uniform(-1, 1))
            speed = v0 * (1.0 + 0.12 * jit * np.sin(2 * np.pi * tsec / 6.0 + speed_phase))
            t_ms += step_ms
            pos = min(pos + speed * step_ms / 1000.0, spec.length_cm)
            k += 1
        journeys.append(
            Journey(
                journey_id=f"{spec.corridor_id}_pass{p + 1:02d}",
                corridor_id=spec.corridor_id,
                device_id=device,
                pass_number=p + 1,
                frames=tuple(frames),
                positions_cm=np.asarray(positions),
                length_cm=float(spec.length_cm),
            )
        )
    return journeys
