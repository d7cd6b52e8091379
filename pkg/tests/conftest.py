import numpy as np
import pytest

from vispath.pathdata import Corpus, CorridorSpec, Frame, Journey, synthesize_corridor


def make_journey(planes_seq, journey_id="j", corridor_id="c", device_id="nexus4", pass_number=1,
                 positions=None, length_cm=None, dt_ms=250):
    frames = [Frame(i, i * dt_ms, np.asarray(p, dtype=np.float32)) for i, p in enumerate(planes_seq)]
    if positions is None:
        positions = np.arange(len(frames), dtype=np.float64) * 10.0
    if length_cm is None:
        length_cm = float(max(positions[-1], 1.0)) if len(positions) else 1.0
    return Journey(journey_id, corridor_id, device_id, pass_number, frames, positions, length_cm)


def random_frames(n, h=117, w=208, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((3, h, w)) for _ in range(n)]


@pytest.fixture(scope="session")
def small_corpus():
    """10 m corridor, 3 passes, full frame size."""
    return Corpus(synthesize_corridor(CorridorSpec(corridor_id="small", length_cm=1000, passes=3), seed=3))


@pytest.fixture(scope="session")
def tiny_corpus():
    """Short low-resolution corridor for protocol tests."""
    spec = CorridorSpec(corridor_id="tiny", length_cm=600, passes=4, size=(64, 40), supersample=1)
    return Corpus(synthesize_corridor(spec, seed=5))


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record_acceptance(number: int, ok: bool | None, detail: str) -> None:
    """``ok=None`` records a criterion that could not be evaluated here."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    ACCEPTANCE[number] = (status, detail)
    print(f"ACCEPTANCE {number:>2} {status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
