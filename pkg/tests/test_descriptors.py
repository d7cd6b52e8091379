import numpy as np
import pytest

from vispath import DataError
from vispath.descriptors import (
    DIMS,
    dsift_frame,
    extract_journey,
    lw_color_gradients,
    lw_color_window,
    orientation_bins,
    read_descriptor_dump,
    sf_gabor_frame,
    sphere_bins,
    st_gabor_field,
    st_gabor_window,
    st_gauss_window,
    write_descriptor_dump,
)
from vispath.imgproc import TemporalWindow
from vispath.pathdata import Frame

from conftest import make_journey, random_frames

H, W = 117, 208


def _window(planes_seq):
    frames = tuple(Frame(i, 100 * i, np.asarray(p, dtype=np.float32)) for i, p in enumerate(planes_seq))
    return TemporalWindow(len(frames), len(frames) // 2, frames)


def _const(value=0.4, h=H, w=W):
    return np.full((3, h, w), value)


@pytest.fixture(scope="module")
def noise_journey():
    return make_journey(random_frames(13, seed=9), journey_id="noise")


@pytest.mark.parametrize("method", sorted(DIMS))
def test_dimensions_and_density(noise_journey, method):
    sets = extract_journey(noise_journey, method)
    assert sets
    for ds in sets:
        assert ds.vectors.shape[1] == DIMS[method]
        assert ds.vectors.dtype == np.float32
        if method != "LW_COLOR":
            assert 1400 <= len(ds) <= 2800
    expected = {"DSIFT": 13, "SF_GABOR": 13, "LW_COLOR": 3, "ST_GABOR": 5, "ST_GAUSS": 3}[method]
    assert len(sets) == expected


def test_dense_methods_share_grid(noise_journey):
    a = dsift_frame(noise_journey.frames[0])
    b = sf_gabor_frame(noise_journey.frames[0])
    assert np.array_equal(a.grid, b.grid)


@pytest.mark.parametrize("fn", [dsift_frame, sf_gabor_frame])
def test_constant_frame_zero(fn):
    ds = fn(Frame(0, 0, _const().astype(np.float32)))
    assert np.abs(ds.vectors).max() < 1e-9


@pytest.mark.parametrize("fn,length", [(st_gabor_window, 9), (st_gauss_window, 11)])
def test_constant_window_zero(fn, length):
    ds = fn(_window([_const()] * length))
    assert np.abs(ds.vectors).max() < 1e-9


def test_normalized_unit_length(noise_journey):
    for ds in (dsift_frame(noise_journey.frames[1]), sf_gabor_frame(noise_journey.frames[1])):
        np.testing.assert_allclose(np.linalg.norm(ds.vectors, axis=1), 1.0, atol=1e-9)
        assert ds.vectors.min() >= 0


def test_dsift_clipping():
    ds = dsift_frame(Frame(0, 0, np.random.default_rng(0).random((3, H, W)).astype(np.float32)))
    # after clip-and-renormalize no entry can exceed the clip by more than the renormalization gain
    assert ds.vectors.max() < 0.5


def test_unnormalized_sf_gabor_is_scaled_by_contrast():
    plane = np.random.default_rng(1).random((3, H, W)) * 0.5
    a = sf_gabor_frame(Frame(0, 0, plane.astype(np.float32)), normalize=False).vectors
    b = sf_gabor_frame(Frame(0, 0, (2 * plane).astype(np.float32)), normalize=False).vectors
    np.testing.assert_allclose(b, 2 * a, rtol=1e-5, atol=1e-9)


def test_lw_color_static_window_has_no_time_derivative():
    f = np.random.default_rng(2).random((3, 40, 60))
    g = lw_color_gradients(_window([f] * 11))
    assert g.shape == (3, 3, 40, 60)
    assert np.abs(g[:, 2]).max() == 0.0
    assert np.abs(g[:, :2]).max() > 0


def test_lw_color_channel_independence():
    rng = np.random.default_rng(3)
    seq = []
    for t in range(11):
        f = np.full((3, 40, 60), 0.5)
        f[0] = rng.random((40, 60))
        seq.append(f)
    g = lw_color_gradients(_window(seq))
    assert np.abs(g[1:]).max() < 1e-12
    v = lw_color_window(_window(seq))
    assert v.shape == (144,)
    assert np.abs(v[48:]).max() < 1e-12 and v[:48].max() > 0


def test_lw_color_requires_full_window():
    with pytest.raises(DataError):
        lw_color_gradients(_window([_const()] * 9))


def test_sphere_bins_layout():
    assert sphere_bins(np.array(0.0), np.array(0.0), np.array(1.0)) == 0
    assert sphere_bins(np.array(0.0), np.array(0.0), np.array(-1.0)) == 1
    az = np.linspace(0, 2 * np.pi, 70, endpoint=False)
    eq = sphere_bins(np.cos(az), np.sin(az), np.zeros_like(az))
    assert set(eq.tolist()) == set(range(6, 13))
    mid = sphere_bins(np.cos(az), np.sin(az), np.full_like(az, 1.0))  # 45 degrees up
    assert set(mid.tolist()) == {2, 3}
    low = sphere_bins(np.cos(az), np.sin(az), np.full_like(az, -1.0))
    assert set(low.tolist()) == {4, 5}


def test_st_gabor_static_ramp_stays_on_equator():
    ramp = np.tile(np.linspace(0.1, 0.9, W), (3, H, 1))
    win = _window([ramp] * 9)
    vx, vy, vt = st_gabor_field(win)
    assert np.abs(vt).max() < 1e-12
    bins = sphere_bins(vx, vy, vt)
    strong = np.hypot(vx, vy) > 1e-9
    assert np.all(bins[strong] >= 6)
    ds = st_gabor_window(win, normalize=False)
    per_bin = ds.vectors.reshape(-1, 17, 13).sum(axis=(0, 1))
    assert per_bin[:6].max() == 0 and per_bin[6:].sum() > 0


def test_st_gauss_vertical_edge_horizontal_bins():
    f = np.full((3, H, W), 0.2)
    f[:, :, W // 2:] = 0.8
    ds = st_gauss_window(_window([f] * 11), normalize=False)
    per_bin = ds.vectors.reshape(-1, 17, 8).sum(axis=(0, 1))
    horizontal = per_bin[0] + per_bin[4]
    assert horizontal / per_bin.sum() > 0.99


def test_orientation_bins_nearest():
    ang = np.array([0.0, 0.3, 0.5, np.pi, 1.9 * np.pi]) + 1e-9
    assert orientation_bins(np.cos(ang), np.sin(ang)).tolist() == [0, 0, 1, 4, 0]


def test_space_time_frame_indices(noise_journey):
    sets = extract_journey(noise_journey, "ST_GAUSS")
    assert [ds.frame_index for ds in sets] == [5, 6, 7]


def test_extract_jobs_deterministic(noise_journey):
    a = extract_journey(noise_journey, "SF_GABOR", jobs=1)
    b = extract_journey(noise_journey, "SF_GABOR", jobs=3)
    assert all(np.array_equal(x.vectors, y.vectors) for x, y in zip(a, b))


def test_unknown_method(noise_journey):
    with pytest.raises(ValueError):
        extract_journey(noise_journey, "HOG3D")


def test_dump_round_trip(tmp_path, noise_journey):
    sets = extract_journey(make_journey([f.planes for f in noise_journey.frames[:2]]), "DSIFT")
    path = tmp_path / "d.vpd"
    write_descriptor_dump(path, sets)
    back = read_descriptor_dump(path)
    assert len(back) == 2
    for a, b in zip(sets, back):
        assert b.method == "DSIFT" and b.frame_index == a.frame_index and b.support == a.support
        assert np.array_equal(a.grid, b.grid)
        assert np.array_equal(a.vectors, b.vectors)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(DataError):
        read_descriptor_dump(path)
