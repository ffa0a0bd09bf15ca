import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nwsr import imaging
from nwsr.imaging import (
    IDENTITY_STATS,
    BoundsError,
    CollisionError,
    DegenerateFrameError,
    FiberLayout,
    LayoutError,
    SparseImage,
    denormalize,
    normalize_frame,
    normalize_sparse,
    read_signals,
    sparsify,
)


def tri_layout(extra=((2.4, 3.1),)):
    return FiberLayout(np.array(list(extra) + [(5.0, 5.0), (5.0, 2.0)]), (4.0, 4.0), 3.9)


def test_sparsify_single_fibre_rounds_to_nearest_pixel():
    lay = tri_layout()
    sp = sparsify([0.7, 0.0, 0.0], lay, 8, 8)
    assert sp.S[3, 2] == 0.7
    assert sp.M[3, 2] == 1.0
    assert sp.M.sum() == 3


def test_empty_layout_rejected():
    with pytest.raises(LayoutError):
        FiberLayout(np.zeros((0, 2)), (4, 4), 3)


def test_sparsify_counts(small_layout):
    box = small_layout.box_size
    sp = sparsify(np.ones(len(small_layout)), small_layout, box, box)
    assert sp.S.sum() == len(small_layout)
    assert sp.M.sum() == len(small_layout)


def test_collision_rejected():
    with pytest.raises(CollisionError):
        FiberLayout(np.array([(2.1, 2.1), (1.9, 2.0), (4.0, 4.0)]), (3, 3), 2.9)


def test_centre_outside_fov_rejected():
    with pytest.raises(LayoutError):
        FiberLayout(np.array([(0.0, 0.0), (3.0, 3.0), (4.0, 3.0)]), (3, 3), 2.0)


def test_sparsify_out_of_bounds():
    lay = FiberLayout(np.array([(1.0, 1.0), (6.0, 6.0), (1.0, 6.0)]), (3.5, 3.5), 4.0)
    with pytest.raises(BoundsError):
        sparsify([1, 2, 3], lay, 5, 5)


def test_round_half_away():
    assert imaging.round_half_away([0.5, 1.5, -0.5, 2.4999]).tolist() == [1, 2, -1, 2]


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=19, max_size=19))
def test_sparsify_read_roundtrip(vals):
    lay = FiberLayout(
        np.array([(u + 0.3, v - 0.2) for u in range(3, 8) for v in range(3, 8)])[:19], (5.0, 5.0), 4.5
    )
    sp = sparsify(vals, lay, 11, 11)
    assert read_signals(sp, lay).tolist() == [float(v) for v in vals]


def test_sparse_image_invariant():
    with pytest.raises(ValueError):
        SparseImage(np.ones((2, 2)), np.zeros((2, 2)))


def test_normalize_two_pixel_closed_form():
    lr = np.array([[0.0, 2.0]])
    lr_n, hr_n, st_ = normalize_frame(lr, lr)
    assert lr_n.tolist() == [[0.0, 1.0]]
    assert np.array_equal(hr_n, lr_n)
    assert st_.mean_lr == 1.0 and st_.std_lr == 1.0
    assert (st_.scale_min, st_.scale_max) == (-1.0, 1.0)


def test_normalize_standardized_input(rng):
    x = rng.normal(size=(9, 9))
    x = (x - x.mean()) / x.std()
    a, b, _ = normalize_frame(x, x)
    assert np.array_equal(a, b)


def test_constant_frame_rejected():
    with pytest.raises(DegenerateFrameError):
        normalize_frame(np.full((4, 4), 0.3), np.zeros((4, 4)))


def test_hr_not_clamped():
    lr = np.array([[0.0, 1.0]])
    hr = np.array([[-1.0, 3.0]])
    _, hr_n, _ = normalize_frame(lr, hr)
    assert hr_n.min() < 0 and hr_n.max() > 1


def test_identity_stats():
    x = np.linspace(0, 1, 12).reshape(3, 4)
    assert np.array_equal(denormalize(x, IDENTITY_STATS), x)


frames = arrays(np.float64, (6, 7), elements=st.floats(-100, 100, allow_nan=False))


@given(frames)
def test_normalize_roundtrip_and_range(x):
    if x.std() < 1e-6 * max(1.0, np.abs(x).max()):
        return
    lr_n, _, stats = normalize_frame(x, x)
    assert lr_n.min() == 0.0 and lr_n.max() == pytest.approx(1.0, abs=1e-15)
    back = denormalize(lr_n, stats)
    assert np.max(np.abs(back - x)) <= 1e-9 * max(1.0, np.abs(x).max())


def test_random_roundtrip(rng):
    x = rng.random((16, 16))
    lr_n, _, stats = normalize_frame(x, x)
    assert np.max(np.abs(denormalize(lr_n, stats) - x)) < 1e-9


def test_normalize_sparse_only_touches_mask():
    S = np.array([[0.0, 0.5], [0.0, 0.0]])
    M = np.array([[0.0, 1.0], [0.0, 0.0]])
    _, _, stats = normalize_frame(np.array([[0.0, 1.0], [0.5, 0.2]]), np.zeros((2, 2)))
    out = normalize_sparse(SparseImage(S, M), stats)
    assert out.S[0, 0] == 0 and out.S[1, 1] == 0
    assert out.S[0, 1] == stats.apply(0.5)


def test_png_roundtrip_16bit(tmp_path, rng):
    x = rng.random((5, 7))
    imaging.write_png(tmp_path / "a.png", x)
    y = imaging.read_png(tmp_path / "a.png")
    assert y.shape == x.shape
    assert np.max(np.abs(x - y)) <= 0.5 / 65535 + 1e-12


def test_png_clips(tmp_path):
    imaging.write_png(tmp_path / "a.png", np.array([[-0.5, 1.5]]), bits=8)
    assert imaging.read_png(tmp_path / "a.png").tolist() == [[0.0, 1.0]]


def test_layout_csv_roundtrip(tmp_path, small_layout):
    imaging.write_layout_csv(tmp_path / "l.csv", small_layout)
    text = (tmp_path / "l.csv").read_text()
    assert text.startswith("# fov_cx,fov_cy,fov_r=")
    back = imaging.read_layout_csv(tmp_path / "l.csv")
    assert np.array_equal(back.centres, small_layout.centres)
    assert back.fov_centre == small_layout.fov_centre and back.fov_radius == small_layout.fov_radius


def test_layout_csv_missing_header(tmp_path):
    (tmp_path / "l.csv").write_text("1,1\n2,2\n3,1\n")
    with pytest.raises(LayoutError):
        imaging.read_layout_csv(tmp_path / "l.csv")
