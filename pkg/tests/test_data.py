import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from jasrnet import data, synthetic
from jasrnet.data import (
    AugmentationParams,
    ConfigurationError,
    LandmarkParseError,
    augment,
    bicubic_resample,
    crop_and_resize,
    decode_heatmaps,
    format_landmark_file,
    make_sample,
    parse_landmark_file,
    render_heatmaps,
    synthesize_lr,
)


# -- reference resampler: explicit loops, no shared code with the library --

def keys_exact(t, a=Fraction(-1, 2)):
    t = abs(Fraction(t))
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return Fraction(0)


def keys_float(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def ref_resize_1d(signal, n_out):
    n_in = len(signal)
    scale = n_out / n_in
    ks = min(scale, 1.0)
    out = []
    for i in range(n_out):
        c = (i + 0.5) / scale - 0.5
        acc = wsum = 0.0
        for j in range(int(math.floor(c - 2 / ks)) - 1, int(math.ceil(c + 2 / ks)) + 2):
            w = keys_float((c - j) * ks)
            acc += w * signal[min(max(j, 0), n_in - 1)]
            wsum += w
        out.append(acc / wsum)
    return out


def ref_resize(image, n_out):
    img = np.asarray(image, dtype=np.float64)
    cols = np.array([[ref_resize_1d(img[:, x, ch], n_out) for x in range(img.shape[1])]
                     for ch in range(img.shape[2])])          # ch, x, y
    rows = np.array([[ref_resize_1d(cols[ch, :, y], n_out) for y in range(n_out)]
                     for ch in range(img.shape[2])])          # ch, y, x
    return np.moveaxis(rows, 0, -1)


# -- annotation documents --

PTS3 = "version: 1\nn_points: 3\n{\n1.0 2.0\n3.5 4.5\n5.0 6.0\n}\n"


def test_parse_three_points():
    pts = parse_landmark_file(PTS3)
    assert pts.tolist() == [[1.0, 2.0], [3.5, 4.5], [5.0, 6.0]]


def test_parse_count_mismatch():
    body = "\n".join("1 1" for _ in range(67))
    with pytest.raises(LandmarkParseError, match="point-count mismatch"):
        parse_landmark_file(f"version: 1\nn_points: 68\n{{\n{body}\n}}\n")


@pytest.mark.parametrize("text, line", [
    ("ver 1\nn_points: 1\n{\n1 1\n}", 1),
    ("version: 1\npoints: 1\n{\n1 1\n}", 2),
    ("version: 1\nn_points: x\n{\n1 1\n}", 2),
    ("version: 1\nn_points: 1\n[\n1 1\n}", 3),
    ("version: 1\nn_points: 2\n{\n1 1\n1 abc\n}", 5),
    ("version: 1\nn_points: 1\n{\n1 2 3\n}", 4),
])
def test_parse_errors_name_line(text, line):
    with pytest.raises(LandmarkParseError) as err:
        parse_landmark_file(text)
    assert err.value.line_no == line
    assert f"line {line}" in str(err.value)


def test_parse_profile_count():
    with pytest.raises(LandmarkParseError, match="profile expects 68"):
        parse_landmark_file(PTS3, expected_count=68)


@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=80))
def test_landmark_round_trip(points):
    again = parse_landmark_file(format_landmark_file(points))
    assert again.tolist() == [list(p) for p in points]


# -- profiles --

@pytest.mark.parametrize("name", ["300w", "aflw"])
def test_mirror_is_involution(name):
    perm = np.array(data.get_profile(name).mirror)
    assert sorted(perm) == list(range(len(perm)))
    assert (perm[perm] == np.arange(len(perm))).all()


def test_mirror_68_matches_template_symmetry():
    t = synthetic.template_68()
    perm = np.array(data.PROFILES["300w"].mirror)
    assert perm[0] == 16 and perm[16] == 0
    assert perm[36] == 45 and perm[30] == 30
    np.testing.assert_allclose(t[perm] * [-1, 1], t, atol=1e-12)


def test_custom_profile():
    p = data.get_profile("custom:5")
    assert p.num_landmarks == 5 and p.mirror is None
    with pytest.raises(ConfigurationError):
        data.get_profile("nope")


# -- bicubic --

def test_keys_kernel_values():
    for t in (0, 0.25, 0.5, 0.75, 1, 1.25, 1.5, 1.75, 2, 2.5):
        assert data.keys_kernel(t) == pytest.approx(float(keys_exact(Fraction(t))), abs=1e-15)


@pytest.mark.parametrize("factor", [Fraction(1, 8), 2, 8, 1])
def test_constant_preserved(factor):
    size = 16 if factor != Fraction(1, 8) else 128
    img = np.full((size, size, 3), 0.5)
    out = bicubic_resample(img, factor)
    assert out.shape == (int(size * factor), int(size * factor), 3)
    assert np.abs(out - 0.5).max() <= 1e-6


def test_upscale_shape():
    assert bicubic_resample(np.zeros((16, 16, 3)), 8).shape == (128, 128, 3)


def test_impulse_response_matches_keys():
    sig = np.zeros((1, 16))
    sig[0, 8] = 1.0
    up = bicubic_resample(sig, 2)
    assert up.shape == (2, 32)
    expected = {16: Fraction(1, 4), 17: Fraction(1, 4), 15: Fraction(3, 4), 18: Fraction(3, 4),
                14: Fraction(5, 4), 19: Fraction(5, 4), 13: Fraction(7, 4), 20: Fraction(7, 4)}
    for j, t in expected.items():
        assert up[0, j] == pytest.approx(float(keys_exact(t)), abs=1e-12)
    assert up[0, 16] == pytest.approx(111 / 128, abs=1e-12)
    assert up[0, 15] == pytest.approx(29 / 128, abs=1e-12)


def test_non_integral_factor():
    with pytest.raises(ValueError, match="non-integral"):
        bicubic_resample(np.zeros((10, 10)), Fraction(1, 8))


def test_resample_matches_loop_reference(rng):
    img = rng.random((16, 16, 2))
    np.testing.assert_allclose(bicubic_resample(img, Fraction(1, 4)), ref_resize(img, 4), atol=1e-12)
    np.testing.assert_allclose(bicubic_resample(img[:4, :4], 4), ref_resize(img[:4, :4], 16), atol=1e-12)


def test_synthesize_lr_composition(rng):
    hr = rng.random((128, 128, 3))
    expected = np.clip(ref_resize(ref_resize(hr, 16), 128), 0, 1)
    out = synthesize_lr(hr)
    assert out.shape == (128, 128, 3)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_synthesize_lr_constant():
    hr = np.full((128, 128, 3), 0.3)
    np.testing.assert_allclose(synthesize_lr(hr), 0.3, atol=1e-12)


# -- crop --

def test_crop_full_box_halves(rng):
    img = rng.random((256, 256, 3))
    out, tf = crop_and_resize(img, (0, 0, 256, 256))
    assert out.shape == (128, 128, 3)
    np.testing.assert_allclose(tf.apply([[128, 128]]), [[64, 64]])


def test_crop_identity(rng):
    img = rng.random((128, 128, 3))
    out, tf = crop_and_resize(img, (0, 0, 128, 128))
    np.testing.assert_allclose(out, img, atol=1e-12)
    assert (tf.sx, tf.sy, tf.tx, tf.ty) == (1, 1, 0, 0)


def test_crop_corners_map_to_output_corners(rng):
    img = rng.random((200, 150, 3))
    box = (17.0, 33.0, 117.0, 173.0)
    _, tf = crop_and_resize(img, box)
    corners = tf.apply([[box[0], box[1]], [box[2], box[3]], [box[0], box[3]]])
    np.testing.assert_allclose(corners, [[0, 0], [128, 128], [0, 128]], atol=0.5)
    np.testing.assert_allclose(tf.inverse().apply(corners), [[17, 33], [117, 173], [17, 173]])


def test_crop_samples_the_right_place():
    img = np.zeros((100, 100, 3))
    img[40:60, 40:60] = 1.0
    out, _ = crop_and_resize(img, (30, 30, 70, 70), size=40)
    np.testing.assert_allclose(out[10:30, 10:30], 1.0, atol=1e-9)
    np.testing.assert_allclose(out[:8, :8], 0.0, atol=1e-9)


@pytest.mark.parametrize("box", [(10, 10, 10, 50), (5, 5, 4, 20), (300, 300, 400, 400)])
def test_crop_rejects_bad_boxes(box):
    with pytest.raises(ValueError):
        crop_and_resize(np.zeros((64, 64, 3)), box)


# -- heatmaps --

def test_render_peak_on_cell_center():
    hm = render_heatmaps([[44, 60]])
    assert hm.shape == (1, 16, 16)
    assert hm[0, 7, 5] == 1.0
    assert hm.max() == 1.0


def test_render_one_cell_away():
    hm = render_heatmaps([[44, 60]], sigma=1.5)
    expected = math.exp(-1 / 4.5)
    assert expected == pytest.approx(0.8007, abs=1e-4)
    for r, c in [(7, 4), (7, 6), (6, 5), (8, 5)]:
        assert hm[0, r, c] == pytest.approx(expected, abs=1e-15)


def test_render_corner_monotone():
    hm = render_heatmaps([[0, 0]])[0]
    assert np.unravel_index(hm.argmax(), hm.shape) == (0, 0)
    assert (np.diff(hm, axis=0) <= 0).all() and (np.diff(hm, axis=1) <= 0).all()


def test_render_out_of_frame():
    hm, vis = render_heatmaps([[-5, 20], [130, 3], [10, 10]], return_visibility=True)
    assert vis.tolist() == [False, False, True]
    assert hm[:2].max() == 0.0
    assert hm[2].max() > 0.5


def test_decode_one_hot():
    hm = np.zeros((1, 16, 16))
    hm[0, 7, 5] = 1.0
    np.testing.assert_array_equal(decode_heatmaps(hm), [[44.0, 60.0]])


def test_decode_tie_takes_first_in_scan_order():
    hm = np.zeros((1, 16, 16))
    hm[0, 2, 2] = hm[0, 9, 9] = 1.0
    np.testing.assert_array_equal(decode_heatmaps(hm), [[20.0, 20.0]])


def test_decode_batched():
    hm = np.zeros((2, 3, 16, 16))
    hm[1, 2, 4, 9] = 1
    assert decode_heatmaps(hm).shape == (2, 3, 2)
    np.testing.assert_array_equal(decode_heatmaps(hm)[1, 2], [76.0, 36.0])


def sweep_positions(n=33):
    """Sub-cell sweep inside one cell plus a sweep across the whole frame."""
    sub = (np.arange(n) / (n - 1)) * 8 * 0.999999 + 8 * 6
    frame = np.arange(n) / n * 128
    pts = []
    for axis in (sub, frame):
        xx, yy = np.meshgrid(axis, axis)
        pts.append(np.stack([xx.ravel(), yy.ravel()], axis=1))
    return np.concatenate(pts)


def test_render_decode_round_trip():
    pts = sweep_positions()
    err = np.abs(decode_heatmaps(render_heatmaps(pts)) - pts) / 8
    assert err.max() <= 0.5 + 1e-12
    assert np.hypot(*(err * 8).T).max() <= 4 * math.sqrt(2) + 1e-9


@given(st.floats(0, 127.999), st.floats(0, 127.999))
def test_heatmap_argmax_is_floor_cell(x, y):
    assume(x % 8 != 0 and y % 8 != 0)  # exact boundaries tie; first cell wins by design
    sample_hm = render_heatmaps([[x, y]])[0]
    r, c = np.unravel_index(sample_hm.argmax(), sample_hm.shape)
    assert (c, r) == (int(x // 8), int(y // 8))


# -- samples and augmentation --

def test_make_sample_invariants(faces):
    s = faces.sample(0)
    assert s.hr.shape == s.lr.shape == (128, 128, 3)
    x0, y0, x1, y1 = s.face_box
    assert 0 <= x0 < x1 <= 128 and 0 <= y0 < y1 <= 128
    cells = np.floor(s.landmarks / 8).astype(int)
    for k in np.flatnonzero(s.visible):
        r, c = np.unravel_index(s.heatmaps[k].argmax(), (16, 16))
        assert (c, r) == tuple(cells[k])


def test_augment_identity(faces, rng):
    s = make_sample(faces.hr[0], faces.landmarks[0])
    (out,) = augment(s, data.identity_params(), rng)
    np.testing.assert_allclose(out.hr, s.hr, atol=1e-6)
    np.testing.assert_allclose(out.lr, s.lr, atol=1e-6)
    np.testing.assert_allclose(out.landmarks, s.landmarks, atol=1e-6)
    np.testing.assert_allclose(out.heatmaps, s.heatmaps, atol=1e-6)


def test_augment_fifteen_copies(faces):
    s = faces.sample(1)
    out = augment(s, AugmentationParams(copies=15), data.sample_rng(0, 1), data.PROFILES["300w"].mirror)
    assert len(out) == 15
    assert all(o.hr.shape == (128, 128, 3) and o.heatmaps.shape == (68, 16, 16) for o in out)


def test_augment_deterministic(faces):
    s = faces.sample(2)
    mirror = data.PROFILES["300w"].mirror
    a = augment(s, AugmentationParams(copies=3), data.sample_rng(7, 2), mirror)
    b = augment(s, AugmentationParams(copies=3), data.sample_rng(7, 2), mirror)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.hr, y.hr)
        np.testing.assert_array_equal(x.landmarks, y.landmarks)


def test_flip_remaps_indices(faces):
    s = faces.sample(0)
    mirror = data.PROFILES["300w"].mirror
    f = data.warp_sample(s, 1.0, 0.0, True, mirror)
    np.testing.assert_allclose(f.landmarks[0], [128 - s.landmarks[16, 0], s.landmarks[16, 1]], atol=1e-9)
    np.testing.assert_allclose(f.landmarks[16], [128 - s.landmarks[0, 0], s.landmarks[0, 1]], atol=1e-9)
    np.testing.assert_allclose(f.hr, s.hr[:, ::-1], atol=1e-12)
    ff = data.warp_sample(f, 1.0, 0.0, True, mirror)
    np.testing.assert_allclose(ff.landmarks, s.landmarks, atol=1e-9)


@pytest.mark.parametrize("scale, angle, flip", [(1.0, 25.0, False), (1.1, -30.0, True), (0.9, 10.0, True)])
def test_warp_moves_image_and_landmarks_together(scale, angle, flip):
    hr = np.zeros((128, 128, 3))
    pts = np.array([[40.5, 50.5], [90.5, 70.5]])
    for x, y in pts:
        hr[int(y) - 1:int(y) + 2, int(x) - 1:int(x) + 2, 0] = 1.0
    s = make_sample(hr, pts)
    w = data.warp_sample(s, scale, angle, flip, mirror=(1, 0))
    red = w.hr[..., 0]
    for x, y in w.landmarks:
        r, c = int(y), int(x)
        patch = red[r - 2:r + 3, c - 2:c + 3]
        assert patch.max() > 0.5


def test_augment_needs_mirror(faces):
    with pytest.raises(ConfigurationError, match="mirror"):
        augment(faces.sample(0), AugmentationParams(flip_probability=0.5), data.sample_rng(0, 0))


@pytest.mark.parametrize("kw", [dict(copies=0), dict(scale_range=(0.0, 1.0)), dict(flip_probability=1.5)])
def test_bad_augmentation_params(kw):
    with pytest.raises(ConfigurationError):
        AugmentationParams(**kw)
