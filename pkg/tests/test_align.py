import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from group_attention.align import (
    OUTPUT_HEIGHT,
    OUTPUT_WIDTH,
    TEMPLATE,
    SimilarityTransform,
    align_face,
    estimate_similarity,
    format_landmarks,
    parse_landmarks,
    render_template_face,
    warp,
    warp_to_template,
)


def random_transform(rng, scale=(0.5, 2.0), shift=20.0):
    return SimilarityTransform(
        float(rng.uniform(*scale)), float(rng.uniform(-math.pi, math.pi)), *rng.uniform(-shift, shift, 2).tolist()
    )


def test_template_eyes_are_horizontal_and_inside_frame():
    assert TEMPLATE[0, 1] == TEMPLATE[1, 1]
    assert np.all((TEMPLATE >= 0) & (TEMPLATE < [OUTPUT_WIDTH, OUTPUT_HEIGHT]))


def test_identity_estimate():
    t = estimate_similarity(TEMPLATE)
    assert abs(t.scale - 1) < 1e-9 and abs(t.theta) < 1e-9
    assert abs(t.tx) < 1e-9 and abs(t.ty) < 1e-9


def test_known_transform_is_inverted():
    t0 = SimilarityTransform(2.0, math.radians(30), 10.0, 5.0)
    est = estimate_similarity(t0.apply(TEMPLATE))
    assert abs(est.scale - 0.5) < 1e-6
    assert abs(est.theta - math.radians(-30)) < 1e-6
    roundtrip = est.compose(t0)
    np.testing.assert_allclose(roundtrip.apply(TEMPLATE), TEMPLATE, atol=1e-6)


def test_noisy_landmarks_never_reflect():
    rng = np.random.default_rng(0)
    residuals = []
    for _ in range(100):
        src = TEMPLATE + rng.normal(0, 0.5, TEMPLATE.shape)
        t = estimate_similarity(src)
        assert np.linalg.det(t.linear) > 0
        residuals.append(np.linalg.norm(t.apply(src) - TEMPLATE, axis=1).mean())
    assert np.mean(residuals) < 0.5


def test_mirrored_landmarks_still_give_a_rotation():
    mirrored = TEMPLATE * [-1, 1]
    t = estimate_similarity(mirrored)
    assert np.linalg.det(t.linear) > 0


def test_degenerate_landmarks_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        estimate_similarity(np.tile([[10.0, 20.0]], (5, 1)))
    with pytest.raises(ValueError):
        estimate_similarity(np.full((5, 2), np.nan))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_estimate_properties(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng)
    src = rng.uniform(0, 200, size=(5, 2))
    est = estimate_similarity(src)
    lin = est.linear
    np.testing.assert_allclose(lin.T @ lin, est.scale**2 * np.eye(2), atol=1e-6)
    assert np.linalg.det(lin) > 0
    # exact similarity images are recovered exactly
    exact = estimate_similarity(src, t.apply(src))
    assert np.abs(exact.apply(src) - t.apply(src)).max() < 1e-6
    # composition consistency
    composed = estimate_similarity(t.apply(src)).compose(t)
    for a, b in zip((composed.scale, composed.tx, composed.ty), (est.scale, est.tx, est.ty)):
        assert abs(a - b) < 1e-5
    assert abs(math.remainder(composed.theta - est.theta, 2 * math.pi)) < 1e-5


def test_eyes_only_option_uses_two_points():
    src = TEMPLATE.copy()
    src[2:] += 7.0  # disturb nose and mouth
    t = estimate_similarity(src, eyes_only=True)
    np.testing.assert_allclose(t.apply(src[:2]), TEMPLATE[:2], atol=1e-9)


def test_warp_identity_is_bitwise():
    img = np.random.default_rng(1).integers(0, 256, (OUTPUT_HEIGHT, OUTPUT_WIDTH), dtype=np.uint8)
    assert warp_to_template(img, SimilarityTransform()).tobytes() == img.tobytes()
    rgb = np.random.default_rng(2).integers(0, 256, (OUTPUT_HEIGHT, OUTPUT_WIDTH, 3), dtype=np.uint8)
    assert warp_to_template(rgb, SimilarityTransform()).tobytes() == rgb.tobytes()


def test_warp_integer_shift_copies_columns():
    img = np.random.default_rng(3).integers(0, 256, (OUTPUT_HEIGHT, OUTPUT_WIDTH), dtype=np.uint8)
    out = warp_to_template(img, SimilarityTransform(tx=1.0))
    np.testing.assert_array_equal(out[:, 1:], img[:, :-1])
    assert not out[:, 0].any()


def test_warp_constant_image():
    img = np.full((50, 40), 77, dtype=np.uint8)
    t = SimilarityTransform(1.7, 0.3, 20.0, 10.0)
    out = warp_to_template(img, t)
    assert out.shape == (OUTPUT_HEIGHT, OUTPUT_WIDTH)
    assert set(np.unique(out)) <= {0, 77}
    # output pixels whose source lies well inside are the constant
    ys, xs = np.mgrid[0:OUTPUT_HEIGHT, 0:OUTPUT_WIDTH]
    src = t.inverse().apply(np.stack([xs.ravel(), ys.ravel()], 1))
    inner = (src[:, 0] > 1) & (src[:, 0] < 38) & (src[:, 1] > 1) & (src[:, 1] < 48)
    outer = (src[:, 0] < -1) | (src[:, 0] > 40) | (src[:, 1] < -1) | (src[:, 1] > 50)
    assert inner.any() and outer.any()
    assert np.all(out.ravel()[inner] == 77) and np.all(out.ravel()[outer] == 0)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_output_is_always_96_by_112(h, w, seed):
    img = np.zeros((h, w), dtype=np.uint8)
    assert warp_to_template(img, random_transform(np.random.default_rng(seed))).shape == (112, 96)


def test_align_face_lands_eyes_on_template():
    rng = np.random.default_rng(4)
    t = random_transform(rng, shift=5.0)
    landmarks = t.apply(TEMPLATE)
    img = np.zeros((200, 200), dtype=np.uint8)
    out, est = align_face(img, landmarks)
    assert out.shape == (112, 96)
    eyes = est.apply(landmarks[:2])
    assert np.linalg.norm(eyes - TEMPLATE[:2], axis=1).max() < 0.5
    assert abs(eyes[0, 1] - eyes[1, 1]) < 1e-6


def test_render_transform_restore():
    face = render_template_face()
    rng = np.random.default_rng(5)
    for _ in range(5):
        t = SimilarityTransform(float(rng.uniform(1.2, 2.0)), float(rng.uniform(-0.6, 0.6)), 0.0, 0.0)
        # place the enlarged face inside a 300x300 canvas
        centre = t.apply([[48.0, 56.0]])[0]
        t = SimilarityTransform(t.scale, t.theta, 150.0 - centre[0], 150.0 - centre[1])
        photo = warp(face, t, 300, 300)
        restored, _ = align_face(photo, t.apply(TEMPLATE))
        inner = (slice(8, OUTPUT_HEIGHT - 8), slice(8, OUTPUT_WIDTH - 8))
        err = np.abs(restored[inner].astype(float) - face[inner].astype(float)).mean() / 255
        assert err < 5 / 255


def test_landmark_text_round_trip():
    text = format_landmarks(TEMPLATE)
    assert text == "30,52;66,52;48,72;33,92;63,92"
    np.testing.assert_array_equal(parse_landmarks(text), TEMPLATE)
    for bad in ("1,2;3,4", "1,2;3,4;5,6;7,8;9", "a,2;3,4;5,6;7,8;9,0", "1,2;3,4;5,6;7,8;inf,0"):
        with pytest.raises(ValueError):
            parse_landmarks(bad)
