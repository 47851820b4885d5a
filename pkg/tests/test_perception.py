import numpy as np
import pytest

from synth2real import autodiff as ad
from synth2real import imageops
from synth2real import perception as P
from synth2real import synthrender as S

from gradcheck import check_gradients


def _images(n, seed=0, size=32):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3))


def test_self_distance_is_zero():
    a = _images(1)[0]
    assert P.perceptual_distance(a, a) == 0.0


def test_distance_is_symmetric():
    a, b = _images(2, seed=1)
    assert P.perceptual_distance(a, b) == pytest.approx(P.perceptual_distance(b, a), abs=1e-9)


def test_scrambling_costs_more_than_blurring():
    rng = np.random.default_rng(2)
    blur = imageops.blur_matrix(32, 5, 0.7)
    for params in S.sample_scene(5, 20):
        img = S.render_image(params, 32, "photo")
        blurred = imageops._apply(img, blur, blur)
        scrambled = rng.permutation(img.reshape(-1, 3)).reshape(img.shape)
        assert P.perceptual_distance(img, scrambled) > P.perceptual_distance(img, blurred)


def test_distance_gradient():
    a, b = _images(2, seed=3, size=8)
    assert check_gradients(lambda x: P.perceptual_distance(x, b), [a]) < 1e-6


def test_batched_distances_match_single():
    a, b = _images(3, seed=4), _images(1, seed=5)[0]
    batched = P.perceptual_distances(a, b)
    for i in range(3):
        assert batched[i] == pytest.approx(P.perceptual_distance(a[i], b), rel=1e-12)


def test_distance_shape_mismatch():
    with pytest.raises(ValueError):
        P.perceptual_distance(np.zeros((8, 8, 3)), np.zeros((8, 6, 3)))


def test_features_are_calibrated_and_seeded():
    ext = P.FeatureExtractor(seed=0)
    assert ext.n_features == sum(P.DEFAULT_WIDTHS)
    assert ext.describe() == {"seed": 0, "widths": [8, 16, 32]}
    other = P.FeatureExtractor(seed=1)
    assert not np.allclose(ext.kernels[0], other.kernels[0])
    np.testing.assert_array_equal(ext.kernels[0], P.FeatureExtractor(seed=0).kernels[0])


def test_features_of_tracked_input_are_tensors():
    tape = ad.Tape()
    feats = P.default_extractor().features(tape.variable(_images(1)[0]))
    assert all(isinstance(f, ad.Tensor) and f.tape is tape for f in feats)


# --- landmarks ------------------------------------------------------------------------

def test_template_has_68_points_inside_unit_square():
    t = P.template_unit()
    assert t.shape == (68, 2)
    assert t.min() > 0.0 and t.max() < 1.0
    # jaw runs left to right, the first eye is left of the second
    assert t[0, 0] < t[16, 0] and t[36:42, 0].mean() < t[42:48, 0].mean()


def test_flat_image_gives_template():
    pts = P.extract_landmarks(np.full((40, 40, 3), 0.3)).points
    np.testing.assert_array_equal(pts, P.template_points(40, 40))


def test_landmarks_deterministic():
    img = S.render_image(S.sample_scene(1, 1)[0], 48)
    np.testing.assert_array_equal(P.extract_landmarks(img).points, P.extract_landmarks(img).points)


@pytest.mark.parametrize("shift", [(3, 2), (-4, 1), (0, -5)])
def test_periodic_translation_equivariance(shift):
    dx, dy = shift
    img = S.render_image(S.SceneParams(yaw=0.2, background_id=2), 64)
    moved = np.roll(img, (dy, dx), axis=(0, 1))
    a, b = P.extract_landmarks(img).points, P.extract_landmarks(moved).points
    assert np.abs(b - a - [dx, dy]).max() <= 1.0


def test_landmarks_respond_to_pose():
    left = P.extract_landmarks(S.render_image(S.SceneParams(yaw=-0.5), 64)).points
    right = P.extract_landmarks(S.render_image(S.SceneParams(yaw=0.5), 64)).points
    assert np.abs(left - right).mean() > 0.5


def test_landmark_set_validates():
    with pytest.raises(ValueError):
        P.LandmarkSet(np.zeros((4, 3)))


# --- class posteriors ---------------------------------------------------------------

def test_probabilities_are_distributions():
    model = P.LabelModel()
    probs = model.probabilities(_images(5, seed=6))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(probs >= 0)


def test_identical_images_identical_probabilities():
    img = _images(1, seed=7)[0]
    np.testing.assert_array_equal(P.class_probabilities(img), P.class_probabilities(img.copy()))


def test_single_class_is_certain():
    np.testing.assert_array_equal(P.class_probabilities(_images(1)[0], P.LabelModel(n_classes=1)), [1.0])


def test_probabilities_vary_across_images():
    probs = P.LabelModel().probabilities(np.stack(
        [S.render_image(p, 32, "photo") for p in S.sample_scene(0, 8)]))
    assert probs.std(axis=0).max() > 0.01
