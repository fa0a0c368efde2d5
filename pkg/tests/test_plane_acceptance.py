import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from fetal_ac.acceptance import (
    N_AUGMENT,
    AcceptanceConfig,
    AcceptanceDecision,
    AcceptanceNet,
    AcceptanceTrainConfig,
    accuracy_at,
    assess_plane,
    augment,
    check_plane,
    crop_and_rescale,
    crop_box,
    load_acceptance,
    save_acceptance,
    select_threshold,
    train_acceptance,
)
from fetal_ac.ellipse import Ellipse
from fetal_ac.errors import InputError, ParameterError
from fetal_ac.nn import AdamConfig
from fetal_ac.patches import ClassLabel

COMPACT = AcceptanceConfig.compact()


def blob(size=32, cx=16.0, cy=16.0, r=6.0):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r)).astype(np.float32)


def test_default_geometry_shapes():
    trace = AcceptanceNet(AcceptanceConfig()).shape_trace()
    assert trace == [(124, 124, 64), (41, 41, 64), (39, 39, 128), (20, 20, 128), (256,), (512,), (2,)]


def test_crop_identity_on_aligned_box():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, (128, 128)).astype(np.uint8)
    x = crop_and_rescale(labels, size=128, box=(-0.5, -0.5, 127.5, 127.5))
    for k, cls in enumerate((ClassLabel.SB, ClassLabel.UV, ClassLabel.AF)):
        np.testing.assert_allclose(x[..., k], labels == cls, atol=1e-6)


def test_crop_downsample_averages_blocks():
    labels = np.zeros((64, 64), np.uint8)
    labels[:, :32] = ClassLabel.AF
    x = crop_and_rescale(labels, size=32, box=(-0.5, -0.5, 63.5, 63.5))
    assert x.shape == (32, 32, 3)
    np.testing.assert_allclose(x[:, :15, 2], 1, atol=1e-6)
    np.testing.assert_allclose(x[:, 17:, 2], 0, atol=1e-6)


def test_shadow_only_map_gives_zeros():
    labels = np.full((256, 256), ClassLabel.SA, np.uint8)
    x = crop_and_rescale(labels, Ellipse(128, 128, 60, 50, 0.3), size=32)
    assert not x.any()


def test_stomach_bubble_at_centre_stays_centred():
    yy, xx = np.mgrid[0:256, 0:256]
    labels = np.where(np.hypot(xx - 120, yy - 140) <= 12, ClassLabel.SB, 0).astype(np.uint8)
    x = crop_and_rescale(labels, Ellipse(120, 140, 70, 55, 1.0), size=64)
    cy, cx = ndimage.center_of_mass(x[..., 0])
    assert cx == pytest.approx(31.5, abs=0.3) and cy == pytest.approx(31.5, abs=0.3)


def test_crop_box_of_axis_aligned_ellipse():
    assert crop_box(Ellipse(100, 80, 50, 40, 0), 0.05) == pytest.approx((47.5, 38.0, 152.5, 122.0))


def test_crop_errors():
    labels = np.zeros((64, 64), np.uint8)
    with pytest.raises(InputError):
        crop_and_rescale(labels, box=(10, 10, 10, 20))
    with pytest.raises(InputError):
        crop_and_rescale(labels, box=(100, 100, 120, 120))
    with pytest.raises(ParameterError):
        crop_and_rescale(labels)


def test_augment_count_and_identities():
    x = np.stack([blob(), blob(cx=10), blob(cy=22)], axis=-1)
    out = augment(x)
    assert out.shape == (N_AUGMENT, 32, 32, 3) == (36, 32, 32, 3)
    np.testing.assert_array_equal(out[0], x)
    np.testing.assert_array_equal(out[18], x[:, ::-1])
    np.testing.assert_array_equal(augment(out[18])[18], x)
    zeros = augment(np.zeros((32, 32, 3)))
    assert not zeros.any()


def test_augment_rotation_inverts():
    x = blob(cx=19, cy=14)[..., None].repeat(3, -1)
    rotated = augment(x)[1]  # 20 degrees
    back = ndimage.rotate(rotated, -20, axes=(1, 0), reshape=False, order=1)
    yy, xx = np.mgrid[0:32, 0:32]
    disk = np.hypot(xx - 15.5, yy - 15.5) < 12  # corners leave the frame during rotation
    np.testing.assert_allclose(back[disk], x[disk], atol=0.03)
    assert np.abs(rotated - x).max() > 0.1


def test_augment_rotation_direction_is_consistent():
    x = blob(cx=26, cy=16, r=2)[..., None].repeat(3, -1)
    quarter = [ndimage.center_of_mass(v[..., 0]) for v in augment(x)[[0, 9]]]
    (y0, x0), (y1, x1) = quarter
    # 180 degrees about the centre maps (26, 16) to (5, 15)
    assert (x1, y1) == pytest.approx((31 - x0, 31 - y0), abs=0.2)


def test_threshold_example():
    thr, acc = select_threshold(np.array([0.2, 0.6, 0.9]), np.array([False, True, True]))
    assert thr == pytest.approx(0.4) and acc == 1.0


def test_threshold_extremes_and_empty():
    thr, acc = select_threshold(np.array([0.3, 0.4]), np.array([True, True]))
    assert acc == 1.0 and thr <= 0.3
    with pytest.raises(ParameterError):
        select_threshold(np.array([]), np.array([]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=40))
def test_threshold_is_optimal(pairs):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    thr, acc = select_threshold(scores, labels)
    assert acc == accuracy_at(scores, labels, thr)
    # accuracy only changes at score values, so these cover every achievable split
    every = [accuracy_at(scores, labels, t) for t in np.concatenate([scores, [np.inf]])]
    assert acc >= max(every)
    for fixed in (0.25, 0.5, 0.75):
        assert acc >= accuracy_at(scores, labels, fixed)


def test_untrained_net_scores_zero_input_at_half():
    net = AcceptanceNet(COMPACT, seed=4)
    assert net.probability_true(np.zeros((32, 32, 3))) == pytest.approx(0.5, abs=1e-7)


def test_decision_is_inclusive():
    assert AcceptanceDecision.decide(0.5, 0.5).accepted
    assert not AcceptanceDecision.decide(0.4999, 0.5).accepted
    assert AcceptanceDecision.decide(0.7, 0.5).to_dict() == {
        "probability_true": 0.7, "threshold": 0.5, "accepted": True
    }


def _toy_planes(n, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2 == 0
    xs = np.zeros((n, 32, 32, 3), np.float32)
    for i in range(n):
        c = rng.uniform(10, 22, 2)
        xs[i, ..., 2] = blob(cx=c[0], cy=c[1], r=8)
        if y[i]:
            xs[i, ..., 0] = blob(cx=c[0], cy=c[1], r=3)
    return xs, y


def test_separable_toy_reaches_full_accuracy():
    tx, ty = _toy_planes(16, 0)
    vx, vy = _toy_planes(10, 1)
    res = train_acceptance(tx, ty, vx, vy, COMPACT,
                           AcceptanceTrainConfig(iterations=150, batch_size=16, augment=True,
                                                 adam=AdamConfig(learning_rate=1e-3)))
    assert res.test_accuracy == 1.0
    assert accuracy_at(res.test_scores, vy, res.threshold) == 1.0


def test_single_class_split_is_an_error():
    tx, ty = _toy_planes(4, 0)
    with pytest.raises(ParameterError):
        train_acceptance(tx, np.ones(4, bool), tx, ty, COMPACT, AcceptanceTrainConfig(iterations=1))
    with pytest.raises(ParameterError):
        train_acceptance(tx, ty, tx, np.zeros(4, bool), COMPACT, AcceptanceTrainConfig(iterations=1))


def test_check_and_assess_plane():
    net = AcceptanceNet(COMPACT, seed=0)
    labels = np.zeros((256, 256), np.uint8)
    d = check_plane(net, 0.5, labels, Ellipse(128, 128, 60, 50, 0))
    assert d.probability_true == pytest.approx(0.5, abs=1e-7)
    rejected = assess_plane(net, 0.5, labels)
    assert not rejected.accepted and rejected.reason == "no-ellipse" and rejected.probability_true == 0.0


def test_save_load_round_trip(tmp_path):
    net = AcceptanceNet(COMPACT, seed=7)
    save_acceptance(tmp_path / "a.acnn", net, 0.42)
    back, thr = load_acceptance(tmp_path / "a.acnn")
    assert thr == 0.42 and back.config == COMPACT
    x = np.random.default_rng(0).random((3, 32, 32, 3))
    np.testing.assert_array_equal(net.probability_true(x), back.probability_true(x))
