import numpy as np
import pytest

from gradcheck import activation_pattern, analytic, central_differences, check_problem, relative_error
from sfada.data import DataError, Dataset, Sample, SplitSpec, prepare_dataset, split_dataset
from sfada.segmenter import (
    NumericError, Prediction, SegmenterParams, TrainConfig, composite_loss, forward, forward_many, gradient,
    init_params, load_checkpoint, loss_and_gradient, lr_at, param_count, predict_dataset, predict_mask,
    save_checkpoint, train,
)
from sfada.synth import default_benchmark


def _image(seed, size=16):
    return np.random.default_rng(seed).standard_normal((size, size))


def test_param_layout():
    p = init_params(0)
    assert p.flat.size == param_count() == 3010
    views = p.views()
    assert views["enc1_w"].shape == (8, 1, 3, 3)
    assert views["head_w"].shape == (2, 8)
    with pytest.raises(ValueError):
        SegmenterParams(np.zeros(5))


def test_init_is_deterministic_with_zero_biases():
    assert init_params(3) == init_params(3)
    assert init_params(3) != init_params(4)
    for name, v in init_params(3).views().items():
        if name.endswith("_b"):
            assert np.all(v == 0)


def test_init_variance_matches_fan_in():
    draws = np.concatenate([init_params(s).views()["enc1_w"].ravel() for s in range(20)])
    assert draws.size >= 1000
    assert abs(draws.var() / (2 / 9) - 1) < 0.2


def test_checkpoint_round_trip(tmp_path):
    p = init_params(5)
    save_checkpoint(p, tmp_path / "a.ckpt")
    assert load_checkpoint(tmp_path / "a.ckpt") == p
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_zero_params_give_ties_resolved_to_background():
    zero = SegmenterParams(np.zeros(param_count()))
    pred = forward(zero, _image(0))
    assert np.all(pred.logits == 0)
    assert np.all(pred.probs == 0.5)
    assert not pred.mask.any()
    assert not predict_mask(zero, _image(1)).mask.any()


def test_probabilities_normalized():
    pred = forward(init_params(1), _image(2, 32))
    assert np.allclose(pred.probs.sum(axis=0), 1.0, atol=1e-6)
    assert pred.penultimate.shape == (8, 32, 32)


def test_odd_sizes_rejected():
    with pytest.raises(DataError):
        forward(init_params(0), np.zeros((10, 12)))


def test_translation_probe():
    params = init_params(2)
    img = np.zeros((48, 48))
    img[16:32, 16:32] = _image(3)
    shifted = np.roll(img, 4, axis=1)
    a = forward(params, img).logits
    b = forward(params, shifted).logits
    interior = slice(8, 40)
    assert np.allclose(b[:, interior, 12:40], a[:, interior, 8:36], atol=1e-12)


def test_predict_is_forward_and_order_preserving():
    params = init_params(4)
    imgs = [_image(s) for s in range(5)]
    single = [forward(params, im) for im in imgs]
    for a, b in zip(single, forward_many(params, imgs, chunk=2)):
        assert np.array_equal(a.logits, b.logits)
    ds = Dataset(tuple(Sample(f"x{i}", im) for i, im in enumerate(imgs)))
    for a, b in zip(single, predict_dataset(params, ds)):
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(predict_mask(params, ds[0].image).logits, single[0].logits)


def _pred(probs_fg):
    probs_fg = np.asarray(probs_fg, dtype=np.float64)
    probs = np.stack([1 - probs_fg, probs_fg])
    return Prediction(np.log(np.maximum(probs, 1e-300)), probs, (probs_fg > 0.5).astype(np.uint8),
                      np.zeros((1,) + probs_fg.shape))


def test_composite_loss_closed_forms():
    truth = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(np.uint8)
    assert composite_loss(_pred(truth.astype(float)), truth) <= 1e-5
    single = composite_loss(_pred([[0.5]]), np.array([[1]]))
    assert single == pytest.approx(np.log(2) + 1 - 1.0 / (1.25 + 1e-6), abs=1e-12)
    assert single == pytest.approx(0.8931, abs=1e-4)
    assert composite_loss(_pred(np.zeros((8, 8))), np.zeros((8, 8), dtype=np.uint8)) == pytest.approx(0, abs=1e-9)
    with pytest.raises(DataError):
        composite_loss(_pred(np.zeros((8, 8))), np.zeros((4, 4)))


def test_batch_gradient_is_mean_of_sample_gradients():
    params = init_params(6)
    imgs = [_image(s) for s in (1, 2)]
    masks = [(im > 0.3).astype(np.uint8) for im in imgs]
    both = gradient(params, list(zip(imgs, masks)))
    each = [gradient(params, [(im, m)]) for im, m in zip(imgs, masks)]
    assert np.max(np.abs(both - (each[0] + each[1]) / 2)) < 1e-10


def test_gradient_stationary_at_perfect_fit():
    params = SegmenterParams(np.zeros(param_count()))
    params.views()["head_b"][...] = [-20.0, 20.0]
    img = _image(7)
    truth = np.ones((16, 16), dtype=np.uint8)
    loss, grad = loss_and_gradient(params, img[None], truth[None])
    assert loss < 1e-5
    assert np.linalg.norm(grad) < 1e-4


def test_float32_gradient_close_to_float64():
    params, x, y = check_problem(0)
    g64 = loss_and_gradient(params, x, y)[1]
    g32 = loss_and_gradient(params, x, y, dtype=np.float32)[1]
    assert np.linalg.norm(g32 - g64) < 1e-4 * np.linalg.norm(g64) + 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_fine_central_differences(seed):
    params, x, y = check_problem(seed)
    rel = relative_error(analytic(params, x, y), central_differences(params, x, y, 1e-5))
    assert rel.max() < 1e-4


def test_coarse_difference_mismatches_are_kinks_or_truncation():
    # at h=1e-3 the +-h probes can cross a ReLU or max-pool switch; elsewhere
    # the only error left is the O(h^2) truncation term
    params, x, y = check_problem(0)
    h = 1e-3
    a = analytic(params, x, y)
    f = central_differences(params, x, y, h)
    base = activation_pattern(params, x)
    for i in np.nonzero(relative_error(a, f) >= 1e-4)[0]:
        probe = params.copy()
        probe.flat[i] += h
        up = activation_pattern(probe, x)
        probe.flat[i] -= 2 * h
        down = activation_pattern(probe, x)
        crossed = np.any(up != base) or np.any(down != base)
        assert crossed or abs(a[i] - f[i]) < 1e-7


def test_lr_schedule():
    cfg = TrainConfig(iterations=2)
    assert lr_at(0, cfg) == 0.03
    assert lr_at(1, cfg) == pytest.approx(0.03 * 0.5**0.9)
    assert lr_at(1, cfg) == pytest.approx(0.01607, abs=1e-5)
    flat = TrainConfig(iterations=10, decay_power=0.0)
    assert all(lr_at(i, flat) == 0.03 for i in range(10))
    with pytest.raises(ValueError):
        lr_at(2, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")


def _tiny_set(n=6):
    imgs = [_image(s) for s in range(n)]
    return Dataset(tuple(Sample(f"t{i}", im, (im > 0.5).astype(np.uint8)) for i, im in enumerate(imgs)))


def test_single_step_equals_sgd_update():
    ds = _tiny_set()
    params = init_params(0)
    cfg = TrainConfig(iterations=1, batch_size=3, seed=9, augment=False, precision="float64")
    out, trace = train(params, ds, cfg)
    idx = np.random.default_rng(9).choice(len(ds), size=3, replace=False)
    g = gradient(params, [(ds[int(i)].image, ds[int(i)].truth) for i in idx])
    assert np.array_equal(out.flat, params.flat - 0.03 * g)
    assert len(trace) == 1


def test_training_is_deterministic_and_leaves_input_alone():
    ds = _tiny_set()
    params = init_params(1)
    before = params.copy()
    cfg = TrainConfig(iterations=5, batch_size=2, seed=3)
    a, ta = train(params, ds, cfg)
    b, tb = train(params, ds, cfg)
    assert a == b and ta == tb
    assert params == before


def test_training_rejects_unlabeled_and_nonfinite():
    ds = _tiny_set()
    with pytest.raises(DataError):
        train(init_params(0), ds.map(Sample.without_truth), TrainConfig(iterations=1, batch_size=2))
    huge = init_params(0)
    huge.flat[:] = 1e200
    with pytest.raises(NumericError):
        with np.errstate(all="ignore"):
            train(huge, ds, TrainConfig(iterations=1, batch_size=2, augment=False, precision="float64"))


def test_callback_cadence():
    seen = []
    train(init_params(0), _tiny_set(), TrainConfig(iterations=7, batch_size=2, augment=False),
          callback=lambda step, p: seen.append(step), callback_every=3)
    assert seen == [3, 6, 7]


def test_source_training_loss_decreases():
    source, _, _ = default_benchmark(0)
    train_split, _, _ = split_dataset(prepare_dataset(source, 64), SplitSpec(seed=0))
    _, trace = train(init_params(0), train_split, TrainConfig(iterations=2000, batch_size=8, seed=0))
    assert np.mean(trace[-100:]) < np.mean(trace[:100])
