import numpy as np
import pytest

from sqwa.averaging import (
    AveragedModel,
    CaptureBank,
    CaptureEntry,
    average_epoch_range,
    average_models,
    effective_bits,
    requantize_averaged,
)
from sqwa.nn import Network, dense, init_weights, relu
from sqwa.quantizer import QuantizedModel, QuantizerConfig, quantize_tensor


def _ternary_net(levels, step, bias=None):
    levels = np.asarray(levels, dtype=np.float64)
    w = levels * step
    b = np.zeros(levels.shape[0]) if bias is None else np.asarray(bias, float)
    return Network(input_shape=(levels.shape[1],),
                   specs=[dense(levels.shape[1], levels.shape[0])],
                   weights=[w], biases=[b])


def _entry(epoch, levels, step, bias=None, metrics=None):
    net = _ternary_net(levels, step, bias)
    shadow = net.copy()
    return CaptureEntry(epoch, QuantizedModel(net, 2, [step]), shadow,
                        metrics or {})


def test_effective_bits_table():
    assert [effective_bits(n) for n in (1, 3, 7, 15, 31)] == [2, 3, 4, 5, 6]


def test_effective_bits_rejects_nonpositive():
    with pytest.raises(ValueError):
        effective_bits(0)


def test_hand_example_six_sevenths():
    # 7 captures of one weight with levels [1,1,1,0,1,1,1]: mean is 6*step/7
    step = 0.5
    bank = CaptureBank(2, [step])
    for k, lv in enumerate([1, 1, 1, 0, 1, 1, 1]):
        bank.add(_entry(k, [[lv]], step))
    avg = average_models(bank, 7)
    assert avg.net.weights[0][0, 0] == pytest.approx(6 * step / 7, abs=1e-15)
    assert avg.count == 7
    assert avg.effective_bits == 4
    assert avg.base_steps == [step]


def test_average_is_exactly_grid_resident():
    rng = np.random.default_rng(60)
    step = 0.3
    bank = CaptureBank(2, [step])
    for k in range(7):
        levels = rng.integers(-1, 2, size=(6, 5))
        bank.add(_entry(k, levels, step))
    avg = average_models(bank, 7)
    scaled = avg.net.weights[0] * (7 / step)
    np.testing.assert_array_equal(scaled, np.rint(scaled))
    assert len(np.unique(avg.net.weights[0])) <= 15


def test_average_matches_float_mean():
    rng = np.random.default_rng(61)
    step = 0.25
    bank = CaptureBank(2, [step])
    nets = []
    for k in range(5):
        levels = rng.integers(-1, 2, size=(4, 3))
        e = _entry(k, levels, step, bias=rng.normal(size=4))
        nets.append(e.model.net)
        bank.add(e)
    avg = average_models(bank, 5)
    np.testing.assert_allclose(avg.net.weights[0],
                               np.mean([n.weights[0] for n in nets], axis=0),
                               atol=1e-15)
    np.testing.assert_allclose(avg.net.biases[0],
                               np.mean([n.biases[0] for n in nets], axis=0),
                               atol=1e-15)


def test_average_last_n_subset():
    step = 0.5
    bank = CaptureBank(2, [step])
    for k, lv in enumerate([-1, 0, 1, 1]):
        bank.add(_entry(k, [[lv]], step))
    avg = average_models(bank, 2)
    assert avg.net.weights[0][0, 0] == pytest.approx(step)
    assert avg.count == 2
    assert avg.effective_bits == 3


def test_average_epoch_range_selects_by_epoch():
    step = 0.5
    bank = CaptureBank(2, [step])
    for k, lv in zip([3, 7, 11, 15], [1, 1, 0, -1]):
        bank.add(_entry(k, [[lv]], step))
    avg = average_epoch_range(bank, 3, 7)
    assert avg.net.weights[0][0, 0] == pytest.approx(step)
    assert avg.count == 2
    with pytest.raises(ValueError):
        average_epoch_range(bank, 100, 200)


def test_average_models_bounds():
    bank = CaptureBank(2, [0.5])
    bank.add(_entry(0, [[1]], 0.5))
    with pytest.raises(ValueError):
        average_models(bank, 2)
    with pytest.raises(ValueError):
        average_models(bank, 0)


def test_bank_rejects_mismatched_config():
    bank = CaptureBank(2, [0.5])
    with pytest.raises(ValueError):
        bank.add(_entry(0, [[1]], 0.25))
    e = _entry(0, [[1]], 0.5)
    e.model.bits = 3
    with pytest.raises(ValueError):
        bank.add(e)


def test_bank_rejects_out_of_order_epochs():
    bank = CaptureBank(2, [0.5])
    bank.add(_entry(5, [[1]], 0.5))
    with pytest.raises(ValueError):
        bank.add(_entry(5, [[0]], 0.5))
    with pytest.raises(ValueError):
        bank.add(_entry(4, [[0]], 0.5))


def test_bank_rejects_shape_mismatch():
    bank = CaptureBank(2, [0.5])
    bank.add(_entry(0, [[1, 0]], 0.5))
    with pytest.raises(ValueError):
        bank.add(_entry(1, [[1, 0, 1]], 0.5))


def test_average_rejects_off_grid_capture():
    bank = CaptureBank(2, [0.5])
    e = _entry(0, [[1]], 0.5)
    e.model.net.weights[0][0, 0] = 0.3
    bank.entries.append(e)  # bypass add() to exercise the averaging check
    with pytest.raises(ValueError, match="grid"):
        average_models(bank, 1)


def test_requantize_averaged_round_trip():
    rng = np.random.default_rng(62)
    net = init_weights([dense(5, 8), relu(), dense(8, 3)], (5,), seed=62)
    avg = AveragedModel(net, count=7, base_steps=[0.1, 0.1], effective_bits=4)
    model, steps = requantize_averaged(avg, 2)
    assert model.bits == 2
    assert model.steps == steps
    for j, i in enumerate(model.net.param_layers()):
        cfg = QuantizerConfig(2, steps[j])
        np.testing.assert_array_equal(
            model.net.weights[i], quantize_tensor(net.weights[i], cfg))
        np.testing.assert_array_equal(model.net.biases[i], net.biases[i])
