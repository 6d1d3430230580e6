import json

import numpy as np
import pytest

from sqwa import checkpoint as ckpt
from sqwa.averaging import AveragedModel, CaptureBank, CaptureEntry
from sqwa.checkpoint import CheckpointError
from sqwa.nn import dense, evaluate, init_weights, relu
from sqwa.data import synthetic_blobs
from sqwa.qat import ShadowModel
from sqwa.quantizer import QuantizedModel, direct_quantize_model


def _f32(arr):
    return arr.astype(np.float32).astype(np.float64)


def _net(seed=110):
    return init_weights([dense(4, 6), relu(), dense(6, 3)], (4,), seed=seed)


def _quantized(seed=111):
    model, _ = direct_quantize_model(_net(seed), 2)
    rng = np.random.default_rng(seed + 1)
    for i in model.net.param_layers():
        # keep biases exactly single-precision so reloads are bitwise
        model.net.biases[i] = _f32(rng.normal(size=model.net.biases[i].shape))
    return model


def test_network_round_trip_truncates_to_f32(tmp_path):
    net = _net()
    ckpt.save(net, tmp_path / "n")
    back = ckpt.load(tmp_path / "n")
    for i in net.param_layers():
        np.testing.assert_array_equal(back.weights[i], _f32(net.weights[i]))
        np.testing.assert_array_equal(back.biases[i], _f32(net.biases[i]))
    assert [s.kind for s in back.specs] == [s.kind for s in net.specs]
    assert back.input_shape == net.input_shape


def test_save_load_save_is_byte_stable(tmp_path):
    net = _net()
    ckpt.save(net, tmp_path / "a")
    back = ckpt.load(tmp_path / "a")
    ckpt.save(back, tmp_path / "b")
    assert (tmp_path / "a" / "payload.bin").read_bytes() == \
           (tmp_path / "b" / "payload.bin").read_bytes()
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    a.pop("provenance"), b.pop("provenance")
    assert a == b


def test_quantized_round_trip_bitwise(tmp_path):
    model = _quantized()
    ckpt.save(model, tmp_path / "q")
    back = ckpt.load(tmp_path / "q")
    assert isinstance(back, QuantizedModel)
    assert back.bits == model.bits and back.steps == model.steps
    for i in model.net.param_layers():
        np.testing.assert_array_equal(back.net.weights[i], model.net.weights[i])
        np.testing.assert_array_equal(back.net.biases[i], model.net.biases[i])


def test_quantized_round_trip_evaluates_identically(tmp_path):
    model = _quantized()
    data = synthetic_blobs(3, 20, 4, 0.5, seed=112)
    before = evaluate(model.net, data)
    ckpt.save(model, tmp_path / "q")
    after = evaluate(ckpt.load(tmp_path / "q").net, data)
    assert before == after


def test_shadow_round_trip(tmp_path):
    model = ShadowModel.from_network(_net(113), 2)
    ckpt.save(model, tmp_path / "s")
    back = ckpt.load(tmp_path / "s")
    assert isinstance(back, ShadowModel)
    assert back.bits == model.bits and back.steps == model.steps
    for i in model.shadow.param_layers():
        np.testing.assert_array_equal(back.shadow.weights[i],
                                      _f32(model.shadow.weights[i]))
        np.testing.assert_array_equal(back.applied.weights[i],
                                      model.applied.weights[i])


def test_averaged_round_trip(tmp_path):
    net = _net(114)
    step = 0.25
    for i in net.param_layers():
        lv = np.rint(net.weights[i] / (step / 7))
        net.weights[i] = lv * (step / 7)
        net.biases[i] = _f32(net.biases[i])
    avg = AveragedModel(net, count=7, base_steps=[step, step], effective_bits=4)
    ckpt.save(avg, tmp_path / "a")
    back = ckpt.load(tmp_path / "a")
    assert isinstance(back, AveragedModel)
    assert back.count == 7 and back.effective_bits == 4
    assert back.base_steps == [step, step]
    for i in net.param_layers():
        np.testing.assert_array_equal(back.net.weights[i], net.weights[i])


def test_capture_bank_round_trip(tmp_path):
    model = ShadowModel.from_network(_net(115), 2)
    bank = CaptureBank(model.bits, list(model.steps))
    for epoch in (5, 11):
        bank.add(CaptureEntry(epoch, model.as_quantized(), model.shadow.copy(),
                              {"train_loss": 1.0 + epoch, "train_accuracy": 0.5}))
    ckpt.save(bank, tmp_path / "bank")
    back = ckpt.load(tmp_path / "bank")
    assert isinstance(back, CaptureBank)
    assert back.bits == bank.bits and back.steps == bank.steps
    assert [e.epoch for e in back.entries] == [5, 11]
    assert back.entries[0].metrics == {"train_loss": 6.0, "train_accuracy": 0.5}
    for e_in, e_out in zip(bank.entries, back.entries):
        for i in e_in.model.net.param_layers():
            np.testing.assert_array_equal(e_out.model.net.weights[i],
                                          e_in.model.net.weights[i])


def test_tampered_payload_rejected(tmp_path):
    ckpt.save(_net(), tmp_path / "t")
    p = tmp_path / "t" / "payload.bin"
    raw = bytearray(p.read_bytes())
    raw[7] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum mismatch"):
        ckpt.load(tmp_path / "t")


def test_truncated_payload_rejected(tmp_path):
    ckpt.save(_net(), tmp_path / "t")
    p = tmp_path / "t" / "payload.bin"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        ckpt.load(tmp_path / "t")


def test_unsupported_schema_version_rejected(tmp_path):
    ckpt.save(_net(), tmp_path / "t")
    mp = tmp_path / "t" / "manifest.json"
    manifest = json.loads(mp.read_text())
    manifest["schema_version"] = 99
    mp.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="unsupported schema version"):
        ckpt.load(tmp_path / "t")


def test_topology_payload_mismatch_rejected(tmp_path):
    ckpt.save(_net(), tmp_path / "t")
    mp = tmp_path / "t" / "manifest.json"
    manifest = json.loads(mp.read_text())
    manifest["layers"][0]["fan_out"] = 7
    manifest["layers"][2]["fan_in"] = 7
    mp.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        ckpt.load(tmp_path / "t")


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="manifest"):
        ckpt.load(tmp_path / "nothing")


def test_incomplete_bank_rejected(tmp_path):
    model = ShadowModel.from_network(_net(116), 2)
    bank = CaptureBank(model.bits, list(model.steps))
    bank.add(CaptureEntry(3, model.as_quantized(), model.shadow.copy(), {}))
    bank.add(CaptureEntry(7, model.as_quantized(), model.shadow.copy(), {}))
    ckpt.save(bank, tmp_path / "bank")
    import shutil
    shutil.rmtree(tmp_path / "bank" / "entry_001")
    with pytest.raises(CheckpointError, match="incomplete"):
        ckpt.load(tmp_path / "bank")


def test_unknown_object_type_rejected(tmp_path):
    with pytest.raises(TypeError):
        ckpt.save({"weights": [1, 2, 3]}, tmp_path / "x")


def test_provenance_recorded(tmp_path):
    ckpt.save(_net(), tmp_path / "p", provenance={"stage": "pretrain", "seed": 3})
    manifest = ckpt.load_manifest(tmp_path / "p")
    assert manifest["provenance"] == {"stage": "pretrain", "seed": 3}


def test_oversized_levels_rejected(tmp_path):
    model = _quantized()
    model.net.weights[0][0, 0] = model.steps[0] * 200.0
    with pytest.raises(CheckpointError, match="8-bit"):
        ckpt.save(model, tmp_path / "x")


def test_off_grid_values_rejected(tmp_path):
    model = _quantized()
    model.net.weights[0][0, 0] = model.steps[0] * 0.5
    with pytest.raises(CheckpointError, match="grid"):
        ckpt.save(model, tmp_path / "x")
