import struct
from collections import OrderedDict

import numpy as np
import pytest

from revlm.checkpoint import (
    Checkpoint, TrainingState, capture, decode, encode, load, restore, save,
)
from revlm.data import ByteTokenizer, CharTokenizer
from revlm.engine import loss_and_gradients
from revlm.exceptions import CheckpointError
from revlm.model import init_model
from revlm.optim import AdamWState
from revlm.runconfig import RunConfig


def simple_checkpoint():
    tensors = OrderedDict([
        ('a', np.arange(6, dtype=np.float64).reshape(2, 3) / 7),
        ('b', np.array([1.5, -np.inf], dtype=np.float32)),
        ('scalar', np.array(3.0)),
    ])
    return Checkpoint(tensors, "width=8\n", 42)


def test_encode_layout():
    data = encode(simple_checkpoint())
    assert data[:4] == b"RVLM"
    assert struct.unpack('<II', data[4:12]) == (1, 3)
    assert data.endswith(b"step=42\nwidth=8\n")


def test_round_trip_is_bit_exact():
    original = simple_checkpoint()
    decoded = decode(encode(original))
    assert decoded.step == 42
    assert decoded.config_text == "width=8\n"
    assert list(decoded.tensors) == ['a', 'b', 'scalar']
    for name, tensor in original.tensors.items():
        assert decoded.tensors[name].dtype == tensor.dtype
        assert decoded.tensors[name].shape == tensor.shape
        assert decoded.tensors[name].tobytes() == tensor.tobytes()
    assert encode(decoded) == encode(original)


def test_decode_errors():
    data = encode(simple_checkpoint())
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        decode(data[:-1])
    with pytest.raises(CheckpointError):
        decode(data[:30])
    with pytest.raises(CheckpointError):
        decode(data + b"\x00")
    with pytest.raises(CheckpointError):
        decode(data[:4] + struct.pack('<I', 2) + data[8:])


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        encode(Checkpoint(OrderedDict([('ids', np.arange(3))])))


def test_save_and_load(tmpdir):
    path = str(tmpdir.join("checkpoint.rvlm"))
    save(path, simple_checkpoint())
    assert load(path).step == 42
    with pytest.raises(CheckpointError):
        load(str(tmpdir.join("missing.rvlm")))


def training_state(block_kind, tokenizer, with_optimizer=False):
    run_config = RunConfig(block_kind=block_kind, width=8, heads=2, layers=3, context_length=8,
                           dtype='float64', tokenizer=tokenizer.name, seed=5)
    model = init_model(run_config.model_config(tokenizer.vocab_size), seed=5)
    optimizer = None
    if with_optimizer:
        optimizer = AdamWState(run_config.optim_config())
        tokens = np.array([[1, 2, 0, 1, 2, 0, 1, 2]])
        _, grads, _ = loss_and_gradients(tokens, tokens, model)
        named, _ = optimizer.update(model.named_tensors(), grads.named_tensors())
        model = model.replace_tensors(named)
    return TrainingState(run_config, model, tokenizer, optimizer, 7)


def test_capture_restore_char_tokenizer():
    state = training_state('midpoint_a', CharTokenizer.from_text("hello world"), True)
    restored = restore(decode(encode(capture(state))))
    assert restored.step == 7
    assert restored.run_config == state.run_config
    assert restored.tokenizer == state.tokenizer
    assert restored.model.config.a_schedule == state.model.config.a_schedule
    for name, tensor in state.model.named_tensors().items():
        assert np.array_equal(restored.model.named_tensors()[name], tensor)
    assert restored.optimizer.step == 7
    for name, m in state.optimizer.m.items():
        assert np.array_equal(restored.optimizer.m[name], m)


def test_capture_restore_byte_tokenizer():
    state = training_state('hamiltonian', ByteTokenizer())
    checkpoint = capture(state)
    assert 'tokenizer.chars' not in checkpoint.tensors
    assert 'model.a_schedule' not in checkpoint.tensors
    restored = restore(checkpoint)
    assert isinstance(restored.tokenizer, ByteTokenizer)
    assert restored.model.config.vocab_size == 256
    assert restored.optimizer is None


def test_restore_without_model():
    checkpoint = Checkpoint(OrderedDict(), RunConfig().to_text(), 0)
    with pytest.raises(CheckpointError):
        restore(checkpoint)


def test_decode_bad_step():
    data = encode(Checkpoint(OrderedDict(), "", 1))
    bad = data[:-len(b"step=1\n")] + b"step=x\n"
    with pytest.raises(CheckpointError):
        decode(bad)
