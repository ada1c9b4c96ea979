"""Binary checkpoint codec.

Layout, all integers little-endian::

    b"RVLM" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype code | u8 rank |
                u64 dims[rank] | raw payload
    u32 config length | UTF-8 key=value config block

The config block holds the run configuration and the step counter.
"""
import logging
import struct
from collections import OrderedDict

import attr
import numpy as np

from .data import ByteTokenizer, CharTokenizer
from .exceptions import CheckpointError
from .model import Model, sample_a_schedule
from .optim import AdamWState
from .runconfig import RunConfig
from .util import atomic_replace

log = logging.getLogger("checkpoint")

MAGIC = b"RVLM"
VERSION = 1
DTYPE_CODES = {
    np.dtype('<f4'): 0,
    np.dtype('<f8'): 1,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


@attr.s(eq=False)
class Checkpoint:
    tensors = attr.ib(factory=OrderedDict)
    config_text = attr.ib(default="")
    step = attr.ib(default=0)

    def config_block(self):
        return f"step={self.step}\n" + self.config_text


def encode(checkpoint):
    parts = [MAGIC, struct.pack('<II', VERSION, len(checkpoint.tensors))]
    for name, tensor in checkpoint.tensors.items():
        tensor = np.asarray(tensor)
        dtype = tensor.dtype.newbyteorder('<')
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {tensor.dtype}")
        raw_name = name.encode('utf-8')
        parts.append(struct.pack('<I', len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack('<BB', DTYPE_CODES[dtype], tensor.ndim))
        parts.append(struct.pack(f'<{tensor.ndim}Q', *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype=dtype).tobytes())
    block = checkpoint.config_block().encode('utf-8')
    parts.append(struct.pack('<I', len(block)))
    parts.append(block)
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data):
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = reader.unpack('<II')
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        (length,) = reader.unpack('<I')
        try:
            name = reader.take(length).decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8") from None
        code, rank = reader.unpack('<BB')
        if code not in CODE_DTYPES:
            raise CheckpointError(f"tensor {name} has unknown dtype code {code}")
        dtype = CODE_DTYPES[code]
        shape = reader.unpack(f'<{rank}Q')
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).astype(
            dtype.newbyteorder('='))
    (length,) = reader.unpack('<I')
    try:
        block = reader.take(length).decode('utf-8')
    except UnicodeDecodeError:
        raise CheckpointError("config block is not valid UTF-8") from None
    if reader.offset != len(data):
        raise CheckpointError("trailing data after config block")
    first, _, rest = block.partition("\n")
    key, sep, value = first.partition('=')
    if key != 'step' or not sep:
        raise CheckpointError("config block does not start with the step counter")
    try:
        step = int(value)
    except ValueError:
        raise CheckpointError(f"invalid step counter '{value}'") from None
    return Checkpoint(tensors, rest, step)


def save(filename, checkpoint):
    atomic_replace(filename, encode(checkpoint))
    log.info("saved checkpoint %s (step %d, %d tensors)", filename, checkpoint.step,
             len(checkpoint.tensors))


def load(filename):
    try:
        with open(filename, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {filename}: {e.strerror}") from e
    return decode(data)


@attr.s(eq=False)
class TrainingState:
    """Everything needed to continue or evaluate a run."""
    run_config = attr.ib()
    model = attr.ib()
    tokenizer = attr.ib()
    optimizer = attr.ib(default=None)
    step = attr.ib(default=0)


def capture(state):
    """Builds a checkpoint from a training state."""
    tensors = OrderedDict(state.model.named_tensors())
    if state.model.config.a_schedule is not None:
        tensors['model.a_schedule'] = np.array(state.model.config.a_schedule, dtype=np.float64)
    if isinstance(state.tokenizer, CharTokenizer):
        tensors['tokenizer.chars'] = np.array([ord(c) for c in state.tokenizer.chars],
                                              dtype=np.float64)
    if state.optimizer is not None:
        tensors.update(state.optimizer.named_tensors())
    return Checkpoint(tensors, state.run_config.to_text(), state.step)


def restore(checkpoint):
    """Rebuilds model, tokenizer and optimizer state from a checkpoint."""
    run_config = RunConfig.from_text(checkpoint.config_text)
    tensors = checkpoint.tensors
    if 'tokenizer.chars' in tensors:
        tokenizer = CharTokenizer([chr(int(c)) for c in tensors['tokenizer.chars']])
    else:
        tokenizer = ByteTokenizer()
    if 'embedding.token' not in tensors:
        raise CheckpointError("checkpoint holds no model")
    config = run_config.model_config(tensors['embedding.token'].shape[0])
    if 'model.a_schedule' in tensors:
        config = attr.evolve(config, a_schedule=tuple(float(a) for a in tensors['model.a_schedule']))
    elif config.a_schedule_length is not None:
        config = attr.evolve(config, a_schedule=sample_a_schedule(config))
    model = Model.from_named(config, tensors)
    optimizer = None
    if any(name.startswith('optim.') for name in tensors):
        optimizer = AdamWState.from_named(run_config.optim_config(), tensors, checkpoint.step)
    return TrainingState(run_config, model, tokenizer, optimizer, checkpoint.step)
