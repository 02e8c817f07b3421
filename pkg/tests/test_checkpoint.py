import struct
import zlib

import numpy as np
import pytest

from cafusion import checkpoint
from cafusion.checkpoint import CheckpointError, CheckpointState


def _state():
    rng = np.random.default_rng(0)
    p = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": np.zeros(4, np.float32)}
    return CheckpointState(
        params=p, adam_m={k: v + 1 for k, v in p.items()}, adam_v={k: v * 0 for k, v in p.items()},
        step=7, epoch=2, rng_state=np.random.default_rng([1, 1]).bit_generator.state,
        best_params={k: v.copy() for k, v in p.items()}, best_val_accuracy=0.5, best_epoch=1,
        config={"epochs": 3}, log=[{"epoch": 1}, {"epoch": 2}],
        norm={"local_mean": np.ones(3, np.float32)},
    )


def test_round_trip_exact():
    s = _state()
    data = checkpoint.dumps(s)
    back = checkpoint.loads(data)
    assert checkpoint.dumps(back) == data
    for k in s.params:
        assert back.params[k].tobytes() == s.params[k].tobytes()
    assert back.rng_state == s.rng_state
    assert back.norm["local_mean"].tolist() == [1.0, 1.0, 1.0]
    assert (back.step, back.epoch, back.best_epoch, back.log) == (7, 2, 1, s.log)


def test_save_is_atomic(tmp_path):
    path = checkpoint.save(_state(), tmp_path / "sub" / "c.cafc")
    assert path.is_file() and not (tmp_path / "sub" / "c.cafc.tmp").exists()
    assert checkpoint.load(path).step == 7


def test_rejects_damage():
    data = checkpoint.dumps(_state())
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError, match="CRC"):
        checkpoint.loads(data[:-1] + bytes([data[-1] ^ 1]))
    with pytest.raises(CheckpointError):
        checkpoint.loads(data[:10])
    bumped = data[:4] + struct.pack("<I", 9) + data[8:-4]
    with pytest.raises(CheckpointError, match="version 9"):
        checkpoint.loads(bumped + struct.pack("<I", zlib.crc32(bumped)))


def test_unknown_tensor_group_is_a_checkpoint_error():
    s = _state()
    s.norm = {}
    data = checkpoint.dumps(s).replace(b"param/a", b"other/a")
    data = data[:-4] + struct.pack("<I", zlib.crc32(data[:-4]))
    with pytest.raises(CheckpointError, match="unexpected tensor name"):
        checkpoint.loads(data)


def test_unsupported_dtype():
    s = _state()
    s.params["c"] = np.zeros(2, np.int8)
    with pytest.raises(CheckpointError):
        checkpoint.dumps(s)
