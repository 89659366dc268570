import numpy as np
import pandas as pd
import pytest

import fogseg.utils.checkpoint as checkpoint
from fogseg.errors import CheckpointError
from fogseg.nn.layers import BatchNorm2d, Conv2d
from fogseg.nn.params import ParamRegistry, init_params
from fogseg.training.optim import AdamState


def _registry(seed=0):
    reg = ParamRegistry()
    Conv2d(reg, 'enc.conv', 2, 3, 3)
    BatchNorm2d(reg, 'enc.bn', 3)
    init_params(reg, seed=seed)
    reg.buffer('enc.bn.running_mean')[...] = [0.1, 0.2, 0.3]
    return reg


def test_save_and_load_checkpoint(tmp_path):
    reg = _registry(seed=1)
    path = checkpoint.save_checkpoint(tmp_path / 'a.ckpt', reg, {'kind': 'segmentation', 'seed': 1}, epoch=3, seed=1)
    assert path.exists(), "Checkpoint file was not created"
    assert not (tmp_path / 'a.ckpt.tmp').exists(), "Temporary file should be replaced"

    fresh = _registry(seed=2)
    data = checkpoint.load_checkpoint(path, fresh)
    assert data.kind == 'segmentation'
    assert (data.epoch, data.seed) == (3, 1)
    for name, value in reg.state().items():
        assert np.array_equal(fresh.state()[name], value), f"{name} differs after load"


def test_save_load_save_is_byte_identical(tmp_path):
    reg = _registry()
    first = checkpoint.save_checkpoint(tmp_path / 'a.ckpt', reg, {'kind': 'segmentation'}, epoch=1)
    fresh = _registry(seed=5)
    checkpoint.load_checkpoint(first, fresh)
    second = checkpoint.save_checkpoint(tmp_path / 'b.ckpt', fresh, {'kind': 'segmentation'}, epoch=1)
    assert first.read_bytes() == second.read_bytes()


def test_optimizer_state_round_trip(tmp_path):
    reg = _registry()
    opt = AdamState(reg.items())
    for _, t in reg.items():
        t.grad = np.ones_like(t.data)
    opt.step()
    path = checkpoint.save_checkpoint(tmp_path / 'a.ckpt', reg, {'kind': 'segmentation'}, optimizers={'seg': opt})
    restored = AdamState(_registry().items())
    checkpoint.load_checkpoint(path, optimizers={'seg': restored})
    assert restored.step_count == 1
    assert np.array_equal(restored.m['enc.conv.weight'], opt.m['enc.conv.weight'])
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(path, optimizers={'gen': restored})


def test_load_rejects_mismatched_registry(tmp_path):
    path = checkpoint.save_checkpoint(tmp_path / 'a.ckpt', _registry(), {'kind': 'segmentation'})
    other = ParamRegistry()
    Conv2d(other, 'enc.conv', 2, 4, 3)
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(path, other)


def test_load_checkpoint_no_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(tmp_path / 'missing.ckpt', _registry())


def test_corrupt_checkpoints(tmp_path):
    path = checkpoint.save_checkpoint(tmp_path / 'a.ckpt', _registry(), {'kind': 'segmentation'})
    raw = path.read_bytes()
    (tmp_path / 'magic.ckpt').write_bytes(b'NOTFOGSG' + raw[8:])
    (tmp_path / 'short.ckpt').write_bytes(raw[:-7])
    (tmp_path / 'long.ckpt').write_bytes(raw + b'\x00')
    for name in ('magic', 'short', 'long'):
        with pytest.raises(CheckpointError):
            checkpoint.read_checkpoint(tmp_path / f'{name}.ckpt')


def test_values_are_stored_as_float32(tmp_path):
    reg = _registry().to_dtype(np.float64)
    path = checkpoint.save_checkpoint(tmp_path / 'a.ckpt', reg, {'kind': 'segmentation'})
    state = checkpoint.read_checkpoint(path).state
    assert all(v.dtype == np.float32 for v in state.values())
    assert np.array_equal(state['enc.conv.weight'], reg['enc.conv.weight'].numpy().astype(np.float32))

    raw = bytearray(checkpoint.encode_checkpoint({'w': np.ones(2)}, {'kind': 'x'}, 0, 0))
    tag_at = len(checkpoint.MAGIC) + 4 + len(b'{"kind":"x"}') + 12 + 4 + 2 + 1
    assert raw[tag_at] == checkpoint.DTYPE_F32
    raw[tag_at] = 1
    (tmp_path / 'f64.ckpt').write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="dtype tag 1"):
        checkpoint.read_checkpoint(tmp_path / 'f64.ckpt')


def test_failed_save_leaves_no_temp_file(tmp_path):
    class Broken:
        def state(self):
            raise RuntimeError("boom")
    with pytest.raises(CheckpointError):
        checkpoint.save_checkpoint(tmp_path / 'a.ckpt', Broken(), {'kind': 'segmentation'})
    assert list(tmp_path.iterdir()) == []


def test_latest_pointer(tmp_path):
    assert checkpoint.read_latest(tmp_path) is None
    target = checkpoint.save_checkpoint(checkpoint.epoch_path(tmp_path, 2), _registry(), {'kind': 'segmentation'})
    assert target.name == 'epoch_002.ckpt'
    checkpoint.write_latest(tmp_path, target)
    assert checkpoint.read_latest(tmp_path) == target
    target.unlink()
    with pytest.raises(CheckpointError):
        checkpoint.read_latest(tmp_path)


def test_flush_chunk_empty_buffer(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)

    buffer = []
    # Should not raise and not create any file
    checkpoint.flush_chunk(tmp_path / 'loss_log.csv', buffer)
    assert not (tmp_path / 'loss_log.csv').exists(), "File should not be created for empty buffer"


def test_flush_chunk_writes_and_appends(tmp_path):
    csv_file = tmp_path / 'loss_log.csv'
    buffer = [
        {'epoch': 1, 'loss': 0.5},
        {'epoch': 2, 'loss': 0.25},
    ]
    checkpoint.flush_chunk(csv_file, buffer)
    assert csv_file.exists(), "CSV file should be created after flush"

    df = pd.read_csv(csv_file)
    assert list(df.columns) == ['epoch', 'loss'], "CSV header mismatch"
    assert df.iloc[1].to_dict() == {'epoch': 2, 'loss': 0.25}
    assert buffer == [], "Buffer was not cleared after flush"

    buffer.append({'epoch': 3, 'loss': 0.125})
    checkpoint.flush_chunk(csv_file, buffer)
    df2 = pd.read_csv(csv_file)
    assert len(df2) == 3, "CSV should have three rows after appending"
    assert df2.iloc[2].to_dict() == {'epoch': 3, 'loss': 0.125}
