import json
from pathlib import Path

import pytest

from fogseg import __version__
from fogseg.cli import EXIT_RUNTIME, EXIT_USAGE, main

TINY_CONFIG = """\
[model]
stage_channels = 8, 16, 24
rgb_plain_blocks = 1
dilations = 2,
decoder_blocks = 1
dense_growth = 4
dense_layers = 1

[data]
height = 16
width = 32
workers = 1

[train]
epochs = 1
batch_size = 4

[transfer]
gen_filters = 4
disc_filters = 4
gen_res_blocks = 1
disc_layers = 2
transfer_steps = 2
transfer_batch_size = 2
transfer_height = 16
transfer_width = 16

[finetune]
finetune_epochs = 1
"""


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    # default log directory is relative to the working directory
    monkeypatch.chdir(tmp_path)


def _run(capsys, *argv):
    code = main(['--log-file', 'cli.log', *argv])
    out = capsys.readouterr().out
    return code, out


def test_version(capsys):
    code, out = _run(capsys, '--version')
    assert code == 0
    assert __version__ in out


def test_usage_error_exits_1(capsys):
    code, _ = _run(capsys, 'train-seg', '--epochs', 'many')
    assert code == EXIT_USAGE
    assert _run(capsys, 'no-such-command')[0] == EXIT_USAGE


def test_missing_config_exits_2(capsys, tmp_path):
    code, _ = _run(capsys, 'train-seg', '--config', str(tmp_path / 'absent.cfg'))
    assert code == EXIT_RUNTIME
    entries = [json.loads(line) for line in (tmp_path / 'cli.log').read_text(encoding='utf-8').splitlines()]
    assert any(e['level'] == 'ERROR' and e.get('operation') == 'cli' for e in entries)


def test_missing_checkpoint_exits_2(capsys, tmp_path):
    (tmp_path / 'm.txt').write_text("", encoding='utf-8')
    code, _ = _run(capsys, 'eval', '--ckpt', 'nope.ckpt', '--manifest', 'm.txt')
    assert code == EXIT_RUNTIME


def test_param_report(capsys):
    code, out = _run(capsys, 'gradcheck', '--params')
    assert code == 0
    values = dict(line.split('=', 1) for line in out.splitlines())
    assert int(values['param_count']) == sum(int(values[k]) for k in ('rgb_encoder', 'ld_encoder', 'decoder'))
    assert values['reference'] == '2400000'


def test_gradcheck_ops(capsys):
    code, out = _run(capsys, 'gradcheck', '--ops-only')
    assert code == 0
    assert 'FAIL' not in out
    assert 'conv2d' in out


def test_gradcheck_failure_exits_2(capsys):
    code, out = _run(capsys, 'gradcheck', '--ops-only', '--tol', '0')
    assert code == EXIT_RUNTIME
    assert 'FAIL' in out


def test_synth_data(capsys, tmp_path):
    code, out = _run(capsys, 'synth-data', '--out', 'corpus', '-n', '4', '--height', '16', '--width', '32')
    assert code == 0
    keys = {line.split('\t')[0] for line in out.splitlines()}
    assert keys == {'clean_train', 'clean_val', 'hazy_train', 'hazy_val'}
    assert (tmp_path / 'corpus' / 'hazy' / '0003.png').exists()


def test_logs_command(capsys, tmp_path):
    _run(capsys, 'synth-data', '--out', 'corpus', '-n', '2', '--height', '16', '--width', '32')
    code, out = _run(capsys, 'logs', 'cli.log', '-o', 'synth_data', '--no-color')
    assert code == 0
    assert 'Synthesized haze corpus' in out
    code, out = _run(capsys, 'logs', 'cli.log', '-l', 'ERROR', '--no-color')
    assert code == 0
    assert 'Synthesized haze corpus' not in out


@pytest.mark.slow
def test_full_protocol(capsys, tmp_path):
    (tmp_path / 'run.cfg').write_text(TINY_CONFIG, encoding='utf-8')
    assert _run(capsys, 'synth-data', '--out', 'corpus', '-n', '6', '--height', '16', '--width', '32')[0] == 0
    common = ['--config', 'run.cfg', '--out', 'runs', '--seed', '1']

    code, out = _run(capsys, 'train-da', *common, '--foggy', 'corpus/hazy_train.txt',
                     '--clear', 'corpus/clean_train.txt')
    assert code == 0
    da_ckpt = out.strip().splitlines()[-1]

    code, out = _run(capsys, 'train-seg', *common, '--manifest', 'corpus/clean_train.txt')
    assert code == 0
    seg_ckpt = out.strip().splitlines()[-1]

    (tmp_path / 'run.cfg').write_text(TINY_CONFIG + "\n[manifests]\nft_foggy = corpus/hazy_train.txt\n"
                                      "ft_clear = corpus/clean_train.txt\n", encoding='utf-8')
    code, out = _run(capsys, 'finetune', *common, '--seg-ckpt', seg_ckpt, '--da-ckpt', da_ckpt)
    assert code == 0
    joint_ckpt = out.strip().splitlines()[-1]

    code, out = _run(capsys, 'eval', '--ckpt', joint_ckpt, '--manifest', 'corpus/hazy_val.txt',
                     '--save-predictions', 'pred')
    assert code == 0
    values = dict(line.split('=', 1) for line in out.splitlines())
    assert 0.0 <= float(values['miou']) <= 1.0
    assert (tmp_path / 'runs' / 'joint' / 'eval' / 'report.txt').exists()

    code, _ = _run(capsys, 'translate', '--ckpt', da_ckpt, 'corpus/hazy/0000.png', 'fixed.png')
    assert code == 0
    assert (tmp_path / 'fixed.png').exists()


def test_eval_takes_config_and_seed(capsys, tmp_path):
    (tmp_path / 'run.cfg').write_text(TINY_CONFIG, encoding='utf-8')
    _run(capsys, 'synth-data', '--out', 'corpus', '-n', '4', '--height', '16', '--width', '32')
    code, out = _run(capsys, 'train-seg', '--config', 'run.cfg', '--out', 'runs', '--manifest',
                     'corpus/clean_train.txt')
    assert code == 0
    seg_ckpt = out.strip().splitlines()[-1]

    code, out = _run(capsys, 'eval', '--ckpt', seg_ckpt, '--manifest', 'corpus/clean_val.txt',
                     '--config', 'run.cfg', '--seed', '7', '--out', 'eval_a')
    assert code == 0
    assert 0.0 <= float(dict(line.split('=', 1) for line in out.splitlines())['miou']) <= 1.0

    code, _ = _run(capsys, 'eval', '--ckpt', seg_ckpt, '--manifest', 'corpus/clean_val.txt', '--seed', '7',
                   '--out', 'eval_b')
    assert code == 0
    assert (tmp_path / 'eval_a' / 'report.kv').read_bytes() == (tmp_path / 'eval_b' / 'report.kv').read_bytes()

    wide = TINY_CONFIG.replace('stage_channels = 8, 16, 24', 'stage_channels = 8, 16, 32')
    (tmp_path / 'wide.cfg').write_text(wide, encoding='utf-8')
    code, _ = _run(capsys, 'eval', '--ckpt', seg_ckpt, '--manifest', 'corpus/clean_val.txt',
                   '--config', 'wide.cfg')
    assert code == EXIT_RUNTIME, "architecture differing from the checkpoint is rejected"


def _pipeline(capsys, monkeypatch, root):
    root.mkdir()
    monkeypatch.chdir(root)
    (root / 'run.cfg').write_text(TINY_CONFIG + "\n[manifests]\nft_foggy = corpus/hazy_train.txt\n"
                                  "ft_clear = corpus/clean_train.txt\n", encoding='utf-8')
    assert _run(capsys, 'synth-data', '--out', 'corpus', '-n', '6', '--height', '16', '--width', '32')[0] == 0
    common = ['--config', 'run.cfg', '--out', 'runs', '--seed', '3']
    code, out = _run(capsys, 'train-da', *common, '--foggy', 'corpus/hazy_train.txt', '--clear',
                     'corpus/clean_train.txt')
    assert code == 0
    da_ckpt = out.strip().splitlines()[-1]
    code, out = _run(capsys, 'train-seg', *common, '--manifest', 'corpus/clean_train.txt')
    assert code == 0
    seg_ckpt = out.strip().splitlines()[-1]
    code, out = _run(capsys, 'finetune', *common, '--seg-ckpt', seg_ckpt, '--da-ckpt', da_ckpt)
    assert code == 0
    return root / 'runs', Path(out.strip().splitlines()[-1]).name


@pytest.mark.slow
def test_pipeline_is_reproducible(capsys, monkeypatch, tmp_path):
    first, first_ckpt = _pipeline(capsys, monkeypatch, tmp_path / 'a')
    second, second_ckpt = _pipeline(capsys, monkeypatch, tmp_path / 'b')
    assert first_ckpt == second_ckpt
    for stage in ('transfer', 'segmentation', 'joint'):
        assert (first / stage / 'loss_log.csv').read_text() == (second / stage / 'loss_log.csv').read_text(), stage
    assert (first / 'joint' / first_ckpt).read_bytes() == (second / 'joint' / second_ckpt).read_bytes()
