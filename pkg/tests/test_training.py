import numpy as np
import pandas as pd
import pytest

from fogseg.config import build_run_config
from fogseg.data.sample import load_rgb
from fogseg.data.synth import synth_fog_corpus, write_corpus
from fogseg.errors import ConfigError, FogSegError
from fogseg.training import trainer
from fogseg.utils.checkpoint import read_checkpoint, read_latest


def _states_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_epoch_rng_is_reproducible():
    assert trainer.epoch_rng(3, 2).integers(0, 1000) == trainer.epoch_rng(3, 2).integers(0, 1000)
    assert trainer.epoch_rng(3, 2, stream=1).random() != trainer.epoch_rng(3, 2).random()


def test_config_blob_round_trip(tiny_config):
    run = tiny_config()
    blob = trainer.config_blob(run, trainer.KIND_SEGMENTATION)
    assert blob['kind'] == 'segmentation'
    again = trainer.run_config_from_blob(blob, epochs=5)
    assert again.stage_channels == run.stage_channels
    assert again.epochs == 5


def test_make_dataset_needs_manifest(tiny_config):
    with pytest.raises(ConfigError):
        trainer.make_dataset(None, tiny_config(), what='segmentation training set')


def test_segmentation_training_writes_artifacts(tiny_config):
    run = tiny_config()
    result = trainer.train_segmentation(run)
    run_dir = run.out_dir / 'segmentation'
    assert result.checkpoint == run_dir / 'epoch_002.ckpt'
    assert read_latest(run_dir) == result.checkpoint
    log = pd.read_csv(run_dir / 'loss_log.csv')
    assert list(log['epoch']) == [1, 2]
    assert set(log.columns) == {'epoch', 'loss', 'global_acc', 'class_avg', 'miou'}
    assert np.all(np.isfinite(log['loss']))
    data = read_checkpoint(result.checkpoint)
    assert data.kind == 'segmentation' and data.epoch == 2
    assert 'seg' in data.optimizers


def test_segmentation_training_is_deterministic(tiny_config, tmp_path):
    a = trainer.train_segmentation(tiny_config(epochs=1, out_dir=tmp_path / 'a'))
    b = trainer.train_segmentation(tiny_config(epochs=1, out_dir=tmp_path / 'b'))
    assert _states_equal(read_checkpoint(a.checkpoint).state, read_checkpoint(b.checkpoint).state)
    assert a.history == b.history


def test_resume_matches_uninterrupted_run(tiny_config, tmp_path):
    straight = trainer.train_segmentation(tiny_config(epochs=2, out_dir=tmp_path / 'straight'))
    trainer.train_segmentation(tiny_config(epochs=1, out_dir=tmp_path / 'resumed'))
    resumed = trainer.train_segmentation(tiny_config(epochs=2, out_dir=tmp_path / 'resumed'), resume=True)
    assert [row['epoch'] for row in resumed.history] == [2]
    a, b = read_checkpoint(straight.checkpoint), read_checkpoint(resumed.checkpoint)
    assert _states_equal(a.state, b.state), "resumed parameters diverge from the uninterrupted run"
    assert a.optimizers['seg']['step'] == b.optimizers['seg']['step']


def test_resume_of_finished_run_returns_latest(tiny_config):
    first = trainer.train_segmentation(tiny_config(epochs=1))
    again = trainer.train_segmentation(tiny_config(epochs=1), resume=True)
    assert again.checkpoint == first.checkpoint
    assert again.history == []


def test_resume_rejects_other_architecture(tiny_config):
    trainer.train_segmentation(tiny_config(epochs=1))
    with pytest.raises(FogSegError):
        trainer.train_segmentation(tiny_config(epochs=2, stage_channels=(8, 16, 32)), resume=True)


def test_transfer_training(tiny_config):
    run = tiny_config()
    result = trainer.train_transfer(run)
    assert [row['step'] for row in result.history] == [1, 2, 3]
    assert all(np.isfinite(row['gen_loss']) and np.isfinite(row['disc_loss']) for row in result.history)
    data = read_checkpoint(result.checkpoint)
    assert data.kind == 'transfer'
    assert set(data.optimizers) == {'gen', 'disc_x', 'disc_y'}
    assert any(name.startswith('gen_yx.') for name in data.state)


@pytest.fixture
def trained(tiny_config):
    run = tiny_config(epochs=1)
    return run, trainer.train_segmentation(run).checkpoint, trainer.train_transfer(run).checkpoint


def test_finetune_with_domain_adaptation(trained):
    run, seg_ckpt, da_ckpt = trained
    result = trainer.finetune_joint(run, seg_ckpt, da_ckpt)
    data = read_checkpoint(result.checkpoint)
    assert data.kind == 'joint'
    assert 'uncertainty.s_adv' in data.state and 'gen_xy.head.conv.weight' in data.state
    assert set(data.optimizers) == {'seg', 'uncertainty', 'gen', 'disc_y'}
    row = result.history[0]
    assert row['adv_loss'] > 0.0
    assert row['s_seg'] != 0.0 and row['s_adv'] != 0.0, "uncertainty scalars are learned"


def test_finetune_frozen_generator_keeps_gen_xy(trained):
    run, seg_ckpt, da_ckpt = trained
    result = trainer.finetune_joint(run.with_overrides(freeze_generator=True), seg_ckpt, da_ckpt)
    before, after = read_checkpoint(da_ckpt).state, read_checkpoint(result.checkpoint).state
    gen_weights = [k for k in before if k.startswith('gen_xy.') and 'running' not in k]
    assert all(np.array_equal(before[k], after[k]) for k in gen_weights)
    assert 'gen' not in read_checkpoint(result.checkpoint).optimizers


def test_finetune_without_domain_adaptation(trained):
    run, seg_ckpt, _ = trained
    result = trainer.finetune_joint(run.with_overrides(use_domain_adaptation=False), seg_ckpt)
    data = read_checkpoint(result.checkpoint)
    assert not any(k.startswith('gen_xy.') for k in data.state)
    assert data.state['uncertainty.s_adv'] == 0.0, "s_adv untouched without the adversarial term"
    assert result.history[0]['adv_loss'] == 0.0


def test_finetune_needs_transfer_checkpoint(trained):
    run, seg_ckpt, _ = trained
    with pytest.raises(ConfigError):
        trainer.finetune_joint(run, seg_ckpt, None)


def test_finetune_rejects_wrong_kind(trained):
    run, seg_ckpt, da_ckpt = trained
    with pytest.raises(ConfigError):
        trainer.finetune_joint(run, da_ckpt, da_ckpt)


def test_evaluate_writes_report_and_is_read_only(trained, corpus_dir, tmp_path):
    run, seg_ckpt, _ = trained
    _, paths = corpus_dir
    before = seg_ckpt.read_bytes()
    result = trainer.evaluate(seg_ckpt, paths['clean_val'], out_dir=tmp_path / 'eval',
                              save_predictions=tmp_path / 'pred')
    assert seg_ckpt.read_bytes() == before
    assert 0.0 <= result.miou <= 1.0 and 0.0 <= result.global_acc <= 1.0
    assert result.confusion.total == 2 * 16 * 32
    report = result.report_path.read_text(encoding='utf-8')
    assert 'road' in report and 'miou' in report
    assert (tmp_path / 'eval' / 'report.kv').read_text(encoding='utf-8').startswith('global_acc=')
    assert len(list((tmp_path / 'pred').glob('*.png'))) == 2
    again = trainer.evaluate(seg_ckpt, paths['clean_val'])
    assert again.miou == result.miou and again.report_path is None


def test_evaluate_joint_checkpoint(trained, corpus_dir):
    run, seg_ckpt, da_ckpt = trained
    _, paths = corpus_dir
    joint = trainer.finetune_joint(run, seg_ckpt, da_ckpt).checkpoint
    with_da = trainer.evaluate(joint, paths['hazy_val'])
    without = trainer.evaluate(joint, paths['hazy_val'], use_da=False)
    assert with_da.confusion.total == without.confusion.total


def test_evaluate_rejects_transfer_checkpoint(trained, corpus_dir):
    _, _, da_ckpt = trained
    with pytest.raises(ConfigError):
        trainer.evaluate(da_ckpt, corpus_dir[1]['clean_val'])


def test_translate_file(trained, corpus_dir, tmp_path):
    _, _, da_ckpt = trained
    root, _ = corpus_dir
    out = trainer.translate_file(da_ckpt, root / 'hazy' / '0000.png', tmp_path / 'out' / 'fixed.png')
    assert out.exists()
    assert load_rgb(out).shape == (3, 16, 32)


def _corpus(root, n, size, seed):
    # the last scene is held out; the other n - 1 form the training split
    return write_corpus(synth_fog_corpus(n, size=size, seed=seed), root, val_fraction=1.0 / n)


SMALL_SEGNET = dict(stage_channels=(16, 32, 48), rgb_plain_blocks=1, dilations=(2, 4), decoder_blocks=1,
                    dense_growth=8, dense_layers=2, workers=1)


@pytest.mark.slow
def test_segmenter_overfits_a_small_training_set(tmp_path):
    paths = _corpus(tmp_path / 'corpus', 9, (64, 128), seed=21)
    run = build_run_config(dict(SMALL_SEGNET, height=64, width=128, seg_train=paths['clean_train'], epochs=200,
                                batch_size=4, augment=False, seed=0, out_dir=tmp_path / 'runs'))
    result = trainer.train_segmentation(run)
    assert len(result.history) == 200
    reached = [row for row in result.history if row['global_acc'] > 0.95 and row['miou'] > 0.90]
    assert reached, f"best epoch: {max(result.history, key=lambda row: row['miou'])}"


@pytest.mark.slow
def test_translation_improves_hazy_segmentation(tmp_path):
    paths = write_corpus(synth_fog_corpus(40, size=(64, 64), seed=8), tmp_path / 'corpus', val_fraction=0.2)
    run = build_run_config(dict(
        SMALL_SEGNET, height=64, width=64, seg_train=paths['clean_train'], epochs=40, batch_size=4, seed=1,
        da_foggy=paths['hazy_train'], da_clear=paths['clean_train'], transfer_steps=500, transfer_batch_size=4,
        transfer_height=64, transfer_width=64, out_dir=tmp_path / 'runs',
    ))
    seg_ckpt = trainer.train_segmentation(run).checkpoint
    da_ckpt = trainer.train_transfer(run).checkpoint

    with_da = trainer.evaluate(seg_ckpt, paths['hazy_val'], transfer_ckpt=da_ckpt)
    without = trainer.evaluate(seg_ckpt, paths['hazy_val'], transfer_ckpt=da_ckpt, use_da=False)
    assert with_da.confusion.total == without.confusion.total
    assert with_da.miou > without.miou, f"translated {with_da.miou:.4f} vs hazy {without.miou:.4f}"
