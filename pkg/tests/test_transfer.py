import numpy as np
import pytest

from fogseg.config import build_run_config
from fogseg.core.tensor import Tensor, no_grad
from fogseg.data.synth import synth_fog_corpus, write_corpus
from fogseg.errors import FogSegError, ShapeError
from fogseg.nn.transfer import (GanLosses, TransferConfig, TransferModel, adversarial_loss, cycle_loss,
                                gan_train_step)
from fogseg.training import trainer
from fogseg.training.optim import AdamState
from fogseg.utils.checkpoint import load_checkpoint

SMALL = TransferConfig(gen_filters=4, disc_filters=4, gen_res_blocks=1, disc_layers=2)


def _images(n=2, size=16, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1.0, 1.0, (n, 3, size, size)).astype(np.float32))


def _optimizers(model):
    reg = model.registry
    return {
        'gen': AdamState(model.generator_params(), lr=2e-4),
        'disc_x': AdamState(reg.with_prefix('disc_x'), lr=2e-4),
        'disc_y': AdamState(reg.with_prefix('disc_y'), lr=2e-4),
    }


def test_generator_keeps_shape_and_range():
    model = TransferModel(SMALL).init(0)
    out = model.generator_forward(_images())
    assert out.shape == (2, 3, 16, 16)
    assert out.numpy().min() > -1.0 and out.numpy().max() < 1.0


def test_generator_needs_multiples_of_four():
    model = TransferModel(SMALL).init(0)
    with pytest.raises(ShapeError):
        model.generator_forward(_images(size=18))


def test_discriminator_patch_map_default_depth():
    model = TransferModel(TransferConfig(gen_filters=2, disc_filters=2)).init(0)
    assert model.discriminator_forward(_images(n=1, size=64)).shape == (1, 1, 6, 6)


def test_discriminator_patch_map_two_layers():
    model = TransferModel(SMALL).init(0)
    assert model.discriminator_forward(_images(n=1), 'x').shape == (1, 1, 2, 2)


def test_translate_maps_unit_range_without_graph():
    model = TransferModel(SMALL).init(0)
    image = Tensor(np.random.default_rng(1).random((1, 3, 16, 16)).astype(np.float32))
    out = model.translate(image)
    assert not out.requires_grad
    assert out.numpy().min() >= 0.0 and out.numpy().max() <= 1.0
    assert model.gen_xy.training, "translate restores the training flag"


def test_discriminator_loss_at_half():
    zeros = Tensor(np.zeros((1, 1, 2, 2)))
    assert adversarial_loss(zeros, zeros, 'discriminator').item() == pytest.approx(2 * np.log(2), rel=1e-6)


def test_generator_loss_variants():
    zeros = Tensor(np.zeros((1, 1, 2, 2)))
    assert adversarial_loss(None, zeros, 'generator').item() == pytest.approx(np.log(2), rel=1e-6)
    assert adversarial_loss(None, zeros, 'generator', 'literal').item() == pytest.approx(-np.log(2), rel=1e-6)


def test_adversarial_loss_is_finite_at_saturation():
    big = Tensor(np.full((1, 1, 2, 2), 80.0))
    assert np.isfinite(adversarial_loss(big, big, 'discriminator').item())
    assert np.isfinite(adversarial_loss(None, -big, 'generator').item())


def test_discriminator_role_needs_real_logits():
    with pytest.raises(FogSegError):
        adversarial_loss(None, Tensor(np.zeros((1, 1, 2, 2))), 'discriminator')


def test_cycle_loss_identity_and_scale():
    x = _images()
    assert cycle_loss(x, x).item() == 0.0
    shifted = Tensor(x.numpy() + 0.1)
    assert cycle_loss(x, shifted, lambda_cycle=10.0).item() == pytest.approx(1.0, rel=1e-4)
    assert cycle_loss(x, shifted, x, shifted, lambda_cycle=1.0).item() == pytest.approx(0.2, rel=1e-4)
    with pytest.raises(ShapeError):
        cycle_loss(x, _images(n=1))


def test_train_step_returns_finite_losses():
    model = TransferModel(SMALL).init(0)
    losses = gan_train_step(_images(seed=1), _images(seed=2), model, _optimizers(model))
    assert isinstance(losses, GanLosses)
    assert all(np.isfinite(v) for v in losses)
    assert losses.cycle > 0.0


def test_discriminator_update_leaves_generators_alone():
    model = TransferModel(SMALL).init(0)
    opts = _optimizers(model)
    gen_before = {n: t.numpy().copy() for n, t in model.generator_params()}
    disc_before = {n: t.numpy().copy() for n, t in model.registry.with_prefix('disc_y')}

    class _Recorder:
        def __init__(self, inner):
            self.inner = inner

        def step(self):
            gen_after = {n: t.numpy().copy() for n, t in model.generator_params()}
            self.snapshot = gen_after
            self.inner.step()

        def zero_grad(self):
            self.inner.zero_grad()

    recorder = _Recorder(opts['disc_y'])
    opts['disc_y'] = recorder
    gan_train_step(_images(seed=1), _images(seed=2), model, opts)

    # the generator step ran before the discriminators; the discriminator steps must not touch it
    after = {n: t.numpy() for n, t in model.generator_params()}
    assert all(np.array_equal(recorder.snapshot[n], after[n]) for n in after)
    assert any(not np.array_equal(gen_before[n], after[n]) for n in after), "generator step should move G"
    assert any(not np.array_equal(disc_before[n], t.numpy()) for n, t in model.registry.with_prefix('disc_y'))


def test_train_step_is_deterministic():
    def run():
        model = TransferModel(SMALL).init(0)
        opts = _optimizers(model)
        for i in range(2):
            gan_train_step(_images(seed=i), _images(seed=10 + i), model, opts)
        return model.registry.state()
    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_translate_under_no_grad_matches():
    model = TransferModel(SMALL).init(0).eval()
    image = Tensor(np.random.default_rng(3).random((1, 3, 16, 16)).astype(np.float32))
    with no_grad():
        direct = model.translate_differentiable(image).numpy()
    assert np.allclose(direct, model.translate(image).numpy())


@pytest.mark.slow
def test_cycle_loss_vanishes_when_domains_coincide():
    cfg = TransferConfig(gen_filters=8, disc_filters=4, gen_res_blocks=1, disc_layers=1, lambda_cycle=1.0)
    model = TransferModel(cfg).init(0)
    reg = model.registry
    opts = {
        'gen': AdamState(model.generator_params(), lr=1e-3, beta1=0.9),
        'disc_x': AdamState(reg.with_prefix('disc_x'), lr=2e-4),
        'disc_y': AdamState(reg.with_prefix('disc_y'), lr=2e-4),
    }
    images = Tensor(np.random.default_rng(6).uniform(-0.8, 0.8, (2, 3, 8, 8)))
    history = []
    for _ in range(2000):
        history.append(gan_train_step(images, images, model, opts, adversarial_weight=0.0).cycle)
        if history[-1] < 0.01:
            break
    assert history[-1] < 0.01, f"cycle loss after {len(history)} steps: {history[-1]:.4f}"


@pytest.mark.slow
def test_haze_corpus_translation(tmp_path):
    corpus = synth_fog_corpus(72, size=(64, 64), seed=12)
    paths = write_corpus(corpus, tmp_path / 'corpus', val_fraction=8 / 72)
    run = build_run_config(dict(height=64, width=64, da_foggy=paths['hazy_train'], da_clear=paths['clean_train'],
                                transfer_steps=500, transfer_batch_size=4, transfer_height=64, transfer_width=64,
                                workers=1, seed=0, out_dir=tmp_path / 'runs'))
    result = trainer.train_transfer(run)

    first = result.history[0]['cycle_loss']
    last = float(np.mean([row['cycle_loss'] for row in result.history[-25:]]))
    assert last < 0.5 * first, f"cycle loss {first:.3f} -> {last:.3f}"

    model = TransferModel(TransferConfig.from_run_config(run))
    load_checkpoint(result.checkpoint, model.registry)
    held_out = range(64, 72)
    hazy = np.stack([corpus.hazy[i].rgb for i in held_out])
    clean = np.stack([corpus.clean[i].rgb for i in held_out])
    translated = model.translate(Tensor(hazy)).numpy()
    assert np.abs(translated - clean).mean() < np.abs(hazy - clean).mean()
