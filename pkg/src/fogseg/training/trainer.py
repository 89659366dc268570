"""
Training protocol
-----------------

The four steps of a run, each driven by a validated ``RunConfig``:

    train_transfer      unpaired foggy <-> clear translation (checkpoint kind "transfer")
    train_segmentation  segmenter on clear scenes              (kind "segmentation")
    finetune_joint      translation + segmentation jointly      (kind "joint")
    evaluate            metrics report on a held-out manifest, read-only

Every step logs JSON records tagged with ``operation`` and a short ``run_id``, appends its
per-epoch (or per-step) losses to ``loss_log.csv`` in its run directory and writes
checkpoints atomically, updating the ``latest`` pointer after each one.

Randomness is derived from (seed, epoch) so that a resumed run replays exactly the batches,
flips and dropout masks of an uninterrupted one.
"""

import time
import uuid
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from .. import config
from ..config import RunConfig, build_run_config
from ..core import functional as F
from ..core.tensor import Tensor, no_grad
from ..data.labels import class_names
from ..data.manifest import Batch, DatasetManifest, SegmentationDataset
from ..data.sample import load_rgb, luminance_tensor, save_prediction, save_rgb
from ..errors import ConfigError, DataError
from ..losses import UncertaintyWeights, class_weights, joint_loss, seg_loss
from ..nn.params import ParamRegistry
from ..nn.segnet import SegNet, SegNetConfig
from ..nn.transfer import TransferConfig, TransferModel, adversarial_loss, gan_train_step
from ..utils.checkpoint import (CheckpointData, epoch_path, flush_chunk, load_checkpoint, read_checkpoint,
                                read_latest, save_checkpoint, write_latest)
from ..utils.logger import get_logger
from ..utils.metrics import ConfusionMatrix, format_kv, format_report, report_kv
from .optim import AdamState

logger = get_logger(__name__)

KIND_SEGMENTATION = 'segmentation'
KIND_TRANSFER = 'transfer'
KIND_JOINT = 'joint'

SEG_MODEL_KEYS = ('num_classes', 'stage_channels', 'use_depth', 'rgb_plain_blocks', 'dilations',
                  'decoder_blocks', 'dense_growth', 'dense_layers')
TRANSFER_MODEL_KEYS = ('gen_filters', 'disc_filters', 'gen_res_blocks', 'disc_layers')


class TrainResult(NamedTuple):
    checkpoint: Path
    history: List[Dict[str, Any]]


class EvalResult(NamedTuple):
    confusion: ConfusionMatrix
    global_acc: float
    class_avg: float
    miou: float
    report_path: Optional[Path]

# ----------------------------------------------------------------------------------------------------------
# helpers


def make_run_id() -> str:
    return uuid.uuid4().hex[:8]


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def config_blob(run: RunConfig, kind: str) -> Dict[str, Any]:
    blob = run.model_dump(mode='json')
    blob['kind'] = kind
    return blob


def run_config_from_blob(blob: Dict[str, Any], **overrides: Any) -> RunConfig:
    values = {k: v for k, v in blob.items() if k in RunConfig.model_fields}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_run_config(values)


def check_compatible(run: RunConfig, data: CheckpointData, keys: Tuple[str, ...], expected_kind: str) -> None:
    """
    Raises:
        ConfigError: wrong checkpoint kind or differing architecture fields
    """
    if data.kind != expected_kind:
        raise ConfigError(f"expected a '{expected_kind}' checkpoint, got '{data.kind}'")
    current = run.model_dump(mode='json')
    diffs = [k for k in keys if k in data.config and data.config[k] != current[k]]
    if diffs:
        raise ConfigError(f"config mismatch with {expected_kind} checkpoint: {', '.join(diffs)}")


def build_segnet(run: RunConfig) -> SegNet:
    return SegNet(SegNetConfig.from_run_config(run), seed=run.seed).init(run.seed)


def build_transfer(run: RunConfig) -> TransferModel:
    return TransferModel(TransferConfig.from_run_config(run)).init(run.seed + 1)


def make_dataset(manifest: Optional[Path], run: RunConfig, size: Optional[Tuple[int, int]] = None,
                 use_depth: Optional[bool] = None, what: str = 'dataset') -> SegmentationDataset:
    if manifest is None:
        raise ConfigError(f"no manifest configured for the {what}")
    h, w = size or (run.height, run.width)
    return SegmentationDataset(
        DatasetManifest.read(manifest), h, w,
        use_depth=run.use_depth if use_depth is None else use_depth,
        coefficients=run.luminance_coefficients, workers=run.workers,
    )


def cycle_batches(dataset: SegmentationDataset, batch_size: int, seed: int, stream: int) -> Iterator[Batch]:
    """Endless seeded batches: one fresh permutation per pass over the data."""
    epoch = 0
    while True:
        epoch += 1
        yield from dataset.iter_batches(batch_size, epoch_rng(seed, epoch, stream))


def to_signed(rgb: np.ndarray) -> Tensor:
    return Tensor(rgb * 2.0 - 1.0)


def seg_inputs(rgb: Tensor, batch: Batch, use_depth: bool, coefficients) -> Tensor:
    """LD tensor for a (possibly translated) rgb batch: [luminance, depth] or luminance."""
    lum = luminance_tensor(rgb, coefficients)
    if not use_depth:
        return lum
    return F.concat_channels(lum, Tensor(batch.ld[:, 1:2]))


def _log_epoch(operation: str, run_id: str, row: Dict[str, Any]) -> None:
    logger.info(f"{operation} epoch {row.get('epoch')} finished", extra={
        "operation": operation,
        "run_id": run_id,
        **row,
    })

# ----------------------------------------------------------------------------------------------------------


def train_segmentation(run: RunConfig, resume: bool = False) -> TrainResult:
    """
    Train the segmentation network on ``run.seg_train`` with class-weighted cross-entropy.

    One checkpoint per epoch in ``<out_dir>/segmentation``; ``resume`` continues from the
    ``latest`` pointer there.

    Raises:
        ConfigError: no training manifest
        DataError: empty dataset
    """
    run_id = make_run_id()
    run_dir = Path(run.out_dir) / KIND_SEGMENTATION
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(run.seg_train, run, what='segmentation training set')
    net = build_segnet(run)
    optimizer = AdamState(net.registry.items(), run.lr, run.beta1, run.beta2, run.adam_eps)
    weights = class_weights(dataset.pixel_counts(run.num_classes), run.class_weight_c)

    start_epoch = 0
    checkpoint = None
    if resume:
        latest = read_latest(run_dir)
        if latest is not None:
            data = load_checkpoint(latest, net.registry, {'seg': optimizer})
            check_compatible(run, data, SEG_MODEL_KEYS, KIND_SEGMENTATION)
            start_epoch, checkpoint = data.epoch, latest

    logger.info("Starting segmentation training", extra={
        "operation": "train_seg",
        "run_id": run_id,
        "samples": len(dataset),
        "epochs": run.epochs,
        "start_epoch": start_epoch,
        "seed": run.seed,
    })

    history: List[Dict[str, Any]] = []
    for epoch in range(start_epoch + 1, run.epochs + 1):
        rng = epoch_rng(run.seed, epoch)
        net.reseed(run.seed, epoch)
        net.train()
        cm = ConfusionMatrix(run.num_classes, run.ignore_label)
        losses = []
        for batch in dataset.iter_batches(run.batch_size, rng, run.augment):
            net.registry.zero_grad()
            logits = net(batch.rgb_tensor(), batch.ld_tensor())
            loss = seg_loss(logits, batch.labels, weights, run.ignore_label, run.loss_reduction)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            cm.update(logits.data.argmax(axis=1), batch.labels)

        global_acc, class_avg, miou = cm.metrics()
        row = {'epoch': epoch, 'loss': float(np.mean(losses)), 'global_acc': global_acc,
               'class_avg': class_avg, 'miou': miou}
        history.append(row)
        flush_chunk(run_dir / 'loss_log.csv', [dict(row)])
        _log_epoch('train_seg', run_id, row)

        checkpoint = save_checkpoint(epoch_path(run_dir, epoch), net.registry,
                                     config_blob(run, KIND_SEGMENTATION), epoch, run.seed, {'seg': optimizer})
        write_latest(run_dir, checkpoint)

    if checkpoint is None:
        raise ConfigError(f"nothing to train: start epoch {start_epoch} >= epochs {run.epochs}")
    return TrainResult(checkpoint, history)

# ----------------------------------------------------------------------------------------------------------


def transfer_optimizers(model: TransferModel, run: RunConfig) -> Dict[str, AdamState]:
    def adam(params):
        return AdamState(params, run.transfer_lr, run.beta1, run.beta2, run.adam_eps)

    return {
        'gen': adam(model.generator_params()),
        'disc_x': adam(model.registry.with_prefix('disc_x')),
        'disc_y': adam(model.registry.with_prefix('disc_y')),
    }


def train_transfer(run: RunConfig) -> TrainResult:
    """
    Train the translation model on the unpaired ``da_foggy`` / ``da_clear`` corpora for
    ``transfer_steps`` GAN steps at ``transfer_height`` x ``transfer_width``.
    """
    run_id = make_run_id()
    run_dir = Path(run.out_dir) / KIND_TRANSFER
    run_dir.mkdir(parents=True, exist_ok=True)
    size = (run.transfer_height, run.transfer_width)
    foggy = make_dataset(run.da_foggy, run, size, use_depth=False, what='foggy corpus')
    clear = make_dataset(run.da_clear, run, size, use_depth=False, what='clear corpus')
    model = build_transfer(run)
    optimizers = transfer_optimizers(model, run)

    logger.info("Starting domain-transfer training", extra={
        "operation": "train_da",
        "run_id": run_id,
        "foggy_samples": len(foggy),
        "clear_samples": len(clear),
        "steps": run.transfer_steps,
        "seed": run.seed,
    })

    xs = cycle_batches(foggy, run.transfer_batch_size, run.seed, stream=1)
    ys = cycle_batches(clear, run.transfer_batch_size, run.seed, stream=2)
    history: List[Dict[str, Any]] = []
    for step in range(1, run.transfer_steps + 1):
        losses = gan_train_step(to_signed(next(xs).rgb), to_signed(next(ys).rgb), model, optimizers)
        row = {'step': step, 'gen_loss': losses.gen, 'disc_loss': losses.disc, 'cycle_loss': losses.cycle}
        history.append(row)
        if step == 1 or step % 10 == 0 or step == run.transfer_steps:
            logger.info(f"train_da step {step}", extra={"operation": "train_da", "run_id": run_id, **row})
    flush_chunk(run_dir / 'loss_log.csv', [dict(r) for r in history])

    checkpoint = save_checkpoint(run_dir / f"final{config.CKPT_SUFFIX}", model.registry,
                                 config_blob(run, KIND_TRANSFER), run.transfer_steps, run.seed, optimizers)
    write_latest(run_dir, checkpoint)
    return TrainResult(checkpoint, history)

# ----------------------------------------------------------------------------------------------------------


def finetune_joint(run: RunConfig, seg_ckpt: Path, transfer_ckpt: Optional[Path] = None) -> TrainResult:
    """
    Joint fine-tuning on ``ft_foggy`` with the uncertainty-weighted objective.

    Per batch: foggy rgb -> gen_xy -> Y' -> segmenter (luminance from Y' unless
    ``luminance_source='foggy'``); the joint loss updates the segmenter, the uncertainty
    scalars and (unless ``freeze_generator``) gen_xy; disc_y is then updated on the clear
    corpus against the detached Y'. With ``use_domain_adaptation`` off, translation and the
    adversarial term are skipped entirely.

    Raises:
        ConfigError: checkpoint kind or architecture does not match ``run``
    """
    run_id = make_run_id()
    run_dir = Path(run.out_dir) / KIND_JOINT
    run_dir.mkdir(parents=True, exist_ok=True)
    use_da = run.use_domain_adaptation

    net = build_segnet(run)
    check_compatible(run, load_checkpoint(seg_ckpt, net.registry), SEG_MODEL_KEYS, KIND_SEGMENTATION)
    uncertainty = UncertaintyWeights()
    foggy = make_dataset(run.ft_foggy, run, what='fine-tuning foggy set')

    def adam(params):
        return AdamState(params, run.lr, run.beta1, run.beta2, run.adam_eps)

    optimizers: Dict[str, AdamState] = {
        'seg': adam(net.registry.items()),
        'uncertainty': adam([(n, t) for n, t in uncertainty.registry.items() if use_da or n.endswith('s_seg')]),
    }
    registries = [net.registry, uncertainty.registry]
    model: Optional[TransferModel] = None
    clear_batches: Optional[Iterator[Batch]] = None
    if use_da:
        if transfer_ckpt is None:
            raise ConfigError("finetune with domain adaptation needs a transfer checkpoint")
        model = build_transfer(run)
        check_compatible(run, load_checkpoint(transfer_ckpt, model.registry), TRANSFER_MODEL_KEYS, KIND_TRANSFER)
        if not run.freeze_generator:
            optimizers['gen'] = adam(model.registry.with_prefix('gen_xy'))
        optimizers['disc_y'] = adam(model.registry.with_prefix('disc_y'))
        registries.append(model.registry)
        clear = make_dataset(run.ft_clear or run.da_clear, run, use_depth=False, what='fine-tuning clear set')
        clear_batches = cycle_batches(clear, run.batch_size, run.seed, stream=3)
    combined = ParamRegistry.merged(*registries)
    # class statistics come from the full segmentation corpus when it is configured
    stats = make_dataset(run.seg_train, run, what='segmentation training set') if run.seg_train else foggy
    weights = class_weights(stats.pixel_counts(run.num_classes), run.class_weight_c)

    logger.info("Starting joint fine-tuning", extra={
        "operation": "finetune",
        "run_id": run_id,
        "domain_adaptation": use_da,
        "freeze_generator": run.freeze_generator,
        "luminance_source": run.luminance_source,
        "samples": len(foggy),
        "epochs": run.finetune_epochs,
    })

    history: List[Dict[str, Any]] = []
    checkpoint = None
    for epoch in range(1, run.finetune_epochs + 1):
        rng = epoch_rng(run.seed, epoch)
        net.reseed(run.seed, epoch)
        net.train()
        if model is not None:
            model.train()
            model.gen_xy.train(not run.freeze_generator)
        seg_losses, adv_losses, disc_losses = [], [], []
        for batch in foggy.iter_batches(run.batch_size, rng, run.augment):
            combined.zero_grad()
            foggy_rgb = batch.rgb_tensor()
            l_adv = None
            if model is not None:
                if run.freeze_generator:
                    with no_grad():
                        corrected = model.translate_differentiable(foggy_rgb)
                else:
                    corrected = model.translate_differentiable(foggy_rgb)
                l_adv = adversarial_loss(None, model.disc_y(corrected * 2.0 - 1.0), 'generator', run.generator_loss)
            else:
                corrected = foggy_rgb
            lum_source = corrected if run.luminance_source == 'corrected' else foggy_rgb
            logits = net(corrected, seg_inputs(lum_source, batch, run.use_depth, run.luminance_coefficients))
            l_seg = seg_loss(logits, batch.labels, weights, run.ignore_label, run.loss_reduction)
            total = joint_loss(l_adv, l_seg, uncertainty)
            total.backward()
            for group in ('seg', 'uncertainty', 'gen'):
                if group in optimizers:
                    optimizers[group].step()
            seg_losses.append(l_seg.item())

            if model is not None:
                combined.zero_grad()
                real = to_signed(next(clear_batches).rgb)
                fake = Tensor(corrected.data * 2.0 - 1.0)
                d_loss = adversarial_loss(model.disc_y(real), model.disc_y(fake), 'discriminator')
                d_loss.backward()
                optimizers['disc_y'].step()
                adv_losses.append(l_adv.item())
                disc_losses.append(d_loss.item())

        row = {
            'epoch': epoch,
            'seg_loss': float(np.mean(seg_losses)),
            'adv_loss': float(np.mean(adv_losses)) if adv_losses else 0.0,
            'disc_loss': float(np.mean(disc_losses)) if disc_losses else 0.0,
            's_seg': uncertainty.s_seg.item(),
            's_adv': uncertainty.s_adv.item(),
        }
        history.append(row)
        flush_chunk(run_dir / 'loss_log.csv', [dict(row)])
        _log_epoch('finetune', run_id, row)
        checkpoint = save_checkpoint(epoch_path(run_dir, epoch), combined, config_blob(run, KIND_JOINT),
                                     epoch, run.seed, optimizers)
        write_latest(run_dir, checkpoint)

    if checkpoint is None:
        raise ConfigError("finetune_epochs must be >= 1")
    return TrainResult(checkpoint, history)

# ----------------------------------------------------------------------------------------------------------


def load_for_inference(ckpt: Path, transfer_ckpt: Optional[Path] = None, use_da: Optional[bool] = None,
                       run: Optional[RunConfig] = None,
                       **overrides: Any) -> Tuple[RunConfig, SegNet, Optional[TransferModel]]:
    """
    Rebuild the segmenter (and translator, when one is available and ``use_da`` allows it)
    from checkpoints, in eval mode.

    ``run`` replaces the stored config for everything but the architecture, which must match.
    """
    data = read_checkpoint(ckpt)
    if data.kind not in (KIND_SEGMENTATION, KIND_JOINT):
        raise ConfigError(f"cannot evaluate a '{data.kind}' checkpoint")
    stored = run_config_from_blob(data.config, **overrides)
    if run is None:
        run = stored
    else:
        diffs = [k for k in SEG_MODEL_KEYS if getattr(run, k) != getattr(stored, k)]
        if diffs:
            raise ConfigError(f"config mismatch with {data.kind} checkpoint: {', '.join(diffs)}")
    net = SegNet(SegNetConfig.from_run_config(stored), seed=run.seed)
    model: Optional[TransferModel] = None

    if data.kind == KIND_JOINT:
        registries = [net.registry, UncertaintyWeights().registry]
        if stored.use_domain_adaptation:
            model = TransferModel(TransferConfig.from_run_config(stored))
            registries.append(model.registry)
        load_checkpoint(ckpt, ParamRegistry.merged(*registries))
    else:
        load_checkpoint(ckpt, net.registry)
    if transfer_ckpt is not None:
        tdata = read_checkpoint(transfer_ckpt)
        if tdata.kind != KIND_TRANSFER:
            raise ConfigError(f"expected a 'transfer' checkpoint, got '{tdata.kind}'")
        model = TransferModel(TransferConfig.from_run_config(run_config_from_blob(tdata.config)))
        load_checkpoint(transfer_ckpt, model.registry)
    if use_da is False:
        model = None

    net.eval()
    if model is not None:
        model.eval()
    return run, net, model


def evaluate(ckpt: Path, manifest: Path, transfer_ckpt: Optional[Path] = None, use_da: Optional[bool] = None,
             out_dir: Optional[Path] = None, save_predictions: Optional[Path] = None,
             batch_size: Optional[int] = None, run: Optional[RunConfig] = None, **overrides: Any) -> EvalResult:
    """
    Stream ``manifest`` through (translate ->) segment -> argmax and score it.

    ``run`` replaces the checkpoint's stored settings (batch size, luminance source, seed) and
    its architecture fields must match the checkpoint; ``overrides`` patch the stored config.

    Writes ``report.txt`` (per-class table plus aggregates) and ``report.kv`` to ``out_dir``
    when given; never changes a parameter or running statistic.
    """
    run_id = make_run_id()
    run, net, model = load_for_inference(ckpt, transfer_ckpt, use_da, run=run, **overrides)
    dataset = make_dataset(Path(manifest), run, what='evaluation set')
    cm = ConfusionMatrix(run.num_classes, run.ignore_label)
    if save_predictions is not None:
        Path(save_predictions).mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    with no_grad():
        for batch in dataset.iter_batches(batch_size or run.batch_size):
            rgb = batch.rgb_tensor()
            if model is not None:
                rgb = model.translate(rgb)
            lum_source = rgb if run.luminance_source == 'corrected' else batch.rgb_tensor()
            logits = net(rgb, seg_inputs(lum_source, batch, run.use_depth, run.luminance_coefficients))
            predictions = logits.data.argmax(axis=1)
            cm.update(predictions, batch.labels)
            if save_predictions is not None:
                for name, pred in zip(batch.names, predictions):
                    save_prediction(Path(save_predictions) / f"{name}.png", pred)
    elapsed = time.perf_counter() - started

    global_acc, class_avg, miou = cm.metrics()
    names = class_names() if run.num_classes == len(class_names()) else None
    report_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / 'report.txt'
        report_path.write_text(format_report(cm, names), encoding='utf-8')
        (out_dir / 'report.kv').write_text(format_kv(report_kv(cm, names)), encoding='utf-8')

    cm.log_metrics(run_id=run_id, checkpoint=str(ckpt), domain_adaptation=model is not None,
                   fps=round(len(dataset) / max(elapsed, 1e-9), 2))
    return EvalResult(cm, global_acc, class_avg, miou, report_path)

# ----------------------------------------------------------------------------------------------------------


def translate_file(transfer_ckpt: Path, in_path: Path, out_path: Path) -> Path:
    """Translate one foggy PNG into its corrected counterpart."""
    data = read_checkpoint(transfer_ckpt)
    if data.kind not in (KIND_TRANSFER, KIND_JOINT):
        raise ConfigError(f"'{data.kind}' checkpoint has no translator")
    run = run_config_from_blob(data.config)
    model = TransferModel(TransferConfig.from_run_config(run))
    if data.kind == KIND_JOINT:
        seg = SegNet(SegNetConfig.from_run_config(run))
        load_checkpoint(transfer_ckpt, ParamRegistry.merged(seg.registry, UncertaintyWeights().registry,
                                                            model.registry))
    else:
        load_checkpoint(transfer_ckpt, model.registry)

    rgb = load_rgb(in_path)
    h, w = rgb.shape[1:]
    if h < 4 or w < 4:
        raise DataError(f"{in_path}: image too small to translate ({h}x{w})")
    work = (h // 4 * 4, w // 4 * 4)
    if work != (h, w):
        rgb = load_rgb(in_path, work)
    corrected = model.translate(Tensor(rgb[None]))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_rgb(out_path, np.clip(corrected.data[0], 0.0, 1.0))
    logger.info("Translated image", extra={
        "operation": "translate",
        "input": str(in_path),
        "output": str(out_path),
        "size": list(work),
    })
    return out_path
