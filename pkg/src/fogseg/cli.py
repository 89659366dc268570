"""
fogseg command line
-------------------

    fogseg synth-data --out DIR [-n N] [--seed S]
    fogseg train-da   [--config F] [--seed S] [--out DIR]
    fogseg train-seg  [--config F] [--seed S] [--out DIR] [--resume]
    fogseg finetune   --seg-ckpt C [--da-ckpt C] [--no-da] ...
    fogseg eval       --ckpt C --manifest M [--config F] [--seed S] [--transfer-ckpt C] ...
    fogseg translate  --ckpt C IN OUT
    fogseg gradcheck  [--params] [--step H]
    fogseg logs       FILE [-l LEVEL] [-o OPERATION] [-f TEXT]

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import sys
from pathlib import Path
from typing import List, Optional

import click

from . import __version__, config
from .config import RunConfig, load_run_config
from .errors import FogSegError, GradcheckError
from .utils.logger import get_logger, setup_logger

logger = get_logger(__name__)

EXIT_USAGE = 1
EXIT_RUNTIME = 2


def run_options(func):
    """--config / --seed / --no-da / --out, shared by every command that builds a RunConfig."""
    func = click.option('--out', 'out_dir', type=click.Path(path_type=Path), default=None,
                        help='Run output directory (checkpoints, loss logs, reports).')(func)
    func = click.option('--no-da', is_flag=True, default=False,
                        help='Disable domain adaptation (translation and adversarial term).')(func)
    func = click.option('--seed', type=int, default=None, help='Run seed.')(func)
    func = click.option('--config', 'config_path', type=click.Path(path_type=Path), default=None,
                        help='Sectioned key=value run config.')(func)
    return func


def build_config(config_path: Optional[Path], seed: Optional[int], no_da: bool, out_dir: Optional[Path],
                 **overrides) -> RunConfig:
    run = load_run_config(config_path, seed=seed, out_dir=out_dir,
                          use_domain_adaptation=False if no_da else None, **overrides)
    logger.info("Resolved run config", extra={
        "operation": "config",
        "config_file": str(config_path) if config_path else None,
        "seed": run.seed,
        "out_dir": str(run.out_dir),
        "domain_adaptation": run.use_domain_adaptation,
    })
    return run

# ----------------------------------------------------------------------------------------------------------


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.version_option(__version__, prog_name='fogseg')
@click.option('--log-level', default=None, help='Overrides FOGSEG_LOG_LEVEL.')
@click.option('--log-file', type=click.Path(path_type=Path), default=None,
              help='JSON log file (default: a timestamped file under FOGSEG_LOGS_DIR).')
def cli(log_level: Optional[str], log_file: Optional[Path]) -> None:
    """Foggy-scene semantic segmentation with domain transfer."""
    setup_logger(level=(log_level or config.LOG_LEVEL).upper(), log_file=log_file,
                 log_dir=None if log_file else config.LOGS_DIR)


@cli.command('synth-data')
@click.option('--out', 'out_dir', type=click.Path(path_type=Path), required=True)
@click.option('--seed', type=int, default=config.DEFAULT_SEED, show_default=True)
@click.option('-n', '--count', type=int, default=16, show_default=True, help='Number of scenes.')
@click.option('--height', type=int, default=64, show_default=True)
@click.option('--width', type=int, default=128, show_default=True)
@click.option('--val-fraction', type=float, default=0.25, show_default=True)
def synth_data(out_dir: Path, seed: int, count: int, height: int, width: int, val_fraction: float) -> None:
    """Write a seeded synthetic clean/hazy corpus with manifests."""
    from .data.synth import synth_fog_corpus, write_corpus

    corpus = synth_fog_corpus(count, (height, width), seed)
    for key, path in write_corpus(corpus, out_dir, val_fraction).items():
        click.echo(f"{key}\t{path}")


@cli.command('train-seg')
@run_options
@click.option('--manifest', type=click.Path(path_type=Path), default=None, help='Overrides seg_train.')
@click.option('--epochs', type=int, default=None)
@click.option('--resume', is_flag=True, default=False, help='Continue from the latest checkpoint.')
def train_seg(config_path, seed, no_da, out_dir, manifest, epochs, resume) -> None:
    """Train the segmentation network on clear scenes."""
    from .training.trainer import train_segmentation

    run = build_config(config_path, seed, no_da, out_dir, seg_train=manifest, epochs=epochs)
    result = train_segmentation(run, resume=resume)
    click.echo(str(result.checkpoint))


@cli.command('train-da')
@run_options
@click.option('--foggy', type=click.Path(path_type=Path), default=None, help='Overrides da_foggy.')
@click.option('--clear', type=click.Path(path_type=Path), default=None, help='Overrides da_clear.')
@click.option('--steps', type=int, default=None)
def train_da(config_path, seed, no_da, out_dir, foggy, clear, steps) -> None:
    """Train the foggy <-> clear translation model."""
    from .training.trainer import train_transfer

    run = build_config(config_path, seed, no_da, out_dir, da_foggy=foggy, da_clear=clear, transfer_steps=steps)
    result = train_transfer(run)
    click.echo(str(result.checkpoint))


@cli.command('finetune')
@run_options
@click.option('--seg-ckpt', type=click.Path(path_type=Path), required=True)
@click.option('--da-ckpt', type=click.Path(path_type=Path), default=None)
@click.option('--freeze-generator/--train-generator', default=None,
              help='Keep gen_xy fixed during fine-tuning (default: config value).')
@click.option('--luminance-source', type=click.Choice(['corrected', 'foggy']), default=None)
@click.option('--epochs', type=int, default=None, help='Overrides finetune_epochs.')
def finetune(config_path, seed, no_da, out_dir, seg_ckpt, da_ckpt, freeze_generator, luminance_source,
             epochs) -> None:
    """Jointly fine-tune translation and segmentation on foggy scenes."""
    from .training.trainer import finetune_joint

    run = build_config(config_path, seed, no_da, out_dir, freeze_generator=freeze_generator,
                       luminance_source=luminance_source, finetune_epochs=epochs)
    result = finetune_joint(run, seg_ckpt, da_ckpt if run.use_domain_adaptation else None)
    click.echo(str(result.checkpoint))


@cli.command('eval')
@click.option('--ckpt', type=click.Path(path_type=Path), required=True)
@click.option('--manifest', type=click.Path(path_type=Path), required=True)
@click.option('--transfer-ckpt', type=click.Path(path_type=Path), default=None)
@click.option('--no-da', is_flag=True, default=False, help='Segment without translating.')
@click.option('--out', 'out_dir', type=click.Path(path_type=Path), default=None,
              help='Report directory (default: <ckpt dir>/eval).')
@click.option('--save-predictions', type=click.Path(path_type=Path), default=None,
              help='Write palette PNGs of the predictions here.')
@click.option('--batch-size', type=int, default=None)
@click.option('--config', 'config_path', type=click.Path(path_type=Path), default=None,
              help='Run config; its architecture must match the checkpoint.')
@click.option('--seed', type=int, default=None, help='Run seed.')
def evaluate_cmd(ckpt, manifest, transfer_ckpt, no_da, out_dir, save_predictions, batch_size, config_path,
                 seed) -> None:
    """Score a checkpoint on a manifest and write the metric report."""
    from .training.trainer import evaluate

    out_dir = out_dir or Path(ckpt).parent / 'eval'
    run = build_config(config_path, seed, no_da, None) if config_path else None
    result = evaluate(ckpt, manifest, transfer_ckpt=transfer_ckpt, use_da=False if no_da else None,
                      out_dir=out_dir, save_predictions=save_predictions, batch_size=batch_size, run=run,
                      seed=seed)
    click.echo(f"global_acc={result.global_acc:.6f}")
    click.echo(f"class_avg={result.class_avg:.6f}")
    click.echo(f"miou={result.miou:.6f}")
    click.echo(f"report={result.report_path}")


@cli.command('translate')
@click.option('--ckpt', type=click.Path(path_type=Path), required=True, help='Transfer or joint checkpoint.')
@click.argument('input_path', type=click.Path(path_type=Path, exists=True, dir_okay=False))
@click.argument('output_path', type=click.Path(path_type=Path, dir_okay=False))
def translate(ckpt, input_path, output_path) -> None:
    """Translate one foggy image into its corrected counterpart."""
    from .training.trainer import translate_file

    click.echo(str(translate_file(ckpt, input_path, output_path)))


@cli.command('gradcheck')
@click.option('--params', 'show_params', is_flag=True, default=False,
              help='Print the default network parameter count and exit.')
@click.option('--step', 'h', type=float, default=1e-3, show_default=True)
@click.option('--tol', type=float, default=1e-4, show_default=True)
@click.option('--ops-only', is_flag=True, default=False, help='Skip the composite blocks.')
@click.option('--seed', type=int, default=0, show_default=True)
def gradcheck(show_params, h, tol, ops_only, seed) -> None:
    """Run the finite-difference gradient suite; exits 2 if any check fails."""
    if show_params:
        from .nn.segnet import param_report

        report = param_report()
        click.echo(f"param_count={report['param_count']}")
        click.echo(f"reference={report['reference']}")
        click.echo(f"deviation={report['deviation']:+.4f}")
        for prefix, count in report['per_module'].items():
            click.echo(f"{prefix}={count}")
        return

    from .core.gradcheck import run_gradcheck_suite

    results = run_gradcheck_suite(h, tol, seed, blocks=not ops_only)
    for r in results:
        click.echo(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<30} {r.max_error:.3e} "
                   f"checked={r.checked} skipped={r.skipped}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradcheckError(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")


@cli.command('logs')
@click.argument('logfile', type=click.Path(path_type=Path, exists=True, dir_okay=False))
@click.option('-l', '--level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']), default=None)
@click.option('-o', '--operation', default=None)
@click.option('-f', '--filter', 'text', default=None)
@click.option('--no-color', is_flag=True, default=False)
def logs(logfile, level, operation, text, no_color) -> None:
    """Pretty-print a JSON run log."""
    from .utils.logviewer import filter_entries, format_log_entry

    with open(logfile, 'r', encoding='utf-8') as f:
        for line in filter_entries(f, level, text, operation):
            click.echo(format_log_entry(line, color=not no_color))

# ----------------------------------------------------------------------------------------------------------


def main(argv: Optional[List[str]] = None) -> int:
    try:
        result = cli.main(args=argv, prog_name='fogseg', standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except FogSegError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True, extra={"operation": "cli", "status": "error"})
        click.echo(f"error: {e}", err=True)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True, extra={"operation": "cli", "status": "error"})
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    return result if isinstance(result, int) else 0


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
