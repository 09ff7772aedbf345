"""Command-line entry points.

Exit codes: 0 success, 1 config/usage error, 2 data error, 3 runtime
failure (e.g. non-finite loss).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import engine, report as report_mod
from .config import apply_overrides, load_config, preset, save_config
from .data import export_voc_style, generate_synthetic
from .errors import ConfigError, DataError, DivergenceError


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="YAML config file.")(fn)
    fn = click.option("--preset", "preset_name",
                      type=click.Choice(["voc-paper", "coco-paper", "desk-synth"]),
                      default=None, help="Named base configuration.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Dotted-path config override (repeatable).")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), required=True,
                      help="Output directory.")(fn)
    return fn


def _build_config(config_path, preset_name, overrides):
    if config_path and preset_name:
        raise ConfigError("--config and --preset are mutually exclusive")
    if config_path:
        cfg = load_config(config_path)
    else:
        cfg = preset(preset_name or "desk-synth")
    cfg = apply_overrides(cfg, list(overrides))
    return cfg


@click.group()
def cli():
    """Two-branch weakly supervised segmentation."""


@cli.command()
@_common
@click.option("--resume", type=click.Path(), default=None,
              help="Checkpoint to continue from.")
def train(config_path, preset_name, overrides, out_dir, resume):
    """Run the staged training loop."""
    cfg = _build_config(config_path, preset_name, overrides)
    engine.train(cfg, out_dir, resume=resume, quiet=False)
    click.echo(f"done; logs and checkpoint in {out_dir}")


def _eval_command(which, config_path, preset_name, overrides, out_dir, checkpoint):
    cfg = _build_config(config_path, preset_name, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    state = engine.checkpoint_load(checkpoint, cfg)
    _, val_recs = engine.load_split(cfg)
    export_dir = out / f"masks_{which}" if cfg.eval.export_masks else None
    rep = engine.evaluate(state.bundle, val_recs, cfg, which, export_dir=export_dir)
    (out / f"{which}_report.txt").write_text("\n".join(rep.lines()) + "\n")
    click.echo(f"{which} mIoU: {100 * rep.miou:.2f}%")


@cli.command("eval")
@_common
@click.option("--checkpoint", type=click.Path(), required=True)
def eval_cmd(config_path, preset_name, overrides, out_dir, checkpoint):
    """Evaluate the segmentation branch (multi-scale/flip fusion)."""
    _eval_command("seg", config_path, preset_name, overrides, out_dir, checkpoint)


@cli.command("seed-eval")
@_common
@click.option("--checkpoint", type=click.Path(), required=True)
def seed_eval_cmd(config_path, preset_name, overrides, out_dir, checkpoint):
    """Evaluate the classification branch's propagated seed map."""
    _eval_command("seed", config_path, preset_name, overrides, out_dir, checkpoint)


@cli.command("synth-gen")
@_common
def synth_gen(config_path, preset_name, overrides, out_dir):
    """Materialize the synthetic dataset to the on-disk layout."""
    cfg = _build_config(config_path, preset_name, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    train_recs, val_recs = generate_synthetic(cfg.data.synthetic)
    export_voc_style(train_recs, out / "train")
    export_voc_style(val_recs, out / "val")
    click.echo(f"wrote {len(train_recs)} train / {len(val_recs)} val samples to {out}")


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), required=True)
def report_cmd(run_dirs, out_dir):
    """Render loss/mIoU curves and an ablation table from run logs."""
    for rd in run_dirs:
        if not Path(rd).is_dir():
            raise DataError(f"run directory not found: {rd}")
    files = report_mod.render_curves(run_dirs, out_dir)
    table = report_mod.ablation_table(run_dirs, out_dir)
    click.echo("wrote " + ", ".join(str(p) for p in [*files, table]))
    click.echo((Path(out_dir) / "ablation.txt").read_text().rstrip())


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except (ConfigError, click.UsageError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except (DivergenceError, RuntimeError) as exc:
        click.echo(f"runtime error: {exc}", err=True)
        return 3
    except click.exceptions.Exit as exc:
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
