"""Command-line entry point.

Commands mirror the experiment lifecycle:
    synth   generate the synthetic dataset declared in the config
    train   run one training stage (segnet -> flow-pretrain -> dmnet -> joint)
    infer   scheduled whole-clip inference with predictions on disk
    eval    pda | cca | false-correction | flops | upper-bound reports
    plot    SVG charts from the eval CSVs

Exit codes: 0 success, 2 config error, 3 missing prerequisite,
4 data integrity error.
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click

from . import plots, runner
from .checkpoints import STAGE_ORDER
from .config import ABLATIONS, RunConfig, load_config, write_effective_config
from .data.clips import SegDataset
from .data.synthetic import generate_synthetic_dataset
from .errors import ConfigError, DataIntegrityError, FlowsegError, MissingPrerequisiteError
from .evaluation import mean_cost
from .training import train_stage

EXIT_CODES = {ConfigError: 2, MissingPrerequisiteError: 3, DataIntegrityError: 4}


def _exit_code(exc: FlowsegError) -> int:
    for klass, code in EXIT_CODES.items():
        if isinstance(exc, klass):
            return code
    return 1


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FlowsegError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))

    return wrapper


def common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="JSON run configuration")(fn)
    fn = click.option("--seed", type=int, default=None, help="override config seed")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None,
                      help="override the output root")(fn)
    fn = click.option("--jobs", type=int, default=1, show_default=True,
                      help="parallel clips during inference/evaluation")(fn)
    return fn


def _load(config_path: str, seed: int | None) -> RunConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
        cfg.data.synth.seed = seed
    return cfg


def _workspace(cfg: RunConfig, out_dir: str | None) -> Path:
    root = Path(out_dir) if out_dir else Path(cfg.out_root)
    root.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, root)
    return root


def _dataset(cfg: RunConfig) -> SegDataset:
    root = Path(cfg.data.root)
    if not (root / "manifest.json").is_file():
        raise MissingPrerequisiteError(
            f"no dataset manifest under {root}; run `flowseg synth` first"
        )
    return SegDataset(root)


@click.group()
def main() -> None:
    """Flow-propagated video segmentation with distortion-aware correction."""


@main.command()
@common_options
@click.option("--force", is_flag=True, help="overwrite a non-empty dataset directory")
@handle_errors
def synth(config_path, seed, out_dir, jobs, force) -> None:
    """Generate the synthetic dataset declared in the config."""
    cfg = _load(config_path, seed)
    dest = Path(out_dir) if out_dir else Path(cfg.data.root)
    manifest = generate_synthetic_dataset(
        cfg.data.synth, dest, mean=cfg.data.mean, std=cfg.data.std, force=force
    )
    write_effective_config(cfg, dest)
    click.echo(f"wrote {len(manifest['clips'])} clips to {dest}")


@main.command()
@click.argument("stage", type=click.Choice(STAGE_ORDER))
@common_options
@click.option("--ablate", type=click.Choice(ABLATIONS), default="none", show_default=True,
              help="joint-stage ablation switch")
@handle_errors
def train(stage, config_path, seed, out_dir, jobs, ablate) -> None:
    """Run one training stage; stages depend on their predecessors."""
    cfg = _load(config_path, seed)
    workspace = _workspace(cfg, out_dir)
    dataset = _dataset(cfg)
    result = train_stage(stage, dataset, workspace, cfg, ablation=ablate)
    click.echo(f"stage {stage}: {result.steps} steps, checkpoint {result.checkpoint}")
    for key, value in result.summary.items():
        if isinstance(value, float):
            click.echo(f"  {key}: {value:.4f}")


@main.command()
@common_options
@click.option("--clips", default="val", show_default=True,
              help="'train', 'val', or comma-separated clip ids")
@click.option("--interval", type=int, default=None, help="key-frame interval")
@click.option("--mode", type=click.Choice(("full", "prop-only", "naive")), default="full",
              show_default=True)
@click.option("--oracle", is_flag=True, help="upper-bound mode (needs labels)")
@click.option("--dump-intermediates", is_flag=True,
              help="also write distortion maps and propagated argmaxes")
@handle_errors
def infer(config_path, seed, out_dir, jobs, clips, interval, mode, oracle,
          dump_intermediates) -> None:
    """Segment whole clips under the key-frame schedule."""
    cfg = _load(config_path, seed)
    workspace = _workspace(cfg, out_dir)
    dataset = _dataset(cfg)
    nets = runner.load_inference_nets(cfg, dataset, workspace)
    clip_ids = dataset.clip_ids(clips) if clips in ("train", "val") else clips.split(",")
    known = set(dataset.clip_ids())
    unknown = [c for c in clip_ids if c not in known]
    if unknown:
        raise DataIntegrityError(f"unknown clip ids {unknown}")
    pred_root = workspace / "pred"
    runner.infer_clips(
        dataset, nets, pred_root, clip_ids,
        interval=interval or cfg.interval,
        mode="oracle" if oracle else mode,
        emit_intermediates=dump_intermediates,
        jobs=jobs,
    )
    click.echo(f"wrote predictions for {len(clip_ids)} clips to {pred_root}")


@main.command("eval")
@click.argument("kind", type=click.Choice(("pda", "cca", "false-correction", "flops", "upper-bound")))
@common_options
@handle_errors
def eval_cmd(kind, config_path, seed, out_dir, jobs) -> None:
    """Emit one family of evaluation reports under <out>/eval/."""
    cfg = _load(config_path, seed)
    workspace = _workspace(cfg, out_dir)
    dataset = _dataset(cfg)
    eval_dir = workspace / "eval"
    distances = cfg.evaluation.distances
    eval_frame = cfg.evaluation.eval_frame

    if kind == "flops":
        # cost depends on the architecture alone; no checkpoints needed
        from .networks import build_networks

        nets = build_networks(cfg.networks, dataset.num_classes).eval_all()
        model = runner.eval_flops(dataset, nets, eval_dir)
        click.echo(f"c_seg  = {model.c_seg / 1e9:.6f} GFLOPs")
        click.echo(f"c_warp = {model.c_warp / 1e9:.6f} GFLOPs")
        click.echo(f"wrote {eval_dir / 'flops.json'}")
        return

    nets = runner.load_inference_nets(cfg, dataset, workspace)
    if kind == "pda":
        sweeps = runner.eval_pda(dataset, nets, eval_dir, distances, eval_frame, jobs)
        for mode, sweep in sweeps.items():
            click.echo(f"{mode}: mean mIoU over distances = {sweep.mean_miou:.4f}")
        click.echo(f"wrote {eval_dir / 'pda.csv'} and pda_prop_only.csv")
    elif kind == "cca":
        model = runner.eval_cca(dataset, nets, eval_dir, distances)
        for d in distances:
            click.echo(f"distance {d}: {mean_cost(model, d) / 1e9:.6f} GFLOPs/frame")
        click.echo(f"wrote {eval_dir / 'cca.csv'}")
    elif kind == "false-correction":
        stats = runner.eval_false_correction(dataset, nets, eval_dir, distances,
                                             eval_frame, jobs)
        for mode, s in stats.items():
            click.echo(f"{mode}: wrong={s.wrong_rectified} right={s.right_rectified} "
                       f"ratio={s.ratio}")
        click.echo(f"wrote {eval_dir / 'false_correction.csv'}")
    else:  # upper-bound
        sweeps = runner.eval_upper_bound(dataset, nets, eval_dir, distances,
                                         eval_frame, jobs)
        click.echo(f"oracle mean mIoU    = {sweeps['oracle'].mean_miou:.4f}")
        click.echo(f"predicted mean mIoU = {sweeps['full'].mean_miou:.4f}")
        click.echo(f"wrote {eval_dir / 'pda_oracle.csv'}")


@main.command()
@common_options
@handle_errors
def plot(config_path, seed, out_dir, jobs) -> None:
    """Render SVG charts from whatever eval CSVs exist."""
    cfg = _load(config_path, seed)
    workspace = _workspace(cfg, out_dir)
    written = plots.plot_all(workspace / "eval")
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
