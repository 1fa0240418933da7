"""Command-line entry point: train, prune, make-student, distill, eval, verify, report."""
import functools
import logging
from dataclasses import asdict
from pathlib import Path

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from prunedistill import pipeline
from prunedistill.checkpoint import load_checkpoint
from prunedistill.config import PipelineConfig, load_config
from prunedistill.data import load_dataset
from prunedistill.errors import VERIFY_FAILED_EXIT_CODE, ConfigError, PruneDistillError
from prunedistill.pruning import METHODS
from prunedistill.tensor import PRECISIONS, set_precision
from prunedistill.verify import run_verification, write_results

log = logging.getLogger("prunedistill")
console = Console()


def setup_logging(verbosity: int) -> None:
    level = {-1: logging.WARNING, 0: logging.INFO}.get(verbosity, logging.DEBUG)
    log.handlers.clear()
    log.addHandler(RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=True))
    log.setLevel(level)
    log.propagate = False


def exits_on_error(fn):
    """Map library exceptions to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PruneDistillError as err:
            log.error("%s: %s", type(err).__name__, err)
            raise SystemExit(err.exit_code) from None

    return wrapper


def _config(path, seed=None) -> PipelineConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _out(cfg: PipelineConfig, out, command: str) -> Path:
    return Path(out) if out else Path(cfg.out) / command


def _table(title: str, rows: list[dict]) -> Table:
    table = Table(title=title)
    if not rows:
        return table
    for column in rows[0]:
        table.add_column(str(column))
    for row in rows:
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row.values()))
    return table


config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Pipeline config (JSON)."
)
seed_option = click.option("--seed", type=int, default=None, help="Override the config seed.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")


@click.group()
@click.option("-v", "--verbose", count=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Warnings only, no progress bars.")
@click.option("--precision", type=click.Choice(sorted(PRECISIONS)), default="f32", show_default=True)
@click.option("--deterministic", is_flag=True, help="Single-threaded BLAS (applied at startup).")
@click.pass_context
def cli(ctx, verbose, quiet, precision, deterministic):
    """Prune a trained network, derive a student from its sparsity, distill into it."""
    setup_logging(-1 if quiet else verbose)
    set_precision(precision)
    ctx.obj = {"quiet": quiet, "deterministic": deterministic}
    if deterministic:
        log.debug("deterministic mode: one BLAS thread")


@cli.command()
@config_option
@seed_option
@out_option
@click.pass_context
@exits_on_error
def train(ctx, config_path, seed, out):
    """Train the teacher."""
    cfg = _config(config_path, seed)
    pipeline.run_train(cfg, _out(cfg, out, "train"), ctx.obj["quiet"])


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--teacher", type=click.Path(dir_okay=False), required=True, help="Checkpoint to prune.")
@click.option("--target-sparsity", type=float, default=None, help="e.g. 0.36, 0.59, 0.79.")
@click.option("--method", type=click.Choice(METHODS), default=None)
@click.pass_context
@exits_on_error
def prune(ctx, config_path, seed, out, teacher, target_sparsity, method):
    """Prune a checkpoint by the configured schedule or up to --target-sparsity."""
    cfg = _config(config_path, seed)
    pruned = pipeline.run_prune(cfg, teacher, _out(cfg, out, "prune"), target_sparsity, method, ctx.obj["quiet"])
    console.print(f"sparsity {pruned.sparsity:.4f}")


@cli.command("make-student")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@out_option
@exits_on_error
def make_student(checkpoint, out):
    """Derive the student architecture from a pruned checkpoint."""
    out = Path(out) if out else Path(checkpoint).parent
    path = pipeline.run_make_student(checkpoint, out)
    console.print(f"student architecture written to {path}")


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--teacher", type=click.Path(dir_okay=False), required=True, help="Teacher checkpoint.")
@click.option("--student", type=str, default=None, help="Student architecture file or built-in name.")
@click.pass_context
@exits_on_error
def distill(ctx, config_path, seed, out, teacher, student):
    """Distill a (pruned) teacher into a student architecture."""
    cfg = _config(config_path, seed)
    pipeline.run_distill(cfg, teacher, student, _out(cfg, out, "distill"), ctx.obj["quiet"])


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@config_option
@seed_option
@click.option("--teacher", type=click.Path(dir_okay=False), default=None, help="Also report agreement.")
@click.pass_context
@exits_on_error
def eval_cmd(ctx, checkpoint, config_path, seed, teacher):
    """Accuracy of a checkpoint (and agreement with a teacher)."""
    cfg = _config(config_path, seed)
    result = pipeline.run_eval(cfg, checkpoint, teacher)
    console.print(_table(Path(checkpoint).name, [result]))


@cli.command()
@config_option
@out_option
@click.option("--pair", type=(click.Path(dir_okay=False), click.Path(dir_okay=False)), multiple=True,
              help="DENSE PRUNED checkpoints for the smoothness check.")
@click.pass_context
@exits_on_error
def verify(ctx, config_path, out, pair):
    """Run the self-checks; exit 4 if any fails."""
    cfg = _config(config_path)
    pairs = [(load_checkpoint(a), load_checkpoint(b)) for a, b in pair]
    data = load_dataset(cfg.data, split_seed=cfg.seed) if pairs else None
    results = run_verification(pairs, data, cfg.report.smoothness_split)
    path = write_results(results, _out(cfg, out, "verify") / "verify.csv")
    console.print(_table("verification", [asdict(r) for r in results]))
    console.print(f"results written to {path}")
    if not all(r.passed for r in results):
        raise SystemExit(VERIFY_FAILED_EXIT_CODE)


def _parse_seeds(value: str | None):
    if value is None:
        return None
    try:
        return tuple(int(s) for s in value.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds expects a comma-separated list of integers, got {value!r}") from None


@cli.command()
@config_option
@out_option
@click.option("--seeds", type=str, default=None, help="Comma-separated, e.g. 0,1,2.")
@click.option("--plot/--no-plot", default=None, help="Write report.png.")
@click.pass_context
@exits_on_error
def report(ctx, config_path, out, seeds, plot):
    """Multi-seed comparison: scratch vs distilled-from-unpruned vs distilled-from-pruned."""
    cfg = _config(config_path)
    summary = pipeline.run_report(cfg, _out(cfg, out, "report"), _parse_seeds(seeds), plot, ctx.obj["quiet"])
    console.print(_table("summary", summary))


def main() -> None:
    cli(prog_name="prunedistill")
