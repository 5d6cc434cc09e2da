"""Command-line entry point for pdum-kags."""

from __future__ import annotations

import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from . import __version__, utils
from .config import RunConfig, load_config
from .data import AlbumRecord, parse_manifest
from .errors import KagsError
from .gradcheck import run_checks
from .knowledge import load_knowledge_graph
from .metrics import MetricReport, evaluate_stories
from .model import album_attention, album_cams, generate_album, init_model, parameter_summary, prepare_album
from .synth import KNOWLEDGE_FILE, SynthSpec, synthesize_dataset
from .trainer import checkpoint_load, train

try:
    from typer._click.exceptions import UsageError
except ImportError:  # typer releases that depend on click instead of bundling it
    from click.exceptions import UsageError

app = typer.Typer(
    help="Knowledge-enriched visual storytelling: synthesize albums, train, generate and evaluate stories.",
)
console = Console()
err_console = Console(stderr=True)

PROG_NAME = "pdum-kags"
KNOWLEDGE_HELP = f"Knowledge triples (TSV); defaults to {KNOWLEDGE_FILE} next to the manifest."


@contextlib.contextmanager
def _failures() -> Iterator[None]:
    """Report errors on stderr: input problems exit 1, anything unexpected exits 2."""

    try:
        yield
    except (typer.Exit, UsageError):
        raise
    except (KagsError, ValueError, OSError) as exc:
        err_console.print(f"[bold red]error:[/] {escape(str(exc))}")
        raise typer.Exit(code=1)
    except Exception as exc:
        err_console.print(f"[bold red]internal error:[/] {type(exc).__name__}: {escape(str(exc))}")
        raise typer.Exit(code=2)


def _configure_logging(verbose: bool) -> None:
    package = logging.getLogger("pdum.kags")
    for handler in list(package.handlers):
        if isinstance(handler, RichHandler):
            package.removeHandler(handler)
    package.addHandler(RichHandler(console=err_console, show_time=False, show_path=False))
    package.setLevel(logging.DEBUG if verbose else logging.INFO)


def _knowledge_path(knowledge: Optional[Path], manifest: Path) -> Path:
    return knowledge if knowledge is not None else manifest.parent / KNOWLEDGE_FILE


def _base_config(preset: str, config_file: Optional[Path]) -> RunConfig:
    if preset not in ("full", "scaled"):
        raise typer.BadParameter(f"unknown preset {preset!r} (choose 'full' or 'scaled')", param_hint="--preset")
    base = RunConfig() if preset == "full" else RunConfig.scaled()
    return load_config(config_file, base=base) if config_file is not None else base


@app.callback(invoke_without_command=True)
def main_callback(ctx: typer.Context) -> None:
    """Fallback handler when no top-level subcommand is invoked.

    Parameters
    ----------
    ctx : typer.Context
        Current Typer context used to detect whether a subcommand was chosen.

    Raises
    ------
    typer.Exit
        Raised to stop execution after printing the autogenerated help text.
    """
    if ctx.invoked_subcommand is None:
        typer.echo(ctx.get_help())
        raise typer.Exit()


@app.command("version")
def version_command() -> None:
    """Display the CLI version banner."""
    console.print(f"[bold green]{PROG_NAME}[/] CLI\n[bold cyan]version:[/] {__version__}")


@app.command("synth")
def synth_command(
    albums: int = typer.Option(4, "--albums", "-n", help="Number of albums to generate."),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory (manifest, knowledge TSV, features)."),
    seed: int = typer.Option(0, "--seed", help="Seed of the synthetic data stream."),
    images: int = typer.Option(5, "--images", help="Images per album."),
    boxes: int = typer.Option(8, "--boxes", help="Region features per image."),
    grid: int = typer.Option(7, "--grid", help="Side of the square conv feature grid."),
    feature_dim: int = typer.Option(2048, "--feature-dim", help="Channel width of every feature file."),
    references: int = typer.Option(1, "--references", help="Reference stories per album."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug logging."),
) -> None:
    """Write a deterministic synthetic dataset."""

    _configure_logging(verbose)
    with _failures():
        spec = SynthSpec(images, boxes, grid, feature_dim, references)
        dataset = synthesize_dataset(out, albums, seed, spec)
    console.print(f"[bold green]Synthesized {len(dataset.albums)} albums.[/] Manifest: {dataset.manifest}")
    console.print(f"[bold cyan]Knowledge:[/] {dataset.knowledge}")


@app.command("train")
def train_command(
    manifest: Path = typer.Option(..., "--manifest", "-m", help="Album manifest (JSON lines)."),
    knowledge: Optional[Path] = typer.Option(None, "--knowledge", "-k", help=KNOWLEDGE_HELP),
    out: Path = typer.Option(..., "--out", "-o", help="Directory for checkpoints and the training log."),
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="JSON file of config overrides."),
    preset: str = typer.Option("full", "--preset", help="Base configuration: 'full' or 'scaled'."),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override the number of epochs."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the run seed."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug logging."),
) -> None:
    """Train a model from scratch."""

    _configure_logging(verbose)
    with _failures():
        config = _base_config(preset, config_file)
        overrides = {key: value for key, value in (("epochs", epochs), ("seed", seed)) if value is not None}
        config = config.replace(**overrides)
        result = train(config, manifest, _knowledge_path(knowledge, manifest), out)
    console.print(f"[bold green]Training complete.[/] Checkpoint: {result.checkpoint}")
    tail = utils.tail_file(result.log, lines=5)
    if tail:
        console.print("[bold yellow]Log tail:[/]")
        console.print(escape(tail))


@app.command("generate")
def generate_command(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Trained KAGC checkpoint."),
    manifest: Path = typer.Option(..., "--manifest", "-m", help="Albums to narrate."),
    knowledge: Optional[Path] = typer.Option(None, "--knowledge", "-k", help=KNOWLEDGE_HELP),
    out: Path = typer.Option(..., "--out", "-o", help="Predictions file (JSON lines)."),
    beam: int = typer.Option(3, "--beam", "-b", help="Beam size; 1 decodes greedily."),
    attention: Optional[Path] = typer.Option(
        None,
        "--attention",
        help="Also write per-token regional attention weights (JSON lines) to this file.",
    ),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug logging."),
) -> None:
    """Generate one story per album."""

    _configure_logging(verbose)
    with _failures():
        if beam < 1:
            raise typer.BadParameter(f"beam size must be at least 1, got {beam}", param_hint="--beam")
        state = checkpoint_load(checkpoint)
        config, vocab, model = state.config, state.vocab, state.model
        graph = load_knowledge_graph(_knowledge_path(knowledge, manifest))
        albums = parse_manifest(manifest, n_images=config.n_images)
        examples = utils.parallel_map(lambda record: prepare_album(record, graph, vocab, config), albums)
        stories = utils.parallel_map(lambda example: generate_album(model, example, vocab, config, beam=beam), examples)

        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8") as handle:
            for record, hypotheses in zip(albums, stories):
                line = {
                    "album_id": record.album_id,
                    "sentences": [" ".join(vocab.decode(h.tokens)) for h in hypotheses],
                    "log_prob": float(sum(h.log_prob for h in hypotheses)),
                }
                handle.write(json.dumps(line) + "\n")

        if attention is not None:
            attention.parent.mkdir(parents=True, exist_ok=True)
            with attention.open("w", encoding="utf-8") as handle:
                for record, example, hypotheses in zip(albums, examples, stories):
                    traces = album_attention(model, example, vocab, config, [h.tokens for h in hypotheses])
                    for image, h, weights in zip(record.images, hypotheses, traces):
                        line = {
                            "album_id": record.album_id,
                            "image_id": image.image_id,
                            "tokens": [vocab.tokens[t] for t in h.tokens],
                            "weights": weights.tolist(),
                        }
                        handle.write(json.dumps(line) + "\n")
    console.print(f"[bold green]Generated {len(albums)} stories[/] (beam {beam}) -> {out}")


def _report_table(report: MetricReport) -> Table:
    table = Table(title=f"Story metrics ({report.pairs} pairs, x100)")
    for column in ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr"):
        table.add_column(column, justify="right")
    values = report.to_json()
    table.add_row(
        *(f"{values[f'bleu{n}']:.1f}" for n in range(1, 5)),
        "-",
        f"{values['rouge_l']:.1f}",
        f"{values['cider']:.1f}",
    )
    return table


@app.command("eval")
def eval_command(
    predictions: Path = typer.Option(..., "--predictions", "-p", help="Output of the generate command."),
    manifest: Path = typer.Option(..., "--manifest", "-m", help="Manifest holding the reference stories."),
    per_sentence: bool = typer.Option(False, "--per-sentence", help="Score sentences instead of whole stories."),
    json_out: Optional[Path] = typer.Option(
        None,
        "--json",
        help="Also write the scores as JSON to this file; the table is always printed.",
    ),
    images: int = typer.Option(5, "--images", help="Images (sentences) per album in the manifest."),
) -> None:
    """Score predicted stories with BLEU, ROUGE-L and CIDEr-D.

    The scores are printed as a table; pass --json to keep them in a file.
    """

    with _failures():
        report = evaluate_stories(predictions, manifest, per_sentence=per_sentence, n_images=images)
        if json_out is not None:
            json_out.parent.mkdir(parents=True, exist_ok=True)
            json_out.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    console.print(_report_table(report))


@app.command("gradcheck")
def gradcheck_command(
    module: Optional[str] = typer.Option(None, "--module", help="Run a single named check."),
    seed: int = typer.Option(0, "--seed", help="Seed for the random test instances."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug logging."),
) -> None:
    """Compare analytic gradients with central finite differences."""

    _configure_logging(verbose)
    with _failures():
        reports = run_checks([module] if module else None, seed=seed)
    table = Table(title="Gradient checks (float64, step 1e-5)")
    table.add_column("check")
    table.add_column("max rel. error", justify="right")
    table.add_column("elements", justify="right")
    table.add_column("status")
    for report in reports:
        status = "[green]ok[/]" if report.passed else "[bold red]FAILED[/]"
        table.add_row(report.op_name, f"{report.max_rel_error:.2e}", str(report.element_count), status)
    console.print(table)
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        err_console.print(f"[bold red]{len(failed)} check(s) failed:[/] {', '.join(failed)}")
        raise typer.Exit(code=1)


@app.command("cam")
def cam_command(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Trained KAGC checkpoint."),
    manifest: Path = typer.Option(..., "--manifest", "-m", help="Albums to map."),
    knowledge: Optional[Path] = typer.Option(None, "--knowledge", "-k", help=KNOWLEDGE_HELP),
    out: Path = typer.Option(..., "--out", "-o", help="Directory receiving <album>/<image>.csv grids."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug logging."),
) -> None:
    """Export class activation maps as numeric CSV grids."""

    _configure_logging(verbose)
    with _failures():
        state = checkpoint_load(checkpoint)
        config, vocab, model = state.config, state.vocab, state.model
        graph = load_knowledge_graph(_knowledge_path(knowledge, manifest))
        albums = parse_manifest(manifest, n_images=config.n_images)

        def export(record: AlbumRecord) -> int:
            example = prepare_album(record, graph, vocab, config)
            folder = out / record.album_id
            folder.mkdir(parents=True, exist_ok=True)
            for image, grid in zip(record.images, album_cams(model, example, vocab, config)):
                np.savetxt(folder / f"{image.image_id}.csv", grid, fmt="%.6g", delimiter=",")
            return len(record.images)

        written = sum(utils.parallel_map(export, albums))
    console.print(f"[bold green]Wrote {written} activation maps[/] under {out}")


@app.command("summary")
def summary_command(
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="JSON file of config overrides."),
    preset: str = typer.Option("full", "--preset", help="Base configuration: 'full' or 'scaled'."),
    vocab_size: int = typer.Option(9837, "--vocab-size", help="Vocabulary size to size the embeddings with."),
) -> None:
    """Print the parameter count of every model component."""

    with _failures():
        config = _base_config(preset, config_file)
        counts = parameter_summary(init_model(config, vocab_size))
    table = Table(title=f"Parameters (d={config.d_model}, hidden={config.d_hidden}, {config.cca_layers} CCA layers)")
    table.add_column("component")
    table.add_column("parameters", justify="right")
    for name, count in counts.items():
        table.add_row(name, f"{count:,}")
    table.add_row("[bold]total[/]", f"[bold]{sum(counts.values()):,}[/]")
    console.print(table)


def run(argv: Sequence[str] | None = None) -> int:
    """Run the CLI on ``argv`` and return the process exit code.

    Usage errors (unknown subcommands or flags, bad option values) print the
    usage text to stderr and return 1.
    """

    command = typer.main.get_command(app)
    try:
        result = command.main(args=list(argv or []), prog_name=PROG_NAME, standalone_mode=False)
    except UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
