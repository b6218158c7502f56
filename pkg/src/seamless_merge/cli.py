import typer
from pathlib import Path
from typing import List, Optional
try:
    from importlib.metadata import version
except ImportError:
    from importlib_metadata import version

import numpy as np

from .cascade import ExecutionMode, MergeConfig, MergeEvent, merge as run_merge
from .errors import (
    ConvergenceFailure, DisconnectedPartitionGraph, InvalidConfig, MergeError, error_payload
)
from .formats import read_partition, read_table, read_truth, write_dataset, write_grid, write_report, write_scene
from .graph import LaplacianCache
from .points import MergedDataset, point_ids
from .synth import SceneConfig, generate_scene, score, truth_from_table
from .util import (
    setup_logging, logging, init_console,
    print_json, print_success, print_error, rich_enabled
)
from . import util

app = typer.Typer(help="Seam-free merging of overlapping point datasets", add_completion=False)

EXIT_THRESHOLD = 4

HINTS = {
    DisconnectedPartitionGraph: "Every partition must share points with the rest; check the listed components.",
    ConvergenceFailure: "Raise --max-iter or loosen --tol.",
}


def version_callback(value: bool):
    if value:
        try:
            v = version("seamless-merge")
        except Exception:
            v = "unknown"
        typer.echo(f"seamless-merge v{v} - Made by OrygnsCode")
        raise typer.Exit()


@app.callback()
def main_callback(
    version: Optional[bool] = typer.Option(
        None, "--version", callback=version_callback, is_eager=True, help="Show version."
    )
):
    pass


def _fail(err: MergeError, json_mode: bool):
    if json_mode:
        print_json(error_payload(err))
    else:
        print_error(str(err), HINTS.get(type(err)))
    raise typer.Exit(code=err.exit_code)


def _fail_runtime(err: Exception, json_mode: bool):
    if json_mode:
        print_json({"error": str(err), "stage": None, "exit_code": 1})
    else:
        print_error(f"Runtime Error: {err}")
    raise typer.Exit(code=1)


def _render_event(event: MergeEvent):
    if not (rich_enabled() and util.console):
        return
    if event.kind == "round_start":
        util.console.log(f"[info]Correction round at overlap degree {event.degree}[/info]")
    elif event.kind == "stage_end":
        util.console.log(f"[info]{event.stage}[/info] finished in {event.message}")


def _parse_tiles(text: str):
    try:
        nx, ny = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InvalidConfig(f"Tile grid must look like 3x2, got '{text}'")
    return nx, ny


@app.command()
def merge(
    inputs: List[Path] = typer.Argument(..., help="Partition files (.csv text, anything else binary)"),
    output: Path = typer.Option(Path("merged.csv"), "--output", "-o", help="Merged dataset output"),
    report: Optional[Path] = typer.Option(None, help="Write the seam report (key=value lines)"),
    grid_out: Optional[Path] = typer.Option(None, help="Write a raster of the result (.pgm or ASCII grid)"),
    grid_size: int = typer.Option(256, help="Raster cells along the longer side"),
    tol: float = typer.Option(1e-8, help="Relative residual tolerance of the Dirichlet solves"),
    max_iter: Optional[int] = typer.Option(None, help="CG iteration cap per solve (default 10x interior size)"),
    mode: ExecutionMode = typer.Option(ExecutionMode.SEQUENTIAL, help="Execution mode"),
    weight_pairs: bool = typer.Option(False, help="Weight offset rows by sqrt(overlap size)"),
    quantize: Optional[float] = typer.Option(None, help="Snap coordinates to this grid before matching"),
    max_edge_length: Optional[float] = typer.Option(None, help="Drop Delaunay edges longer than this"),
    edge_weighting: str = typer.Option("none", help="Laplacian edge weights: none, inverse-distance"),
    cache_dir: Optional[Path] = typer.Option(None, help="Directory for cached Laplacians"),
    workers: Optional[int] = typer.Option(None, help="Worker threads for the parallel modes"),
    offsets_only: bool = typer.Option(False, help="Stop after the constant-offset step"),
    stop_after: Optional[str] = typer.Option(
        None, help="Write an intermediate product: raw, offsets, or the round of this overlap degree"
    ),

    # Modes
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Minimal output"),
    json_mode: bool = typer.Option(False, "--json", help="Output JSON only"),
    debug: bool = typer.Option(False, help="Enable debug logging")
):
    """
    Merge overlapping partition files into one dataset.
    """
    init_console(quiet=quiet, json_mode=json_mode)
    setup_logging(debug)

    try:
        if rich_enabled() and util.console:
            util.console.rule("[bold cyan]Seamless Merge[/bold cyan]")

        partitions = []
        for k, path in enumerate(inputs):
            try:
                partitions.append(read_partition(path, k + 1))
            except MergeError as e:
                e.stage = e.stage or "read"
                e.message = f"{path}: {e.message}" if str(path) not in e.message else e.message
                raise

        config = MergeConfig(
            tolerance=tol,
            max_iterations=max_iter,
            weight_pairs=weight_pairs,
            mode=mode,
            workers=workers,
            quantum=quantize,
            max_edge_length=max_edge_length,
            edge_weighting=edge_weighting,
            offsets_only=offsets_only,
            stop_after=stop_after,
        )
        cache = LaplacianCache(cache_dir) if cache_dir else None
        dataset, seams = run_merge(partitions, config, cache=cache, on_event=_render_event)

        output.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(output, dataset)
        if report:
            write_report(report, seams.to_lines())
        if grid_out:
            write_grid(grid_out, dataset.points, dataset.values, grid_size)

        result = {
            "output": str(output),
            "report": str(report) if report else None,
            "grid": str(grid_out) if grid_out else None,
            "points": len(dataset),
            "seams": seams.to_dict(),
        }

        if json_mode:
            print_json(result)
        elif quiet:
            print(result["output"])
        else:
            from rich.table import Table

            table = Table(title="Merge Summary", show_header=True, header_style="bold magenta")
            table.add_column("Property", style="cyan")
            table.add_column("Value", style="green")

            table.add_row("Partitions", str(seams.partitions))
            table.add_row("Merged Points", str(len(dataset)))
            table.add_row("Extra Memberships", str(seams.extra_memberships))
            table.add_row("Max Overlap Degree", str(seams.max_degree))
            table.add_row("Correction Rounds", ", ".join(str(d) for d in seams.round_degrees) or "none")
            table.add_row("Seam Before", f"{seams.offset_max:.3e}")
            table.add_row("Seam After", f"{seams.final_max_disagreement:.3e}")

            if rich_enabled() and util.console:
                util.console.print(table)
            print_success(f"Merged dataset written: {output}")

    except typer.Exit:
        raise
    except MergeError as e:
        _fail(e, json_mode)
    except Exception as e:
        logging.debug("Unexpected failure", exc_info=True)
        _fail_runtime(e, json_mode)


@app.command()
def synth(
    out: Path = typer.Option(Path("scene"), "--out", "-o", help="Output directory"),
    tiles: str = typer.Option("3x2", help="Tile grid, e.g. 3x2"),
    points: int = typer.Option(6000, help="Total number of points"),
    seed: int = typer.Option(0, help="Random seed"),
    overlap: float = typer.Option(0.25, help="Fractional tile overlap in (0, 0.5]"),
    truth: str = typer.Option("gaussian-bumps", help="Truth model: gaussian-bumps, polynomial, plane"),
    artifact: str = typer.Option("constant-plus-smooth", help="Artifact model: constant, constant-plus-smooth"),
    scale: float = typer.Option(5.0, help="Artifact amplitude"),
    layout: str = typer.Option("grid", help="Tile layout: grid, brick"),
    binary: bool = typer.Option(False, help="Write binary partition files instead of CSV"),

    quiet: bool = typer.Option(False, "--quiet", "-q", help="Minimal output"),
    json_mode: bool = typer.Option(False, "--json", help="Output JSON only"),
    debug: bool = typer.Option(False, help="Enable debug logging")
):
    """
    Generate a synthetic scene: partition files plus a truth file.
    """
    init_console(quiet=quiet, json_mode=json_mode)
    setup_logging(debug)

    try:
        config = SceneConfig(
            seed=seed,
            point_count=points,
            tile_grid=_parse_tiles(tiles),
            overlap_fraction=overlap,
            truth_model=truth,
            artifact_model=artifact,
            artifact_scale=scale,
            layout=layout,
        )
        partitions, scene_truth = generate_scene(config)
        scene = write_scene(out, partitions, scene_truth, config.to_dict(), binary=binary)
        result = {"directory": str(out), **scene}

        if json_mode:
            print_json(result)
        elif quiet:
            print(str(out))
        else:
            from rich.table import Table

            table = Table(title="Synthetic Scene", show_header=True, header_style="bold magenta")
            table.add_column("Partition", style="cyan")
            table.add_column("Points", style="green")
            table.add_column("Injected Offset", style="green")
            for name, size, offset in zip(scene["partitions"], scene["partition_sizes"],
                                          scene["injected_offsets"].values()):
                table.add_row(name, str(size), f"{offset:+.4f}")

            if rich_enabled() and util.console:
                util.console.print(table)
            print_success(
                f"Scene written to {out}: {scene['points']} points, "
                f"{scene['extra_memberships']} extra memberships"
            )

    except typer.Exit:
        raise
    except MergeError as e:
        _fail(e, json_mode)
    except Exception as e:
        _fail_runtime(e, json_mode)


@app.command()
def validate(
    merged: Path = typer.Argument(..., help="Merged dataset file"),
    truth: Path = typer.Argument(..., help="truth.csv written by synth"),
    max_rmse: float = typer.Option(1e-6, help="Gauge-fixed RMSE threshold"),
    max_error: float = typer.Option(1e-6, help="Gauge-fixed max-error threshold"),
    max_seam: Optional[float] = typer.Option(None, help="Seam metric threshold"),

    quiet: bool = typer.Option(False, "--quiet", "-q", help="Minimal output"),
    json_mode: bool = typer.Option(False, "--json", help="Output JSON only"),
    debug: bool = typer.Option(False, help="Enable debug logging")
):
    """
    Score a merged dataset against a synthetic truth file.
    """
    init_console(quiet=quiet, json_mode=json_mode)
    setup_logging(debug)

    try:
        table = read_table(merged)
        dataset = MergedDataset(
            global_ids=point_ids(table[:, :2]),
            points=table[:, :2],
            values=table[:, 2],
            provenance=np.ones(table.shape[0], dtype=np.int64),
        )
        record = score(dataset, truth_from_table(*read_truth(truth)))
        passed = record.passes(max_rmse, max_error, max_seam)
        result = {**record.to_dict(), "passed": passed}

        if json_mode:
            print_json(result)
        elif quiet:
            print("OK" if passed else "FAIL")
        else:
            from rich.table import Table

            summary = Table(title="Validation", show_header=True, header_style="bold magenta")
            summary.add_column("Metric", style="cyan")
            summary.add_column("Value", style="green")
            summary.add_column("Threshold", style="yellow")
            summary.add_row("RMSE (gauge-fixed)", f"{record.rmse:.3e}", f"{max_rmse:.1e}")
            summary.add_row("Max Error (gauge-fixed)", f"{record.max_error:.3e}", f"{max_error:.1e}")
            summary.add_row("Seam Metric", f"{record.seam_metric:.4g}",
                            f"{max_seam:.4g}" if max_seam is not None else "-")
            summary.add_row("Truth Seam Metric", f"{record.truth_seam_metric:.4g}", "-")
            summary.add_row("Gauge Constant", f"{record.gauge_constant:+.6g}", "-")

            if rich_enabled() and util.console:
                util.console.print(summary)
            if passed:
                print_success("Merged dataset within thresholds")
            else:
                print_error("Merged dataset exceeds thresholds")

        if not passed:
            raise typer.Exit(code=EXIT_THRESHOLD)

    except typer.Exit:
        raise
    except MergeError as e:
        _fail(e, json_mode)
    except Exception as e:
        _fail_runtime(e, json_mode)


def main():
    app()


if __name__ == "__main__":
    main()
