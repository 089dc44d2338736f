import json
import logging
from pathlib import Path
from typing import Optional

import rich
import typer
from rich.logging import RichHandler
from rich.table import Table
from typing_extensions import Annotated

from sls_adapt import __version__, config, service
from sls_adapt.model import AssumptionViolationError
from sls_adapt.polytope import EmptyPolytopeError
from sls_adapt.scenario import (
    ScenarioError,
    chain5_scenario,
    scenario_to_json,
)
from sls_adapt.simulator import RecursiveFeasibilityError
from sls_adapt.synthesis import InfeasibleSynthesisError
from sls_adapt.trace import CorruptTraceError

app = typer.Typer(help="Robust adaptive SLS controllers: simulate, synthesize, audit.")

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_DATA = 4


def _fail(code: int, label: str, error: Exception):
    rich.print(f"[bold red]{label}:[/bold red] {error}")
    raise typer.Exit(code=code)


def _handle(error: Exception):
    """Maps a failure to its exit code; never returns."""
    if isinstance(error, EmptyPolytopeError):
        _fail(EXIT_DATA, "Inconsistent data", error)
    if isinstance(
        error,
        (AssumptionViolationError, RecursiveFeasibilityError, InfeasibleSynthesisError),
    ):
        _fail(EXIT_ASSUMPTION, "Model assumption violated", error)
    if isinstance(error, ScenarioError):
        _fail(EXIT_CONFIG, "Config error", error)
    _fail(EXIT_ERROR, "An unexpected error occurred", error)


def _version_callback(value: bool):
    if value:
        rich.print(f"sls-adapt {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Log every step (DEBUG).")
    ] = False,
    version: Annotated[
        Optional[bool],
        typer.Option(
            "--version", callback=_version_callback, is_eager=True,
            help="Show the version and exit.",
        ),
    ] = None,
):
    """
    Adaptive robust control with System Level Synthesis.
    """
    try:
        level = logging.DEBUG if verbose else config.get_log_level()
    except ValueError as e:
        _fail(EXIT_CONFIG, "Config error", e)
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False)],
        force=True,
    )


def _resolve_runtime(lp_method: Optional[str]):
    try:
        method = (lp_method or config.get_lp_method()).lower()
        if method not in config.LP_METHODS:
            raise ValueError(
                f"--lp-method must be one of {', '.join(config.LP_METHODS)}."
            )
        return method, config.get_workers()
    except ValueError as e:
        _fail(EXIT_CONFIG, "Config error", e)


@app.command(name="run")
def run_command(
    scenario: Annotated[
        str, typer.Option("--scenario", "-s", help="Builtin name or JSON path.")
    ] = "chain5",
    algorithm: Annotated[
        service.Algorithm, typer.Option("--algorithm", "-a", help="central or dlar.")
    ] = service.Algorithm.DLAR,
    seed: Annotated[Optional[int], typer.Option(help="Override the seed.")] = None,
    steps: Annotated[
        Optional[int], typer.Option(help="Override the step count.")
    ] = None,
    out: Annotated[
        Optional[Path],
        typer.Option("--out", "-o", help="Output directory for the trace."),
    ] = None,
    snapshot_period: Annotated[
        Optional[int], typer.Option(help="Polytope snapshot period.")
    ] = None,
    true_alpha: Annotated[
        Optional[str],
        typer.Option(
            "--true-alpha",
            help="'exact' replaces the prior by the true parameters.",
        ),
    ] = None,
    debug_lp: Annotated[
        bool, typer.Option("--debug-lp", help="Dump every LP next to the trace.")
    ] = False,
    lp_method: Annotated[
        Optional[str], typer.Option(help="LP backend: highs or simplex.")
    ] = None,
):
    """
    Simulates a scenario and writes trace.csv, trace.json and summary.json.
    """
    if true_alpha not in (None, "exact"):
        _fail(EXIT_CONFIG, "Config error", ValueError("--true-alpha accepts 'exact'."))
    method, workers = _resolve_runtime(lp_method)
    try:
        run_config = service.RunConfig(
            scenario=scenario,
            output_dir=out,
            algorithm=algorithm,
            seed=seed,
            steps=steps,
            snapshot_period=snapshot_period,
            exact_prior=true_alpha == "exact",
            debug_lp=debug_lp,
            lp_method=method,
            workers=workers,
        )
        outcome = service.execute_run(run_config)
    except Exception as e:
        _handle(e)

    summary = outcome.summary
    table = Table(title=f"{algorithm.value} run, seed {outcome.scenario.seed}")
    table.add_column("quantity")
    table.add_column("value", justify="right")
    table.add_row("steps", str(summary["steps"]))
    table.add_row("initial max λ", f"{summary['initial_lambda']:.4f}")
    final = summary["final_lambda"]
    for k, lam in enumerate(final, start=1):
        label = "final λ" if len(final) == 1 else f"final λ node {k}"
        table.add_row(label, f"{lam:.4f}")
    table.add_row("final μ", f"{summary['final_mu']:.4f}")
    first = summary["first_stable_step"]
    table.add_row("first step with μ < 1", "never" if first is None else str(first))
    table.add_row("max ‖x‖∞", f"{summary['max_state_norm']:.4g}")
    rich.print(table)
    rich.print(f"[bold green]✔ Trace written to:[/bold green] {outcome.directory}")


@app.command(name="synth")
def synth_command(
    scenario: Annotated[
        str, typer.Option("--scenario", "-s", help="Builtin name or JSON path.")
    ] = "chain5",
    algorithm: Annotated[
        service.Algorithm, typer.Option("--algorithm", "-a", help="central or dlar.")
    ] = service.Algorithm.DLAR,
    at: Annotated[
        service.SynthesisPoint,
        typer.Option("--at", help="Synthesize over the prior or at the true point."),
    ] = service.SynthesisPoint.PRIOR,
    lp_method: Annotated[
        Optional[str], typer.Option(help="LP backend: highs or simplex.")
    ] = None,
):
    """
    One synthesis, printing λ, the phase and the LP size of every problem.
    """
    method, workers = _resolve_runtime(lp_method)
    try:
        rows = service.execute_synth(scenario, algorithm, at, method, workers)
    except Exception as e:
        _handle(e)

    table = Table(title=f"{algorithm.value} synthesis at the {at.value}")
    for name in ("problem", "λ", "phase-1 λ", "phase", "vars", "rows", "seconds"):
        table.add_column(name, justify="left" if name == "problem" else "right")
    for row in rows:
        table.add_row(
            row.label,
            f"{row.lambda_:.4f}",
            f"{row.robust_lambda:.4f}",
            row.phase,
            str(row.n_variables),
            str(row.n_constraints),
            f"{row.seconds:.3f}",
        )
    rich.print(table)
    rich.print(f"max λ = {max(r.lambda_ for r in rows):.4f}")


_VERDICT_STYLE = {
    service.Verdict.PASS: "green",
    service.Verdict.FAIL: "bold red",
    service.Verdict.WARN: "yellow",
    service.Verdict.SKIP: "dim",
}


@app.command(name="check")
def check_command(
    run_dir: Annotated[Path, typer.Argument(help="Directory holding trace.csv.")],
):
    """
    Re-validates a trace offline and prints one line per property.
    """
    try:
        report = service.audit_trace(run_dir)
    except (CorruptTraceError, ScenarioError) as e:
        _fail(EXIT_CONFIG, "Corrupt trace", e)
    except Exception as e:
        _fail(EXIT_ERROR, "An unexpected error occurred", e)

    table = Table(title=f"Audit of {run_dir}")
    table.add_column("property")
    table.add_column("kind")
    table.add_column("result")
    table.add_column("detail")
    for prop in report.properties:
        style = _VERDICT_STYLE[prop.verdict]
        table.add_row(
            prop.name,
            "required" if prop.required else "reported",
            f"[{style}]{prop.verdict.value}[/{style}]",
            prop.detail,
        )
    rich.print(table)
    if not report.ok:
        rich.print("[bold red]Required properties failed.[/bold red]")
        raise typer.Exit(code=EXIT_ERROR)
    rich.print("[bold green]✔ All required properties hold.[/bold green]")


@app.command(name="scenario")
def scenario_command(
    out: Annotated[
        Optional[Path],
        typer.Option("--out", "-o", help="Write here instead of stdout."),
    ] = None,
    local_radius: Annotated[
        Optional[int],
        typer.Option(help="Radius of the local and send regions (default: all)."),
    ] = None,
):
    """
    Prints the builtin chain5 scenario as a JSON template.
    """
    try:
        text = json.dumps(
            scenario_to_json(chain5_scenario(local_radius=local_radius)), indent=2
        )
    except Exception as e:
        _handle(e)
    if out is None:
        typer.echo(text)
        return
    out.write_text(text)
    rich.print(f"[bold green]✔ Scenario written to:[/bold green] {out}")
