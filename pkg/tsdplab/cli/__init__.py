"""
Command-line interface for tsdplab.

This module provides the main CLI entry point and the command structure of
the TEE-shielded DNN partition laboratory.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- main(argv): Main CLI entry point - parses arguments and dispatches commands
- create_parser(): Create and configure the argument parser

DISPLAY/PRINTING FUNCTIONS (External API):
-----------------------------------------
- print_success(message, use_rich): Print success message with optional rich formatting
- print_error(message, use_rich): Print error message with optional rich formatting
- print_warning(message, use_rich): Print warning message with optional rich formatting
- print_info(message, use_rich): Print info message with optional rich formatting
- create_progress_bar(description): Spinner for long-running operations
- display_cost_rich(cost, title): CostReport table
- display_attack_report_rich(report): Seven metrics plus utility of one cell

COMMAND FUNCTIONS (Internal Implementation):
-------------------------------------------
- cmd_datagen(args, use_rich): Generate a synthetic dataset file
- cmd_train(args, use_rich): Train or fine-tune a toy CNN
- cmd_partition(args, use_rich): Build a partition plan and its cost
- cmd_attack(args, use_rich): Evaluate one (scheme, config, seed) cell
- cmd_teeslice(args, use_rich): Train, prune and deploy a TEESlice hybrid
- cmd_sweep(args, use_rich): Sweet-spot search for one scheme
- cmd_report(args, use_rich): Render and export a report matrix
- cmd_shadownet_attack(args, use_rich): ShadowNet recovery benchmark
- cmd_offload_demo(args, use_rich): Masked or plain offload of a toy CNN
- cmd_run(args, use_rich): Full experiment from a config file
- cmd_schema(args, use_rich): Print a configuration JSON schema
- cmd_manpage(args, use_rich): Print the roff manual page
"""

import argparse
import dataclasses
import json
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from tsdplab import __version__
from tsdplab.core.attacks import ASSUMPTIONS, METRICS, AttackReport
from tsdplab.core.flops import CostReport
from tsdplab.core.partition import SCHEMES
from tsdplab.utils.logging import create_error_context, logger, safe_execute

# Global console for rich output
console = Console()


def print_success(message: str, use_rich: bool = False) -> None:
    """Print success message with optional rich formatting."""
    if use_rich:
        console.print(f"✅ {message}", style="green")
    else:
        print(f"SUCCESS: {message}")


def print_error(message: str, use_rich: bool = False) -> None:
    """Print error message with optional rich formatting."""
    if use_rich:
        console.print(f"❌ {message}", style="red")
    else:
        print(f"ERROR: {message}")


def print_warning(message: str, use_rich: bool = False) -> None:
    """Print warning message with optional rich formatting."""
    if use_rich:
        console.print(f"⚠️  {message}", style="yellow")
    else:
        print(f"WARNING: {message}")


def print_info(message: str, use_rich: bool = False) -> None:
    """Print info message with optional rich formatting."""
    if use_rich:
        console.print(f"ℹ️  {message}", style="blue")
    else:
        print(f"INFO: {message}")


def create_progress_bar(description: str = "Processing") -> Progress:
    """Create a spinner for operations whose length is not known up front."""
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    )


def display_cost_rich(cost: CostReport, title: str = "Utility cost") -> None:
    table = Table(title=title)
    table.add_column("Property", style="cyan", no_wrap=True)
    table.add_column("Value", style="magenta")
    table.add_row("FLOPs in TEE", f"{cost.flops_tee:,}")
    table.add_row("FLOPs on GPU", f"{cost.flops_gpu:,}")
    table.add_row("FLOPs total", f"{cost.flops_total:,}")
    table.add_row("% FLOPs in TEE", f"{100 * cost.pct_flops_tee:.2f}%")
    table.add_row("Simulated latency", f"{cost.sim_latency:.4f}")
    console.print(table)


def display_attack_report_rich(report: AttackReport) -> None:
    table = Table(title=f"{report.scheme} [{report.config}] seed={report.seed}")
    table.add_column("Metric", style="cyan", no_wrap=True)
    table.add_column("Value", style="magenta", justify="right")
    for m in METRICS:
        note = f"  ({report.skipped[m]})" if m in report.skipped else ""
        table.add_row(m, f"{report.metric(m):.4f}{note}")
    table.add_row("pct_flops_tee", f"{100 * report.utility.pct_flops_tee:.2f}%")
    table.add_row("queries", str(report.queries))
    console.print(table)
    if report.flags:
        console.print(Panel.fit("\n".join(f"• {f}" for f in report.flags),
                                title="Flags", border_style="yellow"))


def _plain_attack_report(report: AttackReport) -> None:
    print(f"{report.scheme} [{report.config}] seed={report.seed} "
          f"assumption={report.assumption}")
    for m in METRICS:
        print(f"  {m:20s} {report.metric(m):.4f}")
    print(f"  {'pct_flops_tee':20s} {report.utility.pct_flops_tee:.4f}")
    print(f"  {'queries':20s} {report.queries}")
    if report.flags:
        print(f"  flags: {', '.join(report.flags)}")


def parse_config_value(text: Optional[str]) -> Any:
    """Scheme configuration from the command line: int, float or none."""
    if text is None or text.lower() in ("none", "null", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid configuration value: {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}")


def create_parser() -> argparse.ArgumentParser:
    """Create the main argument parser."""
    parser = argparse.ArgumentParser(
        prog="tsdplab",
        description="TEE-shielded DNN partition laboratory - partition, attack "
                    "and cost toy models under shielding schemes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  tsdplab datagen public.tsds --distribution public   # Synthetic dataset
  tsdplab train public.tsds public.tsdm --epochs 20   # Train a toy CNN
  tsdplab partition victim.tsdm --scheme Magnitude --config 0.01
  tsdplab attack --scheme Shallow --config 4 -P       # One attack cell
  tsdplab teeslice --output out/teeslice              # TEESlice pipeline
  tsdplab sweep sweep.json --output out/sweeps        # Sweet-spot search
  tsdplab report out/reports/cells.csv --format excel --output matrix
  tsdplab shadownet-attack --layers 100               # Recovery benchmark
  tsdplab offload-demo --protocol masked              # OTP + Freivalds demo
  tsdplab run experiment.json --workers 4             # Full experiment
  tsdplab schema experiment                           # Print config schema

Debug Options:
  Set TSDPLAB_LOG_LEVEL=DEBUG for detailed logging
  Set TSDPLAB_LOG_LEVEL=INFO for normal operation (default)
  Set TSDPLAB_CACHE_DIR to relocate the cell cache
        """,
    )

    parser.add_argument("--version", action="version", version=f"tsdplab v{__version__}")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    parser.add_argument(
        "--progress",
        "-P",
        action="store_true",
        help="Show progress bars and rich output",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Datagen command
    datagen_parser = subparsers.add_parser("datagen", help="Generate a synthetic dataset")
    datagen_parser.add_argument("output", help="Dataset file to write (.tsds)")
    datagen_parser.add_argument(
        "--distribution", choices=["public", "private"], default="public",
        help="Template family (default: public)",
    )
    datagen_parser.add_argument("--n-classes", type=int, default=4, help="Classes (default: 4)")
    datagen_parser.add_argument(
        "--per-class", type=int, default=64, help="Samples per class (default: 64)"
    )
    datagen_parser.add_argument("--side", type=int, default=12, help="Image side (default: 12)")
    datagen_parser.add_argument("--channels", type=int, default=1, help="Channels (default: 1)")
    datagen_parser.add_argument(
        "--noise", type=float, default=0.1, help="Pixel noise std (default: 0.1)"
    )
    datagen_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")

    # Train command
    train_parser = subparsers.add_parser("train", help="Train or fine-tune a toy CNN")
    train_parser.add_argument("dataset", help="Labelled dataset file")
    train_parser.add_argument("output", help="Model file to write")
    train_parser.add_argument(
        "--widths", type=_int_list, default=[8, 16, 16],
        help="Conv widths, comma-separated (default: 8,16,16)",
    )
    train_parser.add_argument(
        "--pool-after", type=_int_list, default=[1],
        help="Blocks followed by 2x2 pooling (default: 1)",
    )
    train_parser.add_argument("--epochs", type=int, default=20, help="Epochs (default: 20)")
    train_parser.add_argument(
        "--lr", type=float, default=0.05, help="Learning rate (default: 0.05)"
    )
    train_parser.add_argument("--batch-size", type=int, default=32, help="Batch (default: 32)")
    train_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    train_parser.add_argument("--init", help="Model file to fine-tune instead of a fresh CNN")

    # Partition command
    partition_parser = subparsers.add_parser(
        "partition", help="Build a partition plan for a saved model"
    )
    partition_parser.add_argument("model", help="Model file (hybrid file for TeeSlice)")
    partition_parser.add_argument("--scheme", choices=SCHEMES, required=True)
    partition_parser.add_argument(
        "--config", type=parse_config_value, default=None,
        help="Scheme configuration (default: representative value)",
    )
    partition_parser.add_argument("--backbone", help="Public model file (Ennclave)")
    partition_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    partition_parser.add_argument("--output", "-o", help="Plan JSON file (default: stdout)")

    # Attack command
    attack_parser = subparsers.add_parser("attack", help="Evaluate one attack cell")
    attack_parser.add_argument("--experiment", "-e", help="Experiment config for lab sizes")
    attack_parser.add_argument("--scheme", choices=SCHEMES, required=True)
    attack_parser.add_argument("--config", type=parse_config_value, default=None)
    attack_parser.add_argument(
        "--assumption", choices=ASSUMPTIONS, default="HybridKnown",
        help="Attacker knowledge for TeeSlice (default: HybridKnown)",
    )
    attack_parser.add_argument("--budget", type=int, help="Query budget override")
    attack_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    attack_parser.add_argument("--output", "-o", help="AttackReport JSON file")

    # TEESlice command
    teeslice_parser = subparsers.add_parser(
        "teeslice", help="Train, prune and deploy a TEESlice hybrid"
    )
    teeslice_parser.add_argument("--experiment", "-e", help="Experiment config for lab sizes")
    teeslice_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    teeslice_parser.add_argument("--output", "-o", required=True, help="Output directory")

    # Sweep command
    sweep_parser = subparsers.add_parser("sweep", help="Sweet-spot search for one scheme")
    sweep_parser.add_argument("definition", help="Sweep definition JSON")
    sweep_parser.add_argument("--experiment", "-e", help="Experiment config for lab sizes")
    sweep_parser.add_argument("--metric", choices=METRICS, help="Override the governing metric")
    sweep_parser.add_argument("--delta", type=float, help="Override the security tolerance")
    sweep_parser.add_argument("--workers", type=int, default=1, help="Parallel cells (default: 1)")
    sweep_parser.add_argument("--seed", type=int, default=0, help="Lab seed (default: 0)")
    sweep_parser.add_argument("--output", "-o", help="Directory for sweep JSON and frontier CSV")

    # Report command
    report_parser = subparsers.add_parser("report", help="Render a metric x scheme matrix")
    report_parser.add_argument("reports", help="Cells CSV written by run or sweep")
    report_parser.add_argument(
        "--format", "-f", choices=["csv", "jsonl", "sqlite", "excel"],
        help="Also export the rows in this format",
    )
    report_parser.add_argument("--output", "-o", help="Export file (default: next to input)")
    report_parser.add_argument(
        "--relative", action="store_true", help="Show ms_accuracy relative to BlackBox"
    )

    # ShadowNet attack command
    shadow_parser = subparsers.add_parser(
        "shadownet-attack", help="Recover weights from obfuscated synthetic layers"
    )
    shadow_parser.add_argument("--layers", type=int, default=100, help="Layers (default: 100)")
    shadow_parser.add_argument("--c-out", type=int, default=8, help="Filters (default: 8)")
    shadow_parser.add_argument("--c-in", type=int, default=4, help="Input channels (default: 4)")
    shadow_parser.add_argument("--kernel", type=int, default=3, help="Kernel size (default: 3)")
    shadow_parser.add_argument("--r", type=float, default=1.2, help="Expansion (default: 1.2)")
    shadow_parser.add_argument(
        "--threshold", type=float, default=0.01, help="Variance threshold (default: 0.01)"
    )
    shadow_parser.add_argument(
        "--mode", choices=["greedy", "hungarian"], default="greedy",
        help="Position recovery (default: greedy)",
    )
    shadow_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    shadow_parser.add_argument("--output", "-o", help="Summary JSON file")

    # Offload demo command
    offload_parser = subparsers.add_parser(
        "offload-demo", help="Execute a toy CNN with plain or masked offload"
    )
    offload_parser.add_argument(
        "--protocol", choices=["plain", "masked"], default="masked",
        help="Offload protocol (default: masked)",
    )
    offload_parser.add_argument("--scheme", choices=SCHEMES, default="Deep")
    offload_parser.add_argument("--config", type=parse_config_value, default=None)
    offload_parser.add_argument("--batch", type=int, default=4, help="Inputs (default: 4)")
    offload_parser.add_argument(
        "--rounds", type=int, default=1, help="Freivalds rounds (default: 1)"
    )
    offload_parser.add_argument(
        "--corrupt", action="store_true", help="Let the GPU tamper with its results"
    )
    offload_parser.add_argument("--verify-log", help="Write the verify log as JSON lines")
    offload_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")

    # Run command
    run_parser = subparsers.add_parser("run", help="Run a full experiment from a config")
    run_parser.add_argument("config", help="Experiment config JSON")
    run_parser.add_argument("--workers", type=int, help="Parallel cells (default: from config)")

    # Schema command
    schema_parser = subparsers.add_parser("schema", help="Print a configuration JSON schema")
    schema_parser.add_argument(
        "which", choices=["experiment", "sweep"], nargs="?", default="experiment"
    )

    # Manpage command
    manpage_parser = subparsers.add_parser("manpage", help="Print the roff manual page")
    manpage_parser.add_argument("--output", "-o", help="File to write (default: stdout)")

    return parser


COMMANDS: Dict[str, Callable[..., int]] = {}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = create_parser()
    args = parser.parse_args(argv)

    # Setup logging level
    if args.debug or os.environ.get("TSDPLAB_LOG_LEVEL", "").upper() == "DEBUG":
        logger.set_level("DEBUG")
    else:
        logger.set_level(os.environ.get("TSDPLAB_LOG_LEVEL", "INFO").upper())

    use_rich = getattr(args, "progress", False)

    if use_rich:
        console.print(
            "[bold blue]tsdplab[/bold blue] - TEE-shielded DNN partition laboratory",
            style="bold",
        )
        console.print(f"Version {__version__} | Rich output enabled", style="dim")
    else:
        logger.debug("tsdplab starting")

    if not args.command:
        if use_rich:
            console.print("[red]No command specified. Use --help for usage information.[/red]")
        else:
            parser.print_help()
        return 1

    handler = COMMANDS.get(args.command)
    if handler is None:
        print(f"Unknown command: {args.command}", file=sys.stderr)
        return 1

    context = create_error_context(
        args.command, vars(args), file_path=getattr(args, "output", None),
        operation=handler.__name__,
    )
    try:
        _, exit_code = safe_execute(handler, context, args, use_rich)
    except KeyboardInterrupt:
        if use_rich:
            console.print("\n[yellow]Operation cancelled by user[/yellow]")
        else:
            logger.info("Operation cancelled by user")
        return 130

    if use_rich:
        if exit_code == 0:
            console.print("\n[green]✓ Operation completed successfully[/green]")
        else:
            console.print(f"\n[red]✗ Operation failed with exit code {exit_code}[/red]")
    else:
        logger.debug(f"tsdplab finished with exit code: {exit_code}")
    return int(exit_code)


def _emit_json(data: Any, output: Optional[str]) -> None:
    text = json.dumps(data, indent=2, default=str)
    if output:
        with open(output, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def cmd_datagen(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle datagen command."""
    from tsdplab.cli.experiment import generate_dataset

    path = generate_dataset(args.output, args.distribution, args.n_classes, args.per_class,
                            args.side, args.channels, args.noise, args.seed)
    print_success(f"Dataset written to: {path}", use_rich)
    return 0


def cmd_train(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle train command."""
    from tsdplab.cli.experiment import train_model

    path, acc = train_model(args.dataset, args.output, widths=args.widths,
                            pool_after=args.pool_after, epochs=args.epochs,
                            learning_rate=args.lr, batch_size=args.batch_size,
                            seed=args.seed, init=args.init, progress=use_rich)
    print_success(f"Model written to: {path} (train accuracy {acc:.4f})", use_rich)
    return 0


def cmd_partition(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle partition command."""
    from tsdplab.cli.experiment import partition_model

    plan, cost = partition_model(args.model, args.scheme, args.config, args.seed,
                                 output=args.output, backbone=args.backbone)
    if use_rich:
        display_cost_rich(cost, title=f"{plan.scheme} plan: {len(plan.tee_layers)} TEE layers")
    elif not args.output:
        _emit_json({"plan": plan.to_json(), "cost": cost.to_dict()}, None)
    if args.output:
        print_success(f"Plan written to: {args.output}", use_rich)
    return 0


def cmd_attack(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle attack command."""
    from tsdplab.cli.experiment import attack_cell, load_lab

    if use_rich:
        with create_progress_bar() as progress:
            progress.add_task("Building lab and running the attack...", total=None)
            lab, _ = load_lab(args.experiment, args.seed,
                              with_teeslice=args.scheme == "TeeSlice", budget=args.budget)
            report = attack_cell(lab, args.scheme, args.config, args.seed, args.assumption,
                                 args.output)
        display_attack_report_rich(report)
    else:
        lab, _ = load_lab(args.experiment, args.seed,
                          with_teeslice=args.scheme == "TeeSlice", budget=args.budget)
        report = attack_cell(lab, args.scheme, args.config, args.seed, args.assumption,
                             args.output)
        _plain_attack_report(report)
    return 0


def cmd_teeslice(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle teeslice command."""
    from tsdplab.cli.experiment import load_lab, run_teeslice

    lab, _ = load_lab(args.experiment, args.seed, with_teeslice=True, progress=use_rich)
    paths = run_teeslice(lab, args.output)
    hybrid = lab.hybrid
    assert hybrid is not None
    if hybrid.pruning_failed:
        print_warning("No pruning round met the accuracy tolerance; deployed the dense model",
                      use_rich)
    if use_rich:
        table = Table(title="TEESlice pruning log")
        for col in ("round", "acc", "stored", "pruned", "slices left", "% FLOPs TEE"):
            table.add_column(col)
        for row in hybrid.prune_log:
            table.add_row(str(row.round), f"{row.acc:.4f}", str(row.stored),
                          ", ".join(row.pruned), str(row.slices_remaining),
                          f"{100 * row.pct_flops_tee:.2f}%")
        console.print(table)
    print_info(f"Victim accuracy {lab.victim_acc:.4f}; {len(hybrid.slices)} slices deployed",
               use_rich)
    for name, path in paths.items():
        print_success(f"{name}: {path}", use_rich)
    return 0


def cmd_sweep(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle sweep command."""
    from tsdplab.cli.experiment import load_lab, run_sweep
    from tsdplab.utils.config import load_sweep_definition

    definition = load_sweep_definition(args.definition)
    overrides = {k: v for k, v in (("metric", args.metric), ("delta", args.delta))
                 if v is not None}
    definition = dataclasses.replace(definition, **overrides)
    lab, _ = load_lab(args.experiment, args.seed,
                      with_teeslice=definition.scheme == "TeeSlice", progress=use_rich)
    result = run_sweep(definition, lab, args.output, workers=args.workers)

    if use_rich:
        table = Table(title=f"{result.scheme} sweep ({result.metric}, delta={result.delta})")
        table.add_column("config")
        table.add_column("% FLOPs TEE", justify="right")
        table.add_column(result.metric, justify="right")
        for i, (config, report) in enumerate(result.cells):
            style = "bold green" if i == result.chosen_index else None
            table.add_row(str(config), f"{100 * report.utility.pct_flops_tee:.2f}%",
                          f"{report.metric(result.metric):.4f}", style=style)
        console.print(table)
    else:
        for config, report in result.cells:
            print(f"{str(config):>8}  {report.utility.pct_flops_tee:.4f}  "
                  f"{report.metric(result.metric):.4f}")
    print_info(f"BlackBox {result.metric}: {result.security_black[result.metric]:.4f}",
               use_rich)
    if result.chosen_index is None:
        print_warning("No configuration satisfies the security requirement", use_rich)
    else:
        print_success(f"Sweet spot: {result.chosen}", use_rich)
    for key, message in result.failures.items():
        print_error(f"{key}: {message}", use_rich)
    return 1 if result.failures else 0


def cmd_report(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle report command."""
    from tsdplab.cli.report import (
        build_matrix,
        read_reports_csv,
        render_matrix_rich,
        render_matrix_text,
    )

    rows = read_reports_csv(args.reports)
    matrix = build_matrix(rows)
    if use_rich:
        console.print(render_matrix_rich(matrix))
    else:
        print(render_matrix_text(matrix))

    if args.relative:
        black = [r["ms_accuracy"] for r in rows if r["scheme"] == "BlackBox"]
        if not black:
            print_warning("No BlackBox rows; relative values unavailable", use_rich)
        else:
            denom = sum(black) / len(black)
            for col in matrix.columns:
                value = matrix.get("ms_accuracy", col)
                if value is not None and denom:
                    print(f"{col:>24}  {value / denom:.3f}x")

    if args.format:
        from tsdplab.cli.export import export_reports

        output = args.output or os.path.splitext(args.reports)[0] + "_export"
        path = export_reports(rows, args.format, output, matrix=matrix)
        print_success(f"Exported to: {path}", use_rich)
    return 0


def cmd_shadownet_attack(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle shadownet-attack command."""
    from tsdplab.cli.demos import shadownet_benchmark

    summary = shadownet_benchmark(n_layers=args.layers, c_out=args.c_out, c_in=args.c_in,
                                  k=args.kernel, r=args.r, threshold=args.threshold,
                                  mode=args.mode, seed=args.seed)
    data = summary.to_dict()
    if use_rich:
        table = Table(title="ShadowNet recovery")
        table.add_column("Property", style="cyan")
        table.add_column("Value", style="magenta", justify="right")
        for key, value in data.items():
            table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
        console.print(table)
    if args.output or not use_rich:
        _emit_json(data, args.output)
    return 0


def cmd_offload_demo(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle offload-demo command."""
    from tsdplab.cli.demos import offload_demo

    result = offload_demo(protocol=args.protocol.upper(), scheme=args.scheme,
                          config=args.config, seed=args.seed, batch=args.batch,
                          rounds=args.rounds, corrupt=args.corrupt,
                          verify_log=args.verify_log)
    if use_rich:
        display_cost_rich(CostReport.from_dict(result["cost"]),
                          title=f"{result['scheme']} under {result['protocol']}")
        print_info(f"{result['verified_products']} offloaded products verified", use_rich)
        if "bit_identical_to_quantized" in result:
            if result["bit_identical_to_quantized"]:
                print_success("Masked output is bit-identical to quantized execution", use_rich)
            else:
                print_error("Masked output differs from quantized execution", use_rich)
                return 1
    else:
        _emit_json(result, None)
    return 0


def cmd_run(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle run command."""
    from tsdplab.cli.experiment import run_experiment
    from tsdplab.utils.config import load_experiment_config

    cfg = load_experiment_config(args.config)
    status, summary = run_experiment(cfg, workers=args.workers, progress=use_rich)
    if use_rich:
        table = Table(title=f"Experiment {cfg.name}")
        table.add_column("Scheme", style="cyan")
        table.add_column("Cells", justify="right")
        table.add_column("Sweet spot", justify="right")
        for scheme, info in summary["sweeps"].items():
            table.add_row(scheme, str(info["cells"]), str(info["chosen"]))
        console.print(table)
    else:
        _emit_json(summary, None)
    for key, message in summary["failures"].items():
        print_error(f"{key}: {message}", use_rich)
    if status == 0:
        print_success(f"Artifacts written to: {cfg.output_dir}", use_rich)
    return status


def cmd_schema(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle schema command."""
    from tsdplab.utils.config import EXPERIMENT_SCHEMA, SWEEP_SCHEMA

    _emit_json(EXPERIMENT_SCHEMA if args.which == "experiment" else SWEEP_SCHEMA, None)
    return 0


def cmd_manpage(args: argparse.Namespace, use_rich: bool = False) -> int:
    """Handle manpage command."""
    from tsdplab.cli.manpage import render_manpage

    text = render_manpage(create_parser(), __version__)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text)
        print_success(f"Manual page written to: {args.output}", use_rich)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS.update({
    "datagen": cmd_datagen,
    "train": cmd_train,
    "partition": cmd_partition,
    "attack": cmd_attack,
    "teeslice": cmd_teeslice,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "shadownet-attack": cmd_shadownet_attack,
    "offload-demo": cmd_offload_demo,
    "run": cmd_run,
    "schema": cmd_schema,
    "manpage": cmd_manpage,
})


if __name__ == "__main__":
    sys.exit(main())
