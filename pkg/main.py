import argparse
import logging
import sys
from typing import Optional, Sequence

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from errors import ContractError, FedPlantError
import experiments

console = Console()
err_console = Console(stderr=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Federated learning across chemical plants with secure aggregation."
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity (stderr).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Write synthetic plant CSV files.")
    gen.add_argument("--config", default=None, help="INI experiment config.")
    gen.add_argument("--out", required=True, help="Output directory.")
    gen.add_argument("--seed", type=int, default=None, help="Generator seed (default master_seed).")

    run = sub.add_parser("run", help="Run one training paradigm.")
    run.add_argument("--mode", required=True, choices=experiments.MODES)
    run.add_argument("--config", default=None)
    run.add_argument("--data", required=True, help="Directory with plant_<name>.csv files.")
    run.add_argument("--out", required=True)
    run.add_argument(
        "--endpoint",
        default=None,
        help="Federated transport: inproc:<name> (default) or host:port for loopback TCP.",
    )

    cmp = sub.add_parser("compare", help="Merge the three paradigm runs into a report.")
    cmp.add_argument("--runs", nargs="+", required=True)
    cmp.add_argument("--out", required=True, help="report.json path.")
    cmp.add_argument("--table", required=True, help="table.csv path.")

    srv = sub.add_parser("serve", help="Host the coordinator for remote plants.")
    srv.add_argument("--config", default=None)
    srv.add_argument("--listen", required=True, help="host:port (port 0 picks a free port).")
    srv.add_argument("--out", default="runs/federated")
    srv.add_argument(
        "--fingerprint",
        action="append",
        default=[],
        metavar="NAME=SHA256",
        help="sha256 of a plant's CSV; give one per plant so compare can check the data.",
    )

    cli = sub.add_parser("client", help="Join a federation as one plant.")
    cli.add_argument("--config", default=None)
    cli.add_argument("--plant", required=True, help="Plant name or numeric id.")
    cli.add_argument("--data", required=True, help="The plant's CSV file.")
    cli.add_argument("--connect", required=True, help="Coordinator host:port.")
    cli.add_argument("--out", default=None, help="Directory for this plant's predictions.")
    return parser


def _print_report(report: dict) -> None:
    table = Table(title="Test MSE per paradigm")
    for column in ("Plant", "Centralized", "Federated", "Local-only", "Improvement %"):
        table.add_column(column)
    paradigms = report["paradigms"]
    for name, pct in report["improvement_pct"].items():
        table.add_row(
            name,
            f"{paradigms['centralized'][name]['mse']:.3f}",
            f"{paradigms['federated'][name]['mse']:.3f}",
            f"{paradigms['local'][name]['mse']:.3f}",
            "n/a" if pct is None else f"{pct:.1f}",
        )
    console.print(table)


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "generate":
        for path in experiments.cmd_generate(args.config, args.out, args.seed):
            console.print(f"[green]wrote[/] {path}")
    elif args.command == "run":
        path = experiments.cmd_run(args.mode, args.config, args.data, args.out, args.endpoint)
        console.print(f"[green]{args.mode} run complete[/] → {path}")
    elif args.command == "compare":
        _print_report(experiments.cmd_compare(args.runs, args.out, args.table))
    elif args.command == "serve":
        path = experiments.cmd_serve(
            args.config,
            args.listen,
            args.out,
            on_listening=lambda ep: console.print(f"[cyan]listening on {ep}[/]"),
            fingerprints=args.fingerprint,
        )
        console.print(f"[green]federation complete[/] → {path}")
    elif args.command == "client":
        rounds = experiments.cmd_client(
            args.config, args.plant, args.data, args.connect, args.out
        )
        console.print(f"[green]plant {args.plant} done[/] after {rounds} rounds")


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
    )
    try:
        dispatch(args)
    except FedPlantError as e:
        err_console.print(f"[red]Error:[/] {e}")
        return e.exit_code
    except ContractError as e:
        err_console.print(f"[red]Error:[/] {e}")
        return 1
    except KeyboardInterrupt:
        err_console.print("[yellow]interrupted[/]")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
