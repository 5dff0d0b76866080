"""senseflow command line: simulate, estimate, correct and evaluate runs."""

from __future__ import annotations

import logging
import sys
from argparse import ArgumentParser, Namespace
from pathlib import Path

import psutil
from rich.console import Console
from rich.logging import RichHandler
from scipy import fft

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import SenseflowError
from .gradients import fd_check
from .models import Axis, DeformationField
from .pipeline import Run, write_comparison
from .render import gradcheck_table, metrics_table
from .rng import Rng

logger = logging.getLogger("senseflow")

RUN_LOG = "run.log"
GRADCHECK_TOL = 1e-4
GRADCHECK_OFFSET = 0.3   # px, keeps target coordinates inside grid cells


def _default_threads() -> int:
    return psutil.cpu_count(logical=False) or 1


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="senseflow", description="Motion estimation and correction for radial SENSE MRI")
    parser.add_argument("--version", action="version", version=f"senseflow {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="FFT worker threads (default: physical cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-iteration diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesise a dataset from a config file")
    p.add_argument("config", type=Path)
    p.add_argument("--sampling", choices=["dfft", "nufft"], help="operator path")

    p = sub.add_parser("estimate", help="per-excitation reconstructions and first motion estimate")
    p.add_argument("run", type=Path)

    p = sub.add_parser("correct", help="multilevel motion correction")
    p.add_argument("run", type=Path)
    _correct_flags(p)

    p = sub.add_parser("reconstruct", help="static, estimated and final reconstructions")
    p.add_argument("run", type=Path)
    _recon_flags(p)

    p = sub.add_parser("evaluate", help="metrics table and PNG panels")
    p.add_argument("run", type=Path)

    p = sub.add_parser("pipeline", help="run every stage from a config file")
    p.add_argument("config", type=Path)
    p.add_argument("--sampling", choices=["dfft", "nufft"], help="operator path")
    _correct_flags(p)
    _recon_flags(p)

    p = sub.add_parser("report", help="merge the reports of several runs")
    p.add_argument("runs", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=Path("."), help="directory for the merged report")

    p = sub.add_parser("gradcheck", help="finite-difference check of the deformation gradient")
    p.add_argument("run", type=Path)
    p.add_argument("--pixels", type=int, default=20, help="random pixels per axis")
    p.add_argument("--step", type=float, default=1e-3, help="finite-difference step, px")
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    return parser


def _correct_flags(p: ArgumentParser) -> None:
    p.add_argument("--levels", type=int, help="coarsest correction level L")
    p.add_argument("--iters", type=int, help="correction rounds per level")
    p.add_argument("--projector", choices=["spline", "identity"])
    p.add_argument("--baseline", choices=["rigid"], help="also run the rigid Gauss-Newton baseline")


def _recon_flags(p: ArgumentParser) -> None:
    p.add_argument("--cg-iters", type=int, help="CG iterations")
    p.add_argument("--tv-lambda", type=float, help="TV weight of the final reconstruction")
    p.add_argument("--positivity", choices=["on", "off"])


def _overrides(args: Namespace) -> dict:
    mapping = {
        "sampling": "sampling",
        "levels": "correct.levels",
        "iters": "correct.n_iter",
        "projector": "projector",
        "cg_iters": "recon.n_cg",
        "tv_lambda": "recon.tv_lambda",
    }
    out = {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}
    if getattr(args, "positivity", None) is not None:
        out["recon.positivity"] = args.positivity == "on"
    return out


def setup_logging(verbose: bool, run_dir: Path | None = None) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        if isinstance(handler, logging.FileHandler):
            handler.close()
    root.setLevel(logging.DEBUG)
    console = RichHandler(console=Console(stderr=True), show_path=False)
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(console)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(run_dir / RUN_LOG)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(file_handler)


def _new_run(args: Namespace) -> Run:
    config: ExperimentConfig = load_config(args.config)
    overrides = _overrides(args)
    if overrides:
        config = config.replace(**overrides)
    return Run(config)


def _gradcheck(run: Run, args: Namespace) -> bool:
    problem = run.problem
    U = run.dataset.U_ref
    last = problem.n_exc - 1
    d_x, d_y = U[last].displacement
    shifted = DeformationField.from_displacement(problem.grid, d_x + GRADCHECK_OFFSET, d_y + GRADCHECK_OFFSET)
    U = U.replace(last, shifted)
    gen = Rng(run.config.seed).generator("gradcheck")
    n = problem.grid.n
    results = []
    for axis in Axis:
        for j, k in gen.integers(1, n - 1, size=(args.pixels, 2)):
            error = fd_check(problem, U, run.dataset.s_ref, (int(j), int(k)), axis, args.step)
            results.append(((int(j), int(k)), axis.value, error, error <= args.tol))
    Console().print(gradcheck_table(results))
    passed = all(r[3] for r in results)
    logger.info("gradient check: %d/%d pixels within %.0e", sum(r[3] for r in results), len(results), args.tol)
    return passed


def dispatch(args: Namespace) -> int:
    console = Console()
    if args.command == "report":
        args.out.mkdir(parents=True, exist_ok=True)
        console.print(write_comparison(args.runs, args.out), markup=False, highlight=False)
        return 0

    if args.command in ("simulate", "pipeline"):
        run = _new_run(args)
    else:
        run = Run.open(args.run, **_overrides(args))
    setup_logging(args.verbose, run.run_dir)
    logger.info("run directory %s", run.run_dir)

    if args.command == "simulate":
        run.simulate()
    elif args.command == "estimate":
        run.per_excitation()
        run.estimate()
    elif args.command == "correct":
        if getattr(args, "baseline", None) == "rigid":
            run.rigid()
        run.correct()
    elif args.command == "reconstruct":
        run.reconstruct()
    elif args.command == "evaluate":
        console.print(metrics_table(run.evaluate(), title=run.config.name))
    elif args.command == "pipeline":
        console.print(metrics_table(run.run_all(args.baseline), title=run.config.name))
    elif args.command == "gradcheck":
        return 0 if _gradcheck(run, args) else 1
    return 0


def main(argv: list[str] | None = None) -> None:
    """Entry point for the senseflow CLI."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    threads = args.threads or _default_threads()
    try:
        with fft.set_workers(threads):
            code = dispatch(args)
    except SenseflowError as exc:
        logger.error("%s", exc)
        code = exc.exit_code
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        code = 3
    sys.exit(code)


if __name__ == "__main__":
    main()
