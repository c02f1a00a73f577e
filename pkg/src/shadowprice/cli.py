"""``shadowprice`` command line.

Exit codes: 0 valid certificate, 2 certificate with failed checks, 3 solver
error, 1 unreadable or invalid market file.  With several files the largest
code wins.
"""

from __future__ import annotations

import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor

import click
import numpy as np

from .cps import certify
from .errors import MarketFileError, SolverError
from .instances import random_market
from .marketfile import load_market
from .report import build_report, error_report, render_structured, render_text, report_document
from .solver import SolverOptions

EXIT_VALID, EXIT_PARSE, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2, 3


def run(path: str, tol: float = 1e-9, oracle: bool = False):
    """Certify one market file; returns ``(exit_code, Report)``."""
    try:
        market, digest = load_market(path)
    except MarketFileError as exc:
        return EXIT_PARSE, error_report("", tol, EXIT_PARSE, f"parse error at {exc}")
    try:
        cert = certify(market, SolverOptions(tol=tol), oracle=oracle)
    except SolverError as exc:
        return EXIT_SOLVER, error_report(digest, tol, EXIT_SOLVER, f"{type(exc).__name__}: {exc}")
    code = EXIT_VALID if cert.valid else EXIT_INVALID
    return code, build_report(cert, digest, tol, code)


def _run_args(args):
    return run(*args)


@click.group()
def main():
    """Shadow prices for markets with proportional transaction costs."""


@main.command("certify")
@click.argument("files", nargs=-1, required=True, type=click.Path())
@click.option("--tol", default=1e-9, show_default=True, type=float, help="KKT residual tolerance.")
@click.option("--oracle", is_flag=True, help="Also compare with the grid-search value (small trees only).")
@click.option("--format", "fmt", type=click.Choice(["text", "structured"]), default="text", show_default=True)
@click.option("--batch", is_flag=True, help="Certify the files in parallel worker processes.")
@click.option("--workers", type=int, default=None, help="Worker count for --batch.")
def certify_cmd(files, tol, oracle, fmt, batch, workers):
    """Solve, extract the shadow price and check it for every FILE."""
    if not tol > 0:
        raise click.BadParameter("must be positive", param_hint="--tol")
    jobs = [(f, tol, oracle) for f in files]
    if batch and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_args, jobs))
    else:
        results = [run(*j) for j in jobs]
    if fmt == "structured":
        if len(results) == 1:
            click.echo(render_structured(results[0][1]), nl=False)
        else:
            docs = [{"file": f, **report_document(r)} for f, (_, r) in zip(files, results)]
            click.echo(json.dumps(docs, indent=2, sort_keys=True, allow_nan=False))
    else:
        for f, (code, rep) in zip(files, results):
            click.echo(render_text(rep, f), nl=False)
    for f, (code, rep) in zip(files, results):
        if code in (EXIT_PARSE, EXIT_SOLVER):
            click.echo(f"{f}: {rep.error}", err=True)
    sys.exit(max(code for code, _ in results))


@main.command("selftest")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--count", default=20, show_default=True, type=int)
@click.option("--tol", default=1e-9, show_default=True, type=float)
def selftest_cmd(seed, count, tol):
    """Certify COUNT random arbitrage-free markets drawn from SEED."""
    rng = np.random.default_rng(seed)
    worst = EXIT_VALID
    digest = hashlib.sha256()
    for k in range(count):
        market = random_market(rng)
        try:
            cert = certify(market, SolverOptions(tol=tol))
        except SolverError as exc:
            click.echo(f"{k:4d}  solver error: {exc}")
            worst = max(worst, EXIT_SOLVER)
            continue
        status = "valid" if cert.valid else "INVALID " + ",".join(cert.failing)
        digest.update(f"{cert.value_costs:.12g}".encode())
        click.echo(f"{k:4d}  T={market.tree.horizon} d={market.d} atoms={market.tree.n_atoms:<4d} "
                   f"value={cert.value_costs:<14.8g} {status}")
        if not cert.valid:
            worst = max(worst, EXIT_INVALID)
    click.echo(f"values digest {digest.hexdigest()[:16]}")
    sys.exit(worst)


if __name__ == "__main__":
    main()
