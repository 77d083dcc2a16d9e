"""Command line: ``python -m fkpm <command>``."""

import csv
import functools
import json
import logging
from pathlib import Path
from typing import List, Optional

import click
import numpy as np

from fkpm.application import model_zoo
from fkpm.application.errors import FKError, InvalidModel
from fkpm.application.experiments import load_config
from fkpm.application.fk_core import load_model
from fkpm.application.services import ParticleService
from fkpm.infrastructure.config import get_settings
from fkpm.infrastructure.database import get_sessionmaker
from fkpm.infrastructure.models import AdditiveSpec, BoundRequest, ProfileDocument

logger = logging.getLogger(__name__)
service = ParticleService()


class DomainError(click.ClickException):
    exit_code = 2


def domain_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FKError as exc:
            raise DomainError(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


def parse_grid(text: str) -> List[float]:
    """``start:stop:step`` (stop included) or a comma-separated list."""
    if ":" in text:
        try:
            start, stop, step = (float(v) for v in text.split(":"))
        except ValueError as exc:
            raise click.BadParameter(f"expected start:stop:step, got {text!r}") from exc
        if step <= 0:
            raise click.BadParameter("grid step must be positive")
        return [float(v) for v in np.round(np.arange(start, stop + step / 2, step), 12)]
    return [float(v) for v in text.split(",") if v.strip()]


@click.group()
def cli():
    """Feynman-Kac particle models: runs, smoothing, analysis and bounds."""
    logging.basicConfig(
        level=get_settings().log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.option("--model", "model_ref", required=True, help="Model JSON file or zoo name")
@click.option("--n-particles", type=click.IntRange(min=1), required=True)
@click.option("--horizon", type=click.IntRange(min=0), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epsilon", type=click.FloatRange(min=0.0), default=None)
@click.option("--retain-genealogy", is_flag=True, help="Keep states for smoothing")
@click.option("--run-dir", type=click.Path(file_okay=False), default=None,
              help="Where trajectory.npz and run.json go (default: <out>_run)")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@domain_errors
def run(model_ref, n_particles, horizon, seed, epsilon, retain_genealogy, run_dir, out):
    """Run the particle model and write per-step estimates."""
    model, result = service.run_model(
        model_ref, n_particles, seed=seed, horizon=horizon, epsilon=epsilon,
        retain_genealogy=retain_genealogy,
    )
    service.write_run_csv(result, out)
    directory = None
    if retain_genealogy:
        directory = Path(run_dir) if run_dir else Path(out).with_name(f"{Path(out).stem}_run")
    db = get_sessionmaker(get_settings().database_url)()
    try:
        summary = service.register_run(db, model, result, seed, epsilon, directory)
    finally:
        db.close()
    if directory is not None:
        service.save_run_dir(model_ref, model, result, seed, epsilon, directory, summary.id)
        click.echo(f"genealogy stored in {directory}")
    click.echo(f"run {summary.id}: log_Z_hat={result.population.log_free_energy:.10g}")


@cli.command()
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--functional", "functional_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="additive.json with component functional names")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@domain_errors
def smooth(run_dir, functional_path, out):
    """Backward-smoothed additive functional of a stored run."""
    try:
        spec = AdditiveSpec.model_validate_json(Path(functional_path).read_text())
    except ValueError as exc:
        raise InvalidModel(f"invalid additive functional file: {exc}") from exc
    values = service.smooth(run_dir, spec)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimate", "N", "horizon", "log_Z_hat", "normalized"])
        writer.writerow(
            [repr(values["estimate"]), values["N"], values["horizon"],
             repr(values["log_Z_hat"]), spec.normalized]
        )
    click.echo(f"smoothed estimate {values['estimate']:.10g}")


@cli.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--horizon", type=click.IntRange(min=0), default=None)
@click.option("--m", type=click.IntRange(min=0), default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@domain_errors
def analyze(model_path, horizon, m, out):
    """Exact contraction profile, certificates and dominance verdicts."""
    doc = service.analyze(load_model(model_path), horizon=horizon, m=m)
    Path(out).write_text(doc.model_dump_json(indent=2))
    for cert in doc.certificates:
        click.echo(f"{cert.kind}: valid={cert.valid} g={cert.g:.6g} chi_m={cert.chi_m:.6g} rho={cert.rho}")


@cli.command()
@click.option("--cert", "cert_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="profile.json written by analyze")
@click.option("--which", type=click.Choice(
    ["marginal", "uniform", "tree", "free-energy", "backward", "uniform-backward"]), required=True)
@click.option("--N", "N", type=click.IntRange(min=1), required=True)
@click.option("--n", "n", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--sigma", type=click.FloatRange(min=0.0), default=1.0, show_default=True)
@click.option("--b-n", type=float, default=None)
@click.option("--x-grid", default="0:5:0.1", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@domain_errors
def bounds(cert_path, which, N, n, sigma, b_n, x_grid, out):
    """Tabulate a concentration bound: columns x, bound, prob_floor."""
    try:
        doc = ProfileDocument.model_validate_json(Path(cert_path).read_text())
    except ValueError as exc:
        raise InvalidModel(f"invalid profile file: {exc}") from exc
    request = BoundRequest(
        which=which, profile=doc, N=N, n=n, sigma=sigma, b_n=b_n, x_grid=parse_grid(x_grid)
    )
    response = service.bound_curve(request)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "bound", "prob_floor"])
        for point in response.points:
            writer.writerow([repr(point.x), repr(point.bound), repr(point.prob_floor)])
    for name, const in response.constants.items():
        logger.info("%s = %.6g (%s)", name, const.value, const.provenance)


@cli.group()
def zoo():
    """Canonical models with reference values."""


@zoo.command("list")
def zoo_list():
    for entry in service.zoo_entries():
        click.echo(f"{entry.name:22s} {entry.oracle:12s} {entry.description}")


@zoo.command("emit")
@click.argument("name")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@domain_errors
def zoo_emit(name, out):
    """Write a finite zoo model and its oracle sidecar."""
    model_path, sidecar = model_zoo.emit(name, out)
    click.echo(f"{model_path}\n{sidecar}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@domain_errors
def experiment(config_path, out):
    """Ensemble, coverage and sweep; exits 1 when a coverage check fails."""
    result = service.experiment(load_config(config_path), out)
    click.echo(f"verdict: {'PASS' if result.verdict else 'FAIL'}")
    if not result.verdict:
        raise SystemExit(1)


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Serve the HTTP API."""
    import uvicorn

    uvicorn.run("fkpm.main:app", host=host, port=port)


def main(argv: Optional[List[str]] = None) -> None:
    cli.main(args=argv, prog_name="fkpm")
