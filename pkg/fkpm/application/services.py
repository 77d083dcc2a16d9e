import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from sqlalchemy.orm import Session

from fkpm.application import concentration_bounds as bounds
from fkpm.application import model_zoo, particle_engine
from fkpm.application.backward_smoother import (
    AdditiveFunctional,
    TrajectoryStore,
    smoothed_additive,
)
from fkpm.application.errors import InvalidCertificate, InvalidModel, NotMixing
from fkpm.application.experiments import ExperimentResult, resolve_model, run_experiment, write_outputs
from fkpm.application.fk_core import FeynmanKacModel
from fkpm.application.semigroup_analysis import (
    ContractionProfile,
    MixingCertificate,
    certify_H0,
    certify_Hm,
    contraction_profile,
    density_ratio_certificate,
    dominance_report,
    profile_rows,
    tau_kappa,
)
from fkpm.infrastructure.config import get_settings
from fkpm.infrastructure.database import RunCatalog
from fkpm.infrastructure.models import (
    AdditiveSpec,
    BoundRequest,
    BoundResponse,
    CertificateRecord,
    ConstantRecord,
    CurvePoint,
    ExperimentConfig,
    ProfileDocument,
    RunMetadata,
    RunSummary,
    ZooEntry,
)

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectory.npz"
METADATA_FILE = "run.json"


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


class ParticleService:
    """Operations shared by the command line and the HTTP routes."""

    # Particle runs

    def run_model(
        self,
        model_ref: str,
        n_particles: int,
        seed: int = 0,
        horizon: Optional[int] = None,
        epsilon: Optional[float] = None,
        retain_genealogy: bool = False,
    ) -> Tuple[FeynmanKacModel, particle_engine.RunResult]:
        model, _ = resolve_model(model_ref)
        result = particle_engine.run(
            model, n_particles, seed, horizon=horizon, epsilon=epsilon,
            retain_genealogy=retain_genealogy,
        )
        return model, result

    def write_run_csv(self, result: particle_engine.RunResult, out: Union[str, Path]) -> Path:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        names = list(result.records[0].eta_hat) if result.records else []
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", *[f"eta_hat_{f}" for f in names], "log_Z_hat", "ess", "wall_ns"])
            for rec in result.records:
                writer.writerow(
                    [rec.step, *[repr(rec.eta_hat[f]) for f in names],
                     repr(rec.log_z_hat), repr(rec.ess), rec.wall_ns]
                )
        return out

    def save_run_dir(
        self,
        model_ref: str,
        model: FeynmanKacModel,
        result: particle_engine.RunResult,
        seed: int,
        epsilon: Optional[float],
        run_dir: Union[str, Path],
        catalog_id: Optional[int] = None,
    ) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        store = TrajectoryStore.from_population(model, result.population)
        store.save(run_dir / TRAJECTORY_FILE)
        ref = str(Path(model_ref).resolve()) if Path(model_ref).is_file() else model_ref
        metadata = RunMetadata(
            model_ref=ref,
            model_spec=model.to_spec() if model.is_finite else None,
            n_particles=result.population.N,
            horizon=result.population.time,
            seed=seed,
            epsilon=epsilon,
            log_z_hat=_finite_or_none(result.population.log_free_energy),
            catalog_id=catalog_id,
        )
        (run_dir / METADATA_FILE).write_text(metadata.model_dump_json(indent=2))
        logger.info("stored genealogy of %s in %s", model.name, run_dir)
        return run_dir

    def register_run(
        self,
        db: Session,
        model: FeynmanKacModel,
        result: particle_engine.RunResult,
        seed: int,
        epsilon: Optional[float],
        run_dir: Optional[Path] = None,
    ) -> RunSummary:
        return RunCatalog(db).register(
            model_name=model.name,
            n_particles=result.population.N,
            horizon=result.population.time,
            seed=seed,
            epsilon=epsilon,
            log_z_hat=_finite_or_none(result.population.log_free_energy),
            run_dir=str(run_dir) if run_dir is not None else None,
        )

    def get_run(self, db: Session, run_id: int) -> Optional[RunSummary]:
        return RunCatalog(db).get(run_id)

    # Smoothing

    def load_store(self, run_dir: Union[str, Path]) -> TrajectoryStore:
        run_dir = Path(run_dir)
        meta_path = run_dir / METADATA_FILE
        if not meta_path.is_file():
            raise InvalidModel(f"{run_dir} has no {METADATA_FILE}; rerun with --retain-genealogy")
        metadata = RunMetadata.model_validate_json(meta_path.read_text())
        if metadata.model_spec is not None:
            model = FeynmanKacModel.from_spec(metadata.model_spec)
        else:
            model, _ = resolve_model(metadata.model_ref)
        store = TrajectoryStore.load(run_dir / TRAJECTORY_FILE, model)
        store.cache_densities = get_settings().cache_densities
        return store

    def additive_functional(self, store: TrajectoryStore, spec: AdditiveSpec) -> AdditiveFunctional:
        n = store.horizon
        names = [spec.components] * (n + 1) if isinstance(spec.components, str) else spec.components
        if len(names) != n + 1:
            raise InvalidModel(f"expected {n + 1} components, got {len(names)}")
        missing = sorted({f for f in names if f not in store.model.functionals})
        if missing:
            raise InvalidModel(f"unknown functionals: {', '.join(missing)}")
        return AdditiveFunctional(
            components=[store.model.functionals[f] for f in names], normalized=spec.normalized
        )

    def smooth(self, run_dir: Union[str, Path], spec: AdditiveSpec) -> Dict[str, float]:
        store = self.load_store(run_dir)
        value = smoothed_additive(store, self.additive_functional(store, spec))
        return {
            "estimate": value,
            "N": store.N,
            "horizon": store.horizon,
            "log_Z_hat": store.log_free_energy,
        }

    # Semigroup analysis

    def analyze(self, model: FeynmanKacModel, horizon: Optional[int] = None, m: int = 1) -> ProfileDocument:
        horizon = model.horizon if horizon is None else horizon
        model = model.truncated(horizon)
        profile = contraction_profile(model)
        certificates = [certify_H0(model)]
        if m >= 1:
            try:
                certificates.append(certify_Hm(model, m))
            except (NotMixing, InvalidCertificate) as exc:
                logger.info("no H_%d certificate for %s: %s", m, model.name, exc)
        chosen = next((c for c in reversed(certificates) if c.valid), certificates[0])
        try:
            tau_h: Optional[float] = density_ratio_certificate(model)
        except NotMixing:
            tau_h = None
        g_rows, beta_rows = profile_rows(profile)
        per_time = [tau_kappa(profile, 2, 1, n) for n in range(horizon + 1)]
        return ProfileDocument(
            horizon=horizon,
            g=g_rows,
            beta=beta_rows,
            tau_2_1=[t for t, _ in per_time],
            kappa=[k for _, k in per_time],
            certificates=[c.to_record() for c in certificates],
            dominance=dominance_report(model, profile, chosen),
            density_ratio=tau_h,
        )

    @staticmethod
    def profile_from_document(doc: ProfileDocument) -> ContractionProfile:
        def array(rows):
            return np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=float)

        return ContractionProfile(horizon=doc.horizon, g=array(doc.g), beta=array(doc.beta))

    @staticmethod
    def pick_certificate(doc: ProfileDocument, which: str) -> CertificateRecord:
        valid = [c for c in doc.certificates if c.valid]
        if which in ("tree", "backward", "uniform-backward"):
            valid = [c for c in valid if c.kind == "Hm"]
        if not valid:
            raise InvalidCertificate(f"the profile has no valid certificate for the {which} bound")
        hm = [c for c in valid if c.kind == "Hm"]
        return hm[0] if hm else valid[0]

    # Concentration bounds

    def tail_curve(self, request: BoundRequest) -> bounds.TailCurve:
        which = request.which
        if which == "marginal":
            if request.profile is None:
                raise InvalidCertificate("the marginal bound needs an exact profile")
            profile = self.profile_from_document(request.profile)
            return bounds.marginal_tail(profile, request.sigma, request.N, request.n, request.b_n)
        record = request.certificate
        if record is None and request.profile is not None:
            record = self.pick_certificate(request.profile, which)
        if record is None:
            raise InvalidCertificate(f"the {which} bound needs a certificate")
        cert = MixingCertificate.from_record(record)
        if which == "uniform":
            return bounds.uniform_marginal_tail(cert, request.sigma, request.N)
        if which == "tree":
            return bounds.genealogical_tail(cert, request.sigma, request.N, request.n)
        if which == "free-energy":
            return bounds.free_energy_tail(cert, request.sigma, request.N)
        tau_h = request.tau_h
        if tau_h is None and request.profile is not None:
            tau_h = request.profile.density_ratio
        if tau_h is None:
            raise InvalidCertificate("backward bounds need the density ratio tau_h")
        if which == "backward":
            return bounds.backward_tail(cert, tau_h, request.sigma, request.N, request.n)
        return bounds.uniform_backward_tail(cert, tau_h, request.sigma, request.N)

    def bound_curve(self, request: BoundRequest) -> BoundResponse:
        curve = self.tail_curve(request)
        points = [
            CurvePoint(x=x, bound=curve(x), prob_floor=curve.prob_floor(x)) for x in request.x_grid
        ]
        return BoundResponse(
            which=request.which,
            statement=curve.statement,
            points=points,
            constants={k: ConstantRecord(value=v.value, provenance=v.provenance) for k, v in curve.constants.items()},
        )

    # Zoo and experiments

    def zoo_entries(self) -> List[ZooEntry]:
        return model_zoo.list_models()

    def zoo_entry(self, name: str) -> ZooEntry:
        for entry in model_zoo.list_models():
            if entry.name == name:
                return entry
        raise InvalidModel(f"unknown zoo model {name!r}")

    def experiment(self, config: ExperimentConfig, out_dir: Union[str, Path]) -> ExperimentResult:
        result = run_experiment(config)
        write_outputs(result, out_dir)
        logger.info("experiment %s: %s", config.model, "PASS" if result.verdict else "FAIL")
        return result
