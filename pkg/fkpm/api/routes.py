from typing import List

from fastapi import APIRouter, Depends, HTTPException, status
from sqlalchemy.orm import Session

from fkpm.application.errors import FKError, InvalidModel
from fkpm.application.fk_core import FeynmanKacModel
from fkpm.application.services import ParticleService
from fkpm.infrastructure.database import get_db
from fkpm.infrastructure.models import (
    BoundRequest,
    BoundResponse,
    ModelSpec,
    ProfileDocument,
    RunRequest,
    RunSummary,
    ZooEntry,
)


router = APIRouter()
particle_service = ParticleService()


def _http_error(exc: FKError) -> HTTPException:
    code = (
        status.HTTP_400_BAD_REQUEST
        if isinstance(exc, InvalidModel)
        else status.HTTP_422_UNPROCESSABLE_ENTITY
    )
    return HTTPException(status_code=code, detail=f"{type(exc).__name__}: {exc}")


@router.get("/zoo", response_model=List[ZooEntry], summary="List canonical models")
async def list_zoo():
    return particle_service.zoo_entries()


@router.get(
    "/zoo/{name}",
    response_model=ZooEntry,
    responses={400: {"description": "Unknown zoo model"}},
)
async def get_zoo_entry(name: str):
    try:
        return particle_service.zoo_entry(name)
    except FKError as exc:
        raise _http_error(exc)


@router.post(
    "/analyze",
    response_model=ProfileDocument,
    summary="Exact contraction profile and mixing certificates of a finite model",
    responses={
        400: {"description": "Invalid model"},
        422: {"description": "Model cannot be analyzed"},
    },
)
async def analyze_model(spec: ModelSpec, m: int = 1):
    """
    Compute g_{p,n}, beta(P_{p,n}), tau_{2,1}(n), kappa(n), the H_0 certificate
    and, for m >= 1, the H_m certificate.
    """
    try:
        model = FeynmanKacModel.from_spec(spec)
        return particle_service.analyze(model, m=m)
    except FKError as exc:
        raise _http_error(exc)


@router.post(
    "/bounds",
    response_model=BoundResponse,
    summary="Evaluate a concentration bound on an x-grid",
    responses={422: {"description": "Missing or invalid certificate"}},
)
async def evaluate_bound(request: BoundRequest):
    try:
        return particle_service.bound_curve(request)
    except FKError as exc:
        raise _http_error(exc)


@router.post(
    "/runs",
    response_model=RunSummary,
    status_code=status.HTTP_201_CREATED,
    summary="Run the particle model on a zoo model and record it",
)
async def create_run(request: RunRequest, db: Session = Depends(get_db)):
    try:
        model, result = particle_service.run_model(
            request.model,
            request.n_particles,
            seed=request.seed,
            horizon=request.horizon,
            epsilon=request.epsilon,
        )
    except FKError as exc:
        raise _http_error(exc)
    return particle_service.register_run(db, model, result, request.seed, request.epsilon)


@router.get(
    "/runs/{run_id}",
    response_model=RunSummary,
    responses={404: {"description": "Run does not exist"}},
)
async def get_run(run_id: int, db: Session = Depends(get_db)):
    summary = particle_service.get_run(db, run_id)
    if not summary:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail="Run does not exist in the catalog",
        )
    return summary
