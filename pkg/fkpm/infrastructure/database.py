from datetime import datetime, timezone
from functools import lru_cache
from typing import Iterator, List, Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from fkpm.infrastructure.config import get_settings
from fkpm.infrastructure.models import Base, ParticleRunDB, RunSummary


@lru_cache
def get_sessionmaker(database_url: str) -> sessionmaker:
    connect_args = {"check_same_thread": False} if database_url.startswith("sqlite") else {}
    engine = create_engine(database_url, connect_args=connect_args)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


# Dependency to get DB session
def get_db() -> Iterator[Session]:
    db = get_sessionmaker(get_settings().database_url)()
    try:
        yield db
    finally:
        db.close()


class RunCatalog:
    """Stores and looks up particle run metadata."""

    def __init__(self, db: Session):
        self.db = db

    def register(
        self,
        model_name: str,
        n_particles: int,
        horizon: int,
        seed: int,
        epsilon: Optional[float],
        log_z_hat: Optional[float],
        run_dir: Optional[str] = None,
    ) -> RunSummary:
        record = ParticleRunDB(
            model_name=model_name,
            n_particles=n_particles,
            horizon=horizon,
            seed=seed,
            epsilon=epsilon,
            log_z_hat=log_z_hat,
            run_dir=run_dir,
            created_at=datetime.now(timezone.utc),
        )
        self.db.add(record)
        self.db.commit()
        self.db.refresh(record)
        return self._to_summary(record)

    def get(self, run_id: int) -> Optional[RunSummary]:
        record = self.db.query(ParticleRunDB).filter(ParticleRunDB.id == run_id).first()
        return self._to_summary(record) if record else None

    def find_by_dir(self, run_dir: str) -> Optional[RunSummary]:
        record = (
            self.db.query(ParticleRunDB)
            .filter(ParticleRunDB.run_dir == run_dir)
            .order_by(ParticleRunDB.id.desc())
            .first()
        )
        return self._to_summary(record) if record else None

    def all(self) -> List[RunSummary]:
        return [self._to_summary(r) for r in self.db.query(ParticleRunDB).all()]

    @staticmethod
    def _to_summary(record: ParticleRunDB) -> RunSummary:
        return RunSummary(
            id=record.id,
            model_name=record.model_name,
            n_particles=record.n_particles,
            horizon=record.horizon,
            seed=record.seed,
            epsilon=record.epsilon,
            log_z_hat=record.log_z_hat,
            run_dir=record.run_dir,
            created_at=record.created_at,
        )
