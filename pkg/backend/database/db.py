import json
import os
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from config import Config

Base = declarative_base()


class Run(Base):
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    config_hash = Column(String(64), nullable=False, unique=True)
    method = Column(String(50), nullable=False)
    config_json = Column(Text, nullable=False)
    status = Column(String(20), nullable=False, default='completed')
    slots = Column(Integer, nullable=False, default=0)
    total_queries = Column(Integer, nullable=False, default=0)
    failures = Column(Integer, nullable=False, default=0)
    output_dir = Column(String(512), nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    slot_metrics = relationship('SlotMetric', back_populates='run', cascade='all, delete-orphan')
    eval_reports = relationship('EvalRecord', back_populates='run', cascade='all, delete-orphan')

    def to_dict(self):
        return {
            'id': self.id,
            'config_hash': self.config_hash,
            'method': self.method,
            'config': json.loads(self.config_json),
            'status': self.status,
            'slots': self.slots,
            'total_queries': self.total_queries,
            'failures': self.failures,
            'output_dir': self.output_dir,
            'created_at': self.created_at.isoformat() if self.created_at else None
        }


class SlotMetric(Base):
    __tablename__ = 'slot_metrics'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False)
    slot = Column(Integer, nullable=False)
    kind = Column(String(20), nullable=False)
    api_id = Column(Integer, nullable=True)
    queries = Column(Integer, nullable=False, default=0)
    outer_kl = Column(Float, nullable=True)
    disagreement = Column(Float, nullable=True)
    payload = Column(Text, nullable=True)

    run = relationship('Run', back_populates='slot_metrics')

    def to_dict(self):
        return {
            'id': self.id,
            'run_id': self.run_id,
            'slot': self.slot,
            'kind': self.kind,
            'api_id': self.api_id,
            'queries': self.queries,
            'outer_kl': self.outer_kl,
            'disagreement': self.disagreement,
            'payload': json.loads(self.payload) if self.payload else None
        }


class EvalRecord(Base):
    __tablename__ = 'eval_reports'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False)
    method_tag = Column(String(50), nullable=False)
    shots = Column(Integer, nullable=False)
    episodes = Column(Integer, nullable=False)
    mean_accuracy = Column(Float, nullable=False)
    ci95 = Column(Float, nullable=False)
    query_ledger_total = Column(Integer, nullable=False, default=0)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship('Run', back_populates='eval_reports')

    def to_dict(self):
        return {
            'id': self.id,
            'run_id': self.run_id,
            'method_tag': self.method_tag,
            'shots': self.shots,
            'episodes': self.episodes,
            'mean_accuracy': self.mean_accuracy,
            'ci95': self.ci95,
            'query_ledger_total': self.query_ledger_total,
            'created_at': self.created_at.isoformat() if self.created_at else None
        }


_engines = {}


def get_engine(url: str | None = None):
    url = url or Config.DATABASE_URL
    if url not in _engines:
        if url.startswith('sqlite:///') and url != 'sqlite:///:memory:':
            os.makedirs(os.path.dirname(os.path.abspath(url[len('sqlite:///'):])), exist_ok=True)
        _engines[url] = create_engine(url, echo=False)
    return _engines[url]


def init_db(url: str | None = None):
    engine = get_engine(url)
    Base.metadata.create_all(engine)
    return engine


def get_session(url: str | None = None):
    return sessionmaker(bind=init_db(url))()


def record_run(session, summary: dict, metrics: list[dict], reports: list[dict]) -> Run:
    """Insert or replace the registry entry of one run, keyed by its config hash"""
    existing = session.query(Run).filter_by(config_hash=summary['config_hash']).one_or_none()
    if existing is not None:
        session.delete(existing)
        session.flush()

    run = Run(
        config_hash=summary['config_hash'],
        method=summary['method'],
        config_json=json.dumps(summary['config'], sort_keys=True),
        status=summary.get('status', 'completed'),
        slots=summary['slots'],
        total_queries=summary['total_queries'],
        failures=summary['failures'],
        output_dir=summary.get('output_dir'),
    )
    for m in metrics:
        run.slot_metrics.append(SlotMetric(
            slot=m['slot'],
            kind=m['kind'],
            api_id=m.get('api_id'),
            queries=m.get('queries', 0),
            outer_kl=m.get('outer_kl'),
            disagreement=m.get('disagreement'),
            payload=json.dumps(m, sort_keys=True),
        ))
    for r in reports:
        run.eval_reports.append(EvalRecord(
            method_tag=r['method_tag'],
            shots=r['shots'],
            episodes=len(r['per_episode']),
            mean_accuracy=r['mean_accuracy'],
            ci95=r['ci95'],
            query_ledger_total=r['query_ledger_total'],
        ))
    session.add(run)
    session.commit()
    return run
