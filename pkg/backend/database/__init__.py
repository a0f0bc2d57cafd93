from .db import Base, EvalRecord, Run, SlotMetric, get_engine, get_session, init_db, record_run

__all__ = ['Base', 'Run', 'SlotMetric', 'EvalRecord', 'get_engine', 'get_session', 'init_db', 'record_run']
