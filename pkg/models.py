from datetime import datetime
from sqlalchemy import Column, Integer, String, DateTime, Float, Text
from sqlalchemy.orm import declarative_base
import json

Base = declarative_base()


class RunSession(Base):
    __tablename__ = 'run_sessions'

    id = Column(Integer, primary_key=True)
    mode = Column(String(20), nullable=False, index=True)  # solve, simulate, sweep, case-study, check
    model = Column(String(20))  # hard, bank, peer-loan or all
    config_hash = Column(String(64), index=True)
    seed = Column(Integer)
    output_dir = Column(String(500))
    artifacts = Column(Text)  # JSON list of written files
    summary = Column(Text)  # JSON of the headline numbers
    errors = Column(Text)  # JSON list of errors
    started_at = Column(DateTime, default=datetime.utcnow)
    completed_at = Column(DateTime)
    status = Column(String(20), default='running')  # running, completed, failed

    def to_dict(self):
        return {
            'id': self.id,
            'mode': self.mode,
            'model': self.model,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'artifacts': json.loads(self.artifacts) if self.artifacts else [],
            'summary': json.loads(self.summary) if self.summary else {},
            'errors': json.loads(self.errors) if self.errors else [],
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'completed_at': self.completed_at.isoformat() if self.completed_at else None,
            'status': self.status
        }


class SweepCell(Base):
    __tablename__ = 'sweep_cells'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, nullable=False, index=True)  # RunSession.id
    cell_index = Column(Integer, nullable=False)
    k = Column(Float, nullable=False)
    psi = Column(String(100), nullable=False)
    trade_ratio = Column(Float)
    expected_value = Column(Float)
    status = Column(String(20), default='completed')
    error = Column(Text)

    def to_dict(self):
        return {
            'id': self.id,
            'run_id': self.run_id,
            'cell_index': self.cell_index,
            'k': self.k,
            'psi': self.psi,
            'trade_ratio': self.trade_ratio,
            'expected_value': self.expected_value,
            'status': self.status,
            'error': self.error
        }
