from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from models import Base
from config import Config
import logging

logger = logging.getLogger(__name__)

_engine = None
_session_factory = None


def get_engine(url=None):
    """Engine for the run registry; created on first use"""
    global _engine, _session_factory
    if url is not None or _engine is None:
        _engine = create_engine(url or Config.DATABASE_URL, echo=Config.DEBUG)
        _session_factory = sessionmaker(autocommit=False, autoflush=False, bind=_engine)
    return _engine


def init_db(url=None):
    """Create registry tables"""
    try:
        Base.metadata.create_all(bind=get_engine(url))
        logger.info("Run registry tables ready")
    except Exception as e:
        logger.error(f"Error creating run registry tables: {e}")
        raise


def get_db_session():
    """Registry session for direct use; the caller closes it"""
    if _session_factory is None:
        init_db()
    return _session_factory()
