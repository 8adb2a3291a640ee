"""
Couche environnement: lit .env.local (ou .env) et expose les réglages d'exécution.
"""

import logging
import os
from dataclasses import dataclass

from dotenv import load_dotenv

from sae_errors import InvalidConfigError

logger = logging.getLogger(__name__)


def load_environment() -> None:
    """Charge les variables d'environnement (.env.local en priorité)"""
    if os.path.exists('.env.local'):
        load_dotenv('.env.local')
    else:
        load_dotenv()


@dataclass
class EnvSettings:
    """Réglages d'exécution lus dans l'environnement"""
    workers: int = 1
    log_level: str = 'INFO'
    log_dir: str = 'logs'
    output_dir: str = 'results'

    @classmethod
    def from_env(cls) -> 'EnvSettings':
        load_environment()
        raw_workers = os.getenv('SAE_WORKERS', '1')
        try:
            workers = int(raw_workers)
        except ValueError:
            raise InvalidConfigError(f"SAE_WORKERS must be an integer, got {raw_workers!r}", key='SAE_WORKERS')
        if workers < 1:
            raise InvalidConfigError("SAE_WORKERS must be >= 1", key='SAE_WORKERS')
        level = os.getenv('SAE_LOG_LEVEL', 'INFO').upper()
        if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise InvalidConfigError(f"Unknown SAE_LOG_LEVEL {level!r}", key='SAE_LOG_LEVEL')
        return cls(
            workers=workers,
            log_level=level,
            log_dir=os.getenv('SAE_LOG_DIR', 'logs'),
            output_dir=os.getenv('SAE_OUTPUT_DIR', 'results'),
        )
