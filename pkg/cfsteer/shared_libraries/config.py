"""Environment-driven runtime settings."""
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

from .constants import MC_DEFAULTS

DEFAULT_SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


@dataclass(frozen=True)
class Settings:
    log_level: str
    workers: int
    mc_chunk: int
    scenario_dir: Path


def load_settings() -> Settings:
    """Load settings from the environment, reading a `.env` file if present.

    Returns:
        Settings: the resolved runtime settings
    """
    load_dotenv()
    workers = int(os.getenv("CFSTEER_WORKERS", "1"))
    mc_chunk = int(os.getenv("CFSTEER_MC_CHUNK", str(MC_DEFAULTS['chunk_size'])))
    return Settings(
        log_level=os.getenv("CFSTEER_LOG_LEVEL", "INFO").upper(),
        workers=max(1, workers),
        mc_chunk=max(1, mc_chunk),
        scenario_dir=Path(os.getenv("CFSTEER_SCENARIO_DIR", str(DEFAULT_SCENARIO_DIR))),
    )
