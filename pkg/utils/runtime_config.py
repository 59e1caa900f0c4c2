import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field


class RuntimeSettings(BaseModel):
    threads: int = Field(default=1, ge=1)
    batch_size: int = Field(default=8192, ge=1)


def load_runtime_settings(threads: Optional[int] = None) -> RuntimeSettings:
    """Resolve runtime knobs: explicit flag first, then .env / environment."""
    load_dotenv()

    env_threads = os.getenv("NONLOCAL_DP_THREADS")
    if threads is None and env_threads:
        threads = int(env_threads)

    return RuntimeSettings(
        threads=1 if threads is None else threads,
        batch_size=int(os.getenv("NONLOCAL_DP_BATCH_SIZE", "8192")),
    )
