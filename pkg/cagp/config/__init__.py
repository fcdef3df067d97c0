"""Process configuration package.

Re-exports `settings` so that `from cagp.config import settings` works.
Experiment-level knobs (datasets, hyperparameters, seeds) live in the YAML
run config validated by `cagp.schemas.run_config`; this module only holds
settings that belong to the process, not to an experiment.
"""

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process-level settings read from the environment or a .env file."""

    # Logging (always written to stderr; stdout is reserved for results)
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Torch intra-op threads. 1 keeps float reductions bitwise reproducible.
    TORCH_NUM_THREADS: int = 1

    # Default parent directory for run outputs when a config omits output_dir
    OUTPUT_ROOT: str = "./runs"

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "extra": "ignore",
    }


settings = Settings()
