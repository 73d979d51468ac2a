import os
from dataclasses import dataclass, replace

from dotenv import load_dotenv

# ---------------- CONFIG ---------------- #
load_dotenv()


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


@dataclass(frozen=True)
class Settings:
    n_jobs: int = 1
    out_dir: str = "rdmulti_out"
    level: float = 95.0
    delimiter: str = ","
    quiet: bool = False
    host: str = "0.0.0.0"
    port: int = 8000

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            n_jobs=int(os.getenv("RDMULTI_N_JOBS", "1")),
            out_dir=os.getenv("RDMULTI_OUT_DIR", "rdmulti_out"),
            level=float(os.getenv("RDMULTI_LEVEL", "95")),
            delimiter=os.getenv("RDMULTI_DELIMITER", ","),
            quiet=_env_bool("RDMULTI_QUIET", False),
            host=os.getenv("RDMULTI_HOST", "0.0.0.0"),
            port=int(os.getenv("RDMULTI_PORT", "8000")),
        )

    def override(self, **changes) -> "Settings":
        """Return a copy with every non-None value in `changes` applied (CLI flags win)."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})
