import os
from dotenv import load_dotenv

load_dotenv() # Load overrides from a .env file


def _env(name: str, default: str) -> str:
    return os.getenv(f"PAIRSQUEEZE_{name}", default)


CODE_VERSION = "0.4.0"
SCHEMA_VERSION = 1

LOG_LEVEL = _env("LOG_LEVEL", "INFO")

# Base directory for run outputs
OUTPUT_DIR = _env("OUTPUT_DIR", "pairsqueeze_runs")

WORKERS = int(_env("WORKERS", "1"))
SEED = int(_env("SEED", "20240917"))

# Truncated-Wigner defaults
TWA_N_TRAJ = int(_env("TWA_N_TRAJ", "10000"))
TWA_REL_TOL = float(_env("TWA_REL_TOL", "1e-8"))
TWA_ABS_TOL_PER_ATOM = float(_env("TWA_ABS_TOL_PER_ATOM", "1e-10"))
# Batches are the unit of parallel work; results never depend on the worker count
TWA_BATCH_SIZE = int(_env("TWA_BATCH_SIZE", "250"))
TWA_MAX_FAILURE_FRACTION = float(_env("TWA_MAX_FAILURE_FRACTION", "0.01"))
TWA_JACKKNIFE_BLOCKS = int(_env("TWA_JACKKNIFE_BLOCKS", "20"))

# Exact-evolution defaults
KRYLOV_DIM = int(_env("KRYLOV_DIM", "30"))
KRYLOV_TOL = float(_env("KRYLOV_TOL", "1e-12"))
ED_WIDEN_MAX_N = int(_env("ED_WIDEN_MAX_N", "2000"))

# Ramsey slope step for backends without an analytic derivative (rad)
FD_PHASE_STEP = float(_env("FD_PHASE_STEP", "1e-4"))

DEFAULT_RUN_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "experiment": "squeeze_sweep",
    "physical": {
        "g0": 1.0,
        "kappa": 1.0,
        "gamma": 0.0,
        "delta_cavity": 1000.0,
        "F": 4.5,
        "N": 1000,
        "delta_g": None,
        "delta_e": None,
    },
    "sweep": {
        "N": [100, 1000, 10000],
        "nchi_t": {"start": 0.0, "stop": 8.0, "num": 161},
    },
    "twa": None,
    "ramsey": None,
    "output_dir": OUTPUT_DIR,
    "seed": SEED,
    "format": "csv",
    "workers": WORKERS,
}
