import os
from dotenv import load_dotenv

load_dotenv()

def _get(name: str, default: str = "") -> str:
    return os.getenv(name, default).strip()

def _get_int(name: str, default: str) -> int:
    return int(_get(name, default))

def _get_float(name: str, default: str) -> float:
    return float(_get(name, default))

# ============================================================
# ADMM SOLVER
# ============================================================
# Penalty parameter rho of the augmented Lagrangian.
# Larger rho pushes consensus faster but slows down the objective.
RHO = _get_float("ROPF_RHO", "1.0")

# Stopping rule: both residuals below TOL_SCALE * sqrt(N)
TOL_SCALE = _get_float("ROPF_TOL_SCALE", "1e-4")

# Hard iteration cap (status MaxIters when reached)
MAX_ITERS = _get_int("ROPF_MAX_ITERS", "100000")

# Worker threads per phase, 0 = one per core
PARALLELISM = _get_int("ROPF_PARALLELISM", "0")

def default_parallelism() -> int:
    """Resolve PARALLELISM=0 to the machine's core count."""
    if PARALLELISM > 0:
        return PARALLELISM
    return os.cpu_count() or 1

# Progress line every N iterations (0 = only start/end)
LOG_EVERY = _get_int("ROPF_LOG_EVERY", "500")

# ============================================================
# NETWORK GENERATORS
# ============================================================
SEED = _get_int("ROPF_SEED", "1")

# Fraction of non-root buses that carry a PV inverter (Disk region)
PV_FRACTION = _get_float("ROPF_PV_FRACTION", "0.2")

# Curtailable share of each Box load (0 = fixed demand)
LOAD_FLEX = _get_float("ROPF_LOAD_FLEX", "0.2")

# Squared substation voltage (fixed)
ROOT_V = _get_float("ROPF_ROOT_V", "1.0")

# Parent window of the random-tree generator (0 = any earlier bus, 1 = line network)
TREE_WINDOW = _get_int("ROPF_TREE_WINDOW", "0")

# "loss" = minimize line loss (alpha=0, beta=1), "cost" = quadratic cost at the substation
OBJECTIVE = _get("ROPF_OBJECTIVE", "loss").lower()

# ============================================================
# ORACLES
# ============================================================
ORACLE_GRID   = _get_int("ROPF_ORACLE_GRID", "60")      # points per axis, >= 50
ORACLE_REFINE = _get_int("ROPF_ORACLE_REFINE", "200")   # refinement sweeps
ORACLE_TOL    = _get_float("ROPF_ORACLE_TOL", "1e-10")  # step size at which refinement stops

# Misc
LOG_LEVEL = _get("LOG_LEVEL","INFO").upper()
