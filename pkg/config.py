# config.py
import os
from typing import Dict, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

# Load environment variables from .env file
load_dotenv()

VERSION = "0.4.0"


class AssumptionConfig(BaseModel):
    """Identification assumptions for one analysis.

    monotonicity rules out the S10 stratum (D(1) >= D(0)). exclusion_restriction
    ties the stratum-11 outcome model across arms and only affects the mixture
    engine. zeta and (xi0, xi1) are the sensitivity parameters of the weighting
    engine; zero means the corresponding assumption holds.
    """
    model_config = ConfigDict(frozen=True)

    monotonicity: bool = True
    exclusion_restriction: bool = False
    zeta: float = Field(0.0, ge=0.0, lt=1.0)
    xi0: float = 0.0
    xi1: float = 0.0

    @model_validator(mode="after")
    def _check_zeta(self):
        if self.zeta > 0 and self.monotonicity:
            raise ValueError("zeta > 0 relaxes monotonicity; set monotonicity=False")
        return self

    @property
    def label(self) -> str:
        mono = "monotonicity" if self.monotonicity else "no monotonicity"
        er = "ER" if self.exclusion_restriction else "no ER"
        return f"{mono}, {er}"


class PriorSpec(BaseModel):
    """Prior scales for the mixture engine (standardized covariates).

    Intercepts and the Weibull log-shape get flat priors unless a scale is given.
    """
    model_config = ConfigDict(frozen=True)

    sigma_beta: float = Field(2.5, gt=0)
    sigma_gamma: float = Field(2.5, gt=0)
    sigma_intercept: Optional[float] = Field(None, gt=0)
    sigma_log_shape: Optional[float] = Field(None, gt=0)


# Assumption presets (the four monotonicity / ER combinations)
MONOTONE = AssumptionConfig(monotonicity=True, exclusion_restriction=False)
MONOTONE_ER = AssumptionConfig(monotonicity=True, exclusion_restriction=True)
NO_MONOTONE = AssumptionConfig(monotonicity=False, exclusion_restriction=False)
NO_MONOTONE_ER = AssumptionConfig(monotonicity=False, exclusion_restriction=True)

ASSUMPTION_COMBINATIONS: Dict[str, AssumptionConfig] = {
    "mono": MONOTONE,
    "mono_er": MONOTONE_ER,
    "nomono": NO_MONOTONE,
    "nomono_er": NO_MONOTONE_ER,
}

DEFAULT_PRIOR = PriorSpec()

# Optimizer settings
NEWTON_TOL = float(os.getenv('SPCE_NEWTON_TOL', 1e-8))
NEWTON_MAX_ITER = int(os.getenv('SPCE_NEWTON_MAX_ITER', 100))
COX_MAX_ITER = int(os.getenv('SPCE_COX_MAX_ITER', 50))
EM_TOL = float(os.getenv('SPCE_EM_TOL', 1e-8))
EM_MAX_ITER = int(os.getenv('SPCE_EM_MAX_ITER', 500))

# Estimation guards
POSITIVITY_EPS = float(os.getenv('SPCE_POSITIVITY_EPS', 0.01))
TILT_WARN_FRACTION = float(os.getenv('SPCE_TILT_WARN_FRACTION', 0.10))
BOOTSTRAP_FAILURE_WARN = float(os.getenv('SPCE_BOOTSTRAP_FAILURE_WARN', 0.05))
MIN_STRATUM_OCCUPANCY = float(os.getenv('SPCE_MIN_STRATUM_OCCUPANCY', 2))
RHAT_THRESHOLD = float(os.getenv('SPCE_RHAT_THRESHOLD', 1.05))

# Run defaults
GRID_POINTS = int(os.getenv('SPCE_GRID_POINTS', 100))
BOOTSTRAP_REPLICATES = int(os.getenv('SPCE_BOOTSTRAP', 1000))
DEFAULT_SEED = int(os.getenv('SPCE_SEED', 2024))
THREADS = int(os.getenv('SPCE_THREADS', os.cpu_count() or 1))
DEBUG = os.getenv('DEBUG', 'False').lower() == 'true'

# Interval levels (percentile / equal-tailed)
INTERVAL_LEVELS = (2.5, 97.5)
