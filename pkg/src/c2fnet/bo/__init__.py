from .direct import DirectResult, direct_maximize
from .gp import GPFitError, GPModel, gp_fit, gp_posterior, se_kernel
from .tuner import (AcquisitionConfig, BOBudget, HistoryRow, TuneResult, latin_hypercube,
                    optimize_thresholds, ucb_score)
