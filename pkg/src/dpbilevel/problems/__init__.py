"""Built-in bilevel problems."""
from .mean_leak import make_mean_leak
from .quadratic import make_quadratic, quadratic_constants
from .reg_tuning import (REGULARIZERS, TuningConfig, TuningReport, grid_search_omega, load_tuning_csv, make_reg_tuning,
                         make_ridge_data, private_reg_tuning_step, run_private_reg_tuning, tuning_params)

__all__ = [
    "make_mean_leak", "make_quadratic", "quadratic_constants", "REGULARIZERS", "TuningConfig", "TuningReport",
    "grid_search_omega", "load_tuning_csv", "make_reg_tuning", "make_ridge_data", "private_reg_tuning_step",
    "run_private_reg_tuning", "tuning_params",
]
