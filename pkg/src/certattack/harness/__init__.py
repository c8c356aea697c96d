"""Datasets, configuration, sweep execution, reporting, and the CLI."""

from .config import ExperimentConfig, RunRecord, config_hash, from_toml
from .datasets import (digits_idx_fixture, load_mnist_idx, make_synthetic,
                       save_idx_images, save_idx_labels)
from .sweep import (ibp_study, run_sweep, select_operating_point,
                    sigma_estimation_run, summary_table)

__all__ = [
    "ExperimentConfig", "RunRecord", "config_hash", "from_toml",
    "digits_idx_fixture", "load_mnist_idx", "make_synthetic",
    "save_idx_images", "save_idx_labels",
    "ibp_study", "run_sweep", "select_operating_point",
    "sigma_estimation_run", "summary_table",
]
