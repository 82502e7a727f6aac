"""Quantile factor models with characteristics-driven single-index loadings."""

from qcf.errors import DegenerateEstimationError, InputError, QCFError
from qcf.estimator import QCFResult, fit_qcf
from qcf.evaluation import MetricBundle, QuantileFit, aqe, metric_bundle, qhe, r1_metrics, rolling_oos
from qcf.inference import infer_theta, powell_sigma, theta_covariance, wald_test
from qcf.panel import Panel, load_panel
from qcf.qr import solve_penalized, solve_plain
from qcf.selection import HyperGrid, select_hyperparams
from qcf.sieve import SieveBasis, build_basis
from qcf.simulation import DGPConfig, ExperimentSpec, generate_dgp, qfm_baseline, run_benchmark

__version__ = "0.1.0"

__all__ = [
    "DGPConfig",
    "DegenerateEstimationError",
    "ExperimentSpec",
    "HyperGrid",
    "InputError",
    "MetricBundle",
    "Panel",
    "QCFError",
    "QCFResult",
    "QuantileFit",
    "SieveBasis",
    "aqe",
    "build_basis",
    "fit_qcf",
    "generate_dgp",
    "infer_theta",
    "load_panel",
    "metric_bundle",
    "powell_sigma",
    "qfm_baseline",
    "qhe",
    "r1_metrics",
    "rolling_oos",
    "run_benchmark",
    "select_hyperparams",
    "solve_penalized",
    "solve_plain",
    "theta_covariance",
    "wald_test",
]
