"""Customer lifetime value with a Pareto/NBD + Gamma-Gamma variational autoencoder."""
from .baseline import (
    CohortPNBDGG,
    GammaGammaFitter,
    GGParams,
    ParetoNBDFitter,
    ParetoNBDParams,
    PNBDGG,
    fit_gg,
    fit_pnbd,
)
from .evaluation import BenchmarkReport, generate_synthetic, mae, rmse, run_benchmark
from .exceptions import CLVAEError
from .ingest import (
    CohortSpec,
    ColumnMapping,
    TransactionLog,
    build_cohort_covariates,
    holdout_revenue,
    parse_transaction_log,
    summarize_rfm,
)
from .model import CLVAE, PriorParams, TrainConfig
from .numerics import GammaParams
from .predict import PredictionResult, SimConfig, simulate_futures

__version__ = "0.1.0"

__all__ = [
    "CLVAE",
    "CLVAEError",
    "BenchmarkReport",
    "CohortPNBDGG",
    "CohortSpec",
    "ColumnMapping",
    "GGParams",
    "GammaGammaFitter",
    "GammaParams",
    "PNBDGG",
    "ParetoNBDFitter",
    "ParetoNBDParams",
    "PredictionResult",
    "PriorParams",
    "SimConfig",
    "TrainConfig",
    "TransactionLog",
    "build_cohort_covariates",
    "fit_gg",
    "fit_pnbd",
    "generate_synthetic",
    "holdout_revenue",
    "mae",
    "parse_transaction_log",
    "rmse",
    "run_benchmark",
    "simulate_futures",
    "summarize_rfm",
]
