"""Input checking shared by the estimators."""
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .exceptions import NotFittedError, ShapeError, ValidationError

_TOL = 1e-9


@dataclass
class RFM:
    """Validated column arrays of a batch of customer summaries."""

    x: np.ndarray
    t_x: np.ndarray
    T: np.ndarray
    z_bar: np.ndarray
    covariates: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    def subset(self, idx):
        return RFM(self.x[idx], self.t_x[idx], self.T[idx], self.z_bar[idx], self.covariates[idx], self.ids[idx])


def check_summaries(X, require_spend=True, n_covariates=None):
    """Coerce summaries to an :class:`RFM` and enforce the RFM invariants.

    ``X`` is either a DataFrame with columns ``x, t_x, T`` (plus ``z_bar``
    and optional ``cov_*`` columns) or a 2-D array whose columns are
    ``x, t_x, T, z_bar, cov_1, ...``.
    """
    if isinstance(X, RFM):
        rfm = X
    elif isinstance(X, pd.DataFrame):
        missing = {"x", "t_x", "T"} - set(X.columns)
        if missing:
            raise ValidationError(f"summaries lack columns {sorted(missing)}")
        cov_cols = sorted((c for c in X.columns if str(c).startswith("cov_")), key=lambda c: int(str(c)[4:]))
        n = len(X)
        z = X["z_bar"].to_numpy(float) if "z_bar" in X.columns else np.full(n, np.nan)
        ids = X["customer_id"].astype(str).to_numpy() if "customer_id" in X.columns else np.arange(n).astype(str)
        rfm = RFM(
            X["x"].to_numpy(float),
            X["t_x"].to_numpy(float),
            X["T"].to_numpy(float),
            z,
            X[cov_cols].to_numpy(float) if cov_cols else np.zeros((n, 0)),
            ids,
        )
    else:
        arr = np.asarray(X, dtype=float)
        if arr.ndim != 2 or arr.shape[1] < 3:
            raise ShapeError(f"summaries array must be 2-D with >= 3 columns, got {arr.shape}")
        n = arr.shape[0]
        z = arr[:, 3] if arr.shape[1] > 3 else np.full(n, np.nan)
        rfm = RFM(arr[:, 0], arr[:, 1], arr[:, 2], z, arr[:, 4:], np.arange(n).astype(str))

    if len(rfm) == 0:
        raise ValidationError("no customers in summaries")
    if np.any(rfm.x < 0) or np.any(np.abs(rfm.x - np.round(rfm.x)) > _TOL):
        raise ValidationError("x must be a non-negative integer count")
    if np.any(~(rfm.T > 0)):
        raise ValidationError("T must be positive")
    if np.any(rfm.t_x < 0) or np.any(rfm.t_x > rfm.T * (1 + _TOL)):
        raise ValidationError("summaries must satisfy 0 <= t_x <= T")
    if np.any((rfm.x == 0) & (rfm.t_x > _TOL)):
        raise ValidationError("x = 0 requires t_x = 0")
    if require_spend and np.any(~(rfm.z_bar > 0)):
        raise ValidationError("z_bar must be positive")
    if n_covariates is not None and rfm.n_covariates != n_covariates:
        raise ShapeError(f"expected {n_covariates} covariates, got {rfm.n_covariates}")
    rfm.t_x = np.minimum(rfm.t_x, rfm.T)
    return rfm


def check_is_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")


def check_horizons(horizons):
    h = np.atleast_1d(np.asarray(horizons, dtype=float))
    if h.ndim != 1 or h.size == 0 or np.any(h <= 0) or np.any(np.diff(h) <= 0):
        raise ValidationError("horizons must be positive and strictly increasing")
    return h
