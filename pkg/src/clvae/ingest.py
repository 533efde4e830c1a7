"""Transaction-log parsing, RFM summaries, cohort dummies and holdout revenue.

Times are stored in days since the earliest transaction in the log; every
model-facing quantity (t_x, T, horizons) is in weeks.
"""
import csv
import datetime as dt
import io
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ._io import atomic_write_frame
from .exceptions import (
    AssignmentError,
    CoverageError,
    EmptyInputError,
    ParseError,
    ValidationError,
    WindowError,
)

logger = logging.getLogger(__name__)

DAYS_PER_WEEK = 7.0
SUMMARY_COLUMNS = ["customer_id", "x", "t_x", "T", "z_bar"]


@dataclass(frozen=True)
class ColumnMapping:
    customer_id: str = "customer_id"
    date: str = "date"
    amount: str = "amount"
    delimiter: str = ","


@dataclass(frozen=True)
class CohortSpec:
    granularity: int = 1
    n_bins: int = 24

    def __post_init__(self):
        if self.granularity < 1 or self.n_bins < 1:
            raise ValidationError("CohortSpec needs granularity >= 1 and n_bins >= 1")


class TransactionLog:
    """Per-customer dated purchases.

    Parameters
    ----------
    frame : DataFrame
        Columns ``customer_id`` (str), ``time`` (days, float >= 0) and
        ``amount`` (float >= 0).
    start_date : datetime.date, optional
        Calendar date of day 0. Needed for cohort assignment.
    end : float, optional
        Last day covered by the log. Defaults to the last transaction time.
    """

    time_unit = "weeks"

    def __init__(self, frame, start_date=None, end=None):
        frame = frame[["customer_id", "time", "amount"]].copy()
        frame["customer_id"] = frame["customer_id"].astype(str)
        frame["time"] = frame["time"].astype(float)
        frame["amount"] = frame["amount"].astype(float)
        if len(frame) == 0:
            raise EmptyInputError("transaction log is empty")
        if (frame["time"] < 0).any():
            raise ValidationError("transaction times must be non-negative")
        if (frame["amount"] < 0).any():
            raise ValidationError("transaction amounts must be non-negative")
        self.frame = frame.sort_values(["customer_id", "time"], kind="mergesort").reset_index(drop=True)
        self.start_date = start_date
        self.end = float(self.frame["time"].max()) if end is None else float(end)

    def __len__(self):
        return len(self.frame)

    def __repr__(self):
        return f"TransactionLog({len(self)} transactions, {self.n_customers} customers, end={self.end:g}d)"

    @property
    def n_customers(self):
        return self.frame["customer_id"].nunique()

    def truncate(self, end):
        """Copy of the log restricted to transactions at or before day ``end``."""
        kept = self.frame[self.frame["time"] <= end]
        return TransactionLog(kept, start_date=self.start_date, end=min(end, self.end))

    def first_purchase(self):
        return self.frame.groupby("customer_id", sort=True)["time"].min()


def _read_text(source):
    if isinstance(source, (bytes, bytearray)):
        return source.decode("utf-8-sig")
    if hasattr(source, "read"):
        data = source.read()
        return data.decode("utf-8-sig") if isinstance(data, bytes) else data
    with open(source, encoding="utf-8-sig") as fh:
        return fh.read()


def parse_transaction_log(source, columns=None):
    """Parse a delimited text table into a :class:`TransactionLog`.

    ``source`` may be a path, bytes, or a file-like object. Dates must be
    ISO ``YYYY-MM-DD``. Rows of one customer on the same day are merged into
    a single transaction with the summed amount.
    """
    columns = columns or ColumnMapping()
    text = _read_text(source)
    if not text.strip():
        raise EmptyInputError("transaction file is empty")
    reader = csv.reader(io.StringIO(text), delimiter=columns.delimiter)
    header = next(reader)
    try:
        i_id = header.index(columns.customer_id)
        i_date = header.index(columns.date)
        i_amt = header.index(columns.amount)
    except ValueError as exc:
        raise ParseError(f"missing column in header {header}: {exc}", line=1) from None

    ids, dates, amounts = [], [], []
    width = max(i_id, i_date, i_amt)
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) <= width:
            raise ParseError(f"expected at least {width + 1} fields, found {len(row)}", line=lineno)
        try:
            day = dt.date.fromisoformat(row[i_date].strip())
        except ValueError:
            raise ParseError(f"unparseable date {row[i_date]!r}", line=lineno) from None
        try:
            amount = float(row[i_amt])
        except ValueError:
            raise ParseError(f"unparseable amount {row[i_amt]!r}", line=lineno) from None
        if not np.isfinite(amount):
            raise ParseError(f"non-finite amount {row[i_amt]!r}", line=lineno)
        if amount < 0:
            raise ValidationError(f"line {lineno}: negative amount {row[i_amt].strip()}")
        ids.append(row[i_id].strip())
        dates.append(day)
        amounts.append(amount)
    if not ids:
        raise EmptyInputError("transaction file has a header but no rows")

    start = min(dates)
    frame = pd.DataFrame(
        {
            "customer_id": ids,
            "time": [(d - start).days for d in dates],
            "amount": amounts,
        }
    )
    frame = frame.groupby(["customer_id", "time"], as_index=False, sort=True)["amount"].sum()
    return TransactionLog(frame, start_date=start)


def summarize_rfm(log, calibration_end):
    """RFM summary per customer acquired before ``calibration_end`` (days).

    Returns a DataFrame with columns ``customer_id, x, t_x, T, z_bar`` where
    ``x`` counts repeat purchases and ``t_x``, ``T`` are weeks since the
    first purchase. ``z_bar`` is the mean amount of the ``x`` repeat
    transactions, which is what the Gamma-Gamma spend density conditions on;
    for zero-repeaters it is the first purchase amount (an encoder input
    only). Customers with ``z_bar == 0`` are dropped with a warning.
    """
    if calibration_end < 0:
        raise WindowError(f"calibration_end={calibration_end} precedes the dataset start")
    cal = log.frame[log.frame["time"] <= calibration_end]
    grouped = cal.groupby("customer_id", sort=True)
    first = grouped["time"].min()
    keep = first[first < calibration_end].index
    if len(keep) == 0:
        raise WindowError("no customer has a first purchase before calibration_end")
    stats = grouped.agg(n=("time", "size"), first=("time", "min"), last=("time", "max"),
                        total=("amount", "sum"), first_amount=("amount", "first"))
    stats = stats.loc[keep]
    repeats = stats["n"] - 1
    z_bar = np.where(repeats > 0, (stats["total"] - stats["first_amount"]) / repeats.clip(lower=1),
                     stats["first_amount"])
    out = pd.DataFrame(
        {
            "customer_id": stats.index.astype(str),
            "x": (stats["n"] - 1).astype(int).to_numpy(),
            "t_x": ((stats["last"] - stats["first"]) / DAYS_PER_WEEK).to_numpy(),
            "T": ((calibration_end - stats["first"]) / DAYS_PER_WEEK).to_numpy(),
            "z_bar": z_bar,
        }
    )
    zero_spend = out["z_bar"] <= 0
    if zero_spend.any():
        logger.warning("dropping %d customers with zero calibration spend", int(zero_spend.sum()))
        out = out[~zero_spend]
    return out.reset_index(drop=True)


def _month_index(day):
    return day.year * 12 + (day.month - 1)


def build_cohort_covariates(log, spec=None, customers=None):
    """One-hot acquisition-cohort vectors keyed by calendar month of first purchase.

    Bin 0 is the month of the log's start date; bins advance by
    ``spec.granularity`` months. Returns a DataFrame indexed by customer id
    with columns ``cov_1 .. cov_<n_bins>``.
    """
    spec = spec or CohortSpec()
    if log.start_date is None:
        raise AssignmentError("cohort assignment needs a calendar start date on the log")
    first = log.first_purchase()
    if customers is not None:
        first = first.loc[list(customers)]
    origin = _month_index(log.start_date)
    bins = {}
    for cid, day in first.items():
        date = log.start_date + dt.timedelta(days=float(day))
        b = (_month_index(date) - origin) // spec.granularity
        if not 0 <= b < spec.n_bins:
            raise AssignmentError(f"customer {cid!r} first purchased on {date}, outside the {spec.n_bins} cohort bins")
        bins[cid] = b
    labels = np.fromiter(bins.values(), dtype=int, count=len(bins))
    onehot = np.zeros((len(bins), spec.n_bins))
    onehot[np.arange(len(bins)), labels] = 1.0
    return pd.DataFrame(onehot, index=pd.Index(list(bins), name="customer_id"),
                        columns=[f"cov_{k + 1}" for k in range(spec.n_bins)])


def cohort_labels(covariates):
    """Integer cohort label per row of a one-hot covariate frame."""
    return pd.Series(np.argmax(covariates.to_numpy(), axis=1), index=covariates.index, name="cohort")


def holdout_revenue(log, calibration_end, horizons, customers=None):
    """Cumulative realised revenue per customer over each holdout horizon.

    Entry ``(i, k)`` sums customer i's amounts in
    ``(calibration_end, calibration_end + 7 * horizons[k]]``. Rows default to
    customers acquired before ``calibration_end``.
    """
    horizons = [float(h) for h in horizons]
    if not horizons or any(h <= 0 for h in horizons) or np.any(np.diff(horizons) <= 0):
        raise ValidationError("horizons must be positive and strictly increasing")
    needed = calibration_end + DAYS_PER_WEEK * horizons[-1]
    if needed > log.end + 1e-9:
        raise CoverageError(f"log ends at day {log.end:g}; horizon {horizons[-1]:g}w needs day {needed:g}")
    if customers is None:
        first = log.first_purchase()
        customers = first[first < calibration_end].index
    customers = pd.Index([str(c) for c in customers], name="customer_id")
    frame = log.frame
    hold = frame[(frame["time"] > calibration_end) & (frame["time"] <= needed)]
    out = pd.DataFrame(0.0, index=customers, columns=horizons)
    for h in horizons:
        window = hold[hold["time"] <= calibration_end + DAYS_PER_WEEK * h]
        sums = window.groupby("customer_id")["amount"].sum()
        out[h] = sums.reindex(customers, fill_value=0.0).to_numpy()
    return out


def attach_covariate_frame(summaries, covariates):
    """Join covariate columns onto summaries by customer id (inner order kept)."""
    cov = covariates.reindex(summaries["customer_id"].astype(str))
    if cov.isna().any().any():
        missing = cov.index[cov.isna().any(axis=1)].tolist()[:5]
        raise AssignmentError(f"no covariates for customers {missing}")
    out = summaries.reset_index(drop=True).copy()
    for col in cov.columns:
        out[col] = cov[col].to_numpy()
    return out


def write_summaries(summaries, path):
    cov_cols = sorted((c for c in summaries.columns if c.startswith("cov_")), key=lambda c: int(c[4:]))
    atomic_write_frame(summaries[SUMMARY_COLUMNS + cov_cols], path, index=False, float_format="%.17g")


def read_summaries(path):
    frame = pd.read_csv(path, dtype={"customer_id": str})
    missing = set(SUMMARY_COLUMNS) - set(frame.columns)
    if missing:
        raise ParseError(f"summaries file lacks columns {sorted(missing)}")
    return frame


def write_holdout(table, path):
    out = table.copy()
    out.columns = [f"h{h:g}" for h in table.columns]
    atomic_write_frame(out, path, float_format="%.17g")


def read_holdout(path):
    frame = pd.read_csv(path, dtype={"customer_id": str}).set_index("customer_id")
    frame.columns = [float(c[1:]) for c in frame.columns]
    return frame.astype(float)
