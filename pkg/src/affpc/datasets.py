"""Hourly bike-rental case study data.

Each Saturday is one subject: the covariate is the hourly temperature
profile (degrees Celsius), the response is the hourly log count of
casual rentals, and the day's average relative humidity enters as a
scalar covariate.  The raw file is the hourly UCI bike-sharing record;
because downloads may be unavailable, ``AFFPC_BIKE_HOUR_CSV`` can point
at a local ``hour.csv`` copy.
"""
from __future__ import annotations

import csv
import io
import math
import os
import urllib.request
import zipfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .funcdata import FunctionalDataset, SubjectRecord

__all__ = [
    "BIKE_URLS",
    "bike_hour_csv",
    "prepare_bike_dataset",
    "load_bike_dataset",
    "split_chronological",
]

BIKE_URLS = (
    "https://archive.ics.uci.edu/static/public/275/bike+sharing+dataset.zip",
    "https://archive.ics.uci.edu/ml/machine-learning-databases/00275/Bike-Sharing-Dataset.zip",
)

# hour.csv temp is (t - t_min) / (t_max - t_min) with t_min = -8, t_max = 39
_TEMP_MIN, _TEMP_MAX = -8.0, 39.0


def bike_hour_csv(cache_dir=None, *, download: bool = True) -> Path | None:
    """Locate (or fetch) the hourly records file; None when unavailable.

    Resolution order: the ``AFFPC_BIKE_HOUR_CSV`` environment variable,
    a cached copy under ``cache_dir`` (default ``~/.cache/affpc``), and
    finally a download attempt against the known archive URLs.
    """
    env = os.environ.get("AFFPC_BIKE_HOUR_CSV")
    if env:
        path = Path(env)
        return path if path.exists() else None
    cache = Path(cache_dir) if cache_dir else Path.home() / ".cache" / "affpc"
    cached = cache / "hour.csv"
    if cached.exists():
        return cached
    if not download:
        return None
    for url in BIKE_URLS:
        try:
            with urllib.request.urlopen(url, timeout=30) as response:
                payload = response.read()
            with zipfile.ZipFile(io.BytesIO(payload)) as archive:
                raw = archive.read("hour.csv")
            cache.mkdir(parents=True, exist_ok=True)
            cached.write_bytes(raw)
            return cached
        except Exception:
            continue
    return None


def prepare_bike_dataset(hour_csv_path) -> FunctionalDataset:
    """Build the Saturday dataset from the raw hourly file.

    For every Saturday: covariate x(s) is the temperature in Celsius at
    hour s, response y(t) is log(1 + casual rentals) at hour t, and the
    scalar covariate is the day's average relative humidity in percent.
    Hours never recorded that day are simply absent (the design is
    treated as sparse).  Days with fewer than two recorded hours are
    dropped.
    """
    days: dict[str, list] = {}
    order: list[str] = []
    with open(hour_csv_path, newline="") as handle:
        reader = csv.DictReader(handle)
        required = {"dteday", "weekday", "hr", "temp", "hum", "casual"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{hour_csv_path}: missing columns {sorted(missing)}")
        for row in reader:
            if row["weekday"].strip() != "6":
                continue
            date = row["dteday"].strip()
            if date not in days:
                days[date] = []
                order.append(date)
            days[date].append((
                int(row["hr"]),
                float(row["temp"]) * (_TEMP_MAX - _TEMP_MIN) + _TEMP_MIN,
                float(row["hum"]) * 100.0,
                math.log1p(float(row["casual"])),
            ))
    records = []
    for date in order:
        rows = sorted(days[date])
        if len(rows) < 2:
            continue
        hours = np.array([r[0] for r in rows], dtype=float)
        records.append(SubjectRecord(
            subject_id=date,
            s_grid=hours,
            x_values=np.array([r[1] for r in rows]),
            t_grid=hours,
            y_values=np.array([r[3] for r in rows]),
            scalar_covariates=np.array([np.mean([r[2] for r in rows])]),
        ))
    if not records:
        raise FormatError(f"{hour_csv_path}: no Saturday records found")
    return FunctionalDataset(
        subjects=tuple(records),
        covariate_domain=(0.0, 23.0),
        response_domain=(0.0, 23.0),
        scalar_names=("avg_humidity",),
    )


def load_bike_dataset(cache_dir=None, *, download: bool = True) -> FunctionalDataset | None:
    """Fetch and prepare the Saturday dataset; None when unavailable."""
    path = bike_hour_csv(cache_dir, download=download)
    if path is None:
        return None
    return prepare_bike_dataset(path)


def split_chronological(dataset: FunctionalDataset, n_train: int):
    """Split subjects into the first ``n_train`` and the remainder.

    Subjects are assumed ordered by date, as :func:`prepare_bike_dataset`
    produces them, so the test block is strictly later in time.
    """
    if not 0 < n_train < dataset.n_subjects:
        raise ValueError(
            f"n_train must be in (0, {dataset.n_subjects}), got {n_train}"
        )
    train = dataset.subset(range(n_train))
    test = dataset.subset(range(n_train, dataset.n_subjects))
    return train, test
