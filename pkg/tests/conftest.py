"""Shared fixtures: small deterministic datasets for fast tests."""
import numpy as np
import pytest

from affpc.funcdata import FunctionalDataset, SubjectRecord


def make_dense_dataset(n=40, n_s=31, n_t=41, seed=0, scalars=False, noise=0.1):
    """Small dense dataset with a smooth nonlinear relation."""
    rng = np.random.default_rng(seed)
    s = np.linspace(0.0, 1.0, n_s)
    t = np.linspace(0.0, 1.0, n_t)
    records = []
    for i in range(n):
        a = rng.normal(0.0, 1.0, 3) * [1.0, 0.5, 0.25]
        x = a[0] + a[1] * np.sqrt(2) * np.sin(np.pi * s) + a[2] * np.sqrt(2) * np.cos(np.pi * s)
        signal = np.trapezoid(np.sin(x)[:, None] * (1.0 + s[:, None] * t[None, :]), s, axis=0)
        y = signal + rng.normal(0.0, noise, n_t)
        records.append(SubjectRecord(
            subject_id=f"d{i}",
            s_grid=s,
            x_values=x + rng.normal(0.0, noise, n_s),
            t_grid=t,
            y_values=y,
            scalar_covariates=np.array([rng.normal()]) if scalars else None,
        ))
    return FunctionalDataset(tuple(records), (0.0, 1.0), (0.0, 1.0),
                             ("z1",) if scalars else ())


def make_sparse_dataset(n=40, seed=0, noise=0.1):
    """Sparse dataset: per-subject random subsets of the dense grids."""
    rng = np.random.default_rng(seed)
    s_all = np.linspace(0.0, 1.0, 31)
    t_all = np.linspace(0.0, 1.0, 41)
    records = []
    for i in range(n):
        s_idx = np.sort(rng.choice(31, size=rng.integers(18, 24), replace=False))
        t_idx = np.sort(rng.choice(41, size=rng.integers(14, 20), replace=False))
        s, t = s_all[s_idx], t_all[t_idx]
        a = rng.normal(0.0, 1.0, 3) * [1.0, 0.5, 0.25]
        x = a[0] + a[1] * np.sqrt(2) * np.sin(np.pi * s) + a[2] * np.sqrt(2) * np.cos(np.pi * s)
        signal = np.trapezoid(
            np.sin(a[0] + a[1] * np.sqrt(2) * np.sin(np.pi * s_all)
                   + a[2] * np.sqrt(2) * np.cos(np.pi * s_all))[:, None]
            * (1.0 + s_all[:, None] * t[None, :]),
            s_all, axis=0,
        )
        records.append(SubjectRecord(
            subject_id=f"s{i}",
            s_grid=s,
            x_values=x + rng.normal(0.0, noise, s.size),
            t_grid=t,
            y_values=signal + rng.normal(0.0, noise, t.size),
        ))
    return FunctionalDataset(tuple(records), (0.0, 1.0), (0.0, 1.0))


@pytest.fixture(scope="session")
def dense_dataset():
    return make_dense_dataset()


@pytest.fixture(scope="session")
def sparse_dataset():
    return make_sparse_dataset()


@pytest.fixture(scope="session")
def scalar_dataset():
    return make_dense_dataset(scalars=True, seed=3)
