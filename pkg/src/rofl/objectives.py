"""Learning objectives: L2-regularized linear SVM (hinge) and ridge least squares."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Features ``N x d`` and one target per row."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"need an N x d matrix and N targets, got {X.shape} and {y.shape}")
        if X.shape[0] < 1:
            raise ValueError("dataset is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite feature or target")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return type(self)(self.features[idx], self.labels[idx])


class LabeledDataset(Dataset):
    """Binary classification data with labels in ``{+1, -1}``."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.abs(self.labels) == 1.0):
            raise ValueError("labels must be +1 or -1")


def concat(datasets: Sequence[Dataset]) -> Dataset:
    cls = type(datasets[0])
    return cls(np.vstack([ds.features for ds in datasets]),
               np.concatenate([ds.labels for ds in datasets]))


@dataclass(frozen=True)
class Objective:
    kind: str
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("hinge", "quadratic"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError(f"regularization must be >= 0, got {self.lam}")


HINGE = "hinge"
QUADRATIC = "quadratic"


def minibatch_gradient(obj: Objective, w: np.ndarray, data: Dataset, batch) -> np.ndarray:
    """Average (sub)gradient over the rows in ``batch`` plus the ridge term."""
    idx = np.asarray(batch, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ValueError("empty mini-batch")
    if idx.min() < 0 or idx.max() >= len(data):
        raise IndexError(f"batch index out of range for dataset of size {len(data)}")
    X = data.features[idx]
    y = data.labels[idx]
    if obj.kind == HINGE:
        active = y * (X @ w) < 1.0
        g = -(y[active] @ X[active]) / idx.size
    else:
        g = X.T @ (X @ w - y) / idx.size
    return g + obj.lam * w


def full_gradient(obj: Objective, w: np.ndarray, data: Dataset) -> np.ndarray:
    return minibatch_gradient(obj, w, data, np.arange(len(data)))


def loss(obj: Objective, w: np.ndarray, data: Dataset) -> float:
    """Mean hinge loss (or half squared residual) plus ``lam/2 ||w||^2``."""
    z = data.features @ w
    if obj.kind == HINGE:
        data_term = np.mean(np.maximum(0.0, 1.0 - data.labels * z))
    else:
        data_term = 0.5 * np.mean((z - data.labels) ** 2)
    return float(data_term + 0.5 * obj.lam * (w @ w))


def global_loss(obj: Objective, w: np.ndarray, clients: Sequence[Dataset]) -> float:
    """Equal-weight average of the client losses."""
    return float(np.mean([loss(obj, w, ds) for ds in clients]))


def accuracy(w: np.ndarray, data: Dataset) -> float:
    """Fraction of rows with ``sign(<w, x>) == y``; a zero score counts as +1."""
    pred = np.where(data.features @ w >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == data.labels))


class QuadraticConstants(NamedTuple):
    mu: float
    lip: float
    w_star: np.ndarray
    f_star: float


def quadratic_hessian(obj: Objective, clients: Sequence[Dataset]) -> np.ndarray:
    d = clients[0].dim
    gram = sum(ds.features.T @ ds.features / len(ds) for ds in clients) / len(clients)
    return gram + obj.lam * np.eye(d)


def quadratic_constants(obj: Objective, clients: Sequence[Dataset]) -> QuadraticConstants:
    """Exact strong convexity, smoothness, minimizer and minimum of the global objective."""
    if obj.kind != QUADRATIC:
        raise ValueError("quadratic_constants needs a quadratic objective")
    hess = quadratic_hessian(obj, clients)
    eig = np.linalg.eigvalsh(hess)
    if not eig[0] > 1e-12 * max(eig[-1], 1.0):
        raise np.linalg.LinAlgError(f"global Hessian is singular (min eigenvalue {eig[0]:.3e})")
    rhs = sum(ds.features.T @ ds.labels / len(ds) for ds in clients) / len(clients)
    w_star = np.linalg.solve(hess, rhs)
    return QuadraticConstants(float(eig[0]), float(eig[-1]), w_star,
                              global_loss(obj, w_star, clients))
