"""Input checks shared across the package."""

import numpy as np
from sklearn.exceptions import NotFittedError


def as_matrix(a, name="array") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (1-D input becomes one row)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def check_same_rows(a, b):
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row count mismatch: {a.shape[0]} vs {b.shape[0]}")


def check_is_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(
            f"{type(est).__name__} is not fitted yet; call fit before using it"
        )


def model_output(model, X) -> np.ndarray:
    """Evaluate a model on ``X`` and return a 1-D vector of scalar outputs.

    ``model`` may be a callable, a :class:`~disentangled_influence.nnkit.DenseNet`
    or an estimator with ``predict_proba``/``predict``.
    """
    if hasattr(model, "predict_proba"):
        out = model.predict_proba(X)[:, 1]
    elif callable(model):
        out = model(X)
    elif hasattr(model, "predict"):
        out = model.predict(X)
    else:
        raise TypeError(f"cannot evaluate model of type {type(model).__name__}")
    out = np.asarray(out, dtype=np.float64)
    if out.ndim == 2:
        if out.shape[1] != 1:
            raise ValueError("only single-output models can be audited")
        out = out[:, 0]
    return out
