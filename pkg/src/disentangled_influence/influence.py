"""Shapley-value direct influence with interventional (background) expectations.

A coalition ``S`` is evaluated by overwriting the columns in ``S`` of every
background row with the explained instance's values and averaging the model
output. Exact mode enumerates all ``2**n`` coalitions; permutation mode
averages marginal contributions along random feature orderings.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_matrix, check_is_fitted, model_output


class WidthLimitError(ValueError):
    """Exact enumeration refused because there are too many features."""


@dataclass
class ShapConfig:
    mode: str = "exact"
    background_size: int = 50
    permutation_samples: int = 200
    seed: int = 0
    exact_width_limit: int = 12

    def __post_init__(self):
        if self.mode not in ("exact", "permutation", "auto"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "permutation" and self.permutation_samples < 1:
            raise ValueError("permutation_samples must be at least 1")
        if self.background_size < 1:
            raise ValueError("background_size must be at least 1")


@dataclass
class BackgroundSet:
    rows: np.ndarray

    def __post_init__(self):
        self.rows = as_matrix(self.rows, "background")
        if self.rows.shape[0] < 1:
            raise ValueError("background needs at least one row")

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @classmethod
    def from_rows(cls, rows, size: Optional[int] = None, seed: Optional[int] = None):
        """First ``size`` rows, or a seeded subsample when ``seed`` is given."""
        rows = as_matrix(rows, "background")
        if size is None or size >= rows.shape[0]:
            return cls(rows)
        if seed is None:
            return cls(rows[:size])
        idx = np.sort(np.random.default_rng(seed).choice(rows.shape[0], size, replace=False))
        return cls(rows[idx])


@dataclass
class InfluenceValues:
    """Per-instance, per-feature Shapley values."""

    values: np.ndarray
    base_value: float
    feature_names: List[str] = None
    std_err: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.feature_names is None:
            self.feature_names = [f"f{i}" for i in range(self.values.shape[1])]
        if len(self.feature_names) != self.values.shape[1]:
            raise ValueError("feature_names must match the number of value columns")

    def __len__(self):
        return self.values.shape[0]

    def column(self, name) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def mean_abs(self) -> np.ndarray:
        return np.abs(self.values).mean(axis=0)

    def to_csv(self, path=None) -> str:
        """One row per instance, one column per feature, then ``base_value``.

        Floats are written with ``repr`` so they reload bit-exactly.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.feature_names, "base_value"])
        for row in self.values:
            w.writerow([repr(float(v)) for v in row] + [repr(float(self.base_value))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path) -> "InfluenceValues":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        data = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
        base = float(data[0, -1]) if len(body) else float("nan")
        return cls(data[:, :-1], base, header[:-1])

    def to_text(self) -> str:
        lines = [f"base_value: {self.base_value!r}", f"instances: {len(self)}"]
        for name, m in zip(self.feature_names, self.mean_abs()):
            lines.append(f"{name}: mean_abs={float(m)!r}")
        return "\n".join(lines) + "\n"


def _background(background) -> np.ndarray:
    if isinstance(background, BackgroundSet):
        return background.rows
    return as_matrix(background, "background")


def _check_widths(instance, bg):
    if instance.shape[-1] != bg.shape[1]:
        raise ValueError(
            f"instance width {instance.shape[-1]} does not match background width {bg.shape[1]}"
        )


def masked_expectation(model, instance, active, background) -> float:
    """Mean model output over the background with columns ``active`` set from ``instance``."""
    bg = _background(background)
    instance = np.asarray(instance, dtype=np.float64).reshape(-1)
    _check_widths(instance, bg)
    rows = bg.copy()
    idx = list(active)
    rows[:, idx] = instance[idx]
    return float(model_output(model, rows).mean())


def _coalition_values(model, instance, bg, masks: np.ndarray) -> np.ndarray:
    """Value of each coalition in ``masks`` (boolean, ``(m, n)``)."""
    k = bg.shape[0]
    rows = np.where(masks[:, None, :], instance[None, None, :], bg[None, :, :])
    out = model_output(model, rows.reshape(-1, bg.shape[1]))
    return out.reshape(masks.shape[0], k).mean(axis=1)


def shapley_weights(n: int) -> np.ndarray:
    """``|S|! (n - |S| - 1)! / n!`` for ``|S| = 0 .. n-1``, via log-gamma."""
    s = np.arange(n)
    return np.exp([math.lgamma(v + 1) + math.lgamma(n - v) - math.lgamma(n + 1) for v in s])


def _all_masks(n: int) -> np.ndarray:
    codes = np.arange(2 ** n)
    return ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)


def shap_exact(model, instance, background, cfg: Optional[ShapConfig] = None,
               feature_names=None) -> InfluenceValues:
    """Exact Shapley values for a single instance by subset enumeration."""
    cfg = cfg or ShapConfig()
    bg = _background(background)
    instance = np.asarray(instance, dtype=np.float64).reshape(-1)
    _check_widths(instance, bg)
    n = instance.shape[0]
    if n > cfg.exact_width_limit:
        raise WidthLimitError(
            f"{n} features exceeds exact_width_limit={cfg.exact_width_limit}; "
            "use mode='permutation'"
        )
    masks = _all_masks(n)
    v = _coalition_values(model, instance, bg, masks)
    sizes = masks.sum(axis=1)
    w = shapley_weights(n)
    codes = np.arange(2 ** n)
    phi = np.empty(n)
    for i in range(n):
        without = codes[(codes >> i) & 1 == 0]
        phi[i] = np.sum(w[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return InfluenceValues(phi[None, :], float(v[0]), feature_names)


def shap_permutation(model, instance, background, cfg: Optional[ShapConfig] = None,
                     instance_index: int = 0, feature_names=None,
                     chunk: int = 32) -> InfluenceValues:
    """Permutation-sampling Shapley estimate with per-feature standard errors.

    The random stream is seeded by ``(cfg.seed, instance_index)``. Each sampled
    ordering's marginal contributions telescope to ``model(instance) - base``,
    so efficiency holds for every sample count.
    """
    cfg = cfg or ShapConfig(mode="permutation")
    bg = _background(background)
    instance = np.asarray(instance, dtype=np.float64).reshape(-1)
    _check_widths(instance, bg)
    n = instance.shape[0]
    P = cfg.permutation_samples
    rng = np.random.default_rng([cfg.seed, instance_index])
    perms = np.array([rng.permutation(n) for _ in range(P)])
    contrib = np.empty((P, n))
    base = None
    for start in range(0, P, chunk):
        block = perms[start:start + chunk]
        b = block.shape[0]
        # masks[j, t] = coalition after adding the first t features of ordering j
        ranks = np.empty_like(block)
        np.put_along_axis(ranks, block, np.arange(n)[None, :].repeat(b, 0), axis=1)
        masks = ranks[:, None, :] < np.arange(n + 1)[None, :, None]
        v = _coalition_values(model, instance, bg, masks.reshape(-1, n)).reshape(b, n + 1)
        if base is None:
            base = float(v[0, 0])
        steps = np.diff(v, axis=1)
        c = np.empty((b, n))
        np.put_along_axis(c, block, steps, axis=1)
        contrib[start:start + b] = c
    phi = contrib.mean(axis=0)
    if P > 1:
        se = contrib.std(axis=0, ddof=1) / math.sqrt(P)
    else:
        se = np.full(n, np.nan)
    return InfluenceValues(phi[None, :], base, feature_names, se[None, :])


def shap_batch(model, instances, background, cfg: Optional[ShapConfig] = None,
               feature_names=None) -> InfluenceValues:
    """Row-wise Shapley values; ``auto`` mode picks exact when the width allows."""
    cfg = cfg or ShapConfig()
    X = as_matrix(instances, "instances")
    bg = _background(background)
    _check_widths(X[0] if len(X) else np.zeros(bg.shape[1]), bg)
    mode = cfg.mode
    if mode == "auto":
        mode = "exact" if X.shape[1] <= cfg.exact_width_limit else "permutation"
    rows, errs, base = [], [], None
    for i, x in enumerate(X):
        if mode == "exact":
            r = shap_exact(model, x, bg, cfg)
        else:
            r = shap_permutation(model, x, bg, cfg, instance_index=i)
            errs.append(r.std_err[0])
        rows.append(r.values[0])
        base = r.base_value
    if base is None:
        base = float(model_output(model, bg).mean())
    values = np.array(rows).reshape(len(rows), bg.shape[1])
    return InfluenceValues(values, base, feature_names, np.array(errs) if errs else None)


class ShapleyExplainer(BaseEstimator):
    """Estimator-style front end: ``fit`` stores the background, ``transform`` explains.

    Parameters
    ----------
    model : callable or estimator
        Maps an ``(n_rows, n_features)`` array to one output per row.
    mode, background_size, permutation_samples, random_state, exact_width_limit
        See :class:`ShapConfig`.
    """

    def __init__(self, model=None, mode="auto", background_size=50, permutation_samples=200,
                 random_state=0, exact_width_limit=12):
        self.model = model
        self.mode = mode
        self.background_size = background_size
        self.permutation_samples = permutation_samples
        self.random_state = random_state
        self.exact_width_limit = exact_width_limit

    def _config(self):
        return ShapConfig(self.mode, self.background_size, self.permutation_samples,
                          self.random_state, self.exact_width_limit)

    def fit(self, X, y=None):
        self.background_ = BackgroundSet.from_rows(X, self.background_size)
        self.n_features_in_ = self.background_.rows.shape[1]
        self.expected_value_ = float(model_output(self.model, self.background_.rows).mean())
        return self

    def explain(self, X, feature_names=None) -> InfluenceValues:
        check_is_fitted(self, "background_")
        return shap_batch(self.model, X, self.background_, self._config(), feature_names)

    def transform(self, X):
        return self.explain(X).values
