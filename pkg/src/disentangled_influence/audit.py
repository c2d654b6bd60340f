"""Indirect influence audits: explain ``M(g(p, x'))`` in the disentangled space."""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_matrix, check_is_fitted, model_output
from .datasets import TabularDataset
from .disentangler import (
    CONSTANT_FEATURE,
    DisentangleConfig,
    DisentangledRep,
    ErrorReport,
    HandcraftedXYRep,
    error_report,
    train_adversarial,
)
from .influence import BackgroundSet, InfluenceValues, ShapConfig, shap_batch
from .nnkit import DivergenceError

logger = logging.getLogger(__name__)

DR_SOURCES = ("learned", "handcrafted_xy", "preloaded")


class DisentangledModel:
    """``M'(p, x') = M(g(p, x'))`` with ``p`` in column 0 of the input."""

    def __init__(self, rep: DisentangledRep, model):
        self.rep = rep
        self.model = model
        width = getattr(model, "input_dim", None) or getattr(model, "n_features_in_", None)
        if width is not None and width != rep.n_features:
            raise ValueError(
                f"decoder emits {rep.n_features} columns but the model expects {width}"
            )

    @property
    def input_dim(self) -> int:
        return self.rep.latent_dim + 1

    @property
    def feature_of_interest(self) -> str:
        return self.rep.feature_of_interest

    def __call__(self, Z) -> np.ndarray:
        Z = as_matrix(Z, "disentangled inputs")
        if Z.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} columns, got {Z.shape[1]}")
        return model_output(self.model, self.rep.decode_joint(Z))


def build_disentangled_model(rep: DisentangledRep, model) -> DisentangledModel:
    return DisentangledModel(rep, model)


def feature_seed(master_seed: int, feature: str) -> int:
    """Seed for one feature's audit, independent of plan order."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(feature.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


@dataclass
class AuditPlan:
    features: List[str]
    dr_source: str = "learned"
    shap: ShapConfig = field(default_factory=ShapConfig)
    dr: DisentangleConfig = field(default_factory=DisentangleConfig)
    master_seed: int = 0
    n_instances: Optional[int] = 100
    preloaded: Optional[Dict[str, DisentangledRep]] = None

    def __post_init__(self):
        self.features = list(self.features)
        if not self.features:
            raise ValueError("an audit plan needs at least one feature")
        if len(set(self.features)) != len(self.features):
            raise ValueError("plan features must be distinct")
        if self.dr_source not in DR_SOURCES:
            raise ValueError(f"unknown dr_source {self.dr_source!r}")
        if self.dr_source == "preloaded" and not self.preloaded:
            raise ValueError("dr_source='preloaded' needs the preloaded reps")


@dataclass
class FeatureAudit:
    feature: str
    influence: Optional[InfluenceValues] = None  # one column: the feature of interest
    feature_values: Optional[np.ndarray] = None  # p for each audited instance
    errors: Optional[ErrorReport] = None
    seed: Optional[int] = None
    failure: Optional[str] = None
    rep: Optional[DisentangledRep] = None

    @property
    def failed(self) -> bool:
        return self.failure is not None


@dataclass
class AuditReport:
    features: Dict[str, FeatureAudit]
    direct: Optional[InfluenceValues] = None
    meta: dict = field(default_factory=dict)

    def indirect(self, feature) -> np.ndarray:
        return self.features[feature].influence.values[:, 0]

    def succeeded(self) -> List[str]:
        return [f for f, a in self.features.items() if not a.failed]


def audit_split(data: TabularDataset, shap: ShapConfig, n_instances: Optional[int]):
    """``(background_rows, instance_rows)``: train-split background, test-split instances."""
    train, test = data.train, data.test
    if len(test.values) == 0:
        test = train
    background = BackgroundSet.from_rows(train.values, shap.background_size)
    instances = test.values if n_instances is None else test.values[:n_instances]
    return background, instances


def _obtain_rep(data: TabularDataset, feature: str, plan: AuditPlan, seed: int) -> DisentangledRep:
    if plan.dr_source == "handcrafted_xy":
        return HandcraftedXYRep(feature)
    if plan.dr_source == "preloaded":
        return plan.preloaded[feature]
    cfg = DisentangleConfig(**{**asdict(plan.dr), "seed": seed,
                               "p_is_binary": data.is_binary(feature)})
    rep, _ = train_adversarial(data, feature, cfg)
    return rep


def audit_feature(data: TabularDataset, model, plan: AuditPlan, feature: str) -> FeatureAudit:
    """Audit one feature of interest; training failures are recorded, not raised."""
    seed = feature_seed(plan.master_seed, feature)
    try:
        rep = _obtain_rep(data, feature, plan, seed)
    except DivergenceError as exc:
        return FeatureAudit(feature, seed=seed, failure=f"divergence at step {exc.step}")
    background, instances = audit_split(data, plan.shap, plan.n_instances)
    m_prime = build_disentangled_model(rep, model)
    bg_latent = rep.encode_joint(background.rows)
    x_latent = rep.encode_joint(instances)
    shap_cfg = ShapConfig(**{**asdict(plan.shap), "seed": seed})
    full = shap_batch(m_prime, x_latent, bg_latent, shap_cfg, rep.joint_names())
    se = None if full.std_err is None else full.std_err[:, :1]
    influence = InfluenceValues(full.values[:, :1], full.base_value, [feature], se)
    errors = error_report(rep, model, instances)
    return FeatureAudit(feature, influence, x_latent[:, 0].copy(), errors, seed, rep=rep)


def _audit_task(args):
    return audit_feature(*args)


def disentangled_influence_audit(data: TabularDataset, model, plan: AuditPlan,
                                 jobs: int = 1, direct: bool = False) -> AuditReport:
    """Indirect influence of each planned feature.

    Per feature: obtain a representation, explain the decoder-wrapped model on
    the encoded test instances against the encoded training background, and
    attach error diagnostics. Features are independent; ``jobs > 1`` fans them
    out over processes with identical results.
    """
    for f in plan.features:
        data.column_index(f)
    tasks = [(data, model, plan, f) for f in plan.features]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_audit_task, tasks))
    else:
        results = [_audit_task(t) for t in tasks]
    report = AuditReport({r.feature: r for r in results})
    if direct:
        report.direct = direct_influence_audit(data, model, plan.shap, plan.n_instances)
    report.meta = {
        "master_seed": plan.master_seed,
        "dr_source": plan.dr_source,
        "n_train": int(np.sum(data.split == "train")),
        "n_test": int(np.sum(data.split == "test")),
        "n_instances": int(len(audit_split(data, plan.shap, plan.n_instances)[1])),
        "seeds": {r.feature: r.seed for r in results},
    }
    return report


def direct_influence_audit(data: TabularDataset, model, shap: Optional[ShapConfig] = None,
                           n_instances: Optional[int] = 100) -> InfluenceValues:
    """Shapley values on the raw feature space, same background conventions."""
    shap = shap or ShapConfig()
    background, instances = audit_split(data, shap, n_instances)
    return shap_batch(model, instances, background, shap, list(data.feature_names))


def sensitivity_decomposition(rep: DisentangledRep, model, instance, h: float = 1e-4) -> dict:
    """Finite-difference sensitivities of the prediction to ``p`` at one instance.

    ``dy_dp_total`` moves ``p`` through the decoder with ``x'`` fixed;
    ``dM_dp_direct`` moves only the ``p`` column of the reconstructed point.
    Near a domain boundary a one-sided difference is used and ``one_sided`` is
    set.
    """
    instance = np.asarray(instance, dtype=np.float64).reshape(1, -1)
    p, z = rep.encode(instance)
    p0 = float(p[0])
    xhat = rep.decode(p, z)
    j = rep.p_index

    def total(pv):
        return float(model_output(model, rep.decode(np.array([pv]), z))[0])

    def direct(pv):
        x = xhat.copy()
        x[0, j] = pv
        return float(model_output(model, x)[0])

    one_sided = False
    try:
        total(p0 - h)
        lo, hi, denom = p0 - h, p0 + h, 2 * h
    except ValueError:
        lo, hi, denom = p0, p0 + h, h
        one_sided = True
    return {
        "feature": rep.feature_of_interest,
        "p": p0,
        "dy_dp_total": (total(hi) - total(lo)) / denom,
        "dM_dp_direct": (direct(hi) - direct(lo)) / denom,
        "one_sided": one_sided,
    }


def aggregate_influence(report: AuditReport) -> List[dict]:
    """Mean |phi|, max |phi| and mean phi per audited feature, in plan order."""
    rows = []
    for name, fa in report.features.items():
        if fa.failed:
            rows.append({"feature": name, "kind": "indirect", "mean_abs": None,
                         "max_abs": None, "mean": None, "status": fa.failure})
            continue
        rows.append(_summary_row(name, "indirect", fa.influence.values[:, 0]))
    if report.direct is not None:
        for k, name in enumerate(report.direct.feature_names):
            rows.append(_summary_row(name, "direct", report.direct.values[:, k]))
    return rows


def _summary_row(name, kind, phi):
    phi = np.asarray(phi, dtype=np.float64)
    # sorted sums keep the aggregates independent of instance order
    a = np.sort(np.abs(phi))
    return {"feature": name, "kind": kind, "mean_abs": float(np.sum(a) / len(a)),
            "max_abs": float(a[-1]), "mean": float(np.sum(np.sort(phi)) / len(phi)),
            "status": "ok"}


class DisentangledInfluenceAuditor(BaseEstimator):
    """Estimator front end for :func:`disentangled_influence_audit`.

    ``fit(X)`` trains one representation per feature on ``X`` and keeps a
    background; ``transform(X)`` returns the indirect influence of each
    feature (one column per audited feature).
    """

    def __init__(self, model=None, features=None, feature_names=None, beta=0.5, latent_dim=4,
                 hidden=(10, 10), learning_rate=0.01, batch_size=16, train_steps=10_000,
                 background_size=50, mode="auto", permutation_samples=200, random_state=0):
        self.model = model
        self.features = features
        self.feature_names = feature_names
        self.beta = beta
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.background_size = background_size
        self.mode = mode
        self.permutation_samples = permutation_samples
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        names = list(self.feature_names or [f"f{i}" for i in range(X.shape[1])])
        data = TabularDataset(names, X, np.zeros(len(X)))
        features = list(self.features or names)
        cfg = DisentangleConfig(self.beta, self.latent_dim, self.learning_rate, self.batch_size,
                                self.train_steps, 0, False, tuple(self.hidden))
        self.reps_ = {f: _obtain_rep(data, f, AuditPlan([f], "learned", dr=cfg),
                                     feature_seed(self.random_state, f)) for f in features}
        self.background_ = BackgroundSet.from_rows(X, self.background_size)
        self.features_ = features
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "reps_")
        X = as_matrix(X, "X")
        cfg = ShapConfig(self.mode, self.background_size, self.permutation_samples, self.random_state)
        cols = []
        for f in self.features_:
            rep = self.reps_[f]
            m = build_disentangled_model(rep, self.model)
            vals = shap_batch(m, rep.encode_joint(X), rep.encode_joint(self.background_.rows), cfg)
            cols.append(vals.values[:, 0])
        return np.column_stack(cols)
