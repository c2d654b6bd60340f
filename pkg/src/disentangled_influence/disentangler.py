"""Disentangled representations that separate one feature of interest ``p``.

An encoder ``f`` maps a full instance to latents ``x'``, a decoder ``g`` maps
``(p, x')`` back to the instance and a discriminator ``h`` tries to recover
``p`` from ``x'`` alone. Training plays ``f``/``g`` against ``h``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import nnkit
from ._validation import as_matrix, check_is_fitted, model_output
from .datasets import XY_COLUMNS, XY_FAMILIES, TabularDataset
from .nnkit import DenseNet, DivergenceError, Layer

logger = logging.getLogger(__name__)

CONSTANT_FEATURE = "constant_feature"


@dataclass
class DisentangleConfig:
    beta: float = 0.5
    latent_dim: int = 4
    learning_rate: float = 0.01
    batch_size: int = 16
    train_steps: int = 10_000
    seed: int = 0
    p_is_binary: bool = False
    hidden: Tuple[int, ...] = (10, 10)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        nnkit.TrainConfig(self.learning_rate, self.batch_size, self.train_steps, 0)

    @classmethod
    def synthetic(cls, **overrides) -> "DisentangleConfig":
        return cls(**{**dict(beta=0.5, latent_dim=4, hidden=(10, 10), train_steps=10_000), **overrides})

    @classmethod
    def adult(cls, **overrides) -> "DisentangleConfig":
        return cls(**{**dict(beta=0.5, latent_dim=10, hidden=(25, 12), train_steps=4_000), **overrides})


class DisentangledRep:
    """Common interface of learned and handcrafted representations."""

    kind: str
    feature_of_interest: str
    feature_names: List[str]
    latent_dim: int

    @property
    def p_index(self) -> int:
        return self.feature_names.index(self.feature_of_interest)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check_instances(self, X) -> np.ndarray:
        X = as_matrix(X, "instances")
        if X.shape[1] != self.n_features:
            raise ValueError(f"instances have {X.shape[1]} columns, expected {self.n_features}")
        return X

    def encode(self, X) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def decode(self, p, latents) -> np.ndarray:
        raise NotImplementedError

    def discriminate(self, latents) -> Optional[np.ndarray]:
        return None

    def encode_joint(self, X) -> np.ndarray:
        """``[p, x']`` as one matrix, ``p`` in column 0."""
        p, z = self.encode(X)
        return np.column_stack([p, z])

    def decode_joint(self, Z) -> np.ndarray:
        Z = as_matrix(Z, "latents")
        return self.decode(Z[:, 0], Z[:, 1:])

    def joint_names(self) -> List[str]:
        return [self.feature_of_interest] + [f"z{i}" for i in range(self.latent_dim)]


class LearnedRep(DisentangledRep):
    """Adversarially trained ``(f, g, h)``.

    The decoder net predicts every column except ``p`` through a sigmoid that
    is rescaled to the training range of each column; ``p`` itself is passed
    through. The discriminator head is rescaled the same way for continuous
    ``p``.
    """

    kind = "learned"

    def __init__(self, encoder_f: DenseNet, decoder_g: DenseNet, discriminator_h: DenseNet,
                 feature_of_interest: str, feature_names: Sequence[str], config: DisentangleConfig,
                 x_low, x_span, p_low: float, p_span: float, in_mean=None, in_scale=None):
        self.encoder_f = encoder_f
        self.decoder_g = decoder_g
        self.discriminator_h = discriminator_h
        self.feature_of_interest = feature_of_interest
        self.feature_names = list(feature_names)
        self.config = config
        self.x_low = np.asarray(x_low, dtype=np.float64)
        self.x_span = np.asarray(x_span, dtype=np.float64)
        self.p_low = float(p_low)
        self.p_span = float(p_span)
        d = len(self.feature_names)
        self.in_mean = np.zeros(d) if in_mean is None else np.asarray(in_mean, dtype=np.float64)
        self.in_scale = np.ones(d) if in_scale is None else np.asarray(in_scale, dtype=np.float64)
        if encoder_f.input_dim != d or encoder_f.output_dim != config.latent_dim:
            raise ValueError("encoder must map the full feature width to latent_dim")
        if decoder_g.input_dim != config.latent_dim + 1 or decoder_g.output_dim != d - 1:
            raise ValueError("decoder must map latent_dim + 1 inputs to the non-p columns")
        if discriminator_h.input_dim != config.latent_dim or discriminator_h.output_dim != 1:
            raise ValueError("discriminator must map latents to a single output")

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def encode(self, X):
        X = self._check_instances(X)
        return X[:, self.p_index].copy(), nnkit.forward(self.encoder_f, self.encoder_input(X))

    def encoder_input(self, X):
        """Encoder inputs are standardized with training-split statistics."""
        return (X - self.in_mean) / self.in_scale

    def decoder_input(self, p, latents):
        """``p`` enters the decoder standardized the same way as in the encoder."""
        j = self.p_index
        return np.column_stack([(p - self.in_mean[j]) / self.in_scale[j], latents])

    def decode(self, p, latents):
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        latents = as_matrix(latents, "latents")
        if latents.shape[1] != self.latent_dim or latents.shape[0] != p.shape[0]:
            raise ValueError("p and latents must be row-aligned and latents of width latent_dim")
        rest = self.x_low + self.x_span * nnkit.forward(self.decoder_g, self.decoder_input(p, latents))
        return np.insert(rest, self.p_index, p, axis=1)

    def discriminate(self, latents):
        out = nnkit.forward(self.discriminator_h, as_matrix(latents, "latents"))[:, 0]
        return self.p_low + self.p_span * out

    def __eq__(self, other):
        return (isinstance(other, LearnedRep)
                and self.encoder_f == other.encoder_f
                and self.decoder_g == other.decoder_g
                and self.discriminator_h == other.discriminator_h
                and self.feature_of_interest == other.feature_of_interest
                and self.feature_names == other.feature_names
                and self.config == other.config
                and np.array_equal(self.x_low, other.x_low)
                and np.array_equal(self.x_span, other.x_span)
                and np.array_equal(self.in_mean, other.in_mean)
                and np.array_equal(self.in_scale, other.in_scale)
                and self.p_low == other.p_low and self.p_span == other.p_span)


class HandcraftedXYRep(DisentangledRep):
    """Exact representation for the x + y data with ``p`` one of its nine columns.

    The latents are the base values of the two families that do not contain
    ``p`` (in x, y, c order). The decoder recovers ``p``'s base value as ``p``,
    ``p / 2`` or ``sqrt(p)`` and rebuilds all nine columns.
    """

    kind = "handcrafted_xy"
    latent_dim = 2

    def __init__(self, feature_of_interest: str):
        if feature_of_interest not in XY_COLUMNS:
            raise ValueError(f"{feature_of_interest!r} is not one of the x+y columns")
        self.feature_of_interest = feature_of_interest
        self.feature_names = list(XY_COLUMNS)
        self.family = next(f for f, cols in XY_FAMILIES.items() if feature_of_interest in cols)
        self.other_families = [f for f in XY_FAMILIES if f != self.family]
        self.proxy = XY_FAMILIES[self.family].index(feature_of_interest)  # 0: v, 1: 2v, 2: v^2
        self.config = None

    def encode(self, X):
        X = self._check_instances(X)
        z = np.column_stack([X[:, XY_COLUMNS.index(f)] for f in self.other_families])
        return X[:, self.p_index].copy(), z

    def base_from_p(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        if self.proxy == 0:
            return p
        if self.proxy == 1:
            return p / 2.0
        if np.any(p < 0):
            raise ValueError("a squared feature of interest cannot be negative")
        return np.sqrt(p)

    def decode(self, p, latents):
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        latents = as_matrix(latents, "latents")
        if latents.shape != (p.shape[0], 2):
            raise ValueError("latents must have two columns aligned with p")
        bases = {self.family: self.base_from_p(p)}
        for k, fam in enumerate(self.other_families):
            bases[fam] = latents[:, k]
        cols = []
        for fam in XY_FAMILIES:
            v = bases[fam]
            cols.extend([v, 2.0 * v, v * v])
        out = np.column_stack(cols)
        # p itself is passed through unchanged
        out[:, self.p_index] = p
        return out

    def joint_names(self):
        return [self.feature_of_interest] + list(self.other_families)


# -- training -----------------------------------------------------------

# keeps reconstruction targets away from the sigmoid asymptotes
RANGE_MARGIN = 0.25


def _ranges(X, margin=None):
    """Sigmoid output range per column: the data range widened by ``margin`` on each side."""
    margin = RANGE_MARGIN if margin is None else margin
    low = X.min(axis=0)
    span = X.max(axis=0) - low
    span = np.where(span > 0, span, 1.0)
    return low - margin * span, span * (1 + 2 * margin)


def init_rep(feature_names, p_index, cfg: DisentangleConfig, X, rng) -> LearnedRep:
    d = len(feature_names)
    f = nnkit.init_net([d, *cfg.hidden, cfg.latent_dim], "relu", "linear", rng)
    g = nnkit.init_net([cfg.latent_dim + 1, *cfg.hidden, d - 1], "relu", "sigmoid", rng)
    h = nnkit.init_net([cfg.latent_dim, *cfg.hidden, 1], "relu", "sigmoid", rng)
    rest = np.delete(X, p_index, axis=1)
    x_low, x_span = _ranges(rest)
    if cfg.p_is_binary:
        p_low, p_span = 0.0, 1.0
    else:
        lo, sp = _ranges(X[:, [p_index]])
        p_low, p_span = float(lo[0]), float(sp[0])
    in_mean = X.mean(axis=0)
    in_scale = X.std(axis=0)
    in_scale = np.where(in_scale > 0, in_scale, 1.0)
    return LearnedRep(f, g, h, feature_names[p_index], feature_names, cfg, x_low, x_span,
                      p_low, p_span, in_mean, in_scale)


@dataclass
class StepLosses:
    enc: float
    dec: float
    disc: float


def _disc_loss_and_grad(rep: LearnedRep, z, pb):
    """Discriminator loss on latents ``z`` and its gradient at the sigmoid output.

    Returns ``(loss, cache, grad_out, fused)`` for :func:`nnkit.backprop`.
    """
    h = rep.discriminator_h
    cache = nnkit._forward_cache(h, z)
    s = cache[1][-1]
    if rep.config.p_is_binary:
        loss = nnkit.loss_value("bce", s, pb)
        return loss, cache, (s - pb) / s.size, True
    phat = rep.p_low + rep.p_span * s
    loss = nnkit.loss_value("mse", phat, pb)
    return loss, cache, nnkit.loss_grad("mse", phat, pb) * rep.p_span, False


def adversarial_losses(rep: LearnedRep, xb) -> StepLosses:
    """``(L_enc, L_dec, L_disc)`` of the current networks on a batch."""
    xb = rep._check_instances(xb)
    p, z = rep.encode(xb)
    xhat = rep.decode(p, z)
    dec = nnkit.loss_value("mse", xhat, xb)
    disc, *_ = _disc_loss_and_grad(rep, z, p[:, None])
    return StepLosses(dec - rep.config.beta * disc, dec, disc)


def discriminator_gradients(rep: LearnedRep, xb: np.ndarray):
    """``(L_disc, grads_h)`` for the discriminator on batch ``xb``."""
    z = nnkit.forward(rep.encoder_f, rep.encoder_input(xb))
    loss, cache_h, g_h, fused = _disc_loss_and_grad(rep, z, xb[:, [rep.p_index]])
    grads_h, _ = nnkit.backprop(rep.discriminator_h, cache_h, g_h, fused)
    return loss, grads_h


def encoder_decoder_gradients(rep: LearnedRep, xb: np.ndarray):
    """Losses and gradients of ``L_dec`` w.r.t. ``g`` and ``L_enc`` w.r.t. ``f``.

    Returns ``(losses, grads_g, grads_f)`` with the discriminator held fixed.
    """
    cfg = rep.config
    j = rep.p_index
    pb = xb[:, [j]]
    cache_f = nnkit._forward_cache(rep.encoder_f, rep.encoder_input(xb))
    z = cache_f[1][-1]

    disc, cache_h, g_h, fused = _disc_loss_and_grad(rep, z, pb)
    _, dz_adv = nnkit.backprop(rep.discriminator_h, cache_h, g_h, fused)

    cache_g = nnkit._forward_cache(rep.decoder_g, rep.decoder_input(pb[:, 0], z))
    rest_hat = rep.x_low + rep.x_span * cache_g[1][-1]
    # L_dec averages over all d columns; the passed-through p column adds zero error
    diff = rest_hat - np.delete(xb, j, axis=1)
    dec = float(np.sum(diff ** 2) / xb.size)
    grads_g, d_in = nnkit.backprop(rep.decoder_g, cache_g, 2.0 * diff / xb.size * rep.x_span)

    grads_f, _ = nnkit.backprop(rep.encoder_f, cache_f, d_in[:, 1:] - cfg.beta * dz_adv)
    return StepLosses(dec - cfg.beta * disc, dec, disc), grads_g, grads_f


def adversarial_step(rep: LearnedRep, xb: np.ndarray) -> StepLosses:
    """One discriminator update, then one joint encoder/decoder update on ``xb``.

    The encoder's adversarial term uses the discriminator after its update.
    """
    lr = rep.config.learning_rate
    _, grads_h = discriminator_gradients(rep, xb)
    nnkit.apply_gradients(rep.discriminator_h, grads_h, lr)
    losses, grads_g, grads_f = encoder_decoder_gradients(rep, xb)
    nnkit.apply_gradients(rep.decoder_g, grads_g, lr)
    nnkit.apply_gradients(rep.encoder_f, grads_f, lr)
    return losses


def train_adversarial(data, p, cfg: Optional[DisentangleConfig] = None,
                      feature_names: Optional[Sequence[str]] = None):
    """Train ``(f, g, h)`` for feature ``p``.

    ``data`` is a :class:`TabularDataset` (its training split is used) or a
    plain matrix with ``feature_names``. Returns ``(rep, trace)`` with ``trace``
    an array of ``(L_enc, L_dec, L_disc)`` per step. Raises
    :class:`~disentangled_influence.nnkit.DivergenceError` carrying the trace if a
    loss becomes non-finite.
    """
    cfg = cfg or DisentangleConfig()
    if isinstance(data, TabularDataset):
        X = data.train.values
        feature_names = data.feature_names
    else:
        X = as_matrix(data, "data")
        feature_names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if isinstance(p, (int, np.integer)):
        p = feature_names[p]
    if p not in feature_names:
        raise KeyError(f"unknown feature of interest {p!r}")
    if cfg.latent_dim >= len(feature_names):
        logger.warning("latent_dim %d >= feature count %d; disentanglement may be vacuous",
                       cfg.latent_dim, len(feature_names))
    j = feature_names.index(p)
    rng = np.random.default_rng(cfg.seed)
    rep = init_rep(list(feature_names), j, cfg, X, rng)
    trace = np.empty((cfg.train_steps, 3))
    n = X.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.train_steps):
            xb = X[rng.integers(0, n, size=cfg.batch_size)]
            losses = adversarial_step(rep, xb)
            trace[step] = (losses.enc, losses.dec, losses.disc)
            if not np.all(np.isfinite(trace[step])):
                raise DivergenceError(step, trace[: step + 1])
    return rep, trace


def handcrafted_xy_rep(p) -> HandcraftedXYRep:
    return HandcraftedXYRep(p)


# -- error metrics ------------------------------------------------------

@dataclass
class ErrorReport:
    """Audit-quality diagnostics for one feature of interest.

    ``disentanglement`` is ``None`` when ``p`` is constant on the evaluation
    rows; ``constant_feature`` is then set.
    """

    feature: str
    reconstruction: np.ndarray  # (rows, features): x - x_hat
    prediction: np.ndarray  # (rows,): M(x) - M(x_hat)
    disentanglement: Optional[float]
    p_variance: float
    constant_feature: bool = False

    def summary(self) -> dict:
        return {
            "feature": self.feature,
            "reconstruction_mean_abs": float(np.abs(self.reconstruction).mean()),
            "reconstruction_median_abs": float(np.median(np.abs(self.reconstruction))),
            "prediction_mean_abs": float(np.abs(self.prediction).mean()),
            "disentanglement": CONSTANT_FEATURE if self.constant_feature else self.disentanglement,
        }


def disentanglement_error(p, p_hat) -> Optional[float]:
    """``mean((p - p_hat)^2) / var(p)``; ``None`` when ``p`` is constant."""
    p = np.asarray(p, dtype=np.float64)
    var = float(np.var(p))
    if var == 0.0:
        return None
    return float(np.mean((p - np.asarray(p_hat, dtype=np.float64)) ** 2) / var)


def error_report(rep: DisentangledRep, model, data, discriminator=None) -> ErrorReport:
    """Reconstruction, prediction and disentanglement errors on ``data``.

    ``data`` is a matrix of evaluation rows or a :class:`TabularDataset` (its
    test split is used). Without a discriminator network (handcrafted reps) and
    no explicit ``discriminator`` callable, ``p`` is predicted by its mean over
    the evaluation rows.
    """
    X = data.test.values if isinstance(data, TabularDataset) else as_matrix(data, "data")
    X = rep._check_instances(X)
    p, z = rep.encode(X)
    xhat = rep.decode(p, z)
    pred = model_output(model, X) - model_output(model, xhat)
    if discriminator is not None:
        p_hat = np.asarray(discriminator(z), dtype=np.float64).reshape(-1)
    else:
        p_hat = rep.discriminate(z)
        if p_hat is None:
            p_hat = np.full_like(p, p.mean())
    dis = disentanglement_error(p, p_hat)
    return ErrorReport(rep.feature_of_interest, X - xhat, pred, dis, float(np.var(p)), dis is None)


# -- serialization ------------------------------------------------------

def _net_to_dict(net: DenseNet) -> dict:
    return {"layers": [
        {"shape": list(l.weights.shape), "activation": l.activation,
         "weights": [float(v) for v in l.weights.ravel()],
         "biases": [float(v) for v in l.biases]}
        for l in net.layers]}


def _net_from_dict(d) -> DenseNet:
    return DenseNet([Layer(np.array(l["weights"], dtype=np.float64).reshape(l["shape"]),
                           np.array(l["biases"], dtype=np.float64), l["activation"])
                     for l in d["layers"]])


def save_net(net: DenseNet, path) -> None:
    Path(path).write_text(json.dumps({"format": "densenet/1", **_net_to_dict(net)}) + "\n")


def load_net(path) -> DenseNet:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "densenet/1":
        raise ValueError(f"{path} is not a serialized DenseNet")
    return _net_from_dict(d)


def rep_to_dict(rep: DisentangledRep) -> dict:
    if isinstance(rep, HandcraftedXYRep):
        return {"format": "disentangled_rep/1", "kind": rep.kind,
                "feature_of_interest": rep.feature_of_interest}
    cfg = asdict(rep.config)
    cfg["hidden"] = list(cfg["hidden"])
    return {
        "format": "disentangled_rep/1", "kind": rep.kind,
        "feature_of_interest": rep.feature_of_interest,
        "feature_names": rep.feature_names, "config": cfg,
        "x_low": [float(v) for v in rep.x_low], "x_span": [float(v) for v in rep.x_span],
        "p_low": rep.p_low, "p_span": rep.p_span,
        "in_mean": [float(v) for v in rep.in_mean], "in_scale": [float(v) for v in rep.in_scale],
        "encoder_f": _net_to_dict(rep.encoder_f),
        "decoder_g": _net_to_dict(rep.decoder_g),
        "discriminator_h": _net_to_dict(rep.discriminator_h),
    }


def rep_from_dict(d) -> DisentangledRep:
    if d.get("format") != "disentangled_rep/1":
        raise ValueError("not a serialized disentangled representation")
    if d["kind"] == "handcrafted_xy":
        return HandcraftedXYRep(d["feature_of_interest"])
    return LearnedRep(_net_from_dict(d["encoder_f"]), _net_from_dict(d["decoder_g"]),
                      _net_from_dict(d["discriminator_h"]), d["feature_of_interest"],
                      d["feature_names"], DisentangleConfig(**d["config"]),
                      d["x_low"], d["x_span"], d["p_low"], d["p_span"],
                      d["in_mean"], d["in_scale"])


def save_rep(rep: DisentangledRep, path) -> None:
    """JSON bundle; floats are written in shortest round-trip form."""
    Path(path).write_text(json.dumps(rep_to_dict(rep)) + "\n")


def load_rep(path) -> DisentangledRep:
    return rep_from_dict(json.loads(Path(path).read_text()))


# -- estimator front end ------------------------------------------------

class AdversarialDisentangler(TransformerMixin, BaseEstimator):
    """Learn a representation that strips ``feature`` from the other columns.

    ``transform`` returns ``[p, x']`` and ``inverse_transform`` decodes it.
    ``feature`` is a column index, or a name when ``feature_names`` is set.
    """

    def __init__(self, feature=0, feature_names=None, beta=0.5, latent_dim=4,
                 hidden=(10, 10), learning_rate=0.01, batch_size=16, train_steps=10_000,
                 p_is_binary="auto", random_state=0):
        self.feature = feature
        self.feature_names = feature_names
        self.beta = beta
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.p_is_binary = p_is_binary
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        names = list(self.feature_names) if self.feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
        p = self.feature if isinstance(self.feature, str) else names[self.feature]
        binary = self.p_is_binary
        if binary == "auto":
            col = X[:, names.index(p)]
            binary = bool(np.all((col == 0) | (col == 1)))
        cfg = DisentangleConfig(self.beta, self.latent_dim, self.learning_rate, self.batch_size,
                                self.train_steps, self.random_state, binary, tuple(self.hidden))
        self.rep_, self.loss_trace_ = train_adversarial(X, p, cfg, names)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "rep_")
        return self.rep_.encode_joint(X)

    def inverse_transform(self, Z):
        check_is_fitted(self, "rep_")
        return self.rep_.decode_joint(Z)
