"""Prototype and pairwise-similarity learning ops.

Class prototypes come from a closed-form weighted least squares over the
batch (with one-hot labels and no ridge this is exactly the per-class
feature mean). Classification scores features against prototypes through a
trainable bilinear form; predicted class distributions drive two
binary-cross-entropy pairwise losses: one against the label-derived
same-class matrix on source rows, one against a thresholded
prediction-agreement matrix on target rows, where a confidence band
excludes undecided pairs and narrows as training progresses.

Pseudo-label targets are always plain arrays: gradients flow through the
feature/prototype side of every loss, never through the label side.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor, as_tensor, constant

CLIP_EPS = 1e-7


def _maybe_value(out: Tensor, *inputs):
    if any(isinstance(a, Tensor) for a in inputs):
        return out
    return out.value if isinstance(out, Tensor) else out


@dataclass
class ThresholdState:
    """Initial and current confidence band for target pair selection."""

    tau_high0: float = 0.9
    tau_low0: float = 0.5
    max_epoch: int = 100
    tau_high: float | None = None
    tau_low: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau_low0 <= self.tau_high0 <= 1.0:
            raise ValueError(
                f"need 0 <= tau_low0 <= tau_high0 <= 1, got "
                f"({self.tau_low0}, {self.tau_high0})"
            )
        if self.max_epoch < 3:
            raise ValueError(
                f"max_epoch must be at least 3 for a contracting band, got {self.max_epoch}"
            )
        if self.tau_high is None:
            self.tau_high = self.tau_high0
        if self.tau_low is None:
            self.tau_low = self.tau_low0

    def advance(self, epoch: int):
        self.tau_high, self.tau_low = threshold_schedule(epoch, self)
        return self.tau_high, self.tau_low


@dataclass
class LossWeights:
    """Hyperparameters of the combined pairwise objective."""

    delta: float = 2.0
    beta: float = 0.01
    eta: float = 0.9

    def __post_init__(self):
        if self.delta < 0 or self.beta < 0:
            raise ValueError("delta and beta must be nonnegative")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")

    def gamma(self, epoch: int, max_epoch: int) -> float:
        return self.delta * epoch / max_epoch


def prototypes(features, labels: np.ndarray, ridge: float = 0.0):
    """Closed-form class prototypes from batch features and (soft) labels.

    Solves (Y'Y + ridge*I) P = Y'F. With exactly one-hot labels and no
    ridge this reduces to per-class feature means, computed directly for
    numerical exactness. Differentiable w.r.t. `features` (pass a Tensor);
    the label side is constant by design.

    Raises on an empty class when ridge is 0; with ridge > 0 the class row
    shrinks toward zero and a warning names the classes.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ValueError("labels must be a (batch, classes) matrix")
    feats = as_tensor(features)
    if feats.value.shape[0] != labels.shape[0]:
        raise ValueError(
            f"features rows {feats.value.shape[0]} != labels rows {labels.shape[0]}"
        )
    mass = labels.sum(axis=0)
    empty = np.flatnonzero(mass == 0.0)
    if empty.size and ridge == 0.0:
        raise ValueError(f"empty class in prototype batch: {empty.tolist()}")
    if empty.size:
        warnings.warn(
            f"classes {empty.tolist()} have no label mass; their prototypes "
            "shrink toward zero",
            stacklevel=2,
        )
    is_onehot = np.all((labels == 0.0) | (labels == 1.0)) and np.all(
        labels.sum(axis=1) == 1.0
    )
    if is_onehot and ridge == 0.0:
        coeff = labels.T / mass[:, None]
    else:
        gram = labels.T @ labels + ridge * np.eye(labels.shape[1])
        coeff = np.linalg.solve(gram, labels.T)
    out = constant(coeff) @ feats
    return _maybe_value(out, features)


def classify(features, bilinear, protos):
    """Class distribution per row: softmax of the bilinear prototype scores."""
    logits = dk.bilinear_logits(as_tensor(features), as_tensor(bilinear), as_tensor(protos))
    out = logits.softmax_rows()
    return _maybe_value(out, features, bilinear, protos)


def sharpen(probs: np.ndarray, eta: float) -> np.ndarray:
    """Reduce the temperature of class distributions: p_k^(1/eta), renormalized.

    Operates on plain arrays only — sharpened pseudo-labels are training
    constants, never gradient carriers.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    sums = p.sum(axis=-1, keepdims=True)
    if np.any(sums == 0.0):
        raise ValueError("cannot sharpen a row of all zeros")
    powered = p ** (1.0 / eta)
    return powered / powered.sum(axis=-1, keepdims=True)


def similarity_pred(probs):
    """Cosine similarity between rows of a class-distribution matrix.

    Output is symmetric with (near-)unit diagonal, clipped into
    [CLIP_EPS, 1 - CLIP_EPS] so downstream logs stay finite.
    """
    p = as_tensor(probs)
    sq_norms = (p * p).sum(axis=1, keepdims=True)
    if np.any(sq_norms.value <= 0.0):
        raise ValueError("zero-norm row in similarity_pred")
    norms = sq_norms.sqrt()
    sim = (p @ p.T) / (norms @ norms.T)
    out = sim.clip(CLIP_EPS, 1.0 - CLIP_EPS)
    return _maybe_value(out, probs)


def similarity_truth_source(labels: np.ndarray) -> np.ndarray:
    """Same-class indicator matrix from stacked (one-hot or soft) labels."""
    y = np.asarray(labels, dtype=np.float64)
    return y @ y.T


def pair_loss_source(r_pred, r_truth: np.ndarray):
    """Mean binary cross-entropy between predicted and true pair similarity."""
    rp = as_tensor(r_pred)
    rt = np.asarray(r_truth, dtype=np.float64)
    if rp.value.shape != rt.shape:
        raise ValueError(
            f"similarity shapes differ: {rp.value.shape} vs {rt.shape}"
        )
    rp = rp.clip(CLIP_EPS, 1.0 - CLIP_EPS)
    truth = constant(rt)
    bce = -(truth * rp.log() + (1.0 - truth) * (1.0 - rp).log())
    return _maybe_value(bce.mean(), r_pred)


def target_truth_mask(probs: np.ndarray, tau_high: float, tau_low: float):
    """Thresholded pair agreement on target predictions.

    The raw dot product of two class distributions decides each pair:
    >= tau_high is a positive pair, < tau_low a negative pair, anything in
    between is excluded via the validity mask. Returns (truth, mask) as 0/1
    float matrices.
    """
    if tau_low > tau_high:
        raise ValueError(f"tau_low {tau_low} exceeds tau_high {tau_high}")
    p = np.asarray(probs, dtype=np.float64)
    score = p @ p.T
    truth = (score >= tau_high).astype(np.float64)
    mask = ((score >= tau_high) | (score < tau_low)).astype(np.float64)
    return truth, mask


@dataclass
class MaskedPairLoss:
    loss: object  # Tensor or float, matching the prediction input
    valid_pairs: int

    @property
    def no_valid_pairs(self) -> bool:
        return self.valid_pairs == 0


def pair_loss_target(r_pred, r_truth: np.ndarray, mask: np.ndarray) -> MaskedPairLoss:
    """Masked mean BCE over the valid target pairs; 0 when none are valid."""
    rp = as_tensor(r_pred)
    rt = np.asarray(r_truth, dtype=np.float64)
    mk = np.asarray(mask, dtype=np.float64)
    if rp.value.shape != rt.shape or rt.shape != mk.shape:
        raise ValueError(
            f"similarity/mask shapes differ: {rp.value.shape}, {rt.shape}, {mk.shape}"
        )
    valid = int(mk.sum())
    if valid == 0:
        zero = constant(0.0)
        return MaskedPairLoss(_maybe_value(zero, r_pred), 0)
    rp = rp.clip(CLIP_EPS, 1.0 - CLIP_EPS)
    truth = constant(rt)
    bce = -(truth * rp.log() + (1.0 - truth) * (1.0 - rp).log())
    loss = (constant(mk) * bce).sum() * (1.0 / valid)
    return MaskedPairLoss(_maybe_value(loss, r_pred), valid)


def threshold_schedule(epoch: int, state: ThresholdState):
    """Confidence band at a given epoch: the band contracts toward its center.

    Both thresholds move by (tau_high0 - tau_low0)/2 * (1 - (2/max_epoch)^t),
    so they start at their initial values and converge monotonically to the
    shared midpoint without ever crossing.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    base = 2.0 / state.max_epoch
    pull = 0.5 * (state.tau_high0 - state.tau_low0) * (1.0 - base**epoch)
    return state.tau_high0 - pull, state.tau_low0 + pull


def combined_pair_loss(loss_source, loss_target, protos, weights: LossWeights,
                       epoch: int, max_epoch: int):
    """Source loss + ramped target loss + prototype-redundancy penalty.

    The target term is weighted by gamma = delta * epoch / max_epoch, and the
    penalty is the Frobenius distance of the prototype Gram matrix from the
    identity (orthonormal prototype rows cost nothing).
    """
    gamma = weights.gamma(epoch, max_epoch)
    p = as_tensor(protos)
    eye = np.eye(p.value.shape[0])
    gap = p @ p.T - constant(eye)
    fro = (gap * gap).sum().sqrt()
    out = as_tensor(loss_source) + gamma * as_tensor(loss_target) + weights.beta * fro
    return _maybe_value(out, loss_source, loss_target, protos)
