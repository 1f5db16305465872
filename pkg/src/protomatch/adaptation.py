"""Adversarial domain alignment and divergence diagnostics.

The discriminator classifies extracted features into their domain of origin
(labeled source / unlabeled source / target). Training wires the features
through a gradient-reversal node, so a single backward pass descends the
discriminator loss in the discriminator weights while ascending it in the
feature extractor — the usual adversarial min-max realized in one graph.
MMD between domain feature sets is tracked as a divergence proxy; it never
feeds a gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from enum import IntEnum

import numpy as np
from scipy.spatial.distance import cdist

from . import datamodel
from . import diffkernel as dk
from .diffkernel import Tensor, as_tensor, constant


class Domain(IntEnum):
    S = 0
    U = 1
    T = 2


def domain_onehot(counts, n_domains: int | None = None) -> np.ndarray:
    """One-hot domain labels for blocks of `counts[k]` consecutive rows."""
    counts = [int(c) for c in counts]
    if n_domains is None:
        n_domains = len(counts)
    rows = sum(counts)
    out = np.zeros((rows, n_domains))
    at = 0
    for dom, c in enumerate(counts):
        out[at : at + c, dom] = 1.0
        at += c
    return out


def domain_disc_loss(features, domain_labels: np.ndarray, disc_params: dk.ParamSet,
                     disc_arch: dk.MlpArch, rng: np.random.Generator | None = None):
    """Mean categorical cross-entropy of the domain discriminator.

    `features` should already be behind a gradient-reversal node when used
    adversarially. Every domain column must have at least one row; a batch
    that lost a domain trains the discriminator on a different task than
    the one the alignment argument needs.
    """
    labels = np.asarray(domain_labels, dtype=np.float64)
    feats = as_tensor(features)
    if labels.shape[0] != feats.value.shape[0]:
        raise ValueError(
            f"{feats.value.shape[0]} feature rows but {labels.shape[0]} domain labels"
        )
    if labels.shape[1] != disc_arch.out_width:
        raise ValueError(
            f"labels have {labels.shape[1]} domains, discriminator head has "
            f"{disc_arch.out_width}"
        )
    present = labels.sum(axis=0)
    if np.any(present == 0.0):
        missing = np.flatnonzero(present == 0.0).tolist()
        raise ValueError(
            f"discriminator batch must contain all domains; missing {missing}"
        )
    probs, _ = dk.forward_mlp(feats, disc_params, disc_arch, rng=rng)
    logp = probs.clip(1e-300, 1.0).log()
    loss = -(constant(labels) * logp).sum() * (1.0 / labels.shape[0])
    if isinstance(features, Tensor):
        return loss
    return loss.value


def lambda_schedule(epoch: int, max_epoch: int) -> float:
    """Adversarial weight ramp: 0 at the start, saturating just below 1."""
    if max_epoch <= 0:
        raise ValueError("max_epoch must be positive")
    if not 0 <= epoch <= max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {max_epoch}]")
    p = epoch / max_epoch
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def mmd(a: np.ndarray, b: np.ndarray, bandwidth="median") -> float:
    """Unbiased squared maximum mean discrepancy with a Gaussian kernel.

    k(x, y) = exp(-||x-y||^2 / (2 sigma^2)); `bandwidth` is sigma, or
    'median' for the median pairwise distance over the pooled samples.
    Negative estimates (possible for the unbiased statistic) are floored at
    zero; identical degenerate point sets report zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("mmd needs at least two samples per side")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if bandwidth == "median":
        pooled = np.concatenate([a, b], axis=0)
        dists = cdist(pooled, pooled)
        upper = dists[np.triu_indices_from(dists, k=1)]
        sigma = float(np.median(upper))
        if sigma == 0.0:
            return 0.0
    else:
        sigma = float(bandwidth)
        if sigma <= 0.0:
            raise ValueError(f"bandwidth must be positive, got {sigma}")
    gamma = 1.0 / (2.0 * sigma * sigma)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    m, n = a.shape[0], b.shape[0]
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    term_ab = 2.0 * kab.mean()
    return max(0.0, term_a + term_b - term_ab)


@dataclass
class BoundReport:
    """Per-epoch divergence diagnostics mirroring the target-error bound.

    The labeling-function discrepancy terms of the bound are unobservable
    without target labels and are reported as a marker, never a number.
    """

    epoch: int
    source_pair_loss: float
    mmd_SU: float
    mmd_UT: float
    mmd_ST: float
    pi_S: float
    pi_U: float
    weighted_divergence: float
    target_accuracy: float | None = None
    labeling_terms: str = "not estimable"

    def to_json_dict(self) -> dict:
        return asdict(self)


def convex_weights(mmd_st: float, mmd_ut: float, counts=None, mode="proportions",
                   grid_step: float = 0.05):
    """Weights (pi_S, pi_U) on the 1-simplex combining the two source domains.

    'proportions' uses sample counts; 'grid' scans the simplex minimizing
    pi_S*mmd_ST + pi_U*mmd_UT, the projection-distance surrogate.
    """
    if mode == "proportions":
        n_s, n_u = counts
        total = n_s + n_u
        if total == 0:
            return 0.5, 0.5
        return n_s / total, n_u / total
    if mode == "grid":
        best = (1.0, 0.0)
        best_val = math.inf
        steps = int(round(1.0 / grid_step))
        for i in range(steps + 1):
            pi_s = i * grid_step
            val = pi_s * mmd_st + (1.0 - pi_s) * mmd_ut
            if val < best_val:
                best_val = val
                best = (pi_s, 1.0 - pi_s)
        return best
    raise ValueError(f"unknown pi mode {mode!r}")


def bound_report(model, partition, epoch: int, *, source_pair_loss: float,
                 target_accuracy: float | None = None,
                 target_segments=None, rng: np.random.Generator | None = None,
                 pi_mode: str = "proportions", sample_cap: int = 512,
                 bandwidth="median") -> BoundReport:
    """Divergence snapshot across the three domains in eval mode.

    `model` only needs a `features(x) -> array` method. Each domain is
    subsampled to `sample_cap` rows (seeded) before the quadratic-cost MMD.
    Diagnostics only: nothing here touches a gradient.
    """
    rng = rng or np.random.default_rng(0)
    t_pool = partition.T if target_segments is None else target_segments
    mats = {}
    for name, pool in (("S", partition.S), ("U", partition.U), ("T", t_pool)):
        x = datamodel.features_matrix(pool, partition.feature_dim)
        if x.shape[0] > sample_cap:
            idx = rng.choice(x.shape[0], size=sample_cap, replace=False)
            x = x[idx]
        mats[name] = model.features(x)
    mmd_su = mmd(mats["S"], mats["U"], bandwidth)
    mmd_ut = mmd(mats["U"], mats["T"], bandwidth)
    mmd_st = mmd(mats["S"], mats["T"], bandwidth)
    pi_s, pi_u = convex_weights(
        mmd_st, mmd_ut, counts=(len(partition.S), len(partition.U)), mode=pi_mode
    )
    weighted = pi_u * (mmd_su + mmd_ut) + pi_s * mmd_st
    return BoundReport(
        epoch=epoch,
        source_pair_loss=float(source_pair_loss),
        mmd_SU=mmd_su,
        mmd_UT=mmd_ut,
        mmd_ST=mmd_st,
        pi_S=pi_s,
        pi_U=pi_u,
        weighted_divergence=weighted,
        target_accuracy=target_accuracy,
    )
