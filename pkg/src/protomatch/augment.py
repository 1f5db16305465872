"""Trial-grouped mixup augmentation.

Feature rows from different subjects or trials do not come from one
distribution, so convex mixing is only valid inside a (subject, trial)
group; all rows of a group share one class, which keeps mixed labels
exactly one-hot. The ungrouped variant that mixes across everything is kept
as an ablation arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIXUP_MODES = ("eeg", "standard", "off")


@dataclass
class MixupConfig:
    alpha: float = 0.5
    ratio: float = 1.0
    mode: str = "eeg"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.ratio < 0:
            raise ValueError(f"ratio must be nonnegative, got {self.ratio}")
        if self.mode not in MIXUP_MODES:
            raise ValueError(f"mode must be one of {MIXUP_MODES}, got {self.mode!r}")


@dataclass
class Augmented:
    """Mixed rows plus the group keys they inherit."""

    x: np.ndarray
    y: np.ndarray | None
    keys: list
    degenerate: bool = False  # set when no group had two rows to mix


def group_by_trial(keys) -> list:
    """Partition row indices by exact (subject, trial) key, order preserved."""
    groups: dict = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    return list(groups.items())


def eeg_mixup(x: np.ndarray, y: np.ndarray | None, keys, cfg: MixupConfig,
              rng: np.random.Generator, omega: float | None = None) -> Augmented:
    """Mix pairs drawn inside one (subject, trial) group at a time.

    Groups are chosen with probability proportional to their size (among
    groups with at least two rows), the two parents are distinct, and the
    mixing weight is Beta(alpha, alpha) unless `omega` pins it for tests.
    Because parents share a trial they share a class, so the label of a
    mixed row is exactly the parents' one-hot label.

    Returns round(ratio * len(x)) rows; zero rows (flagged degenerate) when
    every group is a singleton.
    """
    if cfg.mode != "eeg":
        raise ValueError(f"eeg_mixup called with mode {cfg.mode!r}")
    n = x.shape[0]
    count = int(round(cfg.ratio * n))
    usable = [(key, np.asarray(idx)) for key, idx in group_by_trial(keys)
              if len(idx) >= 2]
    if count == 0 or not usable:
        empty_y = None if y is None else np.zeros((0, y.shape[1]))
        return Augmented(
            np.zeros((0, x.shape[1])), empty_y, [],
            degenerate=bool(count and not usable),
        )
    weights = np.array([len(idx) for _, idx in usable], dtype=np.float64)
    weights /= weights.sum()
    picks = rng.choice(len(usable), size=count, p=weights)
    sizes = np.array([len(usable[g][1]) for g in picks])
    # two distinct in-group positions: draw the first uniformly, the second
    # uniformly among the rest via a cyclic shift
    first = rng.integers(0, sizes)
    second = (first + 1 + rng.integers(0, sizes - 1)) % sizes
    rows_a = np.array([usable[g][1][i] for g, i in zip(picks, first)])
    rows_b = np.array([usable[g][1][j] for g, j in zip(picks, second)])
    w = rng.beta(cfg.alpha, cfg.alpha, size=count) if omega is None else (
        np.full(count, float(omega))
    )
    xa = w[:, None] * x[rows_a] + (1.0 - w[:, None]) * x[rows_b]
    # same trial => identical one-hot labels; copying keeps them exact
    ya = None if y is None else y[rows_a].copy()
    out_keys = [usable[g][0] for g in picks]
    return Augmented(xa, ya, out_keys)


def standard_mixup(x: np.ndarray, y: np.ndarray | None, keys, cfg: MixupConfig,
                   rng: np.random.Generator, omega: float | None = None) -> Augmented:
    """Mix pairs drawn uniformly across all rows, ignoring trial grouping.

    Labels (when present) become soft convex combinations. The mixed row
    carries the first parent's group key.
    """
    if cfg.mode != "standard":
        raise ValueError(f"standard_mixup called with mode {cfg.mode!r}")
    n = x.shape[0]
    count = int(round(cfg.ratio * n))
    if count == 0 or n < 2:
        empty_y = None if y is None else np.zeros((0, y.shape[1]))
        return Augmented(np.zeros((0, x.shape[1])), empty_y, [])
    rows_a = rng.integers(0, n, size=count)
    rows_b = (rows_a + 1 + rng.integers(0, n - 1, size=count)) % n
    w = rng.beta(cfg.alpha, cfg.alpha, size=count) if omega is None else (
        np.full(count, float(omega))
    )
    xa = w[:, None] * x[rows_a] + (1.0 - w[:, None]) * x[rows_b]
    ya = None if y is None else w[:, None] * y[rows_a] + (1.0 - w[:, None]) * y[rows_b]
    out_keys = [keys[a] for a in rows_a]
    return Augmented(xa, ya, out_keys)


def augment_domain(x: np.ndarray, y: np.ndarray | None, keys, cfg: MixupConfig,
                   rng: np.random.Generator):
    """Apply the configured mixup mode and append the result to the originals."""
    if cfg.mode == "off" or cfg.ratio == 0 or x.shape[0] == 0:
        return x, y, list(keys)
    if cfg.mode == "eeg":
        aug = eeg_mixup(x, y, keys, cfg, rng)
    else:
        aug = standard_mixup(x, y, keys, cfg, rng)
    x_full = np.concatenate([x, aug.x], axis=0)
    y_full = None if y is None else np.concatenate([y, aug.y], axis=0)
    return x_full, y_full, list(keys) + aug.keys
