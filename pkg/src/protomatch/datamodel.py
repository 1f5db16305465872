"""Datasets, domain partitions, and batch sampling.

A dataset is a flat list of feature segments tagged with subject, session,
trial, and an optional class label. The leave-one-subject-out protocol turns
a dataset into three sample sets: labeled source (first N trials of every
non-target subject), unlabeled source (their remaining trials), and target
(all trials of the held-out subject). Labels of the unlabeled and target
sets are stripped from the working views and kept in a sealed ledger that
only evaluation code may read.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class DatasetError(ValueError):
    """Raised on malformed dataset files or invalid dataset contents."""


@dataclass
class Segment:
    """One feature vector with its provenance identity."""

    subject: int
    session: int
    trial: int
    index: int
    features: np.ndarray
    label: int | None = None

    def group_key(self) -> tuple:
        return (self.subject, self.trial)

    def identity(self) -> tuple:
        return (self.subject, self.session, self.trial, self.index)


@dataclass
class Dataset:
    segments: list
    n_classes: int
    feature_dim: int
    subjects: list = field(default_factory=list)

    def __post_init__(self):
        if not self.subjects:
            seen = dict.fromkeys(s.subject for s in self.segments)
            self.subjects = list(seen)

    def validate(self):
        if not self.segments:
            raise DatasetError("no segments")
        for i, seg in enumerate(self.segments):
            if seg.features.shape != (self.feature_dim,):
                raise DatasetError(
                    f"segment {i} has {seg.features.shape[0]} features, "
                    f"expected {self.feature_dim}"
                )
            if not np.all(np.isfinite(seg.features)):
                raise DatasetError(f"segment {i} has non-finite features")
            if seg.label is not None and not 0 <= seg.label < self.n_classes:
                raise DatasetError(
                    f"segment {i} label {seg.label} out of range [0, {self.n_classes})"
                )
        return self

    def trials_of(self, subject: int) -> list:
        return sorted({s.trial for s in self.segments if s.subject == subject})


class SealedLabels:
    """Evaluation-only label ledger for segments whose labels were withheld.

    Kept off the Batch/training path on purpose: nothing that reaches a
    gradient may look inside.
    """

    def __init__(self, segments):
        self._labels = {}
        for seg in segments:
            if seg.label is None:
                raise DatasetError(
                    f"cannot seal unlabeled segment {seg.identity()}"
                )
            self._labels[seg.identity()] = seg.label

    def of(self, segment: Segment) -> int:
        return self._labels[segment.identity()]

    def __len__(self):
        return len(self._labels)


@dataclass
class DomainPartition:
    """Labeled source / unlabeled source / target sample sets."""

    S: list
    U: list
    T: list
    target_subject: int
    n_labeled_trials: int
    n_classes: int
    feature_dim: int
    sealed: SealedLabels

    def domains(self) -> dict:
        return {"S": self.S, "U": self.U, "T": self.T}


@dataclass
class SynthConfig:
    """Generator knobs for a multi-subject dataset with covariate shift."""

    n_subjects: int = 6
    trials_per_subject: int = 10
    segments_per_trial: int = 40
    n_classes: int = 3
    feature_dim: int = 16
    class_separation: float = 1.0
    subject_shift: float = 0.8
    trial_drift: float = 0.25
    noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "trials_per_subject", "segments_per_trial",
                     "n_classes", "feature_dim"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive")
        for name in ("class_separation", "subject_shift", "trial_drift", "noise"):
            if getattr(self, name) < 0:
                raise DatasetError(f"{name} must be nonnegative")


@dataclass
class Batch:
    """One training step's samples: labeled source, unlabeled source, target.

    Group keys (subject, trial) ride along so augmentation can respect trial
    boundaries. No labels are exposed for the U and T rows.
    """

    xs: np.ndarray
    ys: np.ndarray
    xu: np.ndarray
    xt: np.ndarray
    keys_s: list
    keys_u: list
    keys_t: list
    replaced: dict = field(default_factory=dict)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def features_matrix(segments, feature_dim: int | None = None) -> np.ndarray:
    if not segments:
        return np.zeros((0, feature_dim or 0))
    return np.stack([s.features for s in segments]).astype(np.float64)


def synthesize_dataset(cfg: SynthConfig) -> Dataset:
    """Generate a labeled multi-subject dataset with controllable shift.

    Each class gets a global Gaussian prototype. Every subject applies its
    own random affine map (strength `subject_shift`) to all of its samples;
    trial drift follows a random walk across a subject's trials (recordings
    are non-stationary, so later trials sit further from the first ones);
    every segment adds white noise. Trials cycle through the classes so each
    subject sees a balanced label distribution, and all segments within one
    trial share a class.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_dim
    protos = cfg.class_separation * rng.standard_normal((cfg.n_classes, d))
    segments = []
    for subject in range(1, cfg.n_subjects + 1):
        # translation-dominant affine: the offset carries most of the shift,
        # the mixing term stays mild so class geometry remains transferable
        mix = rng.standard_normal((d, d)) / np.sqrt(d)
        amap = np.eye(d) + 0.25 * cfg.subject_shift * mix
        offset = cfg.subject_shift * rng.standard_normal(d)
        drift = np.zeros(d)
        for trial in range(1, cfg.trials_per_subject + 1):
            label = (trial - 1) % cfg.n_classes
            drift = drift + cfg.trial_drift * rng.standard_normal(d)
            base = protos[label] + drift
            for idx in range(cfg.segments_per_trial):
                x = amap @ base + offset + cfg.noise * rng.standard_normal(d)
                segments.append(
                    Segment(subject, 1, trial, idx, x, label)
                )
    return Dataset(segments, cfg.n_classes, d).validate()


def partition_loso(ds: Dataset, target_subject: int, n_labeled_trials: int) -> DomainPartition:
    """Split a dataset into S/U/T for one leave-one-subject-out fold.

    The first `n_labeled_trials` trials (ascending trial id) of every source
    subject keep their labels (S); their remaining trials go to U with
    labels withheld; all of the target subject goes to T, labels withheld.
    Withheld labels stay available to evaluation through the sealed ledger.
    """
    if target_subject not in ds.subjects:
        raise DatasetError(f"unknown target subject {target_subject}")
    if n_labeled_trials < 1:
        raise DatasetError("n_labeled_trials must be at least 1")
    source_subjects = [s for s in ds.subjects if s != target_subject]
    if not source_subjects:
        raise DatasetError("need at least one source subject")
    labeled_trials = {}
    for subject in source_subjects:
        trials = ds.trials_of(subject)
        if n_labeled_trials >= len(trials):
            raise DatasetError(
                f"subject {subject} has {len(trials)} trials; n_labeled_trials="
                f"{n_labeled_trials} leaves no unlabeled source trials"
            )
        labeled_trials[subject] = set(trials[:n_labeled_trials])
    s_rows, u_rows, t_rows = [], [], []
    for seg in ds.segments:
        if seg.subject == target_subject:
            t_rows.append(seg)
        elif seg.trial in labeled_trials[seg.subject]:
            s_rows.append(seg)
        else:
            u_rows.append(seg)
    sealed = SealedLabels(u_rows + t_rows)
    strip = lambda rows: [replace(s, label=None) for s in rows]
    return DomainPartition(
        S=list(s_rows),
        U=strip(u_rows),
        T=strip(t_rows),
        target_subject=target_subject,
        n_labeled_trials=n_labeled_trials,
        n_classes=ds.n_classes,
        feature_dim=ds.feature_dim,
        sealed=sealed,
    )


def split_target(partition: DomainPartition, k_trials: int):
    """Split the target domain into (first K trials, remaining trials).

    The first piece may participate in adaptation; the second is a held-out
    test set.
    """
    trials = sorted({s.trial for s in partition.T})
    if not 1 <= k_trials < len(trials):
        raise DatasetError(
            f"k_trials must be in [1, {len(trials) - 1}], got {k_trials}"
        )
    head = set(trials[:k_trials])
    t_adapt = [s for s in partition.T if s.trial in head]
    t_test = [s for s in partition.T if s.trial not in head]
    return t_adapt, t_test


def sample_minibatch(partition: DomainPartition, sizes, rng: np.random.Generator,
                     target_segments=None) -> Batch:
    """Draw one minibatch from each domain, without replacement per step.

    `sizes` is (labeled, unlabeled, target); a zero size skips that domain.
    If a requested size exceeds the domain population the draw falls back to
    sampling with replacement and flags it in `Batch.replaced`.
    `target_segments` overrides the target pool (used by the held-out-target
    protocol, which adapts on a prefix of the target trials only).
    """
    n_s, n_u, n_t = (int(v) for v in sizes)
    pools = {
        "S": (partition.S, n_s),
        "U": (partition.U, n_u),
        "T": (partition.T if target_segments is None else target_segments, n_t),
    }
    out = {}
    replaced = {}
    for name, (pool, size) in pools.items():
        if size == 0:
            out[name] = []
            replaced[name] = False
            continue
        if not pool:
            raise DatasetError(f"domain {name} is empty; cannot sample {size} rows")
        if size > len(pool):
            idx = rng.integers(0, len(pool), size=size)
            replaced[name] = True
        else:
            idx = rng.choice(len(pool), size=size, replace=False)
            replaced[name] = False
        out[name] = [pool[i] for i in idx]
    ys = one_hot([s.label for s in out["S"]], partition.n_classes) if out["S"] else (
        np.zeros((0, partition.n_classes))
    )
    dim = partition.feature_dim
    return Batch(
        xs=features_matrix(out["S"], dim),
        ys=ys,
        xu=features_matrix(out["U"], dim),
        xt=features_matrix(out["T"], dim),
        keys_s=[s.group_key() for s in out["S"]],
        keys_u=[s.group_key() for s in out["U"]],
        keys_t=[s.group_key() for s in out["T"]],
        replaced=replaced,
    )


# -- file format -------------------------------------------------------------


def write_dataset(ds: Dataset, path):
    """Write the CSV contract: a #classes line, a header, one row per segment."""
    cols = ["subject", "session", "trial", "segment", "label"]
    cols += [f"f{i}" for i in range(ds.feature_dim)]
    lines = [f"#classes={ds.n_classes}", ",".join(cols)]
    for seg in ds.segments:
        label = "" if seg.label is None else str(seg.label)
        feats = ",".join(repr(float(v)) for v in seg.features)
        lines.append(f"{seg.subject},{seg.session},{seg.trial},{seg.index},{label},{feats}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    """Parse the CSV contract; failures cite the physical line number."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#classes="):
        raise DatasetError("line 1: expected '#classes=<c>'")
    try:
        n_classes = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise DatasetError("line 1: malformed class count") from None
    if n_classes < 2:
        raise DatasetError("line 1: need at least 2 classes")
    if len(lines) < 2:
        raise DatasetError("line 2: missing header")
    header = lines[1].split(",")
    fixed = ["subject", "session", "trial", "segment", "label"]
    if header[: len(fixed)] != fixed:
        raise DatasetError(f"line 2: header must start with {','.join(fixed)}")
    feat_cols = header[len(fixed):]
    dim = len(feat_cols)
    if dim == 0 or feat_cols != [f"f{i}" for i in range(dim)]:
        raise DatasetError("line 2: feature columns must be f0..f{D-1}")
    segments = []
    for ln, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DatasetError(
                f"line {ln}: expected {len(header)} columns, found {len(parts)}"
            )
        try:
            subject, session, trial, index = (int(v) for v in parts[:4])
        except ValueError:
            raise DatasetError(f"line {ln}: non-integer identity column") from None
        label_cell = parts[4].strip()
        if label_cell:
            try:
                label = int(label_cell)
            except ValueError:
                raise DatasetError(f"line {ln}: malformed label {label_cell!r}") from None
            if not 0 <= label < n_classes:
                raise DatasetError(
                    f"line {ln}: label {label} out of range [0, {n_classes})"
                )
        else:
            label = None
        try:
            feats = np.array([float(v) for v in parts[5:]], dtype=np.float64)
        except ValueError:
            raise DatasetError(f"line {ln}: malformed feature value") from None
        if not np.all(np.isfinite(feats)):
            raise DatasetError(f"line {ln}: non-finite feature")
        segments.append(Segment(subject, session, trial, index, feats, label))
    if not segments:
        raise DatasetError("no segments")
    return Dataset(segments, n_classes, dim).validate()
