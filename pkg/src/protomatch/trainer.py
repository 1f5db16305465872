"""End-to-end training: one adversarial pairwise step, folds, and the
leave-one-subject-out harness.

A training step augments each domain inside trial groups, pseudo-labels the
unlabeled source batch with the previous step's prototypes, recomputes
prototypes in-graph from the stacked labels, assembles the source/target
pairwise losses and the domain-discriminator loss behind a gradient
reversal node, and applies one RMSprop update. Folds are share-nothing:
each owns its model, rng streams, and metrics file, so they can run in a
process pool and still reproduce bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import adaptation as ad
from . import augment as ag
from . import datamodel as dm
from . import diffkernel as dk
from . import pairwise as pw

ABLATION_FLAGS = (
    "no_augment",
    "standard_mixup",
    "no_prototype",
    "no_instance_pairwise",
    "two_domain_adaptation",
    "no_unlabeled_source",
)

PROTOCOLS = ("loso", "split_target")
FINAL_PROTOTYPE_MODES = ("last_step", "recompute")


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the term dump."""


@dataclass
class TrainConfig:
    max_epoch: int = 100
    steps_per_epoch: int = 0  # 0 -> ceil(|S| / batch_s)
    batch_s: int = 48
    batch_u: int = 48
    batch_t: int = 48
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    rho: float = 0.99
    eps: float = 1e-8
    alpha: float = 0.5
    ratio: float = 1.0
    mixup_mode: str = "eeg"
    eta: float = 0.9
    tau_high0: float = 0.9
    tau_low0: float = 0.5
    delta: float = 2.0
    beta: float = 0.01
    ridge: float = 1e-6
    dropout: float = 0.5
    hidden_widths: tuple = (64, 64, 64)
    disc_hidden: tuple = (64, 64)
    n_labeled_trials: int = 6
    seed: int = 0
    ablations: tuple = ()
    protocol: str = "loso"
    split_k: int = 3
    final_prototypes: str = "last_step"
    pi_mode: str = "proportions"
    mmd_cap: int = 512

    def __post_init__(self):
        self.ablations = tuple(self.ablations)
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        self.disc_hidden = tuple(int(w) for w in self.disc_hidden)
        unknown = set(self.ablations) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(
                f"unknown ablation flags {sorted(unknown)}; valid: {ABLATION_FLAGS}"
            )
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.final_prototypes not in FINAL_PROTOTYPE_MODES:
            raise ValueError(f"final_prototypes must be one of {FINAL_PROTOTYPE_MODES}")
        if self.max_epoch < 3:
            raise ValueError("max_epoch must be at least 3")
        if min(self.batch_s, self.batch_t) < 2:
            raise ValueError("batch_s and batch_t must be at least 2")
        # remaining numeric ranges are enforced by the component configs below
        ag.MixupConfig(self.alpha, self.ratio, self.mixup_mode)
        pw.LossWeights(self.delta, self.beta, self.eta)
        pw.ThresholdState(self.tau_high0, self.tau_low0, self.max_epoch)
        dk.RmsPropState(self.learning_rate, self.rho, self.eps, self.weight_decay)

    def ablated(self, flag: str) -> bool:
        return flag in self.ablations

    @property
    def uses_unlabeled(self) -> bool:
        return not self.ablated("no_unlabeled_source")

    @property
    def n_domains(self) -> int:
        if self.ablated("no_unlabeled_source") or self.ablated("two_domain_adaptation"):
            return 2
        return 3

    def mixup_config(self) -> ag.MixupConfig:
        if self.ablated("no_augment"):
            return ag.MixupConfig(self.alpha, 0.0, "off")
        mode = "standard" if self.ablated("standard_mixup") else self.mixup_mode
        return ag.MixupConfig(self.alpha, self.ratio, mode)

    def loss_weights(self) -> pw.LossWeights:
        return pw.LossWeights(self.delta, self.beta, self.eta)


def feat_arch_for(feature_dim: int, cfg: TrainConfig, train=False) -> dk.MlpArch:
    widths = (feature_dim, *cfg.hidden_widths)
    acts = tuple(["relu"] * (len(widths) - 2) + ["none"])
    return dk.MlpArch(widths, acts, train=train)


def disc_arch_for(cfg: TrainConfig, train=False) -> dk.MlpArch:
    widths = (cfg.hidden_widths[-1], *cfg.disc_hidden, cfg.n_domains)
    acts = tuple(["relu"] + ["none"] * (len(cfg.disc_hidden) - 1) + ["softmax"])
    return dk.MlpArch(widths, acts, dropout_after=(0,), dropout_rate=cfg.dropout,
                      train=train)


@dataclass
class ModelParams:
    """All trainable state: extractor, bilinear form, discriminator,
    current prototypes, and the optimizer accumulators."""

    feat_params: dk.ParamSet
    feat_arch: dk.MlpArch
    disc_params: dk.ParamSet
    disc_arch: dk.MlpArch
    bilinear: dk.ParamSet
    prototypes: np.ndarray
    feat_state: dk.RmsPropState
    disc_state: dk.RmsPropState
    bilinear_state: dk.RmsPropState

    @classmethod
    def init(cls, feature_dim: int, n_classes: int, cfg: TrainConfig,
             rng: np.random.Generator) -> "ModelParams":
        feat_arch = feat_arch_for(feature_dim, cfg)
        disc_arch = disc_arch_for(cfg)
        feat_params = dk.init_mlp_params(feat_arch, rng)
        disc_params = dk.init_mlp_params(disc_arch, rng)
        m = cfg.hidden_widths[-1]
        bilinear = dk.ParamSet()
        bound = math.sqrt(6.0 / (2 * m))
        # identity-anchored: the class readout starts as plain prototype
        # similarity, which pins cluster k to prototype row k (the pairwise
        # losses alone are invariant to permuting the class columns)
        bilinear.add("B", np.eye(m) + rng.uniform(-bound, bound, size=(m, m)))
        proto_bound = math.sqrt(6.0 / (n_classes + m))
        protos = rng.uniform(-proto_bound, proto_bound, size=(n_classes, m))

        def opt():
            return dk.RmsPropState(cfg.learning_rate, cfg.rho, cfg.eps,
                                   cfg.weight_decay)

        return cls(feat_params, feat_arch, disc_params, disc_arch, bilinear,
                   protos, opt(), opt(), opt())

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def features(self, x: np.ndarray) -> np.ndarray:
        return dk.mlp_apply(x, self.feat_params, self.feat_arch)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return pw.classify(self.features(x), self.bilinear["B"].value, self.prototypes)

    def step_all(self):
        dk.rmsprop_step(self.feat_params, self.feat_state)
        dk.rmsprop_step(self.bilinear, self.bilinear_state)
        dk.rmsprop_step(self.disc_params, self.disc_state)


@dataclass
class EpochContext:
    epoch: int
    max_epoch: int
    lam: float
    gamma: float
    tau_high: float
    tau_low: float


@dataclass
class StepLosses:
    pair_source: float
    pair_target: float
    pair_combined: float
    disc: float
    total: float
    target_valid_pairs: int


def pseudo_labels(model: ModelParams, xu: np.ndarray, eta: float,
                  protos: np.ndarray | None = None) -> np.ndarray:
    """Sharpened class distributions for unlabeled rows; a plain constant.

    `protos` defaults to the model's stored prototypes; the training step
    passes the supervised prototypes of the current labeled batch instead,
    which anchors the class readout to the labeled data every step.
    """
    if protos is None:
        protos = model.prototypes
    probs = pw.classify(model.features(xu), model.bilinear["B"].value, protos)
    return pw.sharpen(probs, eta)


def train_step(model: ModelParams, batch: dm.Batch, ctx: EpochContext,
               cfg: TrainConfig, aug_rng: np.random.Generator,
               dropout_rng: np.random.Generator) -> StepLosses:
    """One optimizer update over the combined adversarial pairwise objective.

    Order of operations: augment each domain inside trial groups; compute
    supervised prototypes from the labeled rows and pseudo-label the
    unlabeled source rows against them (no gradient, anchoring the class
    readout to the labels); extract features for all rows in one graph;
    recompute prototypes from the stacked labels; build both pairwise
    losses; add the discriminator loss behind a gradient reversal scaled by
    the epoch's lambda; backward; step.
    """
    mix = cfg.mixup_config()
    xs, ys, _ = ag.augment_domain(batch.xs, batch.ys, batch.keys_s, mix, aug_rng)
    if cfg.uses_unlabeled:
        xu, _, _ = ag.augment_domain(batch.xu, None, batch.keys_u, mix, aug_rng)
    else:
        xu = np.zeros((0, batch.xs.shape[1]))
    xt, _, _ = ag.augment_domain(batch.xt, None, batch.keys_t, mix, aug_rng)
    n_s, n_u, n_t = xs.shape[0], xu.shape[0], xt.shape[0]

    if n_u:
        supervised_protos = pw.prototypes(model.features(xs), ys, ridge=cfg.ridge)
        yhat_u = pseudo_labels(model, xu, cfg.eta, protos=supervised_protos)
        y_stack = np.concatenate([ys, yhat_u], axis=0)
    else:
        y_stack = ys

    feat_arch = replace(model.feat_arch, train=True)
    feats, _ = dk.forward_mlp(
        np.concatenate([xs, xu, xt], axis=0), model.feat_params, feat_arch,
        rng=dropout_rng,
    )
    f_su = feats.rows(0, n_s + n_u)
    f_t = feats.rows(n_s + n_u, n_s + n_u + n_t)

    if cfg.ablated("no_prototype"):
        protos = pw.prototypes(feats.rows(0, n_s), ys, ridge=cfg.ridge)
    else:
        protos = pw.prototypes(f_su, y_stack, ridge=cfg.ridge)

    weights = cfg.loss_weights()
    if cfg.ablated("no_instance_pairwise"):
        loss_s, loss_t = dk.constant(0.0), dk.constant(0.0)
        valid_pairs = 0
    else:
        probs_su = pw.classify(f_su, model.bilinear["B"], protos)
        loss_s = pw.pair_loss_source(
            pw.similarity_pred(probs_su), pw.similarity_truth_source(y_stack)
        )
        probs_t = pw.classify(f_t, model.bilinear["B"], protos)
        truth_t, mask_t = pw.target_truth_mask(probs_t.value, ctx.tau_high, ctx.tau_low)
        masked = pw.pair_loss_target(pw.similarity_pred(probs_t), truth_t, mask_t)
        loss_t, valid_pairs = masked.loss, masked.valid_pairs
    loss_pair = pw.combined_pair_loss(loss_s, loss_t, protos, weights,
                                      ctx.epoch, ctx.max_epoch)

    if cfg.n_domains == 3:
        blocks, counts = [f_su, f_t], [n_s, n_u, n_t]
    else:
        blocks, counts = [feats.rows(0, n_s), f_t], [n_s, n_t]
    disc_in = dk.grl(dk.concat_rows(blocks), ctx.lam)
    domain_labels = ad.domain_onehot(counts, cfg.n_domains)
    disc_arch = replace(model.disc_arch, train=True)
    loss_disc = ad.domain_disc_loss(disc_in, domain_labels, model.disc_params,
                                    disc_arch, rng=dropout_rng)

    total = loss_pair + loss_disc
    losses = StepLosses(
        pair_source=float(loss_s.value),
        pair_target=float(loss_t.value),
        pair_combined=float(loss_pair.value),
        disc=float(loss_disc.value),
        total=float(total.value),
        target_valid_pairs=valid_pairs,
    )
    if not all(np.isfinite([losses.pair_source, losses.pair_target,
                            losses.pair_combined, losses.disc, losses.total])):
        raise TrainingDiverged(f"non-finite loss at epoch {ctx.epoch}: {losses}")
    total.backward()
    model.step_all()
    model.prototypes = protos.value.copy()
    return losses


def evaluate(model: ModelParams, segments, sealed: dm.SealedLabels):
    """Accuracy and confusion matrix against the sealed label ledger.

    Predictions argmax the prototype classifier in eval mode; confusion rows
    are true classes, columns predictions.
    """
    if not segments:
        raise ValueError("cannot evaluate an empty segment set")
    x = dm.features_matrix(segments)
    probs = model.predict_proba(x)
    preds = probs.argmax(axis=1)
    c = model.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for seg, pred in zip(segments, preds):
        confusion[sealed.of(seg), pred] += 1
    accuracy = float(np.trace(confusion)) / len(segments)
    return accuracy, confusion


@dataclass
class FoldResult:
    target_subject: int
    seed: int
    accuracy: float
    confusion: np.ndarray
    epoch_records: list
    bound_reports: list
    seconds: float
    error: str | None = None


def metrics_record(fold_index: int, epoch: int, ctx: EpochContext, means: dict,
                   bound: ad.BoundReport, target_acc: float) -> dict:
    return {
        "fold": fold_index,
        "epoch": epoch,
        "loss_pair_s": means["pair_source"],
        "loss_pair_t": means["pair_target"],
        "loss_disc": means["disc"],
        "lambda": ctx.lam,
        "gamma": ctx.gamma,
        "tau_h": ctx.tau_high,
        "tau_l": ctx.tau_low,
        "mmd_SU": bound.mmd_SU,
        "mmd_UT": bound.mmd_UT,
        "mmd_ST": bound.mmd_ST,
        "target_acc": target_acc,
    }


def recompute_final_prototypes(model: ModelParams, partition: dm.DomainPartition,
                               cfg: TrainConfig):
    """Replace the last-step prototypes with ones computed over all of S (+U)."""
    xs = dm.features_matrix(partition.S, partition.feature_dim)
    ys = dm.one_hot([s.label for s in partition.S], partition.n_classes)
    f_s = model.features(xs)
    feats = [f_s]
    labels = [ys]
    if cfg.uses_unlabeled and partition.U:
        supervised = pw.prototypes(f_s, ys, ridge=cfg.ridge)
        xu = dm.features_matrix(partition.U, partition.feature_dim)
        labels.append(pseudo_labels(model, xu, cfg.eta, protos=supervised))
        feats.append(model.features(xu))
    model.prototypes = pw.prototypes(
        np.concatenate(feats, axis=0), np.concatenate(labels, axis=0),
        ridge=cfg.ridge,
    )


def train_fold(cfg: TrainConfig, partition: dm.DomainPartition,
               fold_index: int = 0, out_dir=None) -> FoldResult:
    """Run all epochs of one fold and evaluate on its held-out target data.

    The fold seed is cfg.seed + fold_index; every random stream (init,
    sampling, augmentation, dropout, divergence subsampling) derives from it,
    so results are identical across runs and across fold parallelism.
    """
    started = time.perf_counter()
    fold_seed = cfg.seed + fold_index
    root = np.random.default_rng(fold_seed)
    init_rng, sample_rng, aug_rng, dropout_rng, mmd_rng = root.spawn(5)
    model = ModelParams.init(partition.feature_dim, partition.n_classes, cfg, init_rng)

    if cfg.protocol == "split_target":
        t_train, t_eval = dm.split_target(partition, cfg.split_k)
    else:
        t_train, t_eval = partition.T, partition.T

    steps = cfg.steps_per_epoch or max(1, math.ceil(len(partition.S) / cfg.batch_s))
    thresholds = pw.ThresholdState(cfg.tau_high0, cfg.tau_low0, cfg.max_epoch)
    weights = cfg.loss_weights()
    sizes = (cfg.batch_s, cfg.batch_u if cfg.uses_unlabeled else 0, cfg.batch_t)

    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")
    epoch_records, bound_reports = [], []
    try:
        for epoch in range(cfg.max_epoch):
            tau_high, tau_low = thresholds.advance(epoch)
            ctx = EpochContext(
                epoch=epoch,
                max_epoch=cfg.max_epoch,
                lam=ad.lambda_schedule(epoch, cfg.max_epoch),
                gamma=weights.gamma(epoch, cfg.max_epoch),
                tau_high=tau_high,
                tau_low=tau_low,
            )
            sums = {"pair_source": 0.0, "pair_target": 0.0, "disc": 0.0}
            for _ in range(steps):
                batch = dm.sample_minibatch(partition, sizes, sample_rng,
                                            target_segments=t_train)
                losses = train_step(model, batch, ctx, cfg, aug_rng, dropout_rng)
                sums["pair_source"] += losses.pair_source
                sums["pair_target"] += losses.pair_target
                sums["disc"] += losses.disc
            means = {k: v / steps for k, v in sums.items()}
            target_acc, _ = evaluate(model, t_eval, partition.sealed)
            bound = ad.bound_report(
                model, partition, epoch,
                source_pair_loss=means["pair_source"],
                target_accuracy=target_acc,
                target_segments=t_train,
                rng=mmd_rng,
                pi_mode=cfg.pi_mode,
                sample_cap=cfg.mmd_cap,
            )
            record = metrics_record(fold_index, epoch, ctx, means, bound, target_acc)
            epoch_records.append(record)
            bound_reports.append(bound)
            if writer:
                writer.write(json.dumps(record) + "\n")
                writer.write(json.dumps(bound.to_json_dict()) + "\n")

        if cfg.final_prototypes == "recompute":
            recompute_final_prototypes(model, partition, cfg)
        accuracy, confusion = evaluate(model, t_eval, partition.sealed)
        seconds = time.perf_counter() - started
        final = {
            "fold": fold_index,
            "target_subject": partition.target_subject,
            "accuracy": accuracy,
            "confusion": confusion.tolist(),
            "seconds": seconds,
            "seed": fold_seed,
        }
        if writer:
            writer.write(json.dumps(final) + "\n")
        if out_dir is not None:
            save_checkpoint(model, os.path.join(out_dir, "checkpoint.txt"))
    finally:
        if writer:
            writer.close()
    return FoldResult(
        target_subject=partition.target_subject,
        seed=fold_seed,
        accuracy=accuracy,
        confusion=confusion,
        epoch_records=epoch_records,
        bound_reports=bound_reports,
        seconds=seconds,
    )


# -- LOSO harness ------------------------------------------------------------


@dataclass
class ResultTable:
    folds: list  # FoldResult, or FoldResult with error set for failed folds

    @property
    def succeeded(self):
        return [f for f in self.folds if f.error is None]

    @property
    def accuracies(self):
        return [f.accuracy for f in self.succeeded]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else float("nan")

    @property
    def n_failed(self) -> int:
        return len(self.folds) - len(self.succeeded)

    def summary_text(self) -> str:
        lines = ["target_subject accuracy"]
        for f in self.folds:
            if f.error is None:
                lines.append(f"{f.target_subject} {100 * f.accuracy:05.2f}")
            else:
                lines.append(f"{f.target_subject} FAILED ({f.error})")
        lines.append(f"mean {100 * self.mean:05.2f}+-{100 * self.std:05.2f}")
        if self.n_failed:
            lines.append(f"failed_folds {self.n_failed}")
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "folds": [
                {
                    "target_subject": f.target_subject,
                    "accuracy": None if f.error else f.accuracy,
                    "error": f.error,
                    "seed": f.seed,
                }
                for f in self.folds
            ],
            "mean": self.mean,
            "std": self.std,
            "n_failed": self.n_failed,
        }


def _fold_task(args):
    cfg, dataset, subject, fold_index, out_dir = args
    partition = dm.partition_loso(dataset, subject, cfg.n_labeled_trials)
    try:
        return train_fold(cfg, partition, fold_index, out_dir)
    except Exception as exc:  # noqa: BLE001 - fold failures must not kill the run
        return FoldResult(
            target_subject=subject,
            seed=cfg.seed + fold_index,
            accuracy=float("nan"),
            confusion=np.zeros((dataset.n_classes, dataset.n_classes), dtype=np.int64),
            epoch_records=[],
            bound_reports=[],
            seconds=0.0,
            error=f"{type(exc).__name__}: {exc}",
        )


def max_workers(requested: int) -> int:
    cap = os.environ.get("PROTOMATCH_THREADS")
    workers = max(1, int(requested))
    if cap:
        workers = min(workers, max(1, int(cap)))
    return workers


def run_loso(cfg: TrainConfig, dataset: dm.Dataset, out_dir=None,
             parallel: int = 1) -> ResultTable:
    """One fold per subject, each as the held-out target; failures are
    recorded per fold and do not stop the remaining folds."""
    if len(dataset.subjects) < 3:
        raise ValueError("leave-one-subject-out needs at least 3 subjects")
    tasks = []
    for fold_index, subject in enumerate(dataset.subjects):
        fold_dir = None
        if out_dir is not None:
            fold_dir = os.path.join(out_dir, f"fold_{subject:02d}")
        tasks.append((cfg, dataset, subject, fold_index, fold_dir))
    workers = max_workers(parallel)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_fold_task, tasks))
    else:
        folds = [_fold_task(t) for t in tasks]
    table = ResultTable(folds)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(table.summary_text() + "\n")
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(table.to_json_dict(), fh, indent=2)
            fh.write("\n")
    return table


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(model: ModelParams, path):
    mats = {}
    for name, t in model.feat_params.items():
        mats[f"feat.{name}"] = t.value
    for name, t in model.disc_params.items():
        mats[f"disc.{name}"] = t.value
    mats["bilinear.B"] = model.bilinear["B"].value
    mats["prototypes.P"] = model.prototypes
    dk.write_checkpoint(path, mats)


def load_checkpoint(path, feature_dim: int, n_classes: int,
                    cfg: TrainConfig) -> ModelParams:
    """Restore a model; every block must match the declared architecture."""
    mats = dk.read_checkpoint(path)
    model = ModelParams.init(feature_dim, n_classes, cfg, np.random.default_rng(0))
    wanted = {}
    for name, t in model.feat_params.items():
        wanted[f"feat.{name}"] = (model.feat_params, name, t.value.shape)
    for name, t in model.disc_params.items():
        wanted[f"disc.{name}"] = (model.disc_params, name, t.value.shape)
    wanted["bilinear.B"] = (model.bilinear, "B", model.bilinear["B"].value.shape)
    wanted["prototypes.P"] = (None, None, model.prototypes.shape)
    missing = sorted(set(wanted) - set(mats))
    if missing:
        raise dk.CheckpointError(f"checkpoint missing blocks {missing}")
    extra = sorted(set(mats) - set(wanted))
    if extra:
        raise dk.CheckpointError(f"checkpoint has unexpected blocks {extra}")
    for block, (params, name, shape) in wanted.items():
        if mats[block].shape != shape:
            raise dk.CheckpointError(
                f"block {block!r} has shape {mats[block].shape}, expected {shape}"
            )
        if params is None:
            model.prototypes = mats[block]
        else:
            params[name].value = mats[block]
    return model


# -- gradient verification suite ----------------------------------------------


def gradcheck_suite(seed: int = 0, h: float = 1e-5, inject_fault: bool = False) -> dict:
    """Finite-difference verification of both composite losses on a small
    random instance, plus an exactness check of the reversal wiring.

    Returns {loss_name: {parameter: worst relative error}}. The pairwise
    entry covers extractor weights and the bilinear matrix with prototypes
    in-graph; the discriminator entry covers extractor and discriminator
    weights of the plain loss; 'grl_wiring' compares the gradients the
    reversal node hands the extractor against -lambda times the verified
    plain gradients (and the discriminator's against the plain ones).
    `inject_fault` flips the sign of one backward rule, which must blow the
    pairwise check (a self-test of the verifier).
    """
    rng = np.random.default_rng(seed)
    n_s, n_u, n_t, dim, c = 6, 5, 5, 5, 3
    lam = 0.6
    cfg = TrainConfig(hidden_widths=(4, 3), disc_hidden=(4,), dropout=0.0,
                      max_epoch=10)
    feat_arch = feat_arch_for(dim, cfg)
    disc_arch = disc_arch_for(cfg)
    m = cfg.hidden_widths[-1]

    params = dk.ParamSet()
    for name, t in dk.init_mlp_params(feat_arch, rng).items():
        params.add(f"feat.{name}", t.value)
    for name, t in dk.init_mlp_params(disc_arch, rng).items():
        params.add(f"disc.{name}", t.value)
    params.add("bilinear.B", rng.normal(size=(m, m)) * 0.5)

    xs = rng.normal(size=(n_s, dim))
    xu = rng.normal(size=(n_u, dim))
    xt = rng.normal(size=(n_t, dim))
    ys = dm.one_hot(np.concatenate([np.arange(c), rng.integers(0, c, n_s - c)]), c)
    yhat_u = pw.sharpen(rng.dirichlet(np.ones(c), size=n_u), 0.9)
    y_stack = np.concatenate([ys, yhat_u], axis=0)
    domain_labels = ad.domain_onehot([n_s, n_u, n_t])
    weights = pw.LossWeights(delta=2.0, beta=0.01)

    def groups(ps):
        feat, disc, bil = dk.ParamSet(), dk.ParamSet(), dk.ParamSet()
        for name, t in ps.items():
            group, base = name.split(".", 1)
            {"feat": feat, "disc": disc, "bilinear": bil}[group]._entries[base] = t
        return feat, disc, bil

    def maybe_fault(t):
        if not inject_fault:
            return t
        return dk.Tensor(t.value, (t,), lambda g: ((t, -g),))

    def pairwise_loss(ps):
        feat, _, bil = groups(ps)
        feats, _ = dk.forward_mlp(np.concatenate([xs, xu, xt]), feat, feat_arch)
        f_su = feats.rows(0, n_s + n_u)
        f_t = feats.rows(n_s + n_u, n_s + n_u + n_t)
        protos = pw.prototypes(f_su, y_stack, ridge=1e-6)
        bmat = maybe_fault(bil["B"])
        probs_su = pw.classify(f_su, bmat, protos)
        loss_s = pw.pair_loss_source(
            pw.similarity_pred(probs_su), pw.similarity_truth_source(y_stack)
        )
        probs_t = pw.classify(f_t, bmat, protos)
        truth_t, mask_t = pw.target_truth_mask(probs_t.value, 0.8, 0.4)
        masked = pw.pair_loss_target(pw.similarity_pred(probs_t), truth_t, mask_t)
        return pw.combined_pair_loss(loss_s, masked.loss, protos, weights,
                                     epoch=3, max_epoch=10)

    def disc_loss(ps, with_grl=False):
        feat, disc, _ = groups(ps)
        feats, _ = dk.forward_mlp(np.concatenate([xs, xu, xt]), feat, feat_arch)
        if with_grl:
            feats = dk.grl(feats, lam)
        return ad.domain_disc_loss(feats, domain_labels, disc, disc_arch)

    report = {}
    pair_report = dk.finite_diff_report(pairwise_loss, params, h)
    report["pairwise_combined"] = {
        k: v for k, v in pair_report.items() if not k.startswith("disc.")
    }
    disc_report = dk.finite_diff_report(lambda ps: disc_loss(ps), params, h)
    report["discriminator"] = {
        k: v for k, v in disc_report.items() if not k.startswith("bilinear.")
    }

    # reversal wiring: grads from the wired graph vs the verified plain ones
    params.zero_grad()
    disc_loss(params).backward()
    plain = {name: t.grad.copy() for name, t in params.items()}
    params.zero_grad()
    disc_loss(params, with_grl=True).backward()
    wiring = {}
    for name, t in params.items():
        if name.startswith("bilinear."):
            continue
        want = -lam * plain[name] if name.startswith("feat.") else plain[name]
        scale = max(np.max(np.abs(want)), 1e-8)
        wiring[name] = float(np.max(np.abs(t.grad - want)) / scale)
    params.zero_grad()
    report["grl_wiring"] = wiring
    return report
