"""Semi-supervised training loop, evaluation metrics and the repeat harness.

One repeat:

1. draw ``labels_per_class`` training pixels per class, the rest is test;
2. build the unlabeled pool once (EASLP-balanced, or uniform when EASLP is
   ablated);
3. per epoch and per unlabeled minibatch: weak forward, history fusion,
   history recording, confidence / count gap, categorization, losses on the
   strong view, one Adam step, threshold EMA update;
4. evaluate on the test pixels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import atsc, dhp
from .config import ExperimentConfig
from .easlp import EaslpResult, balanced_sample, propagate, pseudo_label_accuracy
from .errors import EmptyTestSet, InsufficientClass
from .hsicore import (HsiCube, LabelMap, SceneSpec, SeededRng, generate_scene, normalize_cube,
                      read_cube, read_labels)
from .model import (Adam, ClassifierParams, FeatureSpec, augment_batch,
                    fit_feature_spec, forward, lambda_schedule, patch_features, sharpen,
                    total_loss)
from .superpixel import SuperpixelSegmentation, slic_segment, target_region_count

# random sub-stream keys
_SPLIT, _POOL, _TRAIN = 1, 2, 3
_INIT, _EPOCH = 1, 2
_ORDER, _BATCH = 0, 1
_LAB, _UNLAB = 0, 1

LOG_COLUMNS = ["epoch", "l_sup", "l_easy", "l_amb", "lambda_a", "alpha_t", "L_t",
               "tau_conf", "tau_gap", "n_easy", "n_amb", "n_hard", "oa_test"]


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class_accuracy: dict[int, float]
    confusion: np.ndarray | None = None
    oa_std: float = 0.0
    aa_std: float = 0.0
    kappa_std: float = 0.0
    per_class_std: dict[int, float] = field(default_factory=dict)
    repeats: int = 1

    def to_dict(self) -> dict:
        out = {
            "oa": self.oa, "aa": self.aa, "kappa": self.kappa,
            "oa_std": self.oa_std, "aa_std": self.aa_std, "kappa_std": self.kappa_std,
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class_accuracy.items())},
            "per_class_std": {str(k): v for k, v in sorted(self.per_class_std.items())},
            "repeats": self.repeats,
        }
        if self.confusion is not None:
            out["confusion"] = self.confusion.tolist()
        return out


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """Rows: true class, columns: predicted class (ids 1..K)."""
    t = np.asarray(truth, dtype=np.int64) - 1
    p = np.asarray(pred, dtype=np.int64) - 1
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def metrics_from_confusion(conf: np.ndarray) -> MetricsReport:
    conf = np.asarray(conf, dtype=np.int64)
    n = conf.sum()
    if n == 0:
        raise EmptyTestSet("no test pixels to evaluate")
    diag = np.diag(conf).astype(np.float64)
    rows = conf.sum(axis=1)
    present = rows > 0
    recall = np.where(present, diag / np.maximum(rows, 1), 0.0)
    oa = diag.sum() / n
    aa = float(recall[present].mean())
    pe = float((rows.astype(np.float64) * conf.sum(axis=0)).sum()) / float(n) ** 2
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    per_class = {int(c + 1): float(recall[c]) for c in np.flatnonzero(present)}
    return MetricsReport(float(oa), aa, float(kappa), per_class, conf)


def evaluate(params: ClassifierParams, features: np.ndarray, truth: np.ndarray,
             num_classes: int | None = None) -> MetricsReport:
    """Metrics of ``params`` on test features with 1-based true labels."""
    truth = np.asarray(truth, dtype=np.int64)
    if truth.size == 0:
        raise EmptyTestSet("no test pixels to evaluate")
    k = num_classes or params.num_classes
    _, p = forward(params, features)
    pred = np.argmax(p, axis=1) + 1
    return metrics_from_confusion(confusion_matrix(truth, pred, k))


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Mean and population standard deviation over repeats."""
    if not reports:
        raise ValueError("nothing to aggregate")

    def ms(vals):
        a = np.asarray(vals, dtype=np.float64)
        return float(a.mean()), float(a.std())

    oa, oa_s = ms([r.oa for r in reports])
    aa, aa_s = ms([r.aa for r in reports])
    kp, kp_s = ms([r.kappa for r in reports])
    classes = sorted(set().union(*(r.per_class_accuracy for r in reports)))
    pc, pcs = {}, {}
    for c in classes:
        pc[c], pcs[c] = ms([r.per_class_accuracy.get(c, 0.0) for r in reports])
    conf = sum(r.confusion for r in reports) if all(r.confusion is not None for r in reports) else None
    return MetricsReport(oa, aa, kp, pc, conf, oa_s, aa_s, kp_s, pcs, len(reports))


# --------------------------------------------------------------------------
# Data preparation
# --------------------------------------------------------------------------


def split_train_test(label_map: LabelMap, per_class: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel indices of ``per_class`` training pixels per class and the rest."""
    lab = label_map.labels.ravel()
    train, test = [], []
    for c in label_map.class_ids:
        idx = np.flatnonzero(lab == c)
        if idx.size < per_class + 1:
            raise InsufficientClass(f"class {c} has {idx.size} pixels, needs at least {per_class + 1}")
        perm = rng.child(c).gen.permutation(idx)
        train.append(np.sort(perm[:per_class]))
        test.append(np.sort(perm[per_class:]))
    return np.concatenate(train), np.concatenate(test)


def train_label_map(label_map: LabelMap, train_idx: np.ndarray) -> LabelMap:
    out = np.zeros(label_map.labels.size, dtype=np.uint16)
    out[train_idx] = label_map.labels.ravel()[train_idx]
    return LabelMap(out.reshape(label_map.labels.shape))


@dataclass
class SceneData:
    """Everything shared by the repeats of one experiment."""
    cube: HsiCube
    truth: LabelMap
    feature_spec: FeatureSpec
    sampler: object
    features: np.ndarray
    num_classes: int
    _segmentation: SuperpixelSegmentation | None = None

    def segmentation(self, cfg: ExperimentConfig) -> SuperpixelSegmentation:
        # label independent, so computed once and reused by every repeat
        if self._segmentation is None:
            m = target_region_count(self.cube.height, self.cube.width, cfg.easlp.eps)
            self._segmentation = slic_segment(self.cube, m, cfg.easlp.compactness, cfg.easlp.slic_iters)
        return self._segmentation


def load_scene(cfg: ExperimentConfig) -> tuple[HsiCube, LabelMap]:
    if cfg.data.cube is not None:
        return normalize_cube(read_cube(cfg.data.cube)), read_labels(cfg.data.labels)
    s = cfg.scene
    spec = SceneSpec(s.height, s.width, s.bands, s.num_classes, s.region_granularity,
                     s.signature_separation, s.noise_sigma)
    cube, truth = generate_scene(spec, SeededRng(s.seed))
    return normalize_cube(cube), truth


def prepare_scene(cfg: ExperimentConfig) -> SceneData:
    cube, truth = load_scene(cfg)
    spec, sampler, feats = fit_feature_spec(cube, cfg.model.patch_size)
    return SceneData(cube, truth, spec, sampler, feats, max(truth.class_ids))


@dataclass
class Pool:
    indices: np.ndarray           # flat pixel indices
    easlp: EaslpResult | None = None
    easlp_labels: np.ndarray | None = None


def build_pool(scene: SceneData, train_map: LabelMap, cfg: ExperimentConfig, rng: SeededRng) -> Pool:
    """EASLP-balanced pool, or a uniform draw of the same nominal size."""
    k = scene.num_classes
    if cfg.ablation.easlp:
        res = propagate(scene.cube, train_map, cfg.easlp.eps, cfg.easlp.compactness,
                        cfg.easlp.slic_iters, seg=scene.segmentation(cfg))
        sample = balanced_sample(res.state.pixel_pseudo_labels, train_map, cfg.easlp.per_class, rng,
                                 classes=range(1, k + 1))
        return Pool(sample.flat_indices(), res, sample.labels())
    free = np.flatnonzero(train_map.labels.ravel() == 0)
    size = min(k * cfg.easlp.per_class, free.size)
    return Pool(np.sort(rng.gen.choice(free, size=size, replace=False)))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    l_sup: float
    l_easy: float
    l_amb: float
    lambda_a: float
    alpha_t: float
    L_t: int
    tau_conf: float
    tau_gap: float
    n_easy: int
    n_amb: int
    n_hard: int
    oa_test: float = float("nan")

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class TrainState:
    params: ClassifierParams
    optimizer: Adam
    thresholds: atsc.ThresholdState
    bank: dhp.HistoryBank
    schedule: dhp.DhpSchedule
    pool_patches: np.ndarray
    x_lab_patches: np.ndarray
    y_lab: np.ndarray
    rng: SeededRng
    epoch: int = 0
    fuse_entropy: np.ndarray | None = None   # per pool sample, latest epoch


def init_state(scene: SceneData, train_idx: np.ndarray, pool: Pool, cfg: ExperimentConfig,
               rng: SeededRng) -> TrainState:
    w = scene.cube.width
    k = scene.num_classes
    params = ClassifierParams.init(scene.feature_spec.dim, cfg.model.hidden, k, rng.child(_INIT))
    sched = dhp.DhpSchedule(cfg.dhp.l_min, cfg.dhp.l_max, cfg.dhp.alpha_min, cfg.dhp.alpha_max,
                            cfg.t0, cfg.epochs)
    thr = atsc.ThresholdState(cfg.atsc.tau_conf, cfg.tau_gap, cfg.atsc.momentum)
    sampler = scene.sampler
    return TrainState(
        params=params,
        optimizer=Adam(params, lr=cfg.model.lr),
        thresholds=thr,
        bank=dhp.HistoryBank(len(pool.indices), k, cfg.dhp.l_max),
        schedule=sched,
        pool_patches=sampler.patches(pool.indices // w, pool.indices % w),
        x_lab_patches=sampler.patches(train_idx // w, train_idx % w),
        y_lab=scene.truth.labels.ravel()[train_idx].astype(np.int64),
        rng=rng,
        fuse_entropy=np.full(len(pool.indices), np.nan),
    )


def _entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)


def run_epoch(state: TrainState, cfg: ExperimentConfig, spec: FeatureSpec) -> EpochStats:
    """One pass over the unlabeled pool in minibatches; updates ``state`` in place."""
    t = state.epoch
    sched = state.schedule
    alpha = dhp.alpha_at(t, sched) if cfg.ablation.dhp else 0.0
    cap = dhp.queue_length(t, sched)
    lam = lambda_schedule(t, cfg.epochs, cfg.model.lambda_max)
    erng = state.rng.child(_EPOCH, t)
    n_pool = len(state.pool_patches)
    order = erng.child(_ORDER).gen.permutation(n_pool)
    bs = cfg.model.batch_size
    n_batches = max(1, math.ceil(n_pool / bs))
    counts = np.zeros(3, dtype=np.int64)
    sums = np.zeros(3)
    for b in range(n_batches):
        brng = erng.child(_BATCH, b)
        lab_view = augment_batch(state.x_lab_patches, brng.child(_LAB), 0.0).weak
        x_lab = patch_features(lab_view, spec)
        batch = np.sort(order[b * bs:(b + 1) * bs])
        if cfg.ablation.unlabeled and batch.size:
            pair = augment_batch(state.pool_patches[batch], brng.child(_UNLAB), cfg.model.sigma_s)
            _, p_cur = forward(state.params, patch_features(pair.weak, spec))
            x_strong = patch_features(pair.strong, spec)
            # history fusion; samples without history fall back to p_cur
            p_hist, has = state.bank.distribution(batch)
            p_fuse = dhp.fuse(p_cur, p_hist, np.where(has, alpha, 0.0))
            state.fuse_entropy[batch] = _entropy(p_fuse)
            state.bank.record(batch, np.argmax(p_cur, axis=1) + 1, cap)
            conf = atsc.confidence(p_fuse)
            gap = atsc.count_gap(state.bank.counts[batch])
            if cfg.ablation.atsc:
                cat = atsc.categorize(conf, gap, state.thresholds)
            else:
                cat = atsc.categorize_fixed(conf, cfg.atsc.fixed_threshold)
            easy = cat == atsc.SampleCategory.EASY
            amb = cat == atsc.SampleCategory.AMBIGUOUS
            counts += np.bincount(cat, minlength=3)
            loss, grads = total_loss(
                state.params, x_lab, state.y_lab,
                x_strong[easy], np.argmax(p_fuse[easy], axis=1) + 1,
                x_strong[amb], sharpen(p_cur[amb], cfg.model.temperature), lam)
            if cfg.ablation.atsc:
                state.thresholds = atsc.update_thresholds(state.thresholds, conf, gap)
        else:
            loss, grads = total_loss(state.params, x_lab, state.y_lab, lambda_a=lam)
            counts[atsc.SampleCategory.HARD] += batch.size
        state.optimizer.step(state.params, grads)
        sums += (loss.l_sup, loss.l_easy, loss.l_amb)
    sums /= n_batches
    stats = EpochStats(t, float(sums[0]), float(sums[1]), float(sums[2]), lam, alpha, cap,
                       state.thresholds.tau_conf, state.thresholds.tau_gap,
                       int(counts[0]), int(counts[1]), int(counts[2]))
    state.epoch += 1
    return stats


@dataclass
class RepeatResult:
    report: MetricsReport
    log: list[EpochStats]
    state: TrainState
    pool: Pool
    train_idx: np.ndarray
    test_idx: np.ndarray
    easlp_accuracy: dict[str, float] = field(default_factory=dict)
    # (epoch, L_t, alpha_t, per-sample entropy of the fused distribution)
    fusion_trace: list[tuple[int, int, float, np.ndarray]] = field(default_factory=list)


def repeat_rng(cfg: ExperimentConfig, r: int) -> SeededRng:
    return SeededRng(cfg.seed, (r,))


def run_repeat(scene: SceneData, cfg: ExperimentConfig, r: int, eval_every_epoch: bool = True,
               trace_fusion: bool = False) -> RepeatResult:
    rng = repeat_rng(cfg, r)
    train_idx, test_idx = split_train_test(scene.truth, cfg.labels_per_class, rng.child(_SPLIT))
    train_map = train_label_map(scene.truth, train_idx)
    pool = build_pool(scene, train_map, cfg, rng.child(_POOL))
    state = init_state(scene, train_idx, pool, cfg, rng.child(_TRAIN))
    x_test = scene.features[test_idx]
    y_test = scene.truth.labels.ravel()[test_idx].astype(np.int64)
    log = []
    trace = []
    for _ in range(cfg.epochs):
        stats = run_epoch(state, cfg, scene.feature_spec)
        if trace_fusion:
            trace.append((stats.epoch, stats.L_t, stats.alpha_t, state.fuse_entropy.copy()))
        if eval_every_epoch:
            stats.oa_test = evaluate(state.params, x_test, y_test, scene.num_classes).oa
        log.append(stats)
    report = evaluate(state.params, x_test, y_test, scene.num_classes)
    if not eval_every_epoch and log:
        log[-1].oa_test = report.oa
    acc = {}
    if pool.easlp is not None:
        st = pool.easlp.state
        acc = {"stage1": pseudo_label_accuracy(st.stage1_pixel_labels, scene.truth, train_map),
               "stage2": pseudo_label_accuracy(st.pixel_pseudo_labels, scene.truth, train_map),
               "pool": float(np.mean(pool.easlp_labels == scene.truth.labels.ravel()[pool.indices]))}
    return RepeatResult(report, log, state, pool, train_idx, test_idx, acc, trace)


@dataclass
class ExperimentResult:
    report: MetricsReport
    repeats: list[RepeatResult]


def run_experiment(cfg: ExperimentConfig, scene: SceneData | None = None,
                   eval_every_epoch: bool = True, trace_fusion: bool = False) -> ExperimentResult:
    """All repeats of ``cfg``; repeat ``r`` draws from ``SeededRng(seed, (r,))``."""
    scene = scene or prepare_scene(cfg)
    runs = [run_repeat(scene, cfg, r, eval_every_epoch, trace_fusion) for r in range(cfg.repeats)]
    return ExperimentResult(aggregate([x.report for x in runs]), runs)


def write_log(path, log: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for s in log:
            w.writerow([repr(v) if isinstance(v, float) else v for v in s.row()])


def write_history_dump(path, run: RepeatResult) -> None:
    """Per epoch and pool sample: L(t), alpha_t and the fused-distribution entropy."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "sample", "pixel", "L_t", "alpha_t", "entropy_fuse"])
        for epoch, length, alpha, ent in run.fusion_trace:
            for i, pix in enumerate(run.pool.indices):
                w.writerow([epoch, i, int(pix), length, repr(float(alpha)), repr(float(ent[i]))])
