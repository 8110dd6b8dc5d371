"""Dataset splits, staged training schedules and accuracy evaluation."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .events import PATTERNS, EventStream, MotionScript, generate_synthetic
from .model import (ModelParams, PipelineConfig, backbone_forward, encoder_body, head_forward,
                    prepare_surfaces)
from .nn import layers as L
from .nn import tensor as T
from .nn.optim import OptimState, optim_step
from .nn.tensor import Tensor, no_grad
from .preprocess import AugmentPolicy, Transform

log = logging.getLogger(__name__)

SPLIT_KINDS = ("leave_one_subject_out", "kfold", "fixed")
SCOPES = ("head_only", "all")
LABEL_SETS = ("super_category", "full")


class TrainingDivergence(RuntimeError):
    pass


# --- splits ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    kind: str = "leave_one_subject_out"
    held_out: object = None  # subject id, fold index, or collection of test indices for "fixed"
    train_fraction: float = 0.85
    val_fraction: float = 0.15
    seed: int = 0
    folds: int = 4

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"split kind must be one of {SPLIT_KINDS}")
        if abs(self.train_fraction + self.val_fraction - 1.0) > 1e-9:
            raise ValueError("train_fraction + val_fraction must equal 1")


@dataclass
class Split:
    train: list
    val: list
    test: list
    warnings: list[str] = field(default_factory=list)


def _train_val(pool: list, plan: SplitPlan, rng: np.random.Generator) -> tuple[list, list]:
    order = rng.permutation(len(pool))
    n_train = int(round(plan.train_fraction * len(pool)))
    return [pool[i] for i in order[:n_train]], [pool[i] for i in order[n_train:]]


def make_split(samples: list, plan: SplitPlan) -> Split:
    """Disjoint train/val/test sets; deterministic for a fixed ``plan.seed``."""
    rng = np.random.default_rng(plan.seed)
    if plan.kind == "leave_one_subject_out":
        subjects = [getattr(s, "subject", None) for s in samples]
        if any(sub is None for sub in subjects):
            raise ValueError("leave-one-subject-out needs a subject id on every sample")
        if plan.held_out not in set(subjects):
            raise KeyError(f"unknown subject id {plan.held_out!r}")
        test = [s for s, sub in zip(samples, subjects) if sub == plan.held_out]
        pool = [s for s, sub in zip(samples, subjects) if sub != plan.held_out]
    elif plan.kind == "kfold":
        fold = kfold_assignment(len(samples), plan.folds, plan.seed)
        if not 0 <= int(plan.held_out) < plan.folds:
            raise KeyError(f"fold index {plan.held_out!r} out of range")
        test = [s for s, f in zip(samples, fold) if f == plan.held_out]
        pool = [s for s, f in zip(samples, fold) if f != plan.held_out]
        rng = np.random.default_rng(plan.seed + 1)
    else:
        held = set(plan.held_out or ())
        if any(not 0 <= i < len(samples) for i in held):
            raise KeyError("fixed split references a sample index out of range")
        test = [s for i, s in enumerate(samples) if i in held]
        pool = [s for i, s in enumerate(samples) if i not in held]
    train, val = _train_val(pool, plan, rng)
    warnings = []
    train_labels = {getattr(s, "label", None) for s in train}
    for name, part in (("val", val), ("test", test)):
        missing = sorted({getattr(s, "label", None) for s in part} - train_labels, key=str)
        if missing:
            warnings.append(f"classes {missing} appear in {name} but not in train")
    for w in warnings:
        log.warning(w)
    return Split(train, val, test, warnings)


def kfold_assignment(n: int, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample; fold sizes differ by at most one."""
    fold = np.arange(n) % k
    return fold[np.random.default_rng(seed).permutation(n)]


# --- data ------------------------------------------------------------------

@dataclass
class SequenceDataset:
    """Pre-built surface sequences: ``surfaces`` is (N, T, H, W) float32."""

    surfaces: np.ndarray
    labels: np.ndarray
    subjects: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_streams(cls, streams: list[EventStream], params_or_config, pipe: PipelineConfig = PipelineConfig(),
                     horizon: int = 60) -> "SequenceDataset":
        config = getattr(params_or_config, "config", params_or_config)
        h, w = config.input_hw
        data = np.zeros((len(streams), horizon, h, w), np.float32)
        for i, s in enumerate(streams):
            for k, ts in enumerate(prepare_surfaces(s, config, pipe, horizon)):
                data[i, k] = ts.values
        labels = np.array([s.label for s in streams], np.int64)
        return cls(data, labels, [s.subject for s in streams])

    def relabel(self, mapping) -> "SequenceDataset":
        return SequenceDataset(self.surfaces, np.array([mapping[int(v)] for v in self.labels], np.int64), self.subjects)


SYNTH_SUPER = {0: 0, 1: 0, 2: 1, 3: 1}  # cyclic vs discrete pattern family


def synthetic_task(per_class: int, seed: int = 0, width: int = 64, height: int = 64, duration: float = 2.0,
                   rate: float = 20000.0, noise_rate: float = 20.0, subjects: int = 5) -> list[EventStream]:
    """Labelled synthetic streams, one class per motion pattern."""
    out = []
    for label, pattern in enumerate(PATTERNS):
        for i in range(per_class):
            sample_seed = seed * 1_000_003 + label * 10_007 + i
            script = MotionScript(pattern, duration, rate, noise_rate, sample_seed)
            s = generate_synthetic(script, width, height)
            out.append(s.with_meta(label=label, subject=f"S{1 + i % subjects}"))
    return out


# --- schedules -------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    scope: str = "all"
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    labels: str = "full"

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")
        if self.labels not in LABEL_SETS:
            raise ValueError(f"labels must be one of {LABEL_SETS}")
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass(frozen=True)
class Schedule:
    stages: tuple[Stage, ...]

    @classmethod
    def three_stage(cls, pretrain=60, transfer=10, finetune=100, batch_size=8) -> "Schedule":
        return cls((Stage("all", pretrain, batch_size, 1e-3, "super_category"),
                    Stage("head_only", transfer, batch_size, 1e-3, "full"),
                    Stage("all", finetune, batch_size, 1e-4, "full")))

    @classmethod
    def two_stage(cls, head=60, finetune=60, batch_size=8) -> "Schedule":
        return cls((Stage("head_only", head, batch_size, 1e-3, "full"),
                    Stage("all", finetune, batch_size, 1e-4, "full")))


_STAGE_TYPES = {"scope": str, "epochs": int, "batch_size": int, "learning_rate": float, "labels": str}


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def schedule_from_kv(kv: dict[str, str]) -> Schedule | None:
    if "stages" not in kv:
        return None
    stages = []
    for i in range(1, int(kv["stages"]) + 1):
        fields = {name: typ(kv[f"stage{i}.{name}"]) for name, typ in _STAGE_TYPES.items() if f"stage{i}.{name}" in kv}
        stages.append(Stage(**fields))
    return Schedule(tuple(stages))


def schedule_to_kv(schedule: Schedule) -> str:
    lines = [f"stages = {len(schedule.stages)}"]
    for i, st in enumerate(schedule.stages, 1):
        lines += [f"stage{i}.{name} = {getattr(st, name)}" for name in _STAGE_TYPES]
    return "\n".join(lines) + "\n"


# --- training --------------------------------------------------------------

@dataclass
class EpochLog:
    stage: int
    epoch: int
    train_loss: float
    val_acc: float
    seconds: float


def log_to_csv(entries: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "epoch", "train_loss", "val_acc", "seconds"])
    for e in entries:
        w.writerow([e.stage, e.epoch, f"{e.train_loss:.6f}", f"{e.val_acc:.4f}", f"{e.seconds:.3f}"])
    return buf.getvalue()


def _batch_loss(params: ModelParams, surfaces: np.ndarray, labels: np.ndarray, scope: str):
    b, t = surfaces.shape[:2]
    dtype = params.layers["head.out"]["weight"].dtype
    x = Tensor(surfaces.reshape(b * t, *surfaces.shape[2:]).astype(dtype, copy=False))
    if scope == "head_only":
        with no_grad():
            body, _ = encoder_body(params, T.reshape(backbone_forward(params, x), (b, t, -1)))
        body = Tensor(body.data)
    else:
        body, _ = encoder_body(params, T.reshape(backbone_forward(params, x), (b, t, -1)))
    logits = head_forward(params, body)
    # every prefix is an online prediction target
    target = np.repeat(labels[:, None], t, axis=1)
    loss, _ = T.softmax_cross_entropy(logits, target)
    return loss


def predict_final(params: ModelParams, data: SequenceDataset, batch_size: int = 16) -> np.ndarray:
    """Per-step class probabilities (N, T, C) from one causal pass per sequence."""
    out = []
    ql = params.config.queue_len
    with no_grad():
        for i in range(0, len(data), batch_size):
            chunk = data.surfaces[i:i + batch_size, -ql:]
            b, t = chunk.shape[:2]
            dtype = params.layers["head.out"]["weight"].dtype
            emb = backbone_forward(params, Tensor(chunk.reshape(b * t, *chunk.shape[2:]).astype(dtype)))
            body, _ = encoder_body(params, T.reshape(emb, (b, t, -1)))
            z = head_forward(params, body).data.astype(np.float64)
            z -= z.max(axis=-1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=-1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, 0, params.config.num_classes))


def _set_head(params: ModelParams, n_classes: int, rng) -> None:
    if params.config.num_classes == n_classes:
        return
    dtype = params.layers["head.out"]["weight"].dtype
    params.layers["head.out"] = L.init_dense(rng, params.config.embed_dim, n_classes, dtype, std=0.02)
    params.config = replace(params.config, num_classes=n_classes)


def train_staged(params: ModelParams, train: SequenceDataset, val: SequenceDataset, schedule: Schedule,
                 seed: int = 0, super_map: dict[int, int] | None = None, augment: AugmentPolicy | None = None,
                 on_epoch=None) -> tuple[ModelParams, list[EpochLog]]:
    """Run every stage in order; returns the trained parameters and the epoch log.

    ``params`` is not modified. After each stage the parameters with the best
    validation accuracy seen in that stage are carried forward. A stage whose
    label set differs from the current head size gets a fresh output layer.
    """
    if not len(train) or not len(val):
        raise ValueError("train and val sets must be non-empty")
    rng = np.random.default_rng(seed)
    params = params.copy()
    full_classes = max(int(max(train.labels.max(), val.labels.max())) + 1, params.config.num_classes)
    history: list[EpochLog] = []
    for si, stage in enumerate(schedule.stages, 1):
        if stage.labels == "super_category":
            if super_map is None:
                raise ValueError("super_category stage needs a super_map")
            tr, va = train.relabel(super_map), val.relabel(super_map)
            n_classes = max(super_map.values()) + 1
        else:
            tr, va = train, val
            n_classes = full_classes
        _set_head(params, n_classes, rng)
        names = params.names(stage.scope)
        opt = OptimState(learning_rate=stage.learning_rate)
        best_acc, best = -1.0, None
        for epoch in range(1, stage.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(tr))
            losses = []
            for b0 in range(0, len(order), stage.batch_size):
                idx = order[b0:b0 + stage.batch_size]
                batch = tr.surfaces[idx]
                if augment is not None:
                    batch = np.stack([Transform.sample(augment, rng).apply(seq) for seq in batch])
                params.zero_grad()
                loss = _batch_loss(params, batch, tr.labels[idx], stage.scope)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergence(f"non-finite loss at stage {si}, epoch {epoch}")
                loss.backward()
                optim_step(params.tensors(), opt, names)
                losses.append(value * len(idx))
            probs = predict_final(params, va)
            acc = float((probs[:, -1].argmax(axis=1) == va.labels).mean())
            entry = EpochLog(si, epoch, sum(losses) / len(tr), acc, time.perf_counter() - t0)
            history.append(entry)
            log.info("stage %d epoch %d loss %.4f val_acc %.3f (%.1fs)", si, epoch, entry.train_loss, acc, entry.seconds)
            if on_epoch is not None:
                on_epoch(entry)
            if acc >= best_acc:
                best_acc, best = acc, params.copy()
        params = best
    return params, history


# --- evaluation ------------------------------------------------------------

@dataclass
class AccuracyReport:
    accuracy: float
    per_class: dict[int, float]
    predictions: np.ndarray
    labels: np.ndarray


def accuracy_from_predictions(predictions, labels, num_classes: int | None = None) -> AccuracyReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    classes = range(num_classes) if num_classes is not None else sorted(set(labels.tolist()))
    per_class = {}
    for c in classes:
        m = labels == c
        if m.any():
            per_class[int(c)] = float((predictions[m] == c).mean())
    acc = float((predictions == labels).mean()) if len(labels) else 0.0
    return AccuracyReport(acc, per_class, predictions, labels)


def evaluate_accuracy(params: ModelParams, test: SequenceDataset) -> AccuracyReport:
    """Fraction of sequences whose final-step argmax equals the label, plus per-class recall."""
    if not len(test):
        raise ValueError("test set is empty")
    probs = predict_final(params, test)
    return accuracy_from_predictions(probs[:, -1].argmax(axis=1), test.labels, params.config.num_classes)
