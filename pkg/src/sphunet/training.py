"""Optimizers, learning-rate schedules, rotation augmentation, metrics and the training loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .layers import cross_entropy, l1_loss
from .models import load_model_state, model_state
from .symmetry import rotation_permutations

__all__ = [
    "TrainConfig",
    "MetricReport",
    "TrainResult",
    "NumericalError",
    "SGD",
    "Adam",
    "sgd_step",
    "adam_step",
    "PlateauSchedule",
    "step_schedule",
    "icosahedral_rotation_augment",
    "dice",
    "mae_mre",
    "regression_metrics",
    "predict",
    "evaluate_samples",
    "train",
]

MRE_MASK = 1e-5


class NumericalError(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""


_TASK_DEFAULTS = {
    "parcellation": dict(
        optimizer="sgd", lr=0.1, momentum=0.99, weight_decay=1e-4, schedule="plateau", factor=5.0, patience=2, epochs=30
    ),
    "regression": dict(
        optimizer="adam", lr=1e-4, momentum=0.0, weight_decay=0.0, schedule="step", factor=10.0, every=3, epochs=15
    ),
}


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Fields left as ``None`` take the per-task defaults: SGD (lr 0.1,
    momentum 0.99, weight decay 1e-4) with the plateau schedule for
    parcellation, Adam (lr 1e-4) with a step schedule for regression.
    """

    task: str = "parcellation"
    optimizer: str | None = None
    lr: float | None = None
    momentum: float | None = None
    weight_decay: float | None = None
    schedule: str | None = None
    factor: float | None = None
    patience: int = 2
    every: int = 3
    threshold: float = 1e-4
    epochs: int | None = None
    batch_size: int = 1
    pooling: str | None = None
    seed: int = 0
    augment: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.task not in _TASK_DEFAULTS:
            raise ValueError(f"unknown task {self.task!r}")
        for key, val in _TASK_DEFAULTS[self.task].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("plateau", "step", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.factor > 1:
            raise ValueError("schedule factor must be > 1")
        if self.patience < 1 or self.every < 1:
            raise ValueError("patience and every must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def loss(self) -> str:
        return "cross_entropy" if self.task == "parcellation" else "l1"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizers


def _check_grads(params):
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '?'} has no gradient; call backward first")


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``g = grad + wd * p``, ``m = momentum * m + g``, ``p -= lr * m``.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        _check_grads(self.params)
        for p in self.params:
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                m = p.state.get("momentum")
                m = g.copy() if m is None else self.momentum * m + g
                p.state["momentum"] = m
                g = m
            p.data -= (lr * g).astype(p.dtype)


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        _check_grads(self.params)
        for p in self.params:
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            st = p.state
            t = st.get("step", 0) + 1
            m = st.get("m", np.zeros_like(p.data))
            v = st.get("v", np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            st.update(step=t, m=m, v=v)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """One SGD update; momentum buffers live in each parameter's ``state``."""
    SGD(params, lr, momentum, weight_decay).step()


def adam_step(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update; moments and step counter live in each parameter's ``state``."""
    Adam(params, lr, betas, eps).step()


# ---------------------------------------------------------------------------
# schedules


class PlateauSchedule:
    """Divide the lr by ``factor`` once the metric fails to improve for ``patience`` epochs.

    Higher metric is better; an epoch improves only if ``metric > best + threshold``.
    The stagnation counter resets after each cut.
    """

    def __init__(self, factor: float = 5.0, patience: int = 2, threshold: float = 1e-4):
        if not factor > 1 or patience < 1:
            raise ValueError("need factor > 1 and patience >= 1")
        self.factor, self.patience, self.threshold = factor, patience, threshold
        self.best = -math.inf
        self.bad_epochs = 0
        self.multiplier = 1.0
        self.cuts: list[int] = []

    def step(self, metric: float, epoch: int | None = None) -> bool:
        """Record one epoch's metric; returns True when the lr was cut."""
        if metric > self.best + self.threshold:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.multiplier /= self.factor
            self.bad_epochs = 0
            self.cuts.append(len(self.cuts) if epoch is None else epoch)
            return True
        return False


def step_schedule(epoch: int, factor: float = 10.0, every: int = 3) -> float:
    """lr multiplier ``factor ** -(epoch // every)``."""
    return float(factor) ** -(epoch // every)


# ---------------------------------------------------------------------------
# augmentation


def icosahedral_rotation_augment(features, target, rng: np.random.Generator, level: int | None = None):
    """Rotate a sample by a random icosahedral symmetry.

    Vertex ``i`` moves to ``perm[i]``, so the rotated field ``g`` satisfies
    ``g[perm] = f``. Returns ``(features, target, k)`` with ``k`` the rotation index.
    """
    n = features.shape[0]
    if level is None:
        level = int(round(math.log((n - 2) / 10, 4)))
    perms = rotation_permutations(level)
    if perms.shape[1] != n:
        raise ValueError(f"sample has {n} vertices, not an icosphere level")
    k = int(rng.integers(len(perms)))
    perm = perms[k]
    f = np.empty_like(features)
    f[perm] = features
    t = np.empty_like(target)
    t[perm] = target
    return f, t, k


# ---------------------------------------------------------------------------
# metrics


def dice(pred, gt, k: int):
    """Per-ROI Dice and the unweighted mean over ROIs present in either map.

    Returns ``(per_roi, mean)``; absent ROIs are NaN in ``per_roi``.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in length")
    for name, lab in (("prediction", pred), ("ground truth", gt)):
        if lab.size and (lab.min() < 0 or lab.max() >= k):
            raise ValueError(f"{name} label outside [0, {k})")
    p_count = np.bincount(pred, minlength=k)
    g_count = np.bincount(gt, minlength=k)
    inter = np.bincount(gt[pred == gt], minlength=k)
    denom = p_count + g_count
    per_roi = np.full(k, np.nan)
    present = denom > 0
    per_roi[present] = 2.0 * inter[present] / denom[present]
    return per_roi, float(np.mean(per_roi[present]))


def mae_mre(pred, gt):
    """MAE (target units) and MRE (percent) over vertices with ``gt > 1e-5``."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in shape")
    mask = gt > MRE_MASK
    if not mask.any():
        raise ValueError("every vertex is masked (gt <= 1e-5)")
    err = np.abs(pred - gt)
    return float(err.mean()), float(100.0 * np.mean(err[mask] / gt[mask]))


def regression_metrics(preds, gts):
    """Per-subject MAE/MRE averaged across subjects."""
    vals = np.array([mae_mre(p, g) for p, g in zip(preds, gts)])
    return float(vals[:, 0].mean()), float(vals[:, 1].mean())


@dataclass
class MetricReport:
    task: str
    mean_dice: float | None = None
    dice_per_roi: list | None = None
    mae: float | None = None
    mre: float | None = None
    loss_curve: list = field(default_factory=list)
    n_samples: int = 0

    @property
    def score(self) -> float:
        """Higher-is-better scalar: mean Dice or negated MAE."""
        return self.mean_dice if self.task == "parcellation" else -self.mae

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["dice_per_roi"] is not None:
            d["dice_per_roi"] = [None if np.isnan(x) else float(x) for x in d["dice_per_roi"]]
        return {k: v for k, v in d.items() if v is not None}


def predict(model, features) -> np.ndarray:
    """Eval-mode forward of one ``(N, C)`` sample without building a graph."""
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            out = model(features).data
    finally:
        model.train(was_training)
    return out


def evaluate_samples(model, samples, task: str, n_classes: int | None = None) -> MetricReport:
    """Eval-mode metrics over ``samples`` (objects with ``features`` and ``target``)."""
    outs = [predict(model, s.features) for s in samples]
    if task == "parcellation":
        k = n_classes or model.spec.out_channels
        scores = [dice(o.argmax(axis=1), s.target, k) for o, s in zip(outs, samples)]
        per_roi = np.nanmean(np.stack([p for p, _ in scores]), axis=0) if scores else None
        return MetricReport(
            task, mean_dice=float(np.mean([m for _, m in scores])), dice_per_roi=list(per_roi), n_samples=len(samples)
        )
    mae, mre = regression_metrics(outs, [s.target for s in samples])
    return MetricReport(task, mae=mae, mre=mre, n_samples=len(samples))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: object
    report: MetricReport
    history: list
    best_epoch: int
    best_train_metric: float


def _set_normalization(model, samples, task):
    feats = np.concatenate([s.features for s in samples], axis=0).astype(np.float64)
    std = feats.std(axis=0)
    kw = dict(input_mean=feats.mean(axis=0), input_std=np.where(std > 0, std, 1.0))
    if task == "regression":
        tgt = np.concatenate([np.asarray(s.target).reshape(len(s.target), -1) for s in samples]).astype(np.float64)
        tstd = tgt.std(axis=0)
        kw.update(output_mean=tgt.mean(axis=0), output_std=np.where(tstd > 0, tstd, 1.0))
    model.set_normalization(**kw)


def _batch(samples, idx, config, epoch, level):
    feats, targets = [], []
    for i in idx:
        f, t = samples[i].features, np.asarray(samples[i].target)
        if config.augment:
            rng = np.random.default_rng([config.seed, epoch, int(i)])
            f, t, _ = icosahedral_rotation_augment(f, t, rng, level)
        feats.append(f)
        targets.append(t)
    if len(idx) == 1:
        return feats[0], targets[0]
    return np.stack(feats), np.stack(targets)


def train(model, train_set, config: TrainConfig, val_set=None, log_path=None, log=None) -> TrainResult:
    """Train ``model`` in place and return it loaded with the selected checkpoint.

    Each epoch shuffles the training samples with a seeded generator,
    optionally rotates each sample by a random icosahedral symmetry (its own
    RNG stream derived from ``(seed, epoch, sample)``), then evaluates the
    training set in eval mode. That training metric drives the plateau
    schedule. The checkpoint with the best validation metric is kept, or the
    best training metric when no validation set is given.
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("empty training set")
    n = train_set[0].features.shape[0]
    level = int(round(math.log((n - 2) / 10, 4)))
    if level != model.spec.top_level:
        raise ValueError(f"dataset level {level} does not match model level {model.spec.top_level}")
    if config.normalize:
        _set_normalization(model, train_set, config.task)

    params = list(model.parameters())
    if config.optimizer == "sgd":
        opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    else:
        opt = Adam(params, config.lr, weight_decay=config.weight_decay)
    plateau = PlateauSchedule(config.factor, config.patience, config.threshold)
    loss_fn = cross_entropy if config.task == "parcellation" else l1_loss
    dt = ad.get_default_dtype()
    order_rng = np.random.default_rng(config.seed)

    history, best, best_state = [], None, None
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            if config.schedule == "step":
                lr = config.lr * step_schedule(epoch, config.factor, config.every)
            elif config.schedule == "plateau":
                lr = config.lr * plateau.multiplier
            else:
                lr = config.lr
            model.train()
            order = order_rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), config.batch_size):
                x, y = _batch(train_set, order[start : start + config.batch_size], config, epoch, level)
                ad.zero_grad(params)
                x = x.astype(dt)
                if config.task == "regression":
                    y = y.astype(dt).reshape(x.shape[:-1] + (-1,))
                loss = loss_fn(model(x), y)
                val = float(loss.item())
                if not math.isfinite(val):
                    raise NumericalError(f"non-finite loss {val} at epoch {epoch}, step {start // config.batch_size}")
                ad.backward(loss)
                opt.step(lr)
                losses.append(val)
            train_report = evaluate_samples(model, train_set, config.task)
            val_report = evaluate_samples(model, val_set, config.task) if val_set else None
            if config.schedule == "plateau":
                plateau.step(train_report.score, epoch)
            select = val_report or train_report
            entry = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "train": train_report.to_dict()}
            if val_report is not None:
                entry["val"] = val_report.to_dict()
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if log:
                log(entry)
            if best is None or select.score > best[0]:
                best = (select.score, epoch, train_report.score)
                best_state = {k: v.copy() for k, v in model_state(model).items()}
    finally:
        if log_fh:
            log_fh.close()

    load_model_state(model, best_state)
    final = evaluate_samples(model, val_set or train_set, config.task)
    final.loss_curve = [h["loss"] for h in history]
    return TrainResult(model, final, history, best[1], best[2])
