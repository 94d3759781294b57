"""L2 PGD attacks, adversarial / KL-regularized training and robust accuracy."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset, batch_iter, child_seed
from .models import (
    Model, as_batch, ce_graph, checkpoint_bytes, flatten, forward_logits,
    kl_graph, layout, log_softmax, one_hot, param_l2_norm, predict, trades_graph,
    _as_f32,
)

LOSS_TARGETS = ("cross-entropy", "kl-vs-clean")
TRAIN_MODES = ("standard", "at", "trades")


class AttackError(ArithmeticError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, model: Model, dump_path=None):
        self.epoch, self.batch, self.model, self.dump_path = epoch, batch, model, dump_path
        where = f"; state written to {dump_path}" if dump_path else ""
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}{where}")


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    steps: int = 8
    step_size: float | None = None
    clamp: tuple = (0.0, 1.0)
    loss_target: str = "cross-entropy"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.loss_target not in LOSS_TARGETS:
            raise ValueError(f"loss_target must be one of {LOSS_TARGETS}")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    milestones: tuple = (0.6, 0.85)  # fractions of the epoch budget
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    beta: float = 6.0
    mode: str = "standard"
    eval_size: int = 512
    dump_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= int(m * self.epochs) for m in self.milestones)
        return self.lr * self.gamma ** drops


@dataclass
class TrainMetrics:
    epoch: list = field(default_factory=list)
    clean_acc: list = field(default_factory=list)
    robust_acc: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    w_l2norm: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.epoch, self.clean_acc, self.robust_acc, self.loss, self.w_l2norm))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema: robustlens.train_metrics v1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "clean_acc", "robust_acc", "loss", "w_l2norm"])
            for e, c, r, l, n in self.rows():
                w.writerow([e, repr(c), repr(r), repr(l), repr(n)])


# --------------------------------------------------------------------------
# attacks


def _grad_x(model: Model, graph, bind: dict, xname: str):
    b = model.bindings()
    b.update(bind)
    n = len(bind[xname])
    vals, grads = ad.value_and_vjp(graph, b, "per_sample", np.ones(n), wrt=[xname])
    g = grads[xname]
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return vals, g


def _per_sample_loss(model: Model, xa, y, spec: AttackSpec, lc):
    if spec.loss_target == "cross-entropy":
        return _grad_x(model, ce_graph(model.config),
                       {"x": xa, "yw": one_hot(y, model.config.num_classes)}, "x")
    return _grad_x(model, kl_graph(model.config), {"xa": xa, "lc": lc}, "xa")


def _project(x0, xt, eps, lo, hi):
    n = len(x0)
    delta = (xt - x0).reshape(n, -1)
    norms = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    shrink = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    delta *= shrink[:, None]
    return np.clip(x0 + delta.reshape(x0.shape), lo, hi)


def pgd_attack(model: Model, x, y, spec: AttackSpec) -> np.ndarray:
    """L2 projected gradient ascent from x (no random start).

    Each step moves ``alpha * g / ||g||`` per sample, projects onto the
    eps-ball around x and clamps.  The highest-loss iterate is returned, so
    the loss never drops below its value at x.  For the KL target the
    gradient vanishes at x, so the first step follows the cross-entropy
    gradient instead.
    """
    cfg = model.config
    x0 = as_batch(cfg, x)
    y = np.asarray(y, dtype=np.int64)
    if spec.epsilon == 0:
        return x0.copy()
    lo, hi = spec.clamp
    lc = log_softmax(forward_logits(model, x0)) if spec.loss_target == "kl-vs-clean" else None
    best = x0.copy()
    best_loss = None
    xt = x0
    for t in range(spec.steps + 1):
        loss, g = _per_sample_loss(model, xt, y, spec, lc)
        if best_loss is None:
            best_loss = loss
        else:
            better = loss > best_loss
            best[better] = xt[better]
            best_loss = np.where(better, loss, best_loss)
        if t == spec.steps:
            break
        if t == 0 and spec.loss_target == "kl-vs-clean":
            _, g = _grad_x(model, ce_graph(cfg), {"x": x0, "yw": one_hot(y, cfg.num_classes)}, "x")
        gn = np.sqrt(np.einsum("ij,ij->i", g.reshape(len(g), -1), g.reshape(len(g), -1)))
        step = g / np.where(gn > 0, gn, 1.0).reshape((-1,) + (1,) * (g.ndim - 1))
        xt = _project(x0, xt + spec.alpha * step, spec.epsilon, lo, hi)
    return best


def kl_robust_loss(model: Model, x, y, spec: AttackSpec, beta: float) -> float:
    """Mean CE(x) + beta * mean KL(p(.|x*) || p(.|x)), x* maximizing the KL."""
    if spec.loss_target != "kl-vs-clean":
        raise ValueError("kl_robust_loss needs an attack with loss_target='kl-vs-clean'")
    x0 = as_batch(model.config, x)
    y = np.asarray(y, dtype=np.int64)
    lc = log_softmax(forward_logits(model, x0))
    ce = float(np.mean(-lc[np.arange(len(y)), y]))
    if beta == 0:
        return ce
    xa = pgd_attack(model, x0, y, spec)
    la = log_softmax(forward_logits(model, xa))
    kl = float(np.mean(np.sum(np.exp(la) * (la - lc), axis=1)))
    return ce + beta * kl


def clean_accuracy(model: Model, ds: LabeledDataset, batch_size: int = 512) -> float:
    if len(ds) == 0:
        return 0.0
    hits = 0
    for i in range(0, len(ds), batch_size):
        hits += int(np.sum(predict(model, ds.images[i:i + batch_size]) == ds.labels[i:i + batch_size]))
    return hits / len(ds)


def robust_accuracy(model: Model, ds: LabeledDataset, spec: AttackSpec,
                    batch_size: int = 256) -> float:
    """Fraction of samples classified correctly both at x and at the PGD point."""
    if len(ds) == 0:
        return 0.0
    hits = 0
    for i in range(0, len(ds), batch_size):
        x, y = ds.images[i:i + batch_size], ds.labels[i:i + batch_size]
        ok = predict(model, x) == y
        if spec.epsilon > 0:
            ok &= predict(model, pgd_attack(model, x, y, spec)) == y
        hits += int(np.sum(ok))
    return hits / len(ds)


# --------------------------------------------------------------------------
# training


def _strip(grads: dict) -> dict:
    return {k[2:]: v for k, v in grads.items()}


def _batch_grad(model: Model, xb, yb, attack: AttackSpec, cfg: TrainConfig, names):
    mc = model.config
    n = len(yb)
    yw = one_hot(yb, mc.num_classes) / n
    wrt = ["p:" + k for k in names]
    b = model.bindings()
    if cfg.mode == "trades" and cfg.beta != 0 and attack.epsilon > 0:
        kl_spec = AttackSpec(attack.epsilon, attack.steps, attack.step_size, attack.clamp, "kl-vs-clean")
        xa = pgd_attack(model, xb, yb, kl_spec)
        b.update({"x": xb, "xa": xa, "yw": yw, "kw": np.asarray(cfg.beta / n)})
        return ad.value_and_grad(trades_graph(mc), b, "loss", wrt)
    if cfg.mode == "at":
        xb = pgd_attack(model, xb, yb, attack)
    b.update({"x": xb, "yw": yw})
    return ad.value_and_grad(ce_graph(mc), b, "loss", wrt)


def _dump(model: Model, cfg: TrainConfig):
    if cfg.dump_path:
        Path(cfg.dump_path).write_bytes(checkpoint_bytes(model))
        return cfg.dump_path
    return None


def train(model: Model, ds: LabeledDataset, attack: AttackSpec, cfg: TrainConfig,
          trainable=None, eval_ds: LabeledDataset | None = None):
    """SGD with momentum on clean CE, PGD-AT, or CE + beta*KL.

    ``trainable`` restricts updates to the named layout blocks; every other
    parameter is returned bit-identical.  Final parameters are rounded to
    float32 (the checkpoint precision).
    """
    mc = model.config
    blocks = layout(mc)
    names = [b.name for b in blocks] if trainable is None else list(trainable)
    unknown = set(names) - {b.name for b in blocks}
    if unknown:
        raise ValueError(f"unknown parameter blocks {sorted(unknown)}")
    mask = np.zeros(len(model.params), dtype=bool)
    for b in blocks:
        if b.name in names:
            mask[b.offset:b.offset + b.size] = True
    w = model.params.copy()
    vel = np.zeros(int(mask.sum()))
    ev = eval_ds if eval_ds is not None else ds
    if len(ev) > cfg.eval_size:
        ev = ev.subset(np.arange(cfg.eval_size))
    metrics = TrainMetrics()
    current = model
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for bi, idx in enumerate(batch_iter(len(ds), cfg.batch_size, child_seed(cfg.seed, "batches"), epoch)):
            try:
                loss, grads = _batch_grad(current, ds.images[idx], ds.labels[idx], attack, cfg, names)
            except ad.NonFiniteError:
                loss = math.nan
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, bi, current, _dump(current, cfg))
            gvec = np.zeros(len(w))
            gs = _strip(grads)
            for b in blocks:
                if b.name in gs:
                    gvec[b.offset:b.offset + b.size] = gs[b.name].ravel()
            g = gvec[mask] + cfg.weight_decay * w[mask]
            vel = cfg.momentum * vel + g
            w[mask] -= lr * vel
            current = current.with_params(w)
            losses.append(loss)
        metrics.epoch.append(epoch + 1)
        metrics.loss.append(float(np.mean(losses)) if losses else 0.0)
        metrics.clean_acc.append(clean_accuracy(current, ev))
        metrics.robust_acc.append(robust_accuracy(current, ev, attack))
        metrics.w_l2norm.append(param_l2_norm(current))
    final = np.where(mask, _as_f32(w), model.params)
    return model.with_params(final, eps_train=attack.epsilon if cfg.mode != "standard" else 0.0), metrics
