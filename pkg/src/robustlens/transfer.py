"""Linear probing, masked fine-tuning, dataset distances and gap-vs-distance reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr

from .adversarial import AttackSpec, TrainConfig, clean_accuracy, robust_accuracy, train
from .data import LabeledDataset, child_seed, train_test_split
from .models import ConfigError, Model, flatten, forward_features, init_model, layout, trainable_groups

MODE_NAMES = {0: "head+last-norm", 1: "head+norms", 2: "all"}


class TransferError(ValueError):
    pass


# --------------------------------------------------------------------------
# features and probes


def extract_features(model: Model, ds: LabeledDataset) -> np.ndarray:
    """N x k feature matrix; row i is forward_features(x_i) evaluated alone."""
    if tuple(ds.shape) != tuple(model.config.input_shape) and len(ds):
        raise ConfigError(f"dataset shape {ds.shape} does not match model input {model.config.input_shape}")
    out = np.empty((len(ds), model.config.k))
    for i in range(len(ds)):
        out[i] = forward_features(model, ds.images[i:i + 1])[0]
    return out


@dataclass(frozen=True)
class ProbeConfig:
    max_iter: int = 5000
    tol: float = 1e-5  # gradient-norm stopping threshold
    l2: float = 1e-4
    lr: float | None = None  # default 1 / (smoothness bound)
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class ProbeResult:
    weight: np.ndarray  # (K, k)
    bias: np.ndarray  # (K,)
    train_acc: float
    test_acc: float
    iterations: int
    grad_norm: float


def _softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(X, y, num_classes: int, cfg: ProbeConfig = ProbeConfig()):
    """Full-batch gradient descent on mean cross-entropy + l2/2 ||W||^2.

    Returns (W, b, iterations, final gradient norm).  The l2 term keeps the
    problem strongly convex so the gradient-norm test can be met on
    separable data.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    Y = np.eye(num_classes)[y]
    Xa = np.hstack([X, np.ones((n, 1))])
    # softmax-CE Hessian is bounded by 1/2 * Xa^T Xa / n
    lip = 0.5 * np.linalg.norm(Xa, 2) ** 2 / n + cfg.l2
    lr = cfg.lr if cfg.lr is not None else 1.0 / lip
    W = np.zeros((d + 1, num_classes))
    reg = np.ones((d + 1, 1))
    reg[-1] = 0.0
    gn = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        G = Xa.T @ (_softmax(Xa @ W) - Y) / n + cfg.l2 * reg * W
        gn = float(np.linalg.norm(G))
        if gn < cfg.tol:
            break
        W -= lr * G
    return W[:-1].T.copy(), W[-1].copy(), it, gn


def _acc(W, b, X, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(np.argmax(X @ W.T + b, axis=1) == y))


def linear_probe(features, labels, cfg: ProbeConfig = ProbeConfig(), test=None, num_classes=None) -> ProbeResult:
    """Multinomial logistic regression on frozen features.

    ``test`` is an optional (features, labels) pair; otherwise a seeded
    80/20 split of the inputs is used.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise TransferError("degenerate labels: a probe needs at least two classes")
    K = int(num_classes or y.max() + 1)
    if test is None:
        order = np.random.default_rng(child_seed(cfg.seed, "probe-split")).permutation(len(y))
        n_test = int(round(cfg.test_fraction * len(y)))
        te, tr = np.sort(order[:n_test]), np.sort(order[n_test:])
        Xt, yt, X, y = X[te], y[te], X[tr], y[tr]
    else:
        Xt, yt = np.asarray(test[0], dtype=np.float64), np.asarray(test[1], dtype=np.int64)
    W, b, it, gn = fit_logistic(X, y, K, cfg)
    return ProbeResult(W, b, _acc(W, b, X, y), _acc(W, b, Xt, yt), it, gn)


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class TransferReport:
    source: str
    eps_train: float
    target: str
    mode: int
    seed: int
    clean_acc: float
    robust_acc: float | None

    def row(self):
        r = "" if self.robust_acc is None else repr(self.robust_acc)
        return [self.source, repr(self.eps_train), self.target, self.mode, self.seed, repr(self.clean_acc), r]


REPORT_HEADER = ["source", "eps_train", "target", "mode", "seed", "clean_acc", "robust_acc"]


def with_new_head(model: Model, num_classes: int, seed: int) -> Model:
    """Same extractor, freshly initialized (seeded) head with ``num_classes`` outputs."""
    cfg = replace(model.config, num_classes=num_classes)
    fresh = init_model(replace(cfg, seed=child_seed(seed, "head-init"))).blocks()
    blocks = model.blocks()
    for b in layout(cfg):
        if not b.name.startswith("head."):
            fresh[b.name] = blocks[b.name]
    return Model(cfg, flatten(cfg, fresh), model.eps_train, dict(model.meta))


def mode_blocks(cfg, mode: int) -> list:
    groups = trainable_groups(cfg)
    if mode == 0:
        return groups["head"] + groups["last_norm"]
    if mode == 1:
        if not cfg.norm:
            raise ConfigError("transfer mode 1 needs normalization layers (norm=true)")
        return groups["head"] + groups["norm"]
    if mode == 2:
        return [b.name for b in layout(cfg)]
    raise ConfigError(f"unknown transfer mode {mode}")


def source_name(model: Model) -> str:
    return "robust" if model.eps_train > 0 else "standard"


def finetune(model: Model, target: LabeledDataset, mode: int, cfg: TrainConfig,
             attack: AttackSpec | None = None, test: LabeledDataset | None = None):
    """Re-head the model for ``target`` and train the blocks selected by ``mode``.

    Training uses clean cross-entropy; blocks outside the mode are returned
    bit-identical.  Accuracies are measured on ``test`` (or a seeded 20%
    split of ``target``); robust accuracy is reported when ``attack`` is set.
    """
    names = mode_blocks(model.config, mode)
    if test is None:
        target, test = train_test_split(target, 0.2, cfg.seed)
    m = with_new_head(model, target.num_classes, cfg.seed)
    ft_cfg = replace(cfg, mode="standard")
    tuned, _ = train(m, target, AttackSpec(0.0), ft_cfg, trainable=names, eval_ds=target.subset(np.arange(0)))
    tuned = tuned.with_params(tuned.params, eps_train=model.eps_train)
    report = TransferReport(source_name(model), model.eps_train, target.name, mode, cfg.seed,
                            clean_accuracy(tuned, test),
                            robust_accuracy(tuned, test, attack) if attack is not None else None)
    return tuned, report


def probe(model: Model, target: LabeledDataset, test: LabeledDataset, pcfg: ProbeConfig = ProbeConfig(),
          attack: AttackSpec | None = None):
    """Mode-0 transfer for models without normalization: fit the head by
    converged logistic regression on frozen features, then evaluate the
    re-headed network end to end.
    """
    if model.config.norm:
        raise ConfigError("probe() fits only the head; use finetune(mode=0) when norm layers are present")
    res = linear_probe(extract_features(model, target), target.labels, pcfg,
                       test=(extract_features(model, test), test.labels), num_classes=target.num_classes)
    m = with_new_head(model, target.num_classes, pcfg.seed)
    blocks = m.blocks()
    blocks["head.weight"], blocks["head.bias"] = res.weight, res.bias
    m = m.with_params(flatten(m.config, blocks))
    report = TransferReport(source_name(model), model.eps_train, target.name, 0, pcfg.seed,
                            clean_accuracy(m, test),
                            robust_accuracy(m, test, attack) if attack is not None else None)
    return m, report


def write_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: robustlens.transfer_report v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


# --------------------------------------------------------------------------
# dataset distance


@dataclass(frozen=True)
class EMDConfig:
    reg: float = 1e-2
    max_iter: int = 10_000
    tol: float = 1e-12  # marginal L1 error at which Sinkhorn stops
    flag_residual: float = 1e-6


@dataclass
class EMDResult:
    a: str
    b: str
    distance: float
    residual: float  # duality gap of the returned plan: distance - exact OT <= residual
    converged: bool
    reference: str = ""
    marginal_error: float = 0.0  # L1 marginal error of the unrounded Sinkhorn plan


def signature(features: np.ndarray, labels: np.ndarray, num_classes: int):
    """Per-class centroids and class frequencies."""
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise TransferError(f"empty class(es) {missing}")
    cents = np.stack([features[labels == c].mean(axis=0) for c in range(num_classes)])
    return cents, counts / counts.sum()


def round_to_feasible(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an approximate plan onto the transport polytope U(a, b)."""
    P = P * np.minimum(a / np.maximum(P.sum(axis=1), 1e-300), 1.0)[:, None]
    P = P * np.minimum(b / np.maximum(P.sum(axis=0), 1e-300), 1.0)[None, :]
    ea, eb = a - P.sum(axis=1), b - P.sum(axis=0)
    s = ea.sum()
    if s > 0:
        P = P + np.outer(ea, eb) / s
    return P


@dataclass
class OTSolution:
    plan: np.ndarray
    cost: float
    gap: float
    marginal_error: float
    iterations: int


def _dual_lower_bound(f, a, b, C) -> float:
    """Feasible dual value via the c-transform g_j = min_i C_ij - f_i (a lower bound on OT)."""
    g = np.min(C - f[:, None], axis=0)
    f2 = np.min(C - g[None, :], axis=1)
    return float(f2 @ a + g @ b)


def sinkhorn(a, b, C, cfg: EMDConfig = EMDConfig()) -> OTSolution:
    """Log-domain Sinkhorn with reg annealing, then rounding to a feasible plan.

    The regularization is annealed geometrically from the cost scale down
    to ``cfg.reg`` (warm-started potentials); the iteration cap counts all
    stages.  The returned gap is the primal cost of the rounded plan minus a
    feasible dual value, so it bounds the distance to the exact optimum.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    la, lb = np.log(a), np.log(b)
    f, g = np.zeros(len(a)), np.zeros(len(b))
    cmax = float(C.max()) if C.size else 0.0
    regs = [cfg.reg]
    while regs[-1] * 4 < cmax:
        regs.append(regs[-1] * 4)
    regs.reverse()
    it, err = 0, np.inf
    for stage, r in enumerate(regs):
        last = stage == len(regs) - 1
        # intermediate stages only warm-start the next one
        stop = cfg.max_iter if last else min(cfg.max_iter, it + 100)
        while it < stop:
            it += 1
            f = r * (la - logsumexp((g[None, :] - C) / r, axis=1))
            g = r * (lb - logsumexp((f[:, None] - C) / r, axis=0))
            P = np.exp((f[:, None] + g[None, :] - C) / r)
            err = float(np.abs(P.sum(axis=1) - a).sum())
            if err < (cfg.tol if last else 1e-6):
                break
    P = round_to_feasible(P, a, b)
    cost = float(np.sum(P * C))
    gap = max(cost - _dual_lower_bound(f, a, b, C), 0.0)
    return OTSolution(P, cost, gap, err, it)


def signature_emd(ca, wa, cb, wb, cfg: EMDConfig = EMDConfig()):
    C = np.sqrt(np.maximum(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1), 0.0))
    return sinkhorn(wa, wb, C, cfg)


def dataset_emd(ds_a: LabeledDataset, ds_b: LabeledDataset, reference: Model,
                cfg: EMDConfig = EMDConfig(), ref_id: str = "reference") -> EMDResult:
    """EMD between class-centroid signatures in the reference model's feature space."""
    ca, wa = signature(extract_features(reference, ds_a), ds_a.labels, ds_a.num_classes)
    cb, wb = signature(extract_features(reference, ds_b), ds_b.labels, ds_b.num_classes)
    sol = signature_emd(ca, wa, cb, wb, cfg)
    return EMDResult(ds_a.name, ds_b.name, sol.cost, sol.gap, sol.gap <= cfg.flag_residual, ref_id,
                     sol.marginal_error)


def write_emds(emds, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: robustlens.emd v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dsA", "dsB", "distance", "residual"])
        for e in emds:
            w.writerow([e.a, e.b, repr(e.distance), repr(e.residual)])


# --------------------------------------------------------------------------
# gap vs distance


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return float("nan")
    return float(spearmanr(x, y).statistic)


@dataclass
class GapTable:
    rows: list  # (target, distance, robust_acc, standard_acc, gap), sorted by distance
    rho: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema: robustlens.gap_vs_distance v1\n")
            fh.write(f"# spearman_rho: {self.rho!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target", "distance", "robust_acc", "standard_acc", "gap"])
            for t, d, ra, sa, g in self.rows:
                w.writerow([t, repr(d), repr(ra), repr(sa), repr(g)])


def gap_vs_distance(reports, distances: dict) -> GapTable:
    """Median (robust - standard) clean accuracy per target against its EMD.

    ``distances`` maps target name to its distance from the source.
    """
    by = {}
    for r in reports:
        by.setdefault(r.target, {}).setdefault(r.source, []).append(r.clean_acc)
    targets = [t for t in by if "robust" in by[t] and "standard" in by[t]]
    if len(targets) < 3:
        raise TransferError(f"gap_vs_distance needs >= 3 targets with both sources, got {len(targets)}")
    missing = [t for t in targets if t not in distances]
    if missing:
        raise TransferError(f"no distance for targets {missing}")
    rows = []
    for t in targets:
        ra, sa = float(np.median(by[t]["robust"])), float(np.median(by[t]["standard"]))
        rows.append((t, float(distances[t]), ra, sa, ra - sa))
    rows.sort(key=lambda r: (r[1], r[0]))
    return GapTable(rows, spearman([r[1] for r in rows], [r[4] for r in rows]))
