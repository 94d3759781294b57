"""Fisher-information estimators over inputs and weights.

Input-space Fisher of a deterministic network needs a channel.  Two are
provided: ``gaussian-unit`` (z | x ~ N(f(x), sigma^2 I), so S = J^T J / sigma^2)
and ``categorical`` (the softmax output distribution, S = J_L^T (diag p - p p^T) J_L).
Sensitivities are stored in factor form S = B^T B.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adversarial import AttackSpec, TrainConfig, train
from .data import LabeledDataset, child_seed
from .models import (
    Model, as_batch, ce_graph, forward_features, forward_graph, forward_logits,
    kl_graph, layout, log_softmax, one_hot,
)

DECODERS = ("gaussian-unit", "categorical")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecoderModel:
    kind: str = "gaussian-unit"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


@dataclass(eq=False)
class SensitivityEstimate:
    """S = factor^T factor, an n x n PSD matrix kept implicit."""

    factor: np.ndarray
    decoder: str
    x_id: int | None = None
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.factor = np.asarray(self.factor, dtype=np.float64)
        if not np.all(np.isfinite(self.factor)):
            raise ad.NonFiniteError("non-finite sensitivity factor")

    @property
    def n(self) -> int:
        return self.factor.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        if self._dense is None:
            s = self.factor.T @ self.factor
            self._dense = 0.5 * (s + s.T)
        return self._dense

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.factor.T @ (self.factor @ v)

    def trace(self) -> float:
        return float(np.sum(self.factor * self.factor))

    def eigvals(self) -> np.ndarray:
        """All n eigenvalues (descending) via the smaller Gram matrix."""
        b = self.factor
        gram = b @ b.T if b.shape[0] <= b.shape[1] else b.T @ b
        mu = np.linalg.eigvalsh(0.5 * (gram + gram.T))[::-1]
        out = np.zeros(self.n)
        out[: min(len(mu), self.n)] = mu[: self.n]
        return out


# --------------------------------------------------------------------------
# input-space Jacobians and sensitivities


def _jacobian(model: Model, x, output: str, rows: int) -> np.ndarray:
    cfg = model.config
    x1 = as_batch(cfg, x)
    if len(x1) != 1:
        raise ad.ShapeError("expected a single sample")
    b = model.bindings()
    b["x"] = np.repeat(x1, rows, axis=0)
    g = ad.vjp(forward_graph(cfg), b, output, np.eye(rows), wrt=["x"])["x"]
    j = g.reshape(rows, cfg.input_dim)
    if not np.all(np.isfinite(j)):
        raise ad.NonFiniteError("non-finite Jacobian")
    return j


def rep_jacobian(model: Model, x) -> np.ndarray:
    """d z / d x for one sample, shape (k, n)."""
    return _jacobian(model, x, "z", model.config.k)


def logits_jacobian(model: Model, x) -> np.ndarray:
    return _jacobian(model, x, "logits", model.config.num_classes)


def categorical_factor(p: np.ndarray) -> np.ndarray:
    """Rows sqrt(p_y) (e_y - p): their Gram matrix is diag(p) - p p^T."""
    k = len(p)
    return np.sqrt(p)[:, None] * (np.eye(k) - p[None, :])


def sensitivity(model: Model, x, decoder: DecoderModel = DecoderModel(), x_id=None) -> SensitivityEstimate:
    if decoder.kind == "gaussian-unit":
        return SensitivityEstimate(rep_jacobian(model, x) / decoder.sigma, decoder.kind, x_id)
    jl = logits_jacobian(model, x)
    p = np.exp(log_softmax(forward_logits(model, x))[0])
    return SensitivityEstimate(categorical_factor(p) @ jl, decoder.kind, x_id)


def _sample_indices(n: int, count: int, seed: int) -> np.ndarray:
    if count > n:
        raise ValueError(f"sample_count {count} exceeds dataset size {n}")
    return np.sort(np.random.default_rng(child_seed(seed, "fisher-rep")).choice(n, count, replace=False))


def fisher_rep(model: Model, ds: LabeledDataset, decoder: DecoderModel = DecoderModel(),
               sample_count: int = 32, seed: int = 0) -> SensitivityEstimate:
    """F_{z|x}: the mean of S(z|x) over a seeded subsample of ``ds``."""
    idx = _sample_indices(len(ds), sample_count, seed)
    factors = [sensitivity(model, ds.images[i], decoder, int(i)).factor for i in idx]
    return SensitivityEstimate(np.vstack(factors) / np.sqrt(len(idx)), decoder.kind)


# --------------------------------------------------------------------------
# spectra


def _as_operator(S) -> tuple[Callable, int]:
    if isinstance(S, SensitivityEstimate):
        return S.matvec, S.n
    if callable(S):
        raise TypeError("pass (operator, n) for a bare callable")
    if isinstance(S, tuple):
        return S
    m = np.asarray(S, dtype=np.float64)
    return (lambda v: m @ v), m.shape[0]


def top_eigpair(S, tol: float = 1e-10, max_iter: int = 100_000):
    """Power iteration from the normalized all-ones vector.

    Stops once successive Rayleigh quotients differ by less than tol*lambda
    and the residual ||Sv - lambda v|| is at most tol*lambda.  The returned
    vector has its first nonzero component positive.
    """
    op, n = _as_operator(S)
    v = np.ones(n) / np.sqrt(n)
    lam_prev = None
    for _ in range(max_iter):
        w = op(v)
        lam = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0, _sign_fix(v)
        resid = float(np.linalg.norm(w - lam * v))
        if lam_prev is not None or resid == 0.0:
            if resid <= tol * abs(lam) and (lam_prev is None or abs(lam - lam_prev) <= tol * abs(lam)):
                return lam, _sign_fix(v)
        lam_prev = lam
        v = w / nw
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def _sign_fix(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-14)
    return -v if len(nz) and v[nz[0]] < 0 else v


@dataclass
class GNRCheck:
    mean_curvature: float  # tr(S) / n
    top_curvature: float  # v1^T S v1
    holds: bool


def gnr_bound_check(S, slack: float = 1e-8, tol: float = 1e-10) -> GNRCheck:
    """Isotropic-noise curvature tr(S)/n against the worst-direction curvature."""
    if isinstance(S, SensitivityEstimate):
        tr, n, mv = S.trace(), S.n, S.matvec
    else:
        m = np.asarray(S, dtype=np.float64)
        tr, n, mv = float(np.trace(m)), m.shape[0], (lambda v: m @ v)
    _, v = top_eigpair((mv, n), tol=tol)
    top = float(v @ mv(v))
    return GNRCheck(tr / n, top, tr / n <= top + slack)


# --------------------------------------------------------------------------
# second-order KL law


@dataclass
class KLRow:
    epsilon: float
    exact: float
    approx: float
    ratio: float


def _kl_and_grad(model: Model, x1, delta, lc):
    b = model.bindings()
    b.update({"xa": x1 + delta, "lc": lc})
    val, grads = ad.value_and_vjp(kl_graph(model.config), b, "per_sample", np.ones(1), wrt=["xa"])
    return float(val[0]), grads["xa"]


def max_kl_on_sphere(model: Model, x, epsilon: float, starts, iters: int = 500) -> float:
    """Maximize KL(p(.|x+d) || p(.|x)) over ||d|| = epsilon.

    Ascent by the fixed-point map d <- epsilon * grad / ||grad|| from each
    start direction; the best value seen is returned.  No pixel clamp.
    """
    cfg = model.config
    x1 = as_batch(cfg, x)
    lc = log_softmax(forward_logits(model, x1))
    best = 0.0
    for s in starts:
        d = (epsilon * s / np.linalg.norm(s)).reshape(x1.shape)
        prev = None
        for _ in range(iters):
            val, g = _kl_and_grad(model, x1, d, lc)
            best = max(best, val)
            if prev is not None and abs(val - prev) <= 1e-15 * max(abs(val), 1e-300):
                break
            prev = val
            gn = np.linalg.norm(g)
            if gn == 0:
                break
            d = epsilon * g / gn
    return best


def kl_second_order_check(model: Model, x, epsilons) -> list:
    """Exact max-KL on the eps-sphere against (eps^2 / 2) v1^T S v1.

    Uses the categorical decoder; ratio is exact / approx (nan at eps = 0).
    """
    S = sensitivity(model, x, DecoderModel("categorical"))
    _, v1 = top_eigpair(S, tol=1e-12)
    quad = float(v1 @ S.matvec(v1))
    rows = []
    for eps in epsilons:
        approx = 0.5 * eps * eps * quad
        exact = 0.0 if eps == 0 else max_kl_on_sphere(model, x, eps, [v1, -v1])
        ratio = exact / approx if approx > 0 else float("nan")
        rows.append(KLRow(float(eps), exact, approx, ratio))
    return rows


# --------------------------------------------------------------------------
# logistic closed form


@dataclass
class LogisticOracle:
    closed_form: np.ndarray
    mc_estimate: np.ndarray
    rel_error: float
    c: float
    trace_identity_error: float


def _logistic_graph(n: int) -> ad.Graph:
    g = ad.Graph()
    x = g.input("x", (None, n))
    w2 = g.input("w2", (2, n))  # rows: class -1 (zero weights), class +1 (w)
    y = g.input("y", (None, 2))
    g.output("logp", g.sum(g.mul(g.log_softmax(g.matmul(x, w2, transpose_b=True)), y)))
    return g


def logistic_fisher_oracle(w, X, label_samples: int = 100_000, seed: int = 0) -> LogisticOracle:
    """p(y=1|x) = sigmoid(w^T x): closed form c w w^T versus Monte Carlo.

    The Monte Carlo side draws y ~ p(y|x) and averages outer products of
    autodiff input-gradients of log p(y|x).
    """
    w = np.asarray(w, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p1 = 1.0 / (1.0 + np.exp(-(X @ w)))
    c = float(np.mean(p1 * (1.0 - p1)))
    closed = c * np.outer(w, w)
    trace_err = abs(float(np.trace(closed)) - c * float(w @ w))

    rng = np.random.default_rng(child_seed(seed, "logistic-mc"))
    idx = np.arange(label_samples) % len(X)
    ys = (rng.random(label_samples) < p1[idx]).astype(np.int64)
    bind = {"x": X[idx], "w2": np.vstack([np.zeros_like(w), w]), "y": one_hot(ys, 2)}
    # rows are independent, so the gradient of the sum holds per-row gradients
    grads = ad.backward(_logistic_graph(len(w)), bind, "logp", wrt=["x"])["x"]
    mc = grads.T @ grads / label_samples
    denom = np.linalg.norm(closed)
    rel = float(np.linalg.norm(mc - closed) / denom) if denom > 0 else float(np.linalg.norm(mc))
    return LogisticOracle(closed, mc, rel, c, trace_err)


# --------------------------------------------------------------------------
# weight Fisher and effective noise


@dataclass
class WeightFisherDiag:
    values: np.ndarray
    samples: int
    seed: int


def weight_fisher_diag(model: Model, ds: LabeledDataset, samples: int = 200, seed: int = 0) -> WeightFisherDiag:
    """Monte-Carlo diagonal of the true Fisher (labels drawn from the model)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    cfg = model.config
    rng = np.random.default_rng(child_seed(seed, "weight-fisher"))
    order = rng.permutation(len(ds))
    g = ce_graph(cfg)
    names = ["p:" + b.name for b in layout(cfg)]
    base = model.bindings()
    acc = np.zeros(len(model.params))
    for t in range(samples):
        x = ds.images[order[t % len(ds)]][None]
        p = np.exp(log_softmax(forward_logits(model, x))[0])
        y = int(rng.choice(cfg.num_classes, p=p / p.sum()))
        b = dict(base)
        b.update({"x": x, "yw": one_hot([y], cfg.num_classes)})
        grads = ad.backward(g, b, "loss", wrt=names)
        flat = np.concatenate([grads["p:" + blk.name].ravel() for blk in layout(cfg)])
        acc += flat * flat
    return WeightFisherDiag(acc / samples, samples, seed)


@dataclass
class NoiseModel:
    variances: np.ndarray
    beta: float
    lam: float

    @classmethod
    def zero(cls, n: int) -> "NoiseModel":
        return cls(np.zeros(n), 0.0, 0.0)


def effective_noise(fisher: WeightFisherDiag, beta: float, lam: float) -> NoiseModel:
    """Diagonal optimal posterior covariance (beta/2) / (F_i + beta / (2 lam^2))."""
    if not (beta > 0 and lam > 0):
        raise ValueError("beta and lambda must be > 0")
    f = np.asarray(fisher.values, dtype=np.float64)
    var = (beta / 2.0) / (f + beta / (2.0 * lam * lam))
    return NoiseModel(np.minimum(var, lam * lam), beta, lam)


def sample_noise(noise: NoiseModel, rng) -> np.ndarray:
    return np.sqrt(noise.variances) * rng.standard_normal(len(noise.variances))


def sample_perturbed(model: Model, noise: NoiseModel, seed: int) -> Model:
    if len(noise.variances) != len(model.params):
        raise ValueError("noise model does not match the parameter layout")
    rng = np.random.default_rng(child_seed(seed, "perturb"))
    return model.with_params(model.params + sample_noise(noise, rng))


# --------------------------------------------------------------------------
# scalar diagnostics


def half_logdet(S: SensitivityEstimate, ridge: float) -> float:
    mu = np.maximum(S.eigvals(), 0.0)
    return 0.5 * float(np.sum(np.log(mu + ridge)))


def effective_info_term(model: Model, ds: LabeledDataset, decoder: DecoderModel = DecoderModel(),
                        ridge: float = 1e-6, samples: int = 32, seed: int = 0) -> float:
    """Mean over x of 1/2 log det(S(z|x) + ridge I).

    The entropy H(x) and the (2 pi e)^k constant are left out; compare
    models by differences.
    """
    if not ridge > 0:
        raise ValueError("ridge must be > 0")
    idx = _sample_indices(len(ds), samples, seed)
    return float(np.mean([half_logdet(sensitivity(model, ds.images[i], decoder), ridge) for i in idx]))


def weight_logvar(fisher: WeightFisherDiag, floor: float = 1e-8) -> float:
    """sum_i log(1 / max(F_i, floor)); larger means a flatter weight Fisher."""
    if not floor > 0:
        raise ValueError("floor must be > 0")
    return float(np.sum(-np.log(np.maximum(fisher.values, floor))))


# --------------------------------------------------------------------------
# dataset stability of the weights


@dataclass
class WeightDisplacement:
    total: float
    per_layer: dict


def weight_info_proxy(model_a: Model, model_b: Model) -> WeightDisplacement:
    """||w_A - w_B|| between models retrained on clean and perturbed data.

    A finite-difference stand-in for the dataset-sensitivity of the
    weights; smaller means more dataset-stable weights.
    """
    if model_a.config != model_b.config:
        raise ValueError("architecture mismatch")
    d = model_a.params - model_b.params
    per = {}
    for b in layout(model_a.config):
        layer = b.name.split(".")[0]
        seg = d[b.offset:b.offset + b.size]
        per[layer] = per.get(layer, 0.0) + float(seg @ seg)
    return WeightDisplacement(float(np.sqrt(d @ d)), {k: float(np.sqrt(v)) for k, v in per.items()})


def relabel(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Reassign a seeded ``fraction`` of labels to a different class."""
    rng = np.random.default_rng(child_seed(seed, "relabel"))
    n = int(round(fraction * len(ds)))
    idx = rng.choice(len(ds), n, replace=False)
    labels = ds.labels.copy()
    labels[idx] = (labels[idx] + rng.integers(1, ds.num_classes, size=n)) % ds.num_classes
    return replace(ds, labels=labels)


def weight_info_sweep(model: Model, ds: LabeledDataset, fractions, attack: AttackSpec,
                      cfg: TrainConfig, seed: int = 0) -> dict:
    """Retrain from the same init on relabelled data; displacement per fraction."""
    ref, _ = train(model, ds, attack, cfg)
    out = {}
    for f in fractions:
        other, _ = train(model, relabel(ds, f, seed), attack, cfg)
        out[f] = weight_info_proxy(ref, other)
    return out


# --------------------------------------------------------------------------
# Fisher data-processing inequality through the linear head


@dataclass
class DPICheck:
    tr_F_yx: float
    tr_F_zx: float
    holds: bool
    tr_F_yx_linearized: float


def whitened_normal(m: int, k: int, rng) -> np.ndarray:
    """2m x k antithetic normal draws whose second moment is exactly I."""
    e = rng.standard_normal((m, k))
    e = np.vstack([e, -e])
    c = e.T @ e / len(e)
    return np.linalg.solve(np.linalg.cholesky(c), e.T).T


def fisher_dpi_check(model: Model, x, sigma: float = 1.0, noise_pairs: int = 2048,
                     seed: int = 0, slack: float = 1e-8) -> DPICheck:
    """tr F_{y|x} <= tr F_{z|x} for x -> z ~ N(f(x), sigma^2 I) -> y = softmax(Az + b).

    F_{y|x} = J^T G J, with G the Fisher of the categorical y about the
    channel mean, estimated with the Gaussian score (Stein) identity over
    whitened antithetic noise.  Because the noise second moment is exactly
    I, G <= I / sigma^2 holds for the estimate itself (Cauchy-Schwarz), not
    only in expectation.
    """
    cfg = model.config
    J = rep_jacobian(model, x)
    b = model.blocks()
    A, bias = b["head.weight"], b["head.bias"]
    mu = forward_features(model, x)[0]
    tr_zx = float(np.sum(J * J)) / sigma ** 2

    rng = np.random.default_rng(child_seed(seed, "dpi"))
    eps = whitened_normal(noise_pairs, cfg.k, rng)
    s = np.exp(log_softmax((mu[None, :] + sigma * eps) @ A.T + bias))
    g = s.mean(axis=0)
    D = s.T @ eps / (len(eps) * sigma)  # K x k, rows grad_mu g_y
    keep = g > 0
    G = (D[keep] / g[keep, None]).T @ D[keep]
    JJt = J @ J.T
    tr_yx = float(np.sum(G * JJt))

    p = np.exp(log_softmax(mu @ A.T + bias))
    lin = categorical_factor(p) @ A @ J
    return DPICheck(tr_yx, tr_zx, tr_yx <= tr_zx + slack, float(np.sum(lin * lin)))


# --------------------------------------------------------------------------
# report helper


def fisher_summary(model: Model, ds: LabeledDataset, decoder: DecoderModel, samples: int = 32,
                   weight_samples: int = 200, ridge: float = 1e-6, floor: float = 1e-8,
                   seed: int = 0) -> dict:
    F = fisher_rep(model, ds, decoder, min(samples, len(ds)), seed)
    lam1, _ = top_eigpair(F, tol=1e-8)
    wf = weight_fisher_diag(model, ds, weight_samples, seed)
    return {
        "tr_F_zx": F.trace(),
        "lambda1": lam1,
        "eff_info_term": effective_info_term(model, ds, decoder, ridge, min(samples, len(ds)), seed),
        "weight_logvar": weight_logvar(wf, floor),
    }
