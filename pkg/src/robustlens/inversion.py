"""Gradient-based inversion of the representation f(x), with optional weight noise."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import child_seed
from .infogeom import NoiseModel, sample_noise
from .models import Model, as_batch, forward_features, forward_graph

MODES = ("deterministic", "noise-once", "noise-each-step")


class InversionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class InversionConfig:
    iters: int = 500
    lr: float = 0.1
    init_sigma: float = 0.1
    clamp: tuple = (0.0, 1.0)
    mode: str = "deterministic"
    noise: NoiseModel | None = None
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.init_sigma >= 0:
            raise ValueError("init_sigma must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode != "deterministic" and self.noise is None:
            raise ValueError(f"mode {self.mode!r} needs a noise model")


@dataclass
class InversionResult:
    x_hat: np.ndarray  # (B, C, H, W)
    loss_trace: np.ndarray  # (iters, B): L_inv at the iterate before each step
    iterations: int
    mode: str
    best_loss: np.ndarray  # (B,)
    initial_loss: np.ndarray  # (B,)
    clean_loss: np.ndarray | None = None  # noise-once: best iterate under the clean extractor
    extra: dict = field(default_factory=dict)


def init_images(shape, cfg: InversionConfig) -> np.ndarray:
    rng = np.random.default_rng(child_seed(cfg.seed, "inversion-init"))
    x = 0.5 + cfg.init_sigma * rng.standard_normal(shape) if cfg.init_sigma > 0 else np.full(shape, 0.5)
    return np.clip(x, *cfg.clamp)


def _residual_and_grad(model: Model, x, z_target):
    """Per-sample ||f(x) - z|| and the gradient of 1/2 sum ||f(x) - z||^2."""
    z = forward_features(model, x)
    r = z - z_target
    b = model.bindings()
    b["x"] = x
    g = ad.vjp(forward_graph(model.config), b, "z", r, wrt=["x"])["x"]
    loss = np.sqrt(np.sum(r * r, axis=1))
    if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(g))):
        raise InversionError("non-finite inversion loss")
    return loss, g


def _loss(model: Model, x, z_target) -> np.ndarray:
    r = forward_features(model, x) - z_target
    return np.sqrt(np.sum(r * r, axis=1))


def _check_target(model: Model, z_target) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z_target, dtype=np.float64))
    if z.shape[1] != model.config.k:
        raise ad.ShapeError(f"target dim {z.shape[1]} != representation dim {model.config.k}")
    return z


def _descend(model: Model, z_target, cfg: InversionConfig, x0=None):
    """Constant-lr gradient descent on 1/2 ||f(x) - z||^2, clamped, best iterate kept.

    The squared objective has the same minimizers as L_inv and avoids the
    fixed-length oscillation of the unsquared norm's gradient.
    """
    z_target = _check_target(model, z_target)
    shape = (len(z_target),) + tuple(model.config.input_shape)
    x = init_images(shape, cfg) if x0 is None else np.array(as_batch(model.config, x0))
    lo, hi = cfg.clamp
    trace = np.empty((cfg.iters, len(z_target)))
    best_x, best = x.copy(), None
    for t in range(cfg.iters):
        loss, g = _residual_and_grad(model, x, z_target)
        trace[t] = loss
        if best is None:
            best, initial = loss.copy(), loss.copy()
        else:
            better = loss < best
            best_x[better], best[better] = x[better], loss[better]
        x = np.clip(x - cfg.lr * g, lo, hi)
    loss = _loss(model, x, z_target)
    better = loss < best
    best_x[better], best[better] = x[better], loss[better]
    return InversionResult(best_x, trace, cfg.iters, cfg.mode, best, initial)


def invert(model: Model, z_target, cfg: InversionConfig = InversionConfig()) -> InversionResult:
    """x_hat = argmin ||z_target - f(x')|| by input-space gradient descent."""
    if cfg.mode != "deterministic":
        raise ValueError("invert runs the deterministic mode; see variational_invert / effective_image")
    return _descend(model, z_target, cfg)


def perturbed_model(model: Model, noise: NoiseModel, seed: int, tag: str) -> Model:
    if len(noise.variances) != len(model.params):
        raise ValueError("noise model does not match the parameter layout")
    rng = np.random.default_rng(child_seed(seed, tag))
    return model.with_params(model.params + sample_noise(noise, rng))


def variational_invert(model: Model, z_target, cfg: InversionConfig) -> InversionResult:
    """Draw one weight perturbation, then invert against the perturbed extractor.

    ``loss_trace``/``best_loss`` refer to the perturbed extractor (the
    optimization target); ``clean_loss`` scores the same x_hat under the
    unperturbed one.
    """
    if cfg.mode != "noise-once":
        raise ValueError("variational_invert needs mode='noise-once'")
    noisy = perturbed_model(model, cfg.noise, cfg.seed, "noise-once")
    res = _descend(noisy, z_target, cfg)
    res.clean_loss = _loss(model, res.x_hat, _check_target(model, z_target))
    return res


def effective_image(model: Model, x_source, cfg: InversionConfig, x0=None) -> InversionResult:
    """Invert with a fresh weight perturbation per step.

    Step t draws n_t, and moves x' along the gradient of
    1/2 ||f_{w+n_t}(x') - f_{w+n_t}(x_source)||^2.  The trace and the best
    iterate are scored with the clean extractor against f_w(x_source).
    """
    if cfg.mode != "noise-each-step":
        raise ValueError("effective_image needs mode='noise-each-step'")
    mc = model.config
    xs = as_batch(mc, x_source)
    z_clean = forward_features(model, xs)
    x = init_images(xs.shape, cfg) if x0 is None else np.array(as_batch(mc, x0))
    rng = np.random.default_rng(child_seed(cfg.seed, "noise-each-step"))
    lo, hi = cfg.clamp
    trace = np.empty((cfg.iters, len(xs)))
    best_x, best = x.copy(), None
    for t in range(cfg.iters):
        loss = _loss(model, x, z_clean)
        trace[t] = loss
        if best is None:
            best, initial = loss.copy(), loss.copy()
        else:
            better = loss < best
            best_x[better], best[better] = x[better], loss[better]
        noisy = model.with_params(model.params + sample_noise(cfg.noise, rng))
        _, g = _residual_and_grad(noisy, x, forward_features(noisy, xs))
        x = np.clip(x - cfg.lr * g, lo, hi)
    loss = _loss(model, x, z_clean)
    better = loss < best
    best_x[better], best[better] = x[better], loss[better]
    return InversionResult(best_x, trace, cfg.iters, cfg.mode, best, initial)


def run_mode(model: Model, images, cfg: InversionConfig) -> InversionResult:
    """Invert f_w(images) under ``cfg.mode``."""
    xs = as_batch(model.config, images)
    if cfg.mode == "deterministic":
        return invert(model, forward_features(model, xs), cfg)
    if cfg.mode == "noise-once":
        return variational_invert(model, forward_features(model, xs), cfg)
    return effective_image(model, xs, cfg)


# --------------------------------------------------------------------------
# comparison table and image output


@dataclass
class ModeComparison:
    iterations: np.ndarray
    curves: dict  # mode -> median loss per iteration
    results: dict  # mode -> InversionResult

    def write_csv(self, path) -> None:
        modes = list(self.curves)
        with open(path, "w", newline="") as fh:
            fh.write("# schema: robustlens.inversion_curves v1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration"] + modes)
            for i, it in enumerate(self.iterations):
                w.writerow([int(it)] + [repr(float(self.curves[m][i])) for m in modes])


def compare_modes(model: Model, images, cfgs) -> ModeComparison:
    """Median L_inv per iteration for each mode over a shared image batch.

    The deterministic mode is always included as the baseline (using the
    first config's budget, lr, init and seed when it is not listed).
    """
    cfgs = list(cfgs)
    if not cfgs:
        raise ValueError("no inversion configs")
    iters = {c.iters for c in cfgs}
    if len(iters) != 1:
        raise ValueError("all modes must share the iteration budget")
    if not any(c.mode == "deterministic" for c in cfgs):
        c0 = cfgs[0]
        cfgs.insert(0, InversionConfig(c0.iters, c0.lr, c0.init_sigma, c0.clamp, "deterministic", None, c0.seed))
    curves, results = {}, {}
    for c in cfgs:
        if c.mode in results:
            raise ValueError(f"mode {c.mode!r} listed twice")
        r = run_mode(model, images, c)
        results[c.mode] = r
        curves[c.mode] = np.median(r.loss_trace, axis=1)
    return ModeComparison(np.arange(1, iters.pop() + 1), curves, results)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(img: np.ndarray, path) -> None:
    """Write a (C, H, W) image in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c == 1:
        head, body = b"P5", to_uint8(img[0])
    elif c == 3:
        head, body = b"P6", to_uint8(np.transpose(img, (1, 2, 0)))
    else:
        raise ValueError(f"cannot write {c}-channel image")
    Path(path).write_bytes(head + f"\n{w} {h}\n255\n".encode("ascii") + body.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a binary PGM/PPM written by :func:`write_image`."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary 8-bit PGM/PPM file")
    kind, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    body = np.frombuffer(data[m.end():], dtype=np.uint8)
    if kind == b"P5":
        return body.reshape(1, h, w) / 255.0
    return np.transpose(body.reshape(h, w, 3), (2, 0, 1)) / 255.0
