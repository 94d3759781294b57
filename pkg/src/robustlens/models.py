"""Feature extractors with a linear head, flat parameter layout, checkpoints."""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

MAGIC = b"RLNS"
VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    """Malformed checkpoint; ``code`` is one of the short strings below."""

    codes = ("bad magic", "version mismatch", "truncated", "trailing data",
             "layout mismatch", "bad header")

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``widths`` are the hidden widths for ``mlp`` (the last one is the
    representation dim k).  For ``smallconv`` they are
    ``(conv0 channels, conv1 channels, dense width)``: conv 5x5 stride 1,
    conv 5x5 stride 2 (both valid padding), then a dense layer of width k.
    """

    arch: str = "mlp"
    input_shape: tuple = (1, 28, 28)
    widths: tuple = (256, 128)
    num_classes: int = 10
    norm: bool = False
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.arch not in ("mlp", "smallconv"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.activation not in ("relu", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.arch == "smallconv":
            if len(self.widths) != 3:
                raise ConfigError("smallconv widths are (conv0, conv1, dense)")
            _, h, w = self.input_shape
            if min(h, w) < 13:
                raise ConfigError("smallconv needs inputs of at least 13x13")

    @property
    def k(self) -> int:
        return self.widths[-1]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@functools.lru_cache(maxsize=None)
def layout(cfg: ModelConfig) -> tuple:
    """Parameter blocks in storage order: extractor layers, then the head."""
    specs = []
    c, h, w = cfg.input_shape
    if cfg.arch == "mlp":
        fan = cfg.input_dim
        for i, width in enumerate(cfg.widths):
            specs += [(f"fc{i}.weight", (width, fan)), (f"fc{i}.bias", (width,))]
            if cfg.norm:
                specs += [(f"norm{i}.scale", (width,)), (f"norm{i}.shift", (width,))]
            fan = width
    else:
        c0, c1, dense = cfg.widths
        h0, w0 = h - 4, w - 4
        h1, w1 = (h0 - 5) // 2 + 1, (w0 - 5) // 2 + 1
        specs += [("conv0.weight", (c0, c, 5, 5)), ("conv0.bias", (c0, 1, 1))]
        if cfg.norm:
            specs += [("norm0.scale", (c0, 1, 1)), ("norm0.shift", (c0, 1, 1))]
        specs += [("conv1.weight", (c1, c0, 5, 5)), ("conv1.bias", (c1, 1, 1))]
        if cfg.norm:
            specs += [("norm1.scale", (c1, 1, 1)), ("norm1.shift", (c1, 1, 1))]
        specs += [("fc2.weight", (dense, c1 * h1 * w1)), ("fc2.bias", (dense,))]
        if cfg.norm:
            specs += [("norm2.scale", (dense,)), ("norm2.shift", (dense,))]
    specs += [("head.weight", (cfg.num_classes, cfg.k)), ("head.bias", (cfg.num_classes,))]
    out, off = [], 0
    for name, shape in specs:
        b = Block(name, off, tuple(shape))
        out.append(b)
        off += b.size
    return tuple(out)


def param_count(cfg: ModelConfig) -> int:
    last = layout(cfg)[-1]
    return last.offset + last.size


def unflatten(cfg: ModelConfig, flat: np.ndarray) -> dict:
    flat = np.asarray(flat)
    if flat.shape != (param_count(cfg),):
        raise ConfigError(f"flat vector has shape {flat.shape}, layout needs ({param_count(cfg)},)")
    return {b.name: flat[b.offset:b.offset + b.size].reshape(b.shape) for b in layout(cfg)}


def flatten(cfg: ModelConfig, blocks: dict) -> np.ndarray:
    out = np.empty(param_count(cfg))
    for b in layout(cfg):
        arr = np.asarray(blocks[b.name], dtype=np.float64)
        if arr.shape != b.shape:
            raise ConfigError(f"block {b.name} has shape {arr.shape}, expected {b.shape}")
        out[b.offset:b.offset + b.size] = arr.ravel()
    return out


def trainable_groups(cfg: ModelConfig) -> dict:
    """Block names grouped by role: extractor weights, norm layers, head."""
    names = [b.name for b in layout(cfg)]
    norms = [n for n in names if n.startswith("norm")]
    last_norm = sorted({n.split(".")[0] for n in norms}, key=lambda s: int(s[4:]))
    return {
        "head": [n for n in names if n.startswith("head.")],
        "norm": norms,
        "last_norm": [n for n in norms if last_norm and n.startswith(last_norm[-1] + ".")],
        "extractor": [n for n in names if not n.startswith(("head.", "norm"))],
    }


def _as_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable model value: configuration plus a flat parameter vector."""

    config: ModelConfig
    params: np.ndarray
    eps_train: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64)
        if p.shape != (param_count(self.config),):
            raise ConfigError(f"params have shape {p.shape}, layout needs ({param_count(self.config)},)")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def blocks(self) -> dict:
        return unflatten(self.config, self.params)

    def with_params(self, flat, **changes) -> "Model":
        return replace(self, params=flat, **changes)

    def bindings(self) -> dict:
        return {"p:" + k: v for k, v in self.blocks().items()}


def init_model(cfg: ModelConfig, eps_train: float = 0.0) -> Model:
    """Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Values are rounded to float32 so checkpoints round-trip exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    blocks = {}
    for b in layout(cfg):
        kind = b.name.split(".")[1]
        if kind == "scale":
            blocks[b.name] = np.ones(b.shape)
        elif kind == "shift":
            blocks[b.name] = np.zeros(b.shape)
        else:
            layer = b.name.split(".")[0]
            wshape = next(x.shape for x in layout(cfg) if x.name == layer + ".weight")
            fan_in = int(np.prod(wshape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            blocks[b.name] = rng.uniform(-bound, bound, size=b.shape)
    return Model(cfg, _as_f32(flatten(cfg, blocks)), eps_train)


# --------------------------------------------------------------------------
# graph construction


def _act(g: ad.Graph, cfg: ModelConfig, h):
    return g.relu(h) if cfg.activation == "relu" else h


def param_inputs(g: ad.Graph, cfg: ModelConfig) -> dict:
    return {b.name: g.input("p:" + b.name, b.shape) for b in layout(cfg)}


def build_features(g: ad.Graph, cfg: ModelConfig, x, p: dict):
    """Append the extractor to ``g``; ``x`` is an (B, C, H, W) node."""
    if cfg.arch == "mlp":
        h = g.flatten(x)
        for i in range(len(cfg.widths)):
            h = g.add(g.matmul(h, p[f"fc{i}.weight"], transpose_b=True), p[f"fc{i}.bias"])
            if cfg.norm:
                h = g.add(g.mul(h, p[f"norm{i}.scale"]), p[f"norm{i}.shift"])
            h = _act(g, cfg, h)
        return h
    h = x
    for i, stride in ((0, 1), (1, 2)):
        h = g.add(g.conv2d(h, p[f"conv{i}.weight"], stride, "valid"), p[f"conv{i}.bias"])
        if cfg.norm:
            h = g.add(g.mul(h, p[f"norm{i}.scale"]), p[f"norm{i}.shift"])
        h = _act(g, cfg, h)
    h = g.add(g.matmul(g.flatten(h), p["fc2.weight"], transpose_b=True), p["fc2.bias"])
    if cfg.norm:
        h = g.add(g.mul(h, p["norm2.scale"]), p["norm2.shift"])
    return _act(g, cfg, h)


def build_head(g: ad.Graph, z, p: dict):
    return g.add(g.matmul(z, p["head.weight"], transpose_b=True), p["head.bias"])


def _x_input(g, cfg):
    return g.input("x", (None,) + cfg.input_shape)


@functools.lru_cache(maxsize=None)
def forward_graph(cfg: ModelConfig) -> ad.Graph:
    """Outputs ``z`` (B, k) and ``logits`` (B, K)."""
    g = ad.Graph()
    p = param_inputs(g, cfg)
    z = build_features(g, cfg, _x_input(g, cfg), p)
    g.output("z", z)
    g.output("logits", build_head(g, z, p))
    return g


@functools.lru_cache(maxsize=None)
def ce_graph(cfg: ModelConfig) -> ad.Graph:
    """Cross-entropy against a weighted one-hot ``yw``.

    ``per_sample`` is -sum_k yw * log_softmax(logits) per row, ``loss`` its sum.
    """
    g = ad.Graph()
    p = param_inputs(g, cfg)
    logits = build_head(g, build_features(g, cfg, _x_input(g, cfg), p), p)
    yw = g.input("yw", (None, cfg.num_classes))
    per = g.scale(g.sum(g.mul(g.log_softmax(logits), yw), axis=1), -1.0)
    g.output("per_sample", per)
    g.output("loss", g.sum(per))
    return g


@functools.lru_cache(maxsize=None)
def kl_graph(cfg: ModelConfig) -> ad.Graph:
    """KL(p(.|xa) || p_clean) per row, with the clean log-probs ``lc`` held fixed."""
    g = ad.Graph()
    p = param_inputs(g, cfg)
    xa = g.input("xa", (None,) + cfg.input_shape)
    la = g.log_softmax(build_head(g, build_features(g, cfg, xa, p), p))
    lc = g.input("lc", (None, cfg.num_classes))
    per = g.sum(g.mul(g.exp(la), g.sub(la, lc)), axis=1)
    g.output("per_sample", per)
    g.output("kl", g.sum(per))
    return g


@functools.lru_cache(maxsize=None)
def trades_graph(cfg: ModelConfig) -> ad.Graph:
    """``loss`` = CE(x) + kl_weight * sum KL(p(.|xa) || p(.|x)), both branches live."""
    g = ad.Graph()
    p = param_inputs(g, cfg)
    x = _x_input(g, cfg)
    xa = g.input("xa", (None,) + cfg.input_shape)
    lc = g.log_softmax(build_head(g, build_features(g, cfg, x, p), p))
    la = g.log_softmax(build_head(g, build_features(g, cfg, xa, p), p))
    yw = g.input("yw", (None, cfg.num_classes))
    kw = g.input("kw", ())
    ce = g.scale(g.sum(g.mul(lc, yw)), -1.0)
    kl = g.sum(g.mul(g.exp(la), g.sub(la, lc)))
    g.output("loss", g.add(ce, g.mul(kl, kw)))
    return g


# --------------------------------------------------------------------------
# forward helpers


def as_batch(cfg: ModelConfig, x) -> np.ndarray:
    """Coerce (B, C, H, W), (B, n) or a single sample to (B, C, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == cfg.input_shape or x.shape == (cfg.input_dim,):
        x = x.reshape((1,) + cfg.input_shape)
    elif x.ndim == 2 and x.shape[1] == cfg.input_dim:
        x = x.reshape((x.shape[0],) + cfg.input_shape)
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise ad.ShapeError(f"input shape {x.shape} does not match {cfg.input_shape}")
    return x


def forward_features(model: Model, x) -> np.ndarray:
    x = as_batch(model.config, x)
    b = model.bindings()
    b["x"] = x
    return ad.evaluate(forward_graph(model.config), b, ["z"])["z"]


def forward_logits(model: Model, x) -> np.ndarray:
    x = as_batch(model.config, x)
    b = model.bindings()
    b["x"] = x
    return ad.evaluate(forward_graph(model.config), b, ["logits"])["logits"]


def predict(model: Model, x) -> np.ndarray:
    """Argmax class ids; ties go to the lowest index."""
    return np.argmax(forward_logits(model, x), axis=1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy."""
    ls = log_softmax(np.asarray(logits, dtype=np.float64))
    return -ls[np.arange(len(labels)), np.asarray(labels)]


def one_hot(labels, k: int) -> np.ndarray:
    return np.eye(k)[np.asarray(labels, dtype=np.int64)]


def param_l2_norm(model: Model) -> float:
    return float(np.sqrt(np.dot(model.params, model.params)))


# --------------------------------------------------------------------------
# checkpoints
#
# "RLNS" | u32 version | u32 header length | header (utf-8 key:value lines)
# | each layout block as little-endian float32, in layout order.


def _header(model: Model) -> bytes:
    cfg = model.config
    lines = [
        ("arch", cfg.arch),
        ("input", ",".join(map(str, cfg.input_shape))),
        ("widths", ",".join(map(str, cfg.widths))),
        ("k", str(cfg.k)),
        ("K", str(cfg.num_classes)),
        ("seed", str(cfg.seed)),
        ("norm", "1" if cfg.norm else "0"),
        ("activation", cfg.activation),
        ("eps", repr(float(model.eps_train))),
        ("params", str(param_count(cfg))),
    ]
    return "".join(f"{k}:{v}\n" for k, v in lines).encode("utf-8")


def checkpoint_bytes(model: Model) -> bytes:
    header = _header(model)
    body = np.asarray(model.params, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + body


def save_checkpoint(model: Model, path) -> None:
    """Write ``model``; parameters are stored as float32."""
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes) -> Model:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad magic", repr(data[:4]))
    if len(data) < 12:
        raise CheckpointError("truncated", "header prefix incomplete")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError("version mismatch", f"file has {version}, reader supports {VERSION}")
    if len(data) < 12 + hlen:
        raise CheckpointError("truncated", "header incomplete")
    try:
        fields = dict(line.split(":", 1) for line in
                      data[12:12 + hlen].decode("utf-8").splitlines() if line)
        cfg = ModelConfig(
            arch=fields["arch"],
            input_shape=tuple(int(v) for v in fields["input"].split(",")),
            widths=tuple(int(v) for v in fields["widths"].split(",")),
            num_classes=int(fields["K"]),
            norm=fields["norm"] == "1",
            activation=fields.get("activation", "relu"),
            seed=int(fields["seed"]),
        )
        eps = float(fields["eps"])
        declared = int(fields["params"])
        k = int(fields["k"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError("bad header", str(exc)) from exc
    n = param_count(cfg)
    if declared != n or k != cfg.k:
        raise CheckpointError("layout mismatch", f"header declares {declared} params, layout has {n}")
    body = data[12 + hlen:]
    if len(body) < 4 * n:
        raise CheckpointError("truncated", f"expected {4 * n} parameter bytes, found {len(body)}")
    if len(body) > 4 * n:
        raise CheckpointError("trailing data", f"{len(body) - 4 * n} extra bytes")
    params = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return Model(cfg, params, eps)


def load_checkpoint(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())
