"""Continuous scorer: feature lookup at real-valued times, an MLP over the
conditioning vector, analytic backward passes, Adam, and checkpoint I/O.

The conditioning vector of a segment ``(xs, xe)`` is::

    [interp(xs), interp(xe), soi_pool(xs, xe), xs / duration, xe / duration]

of length ``3 * D + 2``. The trunk maps it to a hidden representation; the
head adds a projection of the recurrent state and emits four numbers: two
confidence logits and the start/end offsets.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from .geometry import OffsetPair, Segment

CHECKPOINT_MAGIC = b"CTALCKPT"
CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    """A loss, parameter or prediction became NaN or infinite."""


class StaleCacheError(RuntimeError):
    """Raised when a backward pass is given a cache from older parameters."""


@dataclass
class FeatureSequence:
    """``D x T`` snippet features; column ``k`` sits at time ``k * step``."""

    values: np.ndarray
    step: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature values must be a D x T matrix")
        if self.values.shape[1] < 2:
            raise ValueError("feature sequences need at least two snippets")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if not self.step > 0:
            raise ValueError("step must be positive")
        self.step = float(self.step)
        self._rows = np.ascontiguousarray(self.values.T)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return self.length * self.step

    @property
    def rows(self) -> np.ndarray:
        """``T x D`` view used for gathers."""
        return self._rows


def interp_rows(f: FeatureSequence, t: np.ndarray):
    """Linear interpolation at times ``t`` (any shape) -> ``(values, slopes)``.

    Both outputs have shape ``t.shape + (D,)``. Slopes are d value / d t and
    vanish where ``t`` is clamped.
    """
    rows = f.rows
    n = rows.shape[0]
    t = np.asarray(t, dtype=np.float64)
    tmax = (n - 1) * f.step
    tc = np.clip(t, 0.0, tmax)
    u = tc / f.step
    k = np.minimum(np.floor(u).astype(np.int64), n - 2)
    w = (u - k)[..., None]
    v0, v1 = rows[k], rows[k + 1]
    value = (1.0 - w) * v0 + w * v1
    inside = ((t >= 0.0) & (t <= tmax))[..., None]
    slope = (v1 - v0) * (inside / f.step)
    return value, slope


def interpolate_feature(f: FeatureSequence, t: float) -> np.ndarray:
    return interp_rows(f, np.asarray(t))[0]


def _soi_fractions(bins: int) -> np.ndarray:
    return (np.arange(bins) + 0.5) / bins


def soi_pool(f: FeatureSequence, x: Segment, bins: int = 16) -> np.ndarray:
    """Mean of the interpolated features at ``bins`` evenly spaced interior points."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    t = x.start + _soi_fractions(bins) * (x.end - x.start)
    return interp_rows(f, t)[0].mean(axis=0)


def _soi_weights(f: FeatureSequence, x: np.ndarray, bins: int, need_grad: bool):
    """Row-weight matrices expressing SoI pooling as ``W @ f.rows``.

    Returns ``(W, Gs, Ge)``; ``Gs @ rows`` and ``Ge @ rows`` are the
    derivatives of the pooled vector w.r.t. the start and end coordinates
    (``None`` unless ``need_grad``).
    """
    n, t_count = len(x), f.length
    fr = _soi_fractions(bins)
    t = x[:, 0:1] + fr[None, :] * (x[:, 1:2] - x[:, 0:1])
    tmax = (t_count - 1) * f.step
    u = np.clip(t, 0.0, tmax) / f.step
    k = np.minimum(np.floor(u).astype(np.int64), t_count - 2)
    w = u - k
    base = (np.arange(n)[:, None] * t_count + k).ravel()
    size = n * t_count

    def scatter(lo, hi):
        out = np.bincount(base, weights=lo.ravel(), minlength=size)
        out += np.bincount(base + 1, weights=hi.ravel(), minlength=size)
        return out.reshape(n, t_count)

    weights = scatter((1.0 - w) / bins, w / bins)
    if not need_grad:
        return weights, None, None
    c = ((t >= 0.0) & (t <= tmax)) / (bins * f.step)
    cs = c * (1.0 - fr)[None, :]
    ce = c * fr[None, :]
    return weights, scatter(-cs, cs), scatter(-ce, ce)


@dataclass
class ConditionCache:
    slope_s: np.ndarray
    slope_e: np.ndarray
    soi_ds: Optional[np.ndarray]
    soi_de: Optional[np.ndarray]
    duration: float


def condition(f: FeatureSequence, x: np.ndarray, bins: int, need_grad: bool = True):
    """Conditioning vectors for ``(N, 2)`` segments -> ``((N, 3D + 2), cache)``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    vs, ss = interp_rows(f, x[:, 0])
    ve, se = interp_rows(f, x[:, 1])
    wq, gs, ge = _soi_weights(f, x, bins, need_grad)
    rows = f.rows
    dur = f.duration
    c = np.concatenate([vs, ve, wq @ rows, x / dur], axis=1)
    if not need_grad:
        return c, ConditionCache(ss, se, None, None, dur)
    return c, ConditionCache(ss, se, gs @ rows, ge @ rows, dur)


def condition_backward(cache: ConditionCache, dc: np.ndarray) -> np.ndarray:
    if cache.soi_ds is None:
        raise ValueError("conditioning was computed without gradient support")
    d = cache.slope_s.shape[1]
    g_s, g_e, g_q = dc[:, :d], dc[:, d:2 * d], dc[:, 2 * d:3 * d]
    dx = np.empty((len(dc), 2))
    dx[:, 0] = (np.einsum("nd,nd->n", g_s, cache.slope_s)
                + np.einsum("nd,nd->n", g_q, cache.soi_ds) + dc[:, 3 * d] / cache.duration)
    dx[:, 1] = (np.einsum("nd,nd->n", g_e, cache.slope_e)
                + np.einsum("nd,nd->n", g_q, cache.soi_de) + dc[:, 3 * d + 1] / cache.duration)
    return dx


@dataclass
class ModelConfig:
    feature_dim: int
    hidden: tuple = (64, 64)
    state_dim: int = 32
    bins: int = 16
    frames_per_snippet: int = 16

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.feature_dim < 1 or not self.hidden or self.state_dim < 1 or self.bins < 1:
            raise ValueError(f"invalid model config {self}")

    @property
    def input_dim(self) -> int:
        return 3 * self.feature_dim + 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class ScorerParams(Mapping):
    """Named parameter arrays of the scorer, the update cell and the boundary head.

    ``version`` increases whenever an optimiser produces a new set; caches
    remember the version they were built from.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], config: ModelConfig,
                 version: int = 0):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.config = config
        self.version = version

    def __getitem__(self, key):
        return self.arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    @property
    def num_layers(self) -> int:
        return len(self.config.hidden)

    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ScorerParams":
        return ScorerParams({k: v.copy() for k, v in self.arrays.items()},
                            self.config, self.version)

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vec: np.ndarray) -> "ScorerParams":
        out, i = {}, 0
        for k, v in self.arrays.items():
            out[k] = np.asarray(vec[i:i + v.size], dtype=np.float64).reshape(v.shape)
            i += v.size
        return ScorerParams(out, self.config, self.version + 1)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    fan = cfg.input_dim
    for i, h in enumerate(cfg.hidden):
        shapes[f"trunk.W{i}"] = (fan, h)
        shapes[f"trunk.b{i}"] = (h,)
        fan = h
    hs = cfg.state_dim
    shapes.update({
        "head.W": (fan, 4), "head.U": (hs, 4), "head.b": (4,),
        "cell.Wz": (fan, hs), "cell.Uz": (hs, hs), "cell.bz": (hs,),
        "cell.Wh": (fan, hs), "cell.Uh": (hs, hs), "cell.bh": (hs,),
        "bnd.W": (cfg.feature_dim, 2), "bnd.b": (2,),
    })
    return shapes


def _fan_in(name: str, shape: tuple, cfg: ModelConfig) -> int:
    if len(shape) == 2:
        return shape[0]
    # biases share the fan-in of their layer's input weight
    prefix = name.split(".")[0]
    if prefix == "trunk":
        i = int(name.rsplit("b", 1)[1])
        return cfg.input_dim if i == 0 else cfg.hidden[i - 1]
    if prefix == "bnd":
        return cfg.feature_dim
    return cfg.hidden[-1]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ScorerParams:
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        bound = 1.0 / np.sqrt(_fan_in(name, shape, cfg))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ScorerParams(arrays, cfg)


# ---------------------------------------------------------------- trunk + head

def trunk_forward(params: ScorerParams, c: np.ndarray):
    acts = [c]
    a = c
    for i in range(params.num_layers):
        a = np.tanh(a @ params[f"trunk.W{i}"] + params[f"trunk.b{i}"])
        acts.append(a)
    return a, acts


def trunk_backward(params: ScorerParams, acts: list, da: np.ndarray, grads: dict):
    for i in reversed(range(params.num_layers)):
        dz = da * (1.0 - acts[i + 1] ** 2)
        grads[f"trunk.W{i}"] += acts[i].T @ dz
        grads[f"trunk.b{i}"] += dz.sum(axis=0)
        da = dz @ params[f"trunk.W{i}"].T
    return da


def head_forward(params: ScorerParams, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    return a @ params["head.W"] + h @ params["head.U"] + params["head.b"]


def head_backward(params: ScorerParams, a, h, do, grads: dict):
    grads["head.W"] += a.T @ do
    grads["head.U"] += h.T @ do
    grads["head.b"] += do.sum(axis=0)
    return do @ params["head.W"].T, do @ params["head.U"].T


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class ScorerOutput:
    p1: float
    p2: float
    offset: OffsetPair


@dataclass
class ScorerBatch:
    p1: np.ndarray
    p2: np.ndarray
    offset: np.ndarray  # (N, 2)

    def __len__(self):
        return len(self.p1)

    def __getitem__(self, i) -> ScorerOutput:
        return ScorerOutput(float(self.p1[i]), float(self.p2[i]),
                            OffsetPair(*map(float, self.offset[i])))


@dataclass
class ForwardCache:
    version: int
    cond: ConditionCache
    acts: list
    hidden: np.ndarray
    out: ScorerBatch = field(repr=False, default=None)


def forward_batch(params: ScorerParams, f: FeatureSequence, x: np.ndarray,
                  hidden: Optional[np.ndarray] = None, need_grad: bool = True):
    """Score ``(N, 2)`` segments given recurrent state ``hidden`` (zeros if None)."""
    if f.dim != params.config.feature_dim:
        raise ValueError(f"feature dim {f.dim} does not match parameters "
                         f"({params.config.feature_dim})")
    c, ccache = condition(f, x, params.config.bins, need_grad)
    a, acts = trunk_forward(params, c)
    if hidden is None:
        hidden = np.zeros((len(c), params.config.state_dim))
    o = head_forward(params, a, hidden)
    out = ScorerBatch(sigmoid(o[:, 0]), sigmoid(o[:, 1]), o[:, 2:4].copy())
    return out, ForwardCache(params.version, ccache, acts, hidden, out)


def output_logit_grad(out: ScorerBatch, g_p1, g_p2, g_off) -> np.ndarray:
    do = np.empty((len(out), 4))
    do[:, 0] = g_p1 * out.p1 * (1.0 - out.p1)
    do[:, 1] = g_p2 * out.p2 * (1.0 - out.p2)
    do[:, 2:4] = g_off
    return do


def backward_batch(params: ScorerParams, cache: ForwardCache, g_p1, g_p2, g_off,
                   grads: Optional[dict] = None, extra_da: Optional[np.ndarray] = None):
    """Accumulate parameter gradients; return ``(grads, d_coords, d_hidden)``."""
    if cache.version != params.version:
        raise StaleCacheError("cache was produced by a different parameter version")
    if grads is None:
        grads = params.zeros_like()
    do = output_logit_grad(cache.out, g_p1, g_p2, g_off)
    da, dh = head_backward(params, cache.acts[-1], cache.hidden, do, grads)
    if extra_da is not None:
        da = da + extra_da
    dc = trunk_backward(params, cache.acts, da, grads)
    return grads, condition_backward(cache.cond, dc), dh


def forward(params: ScorerParams, f: FeatureSequence, sample: Segment):
    """Score a single segment with a zero recurrent state."""
    out, cache = forward_batch(params, f, np.array([[sample.start, sample.end]]))
    return out[0], cache


def backward(params: ScorerParams, cache: ForwardCache, upstream: ScorerOutput) -> dict:
    """Parameter gradients for one scored segment given d loss / d outputs."""
    g = upstream
    grads, _, _ = backward_batch(params, cache, np.array([g.p1]), np.array([g.p2]),
                                 np.array([[g.offset.delta_start, g.offset.delta_end]]))
    return grads


def boundary_forward(params: ScorerParams, f: FeatureSequence) -> np.ndarray:
    """Per-snippet start/end probabilities, ``(T, 2)``."""
    return sigmoid(f.rows @ params["bnd.W"] + params["bnd.b"])


def boundary_backward(params, f: FeatureSequence, prob: np.ndarray, g_prob, grads):
    dz = g_prob * prob * (1.0 - prob)
    grads["bnd.W"] += f.rows.T @ dz
    grads["bnd.b"] += dz.sum(axis=0)


# ----------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ScorerParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ScorerParams, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if state.m[k].shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {k}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return (ScorerParams(new_p, params.config, params.version + 1),
            AdamState(new_m, new_v, t))


# ----------------------------------------------------------------- checkpoint

def _write_array(buf, name: str, a: np.ndarray):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("checkpoint is truncated")
    return data


def _read_array(buf):
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, n).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").reshape(shape)
    return name, a.astype(np.float64)


def checkpoint_bytes(params: ScorerParams, opt: Optional[AdamState] = None,
                     meta: Optional[dict] = None) -> bytes:
    meta = dict(meta or {})
    meta["model"] = params.config.to_dict()
    meta["version"] = params.version
    arrays = list(params.items())
    if opt is not None:
        meta["adam_step"] = opt.step
        arrays += [(f"adam.m.{k}", opt.m[k]) for k in params]
        arrays += [(f"adam.v.{k}", opt.v[k]) for k in params]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays:
        _write_array(buf, name, a)
    return buf.getvalue()


def parse_checkpoint(data: bytes):
    """Inverse of :func:`checkpoint_bytes` -> ``(params, adam_state or None, meta)``."""
    buf = io.BytesIO(data)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, n = struct.unpack("<II", _read_exact(buf, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(_read_exact(buf, n).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    arrays = dict(_read_array(buf) for _ in range(count))
    if buf.read(1):
        raise ValueError("trailing bytes after checkpoint payload")
    cfg = ModelConfig(**meta["model"])
    names = list(param_shapes(cfg))
    missing = [k for k in names if k not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks parameters {missing}")
    params = ScorerParams({k: arrays[k] for k in names}, cfg, meta.get("version", 0))
    opt = None
    if "adam_step" in meta:
        opt = AdamState({k: arrays[f"adam.m.{k}"] for k in names},
                        {k: arrays[f"adam.v.{k}"] for k in names}, meta["adam_step"])
    return params, opt, meta


def save_checkpoint(path, params, opt=None, meta=None):
    from .data import atomic_write_bytes
    atomic_write_bytes(Path(path), checkpoint_bytes(params, opt, meta))


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
