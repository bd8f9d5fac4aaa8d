"""Unsigned distance fields: a positional-encoded ReLU MLP with hand-written
reverse mode, and closed-form oracle fields used for testing.

All arrays are float64. Batched entry points take points of shape ``(N, 3)``;
a single ``(3,)`` point is accepted and returns scalars / 3-vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import NamedTuple

import numpy as np

Array = np.ndarray


class FieldGradient(NamedTuple):
    value: Array
    grad: Array


def _as_points(p) -> tuple[Array, bool]:
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3 or pts.ndim != 2:
        raise ValueError(f"expected points of shape (N, 3), got {np.shape(p)}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite query point")
    return pts, single


def _unbatch(out: FieldGradient, single: bool) -> FieldGradient:
    if single:
        return FieldGradient(float(out.value[0]), out.grad[0])
    return out


# --------------------------------------------------------------------------
# positional encoding
# --------------------------------------------------------------------------


def encoded_dim(frequencies: int) -> int:
    return 3 + 6 * frequencies


def encode(p, frequencies: int) -> Array:
    """Sinusoidal encoding ``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``.

    Each sin/cos block holds the three coordinates, so for one frequency the
    layout is ``x y z | sin x, sin y, sin z | cos x, cos y, cos z``.
    """
    if frequencies < 0:
        raise ValueError("frequencies must be >= 0")
    pts = np.asarray(p, dtype=np.float64)
    out = [pts]
    for k in range(frequencies):
        w = (2.0**k) * np.pi
        out.append(np.sin(w * pts))
        out.append(np.cos(w * pts))
    return np.concatenate(out, axis=-1)


def _encode_jacobian_t(pts: Array, d_enc: Array, frequencies: int) -> Array:
    # d_enc: (N, 3 + 6L) upstream -> (N, 3) gradient w.r.t. the raw points
    grad = d_enc[:, :3].copy()
    for k in range(frequencies):
        w = (2.0**k) * np.pi
        o = 3 + 6 * k
        grad += d_enc[:, o : o + 3] * (w * np.cos(w * pts))
        grad -= d_enc[:, o + 3 : o + 6] * (w * np.sin(w * pts))
    return grad


def _encode_tangent(pts: Array, v: Array, frequencies: int) -> Array:
    # forward-mode: directional derivative of encode(p) along v
    out = [v]
    for k in range(frequencies):
        w = (2.0**k) * np.pi
        out.append(w * np.cos(w * pts) * v)
        out.append(-w * np.sin(w * pts) * v)
    return np.concatenate(out, axis=-1)


# --------------------------------------------------------------------------
# neural field
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldArch:
    num_layers: int = 8
    hidden_width: int = 256
    encoding_frequencies: int = 6

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.hidden_width < 1:
            raise ValueError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.encoding_frequencies < 0:
            raise ValueError("encoding_frequencies must be >= 0")

    @property
    def input_dim(self) -> int:
        return encoded_dim(self.encoding_frequencies)

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * (self.num_layers - 1) + [1]

    @property
    def num_params(self) -> int:
        w = self.widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


class _Cache(NamedTuple):
    pts: Array
    enc: Array
    pre: list  # pre-activations z_1..z_L
    act: list  # inputs to each linear layer: enc, a_1..a_{L-1}
    value: Array


class NeuralField:
    """ReLU MLP ``f(p) = |MLP(encode(p))|``.

    Parameters live in one flat float64 vector; ``weights``/``biases`` are views
    into it, so in-place updates of :attr:`params` are seen by every layer.
    """

    kind = "neural"

    def __init__(self, arch: FieldArch, params: Array, seed: int = 0):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.num_params,):
            raise ValueError(
                f"parameter vector has shape {params.shape}, arch needs ({arch.num_params},)"
            )
        self.arch = arch
        self.seed = seed
        self.params = params.copy()
        self.weights: list[Array] = []
        self.biases: list[Array] = []
        self._slices = []
        o = 0
        w = arch.widths
        for a, b in zip(w[:-1], w[1:]):
            ws = slice(o, o + a * b)
            o += a * b
            bs = slice(o, o + b)
            o += b
            self._slices.append((ws, bs, a, b))
            self.weights.append(self.params[ws].reshape(a, b))
            self.biases.append(self.params[bs])

    def __repr__(self):
        return f"NeuralField({self.arch}, seed={self.seed})"

    def set_params(self, params: Array) -> None:
        self.params[...] = params

    def copy(self) -> "NeuralField":
        return NeuralField(self.arch, self.params, self.seed)

    # forward / backward ---------------------------------------------------

    def _forward(self, pts: Array) -> _Cache:
        enc = encode(pts, self.arch.encoding_frequencies)
        acts = [enc]
        pres = []
        h = enc
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pres.append(z)
            if i < last:
                h = np.maximum(z, 0.0)
                acts.append(h)
        value = np.abs(pres[-1][:, 0])
        return _Cache(pts, enc, pres, acts, value)

    def _backward(self, cache: _Cache, upstream: Array, params: bool, inputs: bool):
        """Reverse pass from per-point upstream scalars ``dL/df``.

        d|x|/dx is taken as +1 at 0 and the rectifier derivative as 0 at 0.
        """
        n = len(self.weights)
        sign = np.where(cache.pre[-1][:, 0] >= 0.0, 1.0, -1.0)
        delta = (upstream * sign)[:, None]
        gparams = np.empty_like(self.params) if params else None
        for i in range(n - 1, -1, -1):
            if params:
                ws, bs, a, b = self._slices[i]
                gparams[ws] = (cache.act[i].T @ delta).ravel()
                gparams[bs] = delta.sum(axis=0)
            if i == 0 and not inputs:
                break
            delta = delta @ self.weights[i].T
            if i > 0:
                delta *= cache.pre[i - 1] > 0.0
        ginput = None
        if inputs:
            ginput = _encode_jacobian_t(cache.pts, delta, self.arch.encoding_frequencies)
        return gparams, ginput

    def _directional_param_grad(self, cache: _Cache, v: Array) -> Array:
        """Gradient w.r.t. parameters of ``sum_i v_i . grad_p f(p_i)``.

        Rectifier masks and the output sign are piecewise constant in the
        parameters, so only the tangent path through the weights contributes.
        """
        n = len(self.weights)
        tangent = [_encode_tangent(cache.pts, v, self.arch.encoding_frequencies)]
        t = tangent[0]
        for i in range(n - 1):
            t = (t @ self.weights[i]) * (cache.pre[i] > 0.0)
            tangent.append(t)
        sign = np.where(cache.pre[-1][:, 0] >= 0.0, 1.0, -1.0)
        g = np.zeros_like(self.params)
        delta = sign[:, None]
        for i in range(n - 1, -1, -1):
            ws, bs, a, b = self._slices[i]
            g[ws] += (tangent[i].T @ delta).ravel()
            if i == 0:
                break
            delta = (delta @ self.weights[i].T) * (cache.pre[i - 1] > 0.0)
        return g

    # public API -----------------------------------------------------------

    def eval(self, p):
        pts, single = _as_points(p)
        v = self._forward(pts).value
        return float(v[0]) if single else v

    __call__ = eval

    def eval_with_input_grad(self, p) -> FieldGradient:
        pts, single = _as_points(p)
        cache = self._forward(pts)
        _, g = self._backward(cache, np.ones(len(pts)), params=False, inputs=True)
        return _unbatch(FieldGradient(cache.value, g), single)

    def backward(self, points, upstream) -> Array:
        """Parameter gradient of ``sum_i upstream_i * f(points_i)``."""
        pts, _ = _as_points(points)
        up = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
        if len(pts) == 0:
            raise ValueError("empty batch")
        if up.shape != (len(pts),):
            raise ValueError(f"upstream shape {up.shape} does not match {len(pts)} points")
        g, _ = self._backward(self._forward(pts), up, params=True, inputs=False)
        return g

    def min_abs_preactivation(self, p) -> Array:
        """Per point, the smallest |pre-activation| over all rectifiers and the output."""
        pts, _ = _as_points(p)
        cache = self._forward(pts)
        return np.min(np.concatenate([np.abs(z) for z in cache.pre], axis=1), axis=1)


def init_field(arch: FieldArch, seed: int = 0, sphere_radius: float | None = None) -> NeuralField:
    """Random initial field.

    By default weights are He-normal (std ``sqrt(2 / fan_in)``) and biases
    zero. With ``sphere_radius`` the network is set up so that its raw output
    is close to ``|p| - sphere_radius`` (geometric initialisation: encoding
    rows of the first layer zeroed, last layer weights centred on
    ``sqrt(pi / fan_in)``), i.e. the field starts as the UDF of a sphere.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    w = arch.widths
    n = len(w) - 1
    for i, (a, b) in enumerate(zip(w[:-1], w[1:])):
        if sphere_radius is None:
            W = rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b))
            bias = np.zeros(b)
        elif i < n - 1:
            W = rng.normal(0.0, math.sqrt(2.0 / b), size=(a, b))
            if i == 0:
                W[3:] = 0.0
            bias = np.zeros(b)
        else:
            W = rng.normal(math.sqrt(math.pi / a), 1e-4, size=(a, b))
            bias = np.full(b, -float(sphere_radius))
        chunks.append(W.ravel())
        chunks.append(bias)
    return NeuralField(arch, np.concatenate(chunks), seed)


# --------------------------------------------------------------------------
# analytic oracle fields
# --------------------------------------------------------------------------


def _sgn(x: Array) -> Array:
    return np.where(x >= 0.0, 1.0, -1.0)


def _safe_unit(v: Array) -> Array:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


ANALYTIC_KINDS = ("plane", "sphere", "disk", "two_planes", "spherical_cap")


@dataclass
class AnalyticField:
    """Exact unsigned distance to a simple shape.

    kinds and parameters:
        plane          |z - offset|                        offset=0
        sphere         | ||p - center|| - radius |         radius=1, center=(0,0,0)
        disk           open disk in z = height, |r| <= radius   radius=1, height=0
        two_planes     min(|z - gap|, |z + gap|)           gap=0.25
        spherical_cap  cap of a sphere around +z axis      radius, center, half_angle (rad)
    """

    kind: str
    params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ANALYTIC_KINDS:
            raise ValueError(f"unknown analytic field kind {self.kind!r}")
        defaults = {
            "plane": {"offset": 0.0},
            "sphere": {"radius": 1.0, "center": [0.0, 0.0, 0.0]},
            "disk": {"radius": 1.0, "height": 0.0},
            "two_planes": {"gap": 0.25},
            "spherical_cap": {"radius": 1.0, "center": [0.0, 0.0, 0.0], "half_angle": 0.7},
        }[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        self.params = {**defaults, **self.params}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v) for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticField":
        return cls(d["kind"], dict(d.get("params", {})))

    def _value_grad(self, p: Array) -> tuple[Array, Array]:
        k, prm = self.kind, self.params
        if k == "plane":
            z = p[:, 2] - prm["offset"]
            g = np.zeros_like(p)
            g[:, 2] = _sgn(z)
            return np.abs(z), g
        if k == "sphere":
            d = p - np.asarray(prm["center"], dtype=np.float64)
            r = np.linalg.norm(d, axis=1)
            s = r - prm["radius"]
            return np.abs(s), _sgn(s)[:, None] * _safe_unit(d)
        if k == "disk":
            R = prm["radius"]
            z = p[:, 2] - prm["height"]
            r = np.hypot(p[:, 0], p[:, 1])
            inside = r <= R
            dr = np.where(inside, 0.0, r - R)
            val = np.where(inside, np.abs(z), np.hypot(dr, z))
            g = np.zeros_like(p)
            radial = np.divide(p[:, :2], r[:, None], out=np.zeros((len(p), 2)), where=r[:, None] > 0)
            safe = np.where(val > 0, val, 1.0)
            g_out = np.concatenate([dr[:, None] * radial, z[:, None]], axis=1) / safe[:, None]
            g[inside, 2] = _sgn(z[inside])
            g[~inside] = g_out[~inside]
            return val, g
        if k == "two_planes":
            a = prm["gap"]
            za, zb = p[:, 2] - a, p[:, 2] + a
            use_a = np.abs(za) <= np.abs(zb)
            z = np.where(use_a, za, zb)
            g = np.zeros_like(p)
            g[:, 2] = _sgn(z)
            return np.abs(z), g
        # spherical cap around the +z axis
        R = prm["radius"]
        c = np.asarray(prm["center"], dtype=np.float64)
        th0 = prm["half_angle"]
        d = p - c
        r = np.linalg.norm(d, axis=1)
        cos_t = np.divide(d[:, 2], r, out=np.ones_like(r), where=r > 0)
        on_cap = cos_t >= math.cos(th0)
        s = r - R
        v_cap = np.abs(s)
        g_cap = _sgn(s)[:, None] * _safe_unit(d)
        # nearest rim point lies on the great circle through p's direction
        rho = np.hypot(d[:, 0], d[:, 1])
        az = np.divide(d[:, :2], rho[:, None], out=np.tile([1.0, 0.0], (len(p), 1)), where=rho[:, None] > 0)
        rim = np.concatenate([R * math.sin(th0) * az, np.full((len(p), 1), R * math.cos(th0))], axis=1)
        diff = d - rim
        v_rim = np.linalg.norm(diff, axis=1)
        g_rim = _safe_unit(diff)
        val = np.where(on_cap, v_cap, v_rim)
        g = np.where(on_cap[:, None], g_cap, g_rim)
        return val, g

    def eval(self, p):
        pts, single = _as_points(p)
        v, _ = self._value_grad(pts)
        return float(v[0]) if single else v

    __call__ = eval

    def eval_with_input_grad(self, p) -> FieldGradient:
        pts, single = _as_points(p)
        return _unbatch(FieldGradient(*self._value_grad(pts)), single)


@dataclass
class ShiftedField:
    """``base(p) + offset``; used to check error metrics against a known shift."""

    base: object
    offset: float

    def eval(self, p):
        return self.base.eval(p) + self.offset

    __call__ = eval

    def eval_with_input_grad(self, p) -> FieldGradient:
        v, g = self.base.eval_with_input_grad(p)
        return FieldGradient(v + self.offset, g)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class SceneTransform:
    """Similarity map raw -> normalized: ``x_n = scale * (x - center)``."""

    scale: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)

    def apply(self, x: Array) -> Array:
        return self.scale * (np.asarray(x, dtype=np.float64) - np.asarray(self.center))

    def invert(self, x: Array) -> Array:
        return np.asarray(x, dtype=np.float64) / self.scale + np.asarray(self.center)

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "center": [float(c) for c in self.center]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneTransform":
        return cls(float(d["scale"]), tuple(float(c) for c in d["center"]))


CHECKPOINT_MAGIC = "udfforge-field"


def save_checkpoint(path, field, transform: SceneTransform | None = None, extra_arrays: dict | None = None, meta: dict | None = None) -> None:
    """Write ``<json header>\\n`` followed by little-endian float64 arrays.

    The header lists the arrays in file order with their lengths. Analytic
    fields store their descriptor in the header and no arrays.
    """
    transform = transform or SceneTransform()
    header = {"format": CHECKPOINT_MAGIC, "version": 1, "transform": transform.to_dict(), "meta": meta or {}}
    arrays: dict[str, Array] = {}
    if isinstance(field, NeuralField):
        header["field"] = {"kind": "neural", "arch": asdict(field.arch), "seed": field.seed}
        arrays["params"] = field.params
    elif isinstance(field, AnalyticField):
        header["field"] = {"kind": "analytic", **field.to_dict()}
    else:
        raise TypeError(f"cannot checkpoint {type(field).__name__}")
    for k, v in (extra_arrays or {}).items():
        arrays[k] = np.asarray(v, dtype=np.float64).ravel()
    header["arrays"] = [[k, int(v.size)] for k, v in arrays.items()]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(field, transform, arrays, meta)``; ``arrays`` excludes the field parameters."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed checkpoint header: {e}") from None
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    body = data[nl + 1 :]
    expected = 8 * sum(n for _, n in header["arrays"])
    if len(body) != expected:
        raise ValueError(f"{path}: payload has {len(body)} bytes, header declares {expected}")
    arrays = {}
    o = 0
    for name, n in header["arrays"]:
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=o).astype(np.float64)
        o += 8 * n
    fd = header["field"]
    if fd["kind"] == "neural":
        arch = FieldArch(**fd["arch"])
        field = NeuralField(arch, arrays.pop("params"), fd.get("seed", 0))
    else:
        field = AnalyticField.from_dict(fd)
    return field, SceneTransform.from_dict(header["transform"]), arrays, header.get("meta", {})
