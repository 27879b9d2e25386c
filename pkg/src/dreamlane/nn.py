"""Small numpy networks with hand-written reverse-mode gradients.

Every module caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
Calling the module directly (``net(x)``) evaluates without touching the cache,
which is how frozen teachers and inference paths run.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity", "sigmoid")


class NonFiniteError(FloatingPointError):
    pass


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def children(self) -> dict[str, "Module"]:
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_gradients(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children().items():
            yield from child.named_gradients(f"{prefix}{name}.")

    def parameter_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradient_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_gradients())

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.named_parameters())

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)
        for child in self.children().values():
            child.zero_grad()

    def astype(self, dtype) -> "Module":
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
            self.grads[k] = np.zeros_like(self.params[k])
        for child in self.children().values():
            child.astype(dtype)
        return self

    @property
    def dtype(self):
        for _, v in self.named_parameters():
            return v.dtype
        return np.float32

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        mine = self.parameter_dict()
        missing = set(mine) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, arr in mine.items():
            src = np.asarray(values[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def copy_from(self, other: "Module") -> None:
        self.load_parameters(other.parameter_dict())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _gen(rng) -> np.random.Generator:
    return getattr(rng, "gen", rng)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1 - a * a)
    if name == "sigmoid":
        return g * a * (1 - a)
    return g


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


class DenseNet(Module):
    """Stack of affine layers, each followed by its activation."""

    def __init__(self, sizes, activations, rng, dtype=np.float32):
        super().__init__()
        sizes = list(sizes)
        if isinstance(activations, str):
            activations = [activations] * (len(sizes) - 2) + ["identity"]
        activations = list(activations)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = sizes
        self.activations = activations
        g = _gen(rng)
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{i}"] = glorot(g, fi, fo, dtype)
            self.params[f"b{i}"] = np.zeros(fo, dtype=dtype)
        self.zero_grad()
        self._cache = None

    @property
    def in_width(self) -> int:
        return self.sizes[0]

    @property
    def out_width(self) -> int:
        return self.sizes[-1]

    def _run(self, x: np.ndarray, keep: bool):
        x = np.asarray(x)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.sizes[0]}")
        lead = x.shape[:-1]
        h = x.reshape(-1, self.sizes[0]).astype(self.dtype, copy=False)
        trace = []
        for i, act in enumerate(self.activations):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            a = _act(act, z)
            if keep:
                trace.append((h, z, a))
            h = a
        return h.reshape(lead + (self.sizes[-1],)), trace, lead

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self._run(x, keep=False)[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, trace, lead = self._run(x, keep=True)
        self._cache = (trace, lead)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward()")
        trace, lead = self._cache
        self._cache = None
        g = np.asarray(grad_out).reshape(-1, self.sizes[-1]).astype(self.dtype, copy=False)
        for i in reversed(range(len(self.activations))):
            h, z, a = trace[i]
            g = _act_grad(self.activations[i], z, a, g)
            self.grads[f"W{i}"] += h.T @ g
            self.grads[f"b{i}"] += g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return g.reshape(lead + (self.sizes[0],))


class CrossAttentionBlock(Module):
    """Single-head scaled dot-product cross-attention.

    out = [query +] (softmax(q Wq (kv Wk)^T / sqrt(width)) kv Wv) [Wo]

    ``residual`` adds the incoming queries back; ``out_proj`` toggles Wo.
    Keys may be masked with a boolean (B, Nk) array (True = visible).
    """

    def __init__(self, d_query, d_kv, width, rng, residual=True, out_proj=True, dtype=np.float32):
        super().__init__()
        if residual and (not out_proj and width != d_query):
            raise ValueError("residual without output projection needs width == d_query")
        g = _gen(rng)
        self.d_query, self.d_kv, self.width = d_query, d_kv, width
        self.residual, self.out_proj = residual, out_proj
        self.params["Wq"] = glorot(g, d_query, width, dtype)
        self.params["Wk"] = glorot(g, d_kv, width, dtype)
        self.params["Wv"] = glorot(g, d_kv, width, dtype)
        if out_proj:
            self.params["Wo"] = glorot(g, width, d_query, dtype)
        self.zero_grad()
        self._cache = None
        self.last_weights = None

    @property
    def out_width(self) -> int:
        return self.d_query if (self.out_proj or self.residual) else self.width

    def _run(self, query, kv, mask, keep):
        dt = self.dtype
        query = np.asarray(query, dtype=dt)
        kv = np.asarray(kv, dtype=dt)
        if query.shape[-1] != self.d_query or kv.shape[-1] != self.d_kv:
            raise ValueError("query/key width mismatch")
        q = query @ self.params["Wq"]
        k = kv @ self.params["Wk"]
        v = kv @ self.params["Wv"]
        scale = dt.type(1.0 / np.sqrt(self.width))
        scores = (q @ np.swapaxes(k, -1, -2)) * scale
        if mask is not None:
            scores = np.where(mask[..., None, :], scores, dt.type(-1e9))
        w = softmax(scores, axis=-1)
        ctx = w @ v
        out = ctx @ self.params["Wo"] if self.out_proj else ctx
        if self.residual:
            out = out + query
        self.last_weights = w
        if keep:
            self._cache = (query, kv, q, k, v, w, ctx, scale)
        return out

    def __call__(self, query, kv, mask=None):
        return self._run(query, kv, mask, keep=False)

    def forward(self, query, kv, mask=None):
        return self._run(query, kv, mask, keep=True)

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward()")
        query, kv, q, k, v, w, ctx, scale = self._cache
        self._cache = None
        g = np.asarray(grad_out, dtype=self.dtype)
        g_query = g.copy() if self.residual else np.zeros_like(query)
        if self.out_proj:
            self.grads["Wo"] += _flat(ctx).T @ _flat(g)
            g_ctx = g @ self.params["Wo"].T
        else:
            g_ctx = g
        g_w = g_ctx @ np.swapaxes(v, -1, -2)
        g_v = np.swapaxes(w, -1, -2) @ g_ctx
        # softmax backward; masked keys have w == 0 so they receive no gradient
        g_scores = w * (g_w - np.sum(g_w * w, axis=-1, keepdims=True)) * scale
        g_q = g_scores @ k
        g_k = np.swapaxes(g_scores, -1, -2) @ q
        self.grads["Wq"] += _flat(query).T @ _flat(g_q)
        self.grads["Wk"] += _flat(kv).T @ _flat(g_k)
        self.grads["Wv"] += _flat(kv).T @ _flat(g_v)
        g_query = g_query + g_q @ self.params["Wq"].T
        g_kv = g_k @ self.params["Wk"].T + g_v @ self.params["Wv"].T
        return g_query, g_kv


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: DenseNet, x: np.ndarray, upstream: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of <upstream, net(x)> with respect to the parameters and the input."""
    net.zero_grad()
    net.forward(x)
    g_in = net.backward(upstream)
    return {k: v.copy() for k, v in net.grads.items()}, g_in


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, grad_clip: float | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for name, g in grads.items():
            if name not in params or params[name].shape != g.shape:
                raise ValueError(f"gradient {name} does not match any parameter shape")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {name}")
        scale = 1.0
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name] * scale
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= (self.lr * update).astype(p.dtype)
            if not np.all(np.isfinite(p)):
                raise NonFiniteError(f"parameter {name} became non-finite")

    def step_module(self, module: Module) -> None:
        self.step(module.parameter_dict(), module.gradient_dict())


# --- checkpoints ----------------------------------------------------------------------

MAGIC = b"DLNN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Header (magic, version, manifest length), JSON manifest, then a little-endian float32 blob."""
    manifest = {
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.values())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[12:12 + n])
    offset = 12 + n
    out = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        out[t["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(t["shape"]).astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blob")
    return out, manifest["meta"]


# --- finite-difference checking ---------------------------------------------------------


def gradient_check(
    loss_and_grad: Callable[[], float],
    module: Module,
    n_coords: int = 32,
    rng: np.random.Generator | None = None,
    h: float = 1e-4,
    floor: float = 1e-6,
) -> np.ndarray:
    """Relative errors between analytic and central-difference gradients.

    ``loss_and_grad`` must zero the module's gradients, run forward + backward and
    return the scalar loss. Coordinates are drawn uniformly over all parameters.
    Run this on a float64 copy of the module; float32 differences are too noisy.
    """
    rng = rng or np.random.default_rng(0)
    loss_and_grad()
    names = [n for n, _ in module.named_parameters()]
    params = module.parameter_dict()
    grads = {k: v.copy() for k, v in module.gradient_dict().items()}
    sizes = np.array([params[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=n_coords, replace=False)
    bounds = np.cumsum(sizes)
    errs = []
    for flat in picks:
        i = int(np.searchsorted(bounds, flat, side="right"))
        name = names[i]
        j = flat - (bounds[i] - sizes[i])
        p = params[name].reshape(-1)
        old = p[j]
        p[j] = old + h
        up = loss_and_grad()
        p[j] = old - h
        down = loss_and_grad()
        p[j] = old
        numeric = (up - down) / (2 * h)
        analytic = grads[name].reshape(-1)[j]
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    loss_and_grad()
    return np.array(errs)
