"""Dense numeric core: small MLPs with hand-written reverse-mode gradients.

Everything the trainers need from a tensor library, implemented directly on
numpy arrays: fixed-topology feed-forward networks, exact backprop, Adam with
bias correction, Polyak (soft) target updates, Gumbel-Softmax draws on the
probability simplex, Gaussian exploration noise, and a versioned checkpoint
container ("mplab-ckpt-v1").

Functions here are pure with respect to arguments they do not own.
``adam_step`` and ``soft_update`` mutate the network / optimizer state they
are handed and must not be called concurrently on the same object.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

Array = np.ndarray

HIDDEN_ACTIVATIONS = ("relu", "tanh")
HEAD_KINDS = ("linear", "tanh", "per_slice")
SLICE_KINDS = ("linear", "tanh", "softmax")

CKPT_FORMAT = "mplab-ckpt-v1"


class ShapeError(ValueError):
    """Raised when an input or gradient does not match the network layout."""


class NonFiniteGradientError(ValueError):
    """Raised when an optimizer step is handed NaN/Inf gradients."""


@dataclass(frozen=True)
class Head:
    """Output mapping of a network.

    ``linear`` passes the last affine layer through, ``tanh`` squashes every
    output into (-1, 1), and ``per_slice`` applies a separate squashing per
    contiguous slice (e.g. tanh on a force command, softmax on a message).
    """

    kind: str = "linear"
    slices: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind == "per_slice":
            if not self.slices:
                raise ValueError("per_slice head requires at least one slice")
            for s_kind, width in self.slices:
                if s_kind not in SLICE_KINDS:
                    raise ValueError(f"unknown slice kind {s_kind!r}")
                if width <= 0:
                    raise ValueError("slice widths must be positive")
        elif self.slices:
            raise ValueError(f"head kind {self.kind!r} takes no slices")

    @property
    def width(self) -> Optional[int]:
        if self.kind == "per_slice":
            return sum(w for _, w in self.slices)
        return None


@dataclass
class Mlp:
    """Feed-forward network with a fixed layer topology.

    ``weights[l]`` has shape ``(dims[l], dims[l+1])`` so a forward pass is
    ``x @ W + b``; arrays are C-contiguous (row-major) float64 by default.
    """

    dims: tuple[int, ...]
    weights: list[Array]
    biases: list[Array]
    hidden: str = "relu"
    head: Head = field(default_factory=Head)

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def validate(self) -> None:
        if len(self.dims) < 2:
            raise ShapeError("network needs at least one layer")
        if any(d <= 0 for d in self.dims):
            raise ShapeError(f"layer dims must be positive, got {self.dims}")
        if self.hidden not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden!r}")
        n_layers = len(self.dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("weight/bias count does not match dims")
        for l in range(n_layers):
            want = (self.dims[l], self.dims[l + 1])
            if self.weights[l].shape != want:
                raise ShapeError(
                    f"layer {l} weight shape {self.weights[l].shape} != {want}"
                )
            if self.biases[l].shape != (self.dims[l + 1],):
                raise ShapeError(
                    f"layer {l} bias shape {self.biases[l].shape} != "
                    f"({self.dims[l + 1]},)"
                )
        if self.head.kind == "per_slice" and self.head.width != self.out_dim:
            raise ShapeError(
                f"head slices sum to {self.head.width}, output dim is {self.out_dim}"
            )

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.weights + self.biases)

    def copy(self) -> "Mlp":
        return Mlp(
            dims=self.dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            hidden=self.hidden,
            head=self.head,
        )

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def init_mlp(
    dims: Sequence[int],
    rng: np.random.Generator,
    hidden: str = "relu",
    head: Optional[Head] = None,
    dtype=np.float64,
) -> Mlp:
    """Build a network with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights
    and zero biases."""
    dims = tuple(int(d) for d in dims)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype))
        biases.append(np.zeros(d_out, dtype=dtype))
    net = Mlp(dims=dims, weights=weights, biases=biases, hidden=hidden,
              head=head or Head())
    net.validate()
    return net


def _as_batch(x: Array, want: int, what: str) -> tuple[Array, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        if x.shape[0] != want:
            raise ShapeError(f"{what} of length {x.shape[0]} does not match {want}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != want:
            raise ShapeError(f"{what} width {x.shape[1]} does not match {want}")
        return x, False
    raise ShapeError(f"{what} must be 1-D or 2-D, got shape {x.shape}")


def softmax(z: Array, axis: int = -1) -> Array:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _hidden_act(z: Array, kind: str) -> Array:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _hidden_act_deriv(z: Array, kind: str) -> Array:
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    t = np.tanh(z)
    return 1.0 - t * t


def apply_head(head: Head, raw: Array) -> Array:
    if head.kind == "linear":
        return raw
    if head.kind == "tanh":
        return np.tanh(raw)
    out = np.empty_like(raw)
    off = 0
    for s_kind, width in head.slices:
        seg = raw[..., off:off + width]
        if s_kind == "linear":
            out[..., off:off + width] = seg
        elif s_kind == "tanh":
            out[..., off:off + width] = np.tanh(seg)
        else:
            out[..., off:off + width] = softmax(seg, axis=-1)
        off += width
    return out


def _head_backward(head: Head, y: Array, upstream: Array) -> Array:
    """Pull an upstream cotangent on the headed output back to the raw layer."""
    if head.kind == "linear":
        return upstream
    if head.kind == "tanh":
        return upstream * (1.0 - y * y)
    g = np.empty_like(upstream)
    off = 0
    for s_kind, width in head.slices:
        u = upstream[..., off:off + width]
        ys = y[..., off:off + width]
        if s_kind == "linear":
            g[..., off:off + width] = u
        elif s_kind == "tanh":
            g[..., off:off + width] = u * (1.0 - ys * ys)
        else:
            dot = np.sum(u * ys, axis=-1, keepdims=True)
            g[..., off:off + width] = ys * (u - dot)
        off += width
    return g


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass, consumed by ``backward``."""

    x: Array                 # (B, in_dim)
    pre: list[Array]         # pre-activations per layer, last entry is raw output
    hid: list[Array]         # activated hidden layers
    y: Array                 # headed output (B, out_dim)
    single: bool             # input was 1-D


def forward_raw(net: Mlp, x: Array) -> Array:
    """Final affine output before the head is applied."""
    h, single = _as_batch(x, net.in_dim, "input")
    n_layers = len(net.weights)
    for l in range(n_layers):
        z = h @ net.weights[l] + net.biases[l]
        h = _hidden_act(z, net.hidden) if l < n_layers - 1 else z
    return h[0] if single else h


def forward(net: Mlp, x: Array) -> Array:
    """Deterministic headed output; accepts a vector or a batch of rows."""
    raw = forward_raw(net, x)
    return apply_head(net.head, raw)


def forward_cached(net: Mlp, x: Array) -> tuple[Array, ForwardCache]:
    xb, single = _as_batch(x, net.in_dim, "input")
    pre: list[Array] = []
    hid: list[Array] = []
    h = xb
    n_layers = len(net.weights)
    for l in range(n_layers):
        z = h @ net.weights[l] + net.biases[l]
        pre.append(z)
        if l < n_layers - 1:
            h = _hidden_act(z, net.hidden)
            hid.append(h)
    y = apply_head(net.head, pre[-1])
    cache = ForwardCache(x=xb, pre=pre, hid=hid, y=y, single=single)
    return (y[0] if single else y), cache


@dataclass
class Grads:
    """Parameter cotangents, shaped exactly like the network parameters."""

    dW: list[Array]
    db: list[Array]

    def scale(self, c: float) -> "Grads":
        for a in self.dW:
            a *= c
        for a in self.db:
            a *= c
        return self

    def max_abs(self) -> float:
        return max(
            [float(np.max(np.abs(a))) if a.size else 0.0 for a in self.dW + self.db]
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.dW + self.db)


def backward(net: Mlp, cache: ForwardCache, upstream: Array,
             need_params: bool = True,
             from_raw: bool = False) -> tuple[Optional[Grads], Array]:
    """Exact reverse-mode gradients of <upstream, output>.

    Returns parameter gradients plus the gradient with respect to the input
    (needed when a critic's action-input gradient must flow into an actor).
    Batched inputs sum the parameter gradients over rows; the input gradient
    keeps one row per sample. ``need_params=False`` skips the parameter
    gradients (returned as None) when only the input gradient matters.
    ``from_raw=True`` treats ``upstream`` as a cotangent on the pre-head
    affine output, for callers that applied their own output mapping.
    """
    up, _ = _as_batch(upstream, net.out_dim, "upstream")
    if up.shape[0] != cache.x.shape[0]:
        raise ShapeError(
            f"upstream batch {up.shape[0]} does not match input batch "
            f"{cache.x.shape[0]}"
        )
    g = up if from_raw else _head_backward(net.head, cache.y, up)
    n_layers = len(net.weights)
    dW: list[Array] = [None] * n_layers  # type: ignore[list-item]
    db: list[Array] = [None] * n_layers  # type: ignore[list-item]
    for l in range(n_layers - 1, -1, -1):
        if need_params:
            a_prev = cache.hid[l - 1] if l > 0 else cache.x
            dW[l] = a_prev.T @ g
            db[l] = g.sum(axis=0)
        g = g @ net.weights[l].T
        if l > 0:
            if net.hidden == "relu":
                g = g * (cache.pre[l - 1] > 0.0)
            else:
                g = g * _hidden_act_deriv(cache.pre[l - 1], net.hidden)
    dx = g[0] if cache.single else g
    return (Grads(dW=dW, db=db) if need_params else None), dx


def mlp_gradient(net: Mlp, x: Array, upstream: Array) -> tuple[Grads, Array]:
    """Gradients of <upstream, forward(net, x)> w.r.t. parameters and input."""
    _, cache = forward_cached(net, x)
    return backward(net, cache, upstream)


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one network."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    mW: list[Array] = field(default_factory=list)
    vW: list[Array] = field(default_factory=list)
    mB: list[Array] = field(default_factory=list)
    vB: list[Array] = field(default_factory=list)

    def copy(self) -> "AdamState":
        return AdamState(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            step_count=self.step_count,
            mW=[a.copy() for a in self.mW], vW=[a.copy() for a in self.vW],
            mB=[a.copy() for a in self.mB], vB=[a.copy() for a in self.vB],
        )


def adam_init(net: Mlp, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ValueError("lr must be positive")
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        mW=[np.zeros_like(w) for w in net.weights],
        vW=[np.zeros_like(w) for w in net.weights],
        mB=[np.zeros_like(b) for b in net.biases],
        vB=[np.zeros_like(b) for b in net.biases],
    )


def adam_step(net: Mlp, grads: Grads, state: AdamState) -> None:
    """One bias-corrected Adam step, in place.

    Rejects the whole step if any gradient entry is non-finite, naming the
    offending layer, so a poisoned update can never reach the parameters.
    """
    for l, (gw, gb) in enumerate(zip(grads.dW, grads.db)):
        if not np.isfinite(gw).all():
            raise NonFiniteGradientError(f"non-finite gradient in layer {l} weights")
        if not np.isfinite(gb).all():
            raise NonFiniteGradientError(f"non-finite gradient in layer {l} biases")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for l in range(len(net.weights)):
        for p, g, m, v in (
            (net.weights[l], grads.dW[l], state.mW[l], state.vW[l]),
            (net.biases[l], grads.db[l], state.mB[l], state.vB[l]),
        ):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step_count = t


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """Polyak blend, in place: target <- tau * online + (1 - tau) * target."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.dims != online.dims:
        raise ShapeError(f"target dims {target.dims} != online dims {online.dims}")
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - tau
        tw += tau * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - tau
        tb += tau * ob


def gumbel_softmax(logits: Array, temperature: float, rng: np.random.Generator,
                   hard: bool = False) -> Array:
    """Sample from the Gumbel-Softmax relaxation of a categorical.

    y_k = softmax((logits_k + g_k) / T) with g_k = -log(-log u_k). The sample
    lives on the probability simplex and is differentiable in the logits via
    ``gumbel_softmax_grad``. ``hard`` snaps to the arg-max one-hot (useful for
    discrete rollouts; gradients then follow the straight-through convention
    of differentiating the soft sample).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    u = rng.random(logits.shape)
    np.clip(u, 1e-12, 1.0 - 1e-12, out=u)
    g = -np.log(-np.log(u))
    y = softmax((logits + g) / temperature, axis=-1)
    if hard:
        idx = np.argmax(y, axis=-1)
        y_hard = np.zeros_like(y)
        np.put_along_axis(y_hard, np.expand_dims(idx, -1), 1.0, axis=-1)
        return y_hard
    return y


def gumbel_softmax_grad(sample: Array, upstream: Array, temperature: float) -> Array:
    """d<upstream, sample>/dlogits for a soft Gumbel-Softmax sample."""
    dot = np.sum(upstream * sample, axis=-1, keepdims=True)
    return sample * (upstream - dot) / temperature


def gaussian_noise(dim: int, sigma: float, rng: np.random.Generator) -> Array:
    """i.i.d. zero-mean Gaussian vector with standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return sigma * rng.standard_normal(dim)


# ---------------------------------------------------------------------------
# Checkpoint container ("mplab-ckpt-v1")
# ---------------------------------------------------------------------------

def _net_meta(net: Mlp) -> dict:
    return {
        "dims": list(net.dims),
        "hidden": net.hidden,
        "head": {"kind": net.head.kind,
                 "slices": [list(s) for s in net.head.slices]},
    }


def _opt_meta(opt: AdamState) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "step_count": opt.step_count}


def save_checkpoint(
    path: str,
    nets: Mapping[str, Mlp],
    optimizers: Optional[Mapping[str, AdamState]] = None,
    extra: Optional[dict] = None,
) -> str:
    """Write nets (+ optional optimizer state and a JSON-able extra payload)
    to a single versioned npz container. Writes atomically via a temp file so
    an interrupted save never clobbers the previous checkpoint."""
    optimizers = optimizers or {}
    meta = {
        "format": CKPT_FORMAT,
        "nets": {name: _net_meta(net) for name, net in nets.items()},
        "optimizers": {name: _opt_meta(opt) for name, opt in optimizers.items()},
        "extra": extra or {},
    }
    arrays: dict[str, Array] = {}
    for name, net in nets.items():
        for l, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}/w{l}"] = np.ascontiguousarray(w)
            arrays[f"{name}/b{l}"] = np.ascontiguousarray(b)
    for name, opt in optimizers.items():
        for l in range(len(opt.mW)):
            arrays[f"{name}/opt.mw{l}"] = opt.mW[l]
            arrays[f"{name}/opt.vw{l}"] = opt.vW[l]
            arrays[f"{name}/opt.mb{l}"] = opt.mB[l]
            arrays[f"{name}/opt.vb{l}"] = opt.vB[l]
    if not path.endswith(".npz"):
        path = path + ".npz"
    tmp = path + ".tmp.npz"
    np.savez(tmp, meta=np.asarray(json.dumps(meta)), **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str) -> tuple[dict[str, Mlp], dict[str, AdamState], dict]:
    """Read an mplab-ckpt-v1 container back into nets, optimizers, and the
    extra payload. Rejects files whose format header does not match."""
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CKPT_FORMAT:
            raise ValueError(
                f"checkpoint format {meta.get('format')!r} is not {CKPT_FORMAT!r}"
            )
        nets: dict[str, Mlp] = {}
        for name, nm in meta["nets"].items():
            dims = tuple(nm["dims"])
            n_layers = len(dims) - 1
            head = Head(kind=nm["head"]["kind"],
                        slices=tuple(tuple(s) for s in nm["head"]["slices"]))
            net = Mlp(
                dims=dims,
                weights=[data[f"{name}/w{l}"] for l in range(n_layers)],
                biases=[data[f"{name}/b{l}"] for l in range(n_layers)],
                hidden=nm["hidden"],
                head=head,
            )
            net.validate()
            nets[name] = net
        opts: dict[str, AdamState] = {}
        for name, om in meta["optimizers"].items():
            n_layers = len(meta["nets"][name]["dims"]) - 1
            opts[name] = AdamState(
                lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"],
                step_count=om["step_count"],
                mW=[data[f"{name}/opt.mw{l}"] for l in range(n_layers)],
                vW=[data[f"{name}/opt.vw{l}"] for l in range(n_layers)],
                mB=[data[f"{name}/opt.mb{l}"] for l in range(n_layers)],
                vB=[data[f"{name}/opt.vb{l}"] for l in range(n_layers)],
            )
    return nets, opts, meta["extra"]
