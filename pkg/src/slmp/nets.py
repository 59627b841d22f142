"""Small dense-network toolkit on flat float64 parameter vectors.

Everything is deliberately explicit: forward and backward passes are
hand-written, parameters live in one 1-D array with a fixed layer-major
layout (per layer: weight matrix row-major, then biases), and
``grad_check`` verifies the analytic gradients against central finite
differences.  All math is in 64-bit floats so determinism and gradient
tests stay sharp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ACTIVATIONS = ("silu", "relu")
OUTPUT_ACTIVATIONS = ("none", "tanh")

CKPT_MAGIC = "SLMP-CKPT/1"


@dataclass(frozen=True)
class MlpSpec:
    """Topology of a fully connected network.

    The parameter count is derivable from the spec alone:
    sum of (fan_in + 1) * fan_out over layers.
    """

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "silu"
    output_activation: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input to output."""
        widths = (self.input_dim, *self.hidden, self.output_dim)
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    def param_count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_dims)


def _silu(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return z * s


def _silu_grad(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return s * (1.0 + z * (1.0 - s))


def _act(name: str, z):
    if name == "silu":
        return _silu(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z  # "none"


def _act_grad(name: str, z):
    if name == "silu":
        return _silu_grad(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        y = np.tanh(z)
        return 1.0 - y * y
    return np.ones_like(z)


def layer_views(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer into the flat parameter vector."""
    if params.shape != (spec.param_count(),):
        raise ValueError(
            f"parameter vector has length {params.shape}, spec needs {spec.param_count()}"
        )
    out = []
    off = 0
    for fi, fo in spec.layer_dims:
        w = params[off : off + fi * fo].reshape(fo, fi)
        off += fi * fo
        b = params[off : off + fo]
        off += fo
        out.append((w, b))
    return out


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    params = np.zeros(spec.param_count(), dtype=np.float64)
    for w, _b in layer_views(spec, params):
        fo, fi = w.shape
        bound = math.sqrt(6.0 / (fi + fo))
        w[:] = rng.uniform(-bound, bound, size=(fo, fi))
    return params


def _layer_activation(spec: MlpSpec, layer: int) -> str:
    last = len(spec.layer_dims) - 1
    return spec.output_activation if layer == last else spec.activation


def forward_batch(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a (batch, input_dim) array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input shape (*, {spec.input_dim}), got {x.shape}")
    h = x
    for l, (w, b) in enumerate(layer_views(spec, params)):
        h = _act(_layer_activation(spec, l), h @ w.T + b)
    return h


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Single-vector forward pass; pure function of (params, x)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"expected input shape ({spec.input_dim},), got {x.shape}")
    return forward_batch(spec, params, x[None, :])[0]


def backward_batch(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * f(x)) over a batch.

    Returns (grad_params, grad_x) with grad_params summed over the batch
    and grad_x per sample.  Activations are recomputed internally.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input shape (*, {spec.input_dim}), got {x.shape}")
    if grad_out.shape != (x.shape[0], spec.output_dim):
        raise ValueError(
            f"expected grad_out shape ({x.shape[0]}, {spec.output_dim}), got {grad_out.shape}"
        )
    views = layer_views(spec, params)
    hs = [x]
    zs = []
    h = x
    for l, (w, b) in enumerate(views):
        z = h @ w.T + b
        zs.append(z)
        h = _act(_layer_activation(spec, l), z)
        hs.append(h)

    grad_params = np.zeros_like(params)
    gviews = layer_views(spec, grad_params)
    g = grad_out
    for l in range(len(views) - 1, -1, -1):
        gz = g * _act_grad(_layer_activation(spec, l), zs[l])
        gw, gb = gviews[l]
        gw += gz.T @ hs[l]
        gb += gz.sum(axis=0)
        g = gz @ views[l][0]
    return grad_params, g


def mlp_backward(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Single-vector analytic gradients of grad_out . f(x)."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    gp, gx = backward_batch(spec, params, x[None, :], grad_out[None, :])
    return gp, gx[0]


def grad_check(
    spec: MlpSpec,
    params: np.ndarray,
    x: np.ndarray,
    step: float = 1e-5,
    probe: np.ndarray | None = None,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative discrepancy between analytic and central-difference grads.

    The scalar under test is probe . f(x) (probe defaults to all ones).
    For large networks a seeded subset of parameter components can be
    checked via ``max_components``; input gradients are always checked in
    full.
    """
    x = np.asarray(x, dtype=np.float64)
    if probe is None:
        probe = np.ones(spec.output_dim)
    gp, gx = mlp_backward(spec, params, x, probe)

    def scalar_p(p):
        return float(probe @ mlp_forward(spec, p, x))

    def scalar_x(xv):
        return float(probe @ mlp_forward(spec, params, xv))

    idx = np.arange(params.size)
    if max_components is not None and max_components < params.size:
        r = rng if rng is not None else np.random.default_rng(0)
        idx = r.choice(params.size, size=max_components, replace=False)

    worst = 0.0
    for i in idx:
        p = params.copy()
        p[i] += step
        hi = scalar_p(p)
        p[i] -= 2.0 * step
        lo = scalar_p(p)
        fd = (hi - lo) / (2.0 * step)
        worst = max(worst, _rel_err(gp[i], fd))
    for i in range(x.size):
        xv = x.copy()
        xv[i] += step
        hi = scalar_x(xv)
        xv[i] -= 2.0 * step
        lo = scalar_x(xv)
        fd = (hi - lo) / (2.0 * step)
        worst = max(worst, _rel_err(gx[i], fd))
    return worst


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-4)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh arrays."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and Adam state must have equal lengths")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient component, update aborted")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    new = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


def adam_state_save(path: str | Path, state: AdamState) -> None:
    lines = [
        "SLMP-ADAM/1",
        f"t={state.t}",
        f"lr={state.lr!r}",
        f"beta1={state.beta1!r}",
        f"beta2={state.beta2!r}",
        f"eps={state.eps!r}",
        f"count={state.m.size}",
    ]
    lines += [repr(float(x)) for x in state.m]
    lines += [repr(float(x)) for x in state.v]
    Path(path).write_text("\n".join(lines) + "\n")


def adam_state_load(path: str | Path) -> AdamState:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "SLMP-ADAM/1":
        raise ValueError(f"{path}: not an optimizer state file")
    head = dict(l.split("=", 1) for l in lines[1:7])
    n = int(head["count"])
    vals = np.array([float(v) for v in lines[7 : 7 + 2 * n]])
    return AdamState(
        m=vals[:n],
        v=vals[n:],
        t=int(head["t"]),
        lr=float(head["lr"]),
        beta1=float(head["beta1"]),
        beta2=float(head["beta2"]),
        eps=float(head["eps"]),
    )


def save_checkpoint(
    path: str | Path, name: str, spec: MlpSpec, values: np.ndarray, extra: int = 0
) -> None:
    """Write a network checkpoint as plain text.

    ``values`` holds the MLP parameters in layout order, optionally
    followed by ``extra`` trailing learnable scalars (e.g. a policy's
    log-std vector).
    """
    expected = spec.param_count() + extra
    if values.shape != (expected,):
        raise ValueError(f"checkpoint for {name}: got {values.shape}, expected ({expected},)")
    lines = [
        CKPT_MAGIC,
        f"name={name}",
        f"input={spec.input_dim}",
        "hidden=" + ",".join(str(h) for h in spec.hidden),
        f"output={spec.output_dim}",
        f"act={spec.activation}",
        f"out_act={spec.output_activation}",
        f"extra={extra}",
        f"count={values.size}",
    ]
    lines += [repr(float(v)) for v in values]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[str, MlpSpec, np.ndarray, int]:
    """Read a checkpoint; returns (name, spec, values, extra)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: missing {CKPT_MAGIC} magic")
    head = {}
    for l in lines[1:9]:
        k, _, v = l.partition("=")
        head[k] = v
    hidden = tuple(int(h) for h in head["hidden"].split(",") if h)
    spec = MlpSpec(
        input_dim=int(head["input"]),
        hidden=hidden,
        output_dim=int(head["output"]),
        activation=head["act"],
        output_activation=head["out_act"],
    )
    extra = int(head["extra"])
    count = int(head["count"])
    vals = np.array([float(v) for v in lines[9 : 9 + count]], dtype=np.float64)
    if vals.size != count or count != spec.param_count() + extra:
        raise ValueError(f"{path}: parameter count mismatch")
    return head["name"], spec, vals, extra
