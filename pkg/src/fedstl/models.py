"""Sequential predictors with a cluster-shared / locally-private parameter
split, trained by SGD on an MSE objective plus a property penalty.

The penalty subgradient treats the teacher-corrected prediction as a constant
target: d/dy [lam * L1(y, teacher(y))] ~ lam * sign(y - teacher(y)), with
sign(0) = 0 so satisfied predictions are fixed points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .projection import property_loss_many, teacher_correct_many
from .stl.formula import Formula
from .stl.trace import Trace


class ModelError(ValueError):
    pass


class GradientError(ValueError):
    """Non-finite gradient; carries the offending flat parameter index."""

    def __init__(self, message: str, param_index: int):
        super().__init__(f"{message} (parameter index {param_index})")
        self.param_index = param_index


@dataclass(frozen=True)
class LinearAR:
    """y = W @ flatten(x) + b; W is cluster-shared, the bias head is private."""

    input_len: int
    output_len: int
    n_vars: int

    @property
    def in_dim(self) -> int:
        return self.input_len * self.n_vars

    @property
    def out_dim(self) -> int:
        return self.output_len * self.n_vars

    @property
    def shared_size(self) -> int:
        return self.out_dim * self.in_dim

    @property
    def private_size(self) -> int:
        return self.out_dim

    def descriptor(self) -> str:
        return f"linear_ar input_len={self.input_len} output_len={self.output_len} n_vars={self.n_vars}"


@dataclass(frozen=True)
class MiniGRU:
    """Single gated recurrent layer (shared) with a linear head (private)."""

    hidden_dim: int
    input_len: int
    output_len: int
    n_vars: int

    @property
    def out_dim(self) -> int:
        return self.output_len * self.n_vars

    @property
    def shared_size(self) -> int:
        h, v = self.hidden_dim, self.n_vars
        return 3 * (h * v + h * h + h)

    @property
    def private_size(self) -> int:
        return self.out_dim * self.hidden_dim + self.out_dim

    def descriptor(self) -> str:
        return (
            f"mini_gru hidden_dim={self.hidden_dim} input_len={self.input_len} "
            f"output_len={self.output_len} n_vars={self.n_vars}"
        )

    def unpack_shared(self, shared: np.ndarray):
        h, v = self.hidden_dim, self.n_vars
        sizes = [h * v, h * h, h] * 3
        parts = np.split(shared, np.cumsum(sizes)[:-1])
        mats = []
        for i in range(0, 9, 3):
            mats.append(
                (parts[i].reshape(h, v), parts[i + 1].reshape(h, h), parts[i + 2])
            )
        return mats  # [(Wz,Uz,bz), (Wr,Ur,br), (Wn,Un,bn)]

    def unpack_private(self, private: np.ndarray):
        h = self.hidden_dim
        w = private[: self.out_dim * h].reshape(self.out_dim, h)
        b = private[self.out_dim * h :]
        return w, b


Arch = LinearAR | MiniGRU


@dataclass
class ModelState:
    """Flat parameter vectors split into shared and private partitions."""

    arch: Arch
    shared: np.ndarray
    private: np.ndarray

    def __post_init__(self):
        if self.shared.shape != (self.arch.shared_size,):
            raise ModelError(
                f"shared vector has {self.shared.shape}, arch wants ({self.arch.shared_size},)"
            )
        if self.private.shape != (self.arch.private_size,):
            raise ModelError(
                f"private vector has {self.private.shape}, arch wants ({self.arch.private_size},)"
            )

    def clone(self) -> "ModelState":
        return ModelState(self.arch, self.shared.copy(), self.private.copy())


@dataclass
class Batch:
    """Aligned input/target windows stacked as arrays."""

    inputs: np.ndarray  # (B, input_len, V)
    targets: np.ndarray  # (B, output_len, V)
    schema: tuple

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 3 or self.targets.ndim != 3:
            raise ModelError("batch arrays must be (B, steps, vars)")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ModelError("inputs and targets must align")
        if self.inputs.shape[2] != self.targets.shape[2]:
            raise ModelError("inputs and targets must share the variable axis")
        self.schema = tuple(self.schema)

    def __len__(self):
        return self.inputs.shape[0]

    def input_traces(self):
        return [Trace(self.schema, w) for w in self.inputs]

    def target_traces(self):
        return [Trace(self.schema, w) for w in self.targets]


def init_state(arch: Arch, rng: np.random.Generator) -> ModelState:
    """Uniform [-r, r] init, r = 1/sqrt(fan_in), drawn block by block."""
    if isinstance(arch, LinearAR):
        r = 1.0 / math.sqrt(arch.in_dim)
        shared = rng.uniform(-r, r, arch.shared_size)
        private = rng.uniform(-r, r, arch.private_size)
        return ModelState(arch, shared, private)
    if isinstance(arch, MiniGRU):
        h, v = arch.hidden_dim, arch.n_vars
        blocks = []
        for _ in range(3):
            blocks.append(rng.uniform(-1.0 / math.sqrt(v), 1.0 / math.sqrt(v), h * v))
            blocks.append(rng.uniform(-1.0 / math.sqrt(h), 1.0 / math.sqrt(h), h * h))
            blocks.append(rng.uniform(-1.0 / math.sqrt(h), 1.0 / math.sqrt(h), h))
        shared = np.concatenate(blocks)
        r = 1.0 / math.sqrt(h)
        private = np.concatenate(
            [rng.uniform(-r, r, arch.out_dim * h), rng.uniform(-r, r, arch.out_dim)]
        )
        return ModelState(arch, shared, private)
    raise ModelError(f"unknown arch {arch!r}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward_batch(state: ModelState, X: np.ndarray) -> np.ndarray:
    """Predictions (B, output_len, V) for inputs (B, input_len, V)."""
    out, _ = _forward_cached(state, np.asarray(X, dtype=np.float64))
    return out


def _forward_cached(state: ModelState, X: np.ndarray):
    arch = state.arch
    if X.ndim != 3 or X.shape[1] != arch.input_len or X.shape[2] != arch.n_vars:
        raise ModelError(
            f"input shape {X.shape} does not match (B, {arch.input_len}, {arch.n_vars})"
        )
    b = X.shape[0]
    if isinstance(arch, LinearAR):
        xf = X.reshape(b, arch.in_dim)
        w = state.shared.reshape(arch.out_dim, arch.in_dim)
        y = xf @ w.T + state.private
        return y.reshape(b, arch.output_len, arch.n_vars), (xf,)
    (wz, uz, bz), (wr, ur, br), (wn, un, bn) = arch.unpack_shared(state.shared)
    wo, bo = arch.unpack_private(state.private)
    h = np.zeros((b, arch.hidden_dim))
    cache = []
    for t in range(arch.input_len):
        xt = X[:, t, :]
        z = _sigmoid(xt @ wz.T + h @ uz.T + bz)
        r = _sigmoid(xt @ wr.T + h @ ur.T + br)
        n = np.tanh(xt @ wn.T + (r * h) @ un.T + bn)
        h_new = (1.0 - z) * n + z * h
        cache.append((xt, h, z, r, n))
        h = h_new
    y = h @ wo.T + bo
    return y.reshape(b, arch.output_len, arch.n_vars), (cache, h)


def _backward(state: ModelState, X: np.ndarray, ctx, g_out: np.ndarray):
    """Gradients of sum_b <g_out_b, y_b> w.r.t. shared and private vectors."""
    arch = state.arch
    b = X.shape[0]
    g = g_out.reshape(b, arch.out_dim)
    if isinstance(arch, LinearAR):
        (xf,) = ctx
        d_w = g.T @ xf
        d_b = g.sum(axis=0)
        return d_w.ravel(), d_b
    cache, h_last = ctx
    (wz, uz, bz), (wr, ur, br), (wn, un, bn) = arch.unpack_shared(state.shared)
    wo, _ = arch.unpack_private(state.private)
    d_wo = g.T @ h_last
    d_bo = g.sum(axis=0)
    dh = g @ wo
    d_wz = np.zeros_like(wz); d_uz = np.zeros_like(uz); d_bz = np.zeros_like(bz)
    d_wr = np.zeros_like(wr); d_ur = np.zeros_like(ur); d_br = np.zeros_like(br)
    d_wn = np.zeros_like(wn); d_un = np.zeros_like(un); d_bn = np.zeros_like(bn)
    for xt, h_prev, z, r, n in reversed(cache):
        dz = dh * (h_prev - n) * z * (1.0 - z)
        dn = dh * (1.0 - z) * (1.0 - n * n)
        drh = dn @ un  # gradient w.r.t. (r * h_prev)
        dr = drh * h_prev * r * (1.0 - r)
        d_wz += dz.T @ xt; d_uz += dz.T @ h_prev; d_bz += dz.sum(axis=0)
        d_wr += dr.T @ xt; d_ur += dr.T @ h_prev; d_br += dr.sum(axis=0)
        d_wn += dn.T @ xt; d_un += dn.T @ (r * h_prev); d_bn += dn.sum(axis=0)
        dh = dh * z + dz @ uz + dr @ ur + drh * r
    d_shared = np.concatenate(
        [d_wz.ravel(), d_uz.ravel(), d_bz, d_wr.ravel(), d_ur.ravel(), d_br,
         d_wn.ravel(), d_un.ravel(), d_bn]
    )
    d_private = np.concatenate([d_wo.ravel(), d_bo])
    return d_shared, d_private


def forward(state: ModelState, x: Trace) -> Trace:
    """Single-window prediction; deterministic."""
    if x.length != state.arch.input_len or x.n_vars != state.arch.n_vars:
        raise ModelError(
            f"trace ({x.length}, {x.n_vars}) does not match arch "
            f"({state.arch.input_len}, {state.arch.n_vars})"
        )
    out = forward_batch(state, x.values[None, :, :])
    return Trace(x.schema, out[0])


def local_loss(
    state: ModelState,
    batch: Batch,
    prop: Formula | None,
    lam: float,
    margin: float | None = None,
) -> float:
    """Mean over the batch of MSE plus lam times the property loss."""
    if lam < 0:
        raise ModelError("lam must be >= 0")
    preds = forward_batch(state, batch.inputs)
    mse = ((preds - batch.targets) ** 2).mean(axis=(1, 2))
    total = mse
    if lam > 0 and prop is not None:
        total = total + lam * property_loss_many(prop, batch.schema, preds, margin=margin)
    return float(total.mean())


def _objective_grad_out(state, batch, prop, lam, margin):
    preds, ctx = _forward_cached(state, batch.inputs)
    b = preds.shape[0]
    out_dim = state.arch.out_dim
    g = 2.0 * (preds - batch.targets) / out_dim / b
    if lam > 0 and prop is not None:
        teacher = teacher_correct_many(prop, batch.schema, preds, margin=margin)
        g = g + lam * np.sign(preds - teacher) / b
    return preds, g, ctx


def sgd_step(
    state: ModelState,
    batch: Batch,
    prop: Formula | None,
    lam: float,
    eta: float,
    scope: str = "all",
    margin: float | None = None,
) -> ModelState:
    """One gradient step on the batch objective, restricted to `scope`.

    scope: "all", "shared-only", or "private-only".  The untouched partition
    is carried over byte for byte.
    """
    if eta < 0:
        raise ModelError("eta must be >= 0")
    if scope not in ("all", "shared-only", "private-only"):
        raise ModelError(f"unknown scope {scope!r}")
    _, g_out, ctx = _objective_grad_out(state, batch, prop, lam, margin)
    d_shared, d_private = _backward(state, batch.inputs, ctx, g_out)
    flat = np.concatenate([d_shared, d_private])
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise GradientError("non-finite gradient", int(bad[0]))
    shared = state.shared.copy()
    private = state.private.copy()
    if scope in ("all", "shared-only"):
        shared = shared - eta * d_shared
    if scope in ("all", "private-only"):
        private = private - eta * d_private
    return ModelState(state.arch, shared, private)


def objective_gradient(
    state: ModelState,
    batch: Batch,
    prop: Formula | None,
    lam: float,
    margin: float | None = None,
):
    """Analytic gradient of the batch objective (for verification)."""
    _, g_out, ctx = _objective_grad_out(state, batch, prop, lam, margin)
    return _backward(state, batch.inputs, ctx, g_out)


# ---------------------------------------------------------------------------
# checkpoints: one arch descriptor line, then little-endian float64 bytes
# ---------------------------------------------------------------------------


def save_checkpoint(state: ModelState, path):
    with open(path, "wb") as fh:
        fh.write((state.arch.descriptor() + "\n").encode("ascii"))
        fh.write(state.shared.astype("<f8").tobytes())
        fh.write(state.private.astype("<f8").tobytes())


def _parse_descriptor(line: str) -> Arch:
    parts = line.split()
    kind, kv = parts[0], dict(p.split("=") for p in parts[1:])
    if kind == "linear_ar":
        return LinearAR(int(kv["input_len"]), int(kv["output_len"]), int(kv["n_vars"]))
    if kind == "mini_gru":
        return MiniGRU(
            int(kv["hidden_dim"]), int(kv["input_len"]), int(kv["output_len"]), int(kv["n_vars"])
        )
    raise ModelError(f"unknown arch descriptor {line!r}")


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        line = fh.readline().decode("ascii").strip()
        arch = _parse_descriptor(line)
        blob = fh.read()
    expected = (arch.shared_size + arch.private_size) * 8
    if len(blob) != expected:
        raise ModelError(f"checkpoint has {len(blob)} payload bytes, expected {expected}")
    vec = np.frombuffer(blob, dtype="<f8")
    return ModelState(arch, vec[: arch.shared_size].copy(), vec[arch.shared_size :].copy())
