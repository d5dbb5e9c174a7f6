"""Small numpy neural-network substrate with hand-written gradients.

Everything here works on float64 arrays.  Networks do not own their
weights: parameters live in a :class:`ParamStore` under prefixed names
(``"enc.W0"``, ``"att2.b1"`` ...) so that several networks can share one
optimizer step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

PROB_CLAMP = 1e-7
CKPT_MAGIC = b"GAMCKPT1"


class ParamStore:
    """Named parameter blocks with matching gradient accumulators."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.opt_state: dict[str, dict[str, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self.values.items():
            out.add(name, v.copy())
        out.opt_state = {k: {s: a.copy() for s, a in d.items()} for k, d in self.opt_state.items()}
        out.step = self.step
        return out

    def subset(self, prefix: str) -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))


# --------------------------------------------------------------------------
# dense layers


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output_mode: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("MlpSpec needs at least two layer sizes")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output_mode not in ("linear", "softmax", "sigmoid"):
            raise ConfigError(f"unknown output mode {self.output_mode!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(params: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    for l in range(spec.n_layers):
        n_in, n_out = spec.layer_sizes[l], spec.layer_sizes[l + 1]
        params.add(f"{prefix}W{l}", glorot_uniform(rng, n_in, n_out))
        params.add(f"{prefix}b{l}", np.zeros(n_out))


@dataclass
class MlpTape:
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    output: np.ndarray | None = None
    squeeze: bool = False


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name, z, a, g):
    if name == "relu":
        return g * (z > 0.0)
    return g * (1.0 - a * a)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; rows of the result sum to one."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(spec: MlpSpec, params: ParamStore, x, prefix: str = ""):
    """Run an MLP on a vector or a batch of row vectors.

    Returns ``(output, tape)``; the tape is what :func:`mlp_backward` needs.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != spec.layer_sizes[0]:
        raise DimensionError(
            f"expected input width {spec.layer_sizes[0]}, got {h.shape[-1]}", layer=0
        )
    tape = MlpTape(squeeze=squeeze)
    last = spec.n_layers - 1
    for l in range(spec.n_layers):
        W = params.values[f"{prefix}W{l}"]
        b = params.values[f"{prefix}b{l}"]
        if W.shape[0] != h.shape[-1]:
            raise DimensionError(f"weight expects {W.shape[0]} inputs, got {h.shape[-1]}", layer=l)
        tape.inputs.append(h)
        z = h @ W + b
        tape.preacts.append(z)
        if l < last:
            h = _act(spec.activation, z)
        elif spec.output_mode == "softmax":
            h = softmax(z, axis=-1)
        elif spec.output_mode == "sigmoid":
            h = sigmoid(z)
        else:
            h = z
    tape.output = h
    return (h[0] if squeeze else h), tape


def mlp_backward(spec: MlpSpec, params: ParamStore, tape: MlpTape, grad_out, prefix: str = ""):
    """Accumulate parameter gradients and return d(loss)/d(input)."""
    g = np.asarray(grad_out, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    out = tape.output
    if spec.output_mode == "softmax":
        g = out * (g - np.sum(g * out, axis=-1, keepdims=True))
    elif spec.output_mode == "sigmoid":
        g = g * out * (1.0 - out)
    for l in range(spec.n_layers - 1, -1, -1):
        if l < spec.n_layers - 1:
            z = tape.preacts[l]
            g = _act_grad(spec.activation, z, _act(spec.activation, z), g)
        params.grads[f"{prefix}W{l}"] += tape.inputs[l].T @ g
        params.grads[f"{prefix}b{l}"] += g.sum(axis=0)
        g = g @ params.values[f"{prefix}W{l}"].T
    return g[0] if tape.squeeze else g


# --------------------------------------------------------------------------
# LSTM cell (gate order: input, forget, candidate, output)


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        self.hidden = np.asarray(self.hidden, dtype=np.float64)
        self.cell = np.asarray(self.cell, dtype=np.float64)
        if self.hidden.shape != self.cell.shape:
            raise DimensionError("LSTM hidden and cell must have equal shape")

    @classmethod
    def zeros(cls, n_hidden: int, batch: int | None = None) -> "LstmState":
        shape = (n_hidden,) if batch is None else (batch, n_hidden)
        return cls(np.zeros(shape), np.zeros(shape))


def init_lstm(params: ParamStore, prefix: str, n_in: int, n_hidden: int, rng) -> None:
    params.add(f"{prefix}Wx", glorot_uniform(rng, n_in, 4 * n_hidden))
    params.add(f"{prefix}Wh", glorot_uniform(rng, n_hidden, 4 * n_hidden))
    b = np.zeros(4 * n_hidden)
    b[n_hidden : 2 * n_hidden] = 1.0  # forget-gate bias
    params.add(f"{prefix}b", b)


def lstm_forward(params: ParamStore, x, state: LstmState, prefix: str = "lstm."):
    """One LSTM step; returns ``(new_state, cache)``."""
    Wx = params.values[f"{prefix}Wx"]
    Wh = params.values[f"{prefix}Wh"]
    b = params.values[f"{prefix}b"]
    x = np.asarray(x, dtype=np.float64)
    H = Wh.shape[0]
    if x.shape[-1] != Wx.shape[0]:
        raise DimensionError(f"LSTM expects input width {Wx.shape[0]}, got {x.shape[-1]}")
    if state.hidden.shape[-1] != H:
        raise DimensionError(f"LSTM expects hidden width {H}, got {state.hidden.shape[-1]}")
    z = x @ Wx + state.hidden @ Wh + b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H :])
    c = f * state.cell + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, state.hidden, state.cell, i, f, g, o, tc)
    return LstmState(h, c), cache


def lstm_step(params: ParamStore, x, state: LstmState, prefix: str = "lstm.") -> LstmState:
    new_state, _ = lstm_forward(params, x, state, prefix)
    if not (np.all(np.isfinite(new_state.hidden)) and np.all(np.isfinite(new_state.cell))):
        raise NumericalError("LSTM produced a non-finite state")
    return new_state


def lstm_backward(params: ParamStore, cache, dh, dc, prefix: str = "lstm."):
    """Backprop one step; returns ``(dx, dh_prev, dc_prev)``."""
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=-1
    )
    x2 = np.atleast_2d(x)
    h2 = np.atleast_2d(h_prev)
    dz2 = np.atleast_2d(dz)
    params.grads[f"{prefix}Wx"] += x2.T @ dz2
    params.grads[f"{prefix}Wh"] += h2.T @ dz2
    params.grads[f"{prefix}b"] += dz2.sum(axis=0)
    dx = dz @ params.values[f"{prefix}Wx"].T
    dh_prev = dz @ params.values[f"{prefix}Wh"].T
    return dx, dh_prev, dc_prev


# --------------------------------------------------------------------------
# losses


def _check_labels(label):
    label = np.asarray(label, dtype=np.float64)
    if not np.all((label == 0.0) | (label == 1.0)):
        raise ConfigError("binary labels must be 0 or 1")
    return label


def binary_cross_entropy(pred, label):
    """Per-sample ``-[y ln p + (1-y) ln(1-p)]`` with p clamped to [1e-7, 1-1e-7]."""
    label = _check_labels(label)
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(label * np.log(p) + (1.0 - label) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def binary_cross_entropy_grad(pred, label):
    """d(loss)/d(pred) of :func:`binary_cross_entropy`; zero where the clamp is active."""
    label = _check_labels(label)
    pred = np.asarray(pred, dtype=np.float64)
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = -label / p + (1.0 - label) / (1.0 - p)
    active = (pred > PROB_CLAMP) & (pred < 1.0 - PROB_CLAMP)
    return np.where(active, g, 0.0)


# --------------------------------------------------------------------------
# optimizers


def _check_grads(params: ParamStore) -> None:
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in block {name!r} at step {params.step}")


def _check_values(params: ParamStore) -> None:
    for name, v in params.values.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite parameter in block {name!r} after step {params.step}")


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    norm = params.grad_norm()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in params.grads.values():
            g *= scale
    return norm


def adam_step(params: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Adam update.  Blocks whose gradient is exactly zero are left untouched."""
    _check_grads(params)
    params.step += 1
    for name, g in params.grads.items():
        if not np.any(g):
            continue
        st = params.opt_state.setdefault(
            name, {"m": np.zeros_like(g), "v": np.zeros_like(g), "t": np.zeros(1)}
        )
        st["t"] += 1
        t = st["t"][0]
        st["m"] *= beta1
        st["m"] += (1.0 - beta1) * g
        st["v"] *= beta2
        st["v"] += (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1**t)
        v_hat = st["v"] / (1.0 - beta2**t)
        params.values[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    _check_values(params)


def rmsprop_step(params: ParamStore, lr: float, decay=0.99, eps=1e-5) -> None:
    """Plain RMSProp (no bias correction); zero-gradient blocks are skipped."""
    _check_grads(params)
    params.step += 1
    for name, g in params.grads.items():
        if not np.any(g):
            continue
        st = params.opt_state.setdefault(name, {"ms": np.zeros_like(g)})
        st["ms"] *= decay
        st["ms"] += (1.0 - decay) * g * g
        params.values[name] -= lr * g / (np.sqrt(st["ms"]) + eps)
    _check_values(params)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    n_samples: int,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return the scalar loss and accumulate its
    gradient into ``params.grads`` (which are zeroed before the first call).
    Coordinates are drawn uniformly over all blocks.  The relative error is
    ``|a - n| / max(|a| + |n|, floor)``; the floor keeps exactly-zero
    gradients (e.g. a bias under a shift-invariant softmax) from turning
    central-difference round-off into a large relative error.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params.zero_grad()
    loss_fn(params)
    analytic = {k: g.copy() for k, g in params.grads.items()}
    names = params.names()
    sizes = np.array([params.values[n].size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        b = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[b], int(flat - offsets[b])
        v = params.values[name].reshape(-1)
        old = v[idx]
        v[idx] = old + h
        lp = loss_fn(params)
        v[idx] = old - h
        lm = loss_fn(params)
        v[idx] = old
        numeric = (lp - lm) / (2.0 * h)
        a = analytic[name].reshape(-1)[idx]
        err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
        worst = max(worst, err)
    params.zero_grad()
    for k, g in analytic.items():
        params.grads[k][...] = g
    return worst


# --------------------------------------------------------------------------
# checkpoint files


def _blocks_for_save(params: ParamStore, include_state: bool):
    for name, v in params.values.items():
        yield name, v
    if include_state:
        yield "@step", np.array([float(params.step)])
        for name, st in params.opt_state.items():
            for slot, a in st.items():
                yield f"@{slot}@{name}", a


def checkpoint_bytes(params: ParamStore, include_state: bool = True) -> bytes:
    blocks = list(_blocks_for_save(params, include_state))
    out = [CKPT_MAGIC, struct.pack("<Q", len(blocks))]
    for name, v in blocks:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", v.ndim))
        out.append(struct.pack(f"<{v.ndim}Q", *v.shape))
        out.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(data: bytes) -> ParamStore:
    if data[:8] != CKPT_MAGIC:
        raise ConfigError("not a GAMCKPT1 checkpoint")
    (count,) = struct.unpack_from("<Q", data, 8)
    pos = 16
    params = ParamStore()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        if name == "@step":
            params.step = int(arr[0])
        elif name.startswith("@"):
            _, slot, block = name.split("@", 2)
            params.opt_state.setdefault(block, {})[slot] = arr.astype(np.float64)
        else:
            params.add(name, arr)
    return params


def save_checkpoint(params: ParamStore, path, include_state: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, include_state))


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
