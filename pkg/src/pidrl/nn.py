"""Small batched networks with hand-written reverse-mode gradients.

Every ``forward`` returns ``(output, tape)``.  A tape remembers the module's
parameter version; calling ``backward`` after the parameters were changed
raises :class:`StaleTapeError`.  Parameters live in ``module.params`` (a dict
of float64 arrays) and must only be mutated through :func:`adam_step`,
:func:`polyak` or :meth:`Module.load`, which bump the version.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class StaleTapeError(RuntimeError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_grad(name, pre, out, g):
    if name == "tanh":
        return g * (1.0 - out * out)
    if name == "relu":
        return g * (pre > 0)
    return g


@dataclass
class Tape:
    owner: "Module"
    version: int
    saved: dict = field(default_factory=dict)


class Module:
    params: dict

    def __init__(self):
        self.version = 0

    def bump(self) -> None:
        self.version += 1

    def load(self, params: dict) -> None:
        for k, v in params.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}")
            self.params[k][...] = v
        self.bump()

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def _check(self, tape: Tape) -> None:
        if tape.owner is not self:
            raise ValueError("tape belongs to another module")
        if tape.version != self.version:
            raise StaleTapeError("parameters changed since this tape was recorded")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseNet(Module):
    """Affine layers with per-layer activations, applied to row-batches."""

    def __init__(self, sizes, activations, rng: np.random.Generator | None = None):
        super().__init__()
        sizes = list(sizes)
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = sizes
        self.activations = list(activations)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{i}"] = _uniform(rng, n_in, (n_in, n_out))
            self.params[f"b{i}"] = _uniform(rng, n_in, (n_out,))

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        tape = Tape(self, self.version)
        inputs, pres, outs = [], [], []
        h = x
        for i, act in enumerate(self.activations):
            inputs.append(h)
            pre = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = _act(act, pre)
            pres.append(pre)
            outs.append(h)
        tape.saved.update(inputs=inputs, pres=pres, outs=outs)
        return h, tape

    def backward(self, tape: Tape, grad_out):
        self._check(tape)
        g = np.asarray(grad_out, dtype=float)
        grads = {}
        for i in reversed(range(len(self.activations))):
            g = _act_grad(self.activations[i], tape.saved["pres"][i], tape.saved["outs"][i], g)
            x = tape.saved["inputs"][i]
            if x.ndim == 1:
                grads[f"W{i}"] = np.outer(x, g)
                grads[f"b{i}"] = g.copy()
            else:
                grads[f"W{i}"] = x.T @ g
                grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return grads, g


class GruCell(Module):
    """Gated recurrent unit, h' = (1 - z) * n + z * h.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    n = tanh(x Wn + (r * h) Un + bn).
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {}
        for gate in "zrn":
            self.params[f"W{gate}"] = _uniform(rng, hidden_size, (input_size, hidden_size))
            self.params[f"U{gate}"] = _uniform(rng, hidden_size, (hidden_size, hidden_size))
            self.params[f"b{gate}"] = _uniform(rng, hidden_size, (hidden_size,))

    def forward(self, h_prev, x):
        h_prev = np.asarray(h_prev, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_size or h_prev.shape[-1] != self.hidden_size:
            raise ValueError("GRU input or hidden width mismatch")
        P = self.params
        z = sigmoid(x @ P["Wz"] + h_prev @ P["Uz"] + P["bz"])
        r = sigmoid(x @ P["Wr"] + h_prev @ P["Ur"] + P["br"])
        rh = r * h_prev
        n = np.tanh(x @ P["Wn"] + rh @ P["Un"] + P["bn"])
        h = (1.0 - z) * n + z * h_prev
        tape = Tape(self, self.version, dict(x=x, h_prev=h_prev, z=z, r=r, rh=rh, n=n))
        return h, tape

    def backward(self, tape: Tape, grad_h):
        """Returns ``(param_grads, grad_h_prev, grad_x)``."""
        self._check(tape)
        P, s = self.params, tape.saved
        x, h_prev, z, r, rh, n = s["x"], s["h_prev"], s["z"], s["r"], s["rh"], s["n"]
        gh = np.asarray(grad_h, dtype=float)
        g_n = gh * (1.0 - z)
        g_z = gh * (h_prev - n)
        g_hprev = gh * z
        a_n = g_n * (1.0 - n * n)
        a_z = g_z * z * (1.0 - z)
        g_rh = a_n @ P["Un"].T
        g_r = g_rh * h_prev
        g_hprev = g_hprev + g_rh * r
        a_r = g_r * r * (1.0 - r)

        def outer(a, b):
            return np.outer(a, b) if a.ndim == 1 else a.T @ b

        def colsum(a):
            return a.copy() if a.ndim == 1 else a.sum(axis=0)

        grads = {
            "Wz": outer(x, a_z), "Uz": outer(h_prev, a_z), "bz": colsum(a_z),
            "Wr": outer(x, a_r), "Ur": outer(h_prev, a_r), "br": colsum(a_r),
            "Wn": outer(x, a_n), "Un": outer(rh, a_n), "bn": colsum(a_n),
        }
        g_hprev = g_hprev + a_z @ P["Uz"].T + a_r @ P["Ur"].T
        g_x = a_z @ P["Wz"].T + a_r @ P["Wr"].T + a_n @ P["Wn"].T
        return grads, g_hprev, g_x


def dense_forward(net: DenseNet, x):
    return net.forward(x)


def gru_forward(cell: GruCell, h_prev, x):
    return cell.forward(h_prev, x)


def backward(tape: Tape, grad_out):
    """Dispatch to the module that recorded ``tape``."""
    return tape.owner.backward(tape, grad_out)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")


def adam_step(module: Module, grads: dict, state: AdamState):
    """Bias-corrected Adam descent step on ``module.params`` (in place)."""
    for k, p in module.params.items():
        if k not in grads:
            raise ValueError(f"missing gradient for {k}")
        if np.shape(grads[k]) != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, p in module.params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    module.bump()
    return module.params, state


def polyak(target: Module, online: Module, rho: float) -> Module:
    """target <- rho * target + (1 - rho) * online."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    for k, p in target.params.items():
        q = online.params[k]
        if q.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}")
        p *= rho
        p += (1.0 - rho) * q
    target.bump()
    return target
