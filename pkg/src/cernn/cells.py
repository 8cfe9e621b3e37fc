"""Recurrent cells (uRNN, ceRNN, LSTM) and the single-step regression models.

Every model exposes the same small surface used by the training loop:

``params``
    ordered dict of named float64 arrays, updated in place by the optimizer
``owners``
    name -> owner tag (``operator``, ``cell`` or ``readout``)
``loss_and_grad(batch)``
    ``(loss, grads, diagnostics)`` with ``grads`` keyed like ``params``
``touch()``
    called after every in-place parameter update

Sequences are time-major: inputs ``(T, batch, input_size)``, integer
targets ``(T, batch)``.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import activations as act
from . import linops

URNN = "urnn"
CERNN = "cernn"
LSTM = "lstm"
CELL_KINDS = (URNN, CERNN, LSTM)

_FLAVOR = {URNN: linops.UNITARY, CERNN: linops.COMPLEX_EVOLUTION}


@dataclass
class RecurrentCellConfig:
    hidden_size: int
    input_size: int
    kind: str
    output_dim: int
    truncate_to: Optional[int] = None
    loss: str = act.SOFTMAX_CE
    # test-only: replace modReLU by the identity
    linear: bool = False

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError("cell kind must be one of %s, got %r" % (CELL_KINDS, self.kind))
        if min(self.hidden_size, self.input_size, self.output_dim) < 1:
            raise ValueError("cell sizes must be positive")
        if self.truncate_to is not None:
            if self.kind == LSTM:
                raise ValueError("truncate_to applies to urnn/cernn cells only")
            if not 1 <= self.truncate_to <= self.hidden_size:
                raise linops.DimensionError("truncate_to", "<= %d" % self.hidden_size, self.truncate_to)

    @property
    def readout_size(self):
        return self.truncate_to or self.hidden_size

    def head(self):
        if self.loss == act.SOFTMAX_CE:
            return act.LossHead(act.SOFTMAX_CE, self.output_dim)
        return act.LossHead(act.MSE)


@dataclass
class CellState:
    h: np.ndarray
    c: Optional[np.ndarray] = None


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class ComplexRNN:
    """h_{t+1} = modReLU(W h_t + V x_{t+1}) with W a structured cascade.

    The readout is a real affine map on ``[Re h; Im h]`` of the (optionally
    truncated) hidden state.
    """

    def __init__(self, cfg, rng):
        if cfg.kind not in _FLAVOR:
            raise ValueError("ComplexRNN needs an urnn or cernn config")
        self.cfg = cfg
        n, m, k = cfg.hidden_size, cfg.input_size, cfg.readout_size
        self.cascade = linops.Cascade(n, _FLAVOR[cfg.kind], rng)
        bound = 1.0 / np.sqrt(m)
        self.params = dict(self.cascade.params)
        self.params["modrelu_b"] = np.zeros(n)
        self.params["V_re"] = _uniform(rng, bound, (n, m))
        self.params["V_im"] = _uniform(rng, bound, (n, m))
        self.params["out_w"] = _uniform(rng, 1.0 / np.sqrt(2 * k), (cfg.output_dim, 2 * k))
        self.params["out_b"] = np.zeros(cfg.output_dim)
        self.owners = {name: "operator" for name in self.cascade.params}
        self.owners.update(modrelu_b="cell", V_re="cell", V_im="cell", out_w="readout", out_b="readout")
        self.head = cfg.head()

    def touch(self):
        self.cascade.touch()

    def after_update(self):
        return self.cascade.renormalize_reflectors()

    def initial_state(self, batch=1):
        return CellState(np.zeros((batch, self.cfg.hidden_size), dtype=np.complex128))

    def _V(self):
        return self.params["V_re"] + 1j * self.params["V_im"]

    def _activate(self, z):
        if self.cfg.linear:
            return z
        return act.modrelu(z, self.params["modrelu_b"])

    def readout(self, h):
        k = self.cfg.readout_size
        feats = np.concatenate((h[..., :k].real, h[..., :k].imag), axis=-1)
        return feats @ self.params["out_w"].T + self.params["out_b"]

    def step(self, state, x_t):
        """One recurrence step; returns ``(new_state, output)``."""
        x_t = np.asarray(x_t, dtype=np.float64)
        h = np.asarray(state.h, dtype=np.complex128)
        if h.shape[-1] != self.cfg.hidden_size:
            raise linops.DimensionError("cell state", self.cfg.hidden_size, h.shape[-1])
        if x_t.shape[-1] != self.cfg.input_size:
            raise linops.DimensionError("cell input", self.cfg.input_size, x_t.shape[-1])
        z = self.cascade(h) + x_t @ self._V().T
        h_new = self._activate(z)
        return CellState(h_new), self.readout(h_new)

    def unroll(self, inputs, targets, loss_steps="all", h0=None):
        """Full BPTT over the sequence.

        ``loss_steps="last"`` scores only the final position.  Diagnostics
        include ``dh_norms[t] = ||dC/dh_t||`` (over the whole batch) and the
        hidden-state norms.
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets)
        if inputs.ndim != 3 or inputs.shape[0] < 1:
            raise ValueError("inputs must be a non-empty (T, batch, input_size) array")
        if targets.shape[:2] != inputs.shape[:2]:
            raise ValueError("targets shape %s does not align with inputs %s" % (targets.shape, inputs.shape))
        if inputs.shape[2] != self.cfg.input_size:
            raise linops.DimensionError("cell input", self.cfg.input_size, inputs.shape[2])
        T, B, _ = inputs.shape
        n, k = self.cfg.hidden_size, self.cfg.readout_size
        b = self.params["modrelu_b"]
        W = self.cascade.bind()
        vx = inputs @ self._V().T

        h = np.zeros((B, n), dtype=np.complex128) if h0 is None else np.array(h0, dtype=np.complex128)
        hs = np.empty((T, B, n), dtype=np.complex128)
        zs = np.empty((T, B, n), dtype=np.complex128)
        tapes = []
        for t in range(T):
            z, tape = W.forward(h)
            z += vx[t]
            h = self._activate(z)
            zs[t], hs[t] = z, h
            tapes.append(tape)

        feats = np.concatenate((hs[..., :k].real, hs[..., :k].imag), axis=-1)
        logits = feats @ self.params["out_w"].T + self.params["out_b"]
        sel = slice(None) if loss_steps == "all" else slice(T - 1, T)
        loss, g_logits_sel = act.loss_and_grad(self.head, logits[sel], targets[sel])
        g_logits = np.zeros_like(logits)
        g_logits[sel] = g_logits_sel

        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        flat_g = g_logits.reshape(-1, g_logits.shape[-1])
        grads["out_w"] = flat_g.T @ feats.reshape(-1, 2 * k)
        grads["out_b"] = flat_g.sum(axis=0)
        g_feats = g_logits @ self.params["out_w"]
        g_h = np.zeros((T, B, n), dtype=np.complex128)
        g_h[..., :k] = g_feats[..., :k] + 1j * g_feats[..., k:]

        gz_all = np.empty((T, B, n), dtype=np.complex128)
        gd = np.zeros((3, n), dtype=np.complex128)
        gv = np.zeros((2, n), dtype=np.complex128)
        dh_norms = np.empty(T)
        carry = np.zeros((B, n), dtype=np.complex128)
        for t in range(T - 1, -1, -1):
            gh = g_h[t] + carry
            dh_norms[t] = np.linalg.norm(gh)
            if self.cfg.linear:
                gz = gh
            else:
                gz, gb = act.modrelu_vjp(zs[t], b, gh)
                grads["modrelu_b"] += gb
            gz_all[t] = gz
            carry, (gd_t, gv_t) = W.vjp_raw(tapes[t], gz)
            gd += gd_t
            gv += gv_t
        grads.update(W.param_grads(gd, gv))
        gV = np.einsum("tbn,tbm->nm", gz_all, inputs)
        grads["V_re"], grads["V_im"] = gV.real, gV.imag
        diagnostics = {
            "dh_norms": dh_norms,
            "h_norms": np.linalg.norm(hs, axis=(1, 2)),
            "dh0": carry,
            "hidden": hs,
            "logits": logits,
        }
        return loss, grads, diagnostics

    def loss_and_grad(self, batch):
        return self.unroll(batch.inputs, batch.targets)

    def diag_entries(self):
        return self.cascade.diagonals()

    def structured_parameter_count(self):
        return self.cascade.parameter_count()


class LSTMCell:
    """Single-layer LSTM baseline with gate order (input, forget, cell, output)."""

    def __init__(self, cfg, rng):
        if cfg.kind != LSTM:
            raise ValueError("LSTMCell needs an lstm config")
        self.cfg = cfg
        h, m = cfg.hidden_size, cfg.input_size
        bound = 1.0 / np.sqrt(m + h)
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        self.params = {
            "W_x": _uniform(rng, bound, (4 * h, m)),
            "W_h": _uniform(rng, bound, (4 * h, h)),
            "gate_b": bias,
            "out_w": _uniform(rng, 1.0 / np.sqrt(h), (cfg.output_dim, h)),
            "out_b": np.zeros(cfg.output_dim),
        }
        self.owners = {"W_x": "cell", "W_h": "cell", "gate_b": "cell", "out_w": "readout", "out_b": "readout"}
        self.head = cfg.head()

    def touch(self):
        pass

    def after_update(self):
        return False

    def initial_state(self, batch=1):
        z = np.zeros((batch, self.cfg.hidden_size))
        return CellState(z, z.copy())

    def _gates(self, x, h):
        H = self.cfg.hidden_size
        a = x @ self.params["W_x"].T + h @ self.params["W_h"].T + self.params["gate_b"]
        i = act.sigmoid(a[..., :H])
        f = act.sigmoid(a[..., H:2 * H])
        g = act.tanh(a[..., 2 * H:3 * H])
        o = act.sigmoid(a[..., 3 * H:])
        return i, f, g, o

    def step(self, state, x_t):
        x_t = np.asarray(x_t, dtype=np.float64)
        if np.shape(state.h)[-1] != self.cfg.hidden_size:
            raise linops.DimensionError("cell state", self.cfg.hidden_size, np.shape(state.h)[-1])
        if x_t.shape[-1] != self.cfg.input_size:
            raise linops.DimensionError("cell input", self.cfg.input_size, x_t.shape[-1])
        i, f, g, o = self._gates(x_t, state.h)
        c = f * state.c + i * g
        h = o * np.tanh(c)
        return CellState(h, c), h @ self.params["out_w"].T + self.params["out_b"]

    def unroll(self, inputs, targets, loss_steps="all"):
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets)
        if inputs.ndim != 3 or inputs.shape[0] < 1:
            raise ValueError("inputs must be a non-empty (T, batch, input_size) array")
        if targets.shape[:2] != inputs.shape[:2]:
            raise ValueError("targets shape %s does not align with inputs %s" % (targets.shape, inputs.shape))
        if inputs.shape[2] != self.cfg.input_size:
            raise linops.DimensionError("cell input", self.cfg.input_size, inputs.shape[2])
        T, B, _ = inputs.shape
        H = self.cfg.hidden_size
        Wh = self.params["W_h"]
        ax = inputs @ self.params["W_x"].T + self.params["gate_b"]
        hs = np.zeros((T + 1, B, H))
        cs = np.zeros((T + 1, B, H))
        gates = np.empty((T, B, 4 * H))
        for t in range(T):
            a = ax[t] + hs[t] @ Wh.T
            i = act.sigmoid(a[:, :H])
            f = act.sigmoid(a[:, H:2 * H])
            g = np.tanh(a[:, 2 * H:3 * H])
            o = act.sigmoid(a[:, 3 * H:])
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
            gates[t] = np.concatenate((i, f, g, o), axis=1)

        logits = hs[1:] @ self.params["out_w"].T + self.params["out_b"]
        sel = slice(None) if loss_steps == "all" else slice(T - 1, T)
        loss, g_sel = act.loss_and_grad(self.head, logits[sel], targets[sel])
        g_logits = np.zeros_like(logits)
        g_logits[sel] = g_sel

        flat_g = g_logits.reshape(-1, g_logits.shape[-1])
        grads = {
            "out_w": flat_g.T @ hs[1:].reshape(-1, H),
            "out_b": flat_g.sum(axis=0),
        }
        g_h_out = g_logits @ self.params["out_w"]
        g_a = np.empty((T, B, 4 * H))
        dh_norms = np.empty(T)
        gh_next = np.zeros((B, H))
        gc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            i, f, g, o = (gates[t, :, j * H:(j + 1) * H] for j in range(4))
            gh = g_h_out[t] + gh_next
            dh_norms[t] = np.linalg.norm(gh)
            tc = np.tanh(cs[t + 1])
            gc = gc_next + gh * o * (1.0 - tc ** 2)
            g_a[t, :, :H] = gc * g * i * (1.0 - i)
            g_a[t, :, H:2 * H] = gc * cs[t] * f * (1.0 - f)
            g_a[t, :, 2 * H:3 * H] = gc * i * (1.0 - g ** 2)
            g_a[t, :, 3 * H:] = gh * tc * o * (1.0 - o)
            gh_next = g_a[t] @ Wh
            gc_next = gc * f
        flat_a = g_a.reshape(-1, 4 * H)
        grads["W_x"] = flat_a.T @ inputs.reshape(-1, inputs.shape[2])
        grads["W_h"] = flat_a.T @ hs[:-1].reshape(-1, H)
        grads["gate_b"] = flat_a.sum(axis=0)
        diagnostics = {"dh_norms": dh_norms, "h_norms": np.linalg.norm(hs[1:], axis=(1, 2)), "logits": logits}
        return loss, {name: grads[name] for name in self.params}, diagnostics

    def loss_and_grad(self, batch):
        return self.unroll(batch.inputs, batch.targets)

    def diag_entries(self):
        return None

    def structured_parameter_count(self):
        return 0


def make_cell(cfg, rng):
    if cfg.kind == LSTM:
        return LSTMCell(cfg, rng)
    return ComplexRNN(cfg, rng)


def cell_step(model, state, x_t):
    return model.step(state, x_t)


def unroll(model, inputs, targets, **kwargs):
    return model.unroll(inputs, targets, **kwargs)


# -- single-step models for the regression experiment ---------------------------

DENSE = "dense"


class DenseRegressor:
    """y = W x with an unconstrained real matrix."""

    def __init__(self, n, rng):
        self.n = n
        self.params = {"W": _uniform(rng, 1.0 / np.sqrt(n), (n, n))}
        self.owners = {"W": "operator"}
        self.head = act.LossHead(act.MSE)

    def touch(self):
        pass

    def after_update(self):
        return False

    def predict(self, x):
        return x @ self.params["W"].T

    def loss_and_grad(self, batch):
        loss, g = act.loss_and_grad(self.head, self.predict(batch.inputs), batch.targets)
        return loss, {"W": g.T @ batch.inputs}, {}

    def diag_entries(self):
        return None

    def structured_parameter_count(self):
        return 0


class CascadeRegressor:
    """y = Re(W x) with W a unitary or complex-evolution cascade."""

    def __init__(self, n, flavor, rng):
        self.n = n
        self.cascade = linops.Cascade(n, flavor, rng)
        self.params = dict(self.cascade.params)
        self.owners = {name: "operator" for name in self.params}
        self.head = act.LossHead(act.MSE)

    def touch(self):
        self.cascade.touch()

    def after_update(self):
        return self.cascade.renormalize_reflectors()

    def predict(self, x):
        return self.cascade(x).real

    def loss_and_grad(self, batch):
        z, tape = self.cascade.forward(batch.inputs)
        loss, g = act.loss_and_grad(self.head, z.real, batch.targets)
        _, grads = self.cascade.vjp(tape, g.astype(np.complex128))
        return loss, grads, {}

    def diag_entries(self):
        return self.cascade.diagonals()

    def structured_parameter_count(self):
        return self.cascade.parameter_count()
