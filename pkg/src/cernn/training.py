"""Parameter flattening, Adam, gradient checking, the training loop and
checkpoint files.

Checkpoint format (version 1)
-----------------------------
A single file: one UTF-8 JSON header line terminated by ``\\n``, followed by
the flattened parameters as little-endian float64.  The header holds::

    {"format": "cernn-checkpoint", "version": 1,
     "segments": [{"name", "owner", "shape"}, ...],   # in storage order
     "seed": int, "step": int, "model": str, "n": int,
     "perm": [int, ...] or null, "config": {...}}
"""
from dataclasses import dataclass, field
import json
import time

import numpy as np

CHECKPOINT_FORMAT = "cernn-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def make_rngs(seed):
    """Independent generators for parameter init and data, derived from one seed."""
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(data_seq)


@dataclass(frozen=True)
class Segment:
    name: str
    owner: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


class ParamBlock:
    """Ordered view of named parameter arrays as one flat real vector."""

    def __init__(self, params, owners=None):
        owners = owners or {}
        self.segments = []
        offset = 0
        for name, arr in params.items():
            seg = Segment(name, owners.get(name, ""), tuple(np.shape(arr)), offset)
            self.segments.append(seg)
            offset += seg.size
        self.size = offset

    def flatten(self, arrays):
        flat = np.empty(self.size)
        for seg in self.segments:
            flat[seg.offset:seg.offset + seg.size] = np.ravel(arrays[seg.name])
        return flat

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError("flat vector has length %d, block expects %d" % (flat.size, self.size))
        return {seg.name: flat[seg.offset:seg.offset + seg.size].reshape(seg.shape).copy()
                for seg in self.segments}

    def write(self, flat, params):
        """Copy ``flat`` into the existing arrays of ``params`` in place."""
        for seg in self.segments:
            params[seg.name][...] = flat[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def owner_counts(self):
        counts = {}
        for seg in self.segments:
            counts[seg.owner] = counts.get(seg.owner, 0) + seg.size
        return counts


@dataclass
class AdamState:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None
    diverged: bool = False

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(state, params, grads):
    """Bias-corrected Adam update of the flat vector ``params`` (in place).

    A non-finite gradient marks the state as diverged and skips the update.
    Returns the applied step.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or params.shape != state.m.shape:
        raise ValueError("adam: params %s, grads %s, state %s disagree"
                         % (params.shape, grads.shape, state.m.shape))
    if not np.all(np.isfinite(grads)):
        state.diverged = True
        return np.zeros_like(params)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    step = -state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params += step
    return step


@dataclass
class GradCheckReport:
    rel_errors: np.ndarray
    abs_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    checked: np.ndarray
    rtol: float
    atol: float

    @property
    def max_rel_error(self):
        if not self.checked.any():
            return 0.0
        return float(self.rel_errors[self.checked].max())

    @property
    def passed(self):
        ok = self.abs_errors <= self.rtol * np.maximum(np.abs(self.numeric), np.abs(self.analytic)) + self.atol
        return bool(ok[self.checked].all())

    def worst(self, k=5):
        idx = np.flatnonzero(self.checked)
        order = idx[np.argsort(self.rel_errors[idx])[::-1]]
        return [(int(i), float(self.analytic[i]), float(self.numeric[i]), float(self.rel_errors[i]))
                for i in order[:k]]


def grad_check(closure, params, h=1e-6, rtol=1e-5, atol=1e-8, exclude=None, indices=None):
    """Compare ``closure(p) -> (loss, grad)`` against central differences.

    ``exclude`` is an optional boolean mask of coordinates to skip (flat
    regions, kinks); ``indices`` restricts the check to a subset.
    """
    params = np.array(params, dtype=np.float64)
    _, analytic = closure(params.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.zeros_like(params)
    checked = np.zeros(params.size, dtype=bool)
    todo = range(params.size) if indices is None else indices
    for i in todo:
        if exclude is not None and exclude[i]:
            continue
        p = params.copy()
        p[i] += h
        fp = closure(p)[0]
        p[i] -= 2 * h
        fm = closure(p)[0]
        numeric[i] = (fp - fm) / (2 * h)
        checked[i] = True
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return GradCheckReport(abs_err / scale, abs_err, analytic, numeric, checked, rtol, atol)


def model_closure(model, batch):
    """Flat-vector loss/gradient closure over ``model`` for a fixed batch."""
    block = ParamBlock(model.params, model.owners)

    def closure(flat):
        block.write(flat, model.params)
        model.touch()
        loss, grads, _ = model.loss_and_grad(batch)
        return loss, block.flatten(grads)

    return closure, block


@dataclass
class TrainRecord:
    step: int
    loss: float
    loss_avg: float
    grad_norm: float
    wall_ms: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    diverged: bool = False


@dataclass
class TrainResult:
    records: list
    params: dict
    block: ParamBlock
    losses: np.ndarray
    diverged: bool = False

    def final_window_loss(self, fraction=0.05):
        return final_window(self.losses, fraction)


def final_window(losses, fraction=0.05):
    losses = np.asarray(losses, dtype=np.float64)
    k = max(1, int(round(len(losses) * fraction)))
    return float(np.mean(losses[-k:]))


def wrap_angles(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2 * np.pi)


def angle_norm(diag_entries):
    """L2 norm of the wrapped angles theta of entries exp(-i theta)."""
    return float(np.linalg.norm(wrap_angles(-np.angle(diag_entries))))


def default_diagnostics(model):
    d = model.diag_entries()
    if d is None:
        return {}
    return {
        "angle_norm_U1": angle_norm(d[0]),
        "max_modulus_dev": float(np.max(np.abs(np.abs(d) - 1.0))),
    }


def train(task, model, seed, max_steps, lr=1e-3, batch_size=32, metrics_interval=100,
          data_rng=None, clip=None, callback=None):
    """Adam on fresh batches from ``task.sample``; deterministic given ``seed``.

    Returns a :class:`TrainResult`.  Records are taken at step 0 and every
    ``metrics_interval`` updates; each carries the batch loss at that step and
    the mean batch loss since the previous record.  A non-finite loss or
    gradient stops the run with a flagged record.
    """
    if data_rng is None:
        data_rng = make_rngs(seed)[1]
    block = ParamBlock(model.params, model.owners)
    flat = block.flatten(model.params)
    opt = AdamState(block.size, lr=lr)
    records, losses = [], []
    window = []
    diverged = False
    t0 = time.perf_counter()
    for step in range(max_steps + 1):
        batch = task.sample(data_rng, batch_size)
        loss, grads, _ = model.loss_and_grad(batch)
        g = block.flatten(grads)
        gnorm = float(np.linalg.norm(g))
        losses.append(loss)
        window.append(loss)
        bad = not (np.isfinite(loss) and np.isfinite(gnorm))
        if step % metrics_interval == 0 or bad:
            rec = TrainRecord(step, float(loss), float(np.mean(window)), gnorm,
                              (time.perf_counter() - t0) * 1e3, default_diagnostics(model), bad)
            records.append(rec)
            window = []
            if callback is not None:
                callback(rec)
        if bad:
            diverged = True
            break
        if step == max_steps:
            break
        if clip is not None and gnorm > clip:
            g *= clip / gnorm
        adam_step(opt, flat, g)
        block.write(flat, model.params)
        if model.after_update():
            flat = block.flatten(model.params)
        model.touch()
    return TrainResult(records, block.unflatten(flat), block, np.asarray(losses), diverged)


def save_checkpoint(path, block, params, header):
    head = dict(header)
    head.update(
        format=CHECKPOINT_FORMAT,
        version=CHECKPOINT_VERSION,
        segments=[{"name": s.name, "owner": s.owner, "shape": list(s.shape)} for s in block.segments],
    )
    flat = block.flatten(params).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(flat.tobytes())


def load_checkpoint(path):
    """Returns ``(header, params)``; raises :class:`CheckpointError` on bad files."""
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError("cannot read checkpoint %s: %s" % (path, exc)) from exc
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("checkpoint %s has a corrupt header" % path) from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("%s is not a cernn checkpoint" % path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version %r" % header.get("version"))
    flat = np.frombuffer(payload, dtype="<f8")
    params, offset = {}, 0
    for seg in header["segments"]:
        size = int(np.prod(seg["shape"], dtype=np.int64))
        if offset + size > flat.size:
            raise CheckpointError("checkpoint %s is truncated" % path)
        params[seg["name"]] = flat[offset:offset + size].reshape(seg["shape"]).astype(np.float64)
        offset += size
    if offset != flat.size:
        raise CheckpointError("checkpoint %s has %d trailing values" % (path, flat.size - offset))
    return header, params
