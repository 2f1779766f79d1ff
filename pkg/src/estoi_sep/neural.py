"""Recurrent mask-estimation network with exact BPTT and Adam.

The network maps a mixture magnitude spectrogram Z to a sigmoid mask M
through a stack of LSTM layers and a time-distributed dense layer. A fixed
output layer produces both source estimates, ``M * Z`` and ``(1 - M) * Z``,
so the two masks always sum to one.

Arrays are batched as ``(B, F, T)``; a single ``(F, T)`` spectrogram or a
:class:`~estoi_sep.dsp.MagnitudeSpectrogram` is also accepted.
"""

from dataclasses import dataclass, field
import io
import json
import struct

import numpy as np

from . import kernels
from .dsp import MagnitudeSpectrogram

MAGIC = b"ESEPCKPT"
FORMAT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient during training."""


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint file."""


@dataclass
class LstmLayerParams:
    """Input weights ``W (in, 4H)``, recurrent weights ``U (H, 4H)``, bias ``b (4H,)``."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def input_dim(self):
        return self.W.shape[0]

    @property
    def hidden_dim(self):
        return self.U.shape[0]


@dataclass
class SeparationModel:
    layers: list
    dense_W: np.ndarray
    dense_b: np.ndarray
    feature_scale: float = 1.0
    configs: dict = field(default_factory=dict)

    @property
    def n_freq(self):
        return self.dense_W.shape[1]

    @property
    def hidden_sizes(self):
        return [layer.hidden_dim for layer in self.layers]

    def parameters(self):
        """Ordered ``name -> array`` view of every trainable tensor."""
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"lstm{k}.W"] = layer.W
            params[f"lstm{k}.U"] = layer.U
            params[f"lstm{k}.b"] = layer.b
        params["dense.W"] = self.dense_W
        params["dense.b"] = self.dense_b
        return params

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def copy(self):
        layers = [LstmLayerParams(l.W.copy(), l.U.copy(), l.b.copy()) for l in self.layers]
        return SeparationModel(layers, self.dense_W.copy(), self.dense_b.copy(),
                               self.feature_scale, json.loads(json.dumps(self.configs)))


def parameter_count(n_freq, hidden_sizes):
    """Closed-form trainable parameter count."""
    total, prev = 0, n_freq
    for h in hidden_sizes:
        total += 4 * (prev * h + h * h + h)
        prev = h
    return total + prev * n_freq + n_freq


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_model(n_freq=65, hidden_sizes=(512, 512, 512), seed=0, feature_scale=1.0,
               configs=None):
    """Fresh model: fan-in uniform input weights, orthogonal recurrent
    blocks, forget-gate bias 1, all other biases 0."""
    rng = np.random.default_rng(seed)
    layers, prev = [], n_freq
    for h in hidden_sizes:
        limit = 1.0 / np.sqrt(prev)
        W = rng.uniform(-limit, limit, (prev, 4 * h))
        U = np.concatenate([_orthogonal(rng, h) for _ in range(4)], axis=1)
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        layers.append(LstmLayerParams(W, U, b))
        prev = h
    limit = 1.0 / np.sqrt(prev)
    dense_W = rng.uniform(-limit, limit, (prev, n_freq))
    dense_b = np.zeros(n_freq)
    return SeparationModel(layers, dense_W, dense_b, feature_scale, dict(configs or {}))


def zero_model(n_freq, hidden_sizes):
    model = init_model(n_freq, hidden_sizes)
    for p in model.parameters().values():
        p[...] = 0.0
    return model


@dataclass
class ForwardTape:
    inputs: list        # per layer: (T, B, in)
    gates: list         # per layer: (T, B, 4H)
    cells: list
    hidden: list
    mask: np.ndarray    # (T, B, F)
    mixture: np.ndarray  # (T, B, F)

    @property
    def length(self):
        return self.mask.shape[0]


@dataclass
class ForwardResult:
    mask: np.ndarray
    est1: np.ndarray
    est2: np.ndarray
    tape: ForwardTape


def _as_batch(mags):
    if isinstance(mags, MagnitudeSpectrogram):
        mags = mags.mags
    mags = np.asarray(mags, dtype=np.float64)
    if mags.ndim == 2:
        return mags[None], True
    if mags.ndim != 3:
        raise ValueError(f"expected (F, T) or (B, F, T) input, got shape {mags.shape}")
    return mags, False


def forward(model, mixture_mags):
    """Mask, both source estimates and the tape needed by :func:`backward`."""
    Z, squeeze = _as_batch(mixture_mags)
    if Z.shape[1] != model.n_freq:
        raise ValueError(
            f"model expects {model.n_freq} frequency bins, input has {Z.shape[1]}")
    if Z.shape[2] < 1:
        raise ValueError("input has no frames")
    if not np.all(np.isfinite(Z)):
        raise ValueError("input spectrogram contains non-finite values")

    Zt = np.ascontiguousarray(Z.transpose(2, 0, 1))  # (T, B, F)
    x = Zt * model.feature_scale
    inputs, gates_l, cells_l, hidden_l = [], [], [], []
    for layer in model.layers:
        inputs.append(x)
        gates, cells, hidden = kernels.lstm_forward(x @ layer.W + layer.b, layer.U)
        gates_l.append(gates)
        cells_l.append(cells)
        hidden_l.append(hidden)
        x = hidden
    logits = x @ model.dense_W + model.dense_b
    mask = 0.5 * (1.0 + np.tanh(0.5 * logits))
    # est2 = Z - M*Z, then est1 = Z - est2: one of the two subtractions is
    # exact (Sterbenz), so est1 + est2 == Z holds bitwise in floating point
    est2 = Zt - mask * Zt
    est1 = Zt - est2
    tape = ForwardTape(inputs, gates_l, cells_l, hidden_l, mask, Zt)

    out = [a.transpose(1, 2, 0) for a in (mask, est1, est2)]
    if squeeze:
        out = [a[0] for a in out]
    return ForwardResult(out[0], out[1], out[2], tape)


def backward(model, tape, grad_est1, grad_est2):
    """Parameter gradients (``name -> array``) for upstream dL/d est1, dL/d est2."""
    g1, _ = _as_batch(grad_est1)
    g2, _ = _as_batch(grad_est2)
    if len(tape.gates) != len(model.layers) or tape.mask.shape[2] != model.n_freq:
        raise ValueError("tape was not produced by this model")
    g1 = g1.transpose(2, 0, 1)
    g2 = g2.transpose(2, 0, 1)
    if g1.shape != tape.mask.shape or g2.shape != tape.mask.shape:
        raise ValueError("upstream gradient shape does not match the tape")

    mask = tape.mask
    d_mask = (g1 - g2) * tape.mixture
    d_logits = d_mask * mask * (1.0 - mask)
    T, B, F = d_logits.shape
    top = tape.hidden[-1]
    grads = {
        "dense.W": top.reshape(-1, top.shape[2]).T @ d_logits.reshape(-1, F),
        "dense.b": d_logits.sum(axis=(0, 1)),
    }
    dh = d_logits @ model.dense_W.T
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        H = layer.hidden_dim
        dz = kernels.lstm_backward(tape.gates[k], tape.cells[k], layer.U, dh)
        x = tape.inputs[k]
        h_prev = np.concatenate([np.zeros((1, B, H)), tape.hidden[k][:-1]], axis=0)
        dz2 = dz.reshape(-1, 4 * H)
        grads[f"lstm{k}.W"] = x.reshape(-1, x.shape[2]).T @ dz2
        grads[f"lstm{k}.U"] = h_prev.reshape(-1, H).T @ dz2
        grads[f"lstm{k}.b"] = dz2.sum(axis=0)
        if k > 0:
            dh = dz @ layer.W.T
    return {name: grads[name] for name in model.parameters()}


def global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_global_norm(grads, max_norm):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = model.parameters()
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()},
                   0, learning_rate, beta1, beta2, eps)


def adam_step(model, grads, state):
    """In-place bias-corrected Adam update; returns ``(model, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1.0 - b2 ** state.step) / (1.0 - b1 ** state.step)
    for name, p in model.parameters().items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr_t * m / (np.sqrt(v) + state.eps)
    return model, state


# ---------------------------------------------------------------------------
# Checkpoint container:
#   MAGIC | uint32 version | uint64 header length | UTF-8 JSON header | tensors
# Each tensor is stored as little-endian float64, in the order and with the
# shapes listed in the header.

def save_model(model, state, path):
    tensors = [(f"param/{k}", v) for k, v in model.parameters().items()]
    if state is not None:
        tensors += [(f"adam_m/{k}", v) for k, v in state.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in state.v.items()]
    header = {
        "hidden_sizes": model.hidden_sizes,
        "n_freq": model.n_freq,
        "feature_scale": model.feature_scale,
        "configs": model.configs,
        "adam": None if state is None else {
            "step": state.step, "learning_rate": state.learning_rate,
            "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    """Return ``(model, adam_state)``; the state is None if none was saved."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    offset = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", data, offset)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset += 12
    try:
        header = json.loads(data[offset:offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    offset += hlen

    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor data ({name})")
        tensors[name] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")

    try:
        layers = [LstmLayerParams(tensors[f"param/lstm{k}.W"], tensors[f"param/lstm{k}.U"],
                                  tensors[f"param/lstm{k}.b"])
                  for k in range(len(header["hidden_sizes"]))]
        model = SeparationModel(layers, tensors["param/dense.W"], tensors["param/dense.b"],
                                header["feature_scale"], header["configs"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tensor {exc}") from exc
    state = None
    if header["adam"] is not None:
        names = list(model.parameters())
        state = AdamState({k: tensors[f"adam_m/{k}"] for k in names},
                          {k: tensors[f"adam_v/{k}"] for k in names}, **header["adam"])
    return model, state
