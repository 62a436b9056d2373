"""
Differentiable kernels for the diarization decoder, written against numpy
with hand-derived backward passes.

Arithmetic is float64 throughout; checkpoints store float32. Every kernel
works on arrays with leading batch axes so a whole minibatch of sequences
moves through one call.

LSTM gate layout along the 4H axis: input, forget, cell candidate, output.
"""
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
CHECKPOINT_FORMAT = 'msdiar-checkpoint'
CHECKPOINT_VERSION = 1
MAX_GRAD_CHECK_PARAMETERS = 10_000


# ---------------------------------------------------------------------------
# Elementwise kernels
# ---------------------------------------------------------------------------

def sigmoid(x):
    return expit(x)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, pre_activation):
    return grad * (pre_activation > 0)


def softmax(logits, axis=-1):
    """Numerically stable softmax (max subtracted before exponentiation)"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(grad, probs, axis=-1):
    return probs * (grad - np.sum(grad * probs, axis=axis, keepdims=True))


def bce_loss(predictions, targets):
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]"""
    p = np.clip(np.asarray(predictions, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(targets, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def bce_logit_grad(logits, targets):
    """
    Gradient of bce_loss(sigmoid(logits), targets) with respect to the logits.
    Zero where the clamp is active, matching the clamped loss exactly.
    """
    p = expit(logits)
    inside = (p > BCE_EPS) & (p < 1 - BCE_EPS)
    return (p - targets) * inside / p.size


# ---------------------------------------------------------------------------
# Linear and convolution
# ---------------------------------------------------------------------------

def linear_forward(x, weight, bias):
    """y = x W^T + b over the last axis; weight is (out, in)"""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}")
    return x @ weight.T + bias


def linear_backward(grad, x, weight):
    flat_grad = grad.reshape(-1, grad.shape[-1])
    flat_x = x.reshape(-1, x.shape[-1])
    return grad @ weight, flat_grad.T @ flat_x, flat_grad.sum(axis=0)


def conv1d_forward(x, weight, bias):
    """
    Valid cross-correlation along the last (bin) axis.

    x is (..., channels_in, bins), weight is (channels_out, channels_in, width);
    the result is (..., channels_out, bins - width + 1).
    """
    x = np.asarray(x, dtype=np.float64)
    channels_out, channels_in, width = weight.shape
    if x.ndim < 2 or x.shape[-2] != channels_in:
        raise ShapeError(f"conv1d expects {channels_in} input channels, got shape {x.shape}")
    if bias.shape != (channels_out,):
        raise ShapeError(f"conv1d bias must have shape ({channels_out},), got {bias.shape}")
    if width > x.shape[-1]:
        raise ShapeError(f"kernel width {width} exceeds {x.shape[-1]} bins")
    lead = x.shape[:-2]
    flat = x.reshape(-1, channels_in, x.shape[-1])
    windows = sliding_window_view(flat, width, axis=-1)
    out = np.einsum('nilw,oiw->nol', windows, weight, optimize=True) + bias[:, None]
    return out.reshape(*lead, channels_out, out.shape[-1])


def conv1d_backward(grad, x, weight, input_grad=True):
    channels_out, channels_in, width = weight.shape
    flat_x = x.reshape(-1, channels_in, x.shape[-1])
    flat_grad = grad.reshape(-1, channels_out, grad.shape[-1])
    windows = sliding_window_view(flat_x, width, axis=-1)
    weight_grad = np.einsum('nol,nilw->oiw', flat_grad, windows, optimize=True)
    bias_grad = flat_grad.sum(axis=(0, 2))
    if not input_grad:
        return None, weight_grad, bias_grad
    dx = np.zeros_like(flat_x)
    out_bins = flat_grad.shape[-1]
    for w in range(width):
        dx[:, :, w:w + out_bins] += np.einsum('oi,nol->nil', weight[:, :, w], flat_grad, optimize=True)
    return dx.reshape(x.shape), weight_grad, bias_grad


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def lstm_forward(x, w_input, w_hidden, bias, reverse=False):
    """
    Single-direction LSTM over x of shape (batch, time, features).
    Returns hidden states (batch, time, hidden) and the cache for backward.
    """
    batch, steps, features = x.shape
    hidden = w_hidden.shape[1]
    if w_input.shape != (4 * hidden, features):
        raise ShapeError(f"LSTM input weight must be {(4 * hidden, features)}, got {w_input.shape}")

    projected = x @ w_input.T + bias
    gates = np.empty((batch, steps, 4 * hidden))
    cells = np.empty((batch, steps, hidden))
    outputs = np.empty((batch, steps, hidden))
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = projected[:, t] + h @ w_hidden.T
        i = expit(z[:, :hidden])
        f = expit(z[:, hidden:2 * hidden])
        g = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = expit(z[:, 3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        cells[:, t] = c
        outputs[:, t] = h
    cache = (x, w_input, w_hidden, gates, cells, outputs, reverse)
    return outputs, cache


def lstm_backward(grad_outputs, cache):
    x, w_input, w_hidden, gates, cells, outputs, reverse = cache
    batch, steps, _ = x.shape
    hidden = w_hidden.shape[1]
    grad_z = np.empty((batch, steps, 4 * hidden))
    grad_w_hidden = np.zeros_like(w_hidden)
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    zeros = np.zeros((batch, hidden))

    order = range(steps) if reverse else range(steps - 1, -1, -1)
    previous = (lambda t: t + 1) if reverse else (lambda t: t - 1)
    for t in order:
        p = previous(t)
        has_previous = 0 <= p < steps
        c_prev = cells[:, p] if has_previous else zeros
        h_prev = outputs[:, p] if has_previous else zeros
        i = gates[:, t, :hidden]
        f = gates[:, t, hidden:2 * hidden]
        g = gates[:, t, 2 * hidden:3 * hidden]
        o = gates[:, t, 3 * hidden:]
        tanh_c = np.tanh(cells[:, t])

        dh = grad_outputs[:, t] + dh_next
        dc = dc_next + dh * o * (1 - tanh_c ** 2)
        dz = np.concatenate([
            dc * g * i * (1 - i),
            dc * c_prev * f * (1 - f),
            dc * i * (1 - g ** 2),
            dh * tanh_c * o * (1 - o),
        ], axis=1)
        grad_z[:, t] = dz
        grad_w_hidden += dz.T @ h_prev
        dh_next = dz @ w_hidden
        dc_next = dc * f

    flat_dz = grad_z.reshape(-1, 4 * hidden)
    grad_w_input = flat_dz.T @ x.reshape(-1, x.shape[-1])
    grad_bias = flat_dz.sum(axis=0)
    grad_x = grad_z @ w_input
    return grad_x, grad_w_input, grad_w_hidden, grad_bias


def lstm_names(layer, direction):
    prefix = f"lstm{layer}_{direction}"
    return f"{prefix}_w_input", f"{prefix}_w_hidden", f"{prefix}_bias"


def bilstm_forward(seq, params, num_layers):
    """
    Stacked bidirectional LSTM. Each layer concatenates its forward and
    backward hidden states; the next layer reads that concatenation.
    Accepts (time, features) or (batch, time, features).
    """
    x = np.asarray(seq, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"BiLSTM expects a non-empty (batch, time, features) sequence, got {x.shape}")
    caches = []
    for layer in range(num_layers):
        forward, forward_cache = lstm_forward(x, *(params[n] for n in lstm_names(layer, 'fwd')))
        backward, backward_cache = lstm_forward(
            x, *(params[n] for n in lstm_names(layer, 'bwd')), reverse=True
        )
        caches.append((forward_cache, backward_cache))
        x = np.concatenate([forward, backward], axis=-1)
    return (x[0] if squeeze else x), caches


def bilstm_backward(grad, caches):
    grads = {}
    for layer in reversed(range(len(caches))):
        forward_cache, backward_cache = caches[layer]
        hidden = forward_cache[2].shape[1]
        dx_fwd, *fwd = lstm_backward(grad[..., :hidden], forward_cache)
        dx_bwd, *bwd = lstm_backward(grad[..., hidden:], backward_cache)
        grads.update(zip(lstm_names(layer, 'fwd'), fwd))
        grads.update(zip(lstm_names(layer, 'bwd'), bwd))
        grad = dx_fwd + dx_bwd
    return grad, grads


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MsddShape:
    num_scales: int
    emb_dim: int
    conv_channels: int = 16
    fc_hidden: int = 256
    lstm_hidden: int = 256
    lstm_layers: int = 2

    def tensor_shapes(self):
        """Ordered (name, shape) table of every trainable tensor"""
        k, c, f, h = self.num_scales, self.conv_channels, self.fc_hidden, self.lstm_hidden
        shapes = [
            ('conv1_weight', (c, 3 * k, 1)),
            ('conv1_bias', (c,)),
            ('conv2_weight', (c, c, 1)),
            ('conv2_bias', (c,)),
            ('fc1_weight', (f, c)),
            ('fc1_bias', (f,)),
            ('fc2_weight', (k, f)),
            ('fc2_bias', (k,)),
        ]
        for layer in range(self.lstm_layers):
            features = 2 * k if layer == 0 else 2 * h
            for direction in ('fwd', 'bwd'):
                w_input, w_hidden, bias = lstm_names(layer, direction)
                shapes += [(w_input, (4 * h, features)), (w_hidden, (4 * h, h)), (bias, (4 * h,))]
        shapes += [('out_weight', (2, 2 * h)), ('out_bias', (2,))]
        return shapes


def _fan_in(name, shape, model_shape):
    if name.startswith('lstm'):
        features = shape[1] if name.endswith('w_input') else None
        if features is None:
            layer = int(name[4])
            features = 2 * model_shape.num_scales if layer == 0 else 2 * model_shape.lstm_hidden
        return features + model_shape.lstm_hidden
    if name.startswith('conv'):
        weight_shape = dict(model_shape.tensor_shapes())[name.replace('bias', 'weight')]
        return weight_shape[1] * weight_shape[2]
    weight_shape = dict(model_shape.tensor_shapes())[name.replace('bias', 'weight')]
    return weight_shape[1]


@dataclass
class MsddParameters:
    shape: MsddShape
    tensors: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, shape, seed):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); LSTM biases 0 with forget gate +1"""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, tensor_shape in shape.tensor_shapes():
            if name.startswith('lstm') and name.endswith('bias'):
                bias = np.zeros(tensor_shape)
                bias[shape.lstm_hidden:2 * shape.lstm_hidden] = 1.0
                tensors[name] = bias
                continue
            bound = 1.0 / np.sqrt(_fan_in(name, tensor_shape, shape))
            tensors[name] = rng.uniform(-bound, bound, size=tensor_shape)
        return cls(shape, tensors)

    @classmethod
    def zeros(cls, shape):
        return cls(shape, {name: np.zeros(s) for name, s in shape.tensor_shapes()})

    def copy(self):
        return MsddParameters(self.shape, {name: value.copy() for name, value in self.tensors.items()})

    def num_parameters(self):
        return sum(value.size for value in self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def check_compatible(self, num_scales, emb_dim):
        if (self.shape.num_scales, self.shape.emb_dim) != (num_scales, emb_dim):
            raise CheckpointError(
                'shape_mismatch',
                f"parameters expect K={self.shape.num_scales}, N_e={self.shape.emb_dim}; "
                f"input has K={num_scales}, N_e={emb_dim}",
            )


def checkpoint_paths(stem):
    stem = Path(stem)
    return stem.with_name(stem.name + '.manifest'), stem.with_name(stem.name + '.weights')


def save_checkpoint(stem, params, hyper=None, seed=None):
    manifest_path, payload_path = checkpoint_paths(stem)
    table = []
    payload = []
    offset = 0
    for name, tensor_shape in params.shape.tensor_shapes():
        values = np.ascontiguousarray(params[name], dtype='<f4')
        table.append({'name': name, 'shape': list(tensor_shape), 'offset': offset})
        payload.append(values.tobytes())
        offset += values.nbytes
    manifest = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'shape': asdict(params.shape),
        'hyper': hyper or {},
        'seed': seed,
        'tensors': table,
        'payload_bytes': offset,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + '\n')
    payload_path.write_bytes(b''.join(payload))
    return manifest_path, payload_path


def load_checkpoint(stem):
    """Returns (MsddParameters, manifest dict)"""
    manifest_path, payload_path = checkpoint_paths(stem)
    for path in (manifest_path, payload_path):
        if not path.exists():
            raise CheckpointError('missing_file', f"missing checkpoint file {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError('corrupt_manifest', f"{manifest_path}: {exc}") from exc
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError('corrupt_manifest', f"{manifest_path}: not a checkpoint manifest")
    if manifest.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(
            'unsupported_version', f"{manifest_path}: unsupported version {manifest.get('version')!r}"
        )

    shape = MsddShape(**manifest['shape'])
    payload = payload_path.read_bytes()
    expected = 4 * sum(int(np.prod(s)) for _, s in shape.tensor_shapes())
    if len(payload) != expected or manifest.get('payload_bytes') != expected:
        raise CheckpointError(
            'payload_length_mismatch',
            f"payload length mismatch: expected {expected} bytes, found {len(payload)} in {payload_path}",
        )
    tensors = {}
    table = {entry['name']: entry for entry in manifest['tensors']}
    for name, tensor_shape in shape.tensor_shapes():
        entry = table.get(name)
        if entry is None or tuple(entry['shape']) != tuple(tensor_shape):
            raise CheckpointError('manifest_mismatch', f"{manifest_path}: bad entry for tensor {name}")
        count = int(np.prod(tensor_shape))
        values = np.frombuffer(payload, dtype='<f4', count=count, offset=entry['offset'])
        tensors[name] = values.astype(np.float64).reshape(tensor_shape)
    return MsddParameters(shape, tensors), manifest


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state, hyper=AdamHyper()):
    """Bias-corrected Adam update, applied in place in sorted tensor-name order"""
    state.step += 1
    correction1 = 1 - hyper.beta1 ** state.step
    correction2 = 1 - hyper.beta2 ** state.step
    for name in sorted(grads):
        grad = grads[name]
        if params[name].shape != grad.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {params[name].shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = hyper.beta1 * (m if m is not None else 0.0) + (1 - hyper.beta1) * grad
        v = hyper.beta2 * (v if v is not None else 0.0) + (1 - hyper.beta2) * grad ** 2
        state.first_moment[name] = m
        state.second_moment[name] = v
        params[name] = params[name] - hyper.learning_rate * (m / correction1) / (
            np.sqrt(v / correction2) + hyper.eps
        )
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    num_checked: int
    nonfinite: list
    tolerance: float

    @property
    def passed(self):
        return not self.nonfinite and self.max_relative_error < self.tolerance


def grad_check(loss_and_grads, params, tolerance=1e-5, step=1e-4, abs_floor=1e-3):
    """
    Compare analytic gradients against central finite differences.

    `loss_and_grads(params)` returns (loss, grads) where grads maps the same
    names as `params`. The relative error of an entry is
    |analytic - numeric| / max(|analytic| + |numeric|, abs_floor).
    """
    total = sum(np.size(value) for value in params.values())
    if total > MAX_GRAD_CHECK_PARAMETERS:
        raise ShapeError(f"grad_check is limited to {MAX_GRAD_CHECK_PARAMETERS} parameters, got {total}")

    _, analytic = loss_and_grads(params)
    worst, worst_name, nonfinite = 0.0, '', []
    for name in sorted(params):
        value = params[name]
        grad = np.asarray(analytic[name], dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            nonfinite.append(name)
            continue
        for index in np.ndindex(value.shape):
            original = value[index]
            value[index] = original + step
            plus, _ = loss_and_grads(params)
            value[index] = original - step
            minus, _ = loss_and_grads(params)
            value[index] = original
            numeric = (plus - minus) / (2 * step)
            if not np.isfinite(numeric):
                nonfinite.append(f"{name}{list(index)}")
                continue
            exact = grad[index]
            error = abs(exact - numeric) / max(abs(exact) + abs(numeric), abs_floor)
            if error > worst:
                worst, worst_name = error, f"{name}{list(index)}"
    report = GradCheckReport(worst, worst_name, total, nonfinite, tolerance)
    logger.debug("grad check: max relative error %.3e at %s", worst, worst_name)
    return report
