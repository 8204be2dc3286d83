"""Minimal dense kernel: feed-forward stacks with manual backpropagation,
layer normalization, inverted dropout, softmax cross-entropy, Adam/SGD, a
finite-difference gradient checker, and a simple binary checkpoint format.

Parameters live in flat dicts mapping names like ``"attend/W0"`` to numpy
arrays; gradients mirror the same keys. Training uses float32, gradient
checking float64.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DANN1"
LN_EPS = 1e-6


class NnError(Exception):
    pass


class CheckpointError(NnError):
    pass


class NonFiniteGradient(NnError):
    pass


def glorot_uniform(rng, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def layer_norm_forward(x, gain, shift, eps=LN_EPS):
    """Row-wise standardization with learned gain/shift.

    y = gain * (x - mean) / sqrt(var + eps) + shift, per row.
    """
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = gain * xhat + shift
    return y, (xhat, inv, gain)


def layer_norm_backward(cache, dy):
    xhat, inv, gain = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dshift = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dshift


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dlogits).

    dlogits = (softmax - onehot) / batch_size.
    """
    n = logits.shape[0]
    p = softmax(logits, axis=1)
    eps = np.finfo(p.dtype).tiny
    loss = -np.log(p[np.arange(n), labels] + eps).mean()
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


class _Cache:
    """Forward-pass values needed by backward; single use."""

    __slots__ = ("inputs", "pre_relu", "ln", "drop_mask", "x_in", "spent")

    def __init__(self):
        self.inputs = []
        self.pre_relu = []
        self.ln = []
        self.drop_mask = None
        self.x_in = None
        self.spent = False


class FeedForward:
    """ReLU stack with optional per-hidden-layer layer norm and input dropout.

    dims = [in, hidden..., out]; the output layer is linear. Layer norm, when
    enabled, sits between each hidden affine transform and its rectifier.
    Params are stored under ``"<prefix>/W<i>"``, ``"/b<i>"``, ``"/g<i>"``,
    ``"/s<i>"``.
    """

    def __init__(self, dims, dropout=0.0, layer_norm=False, prefix="ff"):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.dims = list(dims)
        self.dropout = float(dropout)
        self.layer_norm = bool(layer_norm)
        self.prefix = prefix

    @property
    def n_layers(self):
        return len(self.dims) - 1

    def key(self, kind, i):
        return "%s/%s%d" % (self.prefix, kind, i)

    def param_names(self):
        names = []
        for i in range(self.n_layers):
            names.append(self.key("W", i))
            names.append(self.key("b", i))
            if self.layer_norm and i < self.n_layers - 1:
                names.append(self.key("g", i))
                names.append(self.key("s", i))
        return names

    def init_params(self, rng, dtype=np.float32):
        params = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.dims[i], self.dims[i + 1]
            params[self.key("W", i)] = glorot_uniform(rng, fan_in, fan_out, dtype)
            params[self.key("b", i)] = np.zeros(fan_out, dtype=dtype)
            if self.layer_norm and i < self.n_layers - 1:
                params[self.key("g", i)] = np.ones(fan_out, dtype=dtype)
                params[self.key("s", i)] = np.zeros(fan_out, dtype=dtype)
        return params

    def forward(self, params, x, train=False, rng=None):
        """Row-wise forward pass. Returns (y, cache).

        In train mode, inverted dropout with this network's rate is applied
        to the input, so inference needs no rescaling.
        """
        if x.shape[-1] != self.dims[0]:
            raise NnError(
                "%s: input dim %d != expected %d" % (self.prefix, x.shape[-1], self.dims[0])
            )
        cache = _Cache()
        cache.x_in = x
        h = x
        if train and self.dropout > 0.0:
            if rng is None:
                raise NnError("dropout in train mode needs an rng")
            keep = 1.0 - self.dropout
            mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
            cache.drop_mask = mask
            h = h * mask
        for i in range(self.n_layers):
            cache.inputs.append(h)
            z = h @ params[self.key("W", i)] + params[self.key("b", i)]
            if i < self.n_layers - 1:
                if self.layer_norm:
                    z, ln_cache = layer_norm_forward(
                        z, params[self.key("g", i)], params[self.key("s", i)]
                    )
                    cache.ln.append(ln_cache)
                cache.pre_relu.append(z)
                h = np.maximum(z, 0.0)
            else:
                h = z
        return h, cache

    def backward(self, params, cache, dy):
        """Exact gradients of forward. Returns (dx, grads dict)."""
        if cache.spent:
            raise NnError("backward called twice on the same cache")
        cache.spent = True
        grads = {}
        dh = dy
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                dz = dh * (cache.pre_relu[i] > 0)
                if self.layer_norm:
                    dz, dg, ds = layer_norm_backward(cache.ln[i], dz)
                    grads[self.key("g", i)] = dg
                    grads[self.key("s", i)] = ds
            else:
                dz = dh
            h_in = cache.inputs[i]
            grads[self.key("W", i)] = h_in.reshape(-1, h_in.shape[-1]).T @ dz.reshape(
                -1, dz.shape[-1]
            )
            grads[self.key("b", i)] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            dh = dz @ params[self.key("W", i)].T
        if cache.drop_mask is not None:
            dh = dh * cache.drop_mask
        return dh, grads


def accumulate(total, grads):
    """Sum grads into total in place (missing keys are created)."""
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g
    return total


class Adam:
    """Adam with bias correction. State is per-parameter first/second moments."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient for %r" % name)
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            params[name] -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                params[name].dtype
            )


class Sgd:
    """Plain SGD, exposed for ablation runs."""

    def __init__(self, lr=0.001):
        self.lr = lr

    def step(self, params, grads):
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient for %r" % name)
            params[name] -= (self.lr * g).astype(params[name].dtype)


def make_optimizer(name, lr):
    if name == "adam":
        return Adam(lr=lr)
    if name == "sgd":
        return Sgd(lr=lr)
    raise ValueError("unknown optimizer: %r" % name)


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    failures: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def gradient_check(loss_and_grads, params, tol=1e-4, step=1e-5):
    """Compare analytic gradients against central finite differences.

    loss_and_grads(params) must return (scalar loss, grads dict) and be
    deterministic across calls (freeze any dropout rng inside the closure).
    Elements with both magnitudes below 1e-6 are compared absolutely,
    everything else relatively. Works in the params' dtype; use float64.
    """
    _, analytic = loss_and_grads(params)

    def loss_only():
        return loss_and_grads(params)[0]

    per_param = {}
    failures = []
    for name in sorted(params):
        arr = params[name]
        a_flat = np.asarray(analytic.get(name, np.zeros_like(arr))).reshape(-1)
        worst = 0.0
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            hi = loss_only()
            arr.flat[i] = orig - step
            lo = loss_only()
            arr.flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(a_flat[i])
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) / scale if scale > 1e-6 else abs(a - numeric)
            if err > worst:
                worst = err
            if err > tol:
                failures.append((name, i, a, numeric, err))
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_err, per_param=per_param, failures=failures, tol=tol)


def save_checkpoint(path, header, arrays, extra=b"", magic=MAGIC):
    """Binary container: 5-byte magic, little-endian u32 header length, JSON
    header, raw float32 arrays in declared order, then an opaque extra
    section.

    `arrays` is a list of (name, array); shapes are recorded in the header
    under "arrays" so the file is self-describing.
    """
    header = dict(header)
    header["arrays"] = [[name, list(arr.shape)] for name, arr in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        fh.write(extra)


def load_checkpoint(path, magic=MAGIC):
    """Returns (header, arrays dict, extra bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(magic)] != magic:
        raise CheckpointError(
            "%s: bad magic (not a %s checkpoint)" % (path, magic.decode("ascii"))
        )
    off = len(magic)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError("%s: corrupt header: %s" % (path, exc)) from None
    off += hlen
    arrays = {}
    for name, shape in header.get("arrays", []):
        count = int(np.prod(shape)) if shape else 1
        end = off + 4 * count
        if end > len(data):
            raise CheckpointError("%s: truncated array %r" % (path, name))
        arrays[name] = np.frombuffer(data[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    return header, arrays, data[off:]
