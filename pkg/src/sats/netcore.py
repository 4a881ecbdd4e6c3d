"""Tiny fully-convolutional segmentation network with hand-written backprop.

Three 3x3 conv layers (tanh) followed by a 1x1 classifier head.  Images are
batched as ``(N, H, W, 3)`` uint8 or float arrays; probability maps come back
as ``(N, H, W, C)``.  Computation follows the parameter dtype: training runs
in float32, gradient checks in float64.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datamodel import IGNORE_INDEX

CONV_LAYERS = ("conv1", "conv2", "conv3")
PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "head.w", "head.b")
HEAD_PARAMS = ("head.w", "head.b")

CHECKPOINT_MAGIC = b"SATSCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class NetworkParams:
    """Named parameter tensors.

    Conv weights are ``(3, 3, C_in, C_out)``; the head weight is ``(C, F)`` so
    that row ``k`` belongs to class ``k``.
    """

    tensors: Dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.tensors["head.w"].dtype.type

    @property
    def num_outputs(self) -> int:
        return self.tensors["head.w"].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.tensors["head.w"].shape[1]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return [n for n in PARAM_ORDER if n in self.tensors]

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def map(self, fn) -> "NetworkParams":
        return NetworkParams({k: fn(v) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.names()])

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equal(self, other: "NetworkParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n in self.names())


def init_params(num_outputs: int, seed: int = 0, hidden: int = 16, features: int = 16,
                dtype=np.float32) -> NetworkParams:
    rng = np.random.default_rng(seed)
    chans = [3, hidden, hidden, features]
    t = {}
    for i, name in enumerate(CONV_LAYERS):
        cin, cout = chans[i], chans[i + 1]
        t[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(9 * cin), size=(3, 3, cin, cout))
        t[f"{name}.b"] = np.zeros(cout)
    t["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(features), size=(num_outputs, features))
    t["head.b"] = np.zeros(num_outputs)
    return NetworkParams({k: v.astype(dtype) for k, v in t.items()})


def expand_head(params: NetworkParams, num_known: int) -> NetworkParams:
    """Append a zero-initialised unknown row to a K-class head."""
    if params.num_outputs != num_known:
        raise ValueError(f"head already has {params.num_outputs} outputs, expected K={num_known}")
    out = params.copy()
    w, b = out.tensors["head.w"], out.tensors["head.b"]
    out.tensors["head.w"] = np.concatenate([w, np.zeros((1, w.shape[1]), dtype=w.dtype)], axis=0)
    out.tensors["head.b"] = np.concatenate([b, np.zeros(1, dtype=b.dtype)])
    return out


# ---------------------------------------------------------------------------
# forward / backward

def normalize_images(images, dtype=np.float64) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.dtype == np.uint8:
        return (x.astype(dtype) / dtype(127.5) - dtype(1.0)).astype(dtype, copy=False)
    return x.astype(dtype, copy=False)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n,h,w,c,3,3
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def _conv_input_grad(dz: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a same-padded conv input: correlate with the flipped kernel."""
    flipped = wt[::-1, ::-1].transpose(0, 1, 3, 2)  # 3,3,cout,cin
    return _im2col(dz) @ flipped.reshape(-1, flipped.shape[-1])


def _check_finite(arr, layer):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite activation in layer {layer}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params: NetworkParams, images, keep=False):
    x = normalize_images(images, params.dtype)
    n, h, w, _ = x.shape
    cache = []
    a = x
    for name in CONV_LAYERS:
        wt = params[f"{name}.w"]
        cols = _im2col(a)
        z = cols @ wt.reshape(-1, wt.shape[-1]) + params[f"{name}.b"]
        out = np.tanh(z)
        _check_finite(out, name)
        if keep:
            cache.append((cols, a.shape, out))
        a = out.reshape(n, h, w, -1)
    feats = a.reshape(n * h * w, -1)
    logits = feats @ params["head.w"].T + params["head.b"]
    _check_finite(logits, "head")
    return logits.reshape(n, h, w, -1), feats, cache


def logits(params: NetworkParams, images) -> np.ndarray:
    """Pre-softmax outputs ``(N, H, W, C)``."""
    return _forward(params, images)[0]


def forward(params: NetworkParams, images) -> np.ndarray:
    """Softmax probabilities; a single ``(H, W, 3)`` image yields ``(H, W, C)``."""
    single = np.asarray(images).ndim == 3
    probs = softmax(_forward(params, images)[0])
    return probs[0] if single else probs


def predict(params: NetworkParams, images) -> np.ndarray:
    """Argmax over every output channel (lowest index wins ties)."""
    single = np.asarray(images).ndim == 3
    out = np.argmax(_forward(params, images)[0], axis=-1).astype(np.uint8)
    return out[0] if single else out


def loss_and_grad(params: NetworkParams, images, labels, pixel_weights, return_nll=False):
    """Weighted pixel cross-entropy ``-sum_p w_p log p(y_p)`` and its gradient.

    ``pixel_weights`` must already be zero on ignore pixels; callers build it
    so that each loss term is a mean over its own counted pixels.  With
    ``return_nll`` the per-pixel negative log-likelihood map is appended.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    wts = np.asarray(pixel_weights, dtype=np.float64).reshape(labels.shape)
    c = params.num_outputs
    valid = (labels != IGNORE_INDEX) & (wts != 0)
    bad = valid & (labels >= c)
    if bad.any():
        raise ValueError(f"label value {int(labels[bad][0])} invalid for a {c}-class head")
    grads = params.zeros_like()
    if not valid.any():
        return (0.0, grads, np.zeros(labels.shape)) if return_nll else (0.0, grads)

    lg, feats, cache = _forward(params, images, keep=True)
    n, h, w, _ = lg.shape
    lg = lg.reshape(-1, c)
    y = np.where(valid, labels, 0).reshape(-1).astype(np.int64)
    wv = np.where(valid, wts, 0.0).reshape(-1).astype(params.dtype)
    z = lg - lg.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(y.size), y] - logsum
    loss = float(-(wv * logp_true).sum())
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")

    dlogits = np.exp(z - logsum[:, None])
    dlogits[np.arange(y.size), y] -= 1.0
    dlogits *= wv[:, None]

    grads.tensors["head.w"] = dlogits.T @ feats
    grads.tensors["head.b"] = dlogits.sum(axis=0)
    dact = dlogits @ params["head.w"]
    for li in range(len(CONV_LAYERS) - 1, -1, -1):
        name = CONV_LAYERS[li]
        cols, in_shape, out = cache[li]
        dz = dact * (1.0 - out * out)
        wt = params[f"{name}.w"]
        grads.tensors[f"{name}.w"] = (cols.T @ dz).reshape(wt.shape)
        grads.tensors[f"{name}.b"] = dz.sum(axis=0)
        if li > 0:
            dact = _conv_input_grad(dz.reshape(n, h, w, -1), wt)
    if return_nll:
        return loss, grads, np.where(valid, -logp_true.reshape(labels.shape), 0.0)
    return loss, grads


def mean_weights(labels, scale=1.0) -> np.ndarray:
    """Per-pixel weights averaging over non-ignore pixels, times ``scale``."""
    labels = np.asarray(labels)
    valid = labels != IGNORE_INDEX
    count = int(valid.sum())
    if count == 0:
        return np.zeros(labels.shape)
    return valid * (np.asarray(scale, dtype=np.float64) / count)


def supervised_loss_and_grad(params, images, labels):
    """Source cross-entropy averaged over non-ignore pixels."""
    return loss_and_grad(params, images, labels, mean_weights(labels))


def weighted_target_loss_and_grad(params, images, pseudo_labels, q_t):
    """Cross-entropy on pseudo labels scaled by the confidence weight ``q_t``.

    ``q_t`` may be a scalar or one value per image in the batch.
    """
    labels = np.asarray(pseudo_labels)
    q = np.asarray(q_t, dtype=np.float64)
    if np.any((q < 0) | (q > 1)):
        raise ValueError(f"q_t must lie in [0, 1], got {q_t}")
    if q.ndim == 1:
        q = q[:, None, None]
    return loss_and_grad(params, images, labels, mean_weights(labels, np.broadcast_to(q, labels.shape)))


# ---------------------------------------------------------------------------
# teacher and optimiser

def ema_update(teacher: NetworkParams, student: NetworkParams, alpha: float) -> NetworkParams:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if teacher.names() != student.names() or any(
            teacher[n].shape != student[n].shape for n in teacher.names()):
        raise ValueError("teacher and student parameter shapes differ")
    return NetworkParams({n: (alpha * teacher[n] + (1.0 - alpha) * student[n]).astype(teacher[n].dtype)
                          for n in teacher.names()})


@dataclass
class OptimState:
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    step: int = 0
    m: Optional[NetworkParams] = None
    v: Optional[NetworkParams] = None

    @classmethod
    def for_params(cls, params: NetworkParams, **kw) -> "OptimState":
        st = cls(**kw)
        st.m = params.zeros_like()
        st.v = params.zeros_like()
        return st

    def lr_for(self, name: str) -> float:
        lr = self.lr_head if name in HEAD_PARAMS else self.lr_backbone
        if self.warmup_steps > 0:
            lr *= min(1.0, (self.step + 1) / self.warmup_steps)
        return lr


def optimizer_step(params: NetworkParams, grads: NetworkParams, state: OptimState):
    """One AdamW step; returns new ``(params, state)`` without mutating inputs."""
    if not grads.all_finite():
        raise NonFiniteError("non-finite gradient passed to optimizer_step")
    if state.m is None:
        state = OptimState.for_params(params, **{k: getattr(state, k) for k in (
            "lr_backbone", "lr_head", "weight_decay", "beta1", "beta2", "eps", "warmup_steps")})
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for n in params.names():
        g = grads[n]
        m = b1 * state.m[n] + (1 - b1) * g
        v = b2 * state.v[n] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        lr = state.lr_for(n)
        step = lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * params[n])
        new_p[n] = (params[n] - step).astype(params[n].dtype)
        new_m[n], new_v[n] = m, v
    new_state = OptimState(state.lr_backbone, state.lr_head, state.weight_decay, b1, b2, state.eps,
                           state.warmup_steps, t, NetworkParams(new_m), NetworkParams(new_v))
    return NetworkParams(new_p), new_state


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(params: NetworkParams, meta: Optional[dict] = None) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(params[n].shape), "dtype": params[n].dtype.newbyteorder("<").str} for n in params.names()],
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for n in params.names():
        buf.write(np.ascontiguousarray(params[n], dtype=params[n].dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


def save_checkpoint(params: NetworkParams, path, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def load_checkpoint(path) -> Tuple[NetworkParams, dict]:
    data = Path(path).read_bytes()
    magic, _, rest = data.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    head, _, body = rest.partition(b"\n")
    header = json.loads(head)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    tensors, off = {}, 0
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(body, dtype=spec["dtype"], count=count, offset=off)
        tensors[spec["name"]] = arr.reshape(spec["shape"]).astype(arr.dtype.newbyteorder("="))
        off += count * arr.itemsize
    if off != len(body):
        raise ValueError(f"{path}: trailing or missing tensor bytes")
    return NetworkParams(tensors), header["meta"]
