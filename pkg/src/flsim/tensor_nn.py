"""Minimal numeric core: layer specs, forward/backward, loss, SGD, gradient check.

Tensors are plain ``numpy.ndarray`` values (row-major, float32 or float64).
Parameters travel as ordered ``dict`` objects mapping ``"<layer>.<weight|bias>"``
to arrays, in layer order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ArchitectureError, ContractError, NumericError, PrecisionError, ShapeError

NUM_CLASSES = 2
LAYER_KINDS = ("frame_diff", "conv2d", "relu", "flatten", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (0, 0)
    stride: tuple[int, int] = (1, 1)
    # (top, bottom, left, right); the string "same" is resolved by validate_specs
    padding: tuple[int, int, int, int] | str = (0, 0, 0, 0)
    in_features: int = 0
    out_features: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "dense")


def conv2d(in_channels, out_channels, kernel=3, stride=1, padding=0) -> LayerSpec:
    kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if isinstance(padding, int):
        padding = (padding,) * 4
    elif not isinstance(padding, str):
        padding = tuple(padding)
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def dense(in_features, out_features) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def frame_diff_layer() -> LayerSpec:
    return LayerSpec("frame_diff")


@dataclass
class Batch:
    inputs: np.ndarray  # [n, frames, height, width]
    labels: np.ndarray  # [n] ints in {0, 1}

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise ShapeError(f"batch inputs must be [n, F, H, W], got {self.inputs.shape}")
        n = self.inputs.shape[0]
        if n < 1 or self.labels.shape != (n,):
            raise ShapeError(f"batch has {n} inputs but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
            raise ShapeError(f"labels must lie in [0, {NUM_CLASSES})")

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class GradReport:
    max_rel_err: float
    worst_param_index: int
    analytic: float
    numeric: float
    worst_param_name: str = ""
    coords_checked: int = 0
    steps_reduced: int = 0
    kinks_skipped: int = 0

    def __str__(self):
        return (f"max_rel_err={self.max_rel_err:.3e} worst_param_index={self.worst_param_index} "
                f"({self.worst_param_name}) analytic={self.analytic:.12e} numeric={self.numeric:.12e} "
                f"coords_checked={self.coords_checked} steps_reduced={self.steps_reduced} "
                f"kinks_skipped={self.kinks_skipped}")


def _conv_out(size, pad_total, k, stride):
    return (size + pad_total - k) // stride + 1


def validate_specs(specs: Sequence[LayerSpec], input_dims) -> tuple[list[LayerSpec], list[tuple]]:
    """Resolve "same" padding and check every layer against the running shape.

    ``input_dims`` is the per-sample ``(F, H, W)``. Returns the resolved specs
    and the per-sample output dims after each layer.
    """
    if not specs:
        raise ArchitectureError("empty layer stack")
    shape = tuple(int(d) for d in input_dims)
    if len(shape) != 3 or min(shape) < 1:
        raise ArchitectureError(f"input dims must be (F, H, W) with positive extents, got {input_dims}")
    resolved, shapes = [], []
    for idx, spec in enumerate(specs):
        where = f"layer {idx} ({spec.kind})"
        if spec.kind not in LAYER_KINDS:
            raise ArchitectureError(f"{where}: unknown layer kind")
        if spec.kind == "frame_diff":
            if idx != 0:
                raise ArchitectureError(f"{where}: frame_diff may only be the first layer")
            if shape[0] < 2:
                raise ArchitectureError(f"{where}: needs at least 2 frames, got {shape[0]}")
            shape = (shape[0] - 1,) + shape[1:]
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise ArchitectureError(f"{where}: expects a [C, H, W] input, got {shape}")
            if spec.in_channels != shape[0]:
                raise ArchitectureError(f"{where}: in_channels={spec.in_channels} but input has {shape[0]}")
            kh, kw = spec.kernel
            sh, sw = spec.stride
            if min(kh, kw, sh, sw, spec.out_channels) < 1:
                raise ArchitectureError(f"{where}: kernel, stride and out_channels must be >= 1")
            pad = spec.padding
            if pad == "same":
                pads = []
                for size, k, s in ((shape[1], kh, sh), (shape[2], kw, sw)):
                    total = max((math.ceil(size / s) - 1) * s + k - size, 0)
                    pads += [total // 2, total - total // 2]
                pad = tuple(pads)
                spec = replace(spec, padding=pad)
            if len(pad) != 4 or min(pad) < 0:
                raise ArchitectureError(f"{where}: padding must be four non-negative integers")
            ho = _conv_out(shape[1], pad[0] + pad[1], kh, sh)
            wo = _conv_out(shape[2], pad[2] + pad[3], kw, sw)
            if ho < 1 or wo < 1:
                raise ArchitectureError(f"{where}: output extent {ho}x{wo} is empty")
            shape = (spec.out_channels, ho, wo)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ArchitectureError(f"{where}: expects a flat input, got {shape}; add flatten")
            if spec.in_features != shape[0]:
                raise ArchitectureError(f"{where}: in_features={spec.in_features} but input has {shape[0]}")
            if spec.out_features < 1:
                raise ArchitectureError(f"{where}: out_features must be >= 1")
            shape = (spec.out_features,)
        resolved.append(spec)
        shapes.append(shape)
    if shapes[-1] != (NUM_CLASSES,):
        raise ArchitectureError(f"final output must be ({NUM_CLASSES},), got {shapes[-1]}")
    return resolved, shapes


def param_shapes(specs: Sequence[LayerSpec]) -> dict[str, tuple]:
    shapes = {}
    for idx, spec in enumerate(specs):
        if spec.kind == "conv2d":
            shapes[f"{idx}.weight"] = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
            shapes[f"{idx}.bias"] = (spec.out_channels,)
        elif spec.kind == "dense":
            shapes[f"{idx}.weight"] = (spec.out_features, spec.in_features)
            shapes[f"{idx}.bias"] = (spec.out_features,)
    return shapes


def init_params(specs: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases; draws happen in layer order."""
    params = {}
    for name, shape in param_shapes(specs).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape[1], shape[0]
        s = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-s, s, size=shape).astype(dtype)
    return params


def frame_diff(chunk: np.ndarray) -> np.ndarray:
    """Consecutive-frame differences: ``out[:, t] = chunk[:, t + 1] - chunk[:, t]``."""
    if chunk.ndim != 4 or chunk.shape[1] < 2:
        raise ArchitectureError(f"frame_diff needs [n, F>=2, H, W], got {chunk.shape}")
    return chunk[:, 1:] - chunk[:, :-1]


def _check_params(params, specs):
    expected = param_shapes(specs)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"layer {name.split('.')[0]}: missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeError(f"layer {name.split('.')[0]}: {name} has dims {params[name].shape}, expected {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise ShapeError(f"unexpected parameters {sorted(extra)}")


@dataclass
class ForwardCache:
    specs: list
    params: dict
    inputs: list  # activation entering each layer
    logits: np.ndarray
    param_ids: dict = field(default_factory=dict)


def forward(params: dict, specs: Sequence[LayerSpec], batch: Batch):
    _check_params(params, specs)
    dtype = next(iter(params.values())).dtype if params else np.float64
    x = np.ascontiguousarray(batch.inputs, dtype=dtype)
    inputs = []
    for idx, spec in enumerate(specs):
        inputs.append(x)
        where = f"layer {idx} ({spec.kind})"
        if spec.kind == "frame_diff":
            x = frame_diff(x)
        elif spec.kind == "conv2d":
            if x.ndim != 4 or x.shape[1] != spec.in_channels:
                raise ShapeError(f"{where}: input dims {x.shape[1:]} do not match in_channels={spec.in_channels}")
            if isinstance(spec.padding, str):
                raise ShapeError(f"{where}: unresolved padding {spec.padding!r}; run validate_specs first")
            pt, pb, pl, pr = spec.padding
            x = kernels.conv2d_forward(np.ascontiguousarray(x), params[f"{idx}.weight"],
                                       params[f"{idx}.bias"], *spec.stride, pt, pb, pl, pr)
        elif spec.kind == "relu":
            x = np.maximum(x, 0)
        elif spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif spec.kind == "dense":
            if x.ndim != 2 or x.shape[1] != spec.in_features:
                raise ShapeError(f"{where}: input dims {x.shape[1:]} do not match in_features={spec.in_features}")
            x = x @ params[f"{idx}.weight"].T + params[f"{idx}.bias"]
    if x.ndim != 2 or x.shape[1] != NUM_CLASSES:
        raise ShapeError(f"network output has dims {x.shape[1:]}, expected ({NUM_CLASSES},)")
    cache = ForwardCache(list(specs), dict(params), inputs, x,
                         {k: (id(v), v.ctypes.data) for k, v in params.items()})
    return x, cache


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_softmax_ce(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] < 1:
        raise ShapeError("empty batch")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    logp = _log_softmax(logits.astype(np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_square(logits: np.ndarray, labels) -> float:
    """Mean over the batch of 0.5 * ||logits - onehot(label)||^2."""
    labels = np.asarray(labels, dtype=np.int64)
    target = np.eye(NUM_CLASSES)[labels]
    diff = logits.astype(np.float64) - target
    return float(0.5 * (diff * diff).sum(axis=1).mean())


LOSSES = {"ce": loss_softmax_ce, "square": loss_square}


def _dlogits(logits, labels, loss):
    n = logits.shape[0]
    onehot = np.eye(NUM_CLASSES, dtype=logits.dtype)[labels]
    if loss == "ce":
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        return (probs - onehot) / n
    if loss == "square":
        return (logits - onehot) / n
    raise ValueError(f"unknown loss {loss!r}")


def backward(cache: ForwardCache, labels, params: dict | None = None, loss: str = "ce") -> dict:
    """Gradients of the mean batch loss w.r.t. every parameter.

    Passing ``params`` lets the call verify the cache was produced from those
    exact tensors; anything else raises :class:`ContractError`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (cache.logits.shape[0],):
        raise ContractError(f"cache holds {cache.logits.shape[0]} samples, got {labels.shape[0]} labels")
    if params is not None:
        if set(params) != set(cache.params):
            raise ContractError("stale cache: parameter names differ from those seen by forward")
        for k, v in params.items():
            if v is not cache.params[k] and not np.array_equal(v, cache.params[k]):
                raise ContractError(f"stale cache: parameter {k} changed since forward")
    for k, v in cache.params.items():
        if (id(v), v.ctypes.data) != cache.param_ids[k]:
            raise ContractError(f"stale cache: parameter {k} was replaced")
    grads = {}
    g = _dlogits(cache.logits, labels, loss)
    for idx in range(len(cache.specs) - 1, -1, -1):
        spec, x = cache.specs[idx], cache.inputs[idx]
        need_input_grad = idx > 0
        if spec.kind == "dense":
            w = cache.params[f"{idx}.weight"]
            grads[f"{idx}.weight"] = g.T @ x
            grads[f"{idx}.bias"] = g.sum(axis=0)
            if need_input_grad:
                g = g @ w
        elif spec.kind == "conv2d":
            pt, pb, pl, pr = spec.padding
            dx, dw, db = kernels.conv2d_backward(x, cache.params[f"{idx}.weight"],
                                                 np.ascontiguousarray(g), *spec.stride, pt, pb, pl, pr)
            grads[f"{idx}.weight"] = dw
            grads[f"{idx}.bias"] = db
            g = dx
        elif spec.kind == "relu":
            g = g * (x > 0)
        elif spec.kind == "flatten":
            g = g.reshape(x.shape)
        elif spec.kind == "frame_diff":
            pass  # input gradient is never needed
    return {k: grads[k] for k in cache.params}


def loss_and_grad(params: dict, specs, batch: Batch, loss: str = "ce"):
    logits, cache = forward(params, specs, batch)
    return LOSSES[loss](logits, batch.labels), backward(cache, batch.labels, loss=loss)


def loss_only(params: dict, specs, batch: Batch, loss: str = "ce") -> float:
    logits, _ = forward(params, specs, batch)
    return LOSSES[loss](logits, batch.labels)


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """Return ``params - lr * grads`` per tensor; tensors absent from ``grads`` are kept."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    out = {}
    for name, p in params.items():
        if name not in grads:
            out[name] = p
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: parameter dims {p.shape} but gradient dims {g.shape}")
        out[name] = (p - p.dtype.type(lr) * g.astype(p.dtype, copy=False)) if lr else p.copy()
    return out


def flatten_params(params: dict) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params.values()]) if params else np.zeros(0)


def unflatten_like(vec: np.ndarray, like: dict) -> dict:
    out, pos = {}, 0
    for name, p in like.items():
        out[name] = vec[pos:pos + p.size].reshape(p.shape).astype(p.dtype, copy=False)
        pos += p.size
    return out


def _loss_and_pattern(params, specs, batch, loss):
    """Loss plus a packed bitmap of every ReLU input's sign."""
    logits, cache = forward(params, specs, batch)
    masks = [cache.inputs[i].ravel() > 0 for i, sp in enumerate(specs) if sp.kind == "relu"]
    pattern = np.packbits(np.concatenate(masks)).tobytes() if masks else b""
    return LOSSES[loss](logits, batch.labels), pattern


def grad_check(specs, params: dict, batch: Batch, eps: float = 1e-5, loss: str = "ce",
               max_coords: int = 200, seed: int = 0, min_eps: float = 1e-8) -> GradReport:
    """Compare backward() against central differences on a coordinate sample.

    Checks every bias coordinate plus up to ``max_coords`` weight coordinates
    drawn without replacement from a generator seeded with ``seed``. A central
    difference is only meaningful when no ReLU changes state between
    ``theta - eps`` and ``theta + eps``; when one does, the step is divided by
    ten (down to ``min_eps``) and coordinates that still straddle a kink are
    counted in ``kinks_skipped`` instead of being compared.
    """
    if any(p.dtype != np.float64 for p in params.values()):
        raise PrecisionError("grad_check requires 64-bit parameters")
    batch = Batch(np.asarray(batch.inputs, dtype=np.float64), batch.labels)
    _, analytic = loss_and_grad(params, specs, batch, loss)
    names = list(params)
    offsets = np.cumsum([0] + [params[k].size for k in names])
    bias_coords, weight_coords = [], []
    for i, k in enumerate(names):
        span = range(offsets[i], offsets[i + 1])
        (bias_coords if k.endswith(".bias") else weight_coords).extend(span)
    rng = np.random.default_rng(seed)
    if len(weight_coords) > max_coords:
        weight_coords = sorted(rng.choice(weight_coords, size=max_coords, replace=False).tolist())
    coords = sorted(weight_coords + bias_coords)

    flat_a = flatten_params(analytic)
    work = {k: v.copy() for k, v in params.items()}
    _, base_pattern = _loss_and_pattern(work, specs, batch, loss)
    report = GradReport(0.0, coords[0] if coords else 0, 0.0, 0.0, coords_checked=0)
    first = True
    for c in coords:
        t = int(np.searchsorted(offsets, c, side="right") - 1)
        name = names[t]
        view = work[name].reshape(-1)
        local = c - offsets[t]
        orig = view[local]
        h, num = eps, None
        while h >= min_eps:
            view[local] = orig + h
            f_plus, pat_plus = _loss_and_pattern(work, specs, batch, loss)
            view[local] = orig - h
            f_minus, pat_minus = _loss_and_pattern(work, specs, batch, loss)
            view[local] = orig
            if pat_plus == base_pattern and pat_minus == base_pattern:
                num = (f_plus - f_minus) / (2 * h)
                break
            h /= 10
        if num is None:
            report.kinks_skipped += 1
            continue
        if h < eps:
            report.steps_reduced += 1
        report.coords_checked += 1
        ana = float(flat_a[c])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        if first or rel > report.max_rel_err:
            report.max_rel_err, report.worst_param_index = rel, int(c)
            report.analytic, report.numeric, report.worst_param_name = ana, num, name
            first = False
    return report
