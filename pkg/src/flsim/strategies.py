"""Client updates and server aggregation for FedAvg, FedPer, Per-FedAvg and FedMeta-Per.

Every ``client_update_*`` is a pure function of its inputs and ``seed``; the
caller owns any state that persists between rounds (the personal tensors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import ChunkDataset
from .errors import ClientSkip, ConfigError, IncompatibleParamsError, ProtocolError
from .model import ParamSet, SplitModel, load_base, load_full
from .tensor_nn import Batch, loss_and_grad, sgd_step

STRATEGIES = ("fedavg", "fedper", "perfedavg", "fedmetaper")
HESSIAN_MODES = ("full_hvp", "first_order")
# Strategies whose clients keep personalization layers between rounds.
STATEFUL = ("fedper", "fedmetaper")
WIRE_TAG = {"fedavg": "full", "perfedavg": "full", "fedper": "base", "fedmetaper": "base"}


@dataclass(frozen=True)
class Hyper:
    lr_local: float = 0.05
    lr_meta: float = 0.01
    local_epochs: int = 2
    batch_size: int = 16
    hessian_mode: str = "first_order"

    def __post_init__(self):
        # Zero step sizes are allowed: they are the fixed-point and reduction cases.
        for name in ("lr_local", "lr_meta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"must be a finite number >= 0, got {v!r}", f"hyper.{name}")
        for name in ("local_epochs", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"must be an integer >= 1, got {v!r}", f"hyper.{name}")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ConfigError(f"must be one of {HESSIAN_MODES}, got {self.hessian_mode!r}", "hyper.hessian_mode")


@dataclass
class ClientUpdate:
    client_id: int
    payload: ParamSet
    num_samples: int
    train_loss: float
    meta: dict = field(default_factory=dict)


def _batch(data: ChunkDataset, idx) -> Batch:
    return Batch(data.inputs[idx], data.labels[idx])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def meta_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint (support, query) halves of consecutive shuffled double-batches; remainder dropped."""
    perm = rng.permutation(n)
    step = 2 * batch_size
    return [(perm[i:i + batch_size], perm[i + batch_size:i + step]) for i in range(0, n - step + 1, step)]


def _restrict(grads: dict, names) -> dict:
    return {k: grads[k] for k in names}


def _sgd_epochs(model: SplitModel, params: dict, data: ChunkDataset, hyper: Hyper, seed: int):
    rng = np.random.default_rng(seed)
    train_loss = 0.0
    for _ in range(hyper.local_epochs):
        total, seen = 0.0, 0
        for idx in epoch_batches(len(data), hyper.batch_size, rng):
            loss, grads = loss_and_grad(params, model.specs, _batch(data, idx))
            params = sgd_step(params, grads, hyper.lr_local)
            total += loss * len(idx)
            seen += len(idx)
        train_loss = total / seen
    return params, train_loss


def client_update_fedavg(model: SplitModel, data: ChunkDataset, hyper: Hyper, seed: int,
                         client_id: int = 0) -> ClientUpdate:
    """Local mini-batch SGD on all parameters; the full set goes back to the server."""
    if len(data) == 0:
        raise ClientSkip(client_id, "no training data")
    params, train_loss = _sgd_epochs(model, dict(model.params), data, hyper, seed)
    return ClientUpdate(client_id, ParamSet(params, "full"), len(data), train_loss)


def aggregate_weighted(updates: list[ClientUpdate]) -> ParamSet:
    """Sample-count weighted mean of the payloads, consumed in ascending client_id order.

    Computed as ``ref + sum_i w_i * (theta_i - ref)`` in float64 with ``ref``
    the first payload, so identical payloads come back bit-for-bit.
    """
    if not updates:
        raise ProtocolError("nothing to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    tags = {u.payload.partition_tag for u in ordered}
    if len(tags) != 1:
        raise ProtocolError(f"mixed partition tags in one round: {sorted(tags)}")
    ref = ordered[0].payload
    for u in ordered[1:]:
        if list(u.payload.entries) != list(ref.entries):
            raise ProtocolError(f"client {u.client_id} sent tensors {list(u.payload.entries)}, "
                                f"expected {list(ref.entries)}")
        for k, v in u.payload.entries.items():
            if v.shape != ref.entries[k].shape or v.dtype != ref.entries[k].dtype:
                raise ProtocolError(f"client {u.client_id}: {k} has dims {v.shape} {v.dtype}")
    total = sum(u.num_samples for u in ordered)
    if total <= 0 or any(u.num_samples <= 0 for u in ordered):
        raise ProtocolError("sample counts must be positive")
    weights = [u.num_samples / total for u in ordered]
    out = {}
    for k, r in ref.entries.items():
        base = r.astype(np.float64)
        acc = base.copy()
        for w, u in zip(weights[1:], ordered[1:]):
            acc += w * (u.payload.entries[k].astype(np.float64) - base)
        out[k] = acc.astype(r.dtype)
    return ParamSet(out, ref.partition_tag)


def client_update_fedper(model: SplitModel, base_in: ParamSet, data: ChunkDataset, hyper: Hyper,
                         seed: int, client_id: int = 0) -> tuple[ClientUpdate, ParamSet]:
    """Install the server's base layers, train everything jointly, return base only.

    ``model`` carries this client's retained personal tensors.
    """
    local = load_base(model, base_in)
    if len(data) == 0:
        raise ClientSkip(client_id, "no training data")
    params, train_loss = _sgd_epochs(local, dict(local.params), data, hyper, seed)
    base = ParamSet(_restrict(params, local.base_names()), "base")
    personal = ParamSet(_restrict(params, local.personal_names()), "personal")
    return ClientUpdate(client_id, base, len(data), train_loss), personal


def server_round_fedper(base: ParamSet, updates: list[ClientUpdate]) -> ParamSet:
    for u in updates:
        if u.payload.partition_tag != "base":
            raise ProtocolError(f"client {u.client_id} sent a {u.payload.partition_tag} set to a base-only server")
        if list(u.payload.entries) != list(base.entries):
            raise ProtocolError(f"client {u.client_id} sent tensors outside the base partition")
    return aggregate_weighted(updates)


GradFn = Callable[[dict, object], dict]


def meta_gradient(grad_fn: GradFn, params: dict, support, query, alpha: float,
                  hessian_mode: str, names=None) -> dict:
    """MAML meta-gradient ``(I - alpha * H_support(w)) grad_query(w - alpha * grad_support(w))``.

    ``names`` restricts the inner step, the query gradient and the Hessian to a
    subset of tensors (the others stay fixed). The Hessian-vector product is a
    central difference of the support gradient along the query gradient.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}", "hyper.lr_meta")
    if hessian_mode not in HESSIAN_MODES:
        raise ConfigError(f"unknown hessian_mode {hessian_mode!r}", "hyper.hessian_mode")
    names = list(params) if names is None else list(names)
    if alpha == 0:
        return _restrict(grad_fn(params, query), names)
    g_support = _restrict(grad_fn(params, support), names)
    adapted = sgd_step(params, g_support, alpha)
    v = _restrict(grad_fn(adapted, query), names)
    if hessian_mode == "first_order":
        return v
    norm = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                         for g in v.values()))
    if norm == 0:
        return v
    dtype = next(iter(params.values())).dtype
    delta = (1e-5 if dtype == np.float64 else 1e-3) / max(norm, 1e-12)
    plus = {k: (p + dtype.type(delta) * v[k]) if k in v else p for k, p in params.items()}
    minus = {k: (p - dtype.type(delta) * v[k]) if k in v else p for k, p in params.items()}
    g_plus, g_minus = grad_fn(plus, support), grad_fn(minus, support)
    out = {}
    for k in names:
        hv = (g_plus[k].astype(np.float64) - g_minus[k].astype(np.float64)) / (2 * delta)
        out[k] = (v[k].astype(np.float64) - alpha * hv).astype(dtype)
    return out


def network_grad_fn(model: SplitModel) -> GradFn:
    return lambda params, batch: loss_and_grad(params, model.specs, batch)[1]


def perfedavg_meta_gradient(model: SplitModel, support: Batch, query: Batch, alpha: float,
                            hessian_mode: str, names=None) -> dict:
    if len(support) == 0 or len(query) == 0:
        raise ClientSkip(0, "empty support or query batch")
    return meta_gradient(network_grad_fn(model), model.params, support, query, alpha, hessian_mode, names)


def _meta_epochs(model: SplitModel, params: dict, data: ChunkDataset, hyper: Hyper, seed: int,
                 client_id: int, meta_names, plain_names):
    """Meta-gradient steps on ``meta_names`` plus plain query-batch SGD on ``plain_names``."""
    if len(data) < 2 * hyper.batch_size:
        raise ClientSkip(client_id, f"{len(data)} training samples < 2 * batch_size ({2 * hyper.batch_size})")
    grad_fn = network_grad_fn(model)
    rng = np.random.default_rng(seed)
    train_loss = 0.0
    for _ in range(hyper.local_epochs):
        total, seen = 0.0, 0
        for s_idx, q_idx in meta_batches(len(data), hyper.batch_size, rng):
            support, query = _batch(data, s_idx), _batch(data, q_idx)
            grads = meta_gradient(grad_fn, params, support, query, hyper.lr_meta, hyper.hessian_mode, meta_names)
            loss, g_query = loss_and_grad(params, model.specs, query)
            grads.update(_restrict(g_query, plain_names))
            params = sgd_step(params, grads, hyper.lr_local)
            total += loss * len(q_idx)
            seen += len(q_idx)
        train_loss = total / seen
    return params, train_loss


def client_update_perfedavg(model: SplitModel, params_in: ParamSet, data: ChunkDataset, hyper: Hyper,
                            seed: int, client_id: int = 0) -> ClientUpdate:
    local = load_full(model, params_in)
    params, train_loss = _meta_epochs(local, dict(local.params), data, hyper, seed, client_id,
                                      list(local.params), [])
    return ClientUpdate(client_id, ParamSet(params, "full"), len(data), train_loss)


def client_update_fedmetaper(model: SplitModel, base_in: ParamSet, data: ChunkDataset, hyper: Hyper,
                             seed: int, client_id: int = 0) -> tuple[ClientUpdate, ParamSet]:
    """Meta-learned base layers, plain-SGD personal layers; only the base set leaves the client."""
    local = load_base(model, base_in)
    params, train_loss = _meta_epochs(local, dict(local.params), data, hyper, seed, client_id,
                                      local.base_names(), local.personal_names())
    base = ParamSet(_restrict(params, local.base_names()), "base")
    personal = ParamSet(_restrict(params, local.personal_names()), "personal")
    return ClientUpdate(client_id, base, len(data), train_loss), personal


def personalize(model: SplitModel, params_in: ParamSet, data: ChunkDataset, steps: int, lr: float,
                names=None) -> SplitModel:
    """``steps`` full-batch SGD steps on ``data``; ``names`` limits which tensors move."""
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}", "eval_personalize_steps")
    if params_in.partition_tag != "full":
        raise IncompatibleParamsError("personalize expects a full parameter set")
    local = load_full(model, params_in)
    params = dict(local.params)
    if steps == 0 or len(data) == 0:
        return local
    batch = Batch(data.inputs, data.labels)
    names = list(params) if names is None else list(names)
    for _ in range(steps):
        _, grads = loss_and_grad(params, local.specs, batch)
        params = sgd_step(params, _restrict(grads, names), lr)
    return local.with_params(params)
