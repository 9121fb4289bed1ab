"""Split model: base layers shared through the server, personalization layers kept per client."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flpk
from .errors import ArchitectureError, ConfigError, CorruptFileError, IncompatibleParamsError
from .tensor_nn import conv2d, dense, flatten, frame_diff_layer, init_params, relu, validate_specs

PARTITIONS = ("base", "personal", "full")

# Per-sample input dims each architecture is built for.
ARCH_INPUT_DIMS = {"mini": (16, 8, 8), "diffgated53": (16, 32, 32)}


def _mini_specs():
    return [
        frame_diff_layer(),
        conv2d(15, 8, 3, stride=1, padding=1), relu(),
        conv2d(8, 8, 3, stride=2, padding=1), relu(),
        flatten(),
        dense(128, 32),
        dense(32, 2),
    ]


def _diffgated53_specs():
    chans = [15, 16, 24, 32, 32, 32]
    strides = [1, 2, 1, 2, 1]
    specs = [frame_diff_layer()]
    for cin, cout, s in zip(chans, chans[1:], strides):
        specs += [conv2d(cin, cout, 3, stride=s, padding=1), relu()]
    specs += [flatten(), dense(32 * 8 * 8, 128), relu(), dense(128, 32), relu(), dense(32, 2)]
    return specs


ARCHS = {"mini": _mini_specs, "diffgated53": _diffgated53_specs}


def layer_index(name: str) -> int:
    return int(name.split(".", 1)[0])


@dataclass
class ParamSet:
    entries: dict[str, np.ndarray]
    partition_tag: str

    def __post_init__(self):
        if self.partition_tag not in PARTITIONS:
            raise ValueError(f"unknown partition tag {self.partition_tag!r}")
        keys = [(layer_index(k), k.split(".", 1)[1] != "weight", k) for k in self.entries]
        if keys != sorted(keys):
            raise ValueError("ParamSet entries must be in layer order")

    def names(self) -> list[str]:
        return list(self.entries)

    def dtype(self):
        return next(iter(self.entries.values())).dtype if self.entries else np.dtype(np.float32)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.entries.items()}, self.partition_tag)

    def bitwise_equal(self, other: "ParamSet") -> bool:
        return (self.partition_tag == other.partition_tag
                and list(self.entries) == list(other.entries)
                and all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                        for a, b in zip(self.entries.values(), other.entries.values())))


@dataclass
class SplitModel:
    specs: list
    params: dict[str, np.ndarray]
    split_index: int
    input_dims: tuple = ()

    def __post_init__(self):
        validate_split(self.specs, self.split_index)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def base_names(self) -> list[str]:
        return [k for k in self.params if layer_index(k) < self.split_index]

    def personal_names(self) -> list[str]:
        return [k for k in self.params if layer_index(k) >= self.split_index]

    def with_params(self, params: dict) -> "SplitModel":
        return SplitModel(self.specs, dict(params), self.split_index, self.input_dims)

    def copy(self) -> "SplitModel":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "SplitModel":
        return self.with_params({k: v.astype(dtype) for k, v in self.params.items()})


def validate_split(specs, split_index: int) -> None:
    if not 0 < split_index < len(specs):
        raise ArchitectureError(f"split_index {split_index} leaves an empty partition")
    for i, spec in enumerate(specs):
        if i < split_index and spec.kind == "dense":
            raise ArchitectureError(f"layer {i} (dense) precedes the split at {split_index}")
        if i >= split_index and spec.kind == "conv2d":
            raise ArchitectureError(f"layer {i} (conv2d) follows the split at {split_index}")
    if specs[split_index].kind != "dense":
        raise ArchitectureError(f"split_index {split_index} must point at the first dense layer")


def default_split_index(specs) -> int:
    for i, spec in enumerate(specs):
        if spec.kind == "dense":
            return i
    raise ArchitectureError("model has no dense layer to split at")


def build_model(arch_name: str, seed: int, dtype=np.float32) -> SplitModel:
    if arch_name not in ARCHS:
        raise ConfigError(f"unknown architecture {arch_name!r}; choose from {sorted(ARCHS)}", "arch")
    dims = ARCH_INPUT_DIMS[arch_name]
    specs, _ = validate_specs(ARCHS[arch_name](), dims)
    params = init_params(specs, np.random.default_rng(seed), dtype=dtype)
    return SplitModel(specs, params, default_split_index(specs), dims)


def split_params(model: SplitModel) -> tuple[ParamSet, ParamSet]:
    base = {k: model.params[k] for k in model.base_names()}
    personal = {k: model.params[k] for k in model.personal_names()}
    return ParamSet(base, "base"), ParamSet(personal, "personal")


def merge(*psets: ParamSet) -> ParamSet:
    entries = {}
    for ps in psets:
        for k, v in ps.entries.items():
            if k in entries:
                raise IncompatibleParamsError(f"tensor {k} present in more than one set")
            entries[k] = v
    ordered = dict(sorted(entries.items(), key=lambda kv: (layer_index(kv[0]), kv[0].split(".", 1)[1] != "weight")))
    return ParamSet(ordered, "full")


def full_params(model: SplitModel) -> ParamSet:
    return ParamSet(dict(model.params), "full")


def _check_compatible(model: SplitModel, pset: ParamSet, names: list[str]) -> None:
    if list(pset.entries) != names:
        raise IncompatibleParamsError(f"expected tensors {names}, got {list(pset.entries)}")
    for k in names:
        a, b = model.params[k], pset.entries[k]
        if a.shape != b.shape:
            raise IncompatibleParamsError(f"{k}: dims {b.shape} do not match model dims {a.shape}")
        if a.dtype != b.dtype:
            raise IncompatibleParamsError(f"{k}: element type {b.dtype} does not match model {a.dtype}")


def load_base(model: SplitModel, base: ParamSet) -> SplitModel:
    """New model with ``base`` installed; the input model is never modified."""
    if base.partition_tag != "base":
        raise IncompatibleParamsError(f"expected a base set, got {base.partition_tag}")
    _check_compatible(model, base, model.base_names())
    params = dict(model.params)
    params.update(base.entries)
    return model.with_params(params)


def load_personal(model: SplitModel, personal: ParamSet) -> SplitModel:
    if personal.partition_tag != "personal":
        raise IncompatibleParamsError(f"expected a personal set, got {personal.partition_tag}")
    _check_compatible(model, personal, model.personal_names())
    params = dict(model.params)
    params.update(personal.entries)
    return model.with_params(params)


def load_full(model: SplitModel, full: ParamSet) -> SplitModel:
    _check_compatible(model, full, list(model.params))
    return model.with_params(full.entries)


def serialize(pset: ParamSet) -> bytes:
    return flpk.pack(pset.entries, pset.partition_tag, pset.dtype())


def deserialize(data: bytes) -> ParamSet:
    tag, _, entries = flpk.unpack(data)
    if tag not in PARTITIONS:
        raise CorruptFileError(f"container holds a {tag} payload, not parameters", 6)
    try:
        return ParamSet(entries, tag)
    except ValueError as exc:
        raise CorruptFileError(str(exc), flpk._HEADER.size) from None
