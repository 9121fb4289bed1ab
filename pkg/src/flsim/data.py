"""Synthetic surveillance chunks and the client topologies of the three experiments.

Each sample is a stack of frames showing a bright square blob drifting over a
flat background. Label 1 ("Fight") blobs move fast, label 0 ("NonFight")
blobs barely move, so the label is carried by frame-to-frame motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import flpk
from .errors import ConfigError, CorruptFileError, SplitError
from .seeding import derive_seed

NOISE_SIGMA = 0.05
FIGHT_SPEED = 2.0
NONFIGHT_SPEED = 0.25

FIXTURES = {
    "table1": [(900, 900), (900, 900)],
    "table2": [(641, 27), (655, 1305), (504, 468)],
    "table3": [(570, 402), (151, 49), (1019, 777), (695, 1207)],
}

FIXTURE_LABELS = {
    "table1": "Balanced, RWF dataset",
    "table2": "Imbalanced, RWF dataset",
    "table3": "Imbalanced, RWF & Crowd Violence datasets",
}


@dataclass(frozen=True)
class Skew:
    bg_offset: float = 0.0
    blob_radius: int = 1
    speed_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.bg_offset < 1:
            raise ConfigError(f"bg_offset must be in [0, 1), got {self.bg_offset}", "skew.bg_offset")
        if self.blob_radius < 1:
            raise ConfigError(f"blob_radius must be >= 1, got {self.blob_radius}", "skew.blob_radius")
        if not self.speed_scale > 0:
            raise ConfigError(f"speed_scale must be positive, got {self.speed_scale}", "skew.speed_scale")


@dataclass(frozen=True)
class ClientSpec:
    client_id: int
    fight_count: int
    nonfight_count: int
    skew: Skew = field(default_factory=Skew)

    def __post_init__(self):
        if self.client_id < 1:
            raise ConfigError(f"client_id must be >= 1, got {self.client_id}", "client_id")
        if self.fight_count < 0 or self.nonfight_count < 0 or self.fight_count + self.nonfight_count < 1:
            raise ConfigError("client needs a non-negative count per class and at least one sample",
                              f"clients[{self.client_id}]")

    @property
    def total(self):
        return self.fight_count + self.nonfight_count


def client_skew(client_id: int) -> Skew:
    """Feature skew assigned to a topology client."""
    return Skew(bg_offset=0.1 * client_id, blob_radius=1 + client_id % 3, speed_scale=1 + 0.25 * client_id)


@dataclass
class ChunkDataset:
    inputs: np.ndarray  # [n, F, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64 in {0, 1}
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ChunkDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ChunkDataset(self.inputs[idx], self.labels[idx], dict(self.meta))

    def counts(self) -> tuple[int, int]:
        """(fight, nonfight) sample counts."""
        fight = int(self.labels.sum())
        return fight, len(self) - fight


def chunks_per_video(frame_count: int, chunk_size: int) -> int:
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1", "chunk_size")
    return max(frame_count, 0) // chunk_size


def _check_dims(dims, radius):
    f, h, w = dims
    if f < 2 or h < 4 or w < 4:
        raise ConfigError(f"dims must be (F>=2, H>=4, W>=4), got {tuple(dims)}", "dims")
    if 2 * radius + 1 > min(h, w):
        raise ConfigError(f"blob of radius {radius} does not fit a {h}x{w} frame", "skew.blob_radius")


def _reflect(x, lo, hi):
    span = hi - lo
    if span <= 0:
        return np.full_like(x, lo)
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def draw_tracks(rng: np.random.Generator, labels: np.ndarray, skew: Skew, dims):
    """Blob centres ``[n, F, 2]`` and per-frame step lengths ``[n, F-1]``.

    Step lengths are ``|N(0, speed_scale * base)|`` with base 2.0 px for label 1
    and 0.25 px for label 0; directions are uniform; walls reflect.
    """
    f, h, w = dims
    n = len(labels)
    r = skew.blob_radius
    lo = np.array([r, r], dtype=np.float64)
    hi = np.array([h - 1 - r, w - 1 - r], dtype=np.float64)
    start = rng.uniform(lo, hi, size=(n, 2))
    sigma = np.where(labels == 1, FIGHT_SPEED, NONFIGHT_SPEED) * skew.speed_scale
    steps = np.abs(rng.normal(0.0, 1.0, size=(n, f - 1))) * sigma[:, None]
    angles = rng.uniform(0.0, 2 * math.pi, size=(n, f - 1))
    moves = np.stack([steps * np.sin(angles), steps * np.cos(angles)], axis=-1)
    free = np.concatenate([start[:, None, :], start[:, None, :] + np.cumsum(moves, axis=1)], axis=1)
    centres = np.stack([_reflect(free[..., 0], lo[0], hi[0]), _reflect(free[..., 1], lo[1], hi[1])], axis=-1)
    return centres, steps


def render(rng: np.random.Generator, centres: np.ndarray, skew: Skew, dims) -> np.ndarray:
    f, h, w = dims
    r = skew.blob_radius
    ci = np.floor(centres + 0.5).astype(np.int64)  # [n, F, 2]
    rows = np.abs(np.arange(h)[None, None, :] - ci[..., 0:1]) <= r  # [n, F, H]
    cols = np.abs(np.arange(w)[None, None, :] - ci[..., 1:2]) <= r  # [n, F, W]
    blob = rows[..., :, None] & cols[..., None, :]
    frames = np.where(blob, 1.0, skew.bg_offset)
    frames = frames + rng.normal(0.0, NOISE_SIGMA, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_client_data(spec: ClientSpec, dims, seed: int) -> ChunkDataset:
    """``fight_count`` label-1 samples followed by ``nonfight_count`` label-0 samples."""
    dims = tuple(int(d) for d in dims)
    _check_dims(dims, spec.skew.blob_radius)
    rng = np.random.default_rng(seed)
    labels = np.array([1] * spec.fight_count + [0] * spec.nonfight_count, dtype=np.int64)
    centres, _ = draw_tracks(rng, labels, spec.skew, dims)
    inputs = render(rng, centres, spec.skew, dims)
    meta = {"generator": "blob-v1", "seed": int(seed), "client_id": spec.client_id}
    return ChunkDataset(inputs, labels, meta)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def scaled_counts(cells, scale) -> list[tuple[int, int]]:
    scale = _as_fraction(scale)
    if not 0 < scale <= 1:
        raise ConfigError(f"scale must lie in (0, 1], got {scale}", "scale")
    out = []
    for i, (fight, nonfight) in enumerate(cells, start=1):
        pair = (round_half_up(scale * fight), round_half_up(scale * nonfight))
        for label, orig, new in (("fight", fight, pair[0]), ("nonfight", nonfight, pair[1])):
            if orig > 0 and new == 0:
                raise ConfigError(f"scale {scale} rounds client {i} {label} count {orig} to zero", "scale")
        out.append(pair)
    return out


def topology_specs(fixture: str, scale=1) -> list[ClientSpec]:
    if fixture not in FIXTURES:
        raise ConfigError(f"unknown fixture {fixture!r}; choose from {sorted(FIXTURES)}", "topology")
    return [ClientSpec(i, f, nf, client_skew(i))
            for i, (f, nf) in enumerate(scaled_counts(FIXTURES[fixture], scale), start=1)]


def build_topology(fixture, scale, dims, seed: int) -> list[ChunkDataset]:
    """One dataset per client; ``fixture`` is a fixture name or a list of ClientSpec."""
    specs = topology_specs(fixture, scale) if isinstance(fixture, str) else list(fixture)
    return [generate_client_data(s, dims, derive_seed(seed, "data", s.client_id)) for s in specs]


def train_test_split(ds: ChunkDataset, test_fraction, seed: int) -> tuple[ChunkDataset, ChunkDataset]:
    """Stratified split; per class ``round_half_up(test_fraction * count)`` go to test."""
    frac = _as_fraction(test_fraction)
    if not 0 < frac < 1:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    is_test = np.zeros(len(ds), dtype=bool)
    for label in (0, 1):
        members = perm[ds.labels[perm] == label]
        is_test[members[:round_half_up(frac * len(members))]] = True
    test_idx = perm[is_test[perm]]
    train_idx = perm[~is_test[perm]]
    if len(test_idx) == 0 or len(train_idx) == 0:
        raise SplitError(f"split of {len(ds)} samples at fraction {test_fraction} leaves an empty side")
    return ds.subset(train_idx), ds.subset(test_idx)


def save_dataset(ds: ChunkDataset) -> bytes:
    return flpk.pack({"inputs": ds.inputs, "labels": ds.labels.astype(np.float32)}, "dataset", np.float32)


def load_dataset(data: bytes) -> ChunkDataset:
    tag, _, entries = flpk.unpack(data)
    if tag != "dataset" or set(entries) != {"inputs", "labels"}:
        raise CorruptFileError("container is not a dataset export", 6)
    labels = entries["labels"]
    if labels.ndim != 1 or entries["inputs"].shape[0] != labels.shape[0] or not np.isin(labels, (0, 1)).all():
        raise CorruptFileError("dataset labels inconsistent with inputs", flpk._HEADER.size)
    return ChunkDataset(entries["inputs"], labels.astype(np.int64))
