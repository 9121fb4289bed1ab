"""Experiment orchestration: setup, round loop, wire log, evaluation, results and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import flpk, kernels
from .data import (FIXTURE_LABELS, FIXTURES, ChunkDataset, ClientSpec, Skew, _as_fraction, build_topology,
                   train_test_split)
from .errors import (ClientSkip, ConfigError, CorruptFileError, MissingStateError, NumericError, RoundError)
from .model import (ARCH_INPUT_DIMS, ARCHS, ParamSet, SplitModel, build_model, deserialize, full_params,
                    load_base, load_personal, serialize, split_params)
from .seeding import derive_seed
from .strategies import (STATEFUL, STRATEGIES, Hyper, aggregate_weighted, client_update_fedavg,
                         client_update_fedmetaper, client_update_fedper, client_update_perfedavg, personalize,
                         server_round_fedper)
from .tensor_nn import Batch, forward, loss_softmax_ce

log = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}
EVAL_CHUNK = 512


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    strategy: str = "fedper"
    arch: str = "mini"
    topology: object = "table1"  # fixture name or tuple of ClientSpec
    scale: Fraction = Fraction(1)
    rounds: int = 20
    hyper: Hyper = field(default_factory=Hyper)
    test_fraction: float = 0.2
    eval_personalize_steps: int = 3
    element_type: str = "f32"
    checkpoint_every: int = 0
    name: str = ""

    def __post_init__(self):
        try:
            object.__setattr__(self, "scale", _as_fraction(self.scale))
        except (ValueError, TypeError, ZeroDivisionError):
            raise ConfigError(f"not a rational number: {self.scale!r}", "scale") from None
        if not isinstance(self.hyper, Hyper):
            raise ConfigError("must be a Hyper", "hyper")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"must be an unsigned 64-bit integer, got {self.seed!r}", "seed")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"must be one of {STRATEGIES}, got {self.strategy!r}", "strategy")
        if self.arch not in ARCHS:
            raise ConfigError(f"must be one of {tuple(ARCHS)}, got {self.arch!r}", "arch")
        if isinstance(self.topology, str):
            if self.topology not in FIXTURES:
                raise ConfigError(f"unknown fixture {self.topology!r}", "topology")
        elif not self.topology:
            raise ConfigError("needs at least one client", "topology")
        elif len({c.client_id for c in self.topology}) != len(self.topology):
            raise ConfigError("client ids must be unique", "topology")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"must lie in (0, 1], got {self.scale}", "scale")
        if not isinstance(self.rounds, int) or isinstance(self.rounds, bool) or self.rounds < 1:
            raise ConfigError(f"must be an integer >= 1, got {self.rounds!r}", "rounds")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"must lie in (0, 1), got {self.test_fraction!r}", "test_fraction")
        if not isinstance(self.eval_personalize_steps, int) or self.eval_personalize_steps < 0:
            raise ConfigError("must be an integer >= 0", "eval_personalize_steps")
        if self.element_type not in DTYPES:
            raise ConfigError(f"must be one of {tuple(DTYPES)}", "element_type")
        if not isinstance(self.checkpoint_every, int) or self.checkpoint_every < 0:
            raise ConfigError("must be an integer >= 0", "checkpoint_every")

    @property
    def dtype(self):
        return DTYPES[self.element_type]

    @property
    def experiment_name(self):
        if self.name:
            return self.name
        return self.topology if isinstance(self.topology, str) else "custom"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object", "<root>")
        known = {f for f in cls.__dataclass_fields__}
        for k in d:
            if k not in known:
                raise ConfigError("unknown field", k)
        kw = dict(d)
        if "hyper" in kw:
            h = kw["hyper"]
            if not isinstance(h, dict):
                raise ConfigError("must be an object", "hyper")
            for k in h:
                if k not in Hyper.__dataclass_fields__:
                    raise ConfigError("unknown field", f"hyper.{k}")
            kw["hyper"] = Hyper(**h)
        if "scale" in kw:
            try:
                kw["scale"] = _as_fraction(kw["scale"])
            except (ValueError, TypeError, ZeroDivisionError):
                raise ConfigError(f"not a rational number: {kw['scale']!r}", "scale") from None
        if "topology" in kw and not isinstance(kw["topology"], str):
            if not isinstance(kw["topology"], list):
                raise ConfigError("must be a fixture name or a list of clients", "topology")
            kw["topology"] = tuple(_client_spec(c, i) for i, c in enumerate(kw["topology"]))
        return cls(**kw)

    def to_dict(self) -> dict:
        topo = self.topology if isinstance(self.topology, str) else [
            {"client_id": c.client_id, "fight_count": c.fight_count, "nonfight_count": c.nonfight_count,
             "skew": asdict(c.skew)} for c in self.topology]
        return {
            "seed": self.seed, "strategy": self.strategy, "arch": self.arch, "topology": topo,
            "scale": str(self.scale), "rounds": self.rounds, "hyper": asdict(self.hyper),
            "test_fraction": self.test_fraction, "eval_personalize_steps": self.eval_personalize_steps,
            "element_type": self.element_type, "checkpoint_every": self.checkpoint_every, "name": self.name,
        }


def _client_spec(c, i) -> ClientSpec:
    path = f"topology[{i}]"
    if not isinstance(c, dict):
        raise ConfigError("must be an object", path)
    allowed = {"client_id", "fight_count", "nonfight_count", "skew"}
    for k in c:
        if k not in allowed:
            raise ConfigError("unknown field", f"{path}.{k}")
    for k in ("client_id", "fight_count", "nonfight_count"):
        if not isinstance(c.get(k), int):
            raise ConfigError("must be an integer", f"{path}.{k}")
    skew = c.get("skew", {})
    try:
        skew = Skew(**skew)
        return ClientSpec(c["client_id"], c["fight_count"], c["nonfight_count"], skew)
    except TypeError as exc:
        raise ConfigError(str(exc), f"{path}.skew") from None
    except ConfigError as exc:
        raise ConfigError(str(exc), path) from None


@dataclass
class ClientState:
    client_id: int
    personal: ParamSet | None
    train: ChunkDataset
    test: ChunkDataset
    rng_seed: int


@dataclass
class ClientMetrics:
    client_id: int
    test_loss: float
    test_acc: float
    n_test: int


@dataclass
class RoundReport:
    round: int
    global_loss: float
    global_acc: float
    per_client: list[ClientMetrics]
    wire_bytes: int
    wire_tensor_names: list[str]

    def to_dict(self) -> dict:
        return {
            "round": self.round, "global_loss": self.global_loss, "global_acc": self.global_acc,
            "per_client": [asdict(m) for m in self.per_client],
            "wire_bytes": self.wire_bytes, "wire_tensor_names": list(self.wire_tensor_names),
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        return cls(d["round"], d["global_loss"], d["global_acc"], [ClientMetrics(**m) for m in d["per_client"]],
                   d["wire_bytes"], d["wire_tensor_names"])


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise NumericError(f"non-finite metric {x}")
    return format(x, ".16e")  # 17 significant digits


def dumps(obj, indent: int | None = None, _level: int = 0) -> str:
    """JSON with every float written to 17 significant digits; key order preserved."""
    nl = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    sep = ", " if indent is None else ","
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, np.floating):
        return _fmt_float(float(obj))
    if isinstance(obj, np.integer):
        return str(int(obj))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{nl}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{" + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + sep.join(f"{nl}{dumps(v, indent, _level + 1)}" for v in obj) + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


@dataclass
class Experiment:
    """Everything a round needs besides the evolving server and client state."""

    config: ExperimentConfig
    model: SplitModel  # template: specs plus server-initialised parameters

    @property
    def strategy(self):
        return self.config.strategy

    @property
    def hyper(self):
        return self.config.hyper


def setup(config: ExperimentConfig) -> tuple[Experiment, ParamSet, list[ClientState]]:
    dtype = config.dtype
    model = build_model(config.arch, derive_seed(config.seed, "init", 0), dtype)
    dims = ARCH_INPUT_DIMS[config.arch]
    datasets = build_topology(config.topology, config.scale, dims, config.seed)
    ids = ([c.client_id for c in config.topology] if not isinstance(config.topology, str)
           else list(range(1, len(datasets) + 1)))
    clients = []
    for cid, ds in zip(ids, datasets):
        train, test = train_test_split(ds, config.test_fraction, derive_seed(config.seed, "split", cid))
        personal = None
        if config.strategy in STATEFUL:
            # each client draws its own personalization layers
            _, personal = split_params(build_model(config.arch, derive_seed(config.seed, "init", cid), dtype))
        clients.append(ClientState(cid, personal, train, test, derive_seed(config.seed, "shuffle", cid)))
    for c in clients:
        # SGD epochs then use the whole set as one batch; meta strategies skip such clients
        if config.hyper.batch_size > len(c.train):
            log.warning("client %d: batch_size %d exceeds its %d training samples",
                        c.client_id, config.hyper.batch_size, len(c.train))
    server = split_params(model)[0] if config.strategy in STATEFUL else full_params(model)
    return Experiment(config, model), server, clients


def _client_model(exp: Experiment, client: ClientState) -> SplitModel:
    if client.personal is None:
        return exp.model
    return load_personal(exp.model, client.personal)


def _update_one(exp: Experiment, server: ParamSet, client: ClientState, round_idx: int):
    seed = derive_seed(client.rng_seed, "shuffle", round_idx)
    hyper, cid = exp.hyper, client.client_id
    try:
        if exp.strategy == "fedavg":
            return client_update_fedavg(exp.model.with_params(server.entries), client.train, hyper, seed, cid), None
        if exp.strategy == "perfedavg":
            return client_update_perfedavg(exp.model, server, client.train, hyper, seed, cid), None
        model = _client_model(exp, client)
        if exp.strategy == "fedper":
            return client_update_fedper(model, server, client.train, hyper, seed, cid)
        return client_update_fedmetaper(model, server, client.train, hyper, seed, cid)
    except ClientSkip as skip:
        log.info("round %d: %s", round_idx, skip)
        return None, None


def metrics_from_logits(logits: np.ndarray, labels) -> tuple[float, float]:
    labels = np.asarray(labels)
    loss = loss_softmax_ce(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, acc


def evaluate_model(model: SplitModel, data: ChunkDataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``model`` on ``data``."""
    logits = []
    for i in range(0, len(data), EVAL_CHUNK):
        out, _ = forward(model.params, model.specs, Batch(data.inputs[i:i + EVAL_CHUNK], data.labels[i:i + EVAL_CHUNK]))
        logits.append(out)
    return metrics_from_logits(np.concatenate(logits), data.labels)


def evaluate(exp: Experiment, server: ParamSet, clients: list[ClientState], strategy: str | None = None,
             eval_personalize_steps: int | None = None) -> list[ClientMetrics]:
    strategy = strategy or exp.strategy
    steps = exp.config.eval_personalize_steps if eval_personalize_steps is None else eval_personalize_steps
    out = []
    for c in sorted(clients, key=lambda c: c.client_id):
        if strategy == "fedavg":
            model = exp.model.with_params(server.entries)
        elif strategy == "perfedavg":
            model = personalize(exp.model, server, c.train, steps, exp.hyper.lr_meta)
        else:
            model = load_base(_client_model(exp, c), server)
        loss, acc = evaluate_model(model, c.test)
        out.append(ClientMetrics(c.client_id, loss, acc, len(c.test)))
    return out


def weighted_metrics(per_client: list[ClientMetrics]) -> tuple[float, float]:
    n = sum(m.n_test for m in per_client)
    loss = sum(m.n_test * m.test_loss for m in per_client) / n
    acc = sum(m.n_test * m.test_acc for m in per_client) / n
    return loss, acc


def run_round(exp: Experiment, server: ParamSet, clients: list[ClientState], round_idx: int,
              jobs: int = 1) -> tuple[ParamSet, list[ClientState], RoundReport]:
    """Distribute, update every client, aggregate in client_id order, evaluate."""
    clients = sorted(clients, key=lambda c: c.client_id)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: _update_one(exp, server, c, round_idx), clients))
    else:
        results = [_update_one(exp, server, c, round_idx) for c in clients]

    dtype = server.dtype()
    wire_names, wire_bytes = [], 0
    updates, new_clients = [], []
    for client, (update, personal) in zip(clients, results):
        # downlink happens whether or not the client manages to train
        wire_names += server.names()
        wire_bytes += flpk.packed_size(server.entries, dtype)
        if update is None:
            new_clients.append(client)
            continue
        wire_names += update.payload.names()
        wire_bytes += flpk.packed_size(update.payload.entries, dtype)
        updates.append(update)
        new_clients.append(replace(client, personal=personal) if personal is not None else client)
    if not updates:
        raise RoundError(f"round {round_idx}: every client was skipped")
    if exp.strategy in STATEFUL:
        new_server = server_round_fedper(server, updates)
    else:
        new_server = aggregate_weighted(updates)
    per_client = evaluate(exp, new_server, new_clients)
    g_loss, g_acc = weighted_metrics(per_client)
    report = RoundReport(round_idx, g_loss, g_acc, per_client, wire_bytes, wire_names)
    return new_server, new_clients, report


# -- checkpoints -------------------------------------------------------------

def checkpoint(directory, round_idx: int, exp: Experiment, server: ParamSet, clients: list[ClientState]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "server.flpk").write_bytes(serialize(server))
    entries = []
    for c in sorted(clients, key=lambda c: c.client_id):
        item = {"client_id": c.client_id, "personal": None}
        if c.personal is not None:
            fname = f"client_{c.client_id}.flpk"
            (directory / fname).write_bytes(serialize(c.personal))
            item["personal"] = fname
        entries.append(item)
    manifest = {
        "round": round_idx, "strategy": exp.strategy, "arch": exp.config.arch,
        "element_type": exp.config.element_type, "seed": exp.config.seed,
        "server": "server.flpk", "server_tag": server.partition_tag, "clients": entries,
    }
    (directory / "manifest.json").write_text(dumps(manifest, indent=2) + "\n")
    return directory


def restore(directory, exp: Experiment, clients: list[ClientState]) -> tuple[int, ParamSet, list[ClientState]]:
    """Load a checkpoint written by :func:`checkpoint` onto freshly set-up clients."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise MissingStateError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"manifest.json: {exc.msg}", exc.pos) from None
    for key in ("strategy", "arch", "element_type", "seed"):
        want = getattr(exp.config, key)
        if manifest.get(key) != want:
            raise ConfigError(f"checkpoint was written with {key}={manifest.get(key)!r}, config has {want!r}", key)

    def read(fname, what):
        path = directory / fname
        if not path.exists():
            raise MissingStateError(f"missing {what} state file {fname}")
        try:
            return deserialize(path.read_bytes())
        except CorruptFileError as exc:
            raise CorruptFileError(f"corrupt checkpoint file {fname}: {exc.args[0]}", exc.offset) from None

    server = read(manifest["server"], "server")
    by_id = {e["client_id"]: e for e in manifest["clients"]}
    restored = []
    for c in sorted(clients, key=lambda c: c.client_id):
        if c.client_id not in by_id:
            raise MissingStateError(f"checkpoint has no entry for client {c.client_id}")
        fname = by_id[c.client_id]["personal"]
        if exp.strategy in STATEFUL:
            if fname is None:
                raise MissingStateError(f"client {c.client_id} has no personal state in the checkpoint")
            path = directory / fname
            if not path.exists():
                raise MissingStateError(f"client {c.client_id}: personal state file {fname} is missing")
            personal = read(fname, f"client {c.client_id} personal")
            load_personal(exp.model, personal)  # validates names and dims
            c = replace(c, personal=personal)
        restored.append(c)
    return int(manifest["round"]), server, restored


# -- whole experiment --------------------------------------------------------

@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    summary: dict


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1, resume_from=None) -> ExperimentResult:
    """Run ``config.rounds`` rounds (or the remainder after ``resume_from``).

    With ``out_dir`` set, writes ``rounds.jsonl``, ``summary.json`` and a
    ``checkpoints/`` directory holding the latest checkpoint.
    """
    t0 = time.perf_counter()
    exp, server, clients = setup(config)
    start = 0
    if resume_from is not None:
        start, server, clients = restore(resume_from, exp, clients)
        if start > config.rounds:
            raise ConfigError(f"checkpoint is at round {start}, past the configured {config.rounds}", "rounds")
    out = Path(out_dir) if out_dir is not None else None
    rounds_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rounds_file = open(out / "rounds.jsonl", "w", encoding="utf-8", newline="\n")
    reports = []
    try:
        for r in range(start + 1, config.rounds + 1):
            server, clients, report = run_round(exp, server, clients, r, jobs=jobs)
            reports.append(report)
            log.info("round %d: global_acc=%.4f global_loss=%.4f", r, report.global_acc, report.global_loss)
            if rounds_file is not None:
                rounds_file.write(report.to_json() + "\n")
                rounds_file.flush()
                every = config.checkpoint_every
                if r == config.rounds or (every and r % every == 0):
                    checkpoint(out / "checkpoints", r, exp, server, clients)
    finally:
        if rounds_file is not None:
            rounds_file.close()
    final = reports[-1].to_dict() if reports else None
    summary = {
        "experiment": config.experiment_name,
        "configuration": FIXTURE_LABELS.get(config.topology, "custom") if isinstance(config.topology, str) else "custom",
        "clients": len(clients),
        "final": final,
        "config": config.to_dict(),
        "kernel_backend": kernels.BACKEND,
        "wall_time_s": time.perf_counter() - t0,
    }
    if out is not None:
        (out / "summary.json").write_text(dumps(summary, indent=2) + "\n")
    return ExperimentResult(reports, summary)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def preset_path(name: str) -> Path:
    return Path(__file__).with_name("presets") / f"{name}.json"


def load_preset(name: str) -> ExperimentConfig:
    path = preset_path(name)
    if not path.exists():
        raise ConfigError(f"unknown preset {name!r}", "preset")
    return load_config(path)


def apply_env_seed(config: ExperimentConfig) -> ExperimentConfig:
    env = os.environ.get("FLSIM_SEED")
    if env is None:
        return config
    try:
        return replace(config, seed=int(env))
    except ValueError:
        raise ConfigError(f"FLSIM_SEED must be an integer, got {env!r}", "seed") from None
