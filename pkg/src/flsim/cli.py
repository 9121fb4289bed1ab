"""Command-line front end.

Exit codes: 0 success, 2 input/parse error, 3 validation error, 4 numeric/runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .engine import (ExperimentConfig, RoundReport, _client_spec, apply_env_seed, dumps, load_preset, run_experiment,
                     weighted_metrics)
from .errors import ConfigError, FlsimError
from .model import ARCH_INPUT_DIMS, ARCHS, build_model
from .seeding import derive_seed
from .strategies import STRATEGIES
from .tensor_nn import Batch, grad_check

EXIT_OK, EXIT_INPUT, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4
GRADCHECK_BATCH = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"out of u64 range: {text}")
    return v


def _read_json(path):
    """Parsed JSON or an exit code with a located message."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        return None, _fail(EXIT_INPUT, f"cannot read {path}: {exc.strerror}")
    try:
        return json.loads(text), None
    except json.JSONDecodeError as exc:
        return None, _fail(EXIT_INPUT, f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")


def cmd_run(args) -> int:
    if (args.config is None) == (args.preset is None):
        return _fail(EXIT_INPUT, "give exactly one of --config or --preset")
    try:
        if args.preset is not None:
            config = load_preset(args.preset)
        else:
            raw, err = _read_json(args.config)
            if err is not None:
                return err
            config = ExperimentConfig.from_dict(raw)
        config = apply_env_seed(config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.scale is not None:
            overrides["scale"] = args.scale
        if args.strategy is not None:
            overrides["strategy"] = args.strategy
        if args.rounds is not None:
            overrides["rounds"] = args.rounds
        if overrides:
            config = replace(config, **overrides)
        if args.jobs < 1:
            raise ConfigError("must be >= 1", "jobs")
        result = run_experiment(config, args.out, jobs=args.jobs, resume_from=args.resume)
    except FlsimError as exc:
        return _fail(exc.exit_code, str(exc))
    final = result.reports[-1] if result.reports else None
    if final is not None:
        print(f"experiment={config.experiment_name} strategy={config.strategy} rounds={final.round} "
              f"clients={len(final.per_client)} accuracy={final.global_acc:.4f} loss={final.global_loss:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model = build_model(args.arch, derive_seed(args.seed, "init", 0), np.float64)
    dims = ARCH_INPUT_DIMS[args.arch]
    half = GRADCHECK_BATCH // 2
    ds = data_mod.generate_client_data(data_mod.ClientSpec(1, half, GRADCHECK_BATCH - half), dims,
                                       derive_seed(args.seed, "data", 0))
    batch = Batch(ds.inputs.astype(np.float64), ds.labels)
    report = grad_check(model.specs, model.params, batch, eps=1e-5)
    ok = report.max_rel_err < GRADCHECK_TOL
    print(f"arch={args.arch} seed={args.seed} {report} -> {'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_partition(args) -> int:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["client", "fight", "nonfight", "total"])
    for i, (fight, nonfight) in enumerate(data_mod.FIXTURES[args.table], start=1):
        w.writerow([i, fight, nonfight, fight + nonfight])
    return EXIT_OK


def cmd_make_data(args) -> int:
    raw, err = _read_json(args.spec)
    if err is not None:
        return err
    try:
        if not isinstance(raw, dict) or not isinstance(raw.get("clients"), list):
            raise ConfigError("expected an object with a 'clients' list", "clients")
        unknown = set(raw) - {"seed", "dims", "clients"}
        if unknown:
            raise ConfigError("unknown field", sorted(unknown)[0])
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")
        dims = raw.get("dims", list(ARCH_INPUT_DIMS["mini"]))
        if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) for d in dims)):
            raise ConfigError("must be [frames, height, width]", "dims")
        specs = [_client_spec(c, i) for i, c in enumerate(raw["clients"])]
        if len({s.client_id for s in specs}) != len(specs):
            raise ConfigError("client ids must be unique", "clients")
        datasets = data_mod.build_topology(specs, 1, dims, seed)
    except FlsimError as exc:
        return _fail(exc.exit_code, str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = {"seed": seed, "dims": dims, "clients": []}
    for spec, ds in zip(specs, datasets):
        fname = f"client_{spec.client_id}.flpk"
        (out / fname).write_bytes(data_mod.save_dataset(ds))
        fight, nonfight = ds.counts()
        index["clients"].append({"client_id": spec.client_id, "file": fname, "fight": fight,
                                 "nonfight": nonfight, "total": len(ds)})
    (out / "index.json").write_text(dumps(index, indent=2) + "\n")
    print(f"wrote {len(specs)} dataset files to {out}")
    return EXIT_OK


def _load_reports(results_dir: Path):
    path = results_dir / "rounds.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                reports.append(RoundReport.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: corrupt round record ({exc})") from None
    if not reports:
        raise ValueError(f"{path} holds no rounds")
    return reports


def cmd_report(args) -> int:
    results_dir = Path(args.input)
    try:
        reports = _load_reports(results_dir)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    if args.format == "csv":
        ids = [m.client_id for m in reports[0].per_client]
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["round", "global_acc", "global_loss", "wire_bytes"]
                   + [f"client{i}_acc" for i in ids] + [f"client{i}_loss" for i in ids])
        for r in reports:
            by_id = {m.client_id: m for m in r.per_client}
            w.writerow([r.round, repr(r.global_acc), repr(r.global_loss), r.wire_bytes]
                       + [repr(by_id[i].test_acc) for i in ids] + [repr(by_id[i].test_loss) for i in ids])
        return EXIT_OK
    final = reports[-1]
    name, configuration = results_dir.name, "custom"
    summary_path = results_dir / "summary.json"
    if summary_path.exists():
        try:
            summary = json.loads(summary_path.read_text())
            name = summary.get("experiment", name)
            configuration = summary.get("configuration", configuration)
        except json.JSONDecodeError:
            pass
    _, acc = weighted_metrics(final.per_client)
    print(f"experiment={name} configuration=\"{configuration}\" clients={len(final.per_client)} "
          f"accuracy={100 * final.global_acc:.2f}% loss={final.global_loss:.4f} round={final.round} "
          f"recomputed_accuracy={100 * acc:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flsim", description="Personalized federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", help="experiment config JSON")
    run.add_argument("--preset", choices=sorted(data_mod.FIXTURES), help="bundled experiment")
    run.add_argument("--scale", help="topology scale in (0, 1], e.g. 0.05 or 1/20")
    run.add_argument("--out", required=True, help="results directory")
    run.add_argument("--jobs", type=int, default=1, help="parallel client updates (output is identical)")
    run.add_argument("--seed", type=_u64, help="master seed (overrides FLSIM_SEED and the config)")
    run.add_argument("--strategy", choices=STRATEGIES, help="override the config strategy")
    run.add_argument("--rounds", type=int, help="override the round budget")
    run.add_argument("--resume", help="checkpoint directory to resume from")
    run.set_defaults(func=cmd_run)

    gc = sub.add_parser("gradcheck", help="finite-difference check of backprop (64-bit)")
    gc.add_argument("--arch", required=True, choices=sorted(ARCHS))
    gc.add_argument("--seed", type=_u64, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    part = sub.add_parser("partition", help="print a client topology as CSV")
    part.add_argument("--table", required=True, choices=sorted(data_mod.FIXTURES))
    part.set_defaults(func=cmd_partition)

    md = sub.add_parser("make-data", help="generate per-client synthetic datasets")
    md.add_argument("--spec", required=True, help="client spec JSON")
    md.add_argument("--out", required=True)
    md.set_defaults(func=cmd_make_data)

    rep = sub.add_parser("report", help="summarise a results directory")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--format", choices=("csv", "summary"), default="summary")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FlsimError as exc:
        return _fail(exc.exit_code, str(exc))


if __name__ == "__main__":
    sys.exit(main())
