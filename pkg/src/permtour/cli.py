"""Command-line entry point: generate / train / infer / bench / oracle / report.

All randomness flows from one --seed flag through documented derivations
(component label, instance index, pass index; see seeds.derive).  Every
run writes its resolved configuration next to its outputs, outputs are
written atomically (temp file + rename, so partial results are never left
behind), and failures exit nonzero with a one-line machine-parsable
``error: E_<CODE>: message`` on stderr.

Relative --data paths resolve under $PERMTOUR_DATA_DIR and relative
checkpoint paths under $PERMTOUR_CKPT_DIR when those variables are set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .baselines import (BaselineConfig, CapabilityError, HELD_KARP_MAX_N,
                        TwoOptConfig, greedy_nn, held_karp, run_two_opt)
from .ensemble import (EnsembleConfig, run_ensemble, write_records_jsonl,
                       write_summary_csv as write_ensemble_csv)
from .features import FeatureConfig
from .instances import (DEFAULT_SCALE, distance_matrix, generate_uniform,
                        read_instances, read_instances_jsonl, write_instances,
                        write_instances_jsonl)
from .model import ModelConfig
from .reporting import (BenchmarkReport, build_report, write_histogram_csv,
                        write_summary_csv, write_summary_markdown)
from .sinkhorn import SinkhornConfig
from .training import (FingerprintMismatchError, SnapshotChecksumError,
                       SnapshotVersionError, TrainConfig, load_snapshot,
                       save_snapshot, train)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_CAPABILITY = 5


class CliError(Exception):
    def __init__(self, code: str, exit_code: int, message: str) -> None:
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _fail(code: str, exit_code: int, message: str) -> CliError:
    return CliError(code, exit_code, message)


def _data_path(path: str) -> str:
    base = os.environ.get("PERMTOUR_DATA_DIR")
    if base and not os.path.isabs(path) and not os.path.exists(path):
        return os.path.join(base, path)
    return path


def _ckpt_path(path: str) -> str:
    base = os.environ.get("PERMTOUR_CKPT_DIR")
    if base and not os.path.isabs(path) and not os.path.exists(path):
        return os.path.join(base, path)
    return path


def _load_instances(path: str):
    path = _data_path(path)
    if not os.path.exists(path):
        raise _fail("E_IO", EXIT_IO, f"instance file not found: {path}")
    try:
        if path.endswith(".jsonl"):
            with open(path) as fh:
                return read_instances_jsonl(fh)
        with open(path, "rb") as fh:
            return read_instances(fh)
    except (ValueError, OSError) as exc:
        raise _fail("E_IO", EXIT_IO, f"cannot read instances from {path}: {exc}")


def _atomic_write(path: str, writer: Callable) -> None:
    tmp = path + ".tmp"
    mode = "wb" if path.endswith((".bin", ".tspb")) else "w"
    kwargs = {} if mode == "wb" else {"newline": ""}
    with open(tmp, mode, **kwargs) as fh:
        writer(fh)
    os.replace(tmp, path)


def _write_resolved_config(prefix: str, payload: dict) -> None:
    _atomic_write(prefix + ".config.json", lambda fh: fh.write(json.dumps(payload, indent=2)))


def _dataclass_from_dict(cls, raw: dict):
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise _fail("E_CONFIG", EXIT_CONFIG, f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


def _model_config(raw: dict) -> ModelConfig:
    raw = dict(raw)
    try:
        feature = _dataclass_from_dict(FeatureConfig, raw.pop("feature_cfg", {}))
        sink = _dataclass_from_dict(SinkhornConfig, raw.pop("sinkhorn_cfg", {}))
        known = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return ModelConfig(**raw, feature_cfg=feature, sinkhorn_cfg=sink)
    except (TypeError, ValueError) as exc:
        raise _fail("E_CONFIG", EXIT_CONFIG, f"bad model config: {exc}")


def _train_config(raw: dict) -> TrainConfig:
    try:
        return _dataclass_from_dict(TrainConfig, raw)
    except (TypeError, ValueError) as exc:
        raise _fail("E_CONFIG", EXIT_CONFIG, f"bad train config: {exc}")


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise _fail("E_IO", EXIT_IO, f"config file not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def _apply_sets(raw_model: dict, raw_train: dict, sets: Sequence[str]) -> None:
    for spec in sets:
        if "=" not in spec or "." not in spec.split("=", 1)[0]:
            raise _fail("E_USAGE", EXIT_USAGE, f"--set expects scope.key=value, got {spec!r}")
        key, value = spec.split("=", 1)
        scope, name = key.split(".", 1)
        target = {"model": raw_model, "train": raw_train}.get(scope)
        if target is None:
            raise _fail("E_USAGE", EXIT_USAGE, f"--set scope must be model or train, got {scope!r}")
        try:
            target[name] = json.loads(value)
        except json.JSONDecodeError:
            target[name] = value


def _load_snapshots(paths: Sequence[str], model_cfg: ModelConfig | None):
    snaps = []
    for p in paths:
        p = _ckpt_path(p)
        if not os.path.exists(p):
            raise _fail("E_IO", EXIT_IO, f"checkpoint not found: {p}")
        try:
            snaps.append(load_snapshot(p, model_cfg))
        except (SnapshotChecksumError, SnapshotVersionError) as exc:
            raise _fail("E_IO", EXIT_IO, str(exc))
        except FingerprintMismatchError as exc:
            raise _fail("E_CONFIG", EXIT_CONFIG, str(exc))
    return snaps


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    out = _data_path(args.out)
    instances = generate_uniform(args.n, args.count, args.seed)
    if out.endswith(".jsonl"):
        _atomic_write(out, lambda fh: write_instances_jsonl(instances, fh))
    else:
        tmp = out + ".tmp"
        with open(tmp, "wb") as fh:
            write_instances(instances, fh)
        os.replace(tmp, out)
    _write_resolved_config(out, {"command": "generate", "n": args.n,
                                 "count": args.count, "seed": args.seed, "out": out})
    print(f"wrote {len(instances)} instances to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    raw_model = _load_json(args.model_cfg)
    raw_train = _load_json(args.train_cfg)
    _apply_sets(raw_model, raw_train, args.set or [])
    if args.seed is not None:
        raw_train["seed"] = args.seed
    model_cfg = _model_config(raw_model)
    train_cfg = _train_config(raw_train)

    data = None
    if args.data:
        data = _load_instances(args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    resume = None
    if args.resume:
        resume = _load_snapshots([args.resume], model_cfg)[0]
    _write_resolved_config(os.path.join(args.out_dir, "train"), {
        "command": "train",
        "model_cfg": dataclasses.asdict(model_cfg),
        "train_cfg": dataclasses.asdict(train_cfg),
        "data": args.data,
        "resume": args.resume,
    })
    result = train(model_cfg, train_cfg, data=data, out_dir=args.out_dir,
                   resume_from=resume, log=not args.quiet)
    print(f"trained {len(result.history.rows)} epochs; best epoch {result.best_epoch}; "
          f"snapshots in {args.out_dir}")
    return EXIT_OK


def _parse_methods(spec: str) -> list[str]:
    methods = [m.strip() for m in spec.split(",") if m.strip()]
    for m in methods:
        base = m.split(":", 1)
        if base[0] not in ("nn", "2opt", "model"):
            raise _fail("E_USAGE", EXIT_USAGE, f"unknown method {m!r}")
        if base[0] == "model":
            if len(base) != 2:
                raise _fail("E_USAGE", EXIT_USAGE, f"model method needs a mode: {m!r}")
            mode = base[1]
            if not (mode in ("det", "snap") or mode.startswith("mc")
                    or mode.startswith("combined")):
                raise _fail("E_USAGE", EXIT_USAGE, f"unknown model mode {mode!r}")
    return methods


def _model_lengths(method: str, instances, model_cfg, snaps, seed):
    mode = method.split(":", 1)[1]
    if mode == "det":
        cfg = EnsembleConfig(mode="deterministic", seed=seed)
    elif mode.startswith("mc"):
        k = int(mode[2:] or "10")
        cfg = EnsembleConfig(mode="mc_dropout", mc_passes=k, seed=seed)
    elif mode == "snap":
        cfg = EnsembleConfig(mode="snapshot", seed=seed,
                             snapshot_paths=tuple(str(s.epoch) for s in snaps))
    else:
        k = int(mode[len("combined"):] or "10")
        cfg = EnsembleConfig(mode="combined", mc_passes=k, seed=seed,
                             snapshot_paths=tuple(str(s.epoch) for s in snaps))
    params = snaps[0].params if snaps else None
    records, _ = run_ensemble(instances, model_cfg, cfg, params=params, snapshots=snaps)
    return [rec.best_tour.length for rec in records]


def _baseline_lengths(method: str, instances, threads: int, baseline_cfg: BaselineConfig):
    def one(inst):
        d = distance_matrix(inst)
        if method == "nn":
            return greedy_nn(d, baseline_cfg).length
        return run_two_opt(d, baseline_cfg).length

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, instances))
    return [one(inst) for inst in instances]


def _cmd_bench(args) -> int:
    instances = _load_instances(args.data)
    methods = _parse_methods(args.methods)
    needs_model = any(m.startswith("model") for m in methods)
    load_t0 = time.perf_counter()
    model_cfg = None
    snaps = []
    if needs_model:
        if not args.checkpoint:
            raise _fail("E_USAGE", EXIT_USAGE, "model methods need --checkpoint")
        raw_model = _load_json(args.model_cfg)
        model_cfg = _model_config(raw_model) if raw_model else ModelConfig()
        snaps = _load_snapshots(args.checkpoint, model_cfg)
    model_load_s = time.perf_counter() - load_t0

    baseline_cfg = BaselineConfig(
        nn_start=args.nn_start,
        two_opt=TwoOptConfig(strategy=args.two_opt_strategy),
    )
    lengths: dict[str, list[float]] = {}
    times: dict[str, float] = {}
    for method in methods:
        t0 = time.perf_counter()
        if method.startswith("model"):
            lengths[method] = _model_lengths(method, instances, model_cfg, snaps, args.seed)
        else:
            lengths[method] = _baseline_lengths(method, instances, args.threads, baseline_cfg)
        times[method] = time.perf_counter() - t0

    metadata = {
        "command": "bench", "data": args.data, "seed": args.seed,
        "instances": len(instances), "n": instances[0].n if instances else 0,
        "model_load_s": model_load_s,
        "checkpoints": list(args.checkpoint or []),
        "reference_method": args.reference,
    }
    report = build_report(lengths, times, metadata, reference=args.reference)
    io_t0 = time.perf_counter()
    _atomic_write(args.out + ".json", lambda fh: fh.write(report.to_json()))
    _atomic_write(args.out + ".csv", lambda fh: write_summary_csv(report, fh))
    for method, vals in lengths.items():
        safe = method.replace(":", "_")
        _atomic_write(f"{args.out}.hist.{safe}.csv", lambda fh, v=vals: write_histogram_csv(v, fh))
    metadata["io_s"] = time.perf_counter() - io_t0
    _write_resolved_config(args.out, metadata)
    for name, s in report.methods.items():
        gap = "" if s.gap_pct is None else f"  gap {s.gap_pct:.2f}%"
        print(f"{name}: mean {s.mean_length:.4f}{gap}  ({s.per_instance_ms:.2f} ms/instance)")
    return EXIT_OK


def _cmd_infer(args) -> int:
    instances = _load_instances(args.data)
    raw_model = _load_json(args.model_cfg)
    model_cfg = _model_config(raw_model) if raw_model else ModelConfig()
    snaps = _load_snapshots(args.checkpoint, model_cfg)
    mode = {"det": "deterministic", "mc": "mc_dropout",
            "snapshot": "snapshot", "combined": "combined"}[args.mode]
    cfg = EnsembleConfig(mode=mode, mc_passes=args.passes, seed=args.seed,
                         snapshot_paths=tuple(args.checkpoint))
    ensemble_snaps = snaps if mode in ("snapshot", "combined") else []
    records, summary = run_ensemble(instances, model_cfg, cfg,
                                    params=snaps[0].params, snapshots=ensemble_snaps)
    _atomic_write(args.out + ".jsonl", lambda fh: write_records_jsonl(records, fh))
    _atomic_write(args.out + ".summary.csv", lambda fh: write_ensemble_csv(summary, fh))
    _write_resolved_config(args.out, {
        "command": "infer", "data": args.data, "mode": args.mode,
        "passes": args.passes, "seed": args.seed,
        "checkpoints": list(args.checkpoint),
    })
    print(f"ensemble mean length {summary.ensemble_mean_length:.4f} "
          f"over {len(records)} instances ({len(summary.member_tags)} members)")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    instances = _load_instances(args.data)
    too_big = [inst.n for inst in instances if inst.n > args.max_n]
    if too_big:
        raise _fail("E_CAPABILITY", EXIT_CAPABILITY,
                    f"oracle limited to n <= {args.max_n}; data has n={too_big[0]}")
    t0 = time.perf_counter()
    try:
        optima = [held_karp(distance_matrix(inst)).length for inst in instances]
    except CapabilityError as exc:
        raise _fail("E_CAPABILITY", EXIT_CAPABILITY, str(exc))
    oracle_time = time.perf_counter() - t0

    if args.in_report:
        if not os.path.exists(args.in_report):
            raise _fail("E_IO", EXIT_IO, f"report not found: {args.in_report}")
        with open(args.in_report) as fh:
            prev = BenchmarkReport.from_json(fh.read())
        counts = {len(v) for v in prev.lengths.values()}
        if counts and counts != {len(instances)}:
            raise _fail("E_CONFIG", EXIT_CONFIG,
                        f"report covers {counts} instances, data has {len(instances)}")
        lengths = dict(prev.lengths)
        times = dict(prev.times)
        metadata = dict(prev.metadata)
    else:
        lengths, times, metadata = {}, {}, {"command": "oracle", "data": args.data}
    lengths["oracle"] = optima
    times["oracle"] = oracle_time
    metadata["oracle_max_n"] = args.max_n
    report = build_report(lengths, times, metadata, reference="oracle")
    out = args.out or args.in_report or "oracle_report.json"
    _atomic_write(out, lambda fh: fh.write(report.to_json()))
    _write_resolved_config(out, metadata)
    print(f"oracle mean {report.methods['oracle'].mean_length:.4f} over "
          f"{len(instances)} instances -> {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    if not os.path.exists(args.in_report):
        raise _fail("E_IO", EXIT_IO, f"report not found: {args.in_report}")
    with open(args.in_report) as fh:
        report = BenchmarkReport.from_json(fh.read())
    out = sys.stdout
    if args.out:
        tmp = args.out + ".tmp"
        out = open(tmp, "w", newline="")
    try:
        if args.format == "json":
            out.write(report.to_json())
        elif args.format == "csv":
            write_summary_csv(report, out)
        else:
            write_summary_markdown(report, out)
    finally:
        if args.out:
            out.close()
            os.replace(tmp, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="permtour",
                                     description="permutation-learning TSP heuristic toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate uniform instances")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train the permutation model")
    t.add_argument("--model-cfg", help="JSON file with ModelConfig fields")
    t.add_argument("--train-cfg", help="JSON file with TrainConfig fields")
    t.add_argument("--data", help="instance file (default: generated dataset)")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="snapshot to resume from")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--set", action="append", metavar="SCOPE.KEY=VALUE",
                   help="override any model.* or train.* config knob")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=_cmd_train)

    i = sub.add_parser("infer", help="run ensemble inference")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", action="append", required=True)
    i.add_argument("--model-cfg")
    i.add_argument("--mode", choices=["det", "mc", "snapshot", "combined"], default="det")
    i.add_argument("--passes", type=int, default=10)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=_cmd_infer)

    b = sub.add_parser("bench", help="benchmark methods on an instance set")
    b.add_argument("--data", required=True)
    b.add_argument("--methods", required=True,
                   help="comma list: nn,2opt,model:det,model:mc10,model:snap,model:combined10")
    b.add_argument("--checkpoint", action="append")
    b.add_argument("--model-cfg")
    b.add_argument("--reference", help="method name gaps are measured against")
    b.add_argument("--nn-start", choices=["fixed", "best"], default="fixed")
    b.add_argument("--two-opt-strategy", choices=["first", "best"], default="first")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--out", required=True, help="output prefix")
    b.set_defaults(func=_cmd_bench)

    o = sub.add_parser("oracle", help="exact optima via Held-Karp")
    o.add_argument("--data", required=True)
    o.add_argument("--max-n", type=int, default=16)
    o.add_argument("--in", dest="in_report", help="existing report to append to")
    o.add_argument("--out", help="output report path")
    o.set_defaults(func=_cmd_oracle)

    r = sub.add_parser("report", help="format a benchmark report")
    r.add_argument("--in", dest="in_report", required=True)
    r.add_argument("--format", choices=["csv", "json", "md"], default="csv")
    r.add_argument("--out")
    r.set_defaults(func=_cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"error: E_INTERNAL: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
