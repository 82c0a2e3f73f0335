"""Experiment runner CLI.

Subcommands:
  train    EXPERIMENT.yaml      run the configured distillations
  certify  --correlations ... --n-negatives ... --out report.json
  report   --records GLOB --out-dir DIR

Exit codes: 0 success, 2 configuration/validation failure (diagnostic
names the offending field), 3 runtime failure (diagnostic names the run),
4 certification bound violation.

The experiment file is YAML with `schema_version`, `output_dir`,
`deterministic`, and a `runs` list of DistillRunConfig mappings. Every
run directory receives exactly: config.json, record.json, trace.csv and
student.pt.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from glob import glob
from pathlib import Path
from typing import List, Optional

import yaml

from . import analysis, milab
from .errors import ConfigError, DistillkitError, DomainError
from .harness.config import DistillRunConfig, Mode, Objective, RunRecord, stream_seed
from .harness.data import channel_split_views, get_dataset
from .harness.models import load_checkpoint, save_checkpoint
from .harness.train import (crossmodal_distill, distill, ensemble_distill,
                            linear_probe, train_teacher)

SUPPORTED_SCHEMA = (1,)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_BOUND = 4


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_experiment(path: str, args) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError("experiment_file", f"no such file: {path}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError("experiment_file", f"cannot parse YAML: {e}")
    if not isinstance(doc, dict):
        raise ConfigError("experiment_file", "top level must be a mapping")
    version = doc.get("schema_version")
    if version not in SUPPORTED_SCHEMA:
        raise ConfigError("schema_version",
                          f"unsupported version {version!r}; supported: {SUPPORTED_SCHEMA}")
    runs = doc.get("runs") or []
    if not runs:
        raise ConfigError("runs", "no runs defined")
    names = [r.get("name", f"run{i}") for i, r in enumerate(runs)]
    if len(set(names)) != len(names):
        raise ConfigError("runs", "run names must be unique")
    if args.output_dir:
        doc["output_dir"] = args.output_dir
    doc.setdefault("output_dir", "runs_out")
    if args.deterministic is not None:
        doc["deterministic"] = args.deterministic
    return doc


def _build_configs(doc: dict, args) -> List[DistillRunConfig]:
    configs = []
    for i, raw in enumerate(doc["runs"]):
        raw = dict(raw)
        raw.setdefault("name", f"run{i}")
        name = raw["name"]
        if args.seed_override is not None:
            raw["seed"] = args.seed_override
        if "deterministic" in doc:
            raw.setdefault("deterministic", bool(doc["deterministic"]))
        try:
            configs.append(DistillRunConfig.from_dict(raw))
        except ConfigError as e:
            raise ConfigError(f"runs[{name}].{e.field}", str(e).split(": ", 1)[-1])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"runs[{name}]", str(e))
    return configs


def _teacher_path_for(config: DistillRunConfig, out_root: Path, index: int = 0) -> Path:
    tdir = out_root / "teachers"
    tdir.mkdir(parents=True, exist_ok=True)
    import hashlib
    key = json.dumps({
        "arch": config.teacher_spec.__dict__, "dataset": config.dataset.__dict__,
        "optimizer": config.optimizer.__dict__, "schedule": config.schedule.__dict__,
        "crossmodal": config.mode == Mode.CROSSMODAL, "index": index,
    }, sort_keys=True, default=str).encode()
    return tdir / f"teacher_{hashlib.sha256(key).hexdigest()[:12]}.pt"


def _ensure_teacher(config: DistillRunConfig, out_root: Path, index: int = 0) -> Path:
    """Train (or reuse) a teacher; shared across runs with the same
    architecture/dataset regardless of the student seed."""
    path = _teacher_path_for(config, out_root, index)
    if path.exists():
        return path
    tconf_d = config.to_dict()
    tconf_d["seed"] = stream_seed(config.dataset.generation_seed(), f"teacher{index}")
    tconf_d["name"] = f"teacher{index}"
    tconf_d["objective"] = Objective.VANILLA.value
    tconf = DistillRunConfig.from_dict(tconf_d)
    if config.mode == Mode.CROSSMODAL:
        net, _ = _train_crossmodal_teacher(tconf)
    else:
        net, _ = train_teacher(tconf)
    save_checkpoint(net, tconf.teacher_spec, path)
    return path


def _train_crossmodal_teacher(config: DistillRunConfig):
    """Teacher for cross-modal runs trains on the first-channel view."""
    from .harness import train as train_mod
    import numpy as np
    from .harness.models import build_model
    from .harness.config import stream_seed as ss

    data = get_dataset(config.dataset)
    views = channel_split_views(data.teacher_x)
    test_views = channel_split_views(data.test_x)
    spec = config.teacher_spec
    if spec.in_channels != views.view_teacher.shape[1]:
        raise ConfigError("teacher_spec.in_channels",
                          f"must be {views.view_teacher.shape[1]} for the teacher modality")
    import torch
    net = build_model(spec, ss(config.seed, "teacher_init"))
    opt = torch.optim.SGD(net.parameters(), lr=config.optimizer.lr,
                          momentum=config.optimizer.momentum,
                          weight_decay=config.optimizer.weight_decay)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(ss(config.seed, "data_order"))))
    from .core import cross_entropy
    for epoch in range(config.schedule.total_epochs):
        for g in opt.param_groups:
            g["lr"] = config.schedule.lr_at(config.optimizer.lr, epoch)
        perm = rng.permutation(views.view_teacher.shape[0])
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            loss = cross_entropy(net(views.view_teacher[idx]), data.teacher_y[idx],
                                 from_logits=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    acc = train_mod.evaluate_accuracy(net, test_views.view_teacher, data.test_y)
    return net, acc


def _execute_run(config: DistillRunConfig, out_root: Path, teacher_paths: List[Path]) -> None:
    run_dir = out_root / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=1, sort_keys=True))

    if config.mode == Mode.ENSEMBLE:
        student, record = ensemble_distill(config, [str(p) for p in teacher_paths])
    elif config.mode == Mode.CROSSMODAL:
        data = get_dataset(config.dataset)
        paired = channel_split_views(data.train_x[:config.dataset.subset_size])
        student, record = crossmodal_distill(config, str(teacher_paths[0]), paired)
        train_views = channel_split_views(data.train_x)
        test_views = channel_split_views(data.test_x)
        probe = linear_probe(student,
                             (train_views.view_student, data.train_y,
                              test_views.view_student, data.test_y),
                             config.dataset.classes)
        record.final["student_test_acc"] = probe
    else:
        student, record = distill(config, str(teacher_paths[0]))

    record.save_json(run_dir / "record.json")
    record.save_csv(run_dir / "trace.csv")
    save_checkpoint(student, config.student_spec, run_dir / "student.pt")


def _run_worker(payload) -> Optional[str]:
    """Subprocess entry for --parallel; returns an error string or None."""
    cfg_dict, out_root, teacher_paths = payload
    try:
        config = DistillRunConfig.from_dict(cfg_dict)
        _execute_run(config, Path(out_root), [Path(p) for p in teacher_paths])
        return None
    except Exception as e:  # propagated as text across the process boundary
        return f"{type(e).__name__}: {e}"


def cmd_train(args) -> int:
    try:
        doc = _load_experiment(args.experiment_file, args)
        configs = _build_configs(doc, args)
    except ConfigError as e:
        _err(f"config error: {e}")
        return EXIT_CONFIG
    out_root = Path(doc["output_dir"])
    out_root.mkdir(parents=True, exist_ok=True)

    jobs = []
    for config in configs:
        try:
            if config.teacher_checkpoint:
                teacher_paths = [Path(config.teacher_checkpoint)]
                if not teacher_paths[0].exists():
                    raise ConfigError("teacher_checkpoint",
                                      f"no such file: {config.teacher_checkpoint}")
            else:
                k = config.n_teachers if config.mode == Mode.ENSEMBLE else 1
                teacher_paths = [_ensure_teacher(config, out_root, i) for i in range(k)]
        except ConfigError as e:
            _err(f"config error in run '{config.name}': {e}")
            return EXIT_CONFIG
        except DistillkitError as e:
            _err(f"run '{config.name}' failed during teacher training: {e}")
            return EXIT_RUNTIME
        jobs.append((config, teacher_paths))

    if args.parallel and args.parallel > 1 and len(jobs) > 1:
        payloads = [(c.to_dict(), str(out_root), [str(p) for p in tp])
                    for c, tp in jobs]
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for (config, _), err in zip(jobs, pool.map(_run_worker, payloads)):
                if err:
                    _err(f"run '{config.name}' failed: {err}")
                    return EXIT_RUNTIME
    else:
        for config, teacher_paths in jobs:
            try:
                _execute_run(config, out_root, teacher_paths)
            except DistillkitError as e:
                _err(f"run '{config.name}' failed: {e}")
                return EXIT_RUNTIME
    return EXIT_OK


def _parse_float_list(text: str, field: str) -> List[float]:
    try:
        return [float(v) for v in str(text).split(",") if v != ""]
    except ValueError:
        raise ConfigError(field, f"cannot parse {text!r} as comma-separated numbers")


def cmd_certify(args) -> int:
    try:
        corrs = _parse_float_list(args.correlations, "correlations")
        n_list = [int(v) for v in _parse_float_list(args.n_negatives, "n_negatives")]
        if not corrs or not n_list:
            raise ConfigError("certify", "need at least one correlation and one N")
        for c in corrs:
            if not abs(c) < 1:
                raise ConfigError("correlations", f"|correlation| must be < 1, got {c}")
        for n in n_list:
            if n < 1:
                raise ConfigError("n_negatives", "must be positive")
    except ConfigError as e:
        _err(f"config error: {e}")
        return EXIT_CONFIG

    cases = []
    by_corr = {}
    try:
        for c in corrs:
            for n in sorted(n_list):
                est = milab.certify_bound_on_gaussians(
                    c, args.dims, n, train_steps=args.train_steps, seed=args.seed)
                true_mi = milab.gaussian_mi_oracle(c, args.dims) if c != 0 else 0.0
                ok = est.value <= true_mi + 2.0 * est.stderr
                cases.append({"correlation": c, "dims": args.dims, "n_negatives": n,
                              "true_mi": true_mi, "bound": est.value,
                              "stderr": est.stderr, "pass": bool(ok)})
                by_corr.setdefault(c, []).append(est)
    except (DomainError, DistillkitError) as e:
        _err(f"certification failed: {e}")
        return EXIT_CONFIG

    monotone = True
    for c, ests in by_corr.items():
        for a, b in zip(ests, ests[1:]):
            slack = 2.0 * math.sqrt(a.stderr ** 2 + b.stderr ** 2)
            if b.value < a.value - slack:
                monotone = False
    report = {"cases": cases, "monotone_in_n": monotone,
              "all_pass": all(c["pass"] for c in cases)}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
    if not report["all_pass"]:
        _err("bound violation: an estimate exceeded true MI + 2*stderr")
        return EXIT_BOUND
    return EXIT_OK


def cmd_report(args) -> int:
    paths = sorted(glob(args.records))
    if not paths:
        _err(f"no record files match {args.records!r}")
        return EXIT_CONFIG
    records = [RunRecord.load_json(p) for p in paths]
    analysis.emit_report(records, args.out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distillkit",
                                description="desk-scale distillation experiments")
    p.add_argument("--seed-override", type=int, default=None,
                   help="replace every run's seed")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="force deterministic mode for all runs")
    p.add_argument("--device", default="cpu", choices=["cpu"],
                   help="compute device (cpu-only build)")
    p.add_argument("--output-dir", default=None, help="override the output directory")
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("train", help="execute an experiment file")
    pt.add_argument("experiment_file")
    pt.add_argument("--parallel", type=int, default=0,
                    help="run independent runs in up to this many processes")
    pt.set_defaults(func=cmd_train)

    pc = sub.add_parser("certify", help="MI lower-bound certification grid")
    pc.add_argument("--correlations", default="0.0,0.5,0.9")
    pc.add_argument("--n-negatives", dest="n_negatives", default="16,64,256")
    pc.add_argument("--dims", type=int, default=1)
    pc.add_argument("--train-steps", type=int, default=300)
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--out", default="certification.json")
    pc.set_defaults(func=cmd_certify)

    pr = sub.add_parser("report", help="aggregate run records into a report")
    pr.add_argument("--records", required=True, help="glob of record JSON files")
    pr.add_argument("--out-dir", required=True)
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
