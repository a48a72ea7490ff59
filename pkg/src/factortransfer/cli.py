"""Command-line frontend: ``factortransfer <command> [--config FILE] [--key value ...]``.

Every configuration key is also accepted as a ``--key`` flag (hyphens or
underscores) and overrides the file value.  Exit codes: 0 success,
1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import Checkpoint
from .config import FIELD_TYPES, RunConfig, UsageError, coerce, load_config
from .data import (Dataset, channel_stats, load_cifar10_binary, load_mnist_idx, read_norm_sidecar,
                   synth_dataset, write_norm_sidecar)
from .errors import FactorTransferError
from .losses import METHOD_LABELS, METHODS
from .training import ABLATIONS, derive_seed, evaluate, train_paraphraser, train_student, train_teacher

COMMANDS = ("train-teacher", "train-paraphraser", "train-student", "compare", "gradcheck", "eval")


# ---------------------------------------------------------------------------
# argument handling


def _flag_type(name):
    def convert(raw: str):
        try:
            return coerce(name, raw)
        except UsageError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    convert.__name__ = name
    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factortransfer",
                                     description="Factor transfer, KD and AT training on a numpy autodiff engine.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value configuration file")
        if command == "compare":
            p.add_argument("--auto", action="store_true", help="build missing teacher/paraphraser artifacts")
        if command == "gradcheck":
            p.add_argument("--ops", help="comma-separated subset of checks to run")
            p.add_argument("--instances", type=int, default=50, help="random instances per check")
        for name in FIELD_TYPES:
            flags = [f"--{name.replace('_', '-')}"]
            if "_" in name:
                flags.append(f"--{name}")
            p.add_argument(*flags, dest=f"cfg_{name}", type=_flag_type(name), default=None)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {key[4:]: value for key, value in vars(args).items()
                 if key.startswith("cfg_") and value is not None}
    cfg = load_config(args.config, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.method not in METHODS:
        raise UsageError(f"unknown method {cfg.method!r}; choose from {', '.join(METHODS)}")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) in methods: {', '.join(bad)}")
    if cfg.ablation not in ABLATIONS:
        raise UsageError(f"unknown ablation {cfg.ablation!r}; choose from {', '.join(ABLATIONS)}")
    if cfg.dataset not in ("synthetic", "cifar10", "mnist"):
        raise UsageError(f"unknown dataset {cfg.dataset!r}; choose synthetic, cifar10 or mnist")
    if not cfg.seeds:
        raise UsageError("seeds must list at least one seed")


# ---------------------------------------------------------------------------
# data


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        train = synth_dataset(cfg.synth_per_class, cfg.synth_classes, cfg.synth_size,
                              seed=derive_seed(cfg.data_seed, "synth_train"), noise=cfg.synth_noise)
        test = synth_dataset(cfg.synth_test_per_class, cfg.synth_classes, cfg.synth_size,
                             seed=derive_seed(cfg.data_seed, "synth_test"), noise=cfg.synth_noise, split="test")
        return train, test
    if not cfg.data_path:
        raise FileNotFoundError(f"dataset {cfg.dataset!r} needs data_path")
    root = Path(cfg.data_path)
    if not root.is_dir():
        raise FileNotFoundError(f"data_path does not exist: {root}")
    if cfg.dataset == "cifar10":
        return load_cifar10_binary(root, cfg.train_subset or None, cfg.test_subset or None)
    train = load_mnist_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte", "train")
    test = load_mnist_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte", "test")
    return train.subset(cfg.train_subset or None), test.subset(cfg.test_subset or None)


_DATA_KEYS = ("dataset", "data_path", "train_subset", "synth_per_class", "synth_classes", "synth_size",
              "synth_noise", "data_seed")


def normalization(cfg: RunConfig, train: Dataset, out: Path) -> tuple[np.ndarray, np.ndarray]:
    """Channel statistics of the training set, cached in a sidecar keyed by the data settings."""
    key = "|".join(f"{k}={getattr(cfg, k)}" for k in _DATA_KEYS)
    path = out / f"norm_{cfg.dataset}_{hashlib.sha256(key.encode()).hexdigest()[:10]}.txt"
    if path.is_file():
        return read_norm_sidecar(path)
    mean, std = channel_stats(train)
    write_norm_sidecar(path, mean, std)
    return mean, std


# ---------------------------------------------------------------------------
# artifact naming


def teacher_name(seed: int) -> str:
    return f"teacher_s{seed}"


def paraphraser_name(k: float, seed: int) -> str:
    return f"paraphraser_k{k:g}_s{seed}"


def student_name(method: str, seed: int, k: float | None = None, ablation: str = "both") -> str:
    tag = method
    if "ft" in method:
        tag += f"_k{k:g}" if k is not None else ""
        if ablation != "both":
            tag += f"_{ablation}"
    return f"student_{tag}_s{seed}"


def _write_run(out: Path, stem: str, ckpt: Checkpoint, metrics, cfg: RunConfig, command: str) -> None:
    ckpt.save(out / f"{stem}.ckpt")
    metrics.write_csv(out / f"{stem}.csv", include_seconds=cfg.record_seconds)
    metrics.write_timing(out / f"{stem}.timing.log")
    resolved = cfg.to_text()
    (out / f"{stem}.cfg").write_text(f"# resolved configuration for: factortransfer {command}\n" + resolved)


def _require(path_value: str, default: Path, what: str, flag: str, reason: str) -> Checkpoint:
    if path_value:
        return Checkpoint.load(path_value)
    if default.is_file():
        return Checkpoint.load(default)
    raise UsageError(f"{reason} requires --{flag} <ckpt> (no {what} given and {default} does not exist)")


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    norm = normalization(cfg, data[0], out)
    ckpt, metrics = train_teacher(data, (cfg.teacher_depth, cfg.teacher_width), cfg.teacher_train_config(), norm)
    stem = teacher_name(cfg.seed)
    _write_run(out, stem, ckpt, metrics, cfg, "train-teacher")
    print(f"{stem}: test_error={metrics.final_test_err}% -> {out / (stem + '.ckpt')}")
    return 0


def cmd_train_paraphraser(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher = _require(cfg.teacher, out / f"{teacher_name(cfg.seed)}.ckpt", "teacher", "teacher",
                       "train-paraphraser")
    data = load_data(cfg)
    ckpt, metrics = train_paraphraser(teacher, data, cfg.factor(), cfg.paraphraser_train_config(),
                                      teacher.norm)
    stem = paraphraser_name(cfg.k, cfg.seed)
    _write_run(out, stem, ckpt, metrics, cfg, "train-paraphraser")
    print(f"{stem}: l_rec={metrics.records[-1].l_rec} -> {out / (stem + '.ckpt')}")
    return 0


def _student_inputs(cfg: RunConfig, method: str, k: float, out: Path):
    """Load the teacher and paraphraser a method needs, naming every missing one at once."""
    wanted = []
    if method != "scratch":
        wanted.append(("teacher", cfg.teacher, out / f"{teacher_name(cfg.seed)}.ckpt"))
    if "ft" in method and cfg.ablation in ("both", "para_only"):
        wanted.append(("paraphraser", cfg.paraphraser, out / f"{paraphraser_name(k, cfg.seed)}.ckpt"))
    missing = [f"--{flag} <ckpt>" for flag, given, default in wanted if not given and not default.is_file()]
    if missing:
        raise UsageError(f"{method} requires {' and '.join(missing)}")
    loaded = {flag: Checkpoint.load(given or default) for flag, given, default in wanted}
    return loaded.get("teacher"), loaded.get("paraphraser")


def cmd_train_student(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher, paraphraser = _student_inputs(cfg, cfg.method, cfg.k, out)
    data = load_data(cfg)
    norm = teacher.norm if teacher is not None else normalization(cfg, data[0], out)
    ckpt, metrics = train_student(teacher, paraphraser, data, cfg.student_train_config(),
                                  (cfg.student_depth, cfg.student_width), norm)
    stem = student_name(cfg.method, cfg.seed, cfg.k, cfg.ablation)
    _write_run(out, stem, ckpt, metrics, cfg, "train-student")
    print(f"{stem}: test_error={metrics.final_test_err}% -> {out / (stem + '.ckpt')}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise UsageError("eval requires --checkpoint <ckpt>")
    ckpt = Checkpoint.load(cfg.checkpoint)
    _, test = load_data(cfg)
    print(f"test_error={evaluate(ckpt, test)}%")
    return 0


def cmd_gradcheck(cfg: RunConfig, ops: str | None, instances: int) -> int:
    selected = [o.strip() for o in ops.split(",") if o.strip()] if ops else None
    known = {c.name for c in gradcheck.CHECKS}
    unknown = [o for o in selected or [] if o not in known]
    if unknown:
        raise UsageError(f"unknown op(s) {', '.join(unknown)}; available: {', '.join(sorted(known))}")
    results = gradcheck.run_checks(selected, instances=instances, seed=cfg.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.kind:<9}  worst={r.worst:.3e}  tol={r.tolerance:.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks under tolerance")
    return 0


def compare_runs(cfg: RunConfig, auto: bool = False) -> list[dict]:
    """Train every requested (method, k, seed) student and return one row per run."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    teacher_path = Path(cfg.teacher) if cfg.teacher else out / f"{teacher_name(cfg.seed)}.ckpt"
    needs_teacher = any(m != "scratch" for m in cfg.methods)
    if needs_teacher and not teacher_path.is_file():
        if not auto:
            raise UsageError(f"compare requires a teacher checkpoint ({teacher_path} missing; pass --auto)")
        cmd_train_teacher(cfg)
    teacher = Checkpoint.load(teacher_path) if teacher_path.is_file() else None
    ks = list(cfg.k_sweep) or [cfg.k]
    paraphrasers: dict[float, Checkpoint] = {}
    if any("ft" in m for m in cfg.methods) and cfg.ablation in ("both", "para_only"):
        for k in ks:
            path = Path(cfg.paraphraser) if cfg.paraphraser and len(ks) == 1 else \
                out / f"{paraphraser_name(k, cfg.seed)}.ckpt"
            if not path.is_file():
                if not auto:
                    raise UsageError(f"ft requires --paraphraser <ckpt> ({path} missing; pass --auto)")
                sub = RunConfig(**{**vars(cfg), "k": k, "teacher": str(teacher_path)})
                cmd_train_paraphraser(sub)
            paraphrasers[k] = Checkpoint.load(path)
    norm = teacher.norm if teacher is not None else normalization(cfg, data[0], out)
    rows = []
    for method in cfg.methods:
        for k in (ks if "ft" in method else [None]):
            for seed in cfg.seeds:
                run_cfg = RunConfig(**{**vars(cfg), "method": method, "seed": seed,
                                       "k": cfg.k if k is None else k})
                try:
                    ckpt, metrics = train_student(teacher if method != "scratch" else None,
                                                  paraphrasers.get(k), data,
                                                  run_cfg.student_train_config(),
                                                  (cfg.student_depth, cfg.student_width), norm)
                except FactorTransferError as exc:
                    where = f"method {method}" + ("" if k is None else f", k {k:g}") + f", seed {seed}"
                    raise type(exc)(f"compare run failed ({where}): {exc}") from exc
                stem = student_name(method, seed, k, cfg.ablation)
                _write_run(out, stem, ckpt, metrics, run_cfg, "compare")
                rows.append({"method": method, "k": k, "seed": seed, "test_err": metrics.final_test_err})
                print(f"{stem}: test_error={metrics.final_test_err}%", flush=True)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Run rows followed by one mean and one std row per (method, k) group."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault((row["method"], row["k"]), []).append(float(row["test_err"]))
    summary = list(rows)
    for (method, k), errs in groups.items():
        arr = np.asarray(errs, dtype=np.float64)
        summary.append({"method": method, "k": k, "seed": "mean", "test_err": float(arr.mean())})
        summary.append({"method": method, "k": k, "seed": "std", "test_err": float(arr.std())})
    return summary


def summary_csv(summary: list[dict]) -> str:
    lines = ["method,k,seed,test_err"]
    for row in summary:
        k = "" if row["k"] is None else f"{row['k']:g}"
        lines.append(f"{row['method']},{k},{row['seed']},{row['test_err']!r}")
    return "\n".join(lines) + "\n"


def format_table(summary: list[dict]) -> str:
    stats: dict[tuple, dict] = {}
    for row in summary:
        if row["seed"] in ("mean", "std"):
            stats.setdefault((row["method"], row["k"]), {})[row["seed"]] = row["test_err"]
    header = ("method", "k", "mean err %", "std")
    body = [(METHOD_LABELS.get(m, m), "" if k is None else f"{k:g}", f"{s['mean']:.2f}", f"{s['std']:.2f}")
            for (m, k), s in stats.items()]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return "\n".join(fmt.format(*r) for r in [header, *body])


def cmd_compare(cfg: RunConfig, auto: bool) -> int:
    summary = summarize(compare_runs(cfg, auto))
    path = Path(cfg.out_dir) / "compare_summary.csv"
    path.write_text(summary_csv(summary))
    print(format_table(summary))
    print(f"summary -> {path}")
    return 0


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    try:
        cfg = resolve(args)
        if args.command == "train-teacher":
            return cmd_train_teacher(cfg)
        if args.command == "train-paraphraser":
            return cmd_train_paraphraser(cfg)
        if args.command == "train-student":
            return cmd_train_student(cfg)
        if args.command == "compare":
            return cmd_compare(cfg, args.auto)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.ops, args.instances)
        return cmd_eval(cfg)
    except UsageError as exc:
        print(f"factortransfer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FactorTransferError, OSError) as exc:
        print(f"factortransfer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
