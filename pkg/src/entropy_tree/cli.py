"""Command-line entry point: ``entropy-tree {calibrate,run,train-ngram,report}``.

Experiments are described by a JSON config file; command-line flags
override individual keys. Relative paths inside a config file resolve
against the file's directory. Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from .errors import CalibrationError, ConfigError, DecodeError, EntropyTreeError, InputError
from .eval import (
    METHODS,
    EvalReport,
    auroc_csv,
    calibrate_thresholds,
    load_dataset,
    passk_csv,
    run_ablation,
    run_entropy_tree,
    run_multi_chain,
)
from .model import LanguageModel, load_model, train_ngram
from .sampling import STRATEGIES, SamplerConfig, derive_seed
from .tree import BranchConfig, decode_tree, tree_to_json
from .uncertainty import ExtractionRule

OUTPUT_ENV = "ENTROPY_TREE_OUTPUT_DIR"

EXIT_INPUT = 2
EXIT_CALIBRATION = 3
EXIT_DECODE = 4


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_bundle(out_dir: Path, files: dict[str, str]) -> None:
    """Stage every file, then move them into ``out_dir``; nothing is written on failure."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=out_dir, prefix=".stage-"))
    try:
        for name, text in files.items():
            target = stage / name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        for name in files:
            (out_dir / name).parent.mkdir(parents=True, exist_ok=True)
            os.replace(stage / name, out_dir / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


# ---------------------------------------------------------------------------
# configuration


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: top level must be an object")
    base = p.parent
    for section, key in (("model", "path"), ("calibration", "split")):
        if isinstance(cfg.get(section), dict) and cfg[section].get(key):
            cfg[section][key] = str(base / cfg[section][key])
    for key in ("dataset", "thresholds", "output_dir"):
        if cfg.get(key):
            cfg[key] = str(base / cfg[key])
    return cfg


def _set(cfg: dict, dotted: str, value: object) -> None:
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    node = cfg
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def effective_config(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    overrides = {
        "model.kind": getattr(args, "model_kind", None),
        "model.path": getattr(args, "model", None),
        "dataset": getattr(args, "dataset", None),
        "methods": getattr(args, "methods", None),
        "branch.tau": getattr(args, "tau", None),
        "branch.delta": getattr(args, "delta", None),
        "branch.b": getattr(args, "b", None),
        "branch.n_tree": getattr(args, "n_tree", None),
        "branch.max_tokens": getattr(args, "max_tokens", None),
        "n_chains": getattr(args, "n_chains", None),
        "sampler.strategy": getattr(args, "strategy", None),
        "sampler.k": getattr(args, "top_k", None),
        "sampler.p": getattr(args, "top_p", None),
        "sampler.temperature": getattr(args, "temperature", None),
        "extraction.pattern": getattr(args, "pattern", None),
        "calibration.q": getattr(args, "q", None),
        "calibration.split": getattr(args, "calibration", None),
        "thresholds": getattr(args, "thresholds", None),
        "output_dir": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", None),
    }
    for key, value in overrides.items():
        _set(cfg, key, value)
    if isinstance(cfg.get("methods"), str):
        cfg["methods"] = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    cfg.setdefault("output_dir", os.environ.get(OUTPUT_ENV, "out"))
    if cfg.get("seed") is None:
        raise ConfigError("a master seed is required (set 'seed' in the config or pass --seed)")
    return cfg


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} {path} does not exist")
    return p


def _model(cfg: dict) -> LanguageModel:
    spec = cfg.get("model") or {}
    path = _require_file(spec.get("path"), "model file")
    return load_model(spec.get("kind", "scripted"), path)


def _sampler(cfg: dict) -> SamplerConfig:
    return SamplerConfig(**(cfg.get("sampler") or {}))


def _rule(cfg: dict) -> ExtractionRule:
    return ExtractionRule(**(cfg.get("extraction") or {}))


def _branch(cfg: dict, tau: float, delta: float) -> BranchConfig:
    b = cfg.get("branch") or {}
    return BranchConfig(
        tau=tau,
        delta=delta,
        b=b.get("b", 2),
        n_tree=b.get("n_tree", 20),
        max_tokens=b.get("max_tokens", 256),
        sampler=_sampler(cfg),
    )


def _prompts(model: LanguageModel, path: Path) -> list[tuple[int, ...]]:
    return [model.vocab.encode(p.prompt) for p in load_dataset(path)]


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    model = _model(cfg)
    cal = cfg.get("calibration") or {}
    split = _require_file(cal.get("split"), "calibration split")
    prompts = _prompts(model, split)
    if not prompts:
        raise CalibrationError(f"calibration split {split} is empty")
    q = float(cal.get("q", 80.0))
    max_tokens = (cfg.get("branch") or {}).get("max_tokens", 256)
    th = calibrate_thresholds(model, prompts, _sampler(cfg), q, seed=int(cfg["seed"]), max_tokens=max_tokens)
    doc = {"tau": th.tau, "delta": th.delta, "q": th.q, "n_entropy": th.n_entropy, "n_importance": th.n_importance, "seed": cfg["seed"]}
    out = Path(cfg.get("thresholds") or Path(cfg["output_dir"]) / "thresholds.json")
    atomic_write(out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"pooled {th.n_entropy} entropies, {th.n_importance} importances at q={q:g}")
    print(f"tau={th.tau:.6g} delta={th.delta:.6g} -> {out}")
    return 0


def _thresholds(cfg: dict) -> tuple[float, float]:
    b = cfg.get("branch") or {}
    if b.get("tau") is not None:
        return float(b["tau"]), float(b.get("delta", 0.0))
    path = cfg.get("thresholds")
    if path and Path(path).is_file():
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return float(doc["tau"]), float(b.get("delta", doc["delta"]))
    raise ConfigError(
        "entropy_tree needs thresholds: run `entropy-tree calibrate` and pass --thresholds, "
        "or give --tau/--delta explicitly"
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    methods = cfg.get("methods") or ["entropy_tree", "multi_chain"]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
    model = _model(cfg)
    dataset_path = _require_file(cfg.get("dataset"), "dataset")
    dataset = load_dataset(dataset_path)
    if not dataset:
        raise InputError(f"dataset {dataset_path} is empty")
    seed = int(cfg["seed"])
    jobs = int(cfg.get("jobs", 1))
    rule = _rule(cfg)
    needs_tree = {"entropy_tree", "ablation_random_branch", "ablation_late_percentile"} & set(methods)
    branch = _branch(cfg, *_thresholds(cfg)) if needs_tree - {"ablation_late_percentile"} else _branch(cfg, 0.0, 0.0)

    reports: list[EvalReport] = []
    files: dict[str, str] = {}
    guided = None
    for method in methods:
        if method == "entropy_tree":
            rep = guided = run_entropy_tree(dataset, model, branch, rule, seed, jobs=jobs)
        elif method == "multi_chain":
            n = int(cfg.get("n_chains", branch.n_tree))
            rep = run_multi_chain(dataset, model, n, branch.sampler, rule, seed, max_tokens=branch.max_tokens)
        elif method == "ablation_late_percentile":
            cal = cfg.get("calibration") or {}
            prompts = _prompts(model, Path(cal["split"])) if cal.get("split") else None
            q = float(cal.get("late_q", 90.0))
            rep = run_ablation(dataset, model, branch, rule, "late_percentile", seed, calibration_prompts=prompts, q=q, jobs=jobs)
        else:
            if guided is None:
                guided = run_entropy_tree(dataset, model, branch, rule, seed, jobs=jobs)
            rep = run_ablation(dataset, model, branch, rule, "random_branch", seed, paired=guided, jobs=jobs)
        reports.append(rep)
        files[f"{method}.report.jsonl"] = rep.to_jsonl()

    if args.dump_trees:
        for p in dataset:
            tree = decode_tree(model, model.vocab.encode(p.prompt), branch, derive_seed(seed, p.id, 0), jobs=jobs)
            files[f"trees/{p.id}.tree.json"] = tree_to_json(tree)
    files["passk.csv"] = passk_csv(reports)
    files["auroc.csv"] = auroc_csv(reports)
    files["config.effective.json"] = json.dumps(cfg, indent=1, sort_keys=True) + "\n"
    out = Path(cfg["output_dir"])
    write_bundle(out, files)
    print_summary(reports)
    print(f"wrote {len(files)} files to {out}")
    return 0


def print_summary(reports: Sequence[EvalReport]) -> None:
    k_max = max((rep.k_max for rep in reports), default=1)
    ks = sorted({k for k in (1, 10, 20) if k <= k_max} | {k_max})
    metrics = ("pe", "ln_pe", "lexsim")
    print(f"{'method':<26}" + "".join(f"{f'pass@{k}':>9}" for k in ks) + f"{'maj.acc':>9}" + "".join(f"{'AUROC-' + m:>13}" for m in metrics))
    for rep in reports:
        au = rep.auroc_by_metric()
        passes = "".join(f"{rep.mean_pass_at(k):>9.4f}" for k in ks)
        cells = "".join(f"{('n/a' if au[m] is None else f'{au[m]:.4f}'):>13}" for m in metrics)
        print(f"{rep.method:<26}{passes}{rep.majority_accuracy():>9.4f}{cells}")


def cmd_train_ngram(args: argparse.Namespace) -> int:
    corpus_path = Path(args.corpus)
    if not corpus_path.is_file():
        raise InputError(f"corpus {corpus_path} does not exist")
    lines = [ln.split() for ln in corpus_path.read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise InputError(f"corpus {corpus_path} is empty")
    model = train_ngram(lines, args.order, args.alpha, eos=args.eos, append_eos=args.append_eos)
    atomic_write(args.out, model.to_json())
    print(f"trained order-{args.order} model, V={len(model.vocab)}, {len(model.counts)} contexts -> {args.out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    paths: list[Path] = []
    for p in map(Path, args.reports):
        paths += sorted(p.glob("*.report.jsonl")) if p.is_dir() else [p]
    if not paths:
        raise InputError("no report files found")
    order = {m: i for i, m in enumerate(METHODS)}
    reports = [EvalReport.from_jsonl(p.read_text(encoding="utf-8"), str(p)) for p in paths]
    reports.sort(key=lambda r: order.get(r.method, len(order)))
    out = Path(args.out) if args.out else (paths[0].parent if len(args.reports) == 1 else Path("."))
    write_bundle(out, {"passk.csv": passk_csv(reports), "auroc.csv": auroc_csv(reports)})
    print_summary(reports)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its keys")
    p.add_argument("--model", help="model file path")
    p.add_argument("--model-kind", choices=("scripted", "ngram"), help="model backend (default scripted)")
    p.add_argument("--seed", type=int, help="master seed (required here or in the config)")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./out)")
    p.add_argument("--max-tokens", type=int, help="per-path generation cap (default 256)")
    p.add_argument("--strategy", choices=STRATEGIES, help="sampler for non-branching steps")
    p.add_argument("--top-k", type=int, help="top-k truncation (default: full vocabulary)")
    p.add_argument("--top-p", type=float, help="top-p truncation (default 1.0)")
    p.add_argument("--temperature", type=float, help="sampling temperature (default 1.0)")
    p.add_argument("--thresholds", help="threshold file written by `calibrate`")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entropy-tree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="percentile-calibrate tau/delta on a calibration split")
    _common(p)
    p.add_argument("--calibration", help="calibration split (dataset file; answers ignored)")
    p.add_argument("--q", type=float, help="percentile in (0, 100] (default 80)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run decoding methods on a dataset and write reports")
    _common(p)
    p.add_argument("--dataset", help="dataset file (JSON lines with id, prompt, answer)")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--tau", type=float, help="entropy threshold in nats (overrides --thresholds)")
    p.add_argument("--delta", type=float, help="importance threshold (overrides --thresholds)")
    p.add_argument("--b", type=int, help="branching factor (default 2)")
    p.add_argument("--n-tree", type=int, help="leaf budget (default 20)")
    p.add_argument("--n-chains", type=int, help="multi-chain sample count (default n_tree)")
    p.add_argument("--pattern", help="answer regex with one capture group")
    p.add_argument("--calibration", help="calibration split for the late-percentile ablation")
    p.add_argument("--jobs", type=int, help="scoring threads per tree; results do not depend on it")
    p.add_argument("--dump-trees", action="store_true", help="write one tree file per problem")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train-ngram", help="train an add-alpha n-gram model on a corpus")
    p.add_argument("corpus", help="whitespace-tokenized corpus, one sentence per line")
    p.add_argument("--order", type=int, default=2, help="n-gram order (default 2)")
    p.add_argument("--alpha", type=float, default=1.0, help="additive smoothing constant (default 1)")
    p.add_argument("--eos", default="<eos>", help="end-of-sequence token (default <eos>)")
    p.add_argument("--append-eos", action="store_true", help="terminate every corpus line with EOS")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train_ngram)

    p = sub.add_parser("report", help="re-render passk.csv and auroc.csv from stored reports")
    p.add_argument("reports", nargs="+", help="report files or directories containing *.report.jsonl")
    p.add_argument("--out", help="directory for the CSVs (default: alongside the reports)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except DecodeError as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except (InputError, ConfigError, EntropyTreeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
