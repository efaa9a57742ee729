"""Metrics, threshold calibration and experiment drivers.

Per-problem seeds are ``derive_seed(master_seed, problem_id, i)``; the tree
for a problem uses ``i = 0``, which makes a one-leaf tree reproduce the
first multi-chain sample exactly.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .errors import CalibrationError, ConfigError, DecodeError, InputError, ParseError, UndefinedAUROCError
from .model import LanguageModel
from .sampling import SamplerConfig, derive_seed
from .tree import (
    BranchConfig,
    DecodingTree,
    LeafSequence,
    collect_leaves,
    decode_chain_tree,
    decode_tree,
)
from .uncertainty import (
    ExtractionRule,
    answer_distribution,
    extract_answer,
    lexical_similarity_uncertainty,
    ln_predictive_entropy,
    majority_vote,
    predictive_entropy,
)

Method = Literal["entropy_tree", "multi_chain", "ablation_late_percentile", "ablation_random_branch"]
METHODS = ("entropy_tree", "multi_chain", "ablation_late_percentile", "ablation_random_branch")
METRICS = ("pe", "ln_pe", "lexsim")
# semantic entropy and p(True) need an external model; their slots stay null
RESERVED_METRICS = ("semantic_entropy", "p_true")


# ---------------------------------------------------------------------------
# metrics


def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    if not 0 <= c <= n:
        raise InputError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise InputError(f"need 1 <= k <= n, got k={k}, n={n}")
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k, ``1 - C(n-c, k) / C(n, k)``, evaluated exactly."""
    return float(pass_at_k_exact(n, c, k))


def _split(scores: Iterable[tuple[float, bool]]) -> tuple[list[float], list[float]]:
    bad, good = [], []
    for u, incorrect in scores:
        (bad if incorrect else good).append(float(u))
    if not bad or not good:
        raise UndefinedAUROCError("AUROC needs at least one correct and one incorrect record")
    return bad, good


def auroc_fraction(scores: Iterable[tuple[float, bool]]) -> Fraction:
    """P(uncertainty of an incorrect record > that of a correct one), ties count 1/2."""
    bad, good = _split(scores)
    good.sort()
    half_wins = 0
    for u in bad:
        lo = bisect.bisect_left(good, u)
        hi = bisect.bisect_right(good, u)
        half_wins += 2 * lo + (hi - lo)
    return Fraction(half_wins, 2 * len(bad) * len(good))


def auroc(scores: Iterable[tuple[float, bool]]) -> float:
    return float(auroc_fraction(scores))


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    if not values:
        raise InputError("percentile of an empty list")
    if not 0 < q <= 100:
        raise InputError("q must lie in (0, 100]")
    ordered = sorted(values)
    rank = math.ceil(Fraction(q) / 100 * len(ordered))
    return ordered[max(rank, 1) - 1]


@dataclass(frozen=True)
class Thresholds:
    tau: float
    delta: float
    q: float
    n_entropy: int
    n_importance: int


def pooled_step_stats(tree: DecodingTree) -> tuple[list[float], list[float]]:
    hs, imps = [], []
    for node in tree.nodes():
        if node.token is None:
            continue
        hs.append(node.entropy)
        if node.importance is not None:
            imps.append(node.importance)
    return hs, imps


def calibrate_thresholds(
    model: LanguageModel,
    prompts: Sequence[Sequence[int]],
    sampler: SamplerConfig,
    q: float,
    *,
    seed: int = 0,
    max_tokens: int = 256,
) -> Thresholds:
    """Chain-decode every prompt and take the q-th percentile of pooled entropy and importance.

    Statistics are pooled globally over the calibration set. When the
    backend reports no importance at all, ``delta`` is 0.
    """
    if not prompts:
        raise CalibrationError("no calibration prompts")
    hs: list[float] = []
    imps: list[float] = []
    for i, prompt in enumerate(prompts):
        tree = decode_chain_tree(model, prompt, sampler, max_tokens, derive_seed(seed, "calibration", i))
        h, imp = pooled_step_stats(tree)
        hs += h
        imps += imp
    if not hs:
        raise CalibrationError("calibration generated no tokens")
    tau = percentile(hs, q)
    delta = percentile(imps, q) if imps else 0.0
    return Thresholds(tau, delta, q, len(hs), len(imps))


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class ProblemRecord:
    id: str
    prompt: str
    gold: str


@dataclass
class SampleRecord:
    problem_id: str
    method: str
    n: int
    c: int
    uncertainty: float
    voted_correct: bool
    voted: str = ""
    answers: list[str] = field(default_factory=list)
    scores: dict[str, float | None] = field(default_factory=dict)
    branch_count: int = 0
    steps: int = 0
    branch_depths: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.c <= self.n:
            raise InputError(f"record {self.problem_id}: need 0 <= c <= n")

    def pass_at(self, k: int) -> float:
        """pass@k with k capped at the number of generations actually produced."""
        return pass_at_k(self.n, self.c, min(k, self.n))


@dataclass
class EvalReport:
    method: str
    records: list[SampleRecord]
    k_max: int
    config: dict = field(default_factory=dict)
    master_seed: int = 0

    def pass_at_k_curve(self) -> list[tuple[int, float]]:
        """Mean over problems of pass@k for k = 1..k_max."""
        if not self.records:
            return []
        return [(k, sum(r.pass_at(k) for r in self.records) / len(self.records)) for k in range(1, self.k_max + 1)]

    def mean_pass_at(self, k: int) -> float:
        return sum(r.pass_at(k) for r in self.records) / len(self.records)

    def auroc_by_metric(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for metric in METRICS:
            pairs = [(r.scores[metric], not r.voted_correct) for r in self.records if r.scores.get(metric) is not None]
            try:
                out[metric] = auroc(pairs)
            except UndefinedAUROCError:
                out[metric] = None
        return out

    def majority_accuracy(self) -> float:
        return sum(r.voted_correct for r in self.records) / len(self.records)

    def success_rate(self) -> float:
        """Fraction of problems with at least one correct generation."""
        return sum(r.c > 0 for r in self.records) / len(self.records)

    def branch_rate(self) -> float:
        steps = sum(r.steps for r in self.records)
        return sum(r.branch_count for r in self.records) / steps if steps else 0.0

    def mean_branch_depth(self) -> float | None:
        depths = [d for r in self.records for d in r.branch_depths]
        return sum(depths) / len(depths) if depths else None

    # serialization: header line, then one record per line
    def to_jsonl(self) -> str:
        header = {
            "kind": "header",
            "method": self.method,
            "k_max": self.k_max,
            "master_seed": self.master_seed,
            "config": self.config,
        }
        lines = [json.dumps(header)]
        lines += [json.dumps({"kind": "record", **asdict(r)}) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str, source: str = "<string>") -> EvalReport:
        header = None
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj.pop("kind")
                if kind == "header":
                    header = obj
                elif kind == "record":
                    records.append(SampleRecord(**obj))
                else:
                    raise ValueError(f"unknown kind {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                raise ParseError(f"{source}:{lineno}: {exc}") from None
        if header is None:
            raise ParseError(f"{source}: missing header line")
        return cls(header["method"], records, header["k_max"], header.get("config", {}), header.get("master_seed", 0))


def passk_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "k", "mean_pass_at_k"])
    for rep in reports:
        for k, v in rep.pass_at_k_curve():
            w.writerow([rep.method, k, repr(v)])
    return buf.getvalue()


def auroc_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric", "auroc"])
    for rep in reports:
        for metric, v in rep.auroc_by_metric().items():
            w.writerow([rep.method, metric, "" if v is None else repr(v)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# datasets


def parse_dataset(lines: Iterable[str], source: str = "<string>") -> list[ProblemRecord]:
    """One JSON object per line with fields ``id``, ``prompt`` and ``answer``."""
    problems = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{where}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ParseError(f"{where}: record must be a JSON object")
        for key in ("id", "prompt", "answer"):
            if not isinstance(obj.get(key), str):
                raise ParseError(f"{where}: field {key!r} must be a string")
        if obj["id"] in seen:
            raise ParseError(f"{where}: duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        problems.append(ProblemRecord(obj["id"], obj["prompt"], obj["answer"].strip()))
    return problems


def load_dataset(path: str | Path) -> list[ProblemRecord]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_dataset(fh, str(path))


def dump_dataset(problems: Sequence[ProblemRecord]) -> str:
    return "".join(json.dumps({"id": p.id, "prompt": p.prompt, "answer": p.gold}) + "\n" for p in problems)


# ---------------------------------------------------------------------------
# drivers


def score_generations(
    problem: ProblemRecord, method: str, leaves: Sequence[LeafSequence], rule: ExtractionRule
) -> SampleRecord:
    answers = [extract_answer(leaf.text, rule) for leaf in leaves]
    dist = answer_distribution(answers)
    pe = predictive_entropy(dist)
    voted = majority_vote(answers)
    scores: dict[str, float | None] = {
        "pe": pe,
        "ln_pe": ln_predictive_entropy(leaves),
        # a single generation agrees with itself
        "lexsim": lexical_similarity_uncertainty(leaves) if len(leaves) >= 2 else 0.0,
    }
    scores.update(dict.fromkeys(RESERVED_METRICS))
    return SampleRecord(
        problem_id=problem.id,
        method=method,
        n=len(leaves),
        c=sum(a == problem.gold for a in answers),
        uncertainty=pe,
        voted_correct=voted == problem.gold,
        voted=voted,
        answers=answers,
        scores=scores,
    )


def _tree_record(problem: ProblemRecord, method: str, tree: DecodingTree, rule: ExtractionRule) -> SampleRecord:
    rec = score_generations(problem, method, collect_leaves(tree), rule)
    branched = tree.branched_nodes()
    rec.branch_count = len(branched)
    rec.steps = tree.steps
    rec.branch_depths = sorted(n.depth for n in branched)
    return rec


def _run_trees(
    dataset: Sequence[ProblemRecord],
    model: LanguageModel,
    config: BranchConfig,
    rule: ExtractionRule,
    master_seed: int,
    method: str,
    *,
    jobs: int = 1,
    branch_rate: float | None = None,
) -> EvalReport:
    records = []
    for problem in dataset:
        prompt = model.vocab.encode(problem.prompt)
        seed = derive_seed(master_seed, problem.id, 0)
        try:
            tree = decode_tree(model, prompt, config, seed, jobs=jobs, branch_rate=branch_rate)
        except DecodeError as exc:
            raise DecodeError(f"problem {problem.id!r}: {exc}", exc.path_id, exc.prefix) from exc
        records.append(_tree_record(problem, method, tree, rule))
    cfg = {"branch": config.to_dict(), "rule": asdict(rule)}
    if branch_rate is not None:
        cfg["branch_rate"] = branch_rate
    return EvalReport(method, records, config.n_tree, cfg, master_seed)


def run_entropy_tree(
    dataset: Sequence[ProblemRecord],
    model: LanguageModel,
    config: BranchConfig,
    rule: ExtractionRule,
    master_seed: int,
    *,
    jobs: int = 1,
) -> EvalReport:
    return _run_trees(dataset, model, config, rule, master_seed, "entropy_tree", jobs=jobs)


def run_multi_chain(
    dataset: Sequence[ProblemRecord],
    model: LanguageModel,
    N: int,
    sampler: SamplerConfig,
    rule: ExtractionRule,
    master_seed: int,
    *,
    max_tokens: int = 256,
) -> EvalReport:
    if N < 1:
        raise InputError("N must be >= 1")
    records = []
    for problem in dataset:
        prompt = model.vocab.encode(problem.prompt)
        leaves = []
        steps = 0
        for i in range(N):
            try:
                tree = decode_chain_tree(model, prompt, sampler, max_tokens, derive_seed(master_seed, problem.id, i))
            except DecodeError as exc:
                raise DecodeError(f"problem {problem.id!r}, sample {i}: {exc}", exc.path_id, exc.prefix) from exc
            leaves += collect_leaves(tree)
            steps += tree.steps
        rec = score_generations(problem, "multi_chain", leaves, rule)
        rec.steps = steps
        records.append(rec)
    cfg = {"N": N, "sampler": asdict(sampler), "max_tokens": max_tokens, "rule": asdict(rule)}
    return EvalReport("multi_chain", records, N, cfg, master_seed)


def run_ablation(
    dataset: Sequence[ProblemRecord],
    model: LanguageModel,
    config: BranchConfig,
    rule: ExtractionRule,
    mode: Literal["late_percentile", "random_branch"],
    master_seed: int,
    *,
    paired: EvalReport | None = None,
    calibration_prompts: Sequence[Sequence[int]] | None = None,
    q: float = 90.0,
    jobs: int = 1,
) -> EvalReport:
    """The two branching ablations.

    ``late_percentile`` recalibrates both thresholds at the ``q``-th
    percentile (default 90) and reruns Entropy-Tree. ``random_branch``
    forks with a fixed per-step probability equal to the branch frequency
    observed in ``paired`` (an entropy-guided run on the same data).
    """
    if mode == "late_percentile":
        if calibration_prompts is None:
            calibration_prompts = [model.vocab.encode(p.prompt) for p in dataset]
        th = calibrate_thresholds(
            model, calibration_prompts, config.sampler, q, seed=master_seed, max_tokens=config.max_tokens
        )
        late = BranchConfig(th.tau, th.delta, config.b, config.n_tree, config.max_tokens, config.sampler)
        rep = _run_trees(dataset, model, late, rule, master_seed, "ablation_late_percentile", jobs=jobs)
        rep.config["calibration_q"] = q
        return rep
    if mode == "random_branch":
        if paired is None:
            raise ConfigError("random_branch ablation needs a paired entropy-guided report")
        rate = paired.branch_rate()
        return _run_trees(
            dataset, model, config, rule, master_seed, "ablation_random_branch", jobs=jobs, branch_rate=rate
        )
    raise ConfigError(f"unknown ablation mode {mode!r}")
