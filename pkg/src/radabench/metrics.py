"""Chain, execution, refusal and text metrics over session transcripts."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from scipy.special import betainc

from .corpus import Complexity, QAPair, TaskSpec, ground_truth_spec
from .engine import Transcript
from .tools import ToolCard, card_from_dict, usable_for
from .toolset_sim import GapKind, GroundTruthGap
from .corpus import PatientRecord
from .vocab import ToolCategory

# ---------------------------------------------------------------- chain metrics


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _category_lins(gt: TaskSpec) -> list[tuple[ToolCategory, ...]]:
    return sorted(set(gt.category_linearizations()), key=lambda lin: [c.value for c in lin])


def levenshtein_chain(pred: Sequence[ToolCategory], gt: TaskSpec) -> int:
    return min(edit_distance(list(pred), list(lin)) for lin in _category_lins(gt))


def gt_multiset(gt: TaskSpec) -> Counter:
    return Counter(gt.category_linearizations()[0])


@dataclass(frozen=True)
class Ratio:
    value: float
    degenerate: bool = False


def fdr(pred: Sequence[ToolCategory], gt: TaskSpec) -> Ratio:
    if not pred:
        return Ratio(1.0, True)
    extra = Counter(pred) - gt_multiset(gt)
    return Ratio(sum(extra.values()) / len(pred))


def tma(pred: Sequence[ToolCategory], gt: TaskSpec) -> Ratio:
    if not pred:
        return Ratio(0.0, True)
    best = 0.0
    for lin in _category_lins(gt):
        hits = sum(1 for p, g in zip(pred, lin) if p == g)
        best = max(best, hits / len(lin))
    return Ratio(best)


def ots_score(n: int, rank: int) -> float:
    if n < 1 or not 1 <= rank <= n:
        raise ValueError(f"rank {rank} outside 1..{n}")
    return (n - rank + 1) / n


def _comparable(selected: ToolCard, card: ToolCard) -> bool:
    if card.category is not selected.category:
        return False
    return selected.variant is None or card.variant is None or card.variant == selected.variant


def selection_rank(selected: ToolCard, cards: Iterable[ToolCard], record: PatientRecord) -> tuple[int, int]:
    """(N, R): applicable tools of the selected category and the selection's rank by upper bound."""
    pool = [c for c in cards if _comparable(selected, c) and usable_for(c, record)]
    if selected not in pool:
        pool.append(selected)
    rank = 1 + sum(1 for c in pool if c.upper > selected.upper)
    return len(pool), rank


def session_ots(t: Transcript, record: PatientRecord) -> tuple[float | None, list[float]]:
    """Per-step scores over Executed steps, and the mean over steps with more than one choice."""
    cards = [card_from_dict(c) for c in t.toolset]
    built = {b["step"]: card_from_dict(b["card"]) for b in t.builds if b.get("card")}
    per_step: list[float] = []
    counted: list[float] = []
    for s in t.steps:
        if s.outcome.get("kind") == "Executed":
            card = next(c for c in cards if c.name == s.outcome["tool"])
            n, r = selection_rank(card, cards, record)
            score = ots_score(n, r)
            per_step.append(score)
            if n >= 2:
                counted.append(score)
        if s.index in built:
            cards.append(built[s.index])
    if counted:
        return sum(counted) / len(counted), per_step
    # only forced choices: every selection was the best available
    return (1.0 if per_step else None), per_step


# ---------------------------------------------------------------- execution metrics


def executed_categories(t: Transcript) -> list[ToolCategory]:
    return [ToolCategory(e["category"]) for e in t.executed_chain]


def plan_categories(t: Transcript) -> list[ToolCategory] | None:
    if t.plan is None:
        return None
    return [ToolCategory(c) for c in t.plan["tool_chain"]]


def ecr_pfsp(t: Transcript, gt: TaskSpec) -> tuple[bool, float | None]:
    io_error = any(s.outcome.get("kind") == "IOError" for s in t.steps)
    kind = (t.terminal or {}).get("kind")
    if not io_error and kind == "Concluded":
        return True, None
    done = 0
    for s in t.steps:
        if s.outcome.get("kind") == "IOError":
            break
        if s.outcome.get("kind") == "Executed":
            done += 1
    return False, min(1.0, done / gt.length)


def thr_mhr(t: Transcript, gt: TaskSpec) -> tuple[bool, bool]:
    cats = executed_categories(t)
    concluded = (t.terminal or {}).get("kind") == "Concluded"
    target = concluded and bool(cats) and cats[-1] in gt.final_categories
    key = gt.milestone_key.value
    milestone = any(key in s.values for s in t.steps)
    return target, milestone


def _same(a: str | None, b: str | None) -> bool:
    return (a or "").strip().lower() == (b or "").strip().lower()


@dataclass(frozen=True)
class RefusalFlags:
    uar: bool
    ugr: bool
    false_refusal: bool


def unsolvability_assess(t: Transcript, gap: GroundTruthGap | None) -> RefusalFlags:
    term = t.terminal or {}
    refused = term.get("kind") == "NoCallStop"
    if gap is None:
        return RefusalFlags(False, False, refused)
    if not refused:
        return RefusalFlags(False, False, False)
    nc = term["nocall"]
    ok = nc.get("ability") == gap.kind.value and nc.get("category") == gap.category.value
    if ok and gap.kind is not GapKind.CATEGORY_MISSING:
        ok = _same(nc.get("anatomy"), gap.anatomy) and _same(nc.get("modality"), gap.modality)
    return RefusalFlags(True, ok, False)


def built_successfully(t: Transcript) -> bool:
    return any(b.get("success") for b in t.builds)


def task_completion(ecr: bool, thr: bool, uar: bool, ugr: bool, gap_present: bool, rescued: bool = False) -> bool:
    if not gap_present or rescued:
        return ecr and thr
    return uar and ugr


# ---------------------------------------------------------------- text metrics


class EmptyText(ValueError):
    pass


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], order: int = 4) -> float:
    log_sum = 0.0
    for n in range(1, order + 1):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        matched = sum((cand & ref).values())
        total = sum(cand.values())
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        else:
            p = (matched + 1) / (total + 1)
        log_sum += math.log(p)
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_sum / order)


@dataclass(frozen=True)
class TextScores:
    bleu: float
    rouge: float
    f1: float


def text_metrics(candidate: str, reference: str) -> TextScores:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        raise EmptyText("candidate and reference must contain at least one token")
    overlap = sum((Counter(cand) & Counter(ref)).values())
    precision = overlap / len(cand)
    recall = overlap / len(ref)
    f1 = 0.0 if overlap == 0 else 2 * precision * recall / (precision + recall)
    return TextScores(bleu(cand, ref), recall, f1)


# ---------------------------------------------------------------- rows


@dataclass
class MetricRow:
    qa_id: str
    record_id: str
    task: int
    complexity: str
    condition: str | None
    backend: str
    strategy: str
    values: dict = field(default_factory=dict)
    ots_steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "record_id": self.record_id,
            "task": self.task,
            "complexity": self.complexity,
            "condition": self.condition,
            "backend": self.backend,
            "strategy": self.strategy,
            "values": dict(self.values),
            "ots_steps": list(self.ots_steps),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricRow":
        return cls(**{k: d[k] for k in ("qa_id", "record_id", "task", "complexity", "condition", "backend", "strategy")},
                   values=dict(d.get("values", {})), ots_steps=list(d.get("ots_steps", [])))


METRIC_NAMES = (
    "completion",
    "ecr",
    "pfsp",
    "thr",
    "mhr",
    "levenshtein",
    "fdr",
    "tma",
    "ots",
    "plan_levenshtein",
    "plan_fdr",
    "plan_tma",
    "plan_exec_levenshtein",
    "uar",
    "ugr",
    "false_refusal",
    "bleu",
    "rouge",
    "f1",
    "steps",
    "io_errors",
    "tokens",
    "context_tokens",
    "built",
    "degenerate",
)


def compute_row(t: Transcript, record: PatientRecord, qa: QAPair | None = None) -> MetricRow:
    gt = ground_truth_spec(t.task)
    gap = GroundTruthGap.from_dict(t.gap) if t.gap else None
    pred = executed_categories(t)
    plan = plan_categories(t)
    ecr, pfsp = ecr_pfsp(t, gt)
    thr, mhr = thr_mhr(t, gt)
    flags = unsolvability_assess(t, gap)
    rescued = gap is not None and built_successfully(t)
    f = fdr(pred, gt)
    m = tma(pred, gt)
    ots, ots_steps = session_ots(t, record)
    v: dict = {
        "completion": task_completion(ecr, thr, flags.uar, flags.ugr, gap is not None, rescued),
        "ecr": ecr,
        "pfsp": pfsp,
        "thr": thr,
        "mhr": mhr,
        "levenshtein": levenshtein_chain(pred, gt),
        "fdr": f.value,
        "tma": m.value,
        "ots": ots,
        "plan_levenshtein": levenshtein_chain(plan, gt) if plan is not None else None,
        "plan_fdr": fdr(plan, gt).value if plan is not None else None,
        "plan_tma": tma(plan, gt).value if plan is not None else None,
        "plan_exec_levenshtein": edit_distance(plan, pred) if plan is not None else None,
        "uar": flags.uar if gap is not None else None,
        "ugr": flags.ugr if gap is not None else None,
        "false_refusal": flags.false_refusal if gap is None else None,
        "bleu": None,
        "rouge": None,
        "f1": None,
        "steps": len(t.steps),
        "io_errors": sum(1 for s in t.steps if s.outcome.get("kind") == "IOError"),
        "tokens": sum(b["input"] + b["output"] for b in t.token_counts.values()),
        "context_tokens": t.context_tokens,
        "built": built_successfully(t),
        "degenerate": f.degenerate,
    }
    answer = t.answer
    reference = qa.answer if qa is not None else t.reference
    if answer:
        try:
            s = text_metrics(answer, reference)
            v.update(bleu=s.bleu, rouge=s.rouge, f1=s.f1)
        except EmptyText:
            pass
    return MetricRow(
        qa_id=t.qa_id,
        record_id=t.record_id,
        task=t.task,
        complexity=gt.complexity.value if isinstance(gt.complexity, Complexity) else str(gt.complexity),
        condition=t.condition,
        backend=t.backend,
        strategy=t.strategy,
        values=v,
        ots_steps=ots_steps,
    )


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class Aggregate:
    """Per-metric sums and counts; merging is associative and commutative."""

    rows: int = 0
    sums: tuple = ()
    counts: tuple = ()

    @classmethod
    def of(cls, row: MetricRow) -> "Aggregate":
        sums, counts = [], []
        for name in METRIC_NAMES:
            value = row.values.get(name)
            if value is None:
                sums.append(0.0)
                counts.append(0)
            else:
                sums.append(float(value))
                counts.append(1)
        return cls(1, tuple(sums), tuple(counts))

    def merge(self, other: "Aggregate") -> "Aggregate":
        if not self.rows:
            return other
        if not other.rows:
            return self
        return Aggregate(
            self.rows + other.rows,
            tuple(a + b for a, b in zip(self.sums, other.sums)),
            tuple(a + b for a, b in zip(self.counts, other.counts)),
        )

    def means(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for i, name in enumerate(METRIC_NAMES):
            out[name] = self.sums[i] / self.counts[i] if self.rows and self.counts[i] else None
        return out


def aggregate(rows: Iterable[MetricRow]) -> Aggregate:
    acc = Aggregate()
    for row in rows:
        acc = acc.merge(Aggregate.of(row))
    return acc


# ---------------------------------------------------------------- paired comparison


class DegenerateVariance(ValueError):
    pass


@dataclass(frozen=True)
class PairedResult:
    n: int
    wins: int
    ties: int
    losses: int
    t: float
    p: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "wins": self.wins,
            "ties": self.ties,
            "losses": self.losses,
            "t": self.t,
            "p": self.p,
            "degenerate": self.degenerate,
        }


def student_t_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(betainc(df / 2, 0.5, x))


def paired_compare(a: Sequence[float], b: Sequence[float], lower_is_better: bool = True) -> PairedResult:
    """Wins count pairs where ``a`` is better than ``b``."""
    if len(a) != len(b):
        raise ValueError("paired series must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired comparison needs at least two pairs")
    diffs = [x - y for x, y in zip(a, b)]
    better = [(d < 0) if lower_is_better else (d > 0) for d in diffs]
    ties = sum(1 for d in diffs if d == 0)
    wins = sum(better)
    losses = n - wins - ties
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0:
        if mean == 0:
            return PairedResult(n, wins, ties, losses, 0.0, 1.0, degenerate=True)
        return PairedResult(n, wins, ties, losses, math.copysign(math.inf, mean), 0.0)
    t = mean / math.sqrt(var / n)
    return PairedResult(n, wins, ties, losses, t, student_t_two_sided(t, n - 1))
