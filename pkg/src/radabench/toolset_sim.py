"""Seeded tool-set generation for the eight availability conditions, plus a solvability oracle.

Every draw comes from a Philox stream keyed on (condition, seed, record, task),
so a cell can be regenerated in isolation and in any order.
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .corpus import PatientRecord, Slot, TaskSpec, TaskType, ground_truth_spec
from .tools import (
    VARIANT_CATEGORIES,
    VARIANTS,
    ToolCard,
    capability_need,
    card_to_dict,
    make_card,
    scope_matches,
    usable_for,
)
from .vocab import ALLOWED_COMBOS, ANATOMIES, CATEGORY_ORDER, DIMS, MODALITIES, UNIVERSAL, ToolCategory

AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)
SCOPEABLE = (OS, AD, ID, GD, BQ, IE, RG, TP)
LABELABLE = (OS, AD, ID, GD, BQ, IE)
LADDER_CATEGORIES = (OS, AD, ID, GD)


class Condition(str, Enum):
    BASELINE = "Baseline"
    REDUNDANT_REGULAR = "RedundantRegular"
    REDUNDANT_MEDIUM = "RedundantMedium"
    REDUNDANT_HIGH = "RedundantHigh"
    INSUFFICIENT_CONFIG1 = "InsufficientConfig1"
    INSUFFICIENT_CONFIG2 = "InsufficientConfig2"
    INSUFFICIENT_CONFIG3 = "InsufficientConfig3"
    DIFFERENTIATED = "Differentiated"

    @property
    def insufficient(self) -> bool:
        return self.value.startswith("Insufficient")


SIZE_BOUNDS: dict[Condition, tuple[int, int]] = {
    Condition.BASELINE: (12, 12),
    Condition.REDUNDANT_REGULAR: (12, 15),
    Condition.REDUNDANT_MEDIUM: (27, 34),
    Condition.REDUNDANT_HIGH: (169, 169),
    Condition.INSUFFICIENT_CONFIG1: (14, 17),
    Condition.INSUFFICIENT_CONFIG2: (15, 17),
    Condition.INSUFFICIENT_CONFIG3: (18, 18),
    Condition.DIFFERENTIATED: (17, 18),
}


class GapKind(str, Enum):
    CATEGORY_MISSING = "CategoryMissing"
    SPECIFIC_TOOL_MISSING = "SpecificToolMissing"
    INSUFFICIENT_CAPABILITY = "InsufficientCapability"


@dataclass(frozen=True)
class GroundTruthGap:
    category: ToolCategory
    anatomy: str
    modality: str
    kind: GapKind
    missing_label: str | None = None

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "anatomy": self.anatomy,
            "modality": self.modality,
            "kind": self.kind.value,
            "missing_label": self.missing_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthGap":
        return cls(ToolCategory(d["category"]), d["anatomy"], d["modality"], GapKind(d["kind"]), d.get("missing_label"))


class SimError(ValueError):
    pass


class TaskConditionMismatch(SimError):
    pass


class SearchBudgetExceeded(SimError):
    pass


@dataclass(frozen=True)
class ToolSet:
    cards: tuple[ToolCard, ...]
    condition: Condition
    seed: int
    record_id: str
    task: TaskType

    def __post_init__(self) -> None:
        names = [c.name for c in self.cards]
        if len(set(names)) != len(names) or not all(re.fullmatch(r"TOOL[1-9]\d*", n) for n in names):
            raise SimError("tool names must be unique TOOL<n> labels")

    def __len__(self) -> int:
        return len(self.cards)

    def get(self, name: str) -> ToolCard | None:
        for c in self.cards:
            if c.name == name:
                return c
        return None

    def with_card(self, card: ToolCard) -> "ToolSet":
        """Append ``card`` under the next free TOOL number."""
        top = max((int(c.name[4:]) for c in self.cards), default=0)
        new = card.renamed(f"TOOL{top + 1}")
        return ToolSet(self.cards + (new,), self.condition, self.seed, self.record_id, self.task)

    def to_json(self) -> str:
        return json.dumps({c.name: card_to_dict(c) for c in self.cards}, indent=4, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------- randomness


def _rng(condition: Condition, seed: int, record_id: str, task: TaskType) -> np.random.Generator:
    digest = hashlib.sha256(record_id.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    idx = list(Condition).index(condition)
    entropy = [idx, int(seed) % (1 << 64), *words, int(task)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _cents(rng: np.random.Generator, lo: int, hi: int) -> float:
    return int(rng.integers(lo, hi + 1)) / 100


# ---------------------------------------------------------------- card factories

_LABEL_POOLS: dict[ToolCategory, tuple[str, ...]] = {
    OS: ("Liver", "Kidney", "Spleen", "Heart", "Left lung", "Femur", "Vertebral body", "Thyroid", "Bladder", "Pancreas"),
    AD: ("Nodule", "Mass", "Fracture", "Effusion", "Cyst", "Calcification", "Pneumothorax", "Hemorrhage", "Atelectasis"),
    ID: ("Pneumothorax", "Atelectasis", "Lung cancer", "Cirrhosis", "Osteoporosis", "Gout", "Thyroid nodule", "Hydronephrosis"),
    GD: ("Pneumothorax", "Atelectasis", "Lung cancer", "Cirrhosis", "Osteoporosis", "Gout", "Thyroid nodule", "Hydronephrosis"),
    IE: ("TNM Staging", "Glasgow Coma Scale", "Child-Pugh Score", "Bosniak Classification", "Kellgren-Lawrence Grade", "TI-RADS"),
}


def _labels_excluding(rng: np.random.Generator, category: ToolCategory, need: str) -> tuple[str, ...]:
    pool = DIMS if category is BQ else _LABEL_POOLS[category]
    cands = [p for p in pool if p.lower() != need.strip().lower()]
    k = int(rng.integers(2, 4))
    picks = rng.choice(len(cands), size=k, replace=False)
    return tuple(cands[i] for i in sorted(int(p) for p in picks))


def _perf(rng: np.random.Generator, category: ToolCategory) -> tuple[float, float]:
    if category in (AC, MC):
        v = _cents(rng, 85, 95)
        return v, v
    lower = _cents(rng, 50, 85)
    upper = lower + int(rng.integers(0, 11)) / 100
    return lower, round(upper, 2)


def _random_card(
    rng: np.random.Generator,
    category: ToolCategory,
    anatomy: str | None,
    modality: str | None,
    variant: str | None = None,
    labels: Sequence[str] = (),
) -> ToolCard:
    lower, upper = _perf(rng, category)
    return make_card("TOOL0", category, anatomy=anatomy, modality=modality, lower=lower, upper=upper, variant=variant, labels=labels)


def _variants(category: ToolCategory) -> tuple[str | None, ...]:
    return VARIANTS if category in VARIANT_CATEGORIES else (None,)


def _applicable_scope(rng: np.random.Generator, category: ToolCategory, record: PatientRecord) -> tuple[str | None, str | None]:
    if category in (AC, MC) or rng.random() < 0.5:
        return None, None
    return record.anatomy, record.modality


def _mismatched_scope(rng: np.random.Generator, record: PatientRecord) -> tuple[str, str]:
    others = [c for c in ALLOWED_COMBOS if c != (record.anatomy, record.modality)]
    return others[int(rng.integers(len(others)))]


def _baseline_cards(rng: np.random.Generator, record: PatientRecord, skip: Iterable[ToolCategory] = ()) -> list[ToolCard]:
    skip = set(skip)
    cards = []
    for cat in CATEGORY_ORDER:
        if cat in skip:
            continue
        for variant in _variants(cat):
            a, m = _applicable_scope(rng, cat, record)
            cards.append(_random_card(rng, cat, a, m, variant))
    return cards


def _distractor(rng: np.random.Generator, category: ToolCategory, record: PatientRecord) -> ToolCard:
    a, m = _mismatched_scope(rng, record)
    variant = _variants(category)[int(rng.integers(len(_variants(category))))]
    return _random_card(rng, category, a, m, variant)


def _pad(
    rng: np.random.Generator,
    cards: list[ToolCard],
    record: PatientRecord,
    target: int,
    exclude: Iterable[ToolCategory] = (),
    per_category: int = 2,
) -> None:
    pool = [c for c in SCOPEABLE if c not in set(exclude)]
    used: dict[ToolCategory, int] = {}
    while len(cards) < target:
        open_ = [c for c in pool if used.get(c, 0) < per_category]
        cat = open_[int(rng.integers(len(open_)))]
        used[cat] = used.get(cat, 0) + 1
        cards.append(_distractor(rng, cat, record))


def _finalize(
    rng: np.random.Generator | None,
    cards: list[ToolCard],
    condition: Condition,
    seed: int,
    record: PatientRecord,
    task: TaskType,
) -> ToolSet:
    order = {c: i for i, c in enumerate(CATEGORY_ORDER)}
    keys = rng.permutation(len(cards)) if rng is not None else np.arange(len(cards))
    indexed = sorted(range(len(cards)), key=lambda i: (order[cards[i].category], int(keys[i])))
    named = tuple(cards[i].renamed(f"TOOL{n}") for n, i in enumerate(indexed, start=1))
    return ToolSet(named, condition, seed, record.record_id, task)


def _first_slot(spec: TaskSpec, category: ToolCategory) -> Slot:
    return next(s for s in spec.linearizations[0] if s.category is category)


# ---------------------------------------------------------------- the fixed comprehensive set


@functools.lru_cache(maxsize=1)
def redundant_high_cards() -> tuple[ToolCard, ...]:
    """The fixed 169-card enumeration used for the RedundantHigh condition."""
    cards: list[ToolCard] = [
        make_card("TOOL0", AC, lower=0.95),
        make_card("TOOL0", MC, lower=0.95),
    ]
    for cat in (OS, AD, ID, GD, RG, TP):
        for a, m in ALLOWED_COMBOS:
            cards.append(make_card("TOOL0", cat, anatomy=a, modality=m, lower=0.7, upper=0.8))
    for cat in (BQ, IE):
        for variant in VARIANTS:
            cards.append(make_card("TOOL0", cat, variant=variant, lower=0.75, upper=0.8))
            cards.append(make_card("TOOL0", cat, variant=variant, lower=0.75, with_optional=False))
    for cat in (OS, AD, ID):
        for m in MODALITIES:
            cards.append(make_card("TOOL0", cat, modality=m, lower=0.65))
    for cat in (OS, AD):
        for a in ANATOMIES:
            cards.append(make_card("TOOL0", cat, anatomy=a, lower=0.7))
    return tuple(cards)


# ---------------------------------------------------------------- builder


def build_toolset(
    condition: Condition | str,
    seed: int,
    record: PatientRecord,
    task: TaskType | int,
    target_category: ToolCategory | None = None,
) -> tuple[ToolSet, GroundTruthGap | None]:
    """Generate the tool set for one cell.

    ``target_category`` pins the category an Insufficient or Differentiated
    condition acts on; by default it is drawn from the task's chain.
    """
    condition = Condition(condition)
    task = TaskType(task)
    spec = ground_truth_spec(task)
    rng = _rng(condition, seed, record.record_id, task)
    chain_cats = [c for c in CATEGORY_ORDER if c in spec.categories]

    def pick(allowed: Sequence[ToolCategory]) -> ToolCategory:
        options = [c for c in chain_cats if c in allowed]
        if target_category is not None:
            if target_category not in options:
                raise TaskConditionMismatch(
                    f"{condition.value} cannot act on {target_category.value} for task {int(task)}"
                )
            return target_category
        if not options:
            raise TaskConditionMismatch(f"{condition.value} has no eligible category for task {int(task)}")
        return options[int(rng.integers(len(options)))]

    gap: GroundTruthGap | None = None
    if condition is Condition.BASELINE:
        cards = _baseline_cards(rng, record)
    elif condition is Condition.REDUNDANT_REGULAR:
        cards = _baseline_cards(rng, record)
        k = int(rng.integers(0, 4))
        for cat in rng.choice(len(SCOPEABLE), size=k, replace=False):
            cards.append(_distractor(rng, SCOPEABLE[int(cat)], record))
    elif condition is Condition.REDUNDANT_MEDIUM:
        cards = _baseline_cards(rng, record)
        for cat in SCOPEABLE:
            cards.extend(_distractor(rng, cat, record) for _ in range(2))
        k = int(rng.integers(0, 7))
        for cat in rng.choice(len(SCOPEABLE), size=k, replace=False):
            cards.append(_distractor(rng, SCOPEABLE[int(cat)], record))
    elif condition is Condition.REDUNDANT_HIGH:
        return _finalize(None, list(redundant_high_cards()), condition, seed, record, task), None
    elif condition is Condition.INSUFFICIENT_CONFIG1:
        cat = pick(SCOPEABLE)
        cards = _baseline_cards(rng, record, skip=[cat])
        _pad(rng, cards, record, int(rng.integers(14, 18)), exclude=[cat])
        gap = GroundTruthGap(cat, UNIVERSAL, UNIVERSAL, GapKind.CATEGORY_MISSING)
    elif condition is Condition.INSUFFICIENT_CONFIG2:
        cat = pick(SCOPEABLE)
        cards = _baseline_cards(rng, record, skip=[cat])
        n = int(rng.integers(2, 4))
        variants = _variants(cat)
        for i in range(n):
            a, m = _mismatched_scope(rng, record)
            cards.append(_random_card(rng, cat, a, m, variants[i % len(variants)]))
        _pad(rng, cards, record, int(rng.integers(15, 18)), exclude=[cat])
        gap = GroundTruthGap(cat, record.anatomy, record.modality, GapKind.SPECIFIC_TOOL_MISSING)
    elif condition is Condition.INSUFFICIENT_CONFIG3:
        cat = pick(LABELABLE)
        cards = _baseline_cards(rng, record, skip=[cat])
        n = 2 if cat in VARIANT_CATEGORIES else int(rng.integers(1, 3))
        variants = _variants(cat)
        for i in range(n):
            variant = variants[i % len(variants)]
            need = capability_need(cat, record, variant) or ""
            a, m = _applicable_scope(rng, cat, record)
            cards.append(_random_card(rng, cat, a, m, variant, _labels_excluding(rng, cat, need)))
        _pad(rng, cards, record, 18, exclude=[cat])
        slot = _first_slot(spec, cat)
        gap = GroundTruthGap(
            cat, record.anatomy, record.modality, GapKind.INSUFFICIENT_CAPABILITY,
            capability_need(cat, record, slot.variant),
        )
    elif condition is Condition.DIFFERENTIATED:
        cat = pick(LADDER_CATEGORIES)
        cards = _baseline_cards(rng, record, skip=[cat])
        need = capability_need(cat, record) or ""
        target_labels = tuple(sorted({need, *_labels_excluding(rng, cat, need)}))
        cards.append(make_card("TOOL0", cat, lower=0.5))
        cards.append(make_card("TOOL0", cat, modality=record.modality, lower=0.6))
        cards.append(make_card("TOOL0", cat, anatomy=record.anatomy, modality=record.modality, lower=0.7))
        cards.append(make_card("TOOL0", cat, anatomy=record.anatomy, modality=record.modality, lower=0.8, labels=target_labels))
        _pad(rng, cards, record, int(rng.integers(17, 19)), exclude=[cat])
    else:  # pragma: no cover - enum is closed
        raise SimError(condition)

    toolset = _finalize(rng, cards, condition, seed, record, task)
    lo, hi = SIZE_BOUNDS[condition]
    if not lo <= len(toolset) <= hi:
        raise SimError(f"{condition.value} produced {len(toolset)} tools")
    return toolset, gap


# ---------------------------------------------------------------- solvability oracle


@dataclass(frozen=True)
class SolvabilityVerdict:
    solvable: bool
    witness_chain: tuple[str, ...] | None = None
    blocking_gap: GroundTruthGap | None = None
    expansions: int = 0


def _slot_accepts(slot: Slot, card: ToolCard) -> bool:
    # A card without a variant is a combined quantifier/evaluator and fits either slot.
    return card.category is slot.category and (slot.variant is None or card.variant in (None, slot.variant))


def _gap_for_slot(slot: Slot, toolset: ToolSet, record: PatientRecord) -> GroundTruthGap:
    cat = slot.category
    same = [c for c in toolset.cards if c.category is cat]
    if not same:
        return GroundTruthGap(cat, UNIVERSAL, UNIVERSAL, GapKind.CATEGORY_MISSING)
    if not any(scope_matches(c, record.anatomy, record.modality) for c in same):
        return GroundTruthGap(cat, record.anatomy, record.modality, GapKind.SPECIFIC_TOOL_MISSING)
    return GroundTruthGap(
        cat, record.anatomy, record.modality, GapKind.INSUFFICIENT_CAPABILITY, capability_need(cat, record, slot.variant)
    )


def solvability_oracle(
    toolset: ToolSet,
    record: PatientRecord,
    task: TaskType | int,
    budget: int = 10**6,
) -> SolvabilityVerdict:
    """Breadth-first search for a tool sequence that realises some chain linearization.

    States are (available keys, per-linearization progress). Tools that neither
    add a key nor advance any linearization are pruned, and tools with
    identical effect are collapsed to one representative.
    """
    spec = ground_truth_spec(task)
    lins = spec.linearizations
    max_depth = spec.length + 2
    usable = [c for c in toolset.cards if usable_for(c, record)]
    reps: dict[tuple, ToolCard] = {}
    for c in usable:
        key = (c.category, c.variant, frozenset(c.compulsory), frozenset(c.output))
        reps.setdefault(key, c)
    tools = list(reps.values())

    start = (frozenset({"$Image$", "$Information$"}), tuple(0 for _ in lins))
    parent: dict[tuple, tuple[tuple, str] | None] = {start: None}
    frontier = deque([(start, 0)])
    expansions = 0
    goal = None
    while frontier and goal is None:
        state, depth = frontier.popleft()
        if depth >= max_depth:
            continue
        keys, prog = state
        for card in tools:
            if not {k.value for k in card.compulsory} <= keys:
                continue
            new_keys = keys | {k.value for k in card.output}
            new_prog = tuple(
                p + 1 if p < len(lin) and _slot_accepts(lin[p], card) else p for p, lin in zip(prog, lins)
            )
            if new_keys == keys and new_prog == prog:
                continue
            expansions += 1
            if expansions > budget:
                raise SearchBudgetExceeded(f"more than {budget} expansions")
            nxt = (frozenset(new_keys), new_prog)
            if nxt in parent:
                continue
            parent[nxt] = (state, card.name)
            if any(p == len(lin) for p, lin in zip(new_prog, lins)):
                goal = nxt
                break
            frontier.append((nxt, depth + 1))

    if goal is not None:
        names: list[str] = []
        node = goal
        while parent[node] is not None:
            prev, name = parent[node]
            names.append(name)
            node = prev
        return SolvabilityVerdict(True, tuple(reversed(names)), None, expansions)

    for slot in lins[0]:
        if not any(_slot_accepts(slot, c) for c in usable):
            return SolvabilityVerdict(False, None, _gap_for_slot(slot, toolset, record), expansions)
    # Every slot has a usable tool but data flow cannot reach one of them.
    reachable = {"$Image$", "$Information$"}
    changed = True
    while changed:
        changed = False
        for c in usable:
            if {k.value for k in c.compulsory} <= reachable and not {k.value for k in c.output} <= reachable:
                reachable |= {k.value for k in c.output}
                changed = True
    for slot in lins[0]:
        if not any(_slot_accepts(slot, c) and {k.value for k in c.compulsory} <= reachable for c in usable):
            return SolvabilityVerdict(False, None, _gap_for_slot(slot, toolset, record), expansions)
    return SolvabilityVerdict(False, None, _gap_for_slot(lins[0][-1], toolset, record), expansions)
