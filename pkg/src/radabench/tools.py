"""Tool cards: category signatures, text and JSON formats, applicability and scoring."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .corpus import PatientRecord
from .vocab import (
    ANATOMIES,
    MODALITIES,
    UNIVERSAL,
    InfoKey,
    ToolCategory,
    UnknownCategory,
)

K = InfoKey
AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)
VARIANT_CATEGORIES = frozenset({BQ, IE})
VARIANTS = ("organ", "anomaly")


class ToolError(ValueError):
    pass


class CountOutOfRange(ToolError):
    def __init__(self, count: int, limit: int):
        super().__init__(f"optional input count {count} outside [0, {limit}]")
        self.count = count


class InvalidCard(ToolError):
    pass


def infer_step(lower: float, upper: float, n_optional: int) -> float:
    if n_optional == 0:
        return 0.0
    return round((upper - lower) / n_optional, 10)


@dataclass(frozen=True)
class ToolCard:
    name: str
    category: ToolCategory
    property: str
    ability: str
    compulsory: tuple[InfoKey, ...]
    optional: tuple[InfoKey, ...]
    output: tuple[InfoKey, ...]
    lower: float
    upper: float
    step: float
    anatomy: str | None = None
    modality: str | None = None
    capability_labels: tuple[str, ...] = ()
    variant: str | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.lower <= self.upper <= 1.0):
            raise InvalidCard(f"{self.name}: performance bounds {self.lower}..{self.upper}")
        if self.step < 0:
            raise InvalidCard(f"{self.name}: negative step")
        if self.optional and self.upper - self.lower > self.step * len(self.optional) + 1e-9:
            raise InvalidCard(f"{self.name}: range not reachable with the given step")
        # Optional inputs may reappear as outputs (a quantifier can refine a given dim).
        if set(self.compulsory) & set(self.optional) or set(self.compulsory) & set(self.output):
            raise InvalidCard(f"{self.name}: compulsory inputs overlap optional inputs or outputs")
        if self.anatomy is not None and self.anatomy not in ANATOMIES:
            raise InvalidCard(f"{self.name}: unknown anatomy {self.anatomy!r}")
        if self.modality is not None and self.modality not in MODALITIES:
            raise InvalidCard(f"{self.name}: unknown modality {self.modality!r}")

    @property
    def is_universal(self) -> bool:
        return self.anatomy is None and self.modality is None

    @property
    def scope(self) -> tuple[str, str]:
        return (self.anatomy or UNIVERSAL, self.modality or UNIVERSAL)

    def renamed(self, name: str) -> "ToolCard":
        return replace(self, name=name)


def performance_score(card: ToolCard, provided_optional_count: int) -> float:
    if not 0 <= provided_optional_count <= len(card.optional):
        raise CountOutOfRange(provided_optional_count, len(card.optional))
    return min(card.upper, round(card.lower + card.step * provided_optional_count, 10))


# ---------------------------------------------------------------- signatures


@dataclass(frozen=True)
class CategorySignature:
    compulsory: tuple[InfoKey, ...]
    optional: tuple[InfoKey, ...]
    output: tuple[InfoKey, ...]


_REPORT_OPTIONAL = (
    K.INFORMATION,
    K.ORGAN_OBJECT,
    K.ANOMALY_OBJECT,
    K.DISEASE,
    K.ORGAN_DIM,
    K.ORGAN_QUANT,
    K.ANOMALY_DIM,
    K.ANOMALY_QUANT,
    K.INDICATOR_NAME,
    K.INDICATOR_VALUE,
    K.ORGAN_MASK,
    K.ANOMALY_MASK,
)
_TREATMENT_OPTIONAL = (
    K.ORGAN_MASK,
    K.ANOMALY_MASK,
    K.ORGAN_OBJECT,
    K.ANOMALY_OBJECT,
    K.ORGAN_DIM,
    K.ORGAN_QUANT,
    K.ANOMALY_DIM,
    K.ANOMALY_QUANT,
    K.INDICATOR_NAME,
    K.INDICATOR_VALUE,
    K.REPORT,
)
_SCOPE_INPUTS = (K.IMAGE, K.ANATOMY, K.MODALITY)


def category_signature(
    category: ToolCategory, universal: bool = True, variant: str | None = None
) -> CategorySignature:
    c = category
    if c in VARIANT_CATEGORIES and variant not in VARIANTS + (None,):
        raise ToolError(f"{c.value} variant must be one of {VARIANTS} or None")
    if c is AC:
        return CategorySignature((K.IMAGE,), (), (K.ANATOMY,))
    if c is MC:
        return CategorySignature((K.IMAGE,), (), (K.MODALITY,))
    scoped = _SCOPE_INPUTS if universal else (K.IMAGE,)
    if c is OS:
        return CategorySignature(scoped, (), (K.ORGAN_MASK, K.ORGAN_OBJECT))
    if c is AD:
        return CategorySignature(scoped, (), (K.ANOMALY_MASK, K.ANOMALY_OBJECT))
    if c is ID:
        return CategorySignature(scoped, (), (K.DISEASE,))
    if c is GD:
        return CategorySignature(
            (K.IMAGE, K.ORGAN_MASK, K.ORGAN_OBJECT, K.ANOMALY_MASK, K.ANOMALY_OBJECT),
            (K.INFORMATION,),
            (K.DISEASE,),
        )
    if c is BQ:
        if variant is None:
            # Combined quantifier covering both organ and anomaly biomarkers.
            return CategorySignature(
                (K.IMAGE,),
                (K.ORGAN_OBJECT, K.ORGAN_MASK, K.ORGAN_DIM, K.ANOMALY_OBJECT, K.ANOMALY_MASK, K.ANOMALY_DIM),
                (K.ORGAN_DIM, K.ORGAN_QUANT, K.ANOMALY_DIM, K.ANOMALY_QUANT),
            )
        if variant == "organ":
            return CategorySignature((K.IMAGE, K.ORGAN_OBJECT, K.ORGAN_MASK), (K.ORGAN_DIM,), (K.ORGAN_DIM, K.ORGAN_QUANT))
        return CategorySignature(
            (K.IMAGE, K.ANOMALY_OBJECT, K.ANOMALY_MASK), (K.ANOMALY_DIM,), (K.ANOMALY_DIM, K.ANOMALY_QUANT)
        )
    if c is IE:
        if variant is None:
            return CategorySignature(
                (K.INFORMATION,),
                (K.DISEASE, K.ORGAN_OBJECT, K.ORGAN_DIM, K.ORGAN_QUANT, K.ANOMALY_OBJECT, K.ANOMALY_DIM, K.ANOMALY_QUANT),
                (K.INDICATOR_NAME, K.INDICATOR_VALUE),
            )
        if variant == "organ":
            return CategorySignature(
                (K.INFORMATION, K.ORGAN_OBJECT, K.ORGAN_QUANT),
                (K.DISEASE, K.ORGAN_DIM),
                (K.INDICATOR_NAME, K.INDICATOR_VALUE),
            )
        return CategorySignature(
            (K.INFORMATION, K.ANOMALY_OBJECT, K.ANOMALY_QUANT),
            (K.DISEASE, K.ANOMALY_DIM),
            (K.INDICATOR_NAME, K.INDICATOR_VALUE),
        )
    if c is RG:
        return CategorySignature(scoped, _REPORT_OPTIONAL, (K.REPORT,))
    if c is TP:
        if universal:
            comp = (K.IMAGE, K.INFORMATION, K.MODALITY, K.ANATOMY, K.DISEASE)
        else:
            comp = (K.IMAGE, K.INFORMATION, K.DISEASE)
        return CategorySignature(comp, _TREATMENT_OPTIONAL, (K.TREATMENT,))
    raise UnknownCategory(str(category))


# ---------------------------------------------------------------- card construction


def _scope_phrase(anatomy: str | None, modality: str | None) -> str:
    return " ".join(p for p in (anatomy, modality) if p)


def _label(category: ToolCategory, variant: str | None) -> str:
    if variant:
        return f"{variant.capitalize()} {category.card_label}"
    return category.card_label


def _ability(category: ToolCategory, variant: str | None, scope: str) -> str:
    img = f"the {scope} Image" if scope else "the Image"
    c = category
    if c is AC:
        return "Determine the anatomy of the Image."
    if c is MC:
        return "Determine the modality of the Image."
    given = f"Given {img}" if scope else "Given the modality and anatomy"
    if c is OS:
        return f"{given}, segment the organs."
    if c is AD:
        return f"{given}, determine the location and type of abnormality."
    if c is ID:
        return f"{given}, diagnose the disease."
    if c is GD:
        return f"Given {img} with organ and anomaly masks and labels, infer the disease."
    which = f"{variant} " if variant else "organ and anomaly "
    if c is BQ:
        return f"Measure the {which}biomarker of {img}."
    if c is IE:
        return f"Evaluate the clinical indicator from the {which}biomarker of {img}."
    if c is RG:
        return f"Given {img}, any other text information and organ/anomaly masks and labels, generate a radiology report."
    return f"Given {img}, patient information and findings, recommend a treatment plan."


def make_card(
    name: str,
    category: ToolCategory,
    *,
    anatomy: str | None = None,
    modality: str | None = None,
    lower: float = 0.8,
    upper: float | None = None,
    variant: str | None = None,
    labels: Sequence[str] = (),
    with_optional: bool = True,
) -> ToolCard:
    """Build a card whose I/O lists follow the category signature."""
    if category not in VARIANT_CATEGORIES:
        variant = None
    universal = anatomy is None and modality is None
    sig = category_signature(category, universal, variant)
    optional = sig.optional if with_optional else ()
    if upper is None or not optional:
        upper = lower
    scope = _scope_phrase(anatomy, modality)
    label = _label(category, variant)
    prop = f"Universal {label}" if universal else f"{label} only suitable for {scope} image"
    ability = _ability(category, variant, scope)
    labels = tuple(labels)
    if labels:
        ability = f"{ability} Supported labels: {', '.join(labels)}."
    return ToolCard(
        name=name,
        category=category,
        property=prop,
        ability=ability,
        compulsory=sig.compulsory,
        optional=optional,
        output=sig.output,
        lower=lower,
        upper=upper,
        step=infer_step(lower, upper, len(optional)),
        anatomy=anatomy,
        modality=modality,
        capability_labels=labels,
        variant=variant,
    )


# ---------------------------------------------------------------- text format


def _keys_repr(keys: Iterable[InfoKey]) -> str:
    return repr([k.value for k in keys])


def render_tool_card(card: ToolCard) -> str:
    return "\n".join(
        [
            f"=== Tool Description for {card.name} ===",
            f"Name: {card.name}",
            f"Category: {card.category.card_label}",
            f"Ability: {card.ability}",
            f"Property: {card.property}",
            f"Compulsory Input: {_keys_repr(card.compulsory)}",
            f"Optional Input: {_keys_repr(card.optional)}",
            f"Output: {_keys_repr(card.output)}",
            f"Performance: Score from {card.lower!r} to {card.upper!r}, increases with optional inputs",
        ]
    )


def render_toolset(cards: Iterable[ToolCard]) -> str:
    return "## Available Tools\n\n" + "\n\n".join(render_tool_card(c) for c in cards)


_FIELDS = ("Name", "Category", "Ability", "Property", "Compulsory Input", "Optional Input", "Output", "Performance")
_FIELD_LINE = re.compile(rf"^({'|'.join(_FIELDS)}):\s?(.*)$")
_KEY_TOKEN = re.compile(r"\$(\w+)\$")
_PERF = re.compile(r"Score from\s+([0-9.]+)\s+to\s+([0-9.]+)")
_LABELS = re.compile(r"\s*Supported labels:\s*(.*?)\.\s*$", re.S)
# The published example card names the indicator value key differently.
_KEY_ALIASES = {"ValueName": "IndicatorValue"}


def _parse_keys(text: str) -> tuple[InfoKey, ...]:
    out = []
    for tok in _KEY_TOKEN.findall(text):
        tok = _KEY_ALIASES.get(tok, tok)
        try:
            out.append(InfoKey(f"${tok}$"))
        except ValueError:
            raise InvalidCard(f"unknown information key ${tok}$") from None
    return tuple(out)


def parse_scope(property_text: str) -> tuple[str | None, str | None]:
    m = re.search(r"only suitable for\s+(.*?)\s+image", property_text, re.S | re.I)
    if not m:
        return None, None
    phrase = re.sub(r"\s+", " ", m.group(1)).strip()
    anatomy = next((a for a in sorted(ANATOMIES, key=len, reverse=True) if phrase.startswith(a)), None)
    rest = phrase[len(anatomy):].strip() if anatomy else phrase
    modality = next((mm for mm in MODALITIES if rest == mm), None)
    if anatomy is None and modality is None:
        raise InvalidCard(f"unrecognised scope {phrase!r}")
    return anatomy, modality


def _variant_from_property(category: ToolCategory, text: str) -> str | None:
    if category not in VARIANT_CATEGORIES:
        return None
    low = re.sub(r"\s+", " ", text.lower())
    for v in VARIANTS:
        if f"{v} {category.card_label.lower()}" in low:
            return v
    return None


def parse_tool_card(text: str) -> ToolCard:
    values: dict[str, str] = {}
    current: str | None = None
    for line in text.splitlines():
        if line.startswith("==="):
            continue
        m = _FIELD_LINE.match(line)
        if m:
            current = m.group(1)
            values[current] = m.group(2).strip()
        elif current is not None and line.strip():
            values[current] += " " + line.strip()
    missing = [f for f in _FIELDS if f not in values]
    if missing:
        raise InvalidCard(f"tool card missing fields: {missing}")
    return _card_from_fields(values)


def _card_from_fields(values: Mapping[str, object], bounds: tuple | None = None) -> ToolCard:
    category = ToolCategory.resolve(str(values["Category"]))
    prop = str(values["Property"])
    ability_full = str(values["Ability"])
    labels: tuple[str, ...] = ()
    lm = _LABELS.search(ability_full)
    if lm:
        labels = tuple(s.strip() for s in lm.group(1).split(",") if s.strip())
    optional = _parse_list(values["Optional Input"])
    if bounds is None:
        pm = _PERF.search(str(values["Performance"]))
        if not pm:
            raise InvalidCard("unreadable performance line")
        lower, upper = float(pm.group(1)), float(pm.group(2))
        step = infer_step(lower, upper, len(optional))
    else:
        lower, upper, step = bounds
    anatomy, modality = parse_scope(prop)
    return ToolCard(
        name=str(values["Name"]).strip(),
        category=category,
        property=prop,
        ability=ability_full,
        compulsory=_parse_list(values["Compulsory Input"]),
        optional=optional,
        output=_parse_list(values["Output"]),
        lower=lower,
        upper=upper,
        step=step,
        anatomy=anatomy,
        modality=modality,
        capability_labels=labels,
        variant=_variant_from_property(category, prop),
    )


def _parse_list(value: object) -> tuple[InfoKey, ...]:
    if isinstance(value, (list, tuple)):
        return _parse_keys(" ".join(str(v) for v in value))
    return _parse_keys(str(value))


# ---------------------------------------------------------------- structured (JSON) format

_LABEL_FIELD = {OS: "Organs", AD: "Anomalies", ID: "Diseases", GD: "Diseases", BQ: "Biomarkers", IE: "Indicators"}
_LABEL_FIELDS = ("Organs", "Anomalies", "Diseases", "Biomarkers", "Indicators")


def card_to_dict(card: ToolCard) -> dict:
    d: dict = {
        "Name": card.name,
        "Category": card.category.card_label,
        "Property": card.property,
        "Ability": card.ability,
        "Compulsory Input": [k.value for k in card.compulsory],
        "Optional Input": [k.value for k in card.optional],
        "Output": [k.value for k in card.output],
        "lower_bound": card.lower,
        "upper_bound": card.upper,
        "step": card.step,
        "Performance": f"Score from {card.lower!r} to {card.upper!r}, increases with optional inputs",
        "Anatomy": card.anatomy,
        "Modality": card.modality,
    }
    for f in _LABEL_FIELDS:
        d[f] = None
    if card.capability_labels and card.category in _LABEL_FIELD:
        d[_LABEL_FIELD[card.category]] = list(card.capability_labels)
    d["type"] = card.variant
    return d


def card_from_dict(d: Mapping) -> ToolCard:
    bounds = None
    if "lower_bound" in d and "upper_bound" in d:
        n_opt = len(_parse_list(d.get("Optional Input", [])))
        lower, upper = float(d["lower_bound"]), float(d["upper_bound"])
        step = float(d["step"]) if d.get("step") is not None else infer_step(lower, upper, n_opt)
        bounds = (lower, upper, step)
    card = _card_from_fields(d, bounds)
    updates: dict = {}
    if d.get("Anatomy") or d.get("Modality"):
        updates["anatomy"] = d.get("Anatomy") or None
        updates["modality"] = d.get("Modality") or None
    for f in _LABEL_FIELDS:
        if d.get(f):
            updates["capability_labels"] = tuple(d[f])
    if d.get("type") in VARIANTS:
        updates["variant"] = d["type"]
    return replace(card, **updates) if updates else card


def toolset_to_json(cards: Iterable[ToolCard]) -> str:
    return json.dumps({c.name: card_to_dict(c) for c in cards}, indent=4, ensure_ascii=False) + "\n"


def toolset_from_json(text: str) -> list[ToolCard]:
    data = json.loads(text)
    return [card_from_dict(v) for v in data.values()]


# ---------------------------------------------------------------- applicability


class Applicability(str, Enum):
    APPLICABLE = "Applicable"
    WRONG_SCOPE = "WrongScope"
    INSUFFICIENT_CAPABILITY = "InsufficientCapability"


def scope_matches(card: ToolCard, anatomy: str, modality: str) -> bool:
    return (card.anatomy is None or card.anatomy == anatomy) and (card.modality is None or card.modality == modality)


def applicability(card: ToolCard, anatomy: str, modality: str, need: str | None = None) -> Applicability:
    if not scope_matches(card, anatomy, modality):
        return Applicability.WRONG_SCOPE
    if card.capability_labels and need is not None:
        wanted = need.strip().lower()
        if wanted not in {lab.strip().lower() for lab in card.capability_labels}:
            return Applicability.INSUFFICIENT_CAPABILITY
    return Applicability.APPLICABLE


def capability_need(category: ToolCategory, record: PatientRecord, variant: str | None = None) -> str | None:
    """The record-specific label a tool of this category must support."""
    if category is OS:
        return record.organ_biomarker.object
    if category is AD:
        return record.anomaly_biomarker.object
    if category in (ID, GD):
        return record.disease
    if category is BQ:
        bio = record.anomaly_biomarker if variant == "anomaly" else record.organ_biomarker
        return bio.dim
    if category is IE:
        return record.indicator.name
    return None


def usable_for(card: ToolCard, record: PatientRecord) -> bool:
    need = capability_need(card.category, record, card.variant)
    return applicability(card, record.anatomy, record.modality, need) is Applicability.APPLICABLE
