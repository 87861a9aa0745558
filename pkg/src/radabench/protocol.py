"""Parsers for agent replies: decomposition plans and Call/EndCall/NoCall blocks."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from .toolset_sim import GapKind
from .vocab import InfoKey, ToolCategory, UnknownCategory


class PlanError(ValueError):
    pass


class NoChainFound(PlanError):
    pass


class MalformedKnownInfo(PlanError):
    pass


@dataclass(frozen=True)
class Plan:
    known_info: frozenset[InfoKey]
    tool_chain: tuple[ToolCategory, ...]
    raw_text: str

    def to_dict(self) -> dict:
        return {
            "known_info": sorted(k.value for k in self.known_info),
            "tool_chain": [c.value for c in self.tool_chain],
        }


@dataclass(frozen=True)
class Call:
    purpose: str
    tool_name: str
    inputs: tuple[str, ...]

    kind = "Call"


@dataclass(frozen=True)
class EndCall:
    purpose: str
    tool_name: str
    inputs: tuple[str, ...]

    kind = "EndCall"


@dataclass(frozen=True)
class NoCall:
    purpose: str
    category: ToolCategory | None
    category_text: str
    anatomy: str
    modality: str
    ability: GapKind

    kind = "NoCall"


@dataclass(frozen=True)
class ParseFailure:
    reason: str

    kind = "ParseFailure"


ProtocolMessage = Union[Call, EndCall, NoCall, ParseFailure]

_FENCE = re.compile(r"```[a-zA-Z]*")
_REFLECTION = re.compile(r"<Reflection>.*?</Reflection>", re.S)
_OPEN = re.compile(r"<(Call|EndCall|NoCall)>")
_BLOCK = re.compile(r"<(Call|EndCall|NoCall)>(.*?)</\1>", re.S)
_KEY = re.compile(r"\$(\w+)\$")


def _squash(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def _child(body: str, tag: str) -> str | None:
    m = re.search(rf"<{tag}>(.*?)</{tag}>", body, re.S)
    return _squash(m.group(1)) if m else None


def strip_reflection(text: str) -> str:
    return _REFLECTION.sub(" ", _FENCE.sub(" ", text))


def parse_protocol(text: str) -> ProtocolMessage:
    """Locate exactly one protocol block; failures are returned, never raised."""
    body_text = strip_reflection(text)
    opens = _OPEN.findall(body_text)
    if len(opens) > 1:
        return ParseFailure("multiple protocol blocks")
    m = _BLOCK.search(body_text)
    if m is None:
        return ParseFailure("no protocol block")
    tag, body = m.group(1), m.group(2)
    purpose = _child(body, "Purpose")
    if purpose is None:
        return ParseFailure(f"{tag} without <Purpose>")
    if tag in ("Call", "EndCall"):
        tool = _child(body, "Tool")
        raw_inputs = _child(body, "Input")
        if tool is None:
            return ParseFailure(f"{tag} without <Tool>")
        if raw_inputs is None:
            return ParseFailure(f"{tag} without <Input>")
        tm = re.search(r"TOOL\d+", tool)
        name = tm.group(0) if tm else tool
        inputs = tuple(f"${k}$" for k in _KEY.findall(raw_inputs))
        cls = Call if tag == "Call" else EndCall
        return cls(purpose, name, inputs)
    fields = {t: _child(body, t) for t in ("Category", "Anatomy", "Modality", "Ability")}
    missing = [t for t, v in fields.items() if v is None]
    if missing:
        return ParseFailure(f"NoCall without <{missing[0]}>")
    try:
        ability = GapKind(fields["Ability"])
    except ValueError:
        return ParseFailure(f"unknown NoCall ability {fields['Ability']!r}")
    try:
        category: ToolCategory | None = ToolCategory.resolve(fields["Category"])
    except UnknownCategory:
        category = None
    return NoCall(purpose, category, fields["Category"], fields["Anatomy"], fields["Modality"], ability)


def message_to_dict(msg: ProtocolMessage) -> dict:
    if isinstance(msg, (Call, EndCall)):
        return {"kind": msg.kind, "purpose": msg.purpose, "tool": msg.tool_name, "inputs": list(msg.inputs)}
    if isinstance(msg, NoCall):
        return {
            "kind": "NoCall",
            "purpose": msg.purpose,
            "category": msg.category.value if msg.category else None,
            "category_text": msg.category_text,
            "anatomy": msg.anatomy,
            "modality": msg.modality,
            "ability": msg.ability.value,
        }
    return {"kind": "ParseFailure", "reason": msg.reason}


def message_from_dict(d: dict) -> ProtocolMessage:
    kind = d["kind"]
    if kind in ("Call", "EndCall"):
        cls = Call if kind == "Call" else EndCall
        return cls(d["purpose"], d["tool"], tuple(d["inputs"]))
    if kind == "NoCall":
        cat = ToolCategory(d["category"]) if d.get("category") else None
        return NoCall(d["purpose"], cat, d["category_text"], d["anatomy"], d["modality"], GapKind(d["ability"]))
    return ParseFailure(d["reason"])


# ---------------------------------------------------------------- decomposition

_STARRED = re.compile(r"\*+([^*]+?)\*+")


def _bracket_after(text: str, label: str) -> str | None:
    m = re.search(rf"\"?{label}\"?\s*:\s*", text, re.I)
    if not m:
        return None
    rest = text[m.end():]
    if not rest.startswith("["):
        return None
    end = rest.find("]")
    if end < 0:
        return None
    return rest[1:end]


def parse_decomposition(text: str) -> Plan:
    known: set[InfoKey] = set()
    known_label = re.search(r"\"?Known Info\"?\s*:", text, re.I)
    if known_label:
        inner = _bracket_after(text, "Known Info")
        if inner is None:
            raise MalformedKnownInfo("Known Info is not followed by a bracketed list")
        for tok in _KEY.findall(inner):
            try:
                known.add(InfoKey(f"${tok}$"))
            except ValueError:
                raise MalformedKnownInfo(f"unknown information key ${tok}$") from None
        leftover = _KEY.sub("", inner)
        if re.search(r"[A-Za-z]", leftover):
            raise MalformedKnownInfo(f"unexpected tokens in Known Info: {inner.strip()!r}")
    # Report and treatment are never known up front.
    known -= {InfoKey.REPORT, InfoKey.TREATMENT}

    region = _bracket_after(text, "Tool Chain")
    if region is None:
        region = text
    tokens = [_squash(t) for t in _STARRED.findall(region)]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise NoChainFound("no starred tool category in the reply")
    chain = tuple(ToolCategory.resolve(t) for t in tokens)
    return Plan(frozenset(known), chain, text)


def has_planner_block(text: str) -> bool:
    return bool(re.search(r"\"?Tool Chain\"?\s*:", text)) and bool(re.search(r"\"?Task Summary\"?\s*:", text))


def parse_planner_block(text: str) -> Plan:
    """Parse the structured planner reply (JSON-like; starred tokens are not quoted)."""
    if not has_planner_block(text):
        raise NoChainFound("no structured planner block")
    return parse_decomposition(text)
