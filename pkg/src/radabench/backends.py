"""Chat backends: deterministic scripted agents and an HTTP chat-completion client.

A backend is forked once per session. Scripted backends read the session
context (record, task spec, live tool set and memory bank) to decide their
reply; the live backend ignores it and only sees the message history.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

import httpx

from .corpus import PatientRecord, QAPair, Slot, TaskSpec
from .tools import ToolCard, capability_need, scope_matches
from .toolset_sim import Condition, GapKind, GroundTruthGap, ToolSet
from .vocab import UNIVERSAL, InfoKey, ToolCategory

log = logging.getLogger(__name__)

AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)


class BackendError(RuntimeError):
    pass


@dataclass
class SessionContext:
    """Mutable view of a running session, refreshed by the engine before each send."""

    record: PatientRecord
    qa: QAPair
    spec: TaskSpec
    toolset: ToolSet
    condition: Condition | None = None
    gap: GroundTruthGap | None = None
    stage: str = "decompose"
    bank: dict[str, str] = field(default_factory=dict)
    executed: list[str] = field(default_factory=list)
    last_error: str | None = None


class Backend:
    label = "backend"
    deterministic = True
    max_parallelism = 64

    def fork(self, ctx: SessionContext) -> "Backend":
        return self

    def send(self, messages: Sequence[dict]) -> str:
        raise NotImplementedError


# ---------------------------------------------------------------- scripted helpers


def _plan_label(slot: Slot) -> str:
    if slot.category is BQ and slot.variant:
        return f"{slot.variant.capitalize()} Biomarker Quantification Tool"
    return slot.category.plan_label


def _chain_text(lin: Sequence[Slot]) -> str:
    return " -> ".join(f"*{_plan_label(s)}*" for s in lin)


def _fits(slot: Slot, card: ToolCard) -> bool:
    if card.category is not slot.category:
        return False
    return slot.variant is None or card.variant is None or card.variant == slot.variant


def _scope(ctx: SessionContext) -> tuple[str, str]:
    return (
        ctx.bank.get(InfoKey.ANATOMY.value, ctx.record.anatomy),
        ctx.bank.get(InfoKey.MODALITY.value, ctx.record.modality),
    )


def _capable(card: ToolCard, ctx: SessionContext) -> bool:
    if not card.capability_labels:
        return True
    need = capability_need(card.category, ctx.record, card.variant)
    return need is not None and need.lower() in {x.lower() for x in card.capability_labels}


def _ready(card: ToolCard, ctx: SessionContext) -> bool:
    return all(k.value in ctx.bank for k in card.compulsory)


def _candidates(ctx: SessionContext, slot: Slot) -> list[ToolCard]:
    anatomy, modality = _scope(ctx)
    found = [
        c
        for c in ctx.toolset.cards
        if _fits(slot, c) and scope_matches(c, anatomy, modality) and _capable(c, ctx) and _ready(c, ctx)
    ]
    return sorted(found, key=lambda c: (-c.upper, int(c.name[4:])))


def _inputs(card: ToolCard, ctx: SessionContext) -> list[str]:
    return [k.value for k in card.compulsory] + [k.value for k in card.optional if k.value in ctx.bank]


def _call_text(tag: str, purpose: str, tool: str, inputs: Sequence[str]) -> str:
    return (
        f"<{tag}>\n    <Purpose>{purpose}</Purpose>\n    <Tool>{tool}</Tool>\n"
        f"    <Input>{list(inputs)!r}</Input>\n</{tag}>"
    )


def nocall_text(purpose: str, category: str, anatomy: str, modality: str, ability: str) -> str:
    return (
        f"<NoCall>\n    <Purpose>{purpose}</Purpose>\n    <Category>{category}</Category>\n"
        f"    <Anatomy>{anatomy}</Anatomy>\n    <Modality>{modality}</Modality>\n"
        f"    <Ability>{ability}</Ability>\n</NoCall>"
    )


def _reflection_requested(messages: Sequence[dict]) -> bool:
    return any("<Candidates>" in m.get("content", "") for m in messages if m.get("role") != "assistant")


def _reflection_for(reply: str) -> str:
    tool = re.search(r"<Tool>(TOOL\d+)</Tool>", reply)
    candidates = tool.group(1) if tool else "None available"
    return (
        "<Reflection>\n"
        f"    <Candidates>{candidates}</Candidates>\n"
        "    <Reasoning>Chosen to follow the planned chain for the detected anatomy and modality.</Reasoning>\n"
        "    <Constraints>Inputs limited to keys present in the results dictionary.</Constraints>\n"
        "</Reflection>"
    )


def _greedy_progress(lin: Sequence[Slot], cards: Sequence[ToolCard]) -> int:
    p = 0
    for c in cards:
        if p < len(lin) and _fits(lin[p], c):
            p += 1
    return p


# ---------------------------------------------------------------- scripted agents


class Oracle(Backend):
    """Replays the first ground-truth linearization with correct inputs.

    When the next step has no usable tool it refuses with a NoCall grounded in
    what it observes in the tool set. ``misground`` corrupts that NoCall:
    "category" names a different category, "ability" names a different kind.
    """

    deterministic = True

    def __init__(self, misground: str | None = None, label: str | None = None):
        if misground not in (None, "category", "ability"):
            raise ValueError(f"unknown misground mode {misground!r}")
        self.misground = misground
        self.label = label or ("oracle" if misground is None else f"oracle-misground-{misground}")
        self.ctx: SessionContext | None = None

    def fork(self, ctx: SessionContext) -> "Backend":
        twin = type(self).__new__(type(self))
        twin.__dict__.update(self.__dict__)
        twin.ctx = ctx
        twin._reset()
        return twin

    def _reset(self) -> None:
        pass

    @property
    def lin(self) -> tuple[Slot, ...]:
        assert self.ctx is not None
        return self.ctx.spec.linearizations[0]

    def send(self, messages: Sequence[dict]) -> str:
        ctx = self.ctx
        if ctx is None:
            raise BackendError("scripted backend used without a session context")
        stage = ctx.stage
        if stage == "decompose":
            return f"Known Info: []\nTool Chain: [{_chain_text(self.lin)}]"
        if stage == "planner":
            return (
                "```json\n{\n"
                f'    "Task Summary": "Answer the query: {ctx.qa.question}",\n'
                '    "Known Info": [],\n'
                '    "Self-Reflection": "Classify anatomy and modality first, then follow the task chain.",\n'
                f'    "Tool Chain": [{_chain_text(self.lin)}]\n'
                "}\n```"
            )
        if stage in ("conclude", "concluder"):
            return ctx.qa.answer
        if stage in ("step", "executor"):
            reply = self.step()
            if _reflection_requested(messages):
                reply = _reflection_for(reply) + "\n" + reply
            return reply
        return ""

    def progress(self) -> int:
        ctx = self.ctx
        cards = [ctx.toolset.get(n) for n in ctx.executed]
        return _greedy_progress(self.lin, [c for c in cards if c is not None])

    def step(self) -> str:
        p = self.progress()
        if p >= len(self.lin):
            p = len(self.lin) - 1
        return self.step_for(p, self.lin[p])

    def step_for(self, p: int, slot: Slot, omit_compulsory: bool = False) -> str:
        ctx = self.ctx
        found = _candidates(ctx, slot)
        if not found:
            return self.refusal(slot)
        card = found[0]
        inputs = _inputs(card, ctx)
        if omit_compulsory:
            inputs = inputs[1:]
        tag = "EndCall" if p == len(self.lin) - 1 else "Call"
        return _call_text(tag, f"Run the {card.category.card_label} step of the plan", card.name, inputs)

    def refusal(self, slot: Slot) -> str:
        ctx = self.ctx
        cat = slot.category
        anatomy, modality = _scope(ctx)
        same = [c for c in ctx.toolset.cards if c.category is cat]
        if not same:
            kind, a, m = GapKind.CATEGORY_MISSING, UNIVERSAL, UNIVERSAL
        elif not any(scope_matches(c, anatomy, modality) for c in same):
            kind, a, m = GapKind.SPECIFIC_TOOL_MISSING, anatomy, modality
        else:
            kind, a, m = GapKind.INSUFFICIENT_CAPABILITY, anatomy, modality
        if self.misground == "category":
            cat = next(c for c in (ID, AD, OS, RG) if c is not cat)
        elif self.misground == "ability":
            kind = next(k for k in GapKind if k is not kind)
        need = capability_need(slot.category, ctx.record, slot.variant)
        purpose = f"{cat.card_label} for {anatomy} {modality}" + (f" supporting {need}" if need else "")
        return nocall_text(purpose, cat.card_label, a, m, kind.value)


class Deviant(Oracle):
    """Oracle that replaces the last ``k`` chain positions with a wrong category."""

    PREFERENCE = (ID, AD, OS, GD, RG, TP, BQ, IE)

    def __init__(self, k: int = 1, label: str | None = None):
        super().__init__(label=label or f"deviant-{k}")
        if k < 1:
            raise ValueError("k must be positive")
        self.k = k

    def step(self) -> str:
        ctx = self.ctx
        lin = self.lin
        p = min(len(ctx.executed), len(lin) - 1)
        if p < len(lin) - self.k:
            return self.step_for(p, lin[p])
        final = {s.category for s in ctx.spec.steps[-1]}
        for cat in self.PREFERENCE:
            if cat is lin[p].category or cat in final:
                continue
            for variant in (None, "organ", "anomaly") if cat in (BQ, IE) else (None,):
                found = _candidates(ctx, Slot(cat, variant))
                if found:
                    card = found[0]
                    tag = "EndCall" if p == len(lin) - 1 else "Call"
                    return _call_text(tag, f"Run the {cat.card_label} step", card.name, _inputs(card, ctx))
        return self.step_for(p, lin[p])


class Clumsy(Oracle):
    """Oracle that drops one compulsory input at chain position ``j`` (1-based), then retries."""

    def __init__(self, j: int = 1, label: str | None = None):
        super().__init__(label=label or f"clumsy-{j}")
        if j < 1:
            raise ValueError("j must be positive")
        self.j = j

    def _reset(self) -> None:
        self.fumbled = False

    def step(self) -> str:
        p = min(self.progress(), len(self.lin) - 1)
        if p == self.j - 1 and not self.fumbled:
            self.fumbled = True
            return self.step_for(p, self.lin[p], omit_compulsory=True)
        return self.step_for(p, self.lin[p])


class Refuser(Backend):
    """Always refuses at the first step with a fixed NoCall."""

    def __init__(
        self,
        category: str = "Anatomy Classifier",
        anatomy: str = UNIVERSAL,
        modality: str = UNIVERSAL,
        ability: str = GapKind.CATEGORY_MISSING.value,
        label: str = "refuser",
    ):
        self.label = label
        self.text = nocall_text("No suitable tool is available", category, anatomy, modality, ability)
        self.ctx: SessionContext | None = None

    def fork(self, ctx: SessionContext) -> "Backend":
        twin = Refuser.__new__(Refuser)
        twin.__dict__.update(self.__dict__)
        twin.ctx = ctx
        return twin

    def send(self, messages: Sequence[dict]) -> str:
        stage = self.ctx.stage if self.ctx else "step"
        if stage in ("decompose", "planner"):
            return "Known Info: []\nTool Chain: [*Anatomy Classification Tool*]"
        return self.text


class Echo(Backend):
    """Returns the latest user message verbatim (or a fixed text)."""

    def __init__(self, text: str | None = None, label: str = "echo"):
        self.text = text
        self.label = label

    def send(self, messages: Sequence[dict]) -> str:
        if self.text is not None:
            return self.text
        for m in reversed(messages):
            if m.get("role") == "user":
                return m["content"]
        return ""


class Scripted(Backend):
    """Replies with a fixed list of responses in order; empty text once exhausted."""

    def __init__(self, responses: Sequence[str], label: str = "scripted"):
        self.responses = list(responses)
        self.label = label

    def fork(self, ctx: SessionContext) -> "Backend":
        return _ScriptedRun(self.responses, self.label)


class _ScriptedRun(Backend):
    def __init__(self, responses: Sequence[str], label: str):
        self._left = list(responses)
        self.label = label

    def send(self, messages: Sequence[dict]) -> str:
        return self._left.pop(0) if self._left else ""


# ---------------------------------------------------------------- live backend


class LiveBackend(Backend):
    """OpenAI-compatible chat-completion client.

    The API key is read from the named environment variable at construction
    and never written anywhere.
    """

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str | None = None,
        retries: int = 2,
        timeout: float = 60.0,
        temperature: float = 0.0,
        max_parallelism: int = 4,
        transport: httpx.BaseTransport | None = None,
        label: str | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.retries = retries
        self.temperature = temperature
        self.max_parallelism = max_parallelism
        self.label = label or model
        headers = {"Content-Type": "application/json"}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise BackendError(f"environment variable {api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def send(self, messages: Sequence[dict]) -> str:
        url = self.endpoint if self.endpoint.endswith("/chat/completions") else f"{self.endpoint}/chat/completions"
        payload: dict[str, Any] = {"model": self.model, "messages": list(messages), "temperature": self.temperature}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(url, content=json.dumps(payload))
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.warning("backend %s attempt %d failed: %s", self.label, attempt + 1, exc)
        raise BackendError(f"{self.label}: {last}")

    def close(self) -> None:
        self._client.close()
