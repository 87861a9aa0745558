"""Prompting strategies and the simulated tool-building recovery loop, as engine overlays."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

from .backends import Backend
from .corpus import PatientRecord, QAPair
from .engine import (
    Limits,
    Overlay,
    Session,
    Transcript,
    _Stop,
    patient_record_block,
    query_block,
)
from .prompts import STAGES, PromptError, PromptRegistry, default_registry
from .protocol import NoCall, has_planner_block, parse_planner_block
from .tools import ToolCard, make_card, render_toolset
from .toolset_sim import Condition, GroundTruthGap, ToolSet
from .vocab import UNIVERSAL, ToolCategory

AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)

BUILT_PERFORMANCE = 0.8


class StrategyError(ValueError):
    pass


class PlannerParseError(StrategyError):
    def __init__(self, message: str, transcript: Transcript | None = None):
        super().__init__(message)
        self.transcript = transcript


class BuilderPolicy(str, Enum):
    EXACT_MATCH = "ExactMatch"
    OFF = "Off"


@dataclass(frozen=True)
class StrategyConfig:
    self_reflection: bool = False
    few_shot: bool = False
    multi_agent: bool = False
    auto_build: bool = False
    prompt_set: str | None = None
    builder_policy: BuilderPolicy = BuilderPolicy.EXACT_MATCH

    @property
    def prompt_version(self) -> str:
        if self.prompt_set:
            return self.prompt_set
        return "v1-refined" if self.multi_agent else "v0-base"

    @property
    def label(self) -> str:
        parts = [
            name
            for name, on in (
                ("sr", self.self_reflection),
                ("fs", self.few_shot),
                ("ma", self.multi_agent),
                ("build", self.auto_build),
            )
            if on
        ]
        if self.prompt_set and self.prompt_set not in ("v0-base", "v1-refined"):
            parts.insert(0, self.prompt_set)
        return "+".join(parts) or "base"

    @classmethod
    def from_dict(cls, d: Mapping) -> "StrategyConfig":
        return cls(
            self_reflection=bool(d.get("self_reflection", False)),
            few_shot=bool(d.get("few_shot", False)),
            multi_agent=bool(d.get("multi_agent", False)),
            auto_build=bool(d.get("auto_build", False)),
            prompt_set=d.get("prompt_set"),
            builder_policy=BuilderPolicy(d.get("builder_policy", "ExactMatch")),
        )

    def to_dict(self) -> dict:
        return {
            "self_reflection": self.self_reflection,
            "few_shot": self.few_shot,
            "multi_agent": self.multi_agent,
            "auto_build": self.auto_build,
            "prompt_set": self.prompt_set,
            "builder_policy": self.builder_policy.value,
        }


# ---------------------------------------------------------------- prompt overlays

_RESPONSE_HEADING = "## Response Format"


def augment_prompt(
    base: str,
    stage: str,
    *,
    self_reflection: bool = False,
    few_shot: bool = False,
    registry: PromptRegistry | None = None,
) -> str:
    """Few-shot examples are appended first, then the reflection block is inserted."""
    reg = registry or default_registry()
    text = base
    if few_shot and stage in ("step", "conclude"):
        text = f"{text}\n\n{reg.overlay(f'few_shot_{stage}')}"
    if self_reflection:
        block = reg.overlay(f"reflection_{stage}")
        at = text.find(_RESPONSE_HEADING)
        if at >= 0:
            text = f"{text[:at]}{block}\n\n{text[at:]}"
        else:
            text = f"{text}\n\n{block}"
    return text


_REFLECTION_BLOCK = re.compile(r"<Reflection>(.*?)</Reflection>", re.S)
_PROTOCOL_OPEN = re.compile(r"<(Call|EndCall|NoCall)>")


def validate_reflection(response_text: str) -> bool:
    block = _REFLECTION_BLOCK.search(response_text)
    proto = _PROTOCOL_OPEN.search(response_text)
    if block is None or proto is None or block.end() > proto.start():
        return False
    body = block.group(1)
    return all(re.search(rf"<{t}>.*?\S.*?</{t}>", body, re.S) for t in ("Candidates", "Reasoning", "Constraints"))


REFLECTION_REPROMPT = (
    "Your previous response did not include a complete <Reflection> block with "
    "<Candidates>, <Reasoning> and <Constraints> before the Call, EndCall or NoCall block. "
    "Please respond again in the required format."
)


# ---------------------------------------------------------------- tool building

_WANT = {
    AC: ("classify", "anatomy"),
    MC: ("classify", "modality"),
    OS: ("segment", "organs"),
    AD: ("detect", "anomalies"),
    ID: ("diagnose", "disease"),
    GD: ("infer", "disease from findings"),
    BQ: ("calculate", "biomarker"),
    IE: ("evaluate", "indicator"),
    RG: ("generate", "report"),
    TP: ("recommend", "treatment"),
}


@dataclass(frozen=True)
class BuildRequest:
    category: ToolCategory | None
    category_text: str
    anatomy: str
    modality: str
    capability: str
    source: NoCall

    @property
    def text(self) -> str:
        verb, _ = _WANT.get(self.category, ("provide", self.category_text))
        scope = " ".join(p for p in (self.anatomy, self.modality) if p and p.lower() != UNIVERSAL.lower())
        return f"I need a model to {verb} the {self.capability}" + (f" in {scope}" if scope else "")

    def to_dict(self) -> dict:
        return {
            "category": self.category.value if self.category else None,
            "category_text": self.category_text,
            "anatomy": self.anatomy,
            "modality": self.modality,
            "capability": self.capability,
            "purpose": self.source.purpose,
            "text": self.text,
        }


def emit_build_request(nocall: NoCall, capability: str | None = None) -> BuildRequest:
    noun = _WANT[nocall.category][1] if nocall.category else nocall.category_text
    return BuildRequest(
        nocall.category,
        nocall.category_text,
        nocall.anatomy,
        nocall.modality,
        capability or noun,
        nocall,
    )


def _norm_scope(value: str | None) -> str:
    return (value or UNIVERSAL).strip().lower()


def simulated_builder(
    request: BuildRequest, gap: GroundTruthGap | None, policy: BuilderPolicy = BuilderPolicy.EXACT_MATCH
) -> ToolCard | None:
    if policy is BuilderPolicy.OFF or gap is None:
        return None
    if request.category is not gap.category:
        return None
    asked = sorted([_norm_scope(request.anatomy), _norm_scope(request.modality)])
    wanted = sorted([_norm_scope(gap.anatomy), _norm_scope(gap.modality)])
    if asked != wanted:
        return None
    if gap.missing_label:
        haystack = f"{request.capability} {request.source.purpose}".lower()
        if gap.missing_label.lower() not in haystack:
            return None
    anatomy = None if _norm_scope(gap.anatomy) == UNIVERSAL.lower() else gap.anatomy
    modality = None if _norm_scope(gap.modality) == UNIVERSAL.lower() else gap.modality
    return make_card(
        "TOOL0",
        gap.category,
        anatomy=anatomy,
        modality=modality,
        lower=BUILT_PERFORMANCE,
        upper=BUILT_PERFORMANCE,
    )


class StrategyOverlay(Overlay):
    """Engine hooks for one strategy configuration. Holds no per-session state."""

    def __init__(self, config: StrategyConfig, registry: PromptRegistry | None = None):
        self.config = config
        self.registry = registry or default_registry()
        self.label = config.label

    def augment(self, stage: str, text: str) -> str:
        if self.config.multi_agent:
            # role prompts already carry their reflection and example sections
            return text
        return augment_prompt(
            text,
            stage,
            self_reflection=self.config.self_reflection,
            few_shot=self.config.few_shot,
            registry=self.registry,
        )

    def check(self, stage: str, reply: str) -> bool:
        if self.config.self_reflection and stage == "step":
            return validate_reflection(reply)
        return True

    def reprompt(self, stage: str) -> str:
        return REFLECTION_REPROMPT

    def on_nocall(self, msg: NoCall, session: Session) -> tuple[ToolCard | None, dict | None]:
        if not self.config.auto_build or session.transcript.builds:
            return None, None
        request = emit_build_request(msg)
        card = simulated_builder(request, session.ctx.gap, self.config.builder_policy)
        return card, {"request": request.to_dict(), "success": card is not None}


# ---------------------------------------------------------------- sessions


def _templates(config: StrategyConfig, registry: PromptRegistry) -> dict[str, str]:
    templates = registry.get(config.prompt_version)
    needed = ("planner", "executor", "concluder") if config.multi_agent else STAGES
    missing = [n for n in needed if n not in templates]
    if missing:
        raise PromptError(f"prompt set {config.prompt_version} lacks {missing}")
    return templates


def run_strategy(
    backend: Backend | Sequence[Backend],
    qa: QAPair,
    record: PatientRecord,
    toolset: ToolSet,
    config: StrategyConfig | None = None,
    limits: Limits | None = None,
    gap: GroundTruthGap | None = None,
    condition: Condition | str | None = None,
    seed: int = 0,
    registry: PromptRegistry | None = None,
) -> Transcript:
    config = config or StrategyConfig()
    if config.multi_agent:
        return run_multi_agent(backend, qa, record, toolset, config, limits, gap, condition, seed, registry)
    if not isinstance(backend, Backend):
        backend = backend[0]
    reg = registry or default_registry()
    session = Session(
        qa,
        record,
        toolset,
        backend_label=backend.label,
        overlay=StrategyOverlay(config, reg),
        limits=limits,
        gap=gap,
        condition=condition,
        seed=seed,
        templates=_templates(config, reg),
    )
    return session.run(backend)


PLANNER_RETRY = (
    "Your response did not contain the structured plan. Reply with one json block holding "
    '"Task Summary", "Known Info", "Self-Reflection" and "Tool Chain".'
)


def _executor_turn(value_dict: str) -> str:
    return f"Current known information dict: {value_dict}\nProvide the next step."


def _planner_block(reply: str) -> str:
    m = re.search(r"```(?:json)?\s*(.*?)```", reply, re.S)
    return (m.group(1) if m else reply).strip()


def run_multi_agent(
    backends: Backend | Sequence[Backend],
    qa: QAPair,
    record: PatientRecord,
    toolset: ToolSet,
    config: StrategyConfig | None = None,
    limits: Limits | None = None,
    gap: GroundTruthGap | None = None,
    condition: Condition | str | None = None,
    seed: int = 0,
    registry: PromptRegistry | None = None,
) -> Transcript:
    """Planner, executor and concluder with forward-only handoff between roles."""
    config = config or StrategyConfig(multi_agent=True, self_reflection=True, few_shot=True)
    if not config.multi_agent:
        config = StrategyConfig(**{**config.to_dict(), "multi_agent": True, "builder_policy": config.builder_policy})
    slots = [backends] * 3 if isinstance(backends, Backend) else list(backends)
    if len(slots) == 1:
        slots = slots * 3
    if len(slots) != 3:
        raise StrategyError("multi-agent mode needs one or three backends")
    reg = registry or default_registry()
    templates = _templates(config, reg)
    label = slots[0].label if len({b.label for b in slots}) == 1 else "/".join(b.label for b in slots)
    session = Session(
        qa,
        record,
        toolset,
        backend_label=label,
        overlay=StrategyOverlay(config, reg),
        limits=limits,
        gap=gap,
        condition=condition,
        seed=seed,
    )
    t = session.transcript
    planner, executor, concluder = (b.fork(session.ctx) for b in slots)
    try:
        history: list[dict] = []
        session._post(history, "planner", "system", "system", templates["planner"])
        request = patient_record_block(record) + "\n\n" + query_block(qa.question)
        _, reply = session.ask(planner, history, "planner", "planner", request)
        if not has_planner_block(reply):
            t.reprompts += 1
            _, reply = session.ask(planner, history, "planner", "planner", PLANNER_RETRY)
        if not has_planner_block(reply):
            t.set_terminal("BackendError", error="PlannerParseError: no structured plan after one retry")
            raise PlannerParseError("planner reply has no structured plan block", t)
        try:
            t.plan = parse_planner_block(reply).to_dict()
        except ValueError as exc:
            t.plan_error = f"{type(exc).__name__}: {exc}"

        system = (
            templates["executor"]
            .replace("{query}", qa.question)
            .replace("{decomposition_json}", _planner_block(reply))
            .replace("{toolset_description}", render_toolset(toolset.cards))
        )
        history = []
        session._post(history, "executor", "system", "system", system)
        if session.step_loop(
            executor, history, lambda: _executor_turn(session.bank.render()), agent="executor", stage="executor"
        ):
            history = []
            session._post(history, "concluder", "system", "system", templates["concluder"])
            text = f'Query: "{qa.question}"\n\nKnown Info: "{session.bank.render()}"'
            session.conclude(concluder, history, text, agent="concluder", stage="concluder")
    except _Stop:
        pass
    return t


# ---------------------------------------------------------------- prompt back-propagation

CRITIQUE_REQUEST = """You are reviewing the prompts of a radiology tool-calling agent.
Below are the current prompt templates followed by excerpts from sessions that failed.
Revise the templates so the agent avoids these failures. Keep every placeholder in braces unchanged.
Return each revised template inside <decompose>...</decompose>, <step>...</step> and <conclude>...</conclude>.

{templates}

## Failure excerpts
{excerpts}"""


def _failure_excerpt(t: Transcript) -> str:
    term = t.terminal or {}
    lines = [f"- {t.qa_id} [{t.condition}] terminal={term.get('kind')}"]
    for s in t.steps:
        if s.outcome.get("kind") != "Executed":
            lines.append(f"  step {s.index}: {s.outcome.get('kind')} {s.outcome.get('error', '')}".rstrip())
            lines.append("  response: " + re.sub(r"\s+", " ", s.response)[:300])
    if term.get("kind") == "NoCallStop" and t.gap:
        lines.append(f"  expected gap: {json.dumps(t.gap, sort_keys=True)}")
    return "\n".join(lines)


def is_failure(t: Transcript) -> bool:
    term = (t.terminal or {}).get("kind")
    if t.gap is not None:
        return term != "NoCallStop"
    return term != "Concluded" or any(s.outcome.get("kind") == "IOError" for s in t.steps)


def critique_prompt_round(
    backend: Backend,
    prompt_version: str,
    sample_transcripts: Sequence[Transcript],
    registry: PromptRegistry,
) -> str:
    """Ask the backend to revise a prompt version; stores the result as a new, inactive version."""
    if not sample_transcripts:
        raise StrategyError("critique needs at least one sample transcript")
    current = registry.get(prompt_version)
    missing = [s for s in STAGES if s not in current]
    if missing:
        raise StrategyError(f"{prompt_version} is not a stage prompt set")
    failures = [t for t in sample_transcripts if is_failure(t)] or list(sample_transcripts)
    templates = "\n\n".join(f"<{s}>\n{current[s]}\n</{s}>" for s in STAGES)
    request = CRITIQUE_REQUEST.format(templates=templates, excerpts="\n".join(_failure_excerpt(t) for t in failures))
    run = backend.fork(None)
    reply = run.send([{"role": "user", "content": request}])
    revised = {}
    for stage in STAGES:
        m = re.search(rf"<{stage}>\n?(.*?)\n?</{stage}>", reply, re.S)
        candidate = m.group(1) if m else None
        slots = set(re.findall(r"\{[A-Za-z_ ]+\}", current[stage]))
        if candidate and all(s in candidate for s in slots):
            revised[stage] = candidate
        else:
            revised[stage] = current[stage]
    name = registry.next_version_name(prompt_version)
    note = f"critique of {len(failures)} failing sessions"
    return registry.add_version(name, revised, parent=prompt_version, note=note)
