"""Agent session state machine: stage prompts, simulated tool execution and the step loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Callable, Mapping

from .backends import Backend, BackendError, SessionContext
from .corpus import PatientRecord, QAPair, ground_truth_spec
from .prompts import default_registry
from .protocol import (
    Call,
    EndCall,
    NoCall,
    ParseFailure,
    PlanError,
    message_from_dict,
    message_to_dict,
    parse_decomposition,
    parse_protocol,
)
from .tools import (
    Applicability,
    ToolCard,
    applicability,
    capability_need,
    card_from_dict,
    card_to_dict,
    performance_score,
    render_tool_card,
    render_toolset,
)
from .toolset_sim import Condition, GroundTruthGap, ToolSet
from .vocab import UnknownCategory, InfoKey

INITIAL_VALUES = {"$Image$": "PLACEHOLDER_IMAGE", "$Information$": "PLACEHOLDER_INFORMATION"}
FIXED = MappingProxyType({"$Image$": 1.0, "$Information$": 1.0})

# agent-facing stage name -> prompt stage used by overlays
STAGE_OF = {
    "decompose": "decompose",
    "step": "step",
    "conclude": "conclude",
    "planner": "decompose",
    "executor": "step",
    "concluder": "conclude",
}


class EngineError(ValueError):
    pass


class UnknownStage(EngineError):
    pass


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


# ---------------------------------------------------------------- memory bank


class MemoryBank:
    """Value and score banks. Fixed entries are never overwritten."""

    def __init__(self, values: Mapping[str, str] | None = None, scores: Mapping[str, float] | None = None):
        self.fixed = FIXED
        self.values: dict[str, str] = dict(INITIAL_VALUES)
        self.scores: dict[str, float] = dict(FIXED)
        if values:
            for k, v in values.items():
                if k not in self.fixed:
                    self.values[k] = v
                    self.scores[k] = (scores or {}).get(k, 1.0)

    def set(self, key: str, value: str, score: float) -> None:
        if key in self.fixed:
            return
        self.values[key] = value
        self.scores[key] = score

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def render(self) -> str:
        return repr(self.values)

    def snapshot(self) -> tuple[dict[str, str], dict[str, float]]:
        return dict(self.values), dict(self.scores)


# ---------------------------------------------------------------- prompts


@dataclass(frozen=True)
class PromptContext:
    record: PatientRecord
    question: str
    value_dict: str = repr(INITIAL_VALUES)


def patient_record_block(record: PatientRecord) -> str:
    return "$Information$: " + json.dumps(json.loads(record.info_json()), indent=4) + ","


def query_block(question: str) -> str:
    return f"$Query$: {question}\n\n$Image$: 'PLACEHOLDER_IMAGE'"


def render_stage_prompt(stage: str, ctx: PromptContext, templates: Mapping[str, str] | None = None) -> str:
    if stage not in ("decompose", "step", "conclude"):
        raise UnknownStage(stage)
    templates = templates or default_registry().get("v0-base")
    text = templates[stage]
    if stage == "decompose":
        return text.replace("{Patient Record}", patient_record_block(ctx.record)).replace(
            "{Query}", query_block(ctx.question)
        )
    return text.replace("{value_dict}", ctx.value_dict)


# ---------------------------------------------------------------- execution


class IOErrorKind(str, Enum):
    UNKNOWN_TOOL = "UnknownTool"
    MISSING_INPUT = "MissingInput"
    COMPULSORY_OMITTED = "CompulsoryOmitted"
    TOOL_MISUSE = "ToolMisuse"
    PROTOCOL_PARSE = "ProtocolParse"


@dataclass(frozen=True)
class Executed:
    tool: str
    outputs: dict[str, str]
    score: float
    optional_count: int

    kind = "Executed"


@dataclass(frozen=True)
class IOError_:
    error: IOErrorKind
    detail: str = ""

    kind = "IOError"

    @property
    def feedback(self) -> str:
        return f"Execution failed: {self.error.value}" + (f". {self.detail}" if self.detail else "")


def execute_call(msg: Call | EndCall, toolset: ToolSet, bank: MemoryBank, record: PatientRecord) -> Executed | IOError_:
    card = toolset.get(msg.tool_name)
    if card is None:
        return IOError_(IOErrorKind.UNKNOWN_TOOL, f"{msg.tool_name} is not an available tool")
    absent = [k for k in msg.inputs if k not in bank]
    if absent:
        return IOError_(IOErrorKind.MISSING_INPUT, f"{', '.join(absent)} not in the results dictionary")
    omitted = [k.value for k in card.compulsory if k.value not in msg.inputs]
    if omitted:
        return IOError_(IOErrorKind.COMPULSORY_OMITTED, f"{card.name} requires {', '.join(omitted)}")
    anatomy = bank.values.get(InfoKey.ANATOMY.value, record.anatomy)
    modality = bank.values.get(InfoKey.MODALITY.value, record.modality)
    need = capability_need(card.category, record, card.variant)
    if applicability(card, anatomy, modality, need) is not Applicability.APPLICABLE:
        return IOError_(IOErrorKind.TOOL_MISUSE, f"{card.name} is not suitable for this image")
    optional = {k.value for k in card.optional}
    count = len({k for k in msg.inputs if k in optional})
    score = performance_score(card, count)
    truth = record.ground_truth()
    outputs = {k.value: truth[k] for k in card.output}
    for key, value in outputs.items():
        bank.set(key, value, score)
    return Executed(card.name, outputs, score, count)


def outcome_to_dict(outcome) -> dict:
    if isinstance(outcome, Executed):
        return {
            "kind": "Executed",
            "tool": outcome.tool,
            "outputs": dict(outcome.outputs),
            "score": outcome.score,
            "optional_count": outcome.optional_count,
        }
    if isinstance(outcome, IOError_):
        return {"kind": "IOError", "error": outcome.error.value, "detail": outcome.detail}
    return dict(outcome)


# ---------------------------------------------------------------- transcript


@dataclass
class Limits:
    max_steps: int | None = None
    abort_on_io_error: bool = False


@dataclass
class Turn:
    agent: str
    role: str
    stage: str
    content: str
    tokens: int
    context_tokens: int


@dataclass
class StepRecord:
    index: int
    agent: str
    request: str
    response: str
    message: dict
    outcome: dict
    values: dict
    scores: dict


@dataclass
class Transcript:
    qa_id: str
    record_id: str
    task: int
    condition: str | None
    seed: int
    backend: str
    strategy: str
    question: str
    reference: str
    toolset: list
    gap: dict | None
    max_steps: int
    plan: dict | None = None
    plan_error: str | None = None
    turns: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    executed_chain: list = field(default_factory=list)
    builds: list = field(default_factory=list)
    reprompts: int = 0
    terminal: dict | None = None

    @property
    def answer(self) -> str | None:
        return self.terminal.get("answer") if self.terminal else None

    @property
    def token_counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for t in self.turns:
            bucket = out.setdefault(t.agent, {"input": 0, "output": 0, "context_max": 0})
            bucket["output" if t.role == "assistant" else "input"] += t.tokens
            bucket["context_max"] = max(bucket["context_max"], t.context_tokens)
        return out

    @property
    def context_tokens(self) -> int:
        return max((t.context_tokens for t in self.turns), default=0)

    def set_terminal(self, kind: str, **extra) -> None:
        if self.terminal is not None:
            raise EngineError("terminal state already set")
        self.terminal = {"kind": kind, **extra}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_counts"] = self.token_counts
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Transcript":
        d = dict(d)
        d.pop("token_counts", None)
        d["turns"] = [Turn(**t) for t in d.get("turns", [])]
        d["steps"] = [StepRecord(**s) for s in d.get("steps", [])]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "Transcript":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- overlays


class Overlay:
    """Strategy hooks. The base overlay changes nothing."""

    label = "base"

    def augment(self, stage: str, text: str) -> str:
        return text

    def check(self, stage: str, reply: str) -> bool:
        return True

    def reprompt(self, stage: str) -> str:
        return ""

    def on_nocall(self, msg: NoCall, session: "Session") -> tuple[ToolCard | None, dict | None]:
        return None, None


class _Stop(Exception):
    pass


class Session:
    """One question answered against one tool set. Owns its transcript."""

    def __init__(
        self,
        qa: QAPair,
        record: PatientRecord,
        toolset: ToolSet,
        *,
        backend_label: str,
        overlay: Overlay | None = None,
        limits: Limits | None = None,
        gap: GroundTruthGap | None = None,
        condition: Condition | str | None = None,
        seed: int = 0,
        templates: Mapping[str, str] | None = None,
    ):
        self.qa = qa
        self.record = record
        self.toolset = toolset
        self.overlay = overlay or Overlay()
        self.limits = limits or Limits()
        self.spec = ground_truth_spec(qa.task)
        self.max_steps = self.limits.max_steps or 2 * self.spec.length + 5
        if self.max_steps < 1:
            raise EngineError("max_steps must be at least 1")
        self.templates = templates or default_registry().get("v0-base")
        self.bank = MemoryBank()
        cond = Condition(condition) if condition is not None else None
        self.ctx = SessionContext(record, qa, self.spec, toolset, cond, gap)
        self.transcript = Transcript(
            qa_id=qa.qa_id,
            record_id=record.record_id,
            task=int(qa.task),
            condition=cond.value if cond else None,
            seed=seed,
            backend=backend_label,
            strategy=self.overlay.label,
            question=qa.question,
            reference=qa.answer,
            toolset=[card_to_dict(c) for c in toolset.cards],
            gap=gap.to_dict() if gap else None,
            max_steps=self.max_steps,
        )

    # -- chat plumbing

    def _post(self, history: list[dict], agent: str, role: str, stage: str, content: str) -> None:
        history.append({"role": role, "content": content})
        ctx_tokens = sum(estimate_tokens(m["content"]) for m in history)
        self.transcript.turns.append(Turn(agent, role, stage, content, estimate_tokens(content), ctx_tokens))

    def _send(self, run: Backend, history: list[dict], agent: str, stage: str) -> str:
        self.ctx.stage = stage
        self.ctx.bank = dict(self.bank.values)
        self.ctx.toolset = self.toolset
        try:
            reply = run.send(list(history))
        except BackendError as exc:
            self.transcript.set_terminal("BackendError", error=str(exc))
            raise _Stop from exc
        except Exception as exc:  # backends are third-party code
            self.transcript.set_terminal("BackendError", error=f"{type(exc).__name__}: {exc}")
            raise _Stop from exc
        reply = reply if isinstance(reply, str) else str(reply)
        self._post(history, agent, "assistant", stage, reply)
        return reply

    def ask(self, run: Backend, history: list[dict], agent: str, stage: str, text: str) -> tuple[str, str]:
        """Send one user turn (overlay applied); returns (sent text, reply)."""
        pstage = STAGE_OF[stage]
        text = self.overlay.augment(pstage, text)
        self._post(history, agent, "user", stage, text)
        reply = self._send(run, history, agent, stage)
        if not self.overlay.check(pstage, reply):
            self.transcript.reprompts += 1
            self._post(history, agent, "user", stage, self.overlay.reprompt(pstage))
            reply = self._send(run, history, agent, stage)
        return text, reply

    # -- phases

    def decompose(self, run: Backend, history: list[dict], agent: str = "agent") -> None:
        pctx = PromptContext(self.record, self.qa.question)
        _, reply = self.ask(run, history, agent, "decompose", render_stage_prompt("decompose", pctx, self.templates))
        self.record_plan(reply)

    def record_plan(self, reply: str) -> None:
        try:
            self.transcript.plan = parse_decomposition(reply).to_dict()
        except (PlanError, UnknownCategory) as exc:
            self.transcript.plan_error = f"{type(exc).__name__}: {exc}"

    def step_loop(
        self,
        run: Backend,
        history: list[dict],
        request: Callable[[], str],
        agent: str = "agent",
        stage: str = "step",
    ) -> bool:
        """Run steps until an EndCall executes (True) or another terminal state is set (False)."""
        t = self.transcript
        prefix = ""
        for index in range(self.max_steps):
            sent, reply = self.ask(run, history, agent, stage, prefix + request())
            msg = parse_protocol(reply)
            prefix = ""
            done = False
            if isinstance(msg, ParseFailure):
                outcome = IOError_(IOErrorKind.PROTOCOL_PARSE, msg.reason)
            elif isinstance(msg, NoCall):
                card, event = self.overlay.on_nocall(msg, self)
                outcome = {"kind": "DeniedByAgent", "built": card is not None}
                if card is not None:
                    self.toolset = self.toolset.with_card(card)
                    built = self.toolset.cards[-1]
                    t.builds.append({**(event or {}), "step": index, "card": card_to_dict(built)})
                    prefix = "Building Done. Successful!\n" + render_tool_card(built) + "\n\n"
                elif event is not None:
                    t.builds.append({**event, "step": index, "card": None})
            else:
                outcome = execute_call(msg, self.toolset, self.bank, self.record)
                if isinstance(outcome, Executed):
                    card = self.toolset.get(outcome.tool)
                    t.executed_chain.append(
                        {"tool": card.name, "category": card.category.value, "variant": card.variant}
                    )
                    self.ctx.executed.append(card.name)
                    done = isinstance(msg, EndCall)
            if isinstance(outcome, IOError_):
                self.ctx.last_error = outcome.error.value
                prefix = outcome.feedback + "\n\n"
            values, scores = self.bank.snapshot()
            t.steps.append(
                StepRecord(index, agent, sent, reply, message_to_dict(msg), outcome_to_dict(outcome), values, scores)
            )
            if done:
                return True
            if isinstance(msg, NoCall) and not outcome["built"]:
                t.set_terminal("NoCallStop", nocall=message_to_dict(msg))
                return False
            if isinstance(outcome, IOError_) and self.limits.abort_on_io_error:
                t.set_terminal("IOAbort", error=outcome.error.value)
                return False
        t.set_terminal("IterationCap")
        return False

    def conclude(self, run: Backend, history: list[dict], text: str, agent: str = "agent", stage: str = "conclude") -> None:
        _, reply = self.ask(run, history, agent, stage, text)
        self.transcript.set_terminal("Concluded", answer=reply)

    def run(self, backend: Backend) -> Transcript:
        run = backend.fork(self.ctx)
        history: list[dict] = []
        self._post(history, "agent", "system", "system", render_toolset(self.toolset.cards))
        try:
            self.decompose(run, history)
            step_text = lambda: render_stage_prompt(  # noqa: E731
                "step", PromptContext(self.record, self.qa.question, self.bank.render()), self.templates
            )
            if self.step_loop(run, history, step_text):
                ctx = PromptContext(self.record, self.qa.question, self.bank.render())
                self.conclude(run, history, render_stage_prompt("conclude", ctx, self.templates))
        except _Stop:
            pass
        return self.transcript


def run_session(
    backend: Backend,
    qa: QAPair,
    record: PatientRecord,
    toolset: ToolSet,
    overlay: Overlay | None = None,
    limits: Limits | None = None,
    gap: GroundTruthGap | None = None,
    condition: Condition | str | None = None,
    seed: int = 0,
    templates: Mapping[str, str] | None = None,
) -> Transcript:
    session = Session(
        qa,
        record,
        toolset,
        backend_label=backend.label,
        overlay=overlay,
        limits=limits,
        gap=gap,
        condition=condition,
        seed=seed,
        templates=templates,
    )
    return session.run(backend)


# ---------------------------------------------------------------- replay


def transcript_toolset(t: Transcript) -> ToolSet:
    cards = tuple(card_from_dict(c) for c in t.toolset)
    cond = Condition(t.condition) if t.condition else Condition.BASELINE
    return ToolSet(cards, cond, t.seed, t.record_id, t.task)


def replay(t: Transcript, record: PatientRecord) -> list[tuple[dict, dict]]:
    """Re-execute the recorded responses; returns the bank snapshot after each step."""
    toolset = transcript_toolset(t)
    builds = {b["step"]: b for b in t.builds if b.get("card")}
    bank = MemoryBank()
    snapshots = []
    for step in t.steps:
        msg = parse_protocol(step.response)
        if message_to_dict(msg) != step.message:
            raise EngineError(f"step {step.index}: parsed message differs from the record")
        if isinstance(msg, (Call, EndCall)):
            execute_call(msg, toolset, bank, record)
        elif isinstance(msg, NoCall) and step.index in builds:
            toolset = toolset.with_card(card_from_dict(builds[step.index]["card"]))
        snapshots.append(bank.snapshot())
    return snapshots


def replay_matches(t: Transcript, record: PatientRecord) -> bool:
    return [(s.values, s.scores) for s in t.steps] == replay(t, record)


__all__ = [
    "Executed",
    "IOErrorKind",
    "IOError_",
    "Limits",
    "MemoryBank",
    "Overlay",
    "PromptContext",
    "Session",
    "StepRecord",
    "Transcript",
    "Turn",
    "UnknownStage",
    "execute_call",
    "message_from_dict",
    "render_stage_prompt",
    "replay",
    "replay_matches",
    "run_session",
]
