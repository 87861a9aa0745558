import pytest
from hypothesis import given, settings, strategies as st

from radabench.backends import Backend, BackendError, Echo, Oracle, Refuser, Scripted
from radabench.corpus import TaskType
from radabench.engine import (
    FIXED,
    EngineError,
    Executed,
    IOError_,
    IOErrorKind,
    Limits,
    MemoryBank,
    PromptContext,
    Transcript,
    UnknownStage,
    estimate_tokens,
    execute_call,
    render_stage_prompt,
    replay,
    replay_matches,
    run_session,
)
from radabench.protocol import Call, EndCall
from radabench.tools import make_card, toolset_from_json
from radabench.toolset_sim import Condition, GapKind, GroundTruthGap, ToolSet, build_toolset
from radabench.vocab import InfoKey, ToolCategory

from .conftest import FIXTURES, fixture_text

AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)


@pytest.fixture
def cs1_toolset(sinusitis):
    cards = tuple(toolset_from_json((FIXTURES / "cs1_toolset.json").read_text()))
    return ToolSet(cards, Condition.INSUFFICIENT_CONFIG2, 0, sinusitis.record.record_id, TaskType(7))


CS1_GAP = GroundTruthGap(AD, "Head and Neck", "X-ray", GapKind.SPECIFIC_TOOL_MISSING)


# ---------------------------------------------------------------- prompts


def test_decompose_prompt(sinusitis):
    text = render_stage_prompt("decompose", PromptContext(sinusitis.record, sinusitis.qa[6].question))
    assert "Please wait for my query." in text
    assert text.endswith("$Image$: 'PLACEHOLDER_IMAGE'")
    assert sinusitis.qa[6].question in text


def test_step_prompt_embeds_bank(sinusitis):
    bank = MemoryBank({"$Anatomy$": "Head and Neck"})
    text = render_stage_prompt("step", PromptContext(sinusitis.record, "q", bank.render()))
    assert text.startswith("# Next Step Planning")
    assert "Current results dictionary: " + bank.render() in text
    assert "{value_dict}" not in text


def test_conclude_prompt(sinusitis):
    text = render_stage_prompt("conclude", PromptContext(sinusitis.record, "q"))
    assert "Keep your response brief" in text


def test_unknown_stage(sinusitis):
    with pytest.raises(UnknownStage):
        render_stage_prompt("reflect", PromptContext(sinusitis.record, "q"))


def test_token_estimate():
    assert [estimate_tokens(s) for s in ("", "abc", "abcd", "abcde")] == [0, 1, 1, 2]


# ---------------------------------------------------------------- bank


def test_bank_initial_state():
    bank = MemoryBank()
    assert bank.values == {"$Image$": "PLACEHOLDER_IMAGE", "$Information$": "PLACEHOLDER_INFORMATION"}
    assert bank.scores == dict(FIXED)


def test_bank_fixed_entries_immutable():
    bank = MemoryBank()
    bank.set("$Image$", "other", 0.1)
    assert bank.values["$Image$"] == "PLACEHOLDER_IMAGE"
    assert bank.scores["$Image$"] == 1.0


@given(st.lists(st.tuples(st.sampled_from([k.value for k in InfoKey]), st.text(max_size=5),
                          st.floats(0, 1)), max_size=30))
def test_bank_monotone(ops):
    bank = MemoryBank()
    seen = set(bank.values)
    for key, value, score in ops:
        bank.set(key, value, score)
        assert seen <= set(bank.values)
        seen = set(bank.values)
        assert set(bank.values) == set(bank.scores)
        assert bank.values["$Image$"] == "PLACEHOLDER_IMAGE" and bank.scores["$Information$"] == 1.0


# ---------------------------------------------------------------- execute_call


def test_tool1_sets_anatomy(cs1_toolset, sinusitis):
    bank = MemoryBank()
    out = execute_call(Call("p", "TOOL1", ("$Image$",)), cs1_toolset, bank, sinusitis.record)
    assert isinstance(out, Executed)
    assert bank.values["$Anatomy$"] == "Head and Neck"
    assert bank.scores["$Anatomy$"] == 0.95


def test_unknown_tool(sinusitis):
    ts, _ = build_toolset(Condition.BASELINE, 0, sinusitis.record, 1)
    out = execute_call(Call("p", "TOOL99", ("$Image$",)), ts, MemoryBank(), sinusitis.record)
    assert out.error is IOErrorKind.UNKNOWN_TOOL
    assert out.feedback.startswith("Execution failed: UnknownTool")


def _single(card, sinusitis):
    return ToolSet((card,), Condition.BASELINE, 0, sinusitis.record.record_id, TaskType(1))


def test_missing_input(sinusitis):
    ts = _single(make_card("TOOL1", OS), sinusitis)
    out = execute_call(Call("p", "TOOL1", ("$Image$", "$Anatomy$", "$Modality$")), ts, MemoryBank(), sinusitis.record)
    assert out.error is IOErrorKind.MISSING_INPUT


def test_compulsory_omitted(sinusitis):
    ts = _single(make_card("TOOL1", OS), sinusitis)
    bank = MemoryBank({"$Anatomy$": "Head and Neck", "$Modality$": "X-ray"})
    out = execute_call(Call("p", "TOOL1", ("$Image$", "$Anatomy$")), ts, bank, sinusitis.record)
    assert out.error is IOErrorKind.COMPULSORY_OMITTED


def test_spine_ct_misuse(sinusitis):
    ts = _single(make_card("TOOL1", OS, anatomy="Spine", modality="CT"), sinusitis)
    bank = MemoryBank({"$Anatomy$": "Head and Neck", "$Modality$": "X-ray"})
    before = bank.snapshot()
    out = execute_call(Call("p", "TOOL1", ("$Image$",)), ts, bank, sinusitis.record)
    assert out.error is IOErrorKind.TOOL_MISUSE
    assert bank.snapshot() == before


def test_optional_inputs_raise_score(sinusitis):
    card = make_card("TOOL1", RG, anatomy="Head and Neck", modality="X-ray", lower=0.4, upper=0.88)
    ts = _single(card, sinusitis)
    bank = MemoryBank()
    out = execute_call(EndCall("p", "TOOL1", ("$Image$", "$Information$")), ts, bank, sinusitis.record)
    assert out.optional_count == 1
    assert out.score == pytest.approx(0.44)
    assert bank.scores["$Report$"] == out.score
    assert card.lower <= out.score <= card.upper


# ---------------------------------------------------------------- sessions


def _baseline(entry, task, seed=0):
    ts, gap = build_toolset(Condition.BASELINE, seed, entry.record, task)
    return ts, gap


def test_oracle_task1(sinusitis):
    ts, _ = _baseline(sinusitis, 1)
    t = run_session(Oracle(), sinusitis.qa[0], sinusitis.record, ts, condition=Condition.BASELINE)
    assert t.terminal["kind"] == "Concluded"
    assert [s["category"] for s in t.executed_chain] == [AC.value, MC.value, OS.value]
    assert t.answer == sinusitis.qa[0].answer
    assert t.max_steps == 2 * 3 + 5


def test_refuser_stops_after_one_step(sinusitis):
    ts, _ = _baseline(sinusitis, 4)
    t = run_session(Refuser(), sinusitis.qa[3], sinusitis.record, ts)
    assert t.terminal["kind"] == "NoCallStop"
    assert len(t.steps) == 1


def test_iteration_cap(sinusitis):
    ts, _ = _baseline(sinusitis, 1)
    t = run_session(Echo("thinking..."), sinusitis.qa[0], sinusitis.record, ts, limits=Limits(max_steps=3))
    assert t.terminal["kind"] == "IterationCap"
    assert len(t.steps) == 3
    assert all(s.outcome["error"] == "ProtocolParse" for s in t.steps)


def test_abort_on_io_error(sinusitis):
    ts, _ = _baseline(sinusitis, 1)
    bad = "<Call><Purpose>p</Purpose><Tool>TOOL99</Tool><Input>['$Image$']</Input></Call>"
    t = run_session(Echo(bad), sinusitis.qa[0], sinusitis.record, ts, limits=Limits(abort_on_io_error=True))
    assert t.terminal["kind"] == "IOAbort"
    assert len(t.steps) == 1


def test_io_error_fed_back(sinusitis):
    ts, _ = _baseline(sinusitis, 1)
    bad = "<Call><Purpose>p</Purpose><Tool>TOOL99</Tool><Input>['$Image$']</Input></Call>"
    t = run_session(Scripted(["Tool Chain: [*AC*]", bad, ""]), sinusitis.qa[0], sinusitis.record, ts,
                    limits=Limits(max_steps=2))
    assert t.steps[1].request.startswith("Execution failed: UnknownTool")


class _Broken(Backend):
    label = "broken"

    def send(self, messages):
        raise BackendError("connection reset")


def test_backend_error_captured(sinusitis):
    ts, _ = _baseline(sinusitis, 1)
    t = run_session(_Broken(), sinusitis.qa[0], sinusitis.record, ts)
    assert t.terminal["kind"] == "BackendError"
    assert "connection reset" in t.terminal["error"]


def test_terminal_set_once(sinusitis):
    ts, _ = _baseline(sinusitis, 1)
    t = run_session(Oracle(), sinusitis.qa[0], sinusitis.record, ts)
    with pytest.raises(EngineError):
        t.set_terminal("IterationCap")


def test_case_study1_session(sinusitis, cs1_toolset):
    responses = [fixture_text(f"cs1_{n}.txt") for n in ("decomposition", "step1", "step2", "step3", "step4")]
    t = run_session(Scripted(responses), sinusitis.qa[6], sinusitis.record, cs1_toolset,
                    gap=CS1_GAP, condition=Condition.INSUFFICIENT_CONFIG2)
    assert t.plan["tool_chain"] == [AC.value, MC.value, AD.value, BQ.value]
    assert [s["tool"] for s in t.executed_chain] == ["TOOL1", "TOOL2", "TOOL8"]
    assert t.executed_chain[2]["category"] == ID.value
    assert t.terminal["kind"] == "NoCallStop"
    assert [s.outcome["kind"] for s in t.steps] == ["Executed", "Executed", "Executed", "DeniedByAgent"]


def test_token_counts(sinusitis):
    ts, _ = _baseline(sinusitis, 2)
    t = run_session(Oracle(), sinusitis.qa[1], sinusitis.record, ts)
    counts = t.token_counts["agent"]
    assert counts["input"] > 0 and counts["output"] > 0
    assert t.context_tokens == counts["context_max"]
    assert sum(turn.tokens for turn in t.turns) == counts["input"] + counts["output"]


def test_transcript_json_round_trip(sinusitis):
    ts, _ = _baseline(sinusitis, 10)
    t = run_session(Oracle(), sinusitis.qa[9], sinusitis.record, ts)
    again = Transcript.from_json(t.to_json())
    assert again.to_json() == t.to_json()


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(Condition)), st.integers(0, 10**6), st.integers(0, 5), st.integers(1, 11))
def test_oracle_replay_and_scores(corpus, cond, seed, rec, task):
    e = corpus[rec]
    ts, gap = build_toolset(cond, seed, e.record, task)
    t = run_session(Oracle(), e.qa[task - 1], e.record, ts, gap=gap, condition=cond, seed=seed)
    assert replay_matches(t, e.record)
    assert len(replay(t, e.record)) == len(t.steps)
    assert t.terminal["kind"] == ("NoCallStop" if cond.insufficient else "Concluded")
    for s in t.steps:
        if s.outcome["kind"] == "Executed":
            card = ts.get(s.outcome["tool"])
            assert card.lower <= s.outcome["score"] <= card.upper
    assert len(t.executed_chain) == sum(s.outcome["kind"] == "Executed" for s in t.steps)
