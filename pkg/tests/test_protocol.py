import pytest
from hypothesis import given, settings, strategies as st

from radabench.protocol import (
    Call,
    EndCall,
    MalformedKnownInfo,
    NoCall,
    NoChainFound,
    ParseFailure,
    message_from_dict,
    message_to_dict,
    parse_decomposition,
    parse_planner_block,
    parse_protocol,
)
from radabench.toolset_sim import GapKind
from radabench.vocab import InfoKey, ToolCategory, UnknownCategory

from .conftest import fixture_text

AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)

CASE_STEPS = [
    ("cs1_step1.txt", Call, "TOOL1", ("$Image$",)),
    ("cs1_step2.txt", Call, "TOOL2", ("$Image$",)),
    ("cs1_step3.txt", Call, "TOOL8", ("$Image$",)),
    ("cs2_step1.txt", Call, "TOOL1", ("$Image$",)),
    ("cs2_step2.txt", Call, "TOOL2", ("$Image$",)),
    ("cs2_step4.txt", Call, "TOOL5", ("$Image$", "$Anatomy$", "$Modality$")),
]


@pytest.mark.parametrize("name, cls, tool, inputs", CASE_STEPS)
def test_case_study_calls(name, cls, tool, inputs):
    msg = parse_protocol(fixture_text(name))
    assert type(msg) is cls
    assert (msg.tool_name, msg.inputs) == (tool, inputs)


def test_case_study1_nocall():
    msg = parse_protocol(fixture_text("cs1_step4.txt"))
    assert isinstance(msg, NoCall)
    assert (msg.category, msg.anatomy, msg.modality, msg.ability) == (
        AD, "Head and Neck", "X-ray", GapKind.SPECIFIC_TOOL_MISSING,
    )
    assert msg.purpose == "Detect specific anomalies in Head and Neck X-ray for biomarker quantification"


def test_case_study2_nocall():
    msg = parse_protocol(fixture_text("cs2_step3.txt"))
    assert isinstance(msg, NoCall)
    assert (msg.category, msg.anatomy, msg.modality) == (OS, "Head and Neck", "X-ray")


def test_no_tags():
    assert parse_protocol("I think TOOL3 would be best.") == ParseFailure("no protocol block")


def test_multiple_blocks():
    one = "<Call><Purpose>p</Purpose><Tool>TOOL1</Tool><Input>['$Image$']</Input></Call>"
    assert parse_protocol(one + one) == ParseFailure("multiple protocol blocks")


def test_endcall():
    msg = parse_protocol("<EndCall><Purpose>p</Purpose><Tool>TOOL4</Tool><Input>['$Image$', '$Disease$']</Input></EndCall>")
    assert isinstance(msg, EndCall)
    assert msg.inputs == ("$Image$", "$Disease$")


def test_call_missing_tool():
    msg = parse_protocol("<Call><Purpose>p</Purpose><Input>[]</Input></Call>")
    assert isinstance(msg, ParseFailure)


def test_nocall_bad_ability():
    text = ("<NoCall><Purpose>p</Purpose><Category>Organ Segmentor</Category><Anatomy>Chest</Anatomy>"
            "<Modality>CT</Modality><Ability>Broken</Ability></NoCall>")
    assert isinstance(parse_protocol(text), ParseFailure)


def test_nocall_unknown_category_kept_as_text():
    text = ("<NoCall><Purpose>p</Purpose><Category>Teleporter</Category><Anatomy>Chest</Anatomy>"
            "<Modality>CT</Modality><Ability>CategoryMissing</Ability></NoCall>")
    msg = parse_protocol(text)
    assert msg.category is None and msg.category_text == "Teleporter"


def test_reflection_tags_ignored():
    text = "<Reflection><Candidates><Call></Candidates></Reflection>" + fixture_text("cs1_step1.txt")
    assert isinstance(parse_protocol(text), Call)


@pytest.mark.parametrize("name", ["cs1_step1.txt", "cs1_step4.txt", "cs2_step4.txt"])
def test_message_dict_round_trip(name):
    msg = parse_protocol(fixture_text(name))
    assert message_from_dict(message_to_dict(msg)) == msg


# ---------------------------------------------------------------- decomposition


def test_case_study1_decomposition():
    plan = parse_decomposition(fixture_text("cs1_decomposition.txt"))
    assert plan.known_info == frozenset()
    assert plan.tool_chain == (AC, MC, AD, BQ)


def test_case_study2_planner():
    plan = parse_planner_block(fixture_text("cs2_planner.txt"))
    assert plan.tool_chain == (AC, MC, OS, AD)


def test_single_element_chain():
    assert parse_decomposition("Tool Chain: [*Report Generation Tool*]").tool_chain == (RG,)


def test_no_starred_token():
    with pytest.raises(NoChainFound):
        parse_decomposition("Known Info: []\nTool Chain: []")


def test_unknown_category_token():
    with pytest.raises(UnknownCategory):
        parse_decomposition("Tool Chain: [*Flux Capacitor*]")


def test_known_info_parsed():
    plan = parse_decomposition("Known Info: ['$Anatomy$', '$Modality$', '$Report$']\nTool Chain: [*Disease Diagnoser*]")
    assert plan.known_info == {InfoKey.ANATOMY, InfoKey.MODALITY}
    assert plan.tool_chain == (ID,)


@pytest.mark.parametrize("text", ["Known Info: none\nTool Chain: [*AC*]", "Known Info: ['$Bogus$']\nTool Chain: [*AC*]",
                                  "Known Info: [anatomy]\nTool Chain: [*AC*]"])
def test_malformed_known_info(text):
    with pytest.raises(MalformedKnownInfo):
        parse_decomposition(text)


def test_planner_prose_only():
    with pytest.raises(NoChainFound):
        parse_planner_block("I would first classify the anatomy, then segment.")


# ---------------------------------------------------------------- fuzz

_tag_alphabet = st.sampled_from(["<", ">", "/", "Call", "End", "No", "Purpose", "Tool", "Input", "$", " ", "\n", "x"])


@settings(max_examples=300)
@given(st.lists(_tag_alphabet, max_size=40).map("".join))
def test_fuzz_never_raises(text):
    msg = parse_protocol(text)
    assert isinstance(msg, (Call, EndCall, NoCall, ParseFailure))


@settings(max_examples=300)
@given(st.text(alphabet=st.characters(blacklist_characters="<"), max_size=300))
def test_fuzz_without_tags_is_failure(text):
    assert isinstance(parse_protocol(text), ParseFailure)
