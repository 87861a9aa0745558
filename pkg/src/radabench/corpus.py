"""Patient records, QA pairs and the eleven-task taxonomy.

Records use the released corpus key layout ("Information", "Anatomy", ...). The
generation-prompt XML layout (``<Case>...</Case>``) is accepted as well so that
raw generator responses can be ingested directly.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .vocab import (
    ALLOWED_COMBOS,
    ANATOMIES,
    DIMS,
    MODALITIES,
    InfoKey,
    ToolCategory,
    is_allowed_combo,
)

AC, MC, OS, AD, ID, GD, BQ, IE, RG, TP = tuple(ToolCategory)


class CorpusError(ValueError):
    pass


class MissingField(CorpusError):
    def __init__(self, name: str):
        super().__init__(f"missing or empty field: {name}")
        self.name = name


class IllegalCombination(CorpusError):
    def __init__(self, anatomy: str, modality: str):
        super().__init__(f"illegal anatomy/modality combination: {anatomy} / {modality}")
        self.anatomy = anatomy
        self.modality = modality


class MalformedNumeric(CorpusError):
    def __init__(self, name: str, value: str = ""):
        super().__init__(f"malformed numeric field {name}: {value!r}")
        self.name = name


class MissingTag(CorpusError):
    def __init__(self, k: int):
        super().__init__(f"missing QA tag pair {k}")
        self.k = k


class UnbalancedTag(CorpusError):
    def __init__(self, k: int):
        super().__init__(f"unbalanced QA tag {k}")
        self.k = k


class DuplicateTag(CorpusError):
    def __init__(self, k: int):
        super().__init__(f"duplicate QA tag {k}")
        self.k = k


class UnknownKind(CorpusError):
    def __init__(self, kind: str):
        super().__init__(f"unknown generation prompt kind: {kind!r}")
        self.kind = kind


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class Information:
    age: int
    sex: str
    height: int
    weight: int
    history: str
    complaint: str


@dataclass(frozen=True)
class Anomaly:
    part: str
    symptom: str


@dataclass(frozen=True)
class Biomarker:
    object: str
    dim: str
    quant: str


@dataclass(frozen=True)
class Indicator:
    name: str
    value: str


@dataclass(frozen=True)
class Report:
    finding: str
    impression: str


@dataclass(frozen=True)
class PatientRecord:
    info: Information
    anatomy: str
    modality: str
    anomaly: Anomaly
    disease: str
    organ_biomarker: Biomarker
    anomaly_biomarker: Biomarker
    indicator: Indicator
    report: Report
    treatment: str

    @property
    def record_id(self) -> str:
        return slugify(f"{self.anatomy} {self.modality} {self.disease}")

    def info_json(self) -> str:
        return json.dumps(_info_dict(self.info), ensure_ascii=False)

    def ground_truth(self) -> dict[InfoKey, str]:
        """Value each information key takes when a tool produces it."""
        k = InfoKey
        return {
            k.INFORMATION: self.info_json(),
            k.ANATOMY: self.anatomy,
            k.MODALITY: self.modality,
            k.DISEASE: self.disease,
            k.ORGAN_OBJECT: self.organ_biomarker.object,
            k.ORGAN_DIM: self.organ_biomarker.dim,
            k.ORGAN_QUANT: self.organ_biomarker.quant,
            k.ANOMALY_OBJECT: self.anomaly_biomarker.object,
            k.ANOMALY_DIM: self.anomaly_biomarker.dim,
            k.ANOMALY_QUANT: self.anomaly_biomarker.quant,
            k.INDICATOR_NAME: self.indicator.name,
            k.INDICATOR_VALUE: self.indicator.value,
            k.REPORT: f"Findings: {self.report.finding}\nImpression: {self.report.impression}",
            k.TREATMENT: self.treatment,
            k.IMAGE: "PLACEHOLDER_IMAGE",
            k.ORGAN_MASK: "PLACEHOLDER_$OrganMask$",
            k.ANOMALY_MASK: "PLACEHOLDER_$AnomalyMask$",
        }


def slugify(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")


def _info_dict(info: Information) -> dict[str, str]:
    return {
        "Age": str(info.age),
        "Sex": info.sex,
        "Height": str(info.height),
        "Weight": str(info.weight),
        "History": info.history,
        "Complaint": info.complaint,
    }


def _record_dict(r: PatientRecord) -> dict:
    return {
        "Information": _info_dict(r.info),
        "Anatomy": r.anatomy,
        "Modality": r.modality,
        "Anomaly": {"Part": r.anomaly.part, "Symptom": r.anomaly.symptom},
        "Disease": r.disease,
        "OrganBiomarker": {
            "OrganObject": r.organ_biomarker.object,
            "OrganDim": r.organ_biomarker.dim,
            "OrganQuant": r.organ_biomarker.quant,
        },
        "AnomalyBiomarker": {
            "AnomalyObject": r.anomaly_biomarker.object,
            "AnomalyDim": r.anomaly_biomarker.dim,
            "AnomalyQuant": r.anomaly_biomarker.quant,
        },
        "Indicator": {"Name": r.indicator.name, "Value": r.indicator.value},
        "Report": {"Finding": r.report.finding, "Impression": r.report.impression},
        "Treatment": r.treatment,
    }


def serialize_patient_record(record: PatientRecord) -> str:
    return json.dumps(_record_dict(record), indent=4, ensure_ascii=False) + "\n"


_XML_NODE = re.compile(r"<(\w+)>(.*?)</\1>", re.S)


def _xml_to_dict(text: str) -> dict:
    out: dict = {}
    for m in _XML_NODE.finditer(text):
        tag, body = m.group(1), m.group(2)
        inner = _xml_to_dict(body) if _XML_NODE.search(body) else body
        out[tag] = inner
    return out


def _load_raw(text: str) -> Mapping:
    stripped = text.strip()
    if "<Case>" in stripped:
        case = _xml_to_dict(stripped).get("Case")
        if not isinstance(case, dict):
            raise MissingField("Case")
        return case
    if not stripped.startswith("{"):
        # Released files sometimes omit the outer braces.
        stripped = "{" + stripped + "}"
    try:
        data = json.loads(stripped)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"record is not valid structured text: {exc}") from None
    if not isinstance(data, dict):
        raise CorpusError("record must be an object")
    return data


def _text(node: Mapping, name: str, path: str | None = None) -> str:
    value = node.get(name) if isinstance(node, Mapping) else None
    if value is None or isinstance(value, (dict, list)):
        raise MissingField(path or name)
    s = re.sub(r"\s+", " ", str(value)).strip()
    if not s:
        raise MissingField(path or name)
    return s


def _group(node: Mapping, name: str) -> Mapping:
    value = node.get(name)
    if not isinstance(value, Mapping) or not value:
        raise MissingField(name)
    return value


def _round_half_up(name: str, raw: str) -> int:
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*(?:cm|kg)?\s*", raw)
    if not m:
        raise MalformedNumeric(name, raw)
    whole, _, frac = m.group(1).partition(".")
    n = int(whole)
    if frac and frac[0] >= "5":
        n += 1
    return n


def _dim(name: str, raw: str) -> str:
    d = raw.strip().lower()
    if d not in DIMS:
        raise MalformedNumeric(name, raw)
    return d


def parse_patient_record(text: str) -> PatientRecord:
    raw = _load_raw(text)
    info_node = _group(raw, "Information")
    age_text = _text(info_node, "Age", "Information.Age")
    if not re.fullmatch(r"\d+", age_text) or int(age_text) <= 0:
        raise MalformedNumeric("Information.Age", age_text)
    sex = _text(info_node, "Sex", "Information.Sex").capitalize()
    if sex not in ("Male", "Female"):
        raise CorpusError(f"sex must be Male or Female, got {sex!r}")
    info = Information(
        age=int(age_text),
        sex=sex,
        height=_round_half_up("Information.Height", _text(info_node, "Height", "Information.Height")),
        weight=_round_half_up("Information.Weight", _text(info_node, "Weight", "Information.Weight")),
        history=_text(info_node, "History", "Information.History"),
        complaint=_text(info_node, "Complaint", "Information.Complaint"),
    )
    anatomy = _text(raw, "Anatomy")
    modality = _text(raw, "Modality")
    if anatomy not in ANATOMIES or modality not in MODALITIES or not is_allowed_combo(anatomy, modality):
        raise IllegalCombination(anatomy, modality)
    an = _group(raw, "Anomaly")
    ob = _group(raw, "OrganBiomarker")
    ab = _group(raw, "AnomalyBiomarker")
    ind = _group(raw, "Indicator")
    rep = _group(raw, "Report")
    return PatientRecord(
        info=info,
        anatomy=anatomy,
        modality=modality,
        anomaly=Anomaly(_text(an, "Part", "Anomaly.Part"), _text(an, "Symptom", "Anomaly.Symptom")),
        disease=_text(raw, "Disease"),
        organ_biomarker=Biomarker(
            _text(ob, "OrganObject", "OrganBiomarker.OrganObject"),
            _dim("OrganBiomarker.OrganDim", _text(ob, "OrganDim", "OrganBiomarker.OrganDim")),
            _text(ob, "OrganQuant", "OrganBiomarker.OrganQuant"),
        ),
        anomaly_biomarker=Biomarker(
            _text(ab, "AnomalyObject", "AnomalyBiomarker.AnomalyObject"),
            _dim("AnomalyBiomarker.AnomalyDim", _text(ab, "AnomalyDim", "AnomalyBiomarker.AnomalyDim")),
            _text(ab, "AnomalyQuant", "AnomalyBiomarker.AnomalyQuant"),
        ),
        indicator=Indicator(_text(ind, "Name", "Indicator.Name"), _text(ind, "Value", "Indicator.Value")),
        report=Report(_text(rep, "Finding", "Report.Finding"), _text(rep, "Impression", "Report.Impression")),
        treatment=_text(raw, "Treatment"),
    )


def load_disease_list(path: str | Path | None = None) -> list[tuple[str, str, str]]:
    """Rows of (anatomy, modality, disease); illegal combinations are rejected."""
    if path is None:
        text = resources.files("radabench").joinpath("data/diseases.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        a, m, d = row["Anatomy"].strip(), row["Modality"].strip(), row["Disease"].strip()
        if not is_allowed_combo(a, m):
            raise IllegalCombination(a, m)
        rows.append((a, m, d))
    return rows


# ---------------------------------------------------------------- tasks


class TaskType(IntEnum):
    ORGAN_SEGMENTATION = 1
    ANOMALY_DETECTION = 2
    END_TO_END_DIAGNOSIS = 3
    JOINT_GROUNDING = 4
    GROUNDED_DIAGNOSIS = 5
    ORGAN_BIOMARKER = 6
    ANOMALY_BIOMARKER = 7
    REPORT = 8
    BIOMARKER_REPORT = 9
    INDICATOR_REPORT = 10
    TREATMENT_PLANNING = 11


class Complexity(str, Enum):
    SIMPLE = "Simple"
    MODERATE = "Moderate"
    COMPLEX = "Complex"


def complexity_for_length(n: int) -> Complexity:
    if n < 4:
        return Complexity.SIMPLE
    if n >= 6:
        return Complexity.COMPLEX
    return Complexity.MODERATE


@dataclass(frozen=True)
class Slot:
    """One tool position in a ground-truth chain.

    ``variant`` pins Biomarker Quantifier / Indicator Evaluator steps to the
    organ or anomaly flavour; None accepts either.
    """

    category: ToolCategory
    variant: str | None = None


@dataclass(frozen=True)
class TaskSpec:
    task: TaskType
    steps: tuple[tuple[Slot, ...], ...]
    terminal_category: ToolCategory
    milestone_key: InfoKey
    linearizations: tuple[tuple[Slot, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        per_step = [sorted(set(itertools.permutations(g)), key=_slots_key) for g in self.steps]
        lins = tuple(tuple(s for part in combo for s in part) for combo in itertools.product(*per_step))
        object.__setattr__(self, "linearizations", lins)

    @property
    def gt_chain(self) -> tuple[tuple[ToolCategory, ...], ...]:
        return tuple(tuple(s.category for s in g) for g in self.steps)

    @property
    def length(self) -> int:
        return sum(len(g) for g in self.steps)

    @property
    def complexity(self) -> Complexity:
        return complexity_for_length(self.length)

    def category_linearizations(self) -> tuple[tuple[ToolCategory, ...], ...]:
        seen: dict[tuple[ToolCategory, ...], None] = {}
        for lin in self.linearizations:
            seen.setdefault(tuple(s.category for s in lin), None)
        return tuple(seen)

    @property
    def final_categories(self) -> frozenset[ToolCategory]:
        return frozenset(s.category for s in self.steps[-1])

    @property
    def categories(self) -> frozenset[ToolCategory]:
        return frozenset(s.category for g in self.steps for s in g)


def _slots_key(slots: tuple[Slot, ...]) -> tuple:
    return tuple((s.category.value, s.variant or "") for s in slots)


def _spec(task: TaskType, steps: list, terminal: ToolCategory, milestone: InfoKey) -> TaskSpec:
    groups = []
    for g in steps:
        items = g if isinstance(g, tuple) else (g,)
        groups.append(tuple(s if isinstance(s, Slot) else Slot(s) for s in items))
    return TaskSpec(task, tuple(groups), terminal, milestone)


_BQ_O, _BQ_A = Slot(BQ, "organ"), Slot(BQ, "anomaly")
_K = InfoKey

# Chains follow the prose listing of the task types; milestone keys are fixed by convention.
_TASK_SPECS: dict[TaskType, TaskSpec] = {
    s.task: s
    for s in (
        _spec(TaskType(1), [AC, MC, OS], OS, _K.ORGAN_MASK),
        _spec(TaskType(2), [AC, MC, AD], AD, _K.ANOMALY_MASK),
        _spec(TaskType(3), [AC, MC, ID], ID, _K.DISEASE),
        _spec(TaskType(4), [AC, MC, (OS, AD)], AD, _K.ORGAN_MASK),
        _spec(TaskType(5), [AC, MC, (OS, AD), GD], GD, _K.DISEASE),
        _spec(TaskType(6), [AC, MC, OS, _BQ_O], BQ, _K.ORGAN_QUANT),
        _spec(TaskType(7), [AC, MC, AD, _BQ_A], BQ, _K.ANOMALY_MASK),
        _spec(TaskType(8), [AC, MC, AD, ID, RG], RG, _K.DISEASE),
        _spec(TaskType(9), [AC, MC, (OS, AD), (_BQ_O, _BQ_A), RG], RG, _K.ANOMALY_QUANT),
        _spec(TaskType(10), [AC, MC, (OS, AD), ID, (_BQ_O, _BQ_A), IE, RG], RG, _K.DISEASE),
        _spec(TaskType(11), [AC, MC, (OS, AD), ID, (_BQ_O, _BQ_A), IE, RG, TP], TP, _K.REPORT),
    )
}


def ground_truth_spec(task: TaskType | int) -> TaskSpec:
    return _TASK_SPECS[TaskType(task)]


def all_task_specs() -> list[TaskSpec]:
    return [_TASK_SPECS[t] for t in TaskType]


# ---------------------------------------------------------------- QA pairs


@dataclass(frozen=True)
class QAPair:
    task: TaskType
    question: str
    answer: str
    record_id: str

    @property
    def qa_id(self) -> str:
        return f"{self.record_id}#{int(self.task)}"


def parse_qa_text(text: str, record_id: str = "") -> list[QAPair]:
    bodies: dict[tuple[str, int], str] = {}
    for letter in ("Q", "A"):
        for k in range(1, 12):
            opens = len(re.findall(rf"<{letter}{k}>", text))
            closes = len(re.findall(rf"</{letter}{k}>", text))
            if opens > 1 or closes > 1:
                raise DuplicateTag(k)
            if opens != closes:
                raise UnbalancedTag(k)
    for k in range(1, 12):
        for letter in ("Q", "A"):
            m = re.search(rf"<{letter}{k}>(.*?)</{letter}{k}>", text, re.S)
            if m is None:
                if re.search(rf"</?{letter}{k}>", text):
                    raise UnbalancedTag(k)
                raise MissingTag(k)
            bodies[(letter, k)] = re.sub(r"\s+", " ", m.group(1)).strip()
    return [QAPair(TaskType(k), bodies[("Q", k)], bodies[("A", k)], record_id) for k in range(1, 12)]


def serialize_qa(pairs: Iterable[QAPair]) -> str:
    lines = []
    for p in pairs:
        k = int(p.task)
        lines.append(f"<Q{k}> {p.question} </Q{k}>")
        lines.append(f"<A{k}> {p.answer} </A{k}>")
    return "\n".join(lines) + "\n"


_LEAK_TERMS = tuple(a.lower() for a in ANATOMIES) + tuple(m.lower() for m in MODALITIES) + (
    "x ray",
    "xray",
    "mri",
    "ct scan",
    "mammogram",
)


def leakage_flag(question: str) -> bool:
    """Best-effort check for an anatomy or modality named in the question."""
    q = " " + re.sub(r"[^a-z0-9-]+", " ", question.lower()) + " "
    return any(f" {term} " in q for term in _LEAK_TERMS)


@dataclass(frozen=True)
class QAValidation:
    record_id: str
    leaking_tasks: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return not self.leaking_tasks


def validate_qa(pairs: list[QAPair]) -> QAValidation:
    if [int(p.task) for p in pairs] != list(range(1, 12)):
        raise CorpusError("expected exactly 11 QA pairs in task order")
    rid = pairs[0].record_id if pairs else ""
    return QAValidation(rid, tuple(int(p.task) for p in pairs if leakage_flag(p.question)))


# ---------------------------------------------------------------- generation prompts


def _template(name: str) -> str:
    text = resources.files("radabench").joinpath(f"templates/generation/{name}").read_text(encoding="utf-8")
    return text.removesuffix("\n")


def render_generation_prompt(kind: str, context: Mapping | PatientRecord) -> str:
    if kind == "record":
        if not isinstance(context, Mapping):
            raise CorpusError("record prompt needs anatomy, modality and disease")
        for key in ("anatomy", "modality", "disease"):
            if not str(context.get(key, "")).strip():
                raise MissingField(key)
        return (
            _template("record.txt")
            .replace("{ANATOMY}", str(context["anatomy"]))
            .replace("{MODALITY}", str(context["modality"]))
            .replace("{DISEASE}", str(context["disease"]))
        )
    if kind == "qa":
        record = context if isinstance(context, PatientRecord) else None
        if record is None:
            raise CorpusError("qa prompt needs a PatientRecord")
        body = serialize_patient_record(record).strip()
        return _template("qa.txt").replace("{Patient Record}", body)
    raise UnknownKind(kind)


# ---------------------------------------------------------------- bundled corpus


@dataclass(frozen=True)
class CorpusEntry:
    record: PatientRecord
    qa: tuple[QAPair, ...]


def load_corpus_dir(root: str | Path) -> list[CorpusEntry]:
    """Load ``records/*.json`` with matching ``qa/*.txt`` from a directory."""
    root = Path(root)
    entries = []
    for rec_path in sorted((root / "records").glob("*.json")):
        record = parse_patient_record(rec_path.read_text(encoding="utf-8"))
        qa_path = root / "qa" / (rec_path.stem + ".txt")
        if not qa_path.exists():
            raise CorpusError(f"no QA file for {rec_path.name}")
        qa = parse_qa_text(qa_path.read_text(encoding="utf-8"), record.record_id)
        entries.append(CorpusEntry(record, tuple(qa)))
    ids = [e.record.record_id for e in entries]
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate record ids in corpus")
    return entries


def bundled_data_dir() -> Path:
    return Path(str(resources.files("radabench").joinpath("data")))


def load_bundled_corpus() -> list[CorpusEntry]:
    return load_corpus_dir(bundled_data_dir())


__all__ = [
    "ALLOWED_COMBOS",
    "ANATOMIES",
    "MODALITIES",
    "DIMS",
    "PatientRecord",
    "QAPair",
    "TaskType",
    "TaskSpec",
    "Slot",
    "Complexity",
    "parse_patient_record",
    "serialize_patient_record",
    "parse_qa_text",
    "ground_truth_spec",
    "render_generation_prompt",
    "load_bundled_corpus",
]
