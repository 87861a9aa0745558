"""Shared vocabulary: anatomies, modalities, tool categories and information keys."""

from __future__ import annotations

import re
from enum import Enum

UNIVERSAL = "Universal"

ANATOMIES: tuple[str, ...] = (
    "Head and Neck",
    "Chest",
    "Breast",
    "Abdomen and Pelvis",
    "Limb",
    "Spine",
)
MODALITIES: tuple[str, ...] = ("X-ray", "CT", "MRI", "Ultrasound", "Mammography")

_GENERAL = ("X-ray", "CT", "MRI", "Ultrasound")
_MODALITIES_BY_ANATOMY: dict[str, tuple[str, ...]] = {
    "Head and Neck": _GENERAL,
    "Chest": _GENERAL,
    "Breast": ("Mammography", "MRI", "Ultrasound"),
    "Abdomen and Pelvis": _GENERAL,
    "Limb": _GENERAL,
    "Spine": ("X-ray", "CT", "MRI"),
}

# Ordered by anatomy then modality so enumeration order is stable.
ALLOWED_COMBOS: tuple[tuple[str, str], ...] = tuple(
    (a, m) for a in ANATOMIES for m in MODALITIES if m in _MODALITIES_BY_ANATOMY[a]
)
assert len(ALLOWED_COMBOS) == 22

DIMS: tuple[str, ...] = (
    "number",
    "length",
    "size",
    "volume",
    "angle",
    "density",
    "intensity",
    "texture",
)


def is_allowed_combo(anatomy: str, modality: str) -> bool:
    return (anatomy, modality) in ALLOWED_COMBOS


class InfoKey(str, Enum):
    IMAGE = "$Image$"
    INFORMATION = "$Information$"
    ANATOMY = "$Anatomy$"
    MODALITY = "$Modality$"
    DISEASE = "$Disease$"
    ORGAN_OBJECT = "$OrganObject$"
    ORGAN_DIM = "$OrganDim$"
    ORGAN_QUANT = "$OrganQuant$"
    ANOMALY_OBJECT = "$AnomalyObject$"
    ANOMALY_DIM = "$AnomalyDim$"
    ANOMALY_QUANT = "$AnomalyQuant$"
    INDICATOR_NAME = "$IndicatorName$"
    INDICATOR_VALUE = "$IndicatorValue$"
    REPORT = "$Report$"
    TREATMENT = "$Treatment$"
    ORGAN_MASK = "$OrganMask$"
    ANOMALY_MASK = "$AnomalyMask$"

    @classmethod
    def parse(cls, token: str) -> "InfoKey":
        t = token.strip().strip("'\"`").strip()
        if not t.startswith("$"):
            t = f"${t.strip('$')}$"
        return cls(t)


class ToolCategory(str, Enum):
    AC = "Anatomy Classifier"
    MC = "Modality Classifier"
    OS = "Organ Segmentor"
    AD = "Anomaly Detector"
    ID = "Imaging Diagnoser"
    GD = "Grounded Diagnoser"
    BQ = "Biomarker Quantifier"
    IE = "Indicator Evaluator"
    RG = "Report Generator"
    TP = "Treatment Planner"

    @property
    def abbrev(self) -> str:
        return self.name

    @property
    def card_label(self) -> str:
        """Label used on tool cards and in NoCall blocks."""
        return _CARD_LABELS[self]

    @property
    def plan_label(self) -> str:
        """Starred name used in decomposition tool chains."""
        return _PLAN_LABELS[self]

    @classmethod
    def resolve(cls, text: str) -> "ToolCategory":
        key = normalize_label(text)
        try:
            return _ALIASES[key]
        except KeyError:
            raise UnknownCategory(text) from None


class UnknownCategory(ValueError):
    def __init__(self, token: str):
        super().__init__(f"unknown tool category: {token!r}")
        self.token = token


CATEGORY_ORDER: tuple[ToolCategory, ...] = tuple(ToolCategory)

_CARD_LABELS = {
    ToolCategory.AC: "Anatomy Classifier",
    ToolCategory.MC: "Modality Classifier",
    ToolCategory.OS: "Organ Segmentor",
    ToolCategory.AD: "Anomaly Detector",
    ToolCategory.ID: "Disease Diagnoser",
    ToolCategory.GD: "Disease Inferencer",
    ToolCategory.BQ: "Biomarker Quantifier",
    ToolCategory.IE: "Indicator Evaluator",
    ToolCategory.RG: "Report Generator",
    ToolCategory.TP: "Treatment Recommender",
}

_PLAN_LABELS = {
    ToolCategory.AC: "Anatomy Classification Tool",
    ToolCategory.MC: "Modality Classification Tool",
    ToolCategory.OS: "Organ Segmentation Tool",
    ToolCategory.AD: "Anomaly Detection Tool",
    ToolCategory.ID: "Disease Diagnosis Tool",
    ToolCategory.GD: "Disease Inference Tool",
    ToolCategory.BQ: "Biomarker Quantification Tool",
    ToolCategory.IE: "Indicator Evaluation Tool",
    ToolCategory.RG: "Report Generation Tool",
    ToolCategory.TP: "Treatment Recommendation Tool",
}


def normalize_label(text: str) -> str:
    t = re.sub(r"[*`'\"|]", " ", text)
    return re.sub(r"\s+", " ", t).strip().lower()


def _build_aliases() -> dict[str, ToolCategory]:
    extra: dict[ToolCategory, tuple[str, ...]] = {
        ToolCategory.AC: ("Anatomy Classification Model",),
        ToolCategory.MC: ("Modality Classification Model",),
        ToolCategory.OS: ("Organ Segmentation Model", "Organ Segmenter"),
        ToolCategory.AD: ("Anomaly Detection Model",),
        ToolCategory.ID: ("Disease Diagnosis Model",),
        ToolCategory.GD: (
            "Disease Inference Model",
            "Synthetic Diagnoser",
            "Synthetic Dignoser",
            "SD",
        ),
        ToolCategory.BQ: (
            "Biomarker Quantification Model",
            "Organ Biomarker Quantification Tool",
            "Anomaly Biomarker Quantification Tool",
            "Organ Biomarker Quantifier",
            "Anomaly Biomarker Quantifier",
        ),
        ToolCategory.IE: (
            "Indicator Evaluation Model",
            "Indicator Calculator",
            "Indicator Calculation Tool",
            "IC",
        ),
        ToolCategory.RG: ("Report Generation Model",),
        ToolCategory.TP: (
            "Treatment Recommendation Model",
            "Treatment Recommendation",
            "TR",
        ),
    }
    table: dict[str, ToolCategory] = {}
    for cat in ToolCategory:
        names = (cat.value, cat.abbrev, cat.card_label, cat.plan_label) + extra[cat]
        for name in names:
            table[normalize_label(name)] = cat
    return table


_ALIASES = _build_aliases()
