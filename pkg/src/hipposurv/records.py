"""Per-subject records shared by the training, augmentation and cohort code."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .volume import Volume

LABELS = ("NC", "AD", "MCI")
# class index used by the AD/NC classifier
CLASS_INDEX = {"NC": 0, "AD": 1}
AD_CLASS = CLASS_INDEX["AD"]

CLINICAL_COLUMNS = (
    "age", "sex", "education", "apoe4", "adas13", "ravlt_immediate",
    "ravlt_learning", "faq", "mmse", "csf_abeta42", "suvr",
)


@dataclass
class SubjectRecord:
    subject_id: str
    left: Volume
    right: Volume
    label: str
    time: Optional[float] = None
    event: Optional[int] = None
    clinical: dict = field(default_factory=dict)
    # ground truth, only known for synthetic cohorts
    severity: Optional[float] = None
