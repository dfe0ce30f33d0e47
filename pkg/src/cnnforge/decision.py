"""Per-patient majority vote, RECIST 1.1 response rules and test metrics."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction

from cnnforge.errors import ContractError, InputError

RECIST_MIN_LD_MM = 20.0
PR_RATIO = 0.70
PD_RATIO = 1.20
CATEGORIES = ("CR", "PR", "SD", "PD")
TIE_CLASS = "class2"
THRESHOLD_SLACK = 1e-12


@dataclass(frozen=True)
class PatientDecision:
    patient_id: str
    votes_class1: int
    votes_class2: int
    decided: str

    @property
    def m_used(self):
        return self.votes_class1 + self.votes_class2


def decide_patient(classifications, patient_of=None):
    """Majority over hard labels; a tie (even vote count only) goes to class2.

    ``classifications`` are objects with ``hard_label`` and either a
    ``patient_id`` attribute or a lookup ``patient_of(c) -> patient_id``.
    """
    if not classifications:
        raise ContractError("no classifications to decide on")
    pid = patient_of or (lambda c: c.patient_id)
    patients = {pid(c) for c in classifications}
    if len(patients) != 1:
        raise ContractError(f"classifications span several patients: {sorted(patients)}")
    votes = Counter(c.hard_label for c in classifications)
    v1, v2 = votes["class1"], votes["class2"]
    decided = "class1" if v1 > v2 else ("class2" if v2 > v1 else TIE_CLASS)
    return PatientDecision(patients.pop(), v1, v2, decided)


def decide_all(classifications, patient_of=None):
    """Group by patient and decide each; result sorted by patient id."""
    pid = patient_of or (lambda c: c.patient_id)
    groups = defaultdict(list)
    for c in classifications:
        groups[pid(c)].append(c)
    return [decide_patient(groups[p], pid) for p in sorted(groups)]


def recist_eligible(ld_mm):
    """Measurable target lesion: longest diameter >= 20 mm. Accepts a LesionRecord or a length."""
    ld = getattr(ld_mm, "ld_mm", ld_mm)
    if not ld > 0:
        raise ContractError(f"longest diameter must be positive, got {ld}")
    return ld >= RECIST_MIN_LD_MM


@dataclass(frozen=True)
class RecistAssessment:
    baseline_ld_sum_mm: float
    followup_ld_sum_mm: float
    all_target_lesions_disappeared: bool
    category: str


def recist_assess(baseline_mm, followup_mm, disappeared=False):
    """CR, then PD (>= +20%), then PR (<= -30%), otherwise SD."""
    if not (math.isfinite(baseline_mm) and baseline_mm > 0):
        raise ContractError(f"baseline LD sum must be positive, got {baseline_mm}")
    if not (math.isfinite(followup_mm) and followup_mm >= 0):
        raise ContractError(f"follow-up LD sum must be nonnegative, got {followup_mm}")
    if disappeared and followup_mm > 0:
        raise ContractError("inconsistent assessment: lesions disappeared but follow-up LD sum > 0")
    # thresholds are inclusive; the relative slack absorbs decimal round-off in inputs
    if disappeared:
        cat = "CR"
    elif followup_mm >= PD_RATIO * baseline_mm * (1 - THRESHOLD_SLACK):
        cat = "PD"
    elif followup_mm <= PR_RATIO * baseline_mm * (1 + THRESHOLD_SLACK):
        cat = "PR"
    else:
        cat = "SD"
    return RecistAssessment(float(baseline_mm), float(followup_mm), bool(disappeared), cat)


def recist_to_class(assessment):
    cat = getattr(assessment, "category", assessment)
    if cat not in CATEGORIES:
        raise InputError(f"unknown RECIST category {cat!r}")
    return "class2" if cat == "PD" else "class1"


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fn: int
    fp: int
    tn: int

    @staticmethod
    def _ratio(num, den):
        return None if den == 0 else Fraction(num, den)

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn)

    @property
    def sensitivity(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return self._ratio(self.tn, self.tn + self.fp)

    def as_dict(self):
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity}

    def percent(self, name):
        """Percentage truncated to two decimals (93.333.. -> "93.33", 86.666.. -> "86.66")."""
        value = getattr(self, name)
        return "undefined" if value is None else format_percent(value)

    def text(self):
        return "\n".join([
            f"TP={self.tp} FN={self.fn} FP={self.fp} TN={self.tn}",
            f"Accuracy:    {self.percent('accuracy')}",
            f"Sensitivity: {self.percent('sensitivity')}",
            f"Specificity: {self.percent('specificity')}",
        ])

    def csv_lines(self):
        return [
            "tp,fn,fp,tn,accuracy,sensitivity,specificity",
            ",".join([str(self.tp), str(self.fn), str(self.fp), str(self.tn),
                      self.percent("accuracy"), self.percent("sensitivity"),
                      self.percent("specificity")]),
        ]


def format_percent(fraction):
    hundredths = math.floor(Fraction(fraction) * 10000)
    return f"{hundredths // 100}.{hundredths % 100:02d}"


def confusion(pairs):
    """Counts from ``(predicted, actual)`` label pairs; class1 is positive."""
    tp = fn = fp = tn = 0
    for pred, actual in pairs:
        if actual == "class1":
            tp += pred == "class1"
            fn += pred != "class1"
        else:
            fp += pred == "class1"
            tn += pred != "class1"
    return MetricsReport(tp, fn, fp, tn)


def compute_metrics(decisions):
    """``decisions`` is ``[(PatientDecision, true_label), ...]``."""
    if not decisions:
        raise ContractError("no decisions to score")
    return confusion((d.decided, truth) for d, truth in decisions)
