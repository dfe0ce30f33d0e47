import itertools
from collections import namedtuple
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnnforge.decision import (
    MetricsReport,
    compute_metrics,
    confusion,
    decide_all,
    decide_patient,
    format_percent,
    recist_assess,
    recist_eligible,
    recist_to_class,
)
from cnnforge.errors import ContractError, InputError

Vote = namedtuple("Vote", "patient_id hard_label")


def votes(n1, n2, pid="P1"):
    return [Vote(pid, "class1")] * n1 + [Vote(pid, "class2")] * n2


@pytest.mark.parametrize("n1, n2, expect", [(60, 37, "class1"), (48, 49, "class2"), (2, 2, "class2"), (1, 0, "class1")])
def test_majority(n1, n2, expect):
    d = decide_patient(votes(n1, n2))
    assert d.decided == expect
    assert (d.votes_class1, d.votes_class2, d.m_used) == (n1, n2, n1 + n2)


def test_majority_brute_force_small():
    for m in range(1, 8):
        for bits in itertools.product((0, 1), repeat=m):
            d = decide_patient([Vote("P", "class1" if b else "class2") for b in bits])
            assert d.decided == ("class1" if 2 * sum(bits) > m else "class2")


def test_empty_and_mixed_patients():
    with pytest.raises(ContractError):
        decide_patient([])
    with pytest.raises(ContractError):
        decide_patient(votes(1, 0, "P1") + votes(1, 0, "P2"))


def test_decide_all_groups_and_sorts():
    ds = decide_all(votes(1, 2, "P2") + votes(3, 0, "P1"))
    assert [(d.patient_id, d.decided) for d in ds] == [("P1", "class1"), ("P2", "class2")]


def test_patient_lookup_function():
    cls = [Vote("L1", "class1"), Vote("L2", "class2"), Vote("L2", "class2")]
    ds = decide_all(cls, patient_of=lambda c: "P" + c.patient_id[1])
    assert [d.decided for d in ds] == ["class1", "class2"]


# -- RECIST ------------------------------------------------------------------

@pytest.mark.parametrize("ld, ok", [(25.0, True), (20.0, True), (19.99, False), (19.9, False)])
def test_eligibility(ld, ok):
    assert recist_eligible(ld) is ok


@pytest.mark.parametrize("base, follow, cat", [
    (100, 65, "PR"), (100, 120, "PD"), (100, 90, "SD"), (100, 70, "PR"), (100, 130, "PD"),
    (100, 69.9, "PR"), (100, 70.1, "SD"), (100, 119.9, "SD"), (100, 120.1, "PD"),
])
def test_categories(base, follow, cat):
    assert recist_assess(base, follow).category == cat


def test_complete_response():
    assert recist_assess(50, 0, disappeared=True).category == "CR"
    with pytest.raises(ContractError, match="inconsistent"):
        recist_assess(50, 10, disappeared=True)


def test_recist_inputs_validated():
    with pytest.raises(ContractError):
        recist_assess(0, 10)
    with pytest.raises(ContractError):
        recist_assess(10, -1)


@pytest.mark.parametrize("cat, cls", [("CR", "class1"), ("PR", "class1"), ("SD", "class1"), ("PD", "class2")])
def test_category_to_class(cat, cls):
    assert recist_to_class(cat) == cls


def test_unknown_category():
    with pytest.raises(InputError):
        recist_to_class("NE")


@given(st.floats(1, 1000), st.floats(0, 3))
def test_category_regions(base, ratio):
    cat = recist_assess(base, base * ratio).category
    if ratio >= 1.2 + 1e-9:
        assert cat == "PD"
    elif ratio <= 0.7 - 1e-9:
        assert cat == "PR"
    elif 0.7 + 1e-9 < ratio < 1.2 - 1e-9:
        assert cat == "SD"


# -- metrics -----------------------------------------------------------------

def test_resnet_row():
    r = MetricsReport(tp=14, fn=1, fp=1, tn=14)
    assert [r.percent(k) for k in ("accuracy", "sensitivity", "specificity")] == ["93.33"] * 3


def test_vgg_row():
    r = MetricsReport(tp=15, fn=0, fp=2, tn=13)
    assert [r.percent(k) for k in ("accuracy", "sensitivity", "specificity")] == ["93.33", "100.00", "86.66"]
    assert r.specificity == Fraction(13, 15)


def test_all_correct():
    r = compute_metrics([(d, d.decided) for d in decide_all(votes(3, 0, "P1") + votes(0, 3, "P2"))])
    assert r.text().splitlines()[1:] == ["Accuracy:    100.00", "Sensitivity: 100.00", "Specificity: 100.00"]


def test_undefined_metric():
    r = confusion([("class1", "class1")])
    assert r.specificity is None
    assert r.percent("specificity") == "undefined"


def test_truncation_not_rounding():
    assert format_percent(Fraction(2, 3)) == "66.66"
    assert format_percent(Fraction(1, 1)) == "100.00"
    assert format_percent(Fraction(0)) == "0.00"


def test_metrics_csv():
    assert MetricsReport(15, 0, 2, 13).csv_lines() == [
        "tp,fn,fp,tn,accuracy,sensitivity,specificity",
        "15,0,2,13,93.33,100.00,86.66",
    ]


def test_no_decisions():
    with pytest.raises(ContractError):
        compute_metrics([])
