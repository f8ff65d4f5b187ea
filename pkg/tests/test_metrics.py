import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilevlm.errors import ContractError, DimensionError, ParameterError
from tilevlm.metrics import (
    SCORERS,
    ZeroDivisionWarning,
    field_accuracy,
    precision_at_k,
    precision_recall_f1,
    score_f1,
    score_field_accuracy,
    score_precision_at_10,
)


def test_field_accuracy_examples():
    assert field_accuracy([4], [4]) == 1.0
    assert field_accuracy([0, 0], [3, 5]) == 0.0
    assert field_accuracy([2, 3], [4, 4]) == 0.625


def test_field_accuracy_is_ratio_of_sums():
    got = field_accuracy([1, 9], [2, 10])
    assert got == 10 / 12
    assert got != (1 / 2 + 9 / 10) / 2


def test_field_accuracy_errors():
    with pytest.raises(ContractError):
        field_accuracy([0, 0], [0, 0])
    with pytest.raises(ContractError):
        field_accuracy([3], [2])
    with pytest.raises(DimensionError):
        field_accuracy([1], [1, 2])


def test_precision_at_k_examples():
    assert precision_at_k([1] * 10) == 1.0
    assert precision_at_k([1] * 7 + [0] * 3) == 0.7
    assert precision_at_k([1, 0, 1, 0, 1, 0]) == 0.3


def test_precision_at_k_bad_k():
    with pytest.raises(ParameterError):
        precision_at_k([1], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=0, max_size=30), st.randoms(use_true_random=False))
def test_precision_at_k_invariant_below_rank_k(rel, rnd):
    tail = rel[10:]
    rnd.shuffle(tail)
    assert precision_at_k(rel[:10] + tail) == precision_at_k(rel)


def test_prf_examples():
    assert precision_recall_f1([1, 1, 0], [1, 1, 0]) == (1.0, 1.0, 1.0)
    p, r, f = precision_recall_f1([1, 1, 1, 1, 0, 0, 0], [1, 1, 1, 0, 1, 1, 1])
    assert (p, r) == (0.75, 0.5)
    assert abs(f - 0.6) <= 1e-15


def test_prf_equal_p_and_r():
    p, r, f = precision_recall_f1([1, 1, 0, 0], [1, 0, 1, 0])
    assert p == r == 0.5 and f == 0.5


def test_prf_length_mismatch():
    with pytest.raises(ContractError):
        precision_recall_f1([1], [1, 0])


def test_prf_zero_denominators_warn_and_score_zero():
    with pytest.warns(ZeroDivisionWarning):
        assert precision_recall_f1([0, 0], [0, 0]) == (0.0, 0.0, 0.0)
    with pytest.warns(ZeroDivisionWarning):
        assert precision_recall_f1([0, 1], [1, 0]) == (0.0, 0.0, 0.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_f1_bounds_and_symmetry(pairs):
    pred = [a for a, _ in pairs]
    truth = [b for _, b in pairs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroDivisionWarning)
        p, r, f = precision_recall_f1(pred, truth)
        _, _, f_swapped = precision_recall_f1(truth, pred)
    assert f <= min(2 * p, 2 * r) + 1e-15
    assert f <= max(p, r) + 1e-15
    # swapping predictions and truth swaps P and R
    assert abs(f - f_swapped) <= 1e-15


# --------------------------------------------------------------------------
# CSV front-ends


def write(path, text):
    path.write_text(text)
    return path


def test_score_f1_csv(tmp_path):
    pred = write(tmp_path / "p.csv", "id,label\na,1\nb,1\nc,0\nd,1\n")
    truth = write(tmp_path / "t.csv", "id,label\nb,1\na,1\nc,1\nd,0\n")
    got = score_f1(pred, truth)
    assert got == {"precision": 2 / 3, "recall": 2 / 3, "f1": pytest.approx(2 / 3, abs=1e-15)}


def test_score_f1_id_mismatch(tmp_path):
    pred = write(tmp_path / "p.csv", "id,label\na,1\n")
    truth = write(tmp_path / "t.csv", "id,label\nb,1\n")
    with pytest.raises(ContractError):
        score_f1(pred, truth)


def test_score_precision_at_10_csv(tmp_path):
    lines = ["query,rank,item"]
    lines += [f"q1,{i},x{i}" for i in range(1, 13)]
    lines += [f"q2,{i},y{i}" for i in range(1, 7)]
    pred = write(tmp_path / "p.csv", "\n".join(lines) + "\n")
    truth_lines = ["query,item,relevant"]
    truth_lines += [f"q1,x{i},{1 if i <= 7 or i == 11 else 0}" for i in range(1, 13)]
    truth_lines += [f"q2,y{i},{i % 2}" for i in range(1, 7)]
    truth = write(tmp_path / "t.csv", "\n".join(truth_lines) + "\n")
    got = score_precision_at_10(pred, truth)
    assert got["queries"] == 2
    assert got["p@10"] == pytest.approx((0.7 + 0.3) / 2, abs=1e-15)


def test_score_field_accuracy_csv(tmp_path):
    pred = write(tmp_path / "p.csv", "sample,field,value\ns1,a,1\ns1,b,2\ns2,a,9\n")
    truth = write(tmp_path / "t.csv", "sample,field,value\ns1,a,1\ns1,b,3\ns2,a,9\ns2,b,4\n")
    got = score_field_accuracy(pred, truth)
    assert got == {"field_accuracy": 0.5, "samples": 2}


def test_scorer_registry():
    assert set(SCORERS) == {"f1", "p@10", "field-acc"}


def test_missing_columns(tmp_path):
    pred = write(tmp_path / "p.csv", "foo,bar\n1,2\n")
    truth = write(tmp_path / "t.csv", "id,label\n1,1\n")
    with pytest.raises(ContractError):
        score_f1(pred, truth)
