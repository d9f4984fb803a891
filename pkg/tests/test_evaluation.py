"""Classification, box-matching and recognition metrics."""
import itertools
import math

import numpy as np
import pytest

from ecn import evaluation as E
from ecn.errors import InputError


def box(x, y, w, h, script="Latin", text=None, image="img", conf=None):
    return E.BoxRecord(image, x, y, w, h, script, text, conf)


def test_confusion_perfect():
    truth = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
    rep = E.confusion_and_accuracy(truth, truth, 3)
    assert rep.accuracy == 1.0
    np.testing.assert_array_equal(rep.matrix, np.diag([4, 3, 3]))


def test_confusion_hand_case():
    rep = E.confusion_and_accuracy([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert rep.accuracy == 0.75
    np.testing.assert_array_equal(rep.matrix, [[1, 1], [0, 2]])


def test_empty_class_excluded_from_macro():
    rep = E.confusion_and_accuracy([0, 1, 0], [0, 1, 1], 3)
    assert math.isnan(rep.per_class[2])
    assert rep.macro_accuracy == pytest.approx(0.75)


def test_mcnemar_reference():
    a = [True] * 10 + [False] * 2 + [True] * 5
    b = [False] * 10 + [True] * 2 + [True] * 5
    r = E.mcnemar(a, b)
    assert (r.b, r.c) == (10, 2)
    assert r.statistic == pytest.approx(49 / 12, abs=1e-12)
    assert r.p_value == pytest.approx(0.0433, abs=5e-4) and r.p_value < 0.05
    s = E.mcnemar(b, a)
    assert (s.statistic, s.p_value) == (r.statistic, r.p_value)


def test_mcnemar_balanced():
    r = E.mcnemar([True, False, True], [False, True, True])
    assert r.statistic == 0.0 and r.p_value == 1.0


def test_chi2_tail_against_table():
    # 95th and 99th percentiles of chi-square with one degree of freedom
    assert E.chi2_sf_1dof(3.841459) == pytest.approx(0.05, abs=1e-6)
    assert E.chi2_sf_1dof(6.634897) == pytest.approx(0.01, abs=1e-6)


@pytest.mark.parametrize("a,b,expect", [
    ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
    ((0, 0, 10, 10), (5, 0, 10, 10), 1 / 3),
    ((0, 0, 10, 10), (20, 20, 5, 5), 0.0),
    ((0, 0, 10, 10), (10, 0, 10, 10), 0.0),
])
def test_iou(a, b, expect):
    assert E.iou(box(*a), box(*b)) == pytest.approx(expect, abs=1e-12)


def test_joint_perfect_and_wrong_script():
    gt = [box(0, 0, 10, 10, "Latin")]
    rep = E.joint_eval([box(0, 0, 10, 10, "Latin")], gt)
    assert (rep.correct, rep.precision, rep.recall, rep.fscore) == (1, 1.0, 1.0, 1.0)
    rep = E.joint_eval([box(0, 0, 10, 10, "Arabic")], gt)
    assert (rep.correct, rep.wrong, rep.missing) == (0, 1, 1)


def test_joint_reference_counts():
    rep = E.JointEvalReport(395, 376, 245)
    assert (round(rep.precision, 2), round(rep.recall, 2), round(rep.fscore, 2)) == (0.51, 0.62, 0.56)


def test_joint_counts_from_crafted_boxes():
    gts = [box(100 * i, 0, 10, 10, image=f"im{i % 7}") for i in range(395 + 245)]
    dets = [box(g.x, g.y, g.w, g.h, image=g.image_id) for g in gts[:395]]
    dets += [box(100 * i + 50, 50, 10, 10, image="far") for i in range(376)]
    rep = E.joint_eval(dets, gts)
    assert (rep.correct, rep.wrong, rep.missing) == (395, 376, 245)


def test_greedy_matching_is_one_to_one():
    gt = [box(0, 0, 10, 10), box(2, 0, 10, 10)]
    dets = [box(1, 0, 10, 10)]
    assert E.greedy_match(dets, gt) == [(0, 0)]
    # the higher-overlap pair wins first
    dets = [box(0, 0, 10, 10), box(1, 0, 10, 10)]
    assert E.greedy_match(dets, gt) == [(0, 0), (1, 1)]


def test_iou_threshold_is_strict():
    # IoU exactly 1/2 does not match
    a, b = box(0, 0, 10, 10), box(0, 0, 10, 20)
    assert E.iou(a, b) == 0.5
    assert E.greedy_match([a], [b]) == []


def test_duplicate_ground_truth_rejected():
    with pytest.raises(InputError, match="duplicate"):
        E.greedy_match([], [box(0, 0, 5, 5), box(0, 0, 5, 5)])


def dp_oracle(a, b):
    """Textbook full-table Wagner-Fischer."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def test_levenshtein_exhaustive_small_strings():
    words = ["".join(p) for n in range(4) for p in itertools.product("abc", repeat=n)]
    for a in words:
        for b in words:
            assert E.levenshtein(a, b) == dp_oracle(a, b)


def test_levenshtein_length_five_sample():
    words = ["".join(p) for p in itertools.product("abc", repeat=5)]
    rng = np.random.default_rng(0)
    for a in words:
        for b in rng.choice(words, 20):
            assert E.levenshtein(a, b) == dp_oracle(a, b)


def test_relaxed_match_cases():
    assert E.relaxed_match("RECOGNITION", "RECOGNITlON")
    assert E.relaxed_match("same", "same")
    assert not E.relaxed_match("CAT", "DOG")
    # exactly 1/8 is not below the threshold
    assert not E.relaxed_match("abcdefgh", "abcdefgx")


@pytest.mark.parametrize("text,keep", [("IIii", False), ("Hello", True), ("l!l!", False),
                                       ("ab!!", True), ("a!!!", False), ("", False)])
def test_junk_filter(text, keep):
    assert E.junk_filter(text) is keep


def test_junk_filter_confidence():
    assert not E.junk_filter("Hello", confidence=0.2, threshold=0.5)
    assert E.junk_filter("Hello", confidence=0.7, threshold=0.5)


def test_junk_table_contents():
    for ch in "ilI.,;:!?'\"()[]{}-«»¿¡":
        assert ch in E.JUNK_CHARACTERS, ch
    for ch in "aAoO0L1 ":
        assert ch not in E.JUNK_CHARACTERS, ch


def test_e2e_all_junk():
    gt = [box(0, 0, 10, 10, text="word")]
    rep = E.e2e_eval([box(0, 0, 10, 10, text="IIii")], gt)
    assert rep.correct == 0 and rep.missing == 1


def test_e2e_counts_relaxed_matches():
    gt = [box(0, 0, 10, 10, text="RECOGNITION"), box(50, 0, 10, 10, text="CAT")]
    dets = [box(0, 0, 10, 10, text="RECOGNITlON"), box(50, 0, 10, 10, text="DOG")]
    rep = E.e2e_eval(dets, gt)
    assert (rep.correct, rep.wrong, rep.missing) == (1, 1, 1)


def test_read_records_errors_carry_line_number(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("img\t0\t0\t5\t5\tLatin\n\nimg\t0\t0\tx\t5\tLatin\n")
    with pytest.raises(InputError, match=":3:"):
        E.read_records(p)
    p.write_text("img\t0\t0\t5\t5\tLatin\thi\t0.75\n")
    (rec,) = E.read_records(p)
    assert rec.transcription == "hi" and rec.confidence == 0.75
