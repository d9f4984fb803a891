"""Scoring protocols: classification, joint detection + script id, end-to-end recognition."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import InputError

IOU_THRESHOLD = 0.5
RELAXED_RATIO = 1.0 / 8.0


# -- classification ---------------------------------------------------------

@dataclass
class ClassificationReport:
    matrix: np.ndarray            # rows = truth, columns = prediction
    accuracy: float
    per_class: np.ndarray         # nan for classes absent from the truth

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    @property
    def macro_accuracy(self) -> float:
        defined = self.per_class[~np.isnan(self.per_class)]
        return float(defined.mean()) if defined.size else float("nan")


def confusion_and_accuracy(predictions, truth, num_classes: int | None = None) -> ClassificationReport:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise InputError(f"{len(pred)} predictions for {len(true)} ground-truth labels")
    k = num_classes or (int(max(pred.max(initial=-1), true.max(initial=-1))) + 1)
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    rows = m.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(m) / np.maximum(rows, 1), np.nan)
    acc = float(np.trace(m) / m.sum()) if m.sum() else float("nan")
    return ClassificationReport(m, acc, per_class)


@dataclass
class McNemarResult:
    b: int   # only model A correct
    c: int   # only model B correct
    statistic: float
    p_value: float


def chi2_sf_1dof(x: float) -> float:
    """Survival function of the chi-square distribution with one degree of freedom."""
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


def mcnemar(a_correct, b_correct) -> McNemarResult:
    """Continuity-corrected McNemar test on paired correctness vectors."""
    a = np.asarray(a_correct, dtype=bool)
    b_ = np.asarray(b_correct, dtype=bool)
    if a.shape != b_.shape:
        raise InputError("correctness vectors differ in length")
    b = int(np.sum(a & ~b_))
    c = int(np.sum(~a & b_))
    if b + c == 0:
        return McNemarResult(b, c, 0.0, 1.0)
    stat = max(abs(b - c) - 1, 0) ** 2 / (b + c)
    return McNemarResult(b, c, stat, chi2_sf_1dof(stat))


# -- boxes ------------------------------------------------------------------

@dataclass
class BoxRecord:
    image_id: str
    x: float
    y: float
    w: float
    h: float
    script: str
    transcription: str | None = None
    confidence: float | None = None

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise InputError(f"{self.image_id}: box width and height must be positive")

    @property
    def key(self) -> tuple:
        return (self.image_id, self.x, self.y, self.w, self.h)


def iou(a: BoxRecord, b: BoxRecord) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (a.w * a.h + b.w * b.h - inter)


def read_records(path) -> list[BoxRecord]:
    """``image_id x y w h script [transcription [confidence]]``, tab-separated."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if not 6 <= len(parts) <= 8:
                raise InputError(f"{path}:{lineno}: expected 6 to 8 tab-separated fields, got {len(parts)}")
            try:
                x, y, w, h = (float(v) for v in parts[1:5])
                conf = float(parts[7]) if len(parts) == 8 and parts[7] != "" else None
                rec = BoxRecord(parts[0], x, y, w, h, parts[5],
                                parts[6] if len(parts) >= 7 else None, conf)
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            out.append(rec)
    return out


def _group(records: list[BoxRecord]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.image_id, []).append(i)
    return groups


def greedy_match(detections: list[BoxRecord], ground_truth: list[BoxRecord],
                 threshold: float = IOU_THRESHOLD) -> list[tuple[int, int]]:
    """One-to-one (det, gt) pairs with IoU > threshold, taken in descending IoU order.

    Ties are broken by detection index, then ground-truth index.
    """
    seen = set()
    for g in ground_truth:
        if g.key in seen:
            raise InputError(f"duplicate ground-truth box {g.key}")
        seen.add(g.key)
    det_groups = _group(detections)
    pairs = []
    for image_id, gts in _group(ground_truth).items():
        cands = []
        for di in det_groups.get(image_id, []):
            for gi in gts:
                v = iou(detections[di], ground_truth[gi])
                if v > threshold:
                    cands.append((-v, di, gi))
        cands.sort()
        used_d, used_g = set(), set()
        for _, di, gi in cands:
            if di in used_d or gi in used_g:
                continue
            used_d.add(di)
            used_g.add(gi)
            pairs.append((di, gi))
    return sorted(pairs)


@dataclass
class JointEvalReport:
    correct: int
    wrong: int
    missing: int
    details: list[dict] = field(default_factory=list, repr=False)

    @property
    def precision(self) -> float:
        d = self.correct + self.wrong
        return self.correct / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.correct + self.missing
        return self.correct / d if d else 0.0

    @property
    def fscore(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"correct": self.correct, "wrong": self.wrong, "missing": self.missing,
                "precision": self.precision, "recall": self.recall, "fscore": self.fscore}


def _tally(detections, ground_truth, is_correct) -> JointEvalReport:
    pairs = greedy_match(detections, ground_truth)
    correct = sum(1 for di, gi in pairs if is_correct(detections[di], ground_truth[gi]))
    return JointEvalReport(correct, len(detections) - correct, len(ground_truth) - correct)


def joint_eval(detections: list[BoxRecord], ground_truth: list[BoxRecord]) -> JointEvalReport:
    """A detection is correct when matched (IoU > 0.5) to a ground-truth box of the same script."""
    return _tally(detections, ground_truth, lambda d, g: d.script == g.script)


# -- end-to-end recognition -------------------------------------------------

def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance over Unicode code points."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def relaxed_match(truth: str, predicted: str) -> bool:
    """Case-sensitive; correct when distance / longer length is strictly below 1/8."""
    if not truth:
        raise InputError("ground-truth transcription is empty")
    pred = predicted or ""
    return levenshtein(truth, pred) / max(len(truth), len(pred)) < RELAXED_RATIO


def _load_junk() -> frozenset[str]:
    text = resources.files("ecn").joinpath("data/junk_chars.txt").read_text(encoding="utf-8")
    return frozenset(chr(int(line, 16)) for line in text.split() if line and not line.startswith("#")
                     and all(c in "0123456789ABCDEFabcdef" for c in line))


JUNK_CHARACTERS = _load_junk()


def junk_filter(text: str, confidence: float | None = None, threshold: float | None = None) -> bool:
    """True to keep a recognition, False to reject it.

    Rejected when more than half of the characters are junk (i, l, I or
    punctuation) or the confidence is below the threshold.
    """
    if threshold is not None and confidence is not None and confidence < threshold:
        return False
    if not text:
        return False
    junk = sum(1 for ch in text if ch in JUNK_CHARACTERS)
    return not junk > len(text) / 2


def e2e_eval(detections: list[BoxRecord], ground_truth: list[BoxRecord],
             confidence_threshold: float | None = None) -> JointEvalReport:
    """Junk-filter detections, then count matched lines whose transcription passes the relaxed test."""
    for g in ground_truth:
        if not g.transcription:
            raise InputError(f"{g.image_id}: ground-truth box without transcription")
    kept = [d for d in detections
            if junk_filter(d.transcription or "", d.confidence, confidence_threshold)]
    report = _tally(kept, ground_truth,
                    lambda d, g: relaxed_match(g.transcription, d.transcription or ""))
    report.details.append({"rejected_by_filter": len(detections) - len(kept)})
    return report
