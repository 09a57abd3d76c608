"""AVA-style rating metadata and the two benchmark split protocols.

Metadata lines are ``image_id,c1,...,c10`` where ``ci`` counts votes for
score ``i``. AVA1 thresholds the mean score at 5 (strictly greater is good)
and can drop ambiguous training images within ``delta`` of the threshold;
AVA2 keeps the top and bottom 10% by mean score.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, TextIO

import numpy as np

THRESHOLD = 5.0
BAD, GOOD = 0, 1
SCORES = tuple(range(1, 11))


class MetadataError(ValueError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"malformed metadata: {lines}{more}")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class RatingRecord:
    image_id: str
    counts: tuple[int, ...]

    @property
    def total_votes(self) -> int:
        return sum(self.counts)

    @property
    def mean_score(self) -> float:
        return mean_score(self)


@dataclass(frozen=True)
class LabeledExample:
    image_id: str
    label: int
    mean_score: float
    partition: str


def parse_metadata(lines: Iterable[str]) -> list[RatingRecord]:
    """Parse metadata lines; collects every malformed line before raising."""
    records, problems = [], []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 11:
            problems.append((lineno, f"expected 11 columns (id + 10 counts), got {len(fields)}"))
            continue
        image_id, *rest = fields
        if not image_id:
            problems.append((lineno, "empty image id"))
            continue
        try:
            counts = tuple(int(v) for v in rest)
        except ValueError:
            problems.append((lineno, "vote counts must be integers"))
            continue
        if any(c < 0 for c in counts):
            problems.append((lineno, "negative vote count"))
            continue
        if sum(counts) == 0:
            problems.append((lineno, "zero total votes"))
            continue
        records.append(RatingRecord(image_id, counts))
    if problems:
        raise MetadataError(problems)
    return records


def read_metadata(path) -> list[RatingRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_metadata(fh)


def format_metadata(records: Iterable[RatingRecord]) -> str:
    return "".join(f"{r.image_id},{','.join(str(c) for c in r.counts)}\n" for r in records)


def write_metadata(records: Iterable[RatingRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_metadata(records))


def mean_score(record: RatingRecord) -> float:
    total = sum(record.counts)
    if total <= 0:
        raise ValueError(f"{record.image_id}: no votes")
    return sum(i * c for i, c in zip(SCORES, record.counts)) / total


def _is_good(record: RatingRecord) -> bool:
    # exact integer comparison: sum(i*c) / total > 5
    return sum(i * c for i, c in zip(SCORES, record.counts)) > 5 * record.total_votes


def _is_ambiguous(record: RatingRecord, delta: Fraction) -> bool:
    # exact |sum(i*c) / total - 5| <= delta
    total = record.total_votes
    return abs(sum(i * c for i, c in zip(SCORES, record.counts)) - 5 * total) <= delta * total


def ava1_split(
    records: Sequence[RatingRecord], delta: float = 0.0, seed: int = 0, test_count: int | None = None
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Random disjoint test set of ``test_count`` records; every other record
    goes to training unless ``delta > 0`` and its mean lies within ``delta``
    of 5. Test records are never filtered and are independent of ``delta``.

    ``delta`` is compared as the decimal it prints as, so a mean of exactly
    4.7 is ambiguous at ``delta=0.3``."""
    n = len(records)
    if test_count is None:
        test_count = round(n * 19930 / 255529)
    if not 0 <= test_count < n:
        raise SplitError(f"test_count must be in [0, {n}), got {test_count}")
    if delta < 0:
        raise SplitError("delta must be nonnegative")
    margin = Fraction(repr(float(delta)))
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:test_count].tolist())
    train, test = [], []
    for i, r in enumerate(records):
        m = mean_score(r)
        label = GOOD if _is_good(r) else BAD
        if i in test_idx:
            test.append(LabeledExample(r.image_id, label, m, "test"))
        elif margin > 0 and _is_ambiguous(r, margin):
            continue
        else:
            train.append(LabeledExample(r.image_id, label, m, "train"))
    if not train:
        raise SplitError("training set is empty after ambiguity filtering")
    return train, test


def ava2_split(records: Sequence[RatingRecord], seed: int = 0) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Top/bottom decile by mean score, shuffled into equal train/test halves."""
    n = len(records)
    if n < 20:
        raise SplitError(f"ava2 needs at least 20 records (10 per decile boundary), got {n}")
    scored = sorted(((mean_score(r), r.image_id) for r in records), key=lambda t: (-t[0], t[1]))
    k = n // 10
    pool = [LabeledExample(i, GOOD, m, "") for m, i in scored[:k]]
    pool += [LabeledExample(i, BAD, m, "") for m, i in scored[n - k :]]
    order = np.random.default_rng(seed).permutation(len(pool))
    half = len(pool) // 2
    train = [_with_partition(pool[j], "train") for j in order[:half]]
    test = [_with_partition(pool[j], "test") for j in order[half:]]
    return train, test


def _with_partition(ex: LabeledExample, partition: str) -> LabeledExample:
    return LabeledExample(ex.image_id, ex.label, ex.mean_score, partition)


def format_split(examples: Iterable[LabeledExample]) -> str:
    buf = io.StringIO()
    for e in examples:
        buf.write(f"{e.image_id},{e.label},{e.partition},{e.mean_score:.6f}\n")
    return buf.getvalue()


def write_split(examples: Iterable[LabeledExample], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_split(examples))


def read_split(source: str | os.PathLike | TextIO) -> list[LabeledExample]:
    is_path = isinstance(source, (str, os.PathLike))
    fh = open(source, encoding="utf-8") if is_path else source
    try:
        out = []
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != 4 or row[1] not in ("0", "1") or row[2] not in ("train", "test"):
                raise MetadataError([(lineno, f"bad split row {row!r}")])
            out.append(LabeledExample(row[0], int(row[1]), float(row[3]), row[2]))
        return out
    finally:
        if is_path:
            fh.close()


def split_counts(examples: Iterable[LabeledExample]) -> dict[str, int]:
    counts = {f"{p}.{lab}": 0 for p in ("train", "test") for lab in ("good", "bad")}
    for e in examples:
        counts[f"{e.partition}.{'good' if e.label == GOOD else 'bad'}"] += 1
    counts["good"] = counts["train.good"] + counts["test.good"]
    counts["bad"] = counts["train.bad"] + counts["test.bad"]
    counts["train"] = counts["train.good"] + counts["train.bad"]
    counts["test"] = counts["test.good"] + counts["test.bad"]
    return counts
