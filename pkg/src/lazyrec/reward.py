"""Duration-aware reward shaping from watch-time feedback.

Raw playing time is biased by video length, so each playing time is ranked
against the user's own history of videos with comparable duration.  Durations
are long-tailed, hence the comparable-duration buckets widen geometrically:
bucket(d) = floor(log_base(d + eps)).  A batch keeps only its top quartile of
percentile ranks as positives; explicit dislikes are negatives; everything
else is filtered out.  Advantages stay in {-1, 0, +1} with no normalization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ABSENT = None  # percentile rank of a sample with no duration-bucket peers


@dataclass(frozen=True)
class InteractionRecord:
    """One impression: who saw what, for how long, and how they reacted."""

    user_id: int
    s1: int
    s2: int
    s3: int
    duration: float
    playing_time: float
    neg: int
    source: str  # "onerec" | "traditional"
    behavior_prob: tuple[float, float, float] | None
    ts: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.playing_time < 0:
            raise ValueError(f"playing_time must be non-negative, got {self.playing_time}")
        if self.neg not in (0, 1):
            raise ValueError(f"neg flag must be 0 or 1, got {self.neg}")
        if self.source not in ("onerec", "traditional"):
            raise ValueError(f"unknown source {self.source!r}")
        if (self.behavior_prob is not None) != (self.source == "onerec"):
            raise ValueError("behavior_prob must be present exactly for onerec impressions")

    def item_triple(self) -> tuple[int, int, int]:
        return (self.s1, self.s2, self.s3)


def bucket_index(duration: float, base: float = 2.0, eps: float = 1e-6) -> int:
    """floor(log_base(duration + eps)); negative for sub-second durations.

    The float log is corrected so the result is the exact mathematical floor:
    the largest b with base**b <= duration + eps.
    """
    if base <= 1.0:
        raise ValueError(f"log base must exceed 1, got {base}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if duration < 0.0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    x = duration + eps
    b = math.floor(math.log(x, base))
    while base ** b > x:
        b -= 1
    while base ** (b + 1) <= x:
        b += 1
    return b


@dataclass
class BucketedHistory:
    """One user's playing times grouped by the duration bucket of each video."""

    user_id: int
    buckets: dict[int, list[float]] = field(default_factory=dict)

    def add(self, bucket: int, playing_time: float) -> None:
        self.buckets.setdefault(bucket, []).append(playing_time)

    def peers(self, bucket: int) -> list[float]:
        return self.buckets.get(bucket, [])

    def size(self) -> int:
        return sum(len(v) for v in self.buckets.values())


def build_history(
    records: Iterable[InteractionRecord], base: float = 2.0, eps: float = 1e-6
) -> BucketedHistory:
    """Group a single user's playing times by duration bucket (duplicates kept)."""
    records = list(records)
    if not records:
        return BucketedHistory(user_id=-1)
    user_id = records[0].user_id
    hist = BucketedHistory(user_id=user_id)
    for r in records:
        if r.user_id != user_id:
            raise ValueError(f"records mix users {user_id} and {r.user_id}")
        hist.add(bucket_index(r.duration, base, eps), r.playing_time)
    return hist


def percentile_rank(
    history: BucketedHistory,
    duration: float,
    playing_time: float,
    base: float = 2.0,
    eps: float = 1e-6,
) -> float | None:
    """Share of same-bucket historical playing times <= this one; ABSENT if no peers."""
    peers = history.peers(bucket_index(duration, base, eps))
    if not peers:
        return ABSENT
    arr = np.sort(np.asarray(peers, dtype=np.float64))
    count = int(np.searchsorted(arr, playing_time, side="right"))
    return count / arr.size


def batch_threshold(qs: Sequence[float | None]) -> float:
    """Top-quartile cutoff: the (floor(0.25 n)+1)-th largest rank, ABSENTs excluded.

    Strictly-greater comparison against this threshold marks exactly
    floor(0.25 n) samples positive when ranks are distinct.  An empty batch
    (after exclusion) yields +inf, so nothing passes.
    """
    present = sorted((q for q in qs if q is not None), reverse=True)
    if not present:
        return math.inf
    k = int(0.25 * len(present))
    return present[k]


def assign_advantage(q: float | None, threshold: float, neg: int) -> int:
    """{-1, 0, +1}: dislike dominates; else +1 only above the batch threshold."""
    if neg == 1:
        return -1
    if q is not None and q > threshold:
        return +1
    return 0


def shape_batch(
    histories: dict[int, BucketedHistory],
    records: Sequence[InteractionRecord],
    base: float = 2.0,
    eps: float = 1e-6,
) -> tuple[list[int], list[float | None], float]:
    """Advantages for one training batch: per-record q, shared threshold, cases applied."""
    qs = []
    for r in records:
        hist = histories.get(r.user_id)
        if hist is None:
            qs.append(ABSENT)
        else:
            qs.append(percentile_rank(hist, r.duration, r.playing_time, base, eps))
    tau = batch_threshold(qs) if records else math.inf
    advantages = [assign_advantage(q, tau, r.neg) for q, r in zip(qs, records)]
    return advantages, qs, tau


# ---------------------------------------------------------------------------
# JSONL interchange.
# ---------------------------------------------------------------------------

_FIELDS = ("user_id", "s1", "s2", "s3", "duration", "playing_time", "neg", "source", "ts")


def record_to_dict(r: InteractionRecord) -> dict:
    d = {k: getattr(r, k) for k in _FIELDS}
    if r.behavior_prob is not None:
        d["behavior_prob"] = list(r.behavior_prob)
    return d


def record_from_dict(d: dict) -> InteractionRecord:
    bp = d.get("behavior_prob")
    return InteractionRecord(
        user_id=int(d["user_id"]),
        s1=int(d["s1"]),
        s2=int(d["s2"]),
        s3=int(d["s3"]),
        duration=float(d["duration"]),
        playing_time=float(d["playing_time"]),
        neg=int(d["neg"]),
        source=str(d["source"]),
        behavior_prob=tuple(float(x) for x in bp) if bp is not None else None,
        ts=float(d["ts"]),
    )


def write_records(path: str | Path, records: Iterable[InteractionRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(record_to_dict(r), sort_keys=True) + "\n")
            n += 1
    return n


def read_records(path: str | Path) -> list[InteractionRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(record_from_dict(json.loads(line)))
    return out
