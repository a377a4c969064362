"""Deterministic synthetic environment: catalog, users, feedback, data layouts.

Items carry latent quality vectors quantized by a three-level residual
codebook into semantic-ID triples, so nearby items share coarse codes.
Durations are log-normal (long-tailed).  Watch time is duration times a
sigmoid of user-item affinity plus noise, which reproduces the bias that
longer videos collect more raw watch time regardless of quality.  Explicit
dislikes fire with small probability that rises as affinity falls.

Three ways of turning an impression log into training samples:

* ``naive_impression``: one sample per impression for every item of the
  user's prefix, so old transitions are retrained at every new impression.
* ``user_centric``: one pass over the user's whole sequence, entering the
  stream when the user first appears; later interactions therefore train
  ahead of their own timestamps (temporal leakage, detectable below).
* ``newest_only``: loss exclusively on the newest impression, context
  strictly earlier.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .model import SemanticItem
from .reward import InteractionRecord

ORGANIZATIONS = ("naive_impression", "user_centric", "newest_only")


@dataclass
class SimConfig:
    n_users: int = 64
    n_items: int = 256
    vocab: int = 16
    quality_dim: int = 8
    duration_log_mean: float = 3.0  # median ~ 20 s
    duration_log_sigma: float = 1.0
    noise_sd: float = 1.0
    neg_cap: float = 0.05
    neg_threshold: float = -0.5
    neg_temperature: float = 0.5
    behavior_temperature: float = 0.5
    candidate_pool: int = 32
    history_window: int = 256
    organization: str = "newest_only"
    seed: int = 0

    def validate(self) -> "SimConfig":
        if self.n_items > self.vocab ** 3:
            raise ValueError(
                f"{self.n_items} items cannot get unique triples over vocab {self.vocab}"
            )
        if self.organization not in ORGANIZATIONS:
            raise ValueError(f"unknown organization {self.organization!r}")
        if not 0.0 <= self.neg_cap <= 1.0:
            raise ValueError("neg_cap must lie in [0, 1]")
        return self


@dataclass
class CatalogItem:
    item_id: int
    sid: SemanticItem
    duration: float
    quality: np.ndarray


@dataclass
class Catalog:
    items: list[CatalogItem]
    by_triple: dict[tuple[int, int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_triple:
            self.by_triple = {it.sid.as_tuple(): it.item_id for it in self.items}

    def lookup(self, sid: SemanticItem) -> CatalogItem | None:
        idx = self.by_triple.get(sid.as_tuple())
        return None if idx is None else self.items[idx]


@dataclass
class UserModel:
    user_id: int
    preference: np.ndarray


@dataclass
class World:
    config: SimConfig
    catalog: Catalog
    users: list[UserModel]
    qualities: np.ndarray  # (n_items, quality_dim), row i = item i
    _projections: dict = field(default_factory=dict)

    def context_projection(self, d_context: int) -> np.ndarray:
        """Fixed seeded random map from raw token features to model width."""
        if d_context not in self._projections:
            rng = np.random.default_rng(self.config.seed * 1_000_003 + d_context)
            feat = 2 * self.config.quality_dim + 3
            self._projections[d_context] = rng.normal(0.0, 1.0 / np.sqrt(feat), (feat, d_context))
        return self._projections[d_context]


def _assign_semantic_ids(
    qualities: np.ndarray, vocab: int, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """Three-level residual quantization plus deterministic de-duplication.

    Each level picks the nearest of `vocab` seeded centroids of the residual,
    so items with close quality vectors share the coarse code.  Colliding
    triples probe forward through the flattened code space (s3 first, then
    s2, then s1), which keeps coarse codes intact until a block overflows.
    """
    dim = qualities.shape[1]
    scales = (1.0, 0.5, 0.25)
    books = [rng.normal(0.0, s, (vocab, dim)) for s in scales]
    triples: list[tuple[int, int, int]] = []
    used: set[int] = set()
    space = vocab ** 3
    for z in qualities:
        codes = []
        residual = z
        for book in books:
            d2 = ((book - residual) ** 2).sum(axis=1)
            c = int(np.argmin(d2))  # ties resolve to the lowest index
            codes.append(c)
            residual = residual - book[c]
        flat = (codes[0] * vocab + codes[1]) * vocab + codes[2]
        while flat in used:
            flat = (flat + 1) % space
        used.add(flat)
        s1, rest = divmod(flat, vocab * vocab)
        s2, s3 = divmod(rest, vocab)
        triples.append((s1, s2, s3))
    return triples


def generate_world(
    seed: int,
    n_users: int,
    n_items: int,
    vocab: int,
    config: SimConfig | None = None,
) -> World:
    cfg = config or SimConfig()
    cfg.n_users, cfg.n_items, cfg.vocab, cfg.seed = n_users, n_items, vocab, seed
    cfg.validate()
    rng = np.random.default_rng(seed)
    qualities = rng.normal(0.0, 1.0, (n_items, cfg.quality_dim))
    durations = rng.lognormal(cfg.duration_log_mean, cfg.duration_log_sigma, n_items)
    triples = _assign_semantic_ids(qualities, vocab, rng)
    items = [
        CatalogItem(i, SemanticItem(*triples[i]), float(durations[i]), qualities[i])
        for i in range(n_items)
    ]
    users = [
        UserModel(u, rng.normal(0.0, 1.0, cfg.quality_dim)) for u in range(n_users)
    ]
    return World(config=cfg, catalog=Catalog(items), users=users, qualities=qualities)


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def affinity(world: World, user: UserModel, item: CatalogItem) -> float:
    return float(user.preference @ item.quality) / np.sqrt(world.config.quality_dim)


def simulate_feedback(
    world: World,
    user: UserModel,
    item: CatalogItem,
    rng: np.random.Generator,
    ts: float = 0.0,
    source: str = "traditional",
    behavior_prob: tuple[float, float, float] | None = None,
) -> InteractionRecord:
    """Watch time d * sigmoid(affinity + noise); dislikes peak at neg_cap."""
    cfg = world.config
    a = affinity(world, user, item)
    watched = item.duration * _sigmoid(a + rng.normal(0.0, cfg.noise_sd))
    p_neg = cfg.neg_cap * _sigmoid((cfg.neg_threshold - a) / cfg.neg_temperature)
    neg = int(rng.random() < p_neg)
    return InteractionRecord(
        user_id=user.user_id,
        s1=item.sid.s1,
        s2=item.sid.s2,
        s3=item.sid.s3,
        duration=item.duration,
        playing_time=float(watched),
        neg=neg,
        source=source,
        behavior_prob=behavior_prob,
        ts=ts,
    )


def behavior_pick(world: World, user: UserModel, rng: np.random.Generator) -> CatalogItem:
    """The legacy pipeline: softmax-over-affinity choice from a random pool."""
    cfg = world.config
    pool = rng.integers(0, cfg.n_items, size=cfg.candidate_pool)
    affs = (world.qualities[pool] @ user.preference) / np.sqrt(cfg.quality_dim)
    logits = affs / cfg.behavior_temperature
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return world.catalog.items[int(pool[rng.choice(len(pool), p=p)])]


# ---------------------------------------------------------------------------
# Data organizations.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSample:
    """One loss event: a target record, its strictly-prior context, and when
    the sample entered the training stream."""

    user_id: int
    context: tuple[InteractionRecord, ...]
    target: InteractionRecord
    emitted_at: float


def organize(
    records: list[InteractionRecord], mode: str, window: int = 256
) -> list[TrainingSample]:
    """Turn a time-ordered impression log into training samples; see module doc."""
    if mode not in ORGANIZATIONS:
        raise ValueError(f"unknown organization {mode!r}")
    for a, b in zip(records, records[1:]):
        if b.ts < a.ts:
            raise ValueError("records must be time-ordered")

    per_user: dict[int, list[InteractionRecord]] = {}
    samples: list[TrainingSample] = []

    if mode == "user_centric":
        first_seen: dict[int, float] = {}
        order: list[int] = []
        for r in records:
            if r.user_id not in first_seen:
                first_seen[r.user_id] = r.ts
                order.append(r.user_id)
            per_user.setdefault(r.user_id, []).append(r)
        for uid in order:
            seq = per_user[uid]
            for j, target in enumerate(seq):
                ctx = tuple(seq[max(0, j - window) : j])
                samples.append(TrainingSample(uid, ctx, target, first_seen[uid]))
        return samples

    for r in records:
        seq = per_user.setdefault(r.user_id, [])
        seq.append(r)
        if mode == "newest_only":
            ctx = tuple(seq[max(0, len(seq) - 1 - window) : -1])
            samples.append(TrainingSample(r.user_id, ctx, r, r.ts))
        else:  # naive_impression: retrain the entire prefix at every impression
            for j, target in enumerate(seq):
                ctx = tuple(seq[max(0, j - window) : j])
                samples.append(TrainingSample(r.user_id, ctx, target, r.ts))
    return samples


def leak_violations(samples: Iterable[TrainingSample]) -> int:
    """Count samples that train on information from their own future.

    A violation is context at or after the target's timestamp, or any record
    (context or target) newer than the moment the sample entered the stream.
    """
    bad = 0
    for s in samples:
        if any(c.ts >= s.target.ts for c in s.context):
            bad += 1
            continue
        newest = max([s.target.ts] + [c.ts for c in s.context])
        if newest > s.emitted_at:
            bad += 1
    return bad


def duplicate_pattern_counts(samples: Iterable[TrainingSample]) -> Counter:
    """How many times each impression (user, target timestamp) incurs loss."""
    return Counter((s.user_id, s.target.ts) for s in samples)


# ---------------------------------------------------------------------------
# Context featurization and the batch stream.
# ---------------------------------------------------------------------------


def context_tokens(
    world: World,
    user: UserModel,
    context: tuple[InteractionRecord, ...],
    context_len: int,
    d_context: int,
) -> np.ndarray:
    """(context_len, d_context) tokens from the user vector and recent records.

    Each token projects [preference, item quality, log duration, watch ratio,
    dislike flag] through the world's fixed random map; missing history slots
    fall back to a static user token.
    """
    cfg = world.config
    proj = world.context_projection(d_context)
    dim = cfg.quality_dim
    feats = np.zeros((context_len, 2 * dim + 3))
    feats[:, :dim] = user.preference
    recent = context[-context_len:]
    offset = context_len - len(recent)
    for i, r in enumerate(recent):
        idx = world.catalog.by_triple.get(r.item_triple())
        if idx is not None:
            feats[offset + i, dim : 2 * dim] = world.qualities[idx]
        feats[offset + i, 2 * dim] = np.log1p(r.duration)
        feats[offset + i, 2 * dim + 1] = r.playing_time / r.duration
        feats[offset + i, 2 * dim + 2] = float(r.neg)
    return feats @ proj


@dataclass
class Batch:
    samples: list[TrainingSample]
    contexts: np.ndarray  # (batch, context_len, d_context)
    targets: np.ndarray  # (batch, 3) semantic indices


def stream_batches(
    world: World,
    organization: str,
    batch: int,
    rng: np.random.Generator,
    context_len: int,
    d_context: int,
    window_size: int = 512,
) -> Iterator[Batch]:
    """Seeded infinite iterator of fixed-size, time-ordered training batches.

    Impressions are generated continuously; every `window_size` of them are
    organized per `organization` and re-batched.  Per-user history persists
    across windows (capped at the configured history window), so replaying
    the same seed reproduces the stream bitwise.
    """
    if organization not in ORGANIZATIONS:
        raise ValueError(f"unknown organization {organization!r}")
    cfg = world.config
    histories: dict[int, list[InteractionRecord]] = {}
    clock = 0.0
    pending: list[TrainingSample] = []
    while True:
        prior = {uid: tuple(h) for uid, h in histories.items()}
        window: list[InteractionRecord] = []
        newest: list[TrainingSample] = []
        for _ in range(window_size):
            user = world.users[int(rng.integers(0, cfg.n_users))]
            item = behavior_pick(world, user, rng)
            clock += 1.0
            rec = simulate_feedback(world, user, item, rng, ts=clock)
            h = histories.setdefault(user.user_id, [])
            if organization == "newest_only":
                ctx = tuple(h[-cfg.history_window :])
                newest.append(TrainingSample(user.user_id, ctx, rec, rec.ts))
            window.append(rec)
            h.append(rec)
            if len(h) > cfg.history_window:
                h.pop(0)

        if organization == "newest_only":
            pending.extend(newest)
        else:
            # Windowed organization; pre-window history extends each context.
            for s in organize(window, organization, window=cfg.history_window):
                ctx = (prior.get(s.user_id, ()) + s.context)[-cfg.history_window :]
                pending.append(TrainingSample(s.user_id, ctx, s.target, s.emitted_at))
        pending.sort(key=lambda s: (s.emitted_at, s.target.ts))

        while len(pending) >= batch:
            chunk, pending = pending[:batch], pending[batch:]
            contexts = np.stack(
                [
                    context_tokens(
                        world, world.users[s.user_id], s.context, context_len, d_context
                    )
                    for s in chunk
                ]
            )
            targets = np.array([[s.target.s1, s.target.s2, s.target.s3] for s in chunk])
            yield Batch(samples=chunk, contexts=contexts, targets=targets)


# ---------------------------------------------------------------------------
# Dumps for replay.
# ---------------------------------------------------------------------------


def dump_world(world: World, path: str | Path) -> None:
    """Snapshot: config (with seed) plus the catalog, sufficient for replay."""
    payload = {
        "config": asdict(world.config),
        "catalog": [
            {
                "item_id": it.item_id,
                "s1": it.sid.s1,
                "s2": it.sid.s2,
                "s3": it.sid.s3,
                "duration": it.duration,
                "quality": it.quality.tolist(),
            }
            for it in world.catalog.items
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")


def load_world(path: str | Path) -> World:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = SimConfig(**payload["config"])
    return generate_world(cfg.seed, cfg.n_users, cfg.n_items, cfg.vocab, cfg)
