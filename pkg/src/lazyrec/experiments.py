"""Configuration-driven experiment runs: pretraining, feedback RL, sweeps.

Every run writes a self-contained directory: the resolved configuration, a
metadata file (version, seed), a metrics CSV flushed every step, and a model
checkpoint.  Reruns with identical config and seed reproduce the metrics CSV
byte for byte, so floats are serialized with `repr` (shortest round-trip).
"""

from __future__ import annotations

import copy
import json
import os
import subprocess
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import GraphError
from .costmodel import exact_model_cost
from .model import (
    AdamW,
    ConfigError,
    LazyDecoder,
    ModelConfig,
    MoEConfig,
    SemanticItem,
    grad_global_norm,
)
from .policy import (
    OFF_POLICY,
    ObjectiveConfig,
    PolicySample,
    objective_loss,
    objective_stats,
    sequence_prob,
)
from .reward import (
    BucketedHistory,
    batch_threshold,
    assign_advantage,
    bucket_index,
    percentile_rank,
    write_records,
)
from .sim import (
    SimConfig,
    World,
    behavior_pick,
    context_tokens,
    generate_world,
    simulate_feedback,
    stream_batches,
)

ENV_PREFIX = "LAZYREC_"
METRICS_SCHEMA_VERSION = 1

PRETRAIN_COLUMNS = ["step", "loss", "gflops"]
RL_COLUMNS = [
    "step",
    "loss",
    "grad_norm",
    "clamp_count",
    "mean_ratio",
    "positive_fraction",
    "mean_q",
    "mean_exposed_q",
]


class NumericalAbort(RuntimeError):
    """Training hit a non-finite value; the last good checkpoint was kept."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 3e-4
    organization: str = "newest_only"
    window_size: int = 256
    checkpoint_every: int = 100


@dataclass
class RLConfig:
    method: str = "gbpo"
    clip_eps: float = 0.2
    ecpo_delta: float = 0.1
    reward_base: float = 2.0
    reward_eps: float = 1e-6
    history_window: int = 256
    arm: str = "with_onerec"  # or "traditional_only"
    steps: int = 1000
    users_per_step: int = 8
    exposures_per_user: int = 2
    onerec_fraction: float = 0.5
    beam: int = 8
    replay_delay: int = 4
    warmup_impressions: int = 32
    lr: float = 1e-3

    def validate(self) -> "RLConfig":
        if self.arm not in ("with_onerec", "traditional_only"):
            raise ConfigError(f"unknown sample-source arm {self.arm!r}")
        ObjectiveConfig(self.method, self.clip_eps, self.ecpo_delta)
        return self

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.method, self.clip_eps, self.ecpo_delta)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.sim.validate()
        self.rl.validate()
        if self.train.steps < 0 or self.train.batch < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "sim": asdict(self.sim),
            "train": asdict(self.train),
            "rl": asdict(self.rl),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }


def _apply_env_overrides(raw: dict, environ=None) -> dict:
    """LAZYREC_SECTION__KEY=value overrides; values parsed as JSON when possible."""
    environ = os.environ if environ is None else environ
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
        try:
            node[path[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[path[-1]] = value
    return raw


def load_config(path: str | Path | None, environ=None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    raw = _apply_env_overrides(raw, environ)
    try:
        model_raw = dict(raw.get("model", {}))
        moe_raw = model_raw.pop("moe", None)
        model = ModelConfig(**model_raw)
        if moe_raw is not None:
            model.moe = MoEConfig(**moe_raw)
        cfg = ExperimentConfig(
            model=model,
            sim=SimConfig(**raw.get("sim", {})),
            train=TrainConfig(**raw.get("train", {})),
            rl=RLConfig(**raw.get("rl", {})),
            out_dir=raw.get("out_dir", "runs/default"),
            seed=int(raw.get("seed", 0)),
        )
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def _git_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"lazyrec-{__version__}"


class RunDir:
    """Owns one run directory: resolved config, metadata, metrics, checkpoints."""

    def __init__(self, out_dir: str | Path, cfg: ExperimentConfig, columns: list[str]):
        self.path = Path(out_dir)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "resolved_config.json").write_text(
            json.dumps(cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8"
        )
        (self.path / "run_meta.json").write_text(
            json.dumps(
                {
                    "version": _git_version(),
                    "seed": cfg.seed,
                    "metrics_schema_version": METRICS_SCHEMA_VERSION,
                    "columns": columns,
                },
                indent=1,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
        self.metrics_path = self.path / "metrics.csv"
        self._metrics = open(self.metrics_path, "w", encoding="utf-8")
        self._metrics.write(",".join(columns) + "\n")
        self._metrics.flush()

    def log(self, *values) -> None:
        self._metrics.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in values) + "\n")
        self._metrics.flush()

    def close(self) -> None:
        self._metrics.close()

    @property
    def checkpoint_path(self) -> Path:
        return self.path / "checkpoint.npz"


def run_pretrain(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Stream batches and minimize the generation loss; returns the run directory."""
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    run = RunDir(out, cfg, PRETRAIN_COLUMNS)
    world = generate_world(cfg.seed, cfg.sim.n_users, cfg.sim.n_items, cfg.sim.vocab, copy.deepcopy(cfg.sim))
    model = LazyDecoder(cfg.model, seed=cfg.seed)
    optim = AdamW(model.params, lr=cfg.train.lr)
    stream = stream_batches(
        world,
        cfg.train.organization,
        cfg.train.batch,
        np.random.default_rng(cfg.seed + 1),
        cfg.model.context_len,
        cfg.model.d_context,
        window_size=cfg.train.window_size,
    )
    gflops_per_batch = exact_model_cost(cfg.model, batch=1).total_gflops * cfg.train.batch

    model.save(run.checkpoint_path)  # step-0 checkpoint; overwritten as training advances
    try:
        for step in range(cfg.train.steps):
            batch = next(stream)
            try:
                kv = model.context_kv(batch.contexts)
                trace = model.forward(batch.targets, kv)
                loss = model.gen_loss(trace, batch.targets)
                ad.backward(loss)
            except GraphError as e:
                run.close()
                raise NumericalAbort(f"step {step}: {e}") from e
            for layer, loads in trace.expert_loads.items():
                model.update_router_bias(layer, loads)
            optim.step()
            optim.zero_grad()
            run.log(step, float(loss.value), gflops_per_batch * (step + 1))
            if (step + 1) % cfg.train.checkpoint_every == 0:
                model.save(run.checkpoint_path)
        model.save(run.checkpoint_path)
    finally:
        run.close()
    return run.path


@dataclass
class _Exposure:
    """One impression waiting in the replay queue with its exposure-time view."""

    user_id: int
    record: object
    context: tuple
    q: float | None
    old: tuple[float, float, float] | None


class _RewardTracker:
    """Per-user watch-time histories bucketed by duration, window-capped."""

    def __init__(self, base: float, eps: float, window: int):
        self.base = base
        self.eps = eps
        self.window = window
        self._records: dict[int, deque] = {}

    def history(self, user_id: int) -> BucketedHistory:
        hist = BucketedHistory(user_id=user_id)
        for b, p in self._records.get(user_id, ()):
            hist.add(b, p)
        return hist

    def rank(self, user_id: int, duration: float, playing_time: float) -> float | None:
        return percentile_rank(self.history(user_id), duration, playing_time, self.base, self.eps)

    def add(self, user_id: int, duration: float, playing_time: float) -> None:
        dq = self._records.setdefault(user_id, deque(maxlen=self.window))
        dq.append((bucket_index(duration, self.base, self.eps), playing_time))


def _token_probs(model: LazyDecoder, world: World, user, context, item) -> tuple[float, float, float]:
    ctx = context_tokens(world, user, context, model.cfg.context_len, model.cfg.d_context)
    kv = model.context_kv(ctx[None])
    trace = model.forward(np.array([item.as_tuple()]), kv)
    p = trace.probs.value[0]
    return tuple(float(p[i, s]) for i, s in enumerate(item.as_tuple()))


def run_rl(
    cfg: ExperimentConfig, checkpoint: str | Path, out_dir: str | Path | None = None
) -> Path:
    """Exposure -> feedback -> duration-aware advantages -> policy step, repeatedly.

    Rewards are scored at exposure time against the user's prior same-bucket
    history; training consumes exposures `replay_delay` steps later, so the
    stored behavior probabilities grow stale exactly as logged impressions do.
    Steps whose batch carries only zero advantages are skipped outright.
    """
    cfg.validate()
    rl = cfg.rl
    out = Path(out_dir or cfg.out_dir)
    run = RunDir(out, cfg, RL_COLUMNS)
    model = LazyDecoder.load(checkpoint)
    if model.cfg.vocab != cfg.sim.vocab:
        run.close()
        raise ConfigError("checkpoint vocab does not match simulator vocab")
    optim = AdamW(model.params, lr=rl.lr)
    objective = rl.objective()
    world = generate_world(cfg.seed, cfg.sim.n_users, cfg.sim.n_items, cfg.sim.vocab, copy.deepcopy(cfg.sim))
    rng = np.random.default_rng(cfg.seed + 2)
    tracker = _RewardTracker(rl.reward_base, rl.reward_eps, rl.history_window)
    contexts: dict[int, list] = {u.user_id: [] for u in world.users}

    clock = 0.0
    for user in world.users:  # warmup so duration buckets have peers
        for _ in range(rl.warmup_impressions):
            item = behavior_pick(world, user, rng)
            clock += 1.0
            rec = simulate_feedback(world, user, item, rng, ts=clock)
            tracker.add(user.user_id, rec.duration, rec.playing_time)
            contexts[user.user_id].append(rec)
            if len(contexts[user.user_id]) > cfg.sim.history_window:
                contexts[user.user_id].pop(0)

    queue: deque[list[_Exposure]] = deque()
    try:
        for step in range(rl.steps):
            # --- exposure phase -------------------------------------------------
            exposures: list[_Exposure] = []
            users = [world.users[int(u)] for u in rng.integers(0, cfg.sim.n_users, rl.users_per_step)]
            for user in users:
                ctx_snapshot = tuple(contexts[user.user_id])
                n_onerec = 0
                if rl.arm == "with_onerec":
                    n_onerec = int(round(rl.exposures_per_user * rl.onerec_fraction))
                picks: list[tuple[object, tuple | None]] = []
                if n_onerec:
                    ctx_arr = context_tokens(
                        world, user, ctx_snapshot, model.cfg.context_len, model.cfg.d_context
                    )
                    kv = model.context_kv(ctx_arr[None])
                    ranked = model.beam_generate(kv, beam=rl.beam)
                    for sid, _ in ranked[:n_onerec]:
                        cat = world.catalog.lookup(sid)
                        if cat is None:  # beam proposed a triple with no catalog item
                            cat = world.catalog.items[int(rng.integers(0, cfg.sim.n_items))]
                        old = _token_probs(model, world, user, ctx_snapshot, cat.sid)
                        picks.append((cat, old))
                while len(picks) < rl.exposures_per_user:
                    picks.append((behavior_pick(world, user, rng), None))
                for cat, old in picks:
                    clock += 1.0
                    source = "traditional" if old is None else "onerec"
                    rec = simulate_feedback(
                        world, user, cat, rng, ts=clock, source=source, behavior_prob=old
                    )
                    q = tracker.rank(user.user_id, rec.duration, rec.playing_time)
                    exposures.append(_Exposure(user.user_id, rec, ctx_snapshot, q, old))
                    tracker.add(user.user_id, rec.duration, rec.playing_time)
                    contexts[user.user_id].append(rec)
                    if len(contexts[user.user_id]) > cfg.sim.history_window:
                        contexts[user.user_id].pop(0)
            queue.append(exposures)
            exposed_qs = [e.q for e in exposures if e.q is not None]
            mean_exposed_q = float(np.mean(exposed_qs)) if exposed_qs else 0.0

            if len(queue) <= rl.replay_delay:
                run.log(step, 0.0, 0.0, 0, 0.0, 0.0, 0.0, mean_exposed_q)
                continue
            train_batch = queue.popleft()

            # --- advantage assignment ------------------------------------------
            tau = batch_threshold([e.q for e in train_batch])
            advantages = [assign_advantage(e.q, tau, e.record.neg) for e in train_batch]
            qs_present = [e.q for e in train_batch if e.q is not None]
            mean_q = float(np.mean(qs_present)) if qs_present else 0.0

            if all(a == 0 for a in advantages):
                run.log(step, 0.0, 0.0, 0, 0.0, 0.0, mean_q, mean_exposed_q)
                continue

            # --- policy step -----------------------------------------------------
            try:
                ctx_arr = np.stack(
                    [
                        context_tokens(
                            world,
                            world.users[e.user_id],
                            e.context,
                            model.cfg.context_len,
                            model.cfg.d_context,
                        )
                        for e in train_batch
                    ]
                )
                targets = np.array(
                    [[e.record.s1, e.record.s2, e.record.s3] for e in train_batch]
                )
                kv = model.context_kv(ctx_arr)
                trace = model.forward(targets, kv)
                samples = []
                for row, (e, a) in enumerate(zip(train_batch, advantages)):
                    item = SemanticItem(e.record.s1, e.record.s2, e.record.s3)
                    current = sequence_prob(trace, item, row=row)
                    samples.append(
                        PolicySample(item=item, current=current, old=e.old, advantage=a)
                    )
                loss = objective_loss(samples, objective)
                ad.backward(loss)
            except GraphError as exc:
                run.close()
                raise NumericalAbort(f"step {step}: {exc}") from exc

            gnorm = grad_global_norm(model.params)
            stats = objective_stats(samples, objective)
            optim.step()
            optim.zero_grad()
            run.log(
                step,
                float(loss.value),
                gnorm,
                stats["clamp_count"],
                stats["mean_ratio"],
                stats["positive_fraction"],
                mean_q,
                mean_exposed_q,
            )
        model.save(run.checkpoint_path)
    finally:
        run.close()
    return run.path


def run_dump_world(cfg: ExperimentConfig, out_dir: str | Path | None = None, impressions: int = 1000) -> Path:
    """Write the world snapshot and a JSONL impression stream for replay."""
    from .sim import dump_world

    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg.seed, cfg.sim.n_users, cfg.sim.n_items, cfg.sim.vocab, copy.deepcopy(cfg.sim))
    dump_world(world, out / "world.json")
    rng = np.random.default_rng(cfg.seed + 1)
    records = []
    clock = 0.0
    for _ in range(impressions):
        user = world.users[int(rng.integers(0, cfg.sim.n_users))]
        item = behavior_pick(world, user, rng)
        clock += 1.0
        records.append(simulate_feedback(world, user, item, rng, ts=clock))
    write_records(out / "impressions.jsonl", records)
    return out


SWEEP_AXES = ("l_kv", "s_kv", "g_kv", "model_size")


def run_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: list[int],
    out_dir: str | Path | None = None,
) -> Path:
    """One pretrain run per axis value at equal seeds; failures isolate per point."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    curve_rows = []
    for value in values:
        point_cfg = copy.deepcopy(cfg)
        if axis == "model_size":
            point_cfg.model.d_model = int(value)
            point_cfg.model.d_head = 0
            point_cfg.model.ffn_intermediate = 0
        else:
            setattr(point_cfg.model, axis, int(value))
        point_cfg.model.__post_init__()
        point_dir = out / f"{axis}_{value}"
        try:
            point_cfg.validate()
            run_pretrain(point_cfg, point_dir)
            cost = exact_model_cost(point_cfg.model, batch=cfg.train.batch)
            lines = (point_dir / "metrics.csv").read_text().strip().splitlines()[1:]
            losses = [float(row.split(",")[1]) for row in lines]
            tail = losses[-50:] if len(losses) >= 50 else losses
            final = float(np.mean(tail)) if tail else float("nan")
            for row in lines:
                step, loss, gflops = row.split(",")
                curve_rows.append(f"{value},{step},{loss},{gflops}")
            summary_rows.append(
                f"{value},{final!r},{cost.total_gflops!r},{cost.kv_memory_elems!r},"
                f"{cost.activation_count!r},ok"
            )
        except (ConfigError, NumericalAbort, GraphError) as e:
            summary_rows.append(f"{value},nan,nan,nan,nan,failed: {e}")
    (out / "sweep_summary.csv").write_text(
        f"{axis},final_loss,gflops_per_batch,kv_memory_elems,activations,status\n"
        + "\n".join(summary_rows)
        + "\n",
        encoding="utf-8",
    )
    (out / "sweep_curves.csv").write_text(
        f"{axis},step,loss,gflops\n" + "\n".join(curve_rows) + "\n", encoding="utf-8"
    )
    return out
