"""Policy-optimization objectives with verifiable gradient bounds.

Three surrogates over impression-level advantages in {-1, 0, +1}:

* gradient-bounded (``gbpo``): no ratio clipping; instead the frozen
  denominator max(pi_old, sg(pi)) for non-negative advantages and
  max(pi_old, 1 - sg(pi)) for negatives caps every negative-sample gradient
  at the binary-cross-entropy gradient 1/(1 - pi).
* early-clipped (``ecpo``): PPO-style clip, but the denominator is first
  raised to max(sg(pi)/(1 + eps + delta), pi_old) so negative samples keep a
  bounded, non-zero gradient inside the clip window.
* plain clipped surrogate (``grpo_clip``): static denominator; the
  instability baseline whose negative-sample gradient grows like 1/pi.

Impressions from the legacy pipeline carry no behavior probability; their
denominator falls back to the detached current probability, making the
ratio's value exactly 1 while its gradient still flows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import DecoderTrace, SemanticItem

PROB_FLOOR = 1e-8  # probabilities are clamped here before entering a ratio

OFF_POLICY = None  # marker for samples whose behavior probability is unknown

METHODS = ("gbpo", "ecpo", "grpo_clip")


@dataclass
class ObjectiveConfig:
    method: str = "gbpo"
    clip_eps: float = 0.2
    ecpo_delta: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown objective {self.method!r}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if self.ecpo_delta <= 0.0:
            raise ValueError(f"ecpo_delta must be positive, got {self.ecpo_delta}")


@dataclass
class PolicySample:
    """A target item with per-token current probabilities and an advantage.

    `current` holds scalar graph nodes; `old` holds the matching behavior
    probabilities, or OFF_POLICY (None) when the impression came from the
    legacy pipeline.
    """

    item: SemanticItem
    current: tuple[Tensor, ...]
    old: tuple[float, ...] | None
    advantage: int

    def __post_init__(self):
        if self.advantage not in (-1, 0, 1):
            raise ValueError(f"advantage must be in {{-1,0,+1}}, got {self.advantage}")
        if self.old is not None and len(self.old) != len(self.current):
            raise ValueError("old probabilities must match the token count")


def effective_old_prob_gbpo(pi: float, old: float | None, advantage: int) -> float:
    """The gradient-bounding denominator; a plain float, never differentiated."""
    if old is None:
        old = pi
    if advantage >= 0:
        return max(old, pi)
    return max(old, 1.0 - pi)


def _clamped(tok: Tensor) -> Tensor:
    return ad.max_with_constant(tok, PROB_FLOOR)


def _token_mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, Tensor(1.0 / len(terms)))


def _group_loss(per_sample: list[Tensor | None], group_size: int) -> Tensor:
    """-(1/G) * sum of per-sample surrogate terms; zero-advantage entries are None."""
    live = [t for t in per_sample if t is not None]
    if not live:
        return Tensor(0.0)
    total = live[0]
    for t in live[1:]:
        total = ad.add(total, t)
    return ad.mul(total, Tensor(-1.0 / group_size))


def gbpo_loss(samples: list[PolicySample]) -> Tensor:
    """Unclipped ratio surrogate with the dynamic stop-gradient denominator."""
    per_sample: list[Tensor | None] = []
    for s in samples:
        if s.advantage == 0:
            per_sample.append(None)
            continue
        terms = []
        for t, tok in enumerate(s.current):
            p = _clamped(tok)
            denom = effective_old_prob_gbpo(
                float(p.value), None if s.old is None else s.old[t], s.advantage
            )
            ratio = ad.mul(p, Tensor(1.0 / denom))
            terms.append(ad.mul(ratio, Tensor(float(s.advantage))))
        per_sample.append(_token_mean(terms))
    return _group_loss(per_sample, len(samples))


def _clipped_surrogate(ratio: Tensor, advantage: int, eps: float) -> Tensor:
    clipped = ad.min_with_constant(ad.max_with_constant(ratio, 1.0 - eps), 1.0 + eps)
    a = Tensor(float(advantage))
    return ad.minimum(ad.mul(ratio, a), ad.mul(clipped, a))


def ecpo_loss(samples: list[PolicySample], cfg: ObjectiveConfig) -> Tensor:
    """Clipped surrogate whose denominator is raised to sg(pi)/(1+eps+delta)."""
    lift = 1.0 + cfg.clip_eps + cfg.ecpo_delta
    per_sample: list[Tensor | None] = []
    for s in samples:
        if s.advantage == 0:
            per_sample.append(None)
            continue
        terms = []
        for t, tok in enumerate(s.current):
            p = _clamped(tok)
            pi = float(p.value)
            old = pi if s.old is None else s.old[t]
            denom = max(pi / lift, old)
            ratio = ad.mul(p, Tensor(1.0 / denom))
            terms.append(_clipped_surrogate(ratio, s.advantage, cfg.clip_eps))
        per_sample.append(_token_mean(terms))
    return _group_loss(per_sample, len(samples))


def grpo_clip_loss(samples: list[PolicySample], cfg: ObjectiveConfig) -> Tensor:
    """Plain clipped surrogate with a static denominator (instability baseline)."""
    per_sample: list[Tensor | None] = []
    for s in samples:
        if s.advantage == 0:
            per_sample.append(None)
            continue
        terms = []
        for t, tok in enumerate(s.current):
            p = _clamped(tok)
            denom = float(p.value) if s.old is None else max(s.old[t], PROB_FLOOR)
            ratio = ad.mul(p, Tensor(1.0 / denom))
            terms.append(_clipped_surrogate(ratio, s.advantage, cfg.clip_eps))
        per_sample.append(_token_mean(terms))
    return _group_loss(per_sample, len(samples))


def objective_loss(samples: list[PolicySample], cfg: ObjectiveConfig) -> Tensor:
    if cfg.method == "gbpo":
        return gbpo_loss(samples)
    if cfg.method == "ecpo":
        return ecpo_loss(samples, cfg)
    return grpo_clip_loss(samples, cfg)


def bce_loss(p: Tensor, y: int) -> Tensor:
    """-[y log p + (1-y) log(1-p)] for a scalar probability node."""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    v = float(p.value)
    if not 0.0 < v < 1.0:
        raise ValueError(f"probability must lie strictly in (0, 1), got {v}")
    if y == 1:
        return ad.mul(ad.log(p), Tensor(-1.0))
    return ad.mul(ad.log(ad.sub(Tensor(1.0), p)), Tensor(-1.0))


def objective_stats(samples: list[PolicySample], cfg: ObjectiveConfig) -> dict:
    """Per-batch diagnostics: clamp events, mean ratio value, positive share."""
    clamps = 0
    ratios = []
    lift = 1.0 + cfg.clip_eps + cfg.ecpo_delta
    for s in samples:
        for t, tok in enumerate(s.current):
            v = float(tok.value)
            if v < PROB_FLOOR:
                clamps += 1
                v = PROB_FLOOR
            old = None if s.old is None else s.old[t]
            if cfg.method == "gbpo":
                denom = effective_old_prob_gbpo(v, old, s.advantage)
            elif cfg.method == "ecpo":
                denom = max(v / lift, v if old is None else old)
            else:
                denom = v if old is None else max(old, PROB_FLOOR)
            ratios.append(v / denom)
    n = len(samples)
    return {
        "clamp_count": clamps,
        "mean_ratio": float(np.mean(ratios)) if ratios else 0.0,
        "positive_fraction": sum(1 for s in samples if s.advantage > 0) / n if n else 0.0,
    }


@dataclass
class GradientBoundRow:
    pi: float
    gbpo_coeff: float
    gbpo_bound: float
    bce_coeff: float
    unclipped_coeff: float


def gradient_bound_check(pi_grid) -> list[GradientBoundRow]:
    """|dLoss/dpi| of an off-policy negative sample, by method, across a grid.

    The gradient-bounded objective must match 1/max(pi, 1-pi) exactly (hence
    <= 2, and equal to the negative-class BCE coefficient 1/(1-pi) whenever
    pi < 1/2); the plain clipped surrogate at ratio 1 yields 1/pi, which is
    unbounded as pi -> 0.
    """
    rows = []
    cfg = ObjectiveConfig(method="grpo_clip")
    for pi in np.asarray(pi_grid, dtype=np.float64):
        pi = float(pi)
        item = SemanticItem(0, 0, 0)

        leaf = Tensor(pi)
        sample = PolicySample(item=item, current=(leaf,), old=OFF_POLICY, advantage=-1)
        ad.backward(gbpo_loss([sample]))
        gbpo_coeff = abs(float(leaf.grad))

        leaf_g = Tensor(pi)
        sample_g = PolicySample(item=item, current=(leaf_g,), old=OFF_POLICY, advantage=-1)
        ad.backward(grpo_clip_loss([sample_g], cfg))
        unclipped = abs(float(leaf_g.grad))

        leaf_b = Tensor(pi)
        ad.backward(bce_loss(leaf_b, y=0))
        bce_coeff = abs(float(leaf_b.grad))

        rows.append(
            GradientBoundRow(
                pi=pi,
                gbpo_coeff=gbpo_coeff,
                gbpo_bound=1.0 / max(pi, 1.0 - pi),
                bce_coeff=bce_coeff,
                unclipped_coeff=unclipped,
            )
        )
    return rows


def gradient_bound_csv(rows: list[GradientBoundRow]) -> str:
    lines = ["pi,gbpo_coeff,gbpo_bound,bce_coeff,unclipped_coeff"]
    for r in rows:
        lines.append(f"{r.pi!r},{r.gbpo_coeff!r},{r.gbpo_bound!r},{r.bce_coeff!r},{r.unclipped_coeff!r}")
    return "\n".join(lines) + "\n"


def sequence_prob(trace: DecoderTrace, item: SemanticItem, row: int = 0) -> tuple[Tensor, Tensor, Tensor]:
    """The three per-token target probabilities of `item` from a forward trace."""
    picks = []
    for pos, s in enumerate(item.as_tuple()):
        picks.append(ad.slice_(trace.probs, (row, pos, s)))
    return tuple(picks)
