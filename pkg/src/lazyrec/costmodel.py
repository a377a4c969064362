"""Closed-form FLOPs and activation accounting for three recommender architectures.

Training FLOPs follow the 6x convention: a factor 2 for multiply-accumulate
and a factor 3 for the forward/backward ratio, applied to projection and FFN
matmuls only.  Attention-score FLOPs are excluded from totals and reported
separately.  With k-way common context compression, each impression pays for
N/k context tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig

GIGA = 1e9

ARCH_KINDS = ("enc_dec", "naive_dec", "lazy_dec")


@dataclass
class ArchSpec:
    """Parameter-level description of one architecture for the approximate model."""

    kind: str
    enc_params: float = 0.0
    dec_params: float = 0.0
    cross_kv_fraction: float = 0.10
    n_layers: int = 0
    d_model: int = 0
    context_len: float = 512.0
    compression: float = 1.0
    target_len: int = 3
    batch: int = 1

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.enc_params < 0 or self.dec_params < 0:
            raise ValueError("parameter counts must be non-negative")
        if self.compression < 1:
            raise ValueError("compression k must be >= 1")
        if self.kind == "lazy_dec":
            self.cross_kv_fraction = 0.0  # no K/V projections exist, by definition

    @property
    def effective_context(self) -> float:
        return self.context_len / self.compression


@dataclass
class CostReport:
    context_encoding_gflops: float
    target_decoding_gflops: float
    total_gflops: float
    target_proportion: float
    attention_score_flops: tuple[float, float] = (0.0, 0.0)  # (context side, target side)
    activation_count: float = 0.0
    kv_memory_elems: float = 0.0
    label: str = ""


def _proportion(target: float, total: float) -> float:
    # Degenerate zero-cost case: all of nothing goes to the target.
    return 1.0 if total == 0.0 else target / total


def flops_enc_dec(spec: ArchSpec) -> CostReport:
    """Encoder-decoder: encoder + cross-attention K/V projections pay per context token."""
    if spec.kind != "enc_dec":
        raise ValueError(f"expected enc_dec spec, got {spec.kind!r}")
    n_eff = spec.effective_context
    context = 6.0 * spec.enc_params * n_eff + 6.0 * spec.cross_kv_fraction * spec.dec_params * n_eff
    target = 6.0 * (1.0 - spec.cross_kv_fraction) * spec.dec_params * spec.target_len
    total = context + target
    return CostReport(
        context_encoding_gflops=context / GIGA,
        target_decoding_gflops=target / GIGA,
        total_gflops=total / GIGA,
        target_proportion=_proportion(target, total),
        attention_score_flops=attention_score_flops(spec),
        label="enc_dec",
    )


def flops_naive_dec(spec: ArchSpec) -> CostReport:
    """Naive decoder-only: every parameter touches every token, context and target alike."""
    if spec.kind != "naive_dec":
        raise ValueError(f"expected naive_dec spec, got {spec.kind!r}")
    params = spec.dec_params
    context = 6.0 * params * spec.effective_context
    target = 6.0 * params * spec.target_len
    total = context + target
    return CostReport(
        context_encoding_gflops=context / GIGA,
        target_decoding_gflops=target / GIGA,
        total_gflops=total / GIGA,
        target_proportion=_proportion(target, total),
        attention_score_flops=attention_score_flops(spec),
        label="naive_dec",
    )


def flops_lazy(spec: ArchSpec) -> CostReport:
    """Lazy decoder-only: zero context projections; cost is constant in context length."""
    if spec.kind != "lazy_dec":
        raise ValueError(f"expected lazy_dec spec, got {spec.kind!r}")
    params = spec.dec_params
    target = 6.0 * params * spec.target_len
    return CostReport(
        context_encoding_gflops=0.0,
        target_decoding_gflops=target / GIGA,
        total_gflops=target / GIGA,
        target_proportion=_proportion(target, target),
        attention_score_flops=attention_score_flops(spec),
        label="lazy_dec",
    )


def flops_for(spec: ArchSpec) -> CostReport:
    return {"enc_dec": flops_enc_dec, "naive_dec": flops_naive_dec, "lazy_dec": flops_lazy}[
        spec.kind
    ](spec)


def attention_score_flops(spec: ArchSpec) -> tuple[float, float]:
    """(context-side, target-side) attention score FLOPs, excluded from the totals.

    Context side grows quadratically in the compressed context length; the
    target side is linear in the raw context length (three query positions
    against the full context).
    """
    if spec.n_layers == 0 or spec.d_model == 0:
        return (0.0, 0.0)
    n_eff = spec.effective_context
    context_side = 6.0 * spec.n_layers * n_eff * n_eff * spec.d_model
    target_side = 6.0 * spec.n_layers * spec.target_len * spec.context_len * spec.d_model
    return (context_side, target_side)


# ---------------------------------------------------------------------------
# Exact per-module accounting for the lazy decoder as actually built.
# ---------------------------------------------------------------------------


def exact_model_cost(cfg: ModelConfig, batch: int, compression: float = 1.0) -> CostReport:
    """Walk the lazy decoder's module structure and count MACs and activations.

    Training GFLOPs = 6 * MACs of every projection/FFN matmul per sample;
    embedding lookups are free; attention scores are tallied separately.
    Activations count every materialized intermediate array element of one
    forward pass at the given batch.  KV memory is the context processor's
    output: batch * (context_len/compression) * g_kv * d_head * s_kv * l_kv.
    """
    cfg.validate()
    if compression < 1:
        raise ValueError("compression k must be >= 1")
    n_eff = cfg.context_len / compression
    d, da, h, dh = cfg.d_model, cfg.d_attn, cfg.n_heads, cfg.d_head
    t = 3  # target tokens per sample
    chunk = cfg.g_kv * dh
    n_chunks = cfg.s_kv * cfg.l_kv

    macs = 0.0
    score_ctx = 0.0
    score_tgt = 0.0
    acts = 0.0  # per-sample activation elements (batch-bearing)

    # Context processor output: the normalized KV chunks.  The incoming
    # context features are the caller's buffer, not a produced activation;
    # k==v is stored once when s_kv == 1.
    acts += n_eff * chunk * n_chunks
    acts += 2 * t * d  # target embedding rows and positional offsets

    for layer in range(cfg.n_layers):
        # Cross attention: q and o projections over the target tokens only.
        macs += t * d * da + t * da * d
        score_ctx += 2.0 * t * n_eff * h * dh  # qk scores + prob@v
        acts += t * d  # normed input
        acts += t * da  # q
        acts += h * t * n_eff  # attention probabilities
        acts += t * da + t * d + t * d  # context mix, output proj, residual

        # Causal self attention over the 3 target tokens.
        macs += 4.0 * t * d * da
        score_tgt += 2.0 * t * t * h * dh
        acts += t * d  # normed input
        acts += 3 * t * da  # q, k, v
        acts += h * t * t  # probabilities
        acts += t * da + t * d + t * d

        # Feed-forward (dense or mixture).
        acts += t * d  # normed input
        if cfg.moe is not None and layer >= cfg.moe.first_dense_layers:
            m = cfg.moe
            macs += t * d * m.n_routed  # router
            active = m.top_k + m.n_shared
            macs += active * 3.0 * t * d * m.moe_intermediate
            acts += t * m.n_routed + t * m.top_k  # scores and weights
            acts += active * (4 * t * m.moe_intermediate + t * d)
            acts += t * d  # residual
        else:
            f = cfg.ffn_intermediate
            macs += 3.0 * t * d * f
            acts += 4 * t * f  # gate, silu, up, gated product
            acts += t * d + t * d  # down proj, residual

    # Position-specific output heads.
    macs += t * d * cfg.vocab
    acts += t * d  # per-position normed hidden
    acts += 2 * t * cfg.vocab  # logits and probabilities

    kv_mem = batch * n_eff * cfg.g_kv * dh * cfg.s_kv * cfg.l_kv
    total_gflops = 6.0 * macs / GIGA
    return CostReport(
        context_encoding_gflops=0.0,
        target_decoding_gflops=total_gflops,
        total_gflops=total_gflops,
        target_proportion=1.0,
        attention_score_flops=(6.0 * score_ctx, 6.0 * score_tgt),
        activation_count=batch * acts,
        kv_memory_elems=kv_mem,
        label="lazy_dec_exact",
    )


# ---------------------------------------------------------------------------
# Report emitters.
# ---------------------------------------------------------------------------


def _fmt_gflops(x: float) -> str:
    return f"{x:.1f}" if x < 100 else f"{x:.0f}"


def _fmt_proportion(p: float) -> str:
    return "~100%" if p >= 0.995 else f"{100.0 * p:.2f}%"


@dataclass
class ReportRow:
    label: str
    context_len: float
    report: CostReport


def build_rows(specs: list[ArchSpec]) -> list[ReportRow]:
    return [ReportRow(s.kind, s.context_len, flops_for(s)) for s in specs]


def emit_report(specs: list[ArchSpec], fmt: str = "markdown") -> str:
    """Comparison table (total / context / target GFLOPs and target share)."""
    rows = build_rows(specs)
    header = ["architecture", "context_len", "total_gflops", "context_gflops", "target_gflops", "target_proportion"]
    if fmt == "csv":
        lines = [",".join(header)]
        for r in rows:
            rep = r.report
            lines.append(
                f"{r.label},{r.context_len:g},{rep.total_gflops!r},"
                f"{rep.context_encoding_gflops!r},{rep.target_decoding_gflops!r},"
                f"{rep.target_proportion!r}"
            )
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for r in rows:
            rep = r.report
            lines.append(
                f"| {r.label} | {r.context_len:g} | {_fmt_gflops(rep.total_gflops)} "
                f"| {_fmt_gflops(rep.context_encoding_gflops)} "
                f"| {_fmt_gflops(rep.target_decoding_gflops)} "
                f"| {_fmt_proportion(rep.target_proportion)} |"
            )
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def reference_specs(context_len: float = 512.0, compression: float = 5.0) -> list[ArchSpec]:
    """The standard 1B-parameter comparison triple at a given context length."""
    return [
        ArchSpec(
            kind="enc_dec",
            enc_params=0.5e9,
            dec_params=0.5e9,
            cross_kv_fraction=0.10,
            n_layers=9,
            d_model=1792,
            context_len=context_len,
            compression=compression,
        ),
        ArchSpec(
            kind="naive_dec",
            dec_params=1.0e9,
            n_layers=18,
            d_model=1792,
            context_len=context_len,
            compression=compression,
        ),
        ArchSpec(
            kind="lazy_dec",
            dec_params=1.0e9,
            n_layers=18,
            d_model=1792,
            context_len=context_len,
            compression=compression,
        ),
    ]
