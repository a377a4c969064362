"""Lazy decoder-only generative recommender.

The model generates the three-part semantic ID of the next item.  User
context never passes through the decoder's own projections: a context
processor slices the context feature dimension into normalized chunks that
serve directly as shared key/value sets for every decoder block.  Cross
attention therefore carries query and output projections only, with grouped
query heads sharing each key/value head group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Raised when a model or experiment configuration is inconsistent."""


@dataclass(frozen=True)
class SemanticItem:
    """A catalog item identified by its three codebook indices."""

    s1: int
    s2: int
    s3: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.s1, self.s2, self.s3)


@dataclass
class MoEConfig:
    n_routed: int = 8
    n_shared: int = 1
    top_k: int = 3
    moe_intermediate: int = 64
    first_dense_layers: int = 2
    bias_update_rate: float = 1e-3


@dataclass
class ModelConfig:
    """Shape of the lazy decoder.

    `d_context`, the per-token width of context features, is derived:
    s_kv * l_kv * g_kv * d_head.  Defaults bind d_head = d_model / n_heads
    and g_kv = n_heads (no query-head grouping).
    """

    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    vocab: int = 16
    context_len: int = 8
    d_head: int = 0  # 0 -> d_model // n_heads
    g_kv: int = 0  # 0 -> n_heads
    l_kv: int = 1
    s_kv: int = 1
    ffn_intermediate: int = 0  # 0 -> 4 * d_model
    embed_dim: int = 0  # 0 -> d_model (no up-projection)
    moe: MoEConfig | None = None
    lr: float = 3e-4
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.embed_dim == 0:
            self.embed_dim = self.d_model
        if self.d_head == 0:
            if self.d_model % self.n_heads:
                raise ConfigError(
                    f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
                )
            self.d_head = self.d_model // self.n_heads
        if self.g_kv == 0:
            self.g_kv = self.n_heads
        if self.ffn_intermediate == 0:
            self.ffn_intermediate = 4 * self.d_model

    def validate(self) -> "ModelConfig":
        if self.n_heads % self.g_kv:
            raise ConfigError(f"g_kv {self.g_kv} must divide n_heads {self.n_heads}")
        if not (1 <= self.l_kv <= self.n_layers):
            raise ConfigError(f"l_kv {self.l_kv} outside [1, n_layers={self.n_layers}]")
        if self.s_kv not in (1, 2):
            raise ConfigError(f"s_kv must be 1 or 2, got {self.s_kv}")
        if self.vocab < 2:
            raise ConfigError("vocab must be at least 2")
        if self.context_len < 1:
            raise ConfigError("context_len must be positive")
        if self.moe is not None:
            if self.moe.top_k > self.moe.n_routed:
                raise ConfigError(
                    f"moe top_k {self.moe.top_k} exceeds n_routed {self.moe.n_routed}"
                )
            if self.moe.first_dense_layers > self.n_layers:
                raise ConfigError("moe first_dense_layers exceeds n_layers")
        return self

    @property
    def d_context(self) -> int:
        return self.s_kv * self.l_kv * self.g_kv * self.d_head

    @property
    def d_attn(self) -> int:
        return self.n_heads * self.d_head

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        d = json.loads(s)
        moe = d.pop("moe", None)
        cfg = cls(**{k: v for k, v in d.items() if k != "moe"})
        if moe is not None:
            cfg.moe = MoEConfig(**moe)
        return cfg


def kv_layer_index(layer: int, cfg: ModelConfig) -> int:
    """Which shared key/value set block `layer` reads: floor(l * l_kv / n_layers)."""
    if not 0 <= layer < cfg.n_layers:
        raise ConfigError(f"layer {layer} outside [0, {cfg.n_layers})")
    return (layer * cfg.l_kv) // cfg.n_layers


@dataclass
class SharedKVSet:
    """l_kv normalized key/value pairs, each (batch, context_len, g_kv, d_head).

    With s_kv == 1 the value of each pair IS the key tensor (same object).
    """

    pairs: list[tuple[Tensor, Tensor]]


@dataclass
class DecoderTrace:
    """Forward-pass record: hidden states, per-position logits and probabilities."""

    hidden: list[Tensor]  # h^(0) .. h^(n_layers), each (batch, 3, d_model)
    logits: Tensor  # (batch, 3, vocab)
    probs: Tensor  # (batch, 3, vocab), rows sum to 1
    expert_loads: dict[int, np.ndarray] = field(default_factory=dict)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, the usual transformer init."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


class LazyDecoder:
    """The trainable model: parameters, forward pass, loss, and beam search."""

    BOS = -1  # sentinel: the BOS row lives at index `vocab` of the level-1 table

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.router_bias: dict[int, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        std = 0.02
        out_std = std / np.sqrt(2.0 * cfg.n_layers)
        tn = lambda shape, s=std: _truncated_normal(rng, shape, s)

        # Level-1 table carries one extra row for BOS.
        self._add("embed.level1", tn((cfg.vocab + 1, cfg.embed_dim)))
        self._add("embed.level2", tn((cfg.vocab, cfg.embed_dim)))
        if cfg.embed_dim != cfg.d_model:
            self._add("embed.proj", tn((cfg.embed_dim, cfg.d_model)))
        self._add("embed.pos_target", tn((3, cfg.d_model)))
        self._add("embed.pos_context", tn((cfg.context_len, cfg.d_context)))

        chunk = cfg.g_kv * cfg.d_head
        for l in range(cfg.l_kv):
            self._add(f"ctx.norm_k{l}", np.ones(chunk))
            if cfg.s_kv == 2:
                self._add(f"ctx.norm_v{l}", np.ones(chunk))

        for i in range(cfg.n_layers):
            p = f"block{i}"
            self._add(f"{p}.norm_cross", np.ones(cfg.d_model))
            self._add(f"{p}.cross.wq", tn((cfg.d_model, cfg.d_attn)))
            self._add(f"{p}.cross.wo", tn((cfg.d_attn, cfg.d_model), out_std))
            self._add(f"{p}.norm_self", np.ones(cfg.d_model))
            self._add(f"{p}.self.wq", tn((cfg.d_model, cfg.d_attn)))
            self._add(f"{p}.self.wk", tn((cfg.d_model, cfg.d_attn)))
            self._add(f"{p}.self.wv", tn((cfg.d_model, cfg.d_attn)))
            self._add(f"{p}.self.wo", tn((cfg.d_attn, cfg.d_model), out_std))
            self._add(f"{p}.norm_ffn", np.ones(cfg.d_model))
            if self._is_moe_layer(i):
                moe = cfg.moe
                self._add(f"{p}.moe.router", tn((cfg.d_model, moe.n_routed)))
                for e in range(moe.n_routed):
                    self._add(f"{p}.moe.expert{e}.gate", tn((cfg.d_model, moe.moe_intermediate)))
                    self._add(f"{p}.moe.expert{e}.up", tn((cfg.d_model, moe.moe_intermediate)))
                    self._add(
                        f"{p}.moe.expert{e}.down", tn((moe.moe_intermediate, cfg.d_model), out_std)
                    )
                for e in range(moe.n_shared):
                    self._add(f"{p}.moe.shared{e}.gate", tn((cfg.d_model, moe.moe_intermediate)))
                    self._add(f"{p}.moe.shared{e}.up", tn((cfg.d_model, moe.moe_intermediate)))
                    self._add(
                        f"{p}.moe.shared{e}.down", tn((moe.moe_intermediate, cfg.d_model), out_std)
                    )
                self.router_bias[i] = np.zeros(moe.n_routed)
            else:
                self._add(f"{p}.ffn.gate", tn((cfg.d_model, cfg.ffn_intermediate)))
                self._add(f"{p}.ffn.up", tn((cfg.d_model, cfg.ffn_intermediate)))
                self._add(f"{p}.ffn.down", tn((cfg.ffn_intermediate, cfg.d_model), out_std))

        for pos in range(3):
            self._add(f"head{pos}.norm", np.ones(cfg.d_model))
            self._add(f"head{pos}.w", tn((cfg.d_model, cfg.vocab)))

    def _is_moe_layer(self, layer: int) -> bool:
        return self.cfg.moe is not None and layer >= self.cfg.moe.first_dense_layers

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def cross_attention_param_count(self, layer: int) -> int:
        p = f"block{layer}"
        return self.params[f"{p}.cross.wq"].value.size + self.params[f"{p}.cross.wo"].value.size

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- context processor ---------------------------------------------------

    def context_kv(self, context: np.ndarray) -> SharedKVSet:
        """Split context features into normalized key/value sets.

        context: (batch, context_len, d_context).  The feature dimension is
        cut into s_kv*l_kv chunks of width g_kv*d_head; chunk l*s_kv becomes
        key l, and its value is either the same tensor (s_kv=1) or the
        independently normalized next chunk (s_kv=2).
        """
        cfg = self.cfg
        context = np.asarray(context, dtype=np.float64)
        if context.ndim == 2:
            context = context[None]
        if context.shape[-1] != cfg.d_context or context.shape[-2] != cfg.context_len:
            raise ConfigError(
                f"context shape {context.shape[-2:]} != ({cfg.context_len}, {cfg.d_context})"
            )
        batch = context.shape[0]
        chunk = cfg.g_kv * cfg.d_head
        x = ad.add(Tensor(context), self.params["embed.pos_context"])

        def heads(t: Tensor) -> Tensor:
            return ad.reshape(t, (batch, cfg.context_len, cfg.g_kv, cfg.d_head))

        pairs: list[tuple[Tensor, Tensor]] = []
        for l in range(cfg.l_kv):
            c_k = ad.slice_(x, (slice(None), slice(None), slice(l * cfg.s_kv * chunk, (l * cfg.s_kv + 1) * chunk)))
            k = heads(ad.mul(ad.rmsnorm(c_k, cfg.rms_eps), self.params[f"ctx.norm_k{l}"]))
            if cfg.s_kv == 2:
                c_v = ad.slice_(
                    x,
                    (slice(None), slice(None), slice((l * cfg.s_kv + 1) * chunk, (l * cfg.s_kv + 2) * chunk)),
                )
                v = heads(ad.mul(ad.rmsnorm(c_v, cfg.rms_eps), self.params[f"ctx.norm_v{l}"]))
            else:
                v = k
            k.value.flags.writeable = False  # shared across blocks; frozen on handout
            if v is not k:
                v.value.flags.writeable = False
            pairs.append((k, v))
        return SharedKVSet(pairs)

    # -- target embedding ----------------------------------------------------

    def embed_targets(self, items: np.ndarray) -> Tensor:
        """(batch, 3, d_model) embeddings of [BOS, s1, s2] plus position embeddings."""
        cfg = self.cfg
        items = np.asarray(items)
        if items.ndim == 1:
            items = items[None]
        if items.min() < 0 or items.max() >= cfg.vocab:
            raise ConfigError(
                f"semantic index out of range [0, {cfg.vocab}): {items.min()}..{items.max()}"
            )
        batch = items.shape[0]
        bos_s1 = np.column_stack([np.full(batch, cfg.vocab), items[:, 0]])
        rows1 = ad.embedding_lookup(self.params["embed.level1"], bos_s1)  # (B, 2, e)
        rows2 = ad.embedding_lookup(self.params["embed.level2"], items[:, 1:2])  # (B, 1, e)
        h = ad.concat([rows1, rows2], axis=1)
        if cfg.embed_dim != cfg.d_model:
            h = ad.matmul(h, self.params["embed.proj"])
        return ad.add(h, self.params["embed.pos_target"])

    # -- attention and ffn ----------------------------------------------------

    def _split_heads(self, t: Tensor, batch: int, seq: int) -> Tensor:
        cfg = self.cfg
        t = ad.reshape(t, (batch, seq, cfg.n_heads, cfg.d_head))
        return ad.transpose(t, (0, 2, 1, 3))  # (B, H, T, d_head)

    def _merge_heads(self, t: Tensor, batch: int, seq: int) -> Tensor:
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (batch, seq, self.cfg.d_attn))

    def lazy_cross_attention(self, h: Tensor, kv: tuple[Tensor, Tensor], layer: int) -> Tensor:
        """Grouped-query cross attention with no key/value projections.

        h: (batch, 3, d_model) already normalized; kv: key/value tensors of
        shape (batch, context_len, g_kv, d_head) straight from the context
        processor.  All three positions attend to the full context.
        """
        cfg = self.cfg
        batch, seq = h.value.shape[0], h.value.shape[1]
        p = f"block{layer}"
        q = ad.matmul(h, self.params[f"{p}.cross.wq"])
        q = self._split_heads(q, batch, seq)  # (B, H, T, dh)

        k, v = kv
        rep = cfg.n_heads // cfg.g_kv
        k = ad.transpose(k, (0, 2, 1, 3))  # (B, G, N, dh)
        v = ad.transpose(v, (0, 2, 1, 3))
        if rep > 1:
            k = ad.repeat(k, rep, axis=1)  # (B, H, N, dh)
            v = ad.repeat(v, rep, axis=1)

        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.mul(scores, Tensor(1.0 / np.sqrt(cfg.d_head)))
        attn = ad.softmax(scores, axis=-1)  # (B, H, T, N)
        ctx = ad.matmul(attn, v)  # (B, H, T, dh)
        out = self._merge_heads(ctx, batch, seq)
        return ad.matmul(out, self.params[f"{p}.cross.wo"])

    _CAUSAL_BIAS = -1e30  # exp() underflows to exactly 0.0, an exact mask

    def causal_self_attention(self, h: Tensor, layer: int) -> Tensor:
        """Standard multi-head self attention with a lower-triangular mask."""
        cfg = self.cfg
        batch, seq = h.value.shape[0], h.value.shape[1]
        p = f"block{layer}"
        q = self._split_heads(ad.matmul(h, self.params[f"{p}.self.wq"]), batch, seq)
        k = self._split_heads(ad.matmul(h, self.params[f"{p}.self.wk"]), batch, seq)
        v = self._split_heads(ad.matmul(h, self.params[f"{p}.self.wv"]), batch, seq)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.mul(scores, Tensor(1.0 / np.sqrt(cfg.d_head)))
        mask = np.triu(np.full((seq, seq), self._CAUSAL_BIAS), k=1)
        scores = ad.add(scores, Tensor(mask))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        out = self._merge_heads(ctx, batch, seq)
        return ad.matmul(out, self.params[f"{p}.self.wo"])

    def _gated_ffn(self, x: Tensor, gate: Tensor, up: Tensor, down: Tensor) -> Tensor:
        return ad.matmul(ad.mul(ad.silu(ad.matmul(x, gate)), ad.matmul(x, up)), down)

    def ffn(self, h: Tensor, layer: int) -> Tensor:
        p = f"block{layer}"
        return self._gated_ffn(
            h, self.params[f"{p}.ffn.gate"], self.params[f"{p}.ffn.up"], self.params[f"{p}.ffn.down"]
        )

    def moe_ffn(self, h: Tensor, layer: int) -> tuple[Tensor, np.ndarray]:
        """Sparse expert mixture with bias-steered top-k routing.

        Expert selection ranks router score + balancing bias, ties broken by
        the lowest expert index; combination weights are a softmax over the
        UNBIASED scores of the selected experts, so the bias shifts load but
        never the mixture weights.  Returns (output, per-expert token counts).
        """
        cfg, moe = self.cfg, self.cfg.moe
        p = f"block{layer}"
        batch, seq = h.value.shape[0], h.value.shape[1]
        tokens = batch * seq
        x = ad.reshape(h, (tokens, cfg.d_model))

        scores = ad.matmul(x, self.params[f"{p}.moe.router"])  # (T, E)
        biased = scores.value + self.router_bias[layer]
        # Stable argsort on the negated scores: ties fall to the lowest index.
        order = np.argsort(-biased, axis=-1, kind="stable")
        sel = order[:, : moe.top_k]  # (T, k)
        weights = ad.softmax(ad.take_along(scores, sel), axis=-1)  # (T, k)

        out = None
        for e in range(moe.n_shared):
            y = self._gated_ffn(
                x,
                self.params[f"{p}.moe.shared{e}.gate"],
                self.params[f"{p}.moe.shared{e}.up"],
                self.params[f"{p}.moe.shared{e}.down"],
            )
            out = y if out is None else ad.add(out, y)

        flat_w = ad.reshape(weights, (tokens * moe.top_k,))
        loads = np.bincount(sel.ravel(), minlength=moe.n_routed).astype(np.int64)
        for e in range(moe.n_routed):
            rows, slots = np.nonzero(sel == e)
            if rows.size == 0:
                continue
            xe = ad.gather_rows(x, rows)
            ye = self._gated_ffn(
                xe,
                self.params[f"{p}.moe.expert{e}.gate"],
                self.params[f"{p}.moe.expert{e}.up"],
                self.params[f"{p}.moe.expert{e}.down"],
            )
            we = ad.reshape(ad.gather_rows(flat_w, rows * moe.top_k + slots), (rows.size, 1))
            contrib = ad.scatter_rows(ad.mul(ye, we), rows, tokens)
            out = contrib if out is None else ad.add(out, contrib)

        return ad.reshape(out, (batch, seq, cfg.d_model)), loads

    def update_router_bias(self, layer: int, loads: np.ndarray, rate: float | None = None) -> None:
        """Push bias against the load imbalance: b -= rate * sign(load - mean)."""
        rate = self.cfg.moe.bias_update_rate if rate is None else rate
        if rate <= 0:
            raise ConfigError("bias update rate must be positive")
        loads = np.asarray(loads, dtype=np.float64)
        self.router_bias[layer] = self.router_bias[layer] - rate * np.sign(loads - loads.mean())

    # -- full forward ----------------------------------------------------------

    def _norm(self, h: Tensor, gain_name: str) -> Tensor:
        return ad.mul(ad.rmsnorm(h, self.cfg.rms_eps), self.params[gain_name])

    def forward(self, items: np.ndarray, kv: SharedKVSet) -> DecoderTrace:
        """Run the decoder on (batch, 3) semantic-index arrays against shared KV sets."""
        cfg = self.cfg
        items = np.asarray(items)
        if items.ndim == 1:
            items = items[None]
        h = self.embed_targets(items)
        hidden = [h]
        expert_loads: dict[int, np.ndarray] = {}
        for layer in range(cfg.n_layers):
            p = f"block{layer}"
            pair = kv.pairs[kv_layer_index(layer, cfg)]
            h = ad.add(h, self.lazy_cross_attention(self._norm(h, f"{p}.norm_cross"), pair, layer))
            h = ad.add(h, self.causal_self_attention(self._norm(h, f"{p}.norm_self"), layer))
            ffn_in = self._norm(h, f"{p}.norm_ffn")
            if self._is_moe_layer(layer):
                y, loads = self.moe_ffn(ffn_in, layer)
                expert_loads[layer] = loads
            else:
                y = self.ffn(ffn_in, layer)
            h = ad.add(h, y)
            hidden.append(h)

        logits_per_pos = []
        for pos in range(3):
            hp = ad.slice_(h, (slice(None), slice(pos, pos + 1), slice(None)))
            hp = self._norm(hp, f"head{pos}.norm")
            logits_per_pos.append(ad.matmul(hp, self.params[f"head{pos}.w"]))
        logits = ad.concat(logits_per_pos, axis=1)  # (B, 3, V)
        probs = ad.softmax(logits, axis=-1)
        return DecoderTrace(hidden=hidden, logits=logits, probs=probs, expert_loads=expert_loads)

    def gen_loss(self, trace: DecoderTrace, items: np.ndarray) -> Tensor:
        """Mean negative log-likelihood over the three semantic tokens (and batch)."""
        items = np.asarray(items)
        if items.ndim == 1:
            items = items[None]
        nll = ad.cross_entropy(trace.logits, items)  # (B, 3)
        return ad.reduce_mean(nll)

    # -- generation -------------------------------------------------------------

    def beam_generate(self, kv: SharedKVSet, beam: int) -> list[tuple[SemanticItem, float]]:
        """Beam search over the three-token space for a single user's KV set.

        Returns up to `beam` (item, sequence log-prob) pairs ranked by
        descending score; exact ties order lexicographically by (s1, s2, s3).
        """
        cfg = self.cfg
        if beam < 1:
            raise ConfigError("beam width must be >= 1")
        beam = min(beam, cfg.vocab ** 3)
        if kv.pairs[0][0].value.shape[0] != 1:
            raise ConfigError("beam_generate expects a single-user KV set (batch 1)")

        def logprobs(items: np.ndarray, position: int) -> np.ndarray:
            reps = items.shape[0]
            wide = SharedKVSet(
                [
                    (
                        Tensor(np.repeat(k.value, reps, axis=0)),
                        Tensor(np.repeat(v.value, reps, axis=0)) if v is not k else None,
                    )
                    for k, v in kv.pairs
                ]
            )
            wide.pairs = [(k, k if v is None else v) for k, v in wide.pairs]
            trace = self.forward(items, wide)
            p = trace.probs.value[:, position, :]
            return np.log(p)

        def top(cands: np.ndarray, scores: np.ndarray, width: int) -> np.ndarray:
            # Sort by score descending, ties lexicographic on the token triple.
            keys = (cands[:, 2], cands[:, 1], cands[:, 0], -scores)
            order = np.lexsort(keys)
            return order[:width]

        # Position 0: s1 candidates (inputs beyond BOS are ignored by causality).
        lp0 = logprobs(np.zeros((1, 3), dtype=np.int64), 0)[0]
        cands = np.zeros((cfg.vocab, 3), dtype=np.int64)
        cands[:, 0] = np.arange(cfg.vocab)
        scores = lp0.copy()
        keep = top(cands, scores, min(beam, cfg.vocab))
        cands, scores = cands[keep], scores[keep]

        # Position 1: expand s2 for each surviving s1.
        lp1 = logprobs(cands, 1)  # (n, V)
        n = cands.shape[0]
        exp_cands = np.repeat(cands, cfg.vocab, axis=0)
        exp_cands[:, 1] = np.tile(np.arange(cfg.vocab), n)
        exp_scores = (scores[:, None] + lp1).ravel()
        keep = top(exp_cands, exp_scores, min(beam, cfg.vocab ** 2))
        cands, scores = exp_cands[keep], exp_scores[keep]

        # Position 2: expand s3 and rank the final beam.
        lp2 = logprobs(cands, 2)
        n = cands.shape[0]
        exp_cands = np.repeat(cands, cfg.vocab, axis=0)
        exp_cands[:, 2] = np.tile(np.arange(cfg.vocab), n)
        exp_scores = (scores[:, None] + lp2).ravel()
        keep = top(exp_cands, exp_scores, beam)
        cands, scores = exp_cands[keep], exp_scores[keep]

        return [
            (SemanticItem(int(c[0]), int(c[1]), int(c[2])), float(s))
            for c, s in zip(cands, scores)
        ]

    # -- checkpointing ------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write parameters (little-endian float64) plus config to an .npz container."""
        arrays = {name: p.value.astype("<f8") for name, p in self.params.items()}
        for layer, bias in self.router_bias.items():
            arrays[f"state.router_bias.block{layer}"] = bias.astype("<f8")
        np.savez(path, __config__=np.str_(self.cfg.to_json()), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "LazyDecoder":
        with np.load(path, allow_pickle=False) as data:
            cfg = ModelConfig.from_json(str(data["__config__"]))
            model = cls(cfg, seed=0)
            for name in model.params:
                if name not in data:
                    raise ConfigError(f"checkpoint missing parameter {name!r}")
                arr = np.ascontiguousarray(data[name], dtype=np.float64)
                if arr.shape != model.params[name].value.shape:
                    raise ConfigError(
                        f"checkpoint parameter {name!r} has shape {arr.shape}, "
                        f"expected {model.params[name].value.shape}"
                    )
                model.params[name] = Tensor(arr)
            for layer in model.router_bias:
                key = f"state.router_bias.block{layer}"
                if key in data:
                    model.router_bias[layer] = np.asarray(data[key], dtype=np.float64)
        return model


class AdamW:
    """Decoupled weight-decay Adam; decay skips 1-d parameters (norm gains)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            if self.weight_decay and p.value.ndim >= 2:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def grad_global_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def count_params(cfg: ModelConfig) -> int:
    """Parameter count for a config without allocating the model's arrays."""
    c = cfg
    c.validate()
    n = (2 * c.vocab + 1) * c.embed_dim + 3 * c.d_model
    if c.embed_dim != c.d_model:
        n += c.embed_dim * c.d_model
    n += c.context_len * c.d_context
    chunk = c.g_kv * c.d_head
    n += c.l_kv * chunk * (2 if c.s_kv == 2 else 1)
    for layer in range(c.n_layers):
        n += 3 * c.d_model  # the three pre-norms
        n += 2 * c.d_model * c.d_attn  # cross q + o
        n += 4 * c.d_model * c.d_attn  # self q/k/v/o
        if c.moe is not None and layer >= c.moe.first_dense_layers:
            per_expert = 3 * c.d_model * c.moe.moe_intermediate
            n += c.d_model * c.moe.n_routed
            n += (c.moe.n_routed + c.moe.n_shared) * per_expert
        else:
            n += 3 * c.d_model * c.ffn_intermediate
    n += 3 * (c.d_model + c.d_model * c.vocab)
    return n
