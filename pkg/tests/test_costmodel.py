"""Cost-model checks against the published comparison cells and invariants."""

import numpy as np
import pytest

from lazyrec.costmodel import (
    ArchSpec,
    attention_score_flops,
    build_rows,
    emit_report,
    exact_model_cost,
    flops_enc_dec,
    flops_for,
    flops_lazy,
    flops_naive_dec,
    reference_specs,
)
from lazyrec.model import ModelConfig, MoEConfig


def _ulp_close(value, displayed, unit):
    """Within one unit of the displayed last digit (the table's own precision)."""
    return abs(value - displayed) < unit


REFERENCE_CELLS = {
    # context_len -> kind -> (total, context, target, proportion %)
    (512, "enc_dec"): (346, 338, 8.1, 2.34),
    (3000, "enc_dec"): (1988, 1980, 8.1, 0.41),
    (512, "naive_dec"): (632, 614, 18, 2.85),
    (3000, "naive_dec"): (3618, 3600, 18, 0.49),
}


class TestReferenceTable:
    @pytest.mark.parametrize("n", [512, 3000])
    def test_all_cells(self, n):
        for spec in reference_specs(context_len=n):
            r = flops_for(spec)
            if spec.kind == "lazy_dec":
                assert _ulp_close(r.total_gflops, 18, 1)
                assert r.target_proportion > 0.995
                continue
            total, context, target, prop = REFERENCE_CELLS[(n, spec.kind)]
            assert _ulp_close(r.total_gflops, total, 1)
            assert _ulp_close(r.context_encoding_gflops, context, 1)
            assert _ulp_close(r.target_decoding_gflops, target, 0.1)
            assert _ulp_close(100 * r.target_proportion, prop, 0.01)

    def test_lazy_total_constant_in_context_length(self):
        totals = {
            n: flops_lazy(
                ArchSpec(kind="lazy_dec", dec_params=1e9, context_len=n, compression=5)
            ).total_gflops
            for n in (0, 512, 3000, 10 ** 6)
        }
        assert len(set(totals.values())) == 1

    def test_degenerate_zero_context(self):
        r = flops_enc_dec(
            ArchSpec(kind="enc_dec", enc_params=0.5e9, dec_params=0.5e9, context_len=0, compression=5)
        )
        assert r.total_gflops == pytest.approx(8.1)
        assert r.target_proportion == pytest.approx(8.1 / 8.1)

    def test_zero_params_proportion_is_one(self):
        r = flops_naive_dec(ArchSpec(kind="naive_dec", dec_params=0.0, context_len=512))
        assert r.total_gflops == 0.0 and r.target_proportion == 1.0

    def test_affine_slopes(self):
        def total(kind, n):
            return flops_for(
                [s for s in reference_specs(context_len=n) if s.kind == kind][0]
            ).total_gflops

        slope_ed = (total("enc_dec", 3000) - total("enc_dec", 512)) / (3000 - 512)
        slope_nd = (total("naive_dec", 3000) - total("naive_dec", 512)) / (3000 - 512)
        assert slope_ed == pytest.approx(0.66)
        assert slope_nd == pytest.approx(1.2)

    def test_proportion_ordering(self):
        for n in (64, 512, 3000, 10 ** 5):
            specs = reference_specs(context_len=n)
            props = {s.kind: flops_for(s).target_proportion for s in specs}
            assert props["lazy_dec"] >= props["naive_dec"] >= props["enc_dec"]

    def test_lazy_kind_forces_zero_kv_fraction(self):
        s = ArchSpec(kind="lazy_dec", dec_params=1e9, cross_kv_fraction=0.3)
        assert s.cross_kv_fraction == 0.0

    def test_kind_mismatch_and_validation(self):
        with pytest.raises(ValueError):
            flops_enc_dec(ArchSpec(kind="naive_dec", dec_params=1.0))
        with pytest.raises(ValueError):
            ArchSpec(kind="tower")
        with pytest.raises(ValueError):
            ArchSpec(kind="enc_dec", compression=0.5)


class TestAttentionScoreCoefficients:
    def test_published_coefficients(self):
        spec = ArchSpec(
            kind="enc_dec", enc_params=0.5e9, dec_params=0.5e9,
            n_layers=9, d_model=1792, context_len=512, compression=5,
        )
        enc, dec = attention_score_flops(spec)
        # per-N^2 (compressed) and per-N coefficients in KFLOPs
        assert enc / 512 ** 2 / 1e3 == pytest.approx(3.87, abs=0.01)
        assert dec / 512 / 1e3 == pytest.approx(290.304)

    def test_scores_are_orders_below_projection_cost(self):
        spec = reference_specs(context_len=512)[0]
        enc, _ = attention_score_flops(spec)
        assert enc / 1e9 == pytest.approx(1.01, abs=0.01)
        assert enc / 1e9 < 0.01 * flops_enc_dec(spec).context_encoding_gflops


REFERENCE_1B = dict(
    d_model=1792, n_layers=18, n_heads=14, vocab=8192, context_len=512
)


class TestExactModelCost:
    def test_kv_memory_reproduces_gqa_ablation(self):
        # batch 512, 5-way context compression: 94M / 47M / 13M / 7M elements
        expected = {14: 94, 7: 47, 2: 13, 1: 7}
        for g, mm in expected.items():
            cfg = ModelConfig(**REFERENCE_1B, g_kv=g)
            r = exact_model_cost(cfg, batch=512, compression=5.0)
            assert round(r.kv_memory_elems / 1e6) == mm

    def test_kv_memory_linear_in_l_kv_and_s_kv(self):
        base = exact_model_cost(ModelConfig(**REFERENCE_1B), 512, 5.0).kv_memory_elems
        for l in (3, 9, 18):
            cfg = ModelConfig(**REFERENCE_1B, l_kv=l)
            assert exact_model_cost(cfg, 512, 5.0).kv_memory_elems == pytest.approx(l * base)
        cfg = ModelConfig(**REFERENCE_1B, s_kv=2)
        assert exact_model_cost(cfg, 512, 5.0).kv_memory_elems == pytest.approx(2 * base)

    def test_halving_groups_halves_kv(self):
        a = exact_model_cost(ModelConfig(**REFERENCE_1B, g_kv=14), 512, 5.0)
        b = exact_model_cost(ModelConfig(**REFERENCE_1B, g_kv=7), 512, 5.0)
        assert b.kv_memory_elems == pytest.approx(a.kv_memory_elems / 2)

    def test_batch_linearity(self):
        cfg = ModelConfig(**REFERENCE_1B)
        one = exact_model_cost(cfg, batch=1, compression=5.0)
        big = exact_model_cost(cfg, batch=512, compression=5.0)
        assert big.activation_count == pytest.approx(512 * one.activation_count)
        assert big.kv_memory_elems == pytest.approx(512 * one.kv_memory_elems)
        assert big.total_gflops == one.total_gflops  # per-sample figure

    def test_reference_gflops_regression(self):
        # Frozen output of this counter on the 1B dense row (per sample).
        r = exact_model_cost(ModelConfig(**REFERENCE_1B), batch=512, compression=5.0)
        assert r.total_gflops == pytest.approx(18.99, abs=0.01)

    def test_moe_counts_active_experts_only(self):
        moe = MoEConfig(n_routed=8, n_shared=1, top_k=3, moe_intermediate=64, first_dense_layers=1)
        cfg = ModelConfig(
            d_model=64, n_layers=2, n_heads=4, vocab=64, context_len=8, moe=moe
        )
        dense = ModelConfig(d_model=64, n_layers=2, n_heads=4, vocab=64, context_len=8)
        r_moe = exact_model_cost(cfg, batch=1)
        r_dense = exact_model_cost(dense, batch=1)
        # layer 1 swaps a 3*d*4d dense FFN for router + 4 experts of width 64
        macs_delta = (
            3 * (64 * 8 + 4 * 3 * 64 * 64) - 3 * 3 * 64 * 256
        )
        assert r_moe.total_gflops - r_dense.total_gflops == pytest.approx(
            6 * macs_delta / 1e9
        )

    def test_compression_validation(self):
        with pytest.raises(ValueError):
            exact_model_cost(ModelConfig(**REFERENCE_1B), 1, compression=0.2)

    def test_forward_cost_is_one_third_of_training(self):
        r = exact_model_cost(ModelConfig(**REFERENCE_1B), 1)
        assert r.total_gflops / 3 == pytest.approx(r.total_gflops * (1 / 3))
        # the 6x convention splits as 2 (mac) * 3 (fwd+bwd)
        spec = ArchSpec(kind="lazy_dec", dec_params=1e9)
        assert flops_lazy(spec).total_gflops == pytest.approx(6 * 1e9 * 3 / 1e9)


class TestEmitReport:
    def test_empty_list_is_header_only(self):
        assert emit_report([], fmt="csv").strip().count("\n") == 0
        assert len(emit_report([], fmt="markdown").strip().splitlines()) == 2

    def test_csv_round_trips_numerically(self):
        text = emit_report(reference_specs(512), fmt="csv")
        lines = text.strip().splitlines()
        assert lines[0].startswith("architecture,")
        total = float(lines[1].split(",")[2])
        assert total == flops_for(reference_specs(512)[0]).total_gflops

    def test_markdown_has_one_row_per_spec(self):
        text = emit_report(reference_specs(512) + reference_specs(3000), fmt="markdown")
        assert len(text.strip().splitlines()) == 2 + 6

    def test_rows_builder_and_bad_format(self):
        assert len(build_rows(reference_specs(512))) == 3
        with pytest.raises(ValueError):
            emit_report([], fmt="html")
