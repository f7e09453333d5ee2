import numpy as np
import pytest

from causal_sp.collectives import CommStats, CommWorld
from causal_sp.errors import PartitionError
from causal_sp.kv_cache import KvCache
from causal_sp.rope import GridSpec, precompute_frequencies
from causal_sp.sp_attention import (
    STAGES,
    Ablation,
    AttentionLayerParams,
    CallProfile,
    PipelineVariant,
    StageTimer,
    VariantKind,
    baseline_sp_self_attention,
    optimized_sp_self_attention,
    profile_call,
    reference_self_attention,
    sp_self_attention,
)

from conftest import naive_attention

GRID = GridSpec(2, 2, 2)
H, D = 4, 8


def _table(frames=16, grid=GRID, head_dim=D):
    return precompute_frequencies(frames, grid.height, grid.width, head_dim)


def _params(seed=0, heads=H, head_dim=D):
    return AttentionLayerParams.random(heads, head_dim, np.random.default_rng(seed))


def _inputs(blocks, grid=GRID, seed=1, heads=H, head_dim=D):
    g = np.random.default_rng(seed)
    return [g.standard_normal((1, grid.seq_len, heads, head_dim)) for _ in range(blocks)]


def _reference(xs, params, grid=GRID, table=None):
    table = table or _table(grid=grid)
    cache = KvCache(grid.tokens_per_frame)
    return [reference_self_attention(x, params, grid, table, k * grid.frames, cache, k) for k, x in enumerate(xs)]


def _sp(xs, params, p, ablation, grid=GRID, table=None):
    table = table or _table(grid=grid)
    world = CommWorld(p)
    n = grid.seq_len // p

    def fn(comm):
        cache = KvCache(grid.tokens_per_frame)
        outs = []
        for k, x in enumerate(xs):
            local = x[:, comm.rank * n:(comm.rank + 1) * n]
            outs.append(sp_self_attention(comm, local, params, grid, table, k * grid.frames, cache, ablation, k))
        return outs

    per_rank = world.run(fn)
    return [np.concatenate([r[k] for r in per_rank], axis=1) for k in range(len(xs))], world.stats


class TestReference:
    def test_zero_weights_give_zero(self):
        x = _inputs(1)[0]
        out = _reference([x], AttentionLayerParams.zeros(H, D))[0]
        assert not out.any()

    def test_single_token_returns_value_row(self):
        grid = GridSpec(1, 1, 1)
        x = np.random.default_rng(3).standard_normal((1, 1, 2, 4))
        params = AttentionLayerParams.identity(2, 4)
        out = reference_self_attention(x, params, grid, _table(grid=grid, head_dim=4), 0, KvCache(1))
        np.testing.assert_array_equal(out, x)

    def test_matches_naive_composition(self):
        """Project, rotate (via the table path), attend naively, project again."""
        xs = _inputs(2)
        params = _params()
        table = _table()
        outs = _reference(xs, params, table=table)
        from causal_sp.rope import apply_rope_global
        from causal_sp.sp_attention import project
        ks, vs = [], []
        for k, x in enumerate(xs):
            q = apply_rope_global(project(x, params.w_q), GRID, table, 2 * k)
            ks.append(apply_rope_global(project(x, params.w_k), GRID, table, 2 * k))
            vs.append(project(x, params.w_v))
            o = naive_attention(q, np.concatenate(ks, 1), np.concatenate(vs, 1))
            np.testing.assert_allclose(outs[k], project(o, params.w_o), rtol=0, atol=1e-12)

    def test_baseline_at_one_rank_is_bit_identical(self):
        xs = _inputs(3)
        params = _params()
        ref = _reference(xs, params)
        base, _ = _sp(xs, params, 1, Ablation())
        for a, b in zip(ref, base):
            assert a.tobytes() == b.tobytes()


class TestEquivalence:
    @pytest.mark.parametrize("p", [1, 2, 4, 8])
    @pytest.mark.parametrize("ablation", [Ablation(), Ablation.all_on()], ids=["baseline", "optimized"])
    def test_matches_reference_over_blocks(self, p, ablation):
        grid = GridSpec(2, 2, 4)
        heads = 8
        xs = _inputs(3, grid=grid, heads=heads)
        params = _params(heads=heads)
        ref = _reference(xs, params, grid=grid)
        got, _ = _sp(xs, params, p, ablation, grid=grid)
        for a, b in zip(ref, got):
            assert np.max(np.abs(a - b)) <= 1e-10

    @pytest.mark.parametrize("ablation", Ablation.lattice(), ids=lambda a: a.label())
    def test_ablation_lattice(self, ablation):
        xs = _inputs(3)
        params = _params()
        ref = _reference(xs, params)
        got, stats = _sp(xs, params, 2, ablation)
        for a, b in zip(ref, got):
            assert np.max(np.abs(a - b)) <= 1e-10
        n = len(xs)
        if ablation.use_fused_all_to_all:
            assert stats.signature() == {"ag": 0, "a2a": n, "fused": n}
        else:
            assert stats.signature() == {"ag": 3 * n, "a2a": n, "fused": 0}

    def test_wrappers_select_schedules(self):
        x = _inputs(1)[0]
        params, table = _params(), _table()
        world = CommWorld(2)

        def fn(comm):
            local = x[:, comm.rank * 4:(comm.rank + 1) * 4]
            a = baseline_sp_self_attention(comm, local, params, GRID, table, 0, KvCache(4))
            b = optimized_sp_self_attention(comm, local, params, GRID, table, 0, KvCache(4))
            return a, b

        outs = world.run(fn)
        assert world.stats.signature() == {"ag": 3, "a2a": 2, "fused": 1}
        for a, b in outs:
            assert np.max(np.abs(a - b)) <= 1e-10

    def test_causality_prefix_unchanged(self):
        xs = _inputs(3)
        params = _params()
        first, _ = _sp(xs, params, 2, Ablation.all_on())
        perturbed = xs[:2] + [xs[2] + 1.0]
        second, _ = _sp(perturbed, params, 2, Ablation.all_on())
        for k in range(2):
            assert first[k].tobytes() == second[k].tobytes()
        assert not np.array_equal(first[2], second[2])


class TestLedger:
    def test_per_call_counts(self):
        xs = _inputs(1)
        params = _params()
        _, base = _sp(xs, params, 2, Ablation())
        _, opt = _sp(xs, params, 2, Ablation.all_on())
        assert (base.all_gather, base.all_to_all, base.fused_all_to_all) == (3, 1, 0)
        assert (opt.all_gather, opt.all_to_all, opt.fused_all_to_all) == (0, 1, 1)

    def test_gather_stage_ratio_worked_example(self):
        grid = GridSpec(2, 2, 2)
        x = np.random.default_rng(0).standard_normal((1, 8, 4, 4))
        params, table = _params(heads=4, head_dim=4), _table(grid=grid, head_dim=4)
        base = profile_call(PipelineVariant.baseline(), x, params, grid, table, world_size=2)
        opt = profile_call(PipelineVariant.optimized(), x, params, grid, table, world_size=2)
        assert base.stage_ledger["gather_or_fused"].elements_sent == 384
        assert opt.stage_ledger["gather_or_fused"].elements_sent == 192

    @pytest.mark.parametrize("p", [2, 4, 8])
    def test_gather_stage_ratio_is_world_size(self, p):
        grid = GridSpec(2, 2, 4)
        x = np.random.default_rng(p).standard_normal((1, grid.seq_len, 8, 4))
        params, table = _params(heads=8, head_dim=4), _table(grid=grid, head_dim=4)
        base = profile_call(PipelineVariant.baseline(), x, params, grid, table, world_size=p)
        opt = profile_call(PipelineVariant.optimized(), x, params, grid, table, world_size=p)
        assert base.stage_ledger["gather_or_fused"].elements_sent == p * opt.stage_ledger["gather_or_fused"].elements_sent


class TestProfile:
    def _profile(self, variant, p=2, **kw):
        x = _inputs(1)[0]
        return profile_call(variant, x, _params(), GRID, _table(), world_size=p, **kw)

    def test_stage_labels(self):
        for v in (PipelineVariant.baseline(), PipelineVariant.optimized()):
            assert set(self._profile(v).stage_order) == set(STAGES)

    def test_rope_ordering(self):
        base = self._profile(PipelineVariant.baseline()).stage_order
        opt = self._profile(PipelineVariant.optimized()).stage_order
        assert base.index("rope") > base.index("gather_or_fused")
        assert opt.index("rope") < opt.index("gather_or_fused")

    def test_local_rope_stage_has_no_collectives(self):
        prof = self._profile(PipelineVariant.optimized())
        assert prof.stage_ledger["rope"].collectives == 0
        assert prof.stage_ledger["rope"].elements_sent == 0

    def test_stage_times_sum_to_total(self):
        prof = self._profile(PipelineVariant.baseline())
        assert sum(prof.stage_times_us.values()) == pytest.approx(prof.total_us, abs=1e-3)

    def test_stage_ledgers_sum_to_call_ledger(self):
        prof = self._profile(PipelineVariant.baseline(), p=4)
        total = CommStats()
        for s in prof.stage_ledger.values():
            total = total + s
        assert total == prof.ledger_delta

    def test_reference_profile_has_no_traffic(self):
        prof = self._profile(PipelineVariant.reference(), p=1)
        assert prof.ledger_delta == CommStats()

    def test_dynamic_frequencies_count_work(self):
        dyn = self._profile(PipelineVariant.optimized(Ablation(True, True, False)))
        pre = self._profile(PipelineVariant.optimized())
        assert dyn.rope_angle_evaluations > 0
        assert pre.rope_angle_evaluations == 0

    def test_fused_qkv_rope_merge_is_bookkeeping_only(self):
        plain = self._profile(PipelineVariant.optimized())
        merged = self._profile(PipelineVariant.optimized(), fuse_qkv_rope=True)
        assert merged.stage_order[0] == "qkv_rope"
        assert merged.stage_order[1:] == plain.stage_order[2:]
        # baseline has no adjacent qkv/rope pair to merge
        assert "qkv_rope" not in self._profile(PipelineVariant.baseline(), fuse_qkv_rope=True).stage_order

    def test_json_round_trip(self):
        prof = self._profile(PipelineVariant.optimized())
        d = prof.to_json()
        assert {"stage_times_us", "ledger_delta", "variant", "ablation"} <= set(d)
        assert CallProfile.from_json(d).to_json() == d

    def test_timer_accumulates_repeated_stage(self):
        t = StageTimer()
        for s in ("a", "b", "a"):
            t.mark(s)
        total = t.finish()
        assert t.order == ["a", "b"]
        assert sum(t.times_ns.values()) == total


class TestVariant:
    def test_defaults(self):
        assert PipelineVariant.optimized().ablation == Ablation.all_on()
        assert PipelineVariant.baseline().ablation == Ablation()

    def test_non_optimized_rejects_flags(self):
        with pytest.raises(ValueError):
            PipelineVariant(VariantKind.BASELINE, Ablation.all_on())

    def test_json_round_trip(self):
        v = PipelineVariant.optimized(Ablation(True, False, True))
        assert PipelineVariant.from_json(v.to_json()) == v

    def test_lattice(self):
        lat = Ablation.lattice()
        assert len(set(lat)) == 8
        assert lat[0] == Ablation() and lat[-1] == Ablation.all_on()
        assert Ablation().label() == "none"


class TestPartition:
    def test_heads_not_divisible(self):
        x = _inputs(1, heads=3)[0]
        params = _params(heads=3)
        with pytest.raises(PartitionError):
            _sp([x], params, 2, Ablation(), table=_table())

    def test_local_length_mismatch(self):
        params, table = _params(), _table()

        def fn(comm):
            return sp_self_attention(comm, np.zeros((1, 3, H, D)), params, GRID, table, 0, KvCache(4), Ablation())

        with pytest.raises(PartitionError):
            CommWorld(2).run(fn)
