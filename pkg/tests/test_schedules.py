import numpy as np
import pytest

from randcp import grid as gridmod
from randcp.als import AlsConfig, run_als
from randcp.linalg import FactorBlocks, gram, hadamard_gram_chain, pseudo_inverse
from randcp.matricization import matricize, partition_to_grid
from randcp.mttkrp import mttkrp_exact
from randcp.samplers import sample_weights, sts_build, sts_sample
from randcp.schedules import (ScheduleError, SolveContext, refresh_gathered,
                              solve_mode_accumulator_stationary,
                              solve_mode_tensor_stationary)
from conftest import make_sparse, unit_factors


def make_ctx(t, grid, schedule, sampler, factors, J=0, ledger=None):
    blocks = [FactorBlocks.from_global(U, grid, j) for j, U in enumerate(factors)]
    grams = [gram(b) for b in blocks]
    part = partition_to_grid(t, grid, schedule)
    ctx = SolveContext(grid, schedule, sampler, J, blocks, grams, part,
                       ledger if ledger is not None else gridmod.CommLedger(),
                       seed=0)
    if sampler == "sts":
        ctx.trees = [sts_build(b, grid=grid) for b in blocks]
    return ctx


def injected_sts_batch(t, grid, factors, k, J, seed):
    blocks = [FactorBlocks.from_global(U, grid, j) for j, U in enumerate(factors)]
    grams = [gram(b) for b in blocks]
    trees = [sts_build(b, grid=grid) for b in blocks]
    cp = pseudo_inverse(hadamard_gram_chain(grams, skip=k))
    batch = sts_sample(trees, k, J, cp, grams, blocks, seed=seed, grid=grid)
    sample_weights(batch)
    return batch


class TestTensorStationaryExact:
    def test_p1_equals_serial_normal_equations(self):
        t = make_sparse((6, 6, 6), 80, seed=0)
        factors = unit_factors(t.dims, 3, seed=1)
        g = gridmod.ProcessorGrid(t.dims, (1, 1, 1))
        ctx = make_ctx(t, g, "tensor-stationary", "exact", factors)
        refresh_gathered(ctx, 1)
        refresh_gathered(ctx, 2)
        solve_mode_tensor_stationary(ctx, 0)
        ref = mttkrp_exact(matricize(t, 0), factors) @ pseudo_inverse(
            hadamard_gram_chain([gram(U) for U in factors], skip=0))
        assert np.abs(ctx.factors[0].assemble() - ref).max() < 1e-12

    def test_p4_equals_p1(self):
        t = make_sparse((6, 6, 6), 100, seed=2)
        factors = unit_factors(t.dims, 3, seed=3)
        results = {}
        for gd in ((1, 1, 1), (2, 2, 1)):
            g = gridmod.ProcessorGrid(t.dims, gd)
            ctx = make_ctx(t, g, "tensor-stationary", "exact", factors)
            for j in range(3):
                refresh_gathered(ctx, j)
            solve_mode_tensor_stationary(ctx, 1)
            results[gd] = ctx.factors[1].assemble()
        assert np.abs(results[(1, 1, 1)] - results[(2, 2, 1)]).max() < 1e-10

    def test_sampled_reduction_matches_exact_reduction(self):
        # sampling does not shrink the reduce-scatter: same accumulator shape
        t = make_sparse((8, 7, 6), 120, seed=4)
        factors = unit_factors(t.dims, 2, seed=5)
        g = gridmod.ProcessorGrid(t.dims, (2, 2, 1))
        led_e = gridmod.CommLedger()
        ctx = make_ctx(t, g, "tensor-stationary", "exact", factors, ledger=led_e)
        for j in range(3):
            refresh_gathered(ctx, j)
        solve_mode_tensor_stationary(ctx, 0)
        led_s = gridmod.CommLedger()
        ctx_s = make_ctx(t, g, "tensor-stationary", "sts", factors, J=32, ledger=led_s)
        batch = injected_sts_batch(t, g, factors, 0, 32, seed=6)
        solve_mode_tensor_stationary(ctx_s, 0, injected_batch=batch)
        assert (led_e.words(kind=gridmod.REDUCE_SCATTER)
                == led_s.words(kind=gridmod.REDUCE_SCATTER) > 0)


class TestScheduleEquivalence:
    @pytest.mark.parametrize("gdims", [(1, 1, 1), (2, 2, 1), (2, 2, 2)])
    def test_same_batch_same_update(self, gdims):
        t = make_sparse((8, 7, 6), 150, seed=7)
        factors = unit_factors(t.dims, 3, seed=8)
        g = gridmod.ProcessorGrid(t.dims, gdims)
        for k in range(3):
            batch = injected_sts_batch(t, g, factors, k, 64, seed=9 + k)
            ctx_t = make_ctx(t, g, "tensor-stationary", "sts", factors, J=64)
            ctx_a = make_ctx(t, g, "accumulator-stationary", "sts", factors, J=64)
            solve_mode_tensor_stationary(ctx_t, k, injected_batch=batch)
            solve_mode_accumulator_stationary(ctx_a, k, injected_batch=batch)
            diff = np.abs(ctx_t.factors[k].assemble() - ctx_a.factors[k].assemble()).max()
            assert diff < 1e-12

    def test_p1_bit_exact(self):
        t = make_sparse((6, 6, 6), 90, seed=10)
        factors = unit_factors(t.dims, 2, seed=11)
        g = gridmod.ProcessorGrid(t.dims, (1, 1, 1))
        batch = injected_sts_batch(t, g, factors, 2, 48, seed=12)
        ctx_t = make_ctx(t, g, "tensor-stationary", "sts", factors, J=48)
        ctx_a = make_ctx(t, g, "accumulator-stationary", "sts", factors, J=48)
        solve_mode_tensor_stationary(ctx_t, 2, injected_batch=batch)
        solve_mode_accumulator_stationary(ctx_a, 2, injected_batch=batch)
        assert np.array_equal(ctx_t.factors[2].assemble(), ctx_a.factors[2].assemble())


class TestAccumulatorStationary:
    def test_rejects_exact_solves(self):
        t = make_sparse((6, 6, 6), 50, seed=13)
        factors = unit_factors(t.dims, 2, seed=14)
        g = gridmod.ProcessorGrid(t.dims, (2, 1, 1))
        ctx = make_ctx(t, g, "accumulator-stationary", "exact", factors)
        with pytest.raises(ScheduleError):
            solve_mode_accumulator_stationary(ctx, 0)
        with pytest.raises(ValueError):
            AlsConfig(rank=2, rounds=1, sampler="exact",
                      schedule="accumulator-stationary").validate()

    def test_zero_reduce_scatter_words(self):
        t = make_sparse((8, 7, 6), 120, seed=15)
        cfg = AlsConfig(rank=2, rounds=2, sampler="sts", samples=64,
                        schedule="accumulator-stationary", procs=4, seed=3,
                        permute=False, compute_fits=False)
        res = run_als(cfg, tensor=t)
        assert res.ledger.words(kind=gridmod.REDUCE_SCATTER) == 0

    def test_gather_words_double_with_j(self):
        t = make_sparse((8, 7, 6), 120, seed=16)
        words = {}
        for J in (64, 128):
            cfg = AlsConfig(rank=2, rounds=2, sampler="sts", samples=J,
                            schedule="accumulator-stationary", procs=4, seed=3,
                            permute=False, compute_fits=False)
            res = run_als(cfg, tensor=t)
            words[J] = res.ledger.words(kind=gridmod.ALLGATHER, round_id=1)
            pred = 3 * gridmod.as_gather_words_total_per_solve(J, 2, 3, 4, "sts")
            assert words[J] == pred
        assert words[128] == 2 * words[64]

    def test_mismatched_partition_rejected(self):
        t = make_sparse((6, 6, 6), 50, seed=17)
        factors = unit_factors(t.dims, 2, seed=18)
        g = gridmod.ProcessorGrid(t.dims, (2, 1, 1))
        ctx = make_ctx(t, g, "tensor-stationary", "sts", factors, J=16)
        batch = injected_sts_batch(t, g, factors, 0, 16, seed=19)
        with pytest.raises(ScheduleError):
            solve_mode_accumulator_stationary(ctx, 0, injected_batch=batch)


class TestSingleRank:
    @pytest.mark.parametrize("sampler,sched", [
        ("exact", "tensor-stationary"),
        ("sts", "accumulator-stationary"),
        ("arls-lev", "accumulator-stationary"),
    ])
    def test_p1_moves_no_words(self, sampler, sched):
        t = make_sparse((8, 7, 6), 100, seed=30)
        cfg = AlsConfig(rank=2, rounds=2, sampler=sampler, samples=64,
                        schedule=sched, procs=1, seed=1, fit_every=2, permute=False)
        res = run_als(cfg, tensor=t)
        assert res.ledger.words() == 0 and res.ledger.messages() == 0


class TestExactRoundCost:
    def test_round_words_match_closed_form(self):
        t = make_sparse((12, 10, 8), 250, seed=20)
        for P in (4, 8):
            cfg = AlsConfig(rank=3, rounds=3, sampler="exact",
                            schedule="tensor-stationary", procs=P, seed=4,
                            permute=False, compute_fits=False)
            res = run_als(cfg, tensor=t)
            g = gridmod.optimal_grid(t.dims, P)
            pred = gridmod.ts_exact_round_words_total(g, 3)
            for rnd in (1, 2, 3):
                meas = (res.ledger.words(kind=gridmod.ALLGATHER, round_id=rnd)
                        + res.ledger.words(kind=gridmod.REDUCE_SCATTER, round_id=rnd))
                assert meas == pred
