from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from rlnmc.anneal import Schedule, SuccessCriterion, Trace, init_chain, run_sa
from rlnmc.generate import GeneratorSpec, generate
from rlnmc.nmc import (
    NmcConfig,
    NmcConfigError,
    RandomMaskPolicy,
    ThresholdPolicy,
    budget_split,
    nmc_jump,
    nmc_phase_betas,
    run_nmc,
    threshold_backbone,
)
from rlnmc.problem import energy
from rlnmc.rng import stream

from .helpers import exhaustive_minimum


def instance(n=40, alpha=8.0, seed=0, family="uniform"):
    return generate(GeneratorSpec(n=n, alpha=alpha, family=family, seed=seed))


# ---------------------------------------------------------------------------
# Threshold rule
# ---------------------------------------------------------------------------


def test_threshold_example():
    assert list(threshold_backbone([0.5, 3.2, -4.0], 3)) == [False, True, True]


def test_threshold_zero_selects_nonzero_fields():
    assert list(threshold_backbone([0.0, 0.5, -1.0, 0.0], 0)) == [False, True, True, False]


def test_threshold_is_strict():
    assert list(threshold_backbone([3.0, -3.0, 3.5], 3)) == [False, False, True]


# ---------------------------------------------------------------------------
# Config and budget
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(NmcConfigError):
        NmcConfig(n_sw=1)
    with pytest.raises(NmcConfigError):
        NmcConfig(r=-1)
    with pytest.raises(NmcConfigError):
        nmc_phase_betas(Schedule(2.0, 8.0, 1000), NmcConfig(n_steps=53))


def test_scale_free_budget_split():
    split = budget_split(Schedule(2.0, 8.0, 30_000), NmcConfig(r=4.5, n_cycles=3, n_sw=100, n_steps=53))
    assert split["nmc_sweeps"] == 15_900
    assert split["total_sweeps"] == 30_000
    assert abs(split["sa_fraction"] - 0.5) < 0.05


def test_uniform_budget_split():
    split = budget_split(Schedule(3.0, 8.0, 50_000), NmcConfig(r=3, n_cycles=3, n_sw=200, n_steps=50))
    assert split["nmc_sweeps"] == 30_000
    assert split["sa_fraction"] == pytest.approx(0.4)
    assert split["nmc_fraction"] == pytest.approx(0.6)


def test_phase_betas():
    sa, jumps = nmc_phase_betas(Schedule(2.0, 8.0, 1000), NmcConfig(n_sw=10, n_cycles=2, n_steps=30))
    assert len(sa) == 400 and sa[0] == 2.0 and sa[-1] < 5.0
    assert jumps[0] == 5.0 and jumps[-1] == pytest.approx(8.0 - 0.1)


# ---------------------------------------------------------------------------
# Jump kernel
# ---------------------------------------------------------------------------


def test_empty_mask_jump_equals_plain_sweeps():
    f = instance()
    cfg = NmcConfig(n_cycles=1, n_sw=20)
    a = init_chain(f, 3, 0)
    nmc_jump(a, np.zeros(40, bool), 2.0, cfg, stream(3, 0, "backbone"))
    b = init_chain(f, 3, 0)
    b.sweep([2.0] * 19)
    b.advance(1)
    assert np.array_equal(a.x, b.x) and a.energy == b.energy


def test_full_mask_single_cycle_is_random_restart():
    f = instance()
    cfg = NmcConfig(n_cycles=1, n_sw=2)
    c = init_chain(f, 1, 0)
    c.sweep(np.full(50, 3.0))
    rng = stream(1, 0, "backbone")
    expected = stream(1, 0, "backbone").integers(0, 2, size=40, dtype=np.int8)
    tr = Trace()
    nmc_jump(c, np.ones(40, bool), 3.0, cfg, rng, trace=tr)
    assert np.array_equal(tr.assignments[0], expected)


def test_jump_costs_cycles_times_sweeps_and_returns_best_end_state():
    f = instance(n=60, alpha=9.0, seed=4)
    cfg = NmcConfig(n_cycles=3, n_sw=12)
    c = init_chain(f, 0, 0)
    c.sweep(np.full(100, 4.0))
    before = c.sweeps
    tr = Trace()
    mask = threshold_backbone(c.local_fields(), 1.0)
    _, js = nmc_jump(c, mask, 4.0, cfg, stream(0, 0, "backbone"), trace=tr)
    assert c.sweeps - before == 36
    ends = tr.energies[np.isin(tr.sweeps, before + 12 * np.arange(1, 4))]
    assert len(ends) == 3
    assert c.energy == ends.min()
    assert c.energy == energy(f, c.x)
    assert 0 <= js.distance <= js.backbone_fraction <= 1
    assert js.backbone_fraction == pytest.approx(mask.mean())
    c.check()


def test_jump_fallback_keeps_input_when_no_cycle_improves():
    f = instance(n=60, alpha=9.0, seed=4)
    cfg = NmcConfig(n_cycles=1, n_sw=2, jump_fallback_to_input=True)
    c = init_chain(f, 0, 0)
    c.sweep(np.full(200, 8.0))
    x0, e0 = c.x.copy(), c.energy
    nmc_jump(c, np.ones(60, bool), 0.01, cfg, stream(0, 0, "backbone"))
    assert c.energy <= e0
    if c.energy == e0:
        assert np.array_equal(c.x, x0)


def test_mask_shape_checked():
    f = instance()
    with pytest.raises(NmcConfigError):
        nmc_jump(init_chain(f, 0, 0), np.zeros(3, bool), 1.0, NmcConfig(), stream(0))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def test_empty_masks_identical_to_sa_on_same_beta_sequence():
    f = instance()
    sched = Schedule(1.0, 5.0, 600)
    cfg = NmcConfig(r=math.inf, n_cycles=1, n_sw=20, beta_nmc=3.0, n_steps=10)
    sa_b, jump_b = nmc_phase_betas(sched, cfg)
    betas = np.concatenate([sa_b] + [np.full(cfg.n_sw - 1, b) for b in jump_b])
    recs, _ = run_nmc(f, sched, SuccessCriterion(0), cfg, n_replicas=3, seed=5)
    # the idle backbone stage still costs one MCS, so sweep labels shift by one per jump
    sa_tr = {r: Trace() for r in range(3)}
    nmc_tr = {r: Trace() for r in range(3)}
    run_sa(f, sched, SuccessCriterion(0), 3, 5, betas=betas, traces=sa_tr)
    run_nmc(f, sched, SuccessCriterion(0), cfg, n_replicas=3, seed=5, traces=nmc_tr)
    for r in range(3):
        keep = np.ones(len(nmc_tr[r].sweeps), bool)
        stage = nmc_tr[r].sweeps - len(sa_b)
        keep[1 + len(sa_b):] = (stage[1 + len(sa_b):] - 1) % cfg.n_sw != 0
        assert np.array_equal(nmc_tr[r].energies[keep], sa_tr[r].energies)
        assert np.array_equal(nmc_tr[r].assignments[keep], sa_tr[r].assignments)
        assert recs[r].min_energy == min(sa_tr[r].energies)


def test_infinite_threshold_statistically_matches_sa():
    f = instance(n=50, alpha=8.5, seed=2)
    sched = Schedule(1.0, 6.0, 1500)
    cfg = NmcConfig(r=math.inf, n_cycles=3, n_sw=20, beta_nmc=3.5, n_steps=20)
    nmc = [r.min_energy for r in run_nmc(f, sched, None, cfg, n_replicas=40, seed=1)[0]]
    sa = [r.min_energy for r in run_sa(f, sched, None, 40, seed=2)]
    assert stats.mannwhitneyu(nmc, sa).pvalue > 0.001


def test_run_nmc_totals_and_deterministic():
    f = instance(n=30, alpha=8.0, seed=6)
    sched = Schedule(2.0, 8.0, 900)
    cfg = NmcConfig(r=1.0, n_cycles=2, n_sw=10, n_steps=20)
    a, sa_stats = run_nmc(f, sched, SuccessCriterion(0), cfg, n_replicas=4, seed=3)
    b, sb_stats = run_nmc(f, sched, SuccessCriterion(0), cfg, n_replicas=4, seed=3, replicas=[3, 1, 2, 0])
    assert all(r.total_mcs == 900 for r in a)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert [s.to_dict() for s in sa_stats] == [s.to_dict() for s in sb_stats]
    assert len(sa_stats) == 4 * 20


def test_nmc_never_beats_exhaustive_optimum_n20():
    for seed in range(3):
        f = generate(GeneratorSpec(n=20, k=4, m=197, seed=seed))
        opt = exhaustive_minimum(f)
        cfg = NmcConfig(r=2.0, n_cycles=3, n_sw=10, n_steps=20)
        recs, _ = run_nmc(f, Schedule(2.0, 8.0, 1000), None, cfg, n_replicas=6, seed=seed)
        assert all(r.min_energy >= opt for r in recs)
        assert any(r.min_energy == opt for r in recs)
        assert all(energy(f, r.best_assignment) == r.min_energy for r in recs)


def test_random_mask_policy_fraction():
    f = instance(n=200, alpha=4.0)
    pol = RandomMaskPolicy(0.3)
    pol.reset(f, [0, 1], 0)
    chains = [init_chain(f, 0, r) for r in range(2)]
    masks = pol.masks(0, chains, 5.0)
    assert abs(np.mean(masks) - 0.3) < 0.06


def test_threshold_policy_uses_current_fields():
    f = instance(n=30)
    c = init_chain(f, 0, 0)
    (m,) = ThresholdPolicy(1.0).masks(0, [c], 5.0)
    assert np.array_equal(m, np.abs(c.local_fields()) > 1.0)
