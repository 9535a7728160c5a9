import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spheretrain.ema import CheckpointRef, beta, combine, ema_weights, sweep_alpha
from spheretrain.errors import ContractError, ShapeError

mpmath.mp.dps = 40

BETA_1_622 = 0.006707542472169951315170826594  # 0.5 ** 7.22
RATIO_1000_2000 = 0.99639920386672332307670058  # beta(1000) / beta(2000), alpha 6.22


def mp_beta(t, alpha):
    return float((1 - mpmath.mpf(1) / (t + 1)) ** (1 + mpmath.mpf(alpha)))


def ck(step, **arrays):
    return CheckpointRef(step, {k: np.asarray(v, dtype=float) for k, v in arrays.items()})


def test_beta_examples():
    assert beta(0, 0.0) == 0.0 and beta(0, 6.22) == 0.0
    assert beta(1, 0.0) == 0.5
    assert beta(9, 0.0) == pytest.approx(0.9, rel=1e-15)
    assert abs(beta(1, 6.22) - BETA_1_622) <= 1e-15
    with pytest.raises(ContractError):
        beta(-1, 1.0)
    with pytest.raises(ContractError):
        beta(1, -1.0)


@pytest.mark.parametrize("t", [0, 1, 10, 10**6])
@pytest.mark.parametrize("alpha", [0.0, 6.22])
def test_beta_matches_mpmath(t, alpha):
    assert abs(beta(t, alpha) - mp_beta(t, alpha)) <= 1e-12


@given(st.integers(1, 10**6), st.floats(0, 50))
def test_beta_monotone(t, alpha):
    assert beta(t + 1, alpha) > beta(t, alpha)
    assert beta(t, alpha + 0.5) < beta(t, alpha)


def test_single_checkpoint_unchanged(gen):
    a = gen.standard_normal((3, 2))
    out, w = combine([ck(5, w=a)])
    assert np.array_equal(out["w"], a) and w == {5: 1.0}


def test_identical_checkpoints(gen):
    a = gen.standard_normal((4, 4))
    out, w = combine([ck(s, w=a) for s in (10, 20, 40, 80)])
    assert np.abs(out["w"] - a).max() <= 1e-15
    assert abs(sum(w.values()) - 1) <= 1e-12


def test_two_checkpoint_weights():
    _, w = combine([ck(1000, w=[0.0]), ck(2000, w=[1.0])], alpha=6.22)
    assert abs(w[1000] / w[2000] - RATIO_1000_2000) <= 1e-12
    assert abs(w[1000] + w[2000] - 1) <= 1e-12


def test_weights_increase_with_step():
    w = ema_weights([1, 2, 5, 10, 100, 1000], 6.22)
    assert np.all(np.diff(w) > 0)
    assert abs(w.sum() - 1) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(0, 20))
def test_combine_order_invariant_and_linear(seed, alpha):
    g = np.random.default_rng(seed)
    steps = sorted(g.choice(np.arange(1, 10_000), size=5, replace=False).tolist())
    cks = [ck(s, w=g.standard_normal((3, 4))) for s in steps]
    out, _ = combine(cks, alpha)
    perm = g.permutation(5)
    out2, _ = combine([cks[i] for i in perm], alpha)
    assert np.array_equal(out["w"], out2["w"])
    m = g.standard_normal((2, 3))
    mapped, _ = combine([ck(c.step, w=m @ c.params["w"]) for c in cks], alpha)
    np.testing.assert_allclose(mapped["w"], m @ out["w"], rtol=0, atol=1e-12 * max(1, np.abs(mapped["w"]).max()))


def test_sphere_params_reretracted(gen):
    a = gen.standard_normal((3, 5))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = gen.standard_normal((3, 5))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    refs = [CheckpointRef(s, {"w": x}, frozenset({"w"})) for s, x in ((1, a), (2, b))]
    out, _ = combine(refs)
    assert np.abs(np.linalg.norm(out["w"], axis=1) - 1).max() <= 1e-12
    raw, _ = combine(refs, retract=False)
    assert np.abs(np.linalg.norm(raw["w"], axis=1) - 1).max() > 1e-6


def test_combine_errors():
    with pytest.raises(ContractError):
        combine([])
    with pytest.raises(ContractError):
        combine([ck(1, w=[1.0]), ck(1, w=[2.0])])
    with pytest.raises(ShapeError, match="'w'"):
        combine([ck(1, w=[1.0], b=[0.0]), ck(2, w=[1.0, 2.0], b=[0.0])])
    with pytest.raises(ShapeError, match="extra"):
        combine([ck(1, w=[1.0]), ck(2, w=[1.0], extra=[0.0])])


def test_sweep_single_alpha():
    cks = [ck(s, w=[float(s)]) for s in (1, 2, 3)]
    res = sweep_alpha(cks, [6.22], lambda p: float(p["w"][0]))
    assert res.best_alpha == 6.22


def test_sweep_monotone_picks_last():
    cks = [ck(s, w=[float(s)]) for s in (1, 2, 3, 4)]
    grid = [0.0, 1.0, 2.0, 4.0, 8.0]
    # a larger alpha leans on later checkpoints; loss decreasing in w makes it decreasing in alpha
    res = sweep_alpha(cks, grid, lambda p: -float(p["w"][0]))
    assert res.best_alpha == 8.0
    assert all(res.losses[a] > res.losses[b] for a, b in zip(grid, grid[1:]))


def test_sweep_quadratic_matches_brute_force():
    steps = [10, 20, 30, 40, 50]
    values = [0.0, 1.0, 2.0, 3.0, 4.0]
    target = 3.1
    grid = [0.5 * i for i in range(60)]
    cks = [ck(s, w=[v]) for s, v in zip(steps, values)]
    res = sweep_alpha(cks, grid, lambda p: (float(p["w"][0]) - target) ** 2)

    def brute(alpha):
        b = [(1 - 1 / (s + 1)) ** (1 + alpha) for s in steps]
        mean = sum(bi * v for bi, v in zip(b, values)) / sum(b)
        return (mean - target) ** 2

    assert res.best_alpha == min(grid, key=brute)


def test_sweep_records_failures():
    cks = [ck(s, w=[float(s)]) for s in (1, 2)]

    def evaluate(p):
        if p["w"][0] > 1.9:
            raise RuntimeError("boom")
        return float(p["w"][0])

    res = sweep_alpha(cks, [0.0, 100.0], evaluate)
    assert res.best_alpha == 0.0
    assert 100.0 in res.failures and "boom" in res.failures[100.0]
    res = sweep_alpha(cks, [0.0, 1.0], lambda p: math.nan if p["w"][0] < 1.6 else 1.0)
    assert 0.0 in res.failures
    with pytest.raises(ContractError):
        sweep_alpha(cks, [], lambda p: 0.0)
    with pytest.raises(ContractError):
        sweep_alpha(cks, [1.0], lambda p: math.inf)
