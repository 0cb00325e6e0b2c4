import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptok.exceptions import (BudgetTooSmallError, ConfigurationError, RouterStateError,
                                ValidationError)
from adaptok.router import (FLEX_FRACTIONS, RouterState, beta_from_bpp16, default_n_min,
                            draw_flex_beta, ema_trace, round_half_away, route, route_by_search,
                            route_flex, route_many, update_ema)


def state(beta=8.0, n_max=16, ema=None, **kw):
    return RouterState(beta=beta, n_max=n_max, ema_nll=ema, **kw)


def test_ema_rules():
    s = update_ema(state(), 3.0)
    assert s.ema_nll == 3.0
    assert update_ema(state(ema=2.0), 4.0).ema_nll == pytest.approx(2.02, abs=1e-15)
    with pytest.raises(ValidationError):
        update_ema(s, 0.0)
    with pytest.raises(ValidationError):
        update_ema(s, float("inf"))


def test_ema_converges_monotonically():
    s = state(ema=1.0)
    prev = s.ema_nll
    for _ in range(2000):
        s = update_ema(s, 5.0)
        assert prev <= s.ema_nll <= 5.0
        prev = s.ema_nll
    assert s.ema_nll == pytest.approx(5.0, rel=1e-6)


def test_ema_trace_matches_scalar_updates():
    nll = np.random.default_rng(0).uniform(0.1, 3.0, size=50)
    trace = ema_trace(None, nll)
    s = state()
    for v, t in zip(nll, trace):
        s = update_ema(s, v)
        assert s.ema_nll == pytest.approx(t, rel=1e-14)


def test_route_worked_example():
    s = RouterState(beta=4608, n_max=9216, ema_nll=2.5)
    assert route(s, 2.5) == 4608
    assert s.n_min == 576


def test_route_clamps():
    s = state(beta=16, ema=1.0)
    assert route(s, 1.0) == 16
    assert route(s, 0.01) == 1
    assert route(s, 100.0) == 16


def test_route_needs_normalizer():
    with pytest.raises(RouterStateError):
        route(state(), 1.0)
    assert route(state(), 1.0, normalizer=1.0) == 8


def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, -1.5, 2.4999)] == [1, 2, 3, -1, -2, 2]
    assert route(state(beta=5, ema=2.0), 1.0) == 3   # 2.5 rounds up
    assert route_many(5, [1.0, 3.0], 2.0, 1, 16).tolist() == [3, 8]


@given(st.floats(0.01, 50), st.floats(0.01, 50), st.floats(0.5, 32))
def test_route_monotone(a, b, beta):
    s = state(beta=beta, ema=1.0)
    lo, hi = sorted((a, b))
    assert route(s, lo) <= route(s, hi)
    assert route(s, lo, beta=beta / 2) <= route(s, lo)


@given(st.lists(st.floats(0.001, 100), min_size=1, max_size=30), st.floats(0.1, 40), st.floats(0.01, 10))
def test_route_many_matches_scalar(nll, beta, norm):
    s = state(beta=beta)
    expected = [route(s, v, normalizer=norm) for v in nll]
    assert route_many(beta, nll, norm, s.n_min, s.n_max).tolist() == expected


def test_scale_invariance_after_convergence():
    rng = np.random.default_rng(1)
    nll = rng.uniform(0.2, 2.0, size=3000)
    for scale in (1.0, 7.5):
        s = state(beta=8)
        for v in nll * scale:
            s = update_ema(s, v)
        out = [route(s, v * scale) for v in nll[:200]]
        if scale == 1.0:
            base = out
    assert out == base


def test_stationary_mean_near_beta():
    rng = np.random.default_rng(2)
    nll = rng.uniform(0.8, 1.2, size=10_000)
    trace = ema_trace(None, nll)
    # each sample is routed with the EMA that includes it, as in training
    n = route_many(8, nll, trace, 1, 16)
    assert abs(n.mean() - 8) / 8 < 0.01


def test_beta_from_budget():
    assert beta_from_bpp16(0.5625, 9216) == 4608
    assert beta_from_bpp16(0.8125, 9216) == 6912
    assert beta_from_bpp16(1 / 16 + 1e-9, 16) == pytest.approx(16e-9)
    with pytest.raises(BudgetTooSmallError):
        beta_from_bpp16(1 / 16, 16)
    assert beta_from_bpp16(0.5625, 16, bits_per_token=8) == 16


def test_default_n_min():
    assert default_n_min(16) == 1 and default_n_min(17) == 2 and default_n_min(9216) == 576


def test_state_validation():
    with pytest.raises(ValidationError):
        RouterState(beta=0, n_max=16)
    with pytest.raises(ValidationError):
        RouterState(beta=1, n_max=16, n_min=17)
    with pytest.raises(ValidationError):
        RouterState(beta=1, n_max=16, ema_nll=-1.0)
    s = RouterState.flex(16, ema_nll=2.0)
    assert RouterState.from_dict(s.to_dict()) == s


def test_flex_singleton_and_mean():
    s = RouterState(beta=16, n_max=16, ema_nll=1.0, flex_betas=(16.0,))
    assert all(route_flex(s, 0.7, seed) == route(s, 0.7, beta=16) for seed in range(20))
    f = RouterState.flex(16, ema_nll=1.0)
    assert {route_flex(f, 1.0, seed) for seed in range(200)} == {4, 8, 12, 16}


def test_flex_draws_uniform():
    f = RouterState.flex(16)
    counts = Counter(draw_flex_beta(f, seed) for seed in range(100_000))
    assert set(counts) == {frac * 16 for frac in FLEX_FRACTIONS}
    assert all(abs(c / 100_000 - 0.25) < 0.01 for c in counts.values())


def test_flex_empty():
    with pytest.raises(ConfigurationError):
        draw_flex_beta(state(), 0)


def curve(n):
    return 1.0 / n


def test_search_large_count():
    res = route_by_search(0.5 / 1000, curve, 4096)
    assert res.probes == 12 and res.extra_nfes == 11
    assert res.n_x == 2000


def test_search_toy_count():
    for target in np.linspace(1 / 16, 1.0, 25):
        calls = []
        res = route_by_search(target, lambda n: calls.append(n) or curve(n), 16)
        assert res.probes == len(calls) == 4
        assert res.n_x == min(16, max(1, math.ceil(1 / target - 1e-12)))


def test_search_degenerate_and_unreachable():
    assert route_by_search(10.0, curve, 16).n_x == 1
    res = route_by_search(0.0, curve, 16)
    assert res.n_x == 16 and not res.reached


def test_search_reports_violations():
    bumpy = {n: 1.0 / n for n in range(1, 17)}
    bumpy[12] = 0.9
    res = route_by_search(0.1, bumpy.__getitem__, 16)
    assert res.violations == 1
    # the bump at 12 is clamped to the loss seen at 8, so 12 reads as failing
    assert res.n_x == 13


def test_search_blocks():
    calls = []
    res = route_by_search(1 / 40, lambda n: calls.append(n) or curve(n), 64, block=16)
    assert res.n_x == 40
    assert calls[:3] == [16, 32, 48]
    with pytest.raises(ValidationError):
        route_by_search(0.1, curve, 16, block=0)
