from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest

from src.analysis import (
    SWEEP_HEADER,
    BoundInputs,
    LossSample,
    RunReport,
    beta_g_tradeoff,
    summarize_sweep,
    theorem_bound,
    time_to_loss,
    tokens_to_loss,
)


def _random_inputs(rng: np.random.Generator, **fixed) -> BoundInputs:
    eta_0 = rng.uniform(1e-3, 0.5)
    values = dict(
        f0_minus_fstar=rng.uniform(0, 10), eta_0=eta_0, eta_m=eta_0 * rng.uniform(0.05, 1.0),
        steps=int(rng.integers(1, 100_000)), beta_g=rng.uniform(0.05, 0.95), beta_l=rng.uniform(0.05, 0.95),
        lipschitz=rng.uniform(0.1, 10), grad_bound=rng.uniform(0, 5), sigma_sq=rng.uniform(0, 5),
        d_g_sq=rng.uniform(0, 5), d_l_sq=rng.uniform(0, 5),
    )
    values.update(fixed)
    return BoundInputs(**values)


def _exact_bound(b: BoundInputs) -> float:
    """Rational-arithmetic evaluation of the same right-hand side."""
    F = {k: Fraction(v) for k, v in vars(b).items()}
    one = Fraction(1)
    first = 4 * F["f0_minus_fstar"] / (F["eta_m"] * F["steps"]) * (one + one / (one - F["beta_g"]))
    scale = (F["eta_0"] / F["eta_m"]) * (one / F["beta_g"] ** 3)
    bracket = 3 + 12 * F["lipschitz"] * F["eta_0"] + 6 * F["lipschitz"] * F["eta_0"] / (one - F["beta_g"]) ** 2
    inner = (F["grad_bound"] * F["sigma_sq"] / ((one - F["beta_l"]) * (one - F["beta_g"]))
             + F["lipschitz"] ** 2 * F["d_g_sq"] + F["lipschitz"] ** 2 * F["d_l_sq"])
    return float(first + scale * bracket * inner)


def _report(points, diverged=False) -> RunReport:
    samples = [LossSample(time=t, tokens=n, loss=loss, updates=i) for i, (t, n, loss) in enumerate(points)]
    return RunReport(strategy="halos", config_hash="0" * 16, seed=0, samples=samples, diverged=diverged,
                     diagnosis="non-finite loss" if diverged else None)


class TestTheoremBound:
    def test_reference_point(self):
        b = BoundInputs(1.0, 0.01, 0.01, 1000, 0.5, 0.9, 1.0, 1.0, 1.0)
        expected = 4 / (0.01 * 1000) * 3 + 8 * (3 + 0.12 + 0.24) * (1 / (0.1 * 0.5))
        assert theorem_bound(b) == pytest.approx(expected, rel=1e-12)

    def test_matches_exact_evaluation(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            b = _random_inputs(rng)
            assert theorem_bound(b) == pytest.approx(_exact_bound(b), rel=1e-12)

    def test_monotone_in_noise_drift_and_gradient_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            b = _random_inputs(rng, grad_bound=rng.uniform(0.1, 5), sigma_sq=rng.uniform(0.1, 5))
            base = theorem_bound(b)
            for field in ("sigma_sq", "d_g_sq", "d_l_sq", "grad_bound"):
                bumped = BoundInputs(**{**vars(b), field: getattr(b, field) + 1.0})
                assert theorem_bound(bumped) > base

    def test_monotone_in_horizon(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            b = _random_inputs(rng, f0_minus_fstar=rng.uniform(0.1, 10))
            longer = BoundInputs(**{**vars(b), "steps": b.steps * 2})
            assert theorem_bound(longer) < theorem_bound(b)

    def test_vanishes_without_noise(self):
        values = [theorem_bound(BoundInputs(1.0, 0.01, 0.01, t, 0.5, 0.9, 1.0, 1.0, 0.0)) for t in (10, 1000, 10**6)]
        assert values[0] > values[1] > values[2]
        assert values[2] < 1e-2

    def test_derivation_variant_is_smaller(self):
        b = BoundInputs(1.0, 0.01, 0.01, 1000, 0.5, 0.9, 1.0, 1.0, 1.0)
        assert theorem_bound(b, "derivation") < theorem_bound(b)
        with pytest.raises(ValueError):
            theorem_bound(b, "appendix")

    @pytest.mark.parametrize("override", [
        {"beta_g": 0.0}, {"beta_g": 1.0}, {"beta_l": 1.0}, {"eta_m": 0.02}, {"steps": 0}, {"sigma_sq": -1.0},
    ])
    def test_invalid_inputs(self, override):
        values = dict(f0_minus_fstar=1.0, eta_0=0.01, eta_m=0.01, steps=10, beta_g=0.5, beta_l=0.9,
                      lipschitz=1.0, grad_bound=1.0, sigma_sq=1.0)
        values.update(override)
        with pytest.raises(ValueError):
            BoundInputs(**values)


class TestMomentumTradeoff:
    def test_values(self):
        assert beta_g_tradeoff(0.5) == pytest.approx(64.0)
        assert beta_g_tradeoff(0.9) == pytest.approx(1 / (0.729 * 0.001), rel=1e-9)

    def test_symmetric(self):
        for x in np.linspace(0.01, 0.99, 99):
            assert beta_g_tradeoff(x) == pytest.approx(beta_g_tradeoff(1 - x), rel=1e-9)

    def test_minimum_at_half(self):
        grid = np.arange(1, 1000) / 1000
        assert grid[np.argmin([beta_g_tradeoff(x) for x in grid])] == pytest.approx(0.5)
        h = 1e-4
        assert beta_g_tradeoff(0.5 + h) - 2 * beta_g_tradeoff(0.5) + beta_g_tradeoff(0.5 - h) > 0

    def test_boundary(self):
        with pytest.raises(ValueError):
            beta_g_tradeoff(0.0)
        with pytest.raises(ValueError):
            beta_g_tradeoff(1.0)


class TestTimeToLoss:
    report = _report([(0.0, 0, 4.0), (10.0, 100, 2.0), (20.0, 200, 1.0)])

    def test_interpolates(self):
        assert time_to_loss(self.report, 3.0) == pytest.approx(5.0)
        assert tokens_to_loss(self.report, 1.5) == pytest.approx(150.0)

    def test_target_above_initial_loss(self):
        assert time_to_loss(self.report, 10.0) == 0.0

    def test_never_reached(self):
        assert time_to_loss(self.report, 0.5) is None

    def test_diverged_run(self):
        assert time_to_loss(_report([(0.0, 0, 4.0), (1.0, 10, 0.1)], diverged=True), 1.0) is None

    def test_monotone_in_target(self):
        rng = np.random.default_rng(4)
        losses = np.sort(rng.uniform(0, 10, 30))[::-1]
        report = _report([(float(i), i, float(x)) for i, x in enumerate(losses)])
        targets = np.sort(rng.uniform(losses.min(), losses.max(), 100))
        times = [time_to_loss(report, t) for t in targets]
        assert all(a >= b for a, b in zip(times, times[1:]))

    def test_report_json(self):
        body = self.report.to_json()
        assert body["samples"][1] == [10.0, 100, 2.0, 1]
        assert body["final_loss"] == 1.0


class TestSweep:
    def test_rows_and_argmin(self):
        finals = {0.1: 3.0, 0.5: 1.0, 0.9: 2.0}
        results = [(v, _report([(0.0, 0, 5.0), (10.0, 10, loss)])) for v, loss in finals.items()]
        summary = summarize_sweep("beta_g", results, target=2.5)
        assert [row.value for row in summary.rows] == [0.1, 0.5, 0.9]
        assert summary.rows[summary.argmin].value == 0.5
        assert summary.rows[0].time_to_loss is None
        assert summary.rows[1].time_to_loss == pytest.approx(10 * 2.5 / 4.0)

    def test_default_target_is_worst_surviving_loss(self):
        results = [
            (1.0, _report([(0.0, 0, 5.0), (10.0, 10, 1.0)])),
            (2.0, _report([(0.0, 0, 5.0), (10.0, 10, 2.0)])),
            ("bad", _report([(0.0, 0, 5.0)], diverged=True)),
        ]
        summary = summarize_sweep("alpha", results)
        assert summary.target == 2.0
        assert all(row.time_to_loss is not None for row in summary.rows[:2])
        assert summary.rows[2].diverged and summary.argmin == 0

    def test_single_config(self):
        summary = summarize_sweep("alpha", [(0.25, _report([(0.0, 0, 1.0)]))])
        assert len(summary.rows) == 1 and summary.argmin == 0

    def test_csv_carries_provenance(self):
        report = _report([(0.0, 0, 1.0), (5.0, 5, 0.5)])
        report.config_hash, report.seed = "0123456789abcdef", 9
        lines = summarize_sweep("K", [(8, report)]).to_csv().splitlines()
        assert lines[0] == ",".join(SWEEP_HEADER)
        assert lines[1].startswith("K,8,0.5,")
        assert lines[1].endswith(",false,0123456789abcdef,9")

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize_sweep("K", [])

    def test_nan_final_loss_is_not_argmin(self):
        results = [(1, _report([(0.0, 0, math.nan)])), (2, _report([(0.0, 0, 1.0)]))]
        assert summarize_sweep("K", results).argmin == 1
