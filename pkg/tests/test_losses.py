import math

import numpy as np
import pytest

from svfm import autodiff as ad
from svfm.autodiff import ParameterStore, Tensor, backward, finite_difference_grads, max_relative_error
from svfm.losses import (
    LossConfig,
    TrajectorySample,
    combined_loss,
    cross_entropy,
    cubic_interp,
    directional_variance_loss,
    forecast_loss,
    mdl,
    transport_loss,
)


class TestLossConfig:
    def test_fl_excludes_path_terms(self):
        with pytest.raises(ValueError):
            LossConfig(terms=("FL", "TL"))
        with pytest.raises(ValueError):
            LossConfig(terms=("FL", "DV"))
        LossConfig(terms=("CE", "TL", "DV"), lam=0.1)  # fine

    def test_unknown_term(self):
        with pytest.raises(ValueError):
            LossConfig(terms=("XX",))


class TestTrajectorySample:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrajectorySample(X=np.ones((1, 2)), t_X=np.array([0.0]))
        with pytest.raises(ValueError):
            TrajectorySample(X=np.ones((3, 2)), t_X=np.array([0.0, 0.5, 0.5]))
        TrajectorySample(X=np.ones((3, 2)), t_X=np.array([0.0, 0.5, 1.0]))


class TestMdl:
    def test_gaussian_at_its_mean(self):
        d = 3
        target = np.random.default_rng(0).normal(size=(1, d))
        out = mdl([Tensor(target)], [Tensor(np.ones((1, d)))], np.array([1.0]), target)
        assert abs(out.item() - 0.5 * d * math.log(2 * math.pi)) < 1e-12

    def test_degenerate_weight_reduces_to_single_component(self):
        rng = np.random.default_rng(1)
        target = rng.normal(size=(2, 2))
        mu1, tau1 = rng.normal(size=(2, 2)), np.abs(rng.normal(size=(2, 2))) + 0.5
        mu2, tau2 = rng.normal(size=(2, 2)), np.abs(rng.normal(size=(2, 2))) + 0.5
        two = mdl([Tensor(mu1), Tensor(mu2)], [Tensor(tau1), Tensor(tau2)], np.array([1.0, 0.0]), target)
        one = mdl([Tensor(mu1)], [Tensor(tau1)], np.array([1.0]), target)
        assert abs(two.item() - one.item()) < 1e-9

    def test_against_direct_density_sum(self):
        rng = np.random.default_rng(2)
        b, d, k = 4, 2, 3
        target = rng.normal(size=(b, d))
        mus = [rng.normal(size=(b, d)) for _ in range(k)]
        taus = [np.abs(rng.normal(size=(b, d))) + 0.5 for _ in range(k)]
        pis = rng.dirichlet(np.ones(k))
        out = mdl([Tensor(m) for m in mus], [Tensor(t) for t in taus], pis, target)

        dens = np.zeros(b)
        for kk in range(k):
            comp = np.ones(b)
            for j in range(d):
                var = taus[kk][:, j]
                comp *= np.exp(-0.5 * (target[:, j] - mus[kk][:, j]) ** 2 / var) / np.sqrt(2 * math.pi * var)
            dens += pis[kk] * comp
        expect = float(np.mean(-np.log(dens)))
        assert abs(out.item() - expect) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        target = rng.normal(size=(3, 2))
        mus = [rng.normal(size=(3, 2)) for _ in range(3)]
        taus = [np.abs(rng.normal(size=(3, 2))) + 0.3 for _ in range(3)]
        pis = np.array([0.5, 0.3, 0.2])
        a = mdl([Tensor(m) for m in mus], [Tensor(t) for t in taus], pis, target)
        perm = [2, 0, 1]
        b = mdl([Tensor(mus[i]) for i in perm], [Tensor(taus[i]) for i in perm], pis[perm], target)
        assert abs(a.item() - b.item()) < 1e-12

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError):
            mdl([Tensor([[0.0]])], [Tensor([[0.0]])], np.array([1.0]), np.array([[0.0]]))


class TestTransportLoss:
    def test_stationary_zero(self):
        states = [Tensor([[1.0, 2.0]])] * 5
        assert transport_loss(states).item() == 0.0

    def test_hand_345(self):
        out = transport_loss([Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]])])
        assert out.item() == 25.0

    def test_straight_line_closed_form(self):
        start, end = np.zeros(2), np.array([2.0, 1.0])
        for n in (1, 2, 4):
            pts = [Tensor((start + (end - start) * i / n)[None, :]) for i in range(n + 1)]
            out = transport_loss(pts)
            assert abs(out.item() - np.sum((end - start) ** 2) / n**2) < 1e-12

    def test_equality_condition_of_lower_bound(self):
        # equispaced straight line: TL * T == ||h_T - h_0||^2 / T to 1e-10
        rng = np.random.default_rng(4)
        start, end = rng.normal(size=3), rng.normal(size=3)
        for n in (2, 5, 8):
            pts = [Tensor((start + (end - start) * i / n)[None, :]) for i in range(n + 1)]
            tl = transport_loss(pts).item()
            assert abs(tl * n - np.sum((end - start) ** 2) / n) < 1e-10


class TestDirectionalVarianceLoss:
    def test_aligned_zero(self):
        evals = [Tensor([[0.3, -0.2]])] * 4
        assert directional_variance_loss(evals).item() == 0.0

    def test_hand_opposite(self):
        out = directional_variance_loss([Tensor([[1.0, 0.0]]), Tensor([[-1.0, 0.0]])])
        assert out.item() == 1.0

    def test_against_two_pass_oracle(self):
        rng = np.random.default_rng(5)
        evals = [rng.normal(size=(3, 2)) for _ in range(6)]
        out = directional_variance_loss([Tensor(e) for e in evals])
        stack = np.stack(evals)  # [T x B x D]
        mean = stack.mean(axis=0)
        expect = float(np.mean(np.sum((stack - mean) ** 2, axis=-1).mean(axis=0)))
        assert abs(out.item() - expect) < 1e-12


class TestCubicInterp:
    def test_exact_at_knots(self):
        rng = np.random.default_rng(6)
        s = TrajectorySample(X=rng.normal(size=(7, 2)), t_X=np.sort(rng.uniform(0, 1, 7)))
        for i in range(7):
            assert np.max(np.abs(cubic_interp(s, float(s.t_X[i])) - s.X[i])) < 1e-12

    def test_linear_data_exact(self):
        t = np.linspace(0, 1, 9)
        x = np.stack([2 * t + 1, -t], axis=1)
        s = TrajectorySample(X=x, t_X=t)
        for q in np.linspace(0, 1, 31):
            expect = np.array([2 * q + 1, -q])
            assert np.max(np.abs(cubic_interp(s, float(q)) - expect)) < 1e-12

    def test_sin_midpoints(self):
        t = np.linspace(0, 2 * math.pi, 20)
        s = TrajectorySample(X=np.sin(t)[:, None], t_X=t)
        mids = (t[:-1] + t[1:]) / 2
        for q in mids:
            assert abs(cubic_interp(s, float(q))[0] - math.sin(q)) < 1e-3

    def test_out_of_range(self):
        s = TrajectorySample(X=np.ones((3, 1)), t_X=np.array([0.0, 1.0, 2.0]))
        with pytest.raises(ValueError):
            cubic_interp(s, 2.5)


class TestForecastLoss:
    def _record(self, times, values):
        from svfm.odesolve import SolveRecord

        rec = SolveRecord()
        rec.times = list(times)
        rec.states = [Tensor(np.atleast_2d(v)) for v in values]
        rec.derivs = [Tensor(np.zeros((1, len(np.atleast_1d(values[0]))))) for _ in values]
        return rec

    def test_exact_match_zero(self):
        t = np.linspace(0, 1, 5)
        x = np.stack([t, 2 * t], axis=1)
        sample = TrajectorySample(X=x, t_X=t)
        rec = self._record(t, [x[i] for i in range(5)])
        out = forecast_loss(rec, sample, eval_times=t[1:], inner="squared-error")
        assert out.item() < 1e-24

    def test_single_offset_checkpoint(self):
        sample = TrajectorySample(X=np.zeros((2, 2)), t_X=np.array([0.0, 1.0]))
        rec = self._record([0.0, 1.0], [np.zeros(2), np.array([3.0, 4.0])])
        out = forecast_loss(rec, sample, eval_times=[1.0], inner="squared-error")
        assert out.item() == 25.0

    def test_against_explicit_loop(self):
        rng = np.random.default_rng(7)
        t = np.linspace(0, 1, 6)
        x = rng.normal(size=(6, 2))
        sample = TrajectorySample(X=x, t_X=t)
        states = [rng.normal(size=2) for _ in range(6)]
        rec = self._record(t, states)
        out = forecast_loss(rec, sample, eval_times=t[1:], inner="squared-error")
        expect = 0.0
        for i in range(1, 6):
            target = cubic_interp(sample, float(t[i]))
            expect += float(np.sum((states[i] - target) ** 2))
        expect /= 5
        assert abs(out.item() - expect) < 1e-12


class TestCombinedLoss:
    def test_lambda_zero(self):
        cfg = LossConfig(terms=("CE", "TL"), lam=0.0)
        out = combined_loss(cfg, {"CE": Tensor(2.0), "TL": Tensor(7.0)})
        assert out.item() == 2.0

    def test_hand_weighted(self):
        cfg = LossConfig(terms=("CE", "TL", "DV"), lam=1.0)
        out = combined_loss(cfg, {"CE": Tensor(2.0), "TL": Tensor(3.0), "DV": Tensor(4.0)})
        assert out.item() == 9.0

    def test_missing_part(self):
        cfg = LossConfig(terms=("CE", "TL"), lam=1.0)
        with pytest.raises(ValueError):
            combined_loss(cfg, {"CE": Tensor(1.0)})


class TestDifferentiability:
    def test_losses_match_finite_differences(self):
        rng = np.random.default_rng(8)
        store = ParameterStore()
        theta = store.create("theta", rng.normal(size=(4, 2)))
        target = rng.normal(size=(4, 2))

        def build():
            states = [ad.narrow(theta, 0, 2, axis=0) for _ in range(2)]
            tl = transport_loss([ad.scale(s, float(i + 1)) for i, s in enumerate(states)])
            dv = directional_variance_loss([ad.scale(theta, 0.5), ad.square(theta)])
            m = mdl([theta], [ad.add(ad.square(theta), 0.5)], np.array([1.0]), target)
            return ad.add(ad.add(tl, dv), m)

        loss = build()
        backward(loss, store)
        analytic = {p: t.grad.copy() for p, t in store.items()}
        numeric = finite_difference_grads(lambda: build().item(), store)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_cross_entropy_values(self):
        logits = Tensor(np.array([[10.0, 0.0], [0.0, 10.0]]))
        out = cross_entropy(logits, np.array([0, 1]))
        assert out.item() < 1e-4
        flipped = cross_entropy(logits, np.array([1, 0]))
        assert flipped.item() > 5.0
