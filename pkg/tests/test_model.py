"""Core parameter container, joint covariance, Gaussian conditioning."""

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

import helpers as H
from glmpo2pls import (
    BERNOULLI,
    GAUSSIAN,
    DataFormatError,
    DataSet,
    DimensionMismatchError,
    ModelDims,
    NumericalDomainError,
    Theta,
    build_joint_covariance,
    canonicalize,
    conditional_latent_moments,
    conditional_moments_given_xy,
    log_likelihood_gaussian,
    predict_linear_predictor,
    validate_constraints,
)


def unit_theta_2x2() -> Theta:
    """p=q=2, r=r_x=r_y=1, axis-aligned loadings, every variance 1, B=a=b=1."""
    e1 = np.array([[1.0], [0.0]])
    e2 = np.array([[0.0], [1.0]])
    return Theta(W=e1, W_perp=e2, C=e1, C_perp=e2, B=np.ones(1),
                 Sigma_t=np.ones(1), Sigma_tperp=np.ones(1),
                 Sigma_h=np.ones(1), Sigma_uperp=np.ones(1),
                 sigma_e2=1.0, sigma_f2=1.0, a=np.ones(1), b=np.ones(1),
                 sigma_g2=1.0)


class TestModelDims:
    def test_degenerate_p1_rejected(self):
        with pytest.raises((DataFormatError, DimensionMismatchError)):
            ModelDims(p=1, q=1, r=1, r_x=1, r_y=1, N=10)

    def test_component_budget_enforced(self):
        with pytest.raises((DataFormatError, DimensionMismatchError)):
            ModelDims(p=4, q=3, r=2, r_x=3, r_y=1, N=10)
        ModelDims(p=4, q=3, r=2, r_x=2, r_y=1, N=10)   # boundary is legal

    def test_latent_count(self):
        d = ModelDims(p=6, q=5, r=2, r_x=1, r_y=2, N=10)
        assert d.n_latent == 7


class TestTheta:
    def test_shape_mismatch_rejected(self):
        th = unit_theta_2x2()
        with pytest.raises(DimensionMismatchError):
            replace(th, a=np.ones(2))

    def test_sigma_u(self):
        rng = np.random.default_rng(0)
        th = H.make_theta(rng, 5, 4, 2, 1, 1)
        expected = th.B ** 2 * th.Sigma_t + th.Sigma_h
        np.testing.assert_allclose(th.Sigma_u, expected)

    def test_arrays_read_only(self):
        th = unit_theta_2x2()
        with pytest.raises(ValueError):
            th.W[0, 0] = 5.0


class TestDataSet:
    def test_nonfinite_rejected(self):
        X = np.zeros((3, 2))
        X[0, 0] = np.nan
        with pytest.raises(DataFormatError):
            DataSet(X=X, Y=np.zeros((3, 2)), z=np.zeros(3))

    def test_bernoulli_label_check(self):
        with pytest.raises(DataFormatError):
            DataSet(X=np.zeros((3, 2)), Y=np.zeros((3, 2)),
                    z=np.array([0.0, 1.0, 2.0]), family=BERNOULLI)

    def test_row_count_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            DataSet(X=np.zeros((3, 2)), Y=np.zeros((4, 2)), z=np.zeros(3))


class TestBuildJointCovariance:
    def test_zero_coefficients_block_diagonal(self):
        th = replace(unit_theta_2x2(), a=np.zeros(1), b=np.zeros(1))
        S = build_joint_covariance(th)
        assert S[-1, -1] == pytest.approx(1.0)
        np.testing.assert_allclose(S[-1, :-1], 0.0)
        np.testing.assert_allclose(S[:-1, -1], 0.0)

    def test_unit_example_entries(self):
        S = build_joint_covariance(unit_theta_2x2())
        # Var(x1) = Sigma_t + sigma_e2; Cov(y, z) = C (B Sigma_t a + Sigma_h b)
        assert S[0, 0] == pytest.approx(2.0)
        np.testing.assert_allclose(S[2:4, 4], [2.0, 0.0])
        assert S[4, 4] == pytest.approx(3.0)    # a^2 St + b^2 Sh + sg2

    def test_exact_symmetry_and_pd(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            th = H.make_theta(rng, 7, 5, 2, 2, 1)
            S = build_joint_covariance(th)
            assert np.array_equal(S, S.T)
            assert np.linalg.eigvalsh(S).min() > 0

    def test_monte_carlo_sample_covariance(self):
        th = unit_theta_2x2()
        rng = np.random.default_rng(7)
        n = 1_000_000
        stack, sm = H.draw_stack(th, n, rng)
        obs = stack[:, sm.sl["x"].start:]
        emp = np.cov(obs, rowvar=False)
        S = build_joint_covariance(th)
        # SE of a covariance entry is about sqrt((s_ii s_jj + s_ij^2)/n)
        d = np.diag(S)
        se = np.sqrt((np.outer(d, d) + S ** 2) / n)
        assert np.all(np.abs(emp - S) <= 3.2 * se)

    def test_matches_seed_map_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            th = H.make_theta(rng, 6, 4, 1, 2, 1)
            np.testing.assert_allclose(build_joint_covariance(th),
                                       H.cov_obs_oracle(th), atol=1e-12)

    def test_bernoulli_rejected(self):
        rng = np.random.default_rng(4)
        th = H.make_theta(rng, 5, 4, 1, 1, 1, family=BERNOULLI)
        with pytest.raises(DataFormatError):
            build_joint_covariance(th)


class TestLogLikelihoodGaussian:
    def test_rows_at_origin(self):
        th = unit_theta_2x2()
        data = DataSet(X=np.zeros((2, 2)), Y=np.zeros((2, 2)), z=np.zeros(2))
        S = build_joint_covariance(th)
        dim = S.shape[0]
        expected = 2 * (-0.5 * (dim * np.log(2 * np.pi)
                                + np.linalg.slogdet(S)[1]))
        assert log_likelihood_gaussian(th, data) == pytest.approx(expected)

    def test_dense_mvn_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            th = H.make_theta(rng, 8, 5, 2, 1, 2)
            data = H.draw_dataset(th, 40, rng)
            obs = np.hstack([data.X, data.Y, data.z[:, None]])
            want = H.mvn_logpdf_rows(obs, H.cov_obs_oracle(th)).sum()
            got = log_likelihood_gaussian(th, data)
            assert got == pytest.approx(want, rel=1e-8)

    def test_singular_covariance_reported(self):
        e1 = np.array([[1.0], [0.0]])
        th = Theta(W=e1, W_perp=e1.copy(), C=e1, C_perp=e1.copy(),
                   B=np.ones(1), Sigma_t=np.ones(1),
                   Sigma_tperp=np.full(1, 1e-300),
                   Sigma_h=np.full(1, 1e-300), Sigma_uperp=np.full(1, 1e-300),
                   sigma_e2=1e-300, sigma_f2=1e-300,
                   a=np.zeros(1), b=np.zeros(1), sigma_g2=1e-300)
        data = DataSet(X=np.zeros((2, 2)), Y=np.zeros((2, 2)), z=np.zeros(2))
        with pytest.raises(NumericalDomainError):
            log_likelihood_gaussian(th, data)


class TestConditionalMoments:
    def test_zero_observation_zero_mean(self):
        th = unit_theta_2x2()
        data = DataSet(X=np.zeros((2, 2)), Y=np.zeros((2, 2)), z=np.zeros(2))
        m = conditional_latent_moments(th, data)
        np.testing.assert_allclose(m.mean, 0.0)

    def test_noise_free_limit_recovers_scores(self):
        rng = np.random.default_rng(8)
        p, q, r = 6, 5, 2
        Wm = np.linalg.qr(rng.standard_normal((p, r)))[0]
        Cm = np.linalg.qr(rng.standard_normal((q, r)))[0]
        th = Theta(W=Wm, W_perp=np.zeros((p, 0)), C=Cm,
                   C_perp=np.zeros((q, 0)),
                   B=np.array([1.0, 0.9]), Sigma_t=np.array([2.0, 1.0]),
                   Sigma_tperp=np.zeros(0), Sigma_h=np.array([0.5, 0.4]),
                   Sigma_uperp=np.zeros(0), sigma_e2=1e-8, sigma_f2=1e-8,
                   a=np.zeros(2), b=np.zeros(2), sigma_g2=1e-8)
        t = rng.standard_normal((30, r)) * np.sqrt(th.Sigma_t)
        u = t * th.B + rng.standard_normal((30, r)) * np.sqrt(th.Sigma_h)
        data = DataSet(X=t @ Wm.T, Y=u @ Cm.T, z=np.zeros(30))
        m = conditional_latent_moments(th, data)
        np.testing.assert_allclose(m.mean[:, m.idx_t], data.X @ Wm, atol=1e-3)

    def test_matches_partitioned_formula_oracle(self):
        rng = np.random.default_rng(9)
        th = H.make_theta(rng, 7, 4, 2, 2, 1)
        data = H.draw_dataset(th, 25, rng)
        obs = np.hstack([data.X, data.Y, data.z[:, None]])
        mean_o, cov_o = H.conditional_oracle(th, obs)
        m = conditional_latent_moments(th, data)
        np.testing.assert_allclose(m.mean, mean_o, atol=1e-10)
        np.testing.assert_allclose(m.cov, cov_o, atol=1e-10)

    def test_monte_carlo_conditional_draws(self):
        """Regression-sampled conditional draws reproduce the package
        moments within Monte-Carlo error."""
        rng = np.random.default_rng(10)
        th = H.make_theta(rng, 5, 4, 1, 1, 1)
        data = H.draw_dataset(th, 2, rng)
        target = np.hstack([data.X, data.Y, data.z[:, None]])[0]

        n = 100_000
        stack, sm = H.draw_stack(th, n, rng)
        k = 2 * th.r + th.r_x + th.r_y
        lat, obs = stack[:, :k], stack[:, k:]
        full = sm.cov
        gain = np.linalg.solve(full[k:, k:], full[k:, :k])
        cond_draws = lat + (target[None, :] - obs) @ gain

        m = conditional_latent_moments(th, data)
        emp_mean = cond_draws.mean(axis=0)
        emp_cov = np.cov(cond_draws, rowvar=False)
        se_mean = cond_draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(emp_mean - m.mean[0]) <= 3.5 * se_mean)
        d = np.diag(m.cov)
        se_cov = np.sqrt((np.outer(d, d) + m.cov ** 2) / n)
        assert np.all(np.abs(emp_cov - m.cov) <= 3.5 * se_cov)

    def test_conditional_covariance_data_independent(self):
        rng = np.random.default_rng(11)
        th = H.make_theta(rng, 6, 5, 1, 1, 1)
        d1 = H.draw_dataset(th, 5, rng)
        d2 = H.draw_dataset(th, 5, rng)
        m1 = conditional_latent_moments(th, d1)
        m2 = conditional_latent_moments(th, d2)
        np.testing.assert_allclose(m1.cov, m2.cov)

    def test_zero_coefficients_z_uninformative(self):
        rng = np.random.default_rng(12)
        th = H.make_theta(rng, 6, 4, 2, 1, 1, a_scale=0.0, b_scale=0.0)
        data = H.draw_dataset(th, 20, rng)
        with_z = conditional_latent_moments(th, data)
        without_z = conditional_moments_given_xy(th, data.X, data.Y)
        np.testing.assert_allclose(with_z.mean, without_z.mean, atol=1e-10)
        np.testing.assert_allclose(with_z.cov, without_z.cov, atol=1e-10)

    def test_law_of_total_variance(self):
        rng = np.random.default_rng(13)
        th = H.make_theta(rng, 5, 4, 1, 1, 1)
        n = 10_000
        stack, sm = H.draw_stack(th, n, rng)
        k = 2 * th.r + th.r_x + th.r_y
        data = DataSet(X=stack[:, sm.sl["x"]], Y=stack[:, sm.sl["y"]],
                       z=stack[:, sm.sl["z"]].ravel())
        m = conditional_latent_moments(th, data)
        total = m.cov + np.cov(m.mean, rowvar=False)
        prior = sm.cov[:k, :k]
        assert np.abs(total - prior).max() < 0.15   # MC tolerance at 1e4 rows

    def test_second_moment_sum_consistency(self):
        rng = np.random.default_rng(14)
        th = H.make_theta(rng, 5, 4, 1, 1, 1)
        data = H.draw_dataset(th, 30, rng)
        m = conditional_latent_moments(th, data)
        manual = data.N * m.cov + m.mean.T @ m.mean
        np.testing.assert_allclose(m.second_moment_sum(), manual)


class TestPrediction:
    def test_zero_coefficients_constant(self):
        rng = np.random.default_rng(15)
        th = H.make_theta(rng, 5, 4, 1, 1, 1, a_scale=0.0, b_scale=0.0)
        X = rng.standard_normal((6, 5))
        Y = rng.standard_normal((6, 4))
        np.testing.assert_allclose(predict_linear_predictor(th, X, Y), th.a0)

    def test_zero_rows_give_intercept(self):
        rng = np.random.default_rng(16)
        th = H.make_theta(rng, 5, 4, 2, 1, 1, family=BERNOULLI)
        lin = predict_linear_predictor(th, np.zeros((3, 5)), np.zeros((3, 4)))
        np.testing.assert_allclose(lin, th.a0)


class TestValidateConstraints:
    def test_clean_theta_empty_report(self):
        rng = np.random.default_rng(17)
        th = H.make_theta(rng, 6, 5, 2, 1, 1)
        assert validate_constraints(th) == []

    def test_identity_block_example(self):
        W = np.eye(4)[:, :2]
        Wp = np.eye(4)[:, 2:3]
        C = np.eye(3)[:, :2]
        Cp = np.eye(3)[:, 2:3]
        th = Theta(W=W, W_perp=Wp, C=C, C_perp=Cp, B=np.array([2.0, 1.0]),
                   Sigma_t=np.ones(2), Sigma_tperp=np.ones(1),
                   Sigma_h=np.ones(2), Sigma_uperp=np.ones(1),
                   sigma_e2=1.0, sigma_f2=1.0, a=np.zeros(2), b=np.zeros(2),
                   sigma_g2=1.0)
        assert validate_constraints(th) == []

    def test_duplicate_columns_flagged(self):
        rng = np.random.default_rng(18)
        th = H.make_theta(rng, 6, 5, 2, 1, 1)
        bad = th.W.copy()
        bad[:, 1] = bad[:, 0]
        report = validate_constraints(replace(th, W=bad))
        assert any("semi-orthogonal" in v.name for v in report)

    def test_non_decreasing_order_flagged(self):
        rng = np.random.default_rng(19)
        th = H.make_theta(rng, 6, 5, 2, 1, 1)
        th_bad = replace(th, Sigma_t=np.ones(2), B=np.ones(2))
        report = validate_constraints(th_bad)
        assert any("decreasing" in v.name or "decreasing" in v.detail
                   for v in report)


class TestCanonicalize:
    def test_idempotent(self):
        rng = np.random.default_rng(20)
        for _ in range(10):
            th = H.make_theta(rng, 6, 5, 2, 1, 2)
            once = canonicalize(th)
            twice = canonicalize(once)
            for field in ("W", "W_perp", "C", "C_perp", "a", "b", "B",
                          "Sigma_t", "Sigma_h"):
                np.testing.assert_array_equal(getattr(once, field),
                                              getattr(twice, field))

    def test_sign_flip_restored(self):
        rng = np.random.default_rng(21)
        th = H.make_theta(rng, 6, 5, 2, 1, 1)
        flip = np.array([-1.0, 1.0])
        flipped = replace(th, W=th.W * flip, C=th.C * flip, a=th.a * flip,
                          b=th.b * flip)
        back = canonicalize(flipped)
        np.testing.assert_allclose(back.W, th.W)
        np.testing.assert_allclose(back.a, th.a)
        np.testing.assert_allclose(back.b, th.b)

    def test_reorder_preserves_likelihood(self):
        rng = np.random.default_rng(22)
        th = H.make_theta(rng, 7, 6, 2, 1, 1)
        perm = [1, 0]
        shuffled = replace(
            th, W=th.W[:, perm], C=th.C[:, perm], a=th.a[perm],
            b=th.b[perm], B=th.B[perm], Sigma_t=th.Sigma_t[perm],
            Sigma_h=th.Sigma_h[perm])
        data = H.draw_dataset(th, 30, rng)
        ll_before = log_likelihood_gaussian(shuffled, data)
        canon = canonicalize(shuffled)
        ll_after = log_likelihood_gaussian(canon, data)
        assert ll_after == pytest.approx(ll_before, rel=1e-10)
        # strictly decreasing joint order restored
        d = canon.Sigma_t * canon.B
        assert np.all(np.diff(d) < 0)

    def test_output_passes_validation(self):
        rng = np.random.default_rng(23)
        th = H.make_theta(rng, 6, 5, 2, 2, 1, canonical=False)
        assert validate_constraints(canonicalize(th)) == []

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_idempotence_property(self, seed):
        rng = np.random.default_rng(seed)
        th = H.make_theta(rng, 5, 4, 2, 1, 1, canonical=False)
        once = canonicalize(th)
        twice = canonicalize(once)
        np.testing.assert_array_equal(once.W, twice.W)
        np.testing.assert_array_equal(once.a, twice.a)
