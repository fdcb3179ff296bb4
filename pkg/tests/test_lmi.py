import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_esn import lmi
from robust_esn.polymodel import (
    AffineMatrix,
    MonomialBasis,
    PolyQuasiLpvModel,
    StateDomain,
    eval_pi,
    van_der_pol_model,
)
from robust_esn.sdp import ConicBackend, CvxpyBackend

from oracles import decrease_lmi_by_hand, one_step_residual, vdp_lifted_blocks


def scalar_plant(a=0.5):
    """``x+ = a x + u + d`` with no lifting and |x| <= 10."""
    basis = MonomialBasis(1, 0, ())
    one = AffineMatrix.constant(np.ones((1, 1)), 1)
    return PolyQuasiLpvModel(
        A0=AffineMatrix.constant([[a]], 1), A1=AffineMatrix.constant(np.zeros((0, 1)), 1),
        Bu=one, Bd=one, C=np.ones((1, 1)), basis=basis,
        X=StateDomain(np.array([[0.1], [-0.1]]), ()), theta_vertices=np.zeros((1, 1)),
    )


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

class TestContainment:
    def test_identity_q(self):
        m = van_der_pol_model()
        C = lmi.assemble_containment_lmis(np.eye(3), m.X)[0]
        expected = np.eye(4)
        expected[0, 1] = expected[1, 0] = 0.5
        np.testing.assert_array_equal(C, expected)
        assert np.linalg.eigvalsh(C)[0] > 0

    def test_unit_face_is_singular(self):
        X = StateDomain(np.array([[1.0, 0.0, 0.0]]), (0,))
        C = lmi.assemble_containment_lmis(np.eye(3), X)[0]
        assert abs(np.linalg.eigvalsh(C)[0]) < 1e-15

    @given(st.integers(0, 2**31 - 1))
    def test_schur_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(3, 3))
        Q = A @ A.T + 0.1 * np.eye(3)
        h = rng.normal(size=3)
        X = StateDomain(h[None, :], (0,))
        C = lmi.assemble_containment_lmis(Q, X)[0]
        s = 1 - h @ Q @ h
        if abs(s) > 1e-6:
            assert (np.linalg.eigvalsh(C)[0] > 0) == (s > 0)

    def test_printed_ellipsoid_inside_domain(self):
        P = 1e3 * np.array([[2.2, 0.18, 3.55], [0.18, 0.03, 0.27], [3.55, 0.27, 8.2]])
        Q = np.linalg.inv(P)
        h = np.array([0.5, 0.0, 0.0])
        assert 1 - h @ Q @ h > 0


class TestSynthesisLmi:
    def test_zero_dynamics_needs_multiplier(self):
        b = MonomialBasis(3, 2, (0,))
        Z3 = AffineMatrix.constant(np.zeros((3, 3)), 1)
        m = PolyQuasiLpvModel(
            A0=Z3, A1=AffineMatrix.constant(np.zeros((6, 3)), 1),
            Bu=AffineMatrix.constant(np.zeros((3, 1)), 1), Bd=AffineMatrix.constant(np.zeros((3, 1)), 1),
            C=np.array([[1.0, 0, 0]]), basis=b, X=van_der_pol_model().X, theta_vertices=np.array([[0.0]]),
        )
        T = lmi.assemble_synthesis_lmi(m, np.array([2.0, 0, 0]), [0.0], 0.5, np.eye(3), np.eye(3),
                                       np.zeros((1, 3)), np.zeros((1, 6)), np.zeros((20, 12)))
        np.testing.assert_allclose(T[:3, :3], -0.5 * np.eye(3))
        np.testing.assert_allclose(T[9:11, 9:11], -0.5 * np.eye(2))
        np.testing.assert_allclose(T[11:14, 11:14], -np.eye(3))
        # zero lifted blocks: not strictly negative without L
        assert np.linalg.eigvalsh(T)[-1] == pytest.approx(0.0)

    @settings(max_examples=20)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95), st.sampled_from([-2.0, 2.0, 0.7]))
    def test_matches_hand_assembly(self, seed, mu, x1):
        rng = np.random.default_rng(seed)
        m = van_der_pol_model(0.1)
        theta = 0.75
        Q, G = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        Q = Q + Q.T
        M0, M1, L = rng.normal(size=(1, 3)), rng.normal(size=(1, 6)), rng.normal(size=(20, 12))
        got = lmi.assemble_synthesis_lmi(m, np.array([x1, 0, 0]), [theta], mu, Q, G, M0, M1, L)
        A0, A1 = vdp_lifted_blocks(0.1, theta)
        Bu = np.array([[0], [0.1], [0]])
        ref = decrease_lmi_by_hand(A0, A1, Bu, np.hstack([Bu, Bu]), Q, G, M0, M1, L, mu, x1)
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_size(self):
        m = van_der_pol_model()
        T = lmi.assemble_synthesis_lmi(m, np.zeros(3), [0.7], 0.3, np.eye(3), np.eye(3),
                                       np.zeros((1, 3)), np.zeros((1, 6)), np.zeros((20, 12)))
        assert T.shape == (20, 20)


# ---------------------------------------------------------------------------
# Gains and ellipsoid
# ---------------------------------------------------------------------------

class TestGains:
    def test_identity_g(self):
        b = MonomialBasis(3, 2, (0,))
        M0, M1 = np.array([[1.0, 2, 3]]), np.arange(6.0)[None, :]
        K0, K1, _ = lmi.recover_gains(M0, M1, np.eye(3), b)
        np.testing.assert_array_equal(K0, M0)
        np.testing.assert_array_equal(K1, M1)

    @given(st.integers(0, 2**31 - 1))
    def test_block_commutation(self, seed):
        rng = np.random.default_rng(seed)
        b = MonomialBasis(3, 2, (0, 1))
        G = rng.normal(size=(3, 3))
        Ga = np.kron(np.eye(b.n_m), G)
        for _ in range(100 // 20):
            x = rng.normal(size=3)
            Pi = eval_pi(b, x)
            np.testing.assert_allclose(Ga @ Pi, Pi @ G, atol=1e-12)

    @given(st.integers(0, 2**31 - 1))
    def test_recovery_inverts_change_of_variables(self, seed):
        rng = np.random.default_rng(seed)
        b = MonomialBasis(3, 2, (0,))
        G = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        K0, K1 = rng.normal(size=(1, 3)), rng.normal(size=(1, 6))
        k0, k1, _ = lmi.recover_gains(K0 @ G, K1 @ np.kron(np.eye(2), G), G, b)
        np.testing.assert_allclose(k0, K0, atol=1e-10)
        np.testing.assert_allclose(k1, K1, atol=1e-10)

    def test_singular_g(self):
        with pytest.raises(np.linalg.LinAlgError):
            lmi.recover_gains(np.ones((1, 3)), np.ones((1, 6)), np.zeros((3, 3)), MonomialBasis(3, 2, (0,)))

    def test_gain_vanishes_at_origin(self, fixed_solution):
        sol, _ = fixed_solution
        assert np.all(sol.gain()(np.zeros(3)) == 0)


class TestEllipsoid:
    def test_ball(self):
        e = lmi.reachable_ellipsoid(4 * np.eye(3))
        assert e.contains(np.array([2.0, 0, 0]))
        assert not e.contains(np.array([2.01, 0, 0]))
        assert e.contains(np.zeros(3))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            lmi.reachable_ellipsoid(np.diag([1.0, -1.0]))


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

class TestSolve:
    def test_fixed_theta_invariants(self, fixed_solution, vdp):
        sol, _ = fixed_solution
        assert np.linalg.eigvalsh(sol.Q)[0] > 0
        assert np.linalg.eigvalsh(sol.G + sol.G.T - sol.Q)[0] > 0
        assert sol.lambda_ >= np.linalg.eigvalsh(sol.Q)[-1] - 1e-7
        np.testing.assert_allclose(sol.K0, sol.M0 @ np.linalg.inv(sol.G), rtol=1e-8)
        m = lmi.constraint_margins(vdp, sol.Q, sol.G, sol.M0, sol.M1, sol.L, sol.mu, sol.thetas, sol.lambda_)
        assert m.ok(sol.strictness_eps)

    def test_hand_assembled_recheck(self, fixed_solution):
        """Margins re-derived from the independent block layout."""
        sol, _ = fixed_solution
        A0, A1 = vdp_lifted_blocks(0.1, 0.75)
        Bu = np.array([[0], [0.1], [0]])
        for x1 in (-2.0, 2.0):
            T = decrease_lmi_by_hand(A0, A1, Bu, np.hstack([Bu, Bu]), sol.Q, sol.G, sol.M0, sol.M1, sol.L, 0.3, x1)
            assert np.linalg.eigvalsh((T + T.T) / 2)[-1] <= -sol.strictness_eps

    def test_gain_structure(self, fixed_solution):
        sol, _ = fixed_solution
        assert sol.K0.shape == (1, 3) and sol.K1.shape == (1, 6)
        # only x1 enters the lifting: K(x) entries are polynomials of degree <= 2 in x1
        g = sol.gain()
        x = np.array([0.3, -0.1, 0.2])
        k = lambda s: g.matrix(np.array([s, 0.0, 0.0]))
        c0, c1, c2 = k(0.0), (k(1.0) - k(-1.0)) / 2, (k(1.0) + k(-1.0)) / 2 - k(0.0)
        np.testing.assert_allclose(g.matrix(x), c0 + c1 * 0.3 + c2 * 0.09, atol=1e-9)

    def test_reference_gain_magnitudes(self, fixed_solution):
        sol, _ = fixed_solution
        ref = np.array([-68.42, -16.73, -90.99])
        np.testing.assert_allclose(sol.K0[0], ref, rtol=0.05)

    def test_robust_vertices_feasible(self, vdp):
        sol = lmi.solve_synthesis(lmi.SynthesisProblem(vdp, 0.3, minimize_lambda=False))
        assert len(sol.thetas) == 2
        m = lmi.constraint_margins(vdp, sol.Q, sol.G, sol.M0, sol.M1, sol.L, 0.3, sol.thetas)
        assert m.min_decrease >= sol.strictness_eps

    def test_aggressive_mu_infeasible(self, vdp):
        with pytest.raises(lmi.Infeasible):
            lmi.solve_synthesis(lmi.SynthesisProblem(vdp, 0.999, thetas=[0.75]))

    def test_scalar_plant_without_lifting(self):
        m = scalar_plant(0.5)
        sol = lmi.solve_synthesis(lmi.SynthesisProblem(m, 0.5, minimize_lambda=False))
        assert sol.K1.shape == (1, 0)
        # closed loop a + k must satisfy (a+k)^2 < 1 - mu for the decrease condition without w
        assert (0.5 + sol.K0[0, 0]) ** 2 < 0.5

    def test_line_search_single_point(self, vdp):
        sol = lmi.line_search_mu(lmi.SynthesisProblem(vdp, 0.5, thetas=[0.75]), [0.3])
        assert sol.mu == 0.3
        assert set(sol.mu_curve) == {0.3}

    def test_line_search_all_infeasible(self, vdp):
        with pytest.raises(lmi.AllInfeasible):
            lmi.line_search_mu(lmi.SynthesisProblem(vdp, 0.5, thetas=[0.75]), [0.999])

    def test_line_search_rejects_bad_grid(self, vdp):
        with pytest.raises(ValueError):
            lmi.line_search_mu(lmi.SynthesisProblem(vdp, 0.5), [1.2])

    def test_problem_validation(self, vdp):
        with pytest.raises(ValueError):
            lmi.SynthesisProblem(vdp, 1.0)
        with pytest.raises(ValueError):
            lmi.SynthesisProblem(vdp, 0.3, strictness_eps=0)

    def test_backend_failure_reported(self, vdp):
        class Broken(CvxpyBackend):
            def solve(self):
                return "solver_error"

        with pytest.raises(lmi.BackendFailure):
            lmi.solve_synthesis(lmi.SynthesisProblem(vdp, 0.3, thetas=[0.75], backend=Broken))

    def test_backend_is_pluggable(self):
        assert issubclass(CvxpyBackend, ConicBackend)


class TestSolutionFile:
    def test_round_trip(self, fixed_solution, tmp_path):
        sol, _ = fixed_solution
        sol.save(tmp_path / "s.json")
        back = lmi.SynthesisSolution.load(tmp_path / "s.json")
        for k in ("Q", "G", "M0", "M1", "L", "K0", "K1"):
            np.testing.assert_array_equal(getattr(back, k), getattr(sol, k))
        assert back.lambda_ == sol.lambda_ and back.mu == sol.mu
        np.testing.assert_array_equal(back.P, sol.P)


# ---------------------------------------------------------------------------
# Sampling certificate
# ---------------------------------------------------------------------------

class TestIssCertificate:
    def test_origin_never_violates(self, fixed_solution, vdp):
        sol, _ = fixed_solution
        r = one_step_residual(vdp.A(np.zeros(3), [0.75]), vdp.Bu([0.75]), vdp.Bw([0.75]),
                              sol.gain().matrix(np.zeros(3)), sol.P, sol.mu, np.zeros(3), np.zeros(2))
        assert r == 0

    def test_matches_oracle_residual(self, fixed_solution, vdp):
        sol, _ = fixed_solution
        rep = lmi.verify_iss_decrease(sol, vdp, n_samples=300, rng_seed=3)
        # recompute the worst residual over the same draws with the oracle
        rng = np.random.default_rng(3)
        Lc = np.linalg.cholesky(sol.Q)
        z = rng.standard_normal((300, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        xs = z * rng.random((300, 1)) ** (1 / 3) @ Lc.T
        z = rng.standard_normal((300, 2))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        ws = z * rng.random((300, 1)) ** (1 / 2)
        thetas = [0.5, 0.9, 0.7]
        worst = max(
            one_step_residual(vdp.A(x, [thetas[i % 3]]), vdp.Bu([thetas[i % 3]]), vdp.Bw([thetas[i % 3]]),
                              sol.gain().matrix(x), sol.P, sol.mu, x, w)
            for i, (x, w) in enumerate(zip(xs, ws)))
        assert rep.max_residual == pytest.approx(worst, rel=1e-9, abs=1e-12)

    def test_samples_fill_ellipsoid(self, fixed_solution):
        sol, _ = fixed_solution
        rng = np.random.default_rng(0)
        Lc = np.linalg.cholesky(sol.Q)
        xs = lmi._uniform_ball(rng, 20000, 3) @ Lc.T
        v = sol.ellipsoid.value(xs)
        assert v.max() <= 1 + 1e-12
        # uniform in a 3-ball: P(V <= 1/8) = (1/2)^3
        assert np.mean(v <= 0.25) == pytest.approx(0.125, abs=0.01)

    def test_norm_bound_on_reachable_set(self, fixed_solution):
        sol, _ = fixed_solution
        rng = np.random.default_rng(1)
        xs = lmi._uniform_ball(rng, 5000, 3) @ np.linalg.cholesky(sol.Q).T
        assert np.linalg.norm(xs, axis=1).max() <= np.sqrt(sol.lambda_) + 1e-12
