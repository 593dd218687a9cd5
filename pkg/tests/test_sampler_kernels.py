import numpy as np
import pytest

from latentmc import sampler as sm


class QuadraticPosterior:
    """Standard-Gaussian potential U(z) = ||z||^2 / 2 with call counting."""

    def __init__(self, dim):
        self.latent_dim = dim
        self.grad_evals = 0

    def potential_and_grad(self, z):
        self.grad_evals += 1
        z = np.asarray(z, dtype=np.float64).ravel()
        return 0.5 * float(z @ z), z.copy()


class FlatPosterior:
    """Zero potential everywhere (free particle)."""

    def __init__(self, dim):
        self.latent_dim = dim

    def potential_and_grad(self, z):
        z = np.asarray(z, dtype=np.float64).ravel()
        return 0.0, np.zeros_like(z)


def _state(posterior, z, r):
    u, g = posterior.potential_and_grad(z)
    return sm.ChainState(z=np.asarray(z, float), r=np.asarray(r, float), potential=u, grad=g)


def test_kinetic_momentum_zero_is_constant_only():
    mass = np.array([1.0, 4.0])
    const = 0.5 * np.sum(np.log(2 * np.pi * mass))
    assert sm.kinetic(np.zeros(2), mass) == pytest.approx(const)


def test_kinetic_identity_mass_value():
    const = 0.5 * 2 * np.log(2 * np.pi)
    assert sm.kinetic(np.array([3.0, 4.0]), np.ones(2)) - const == pytest.approx(12.5)


def test_kinetic_matches_elementwise_sum():
    rng = np.random.default_rng(0)
    r = rng.standard_normal(6)
    mass = np.abs(rng.standard_normal(6)) + 0.2
    expected = 0.5 * np.sum(r**2 / mass) + 0.5 * np.sum(np.log(2 * np.pi * mass))
    assert sm.kinetic(r, mass) == pytest.approx(expected, rel=1e-12)


def test_leapfrog_free_particle_moves_linearly():
    posterior = FlatPosterior(3)
    mass = np.array([1.0, 2.0, 0.5])
    params = sm.HmcParams(epsilon=0.3, n_leapfrog=7, mass=mass)
    z0 = np.array([1.0, -1.0, 0.5])
    r0 = np.array([0.4, 0.2, -0.6])
    state = _state(posterior, z0, r0)
    prop, diverged = sm.leapfrog(state, posterior, params)
    assert not diverged
    np.testing.assert_allclose(prop.z, z0 + 7 * 0.3 * r0 / mass, atol=1e-12)
    np.testing.assert_allclose(prop.r, r0, atol=1e-12)


def test_leapfrog_gradient_evaluation_budget():
    posterior = QuadraticPosterior(4)
    state = _state(posterior, np.ones(4), np.zeros(4))
    posterior.grad_evals = 0
    params = sm.HmcParams(epsilon=0.05, n_leapfrog=13)
    sm.leapfrog(state, posterior, params)
    # cached start gradient + n_leapfrog fresh evaluations = n+1 gradient values
    assert posterior.grad_evals == params.n_leapfrog


def test_leapfrog_reversibility():
    posterior = QuadraticPosterior(3)
    rng = np.random.default_rng(1)
    params = sm.HmcParams(epsilon=0.11, n_leapfrog=9)
    z0, r0 = rng.standard_normal(3), rng.standard_normal(3)
    forward, _ = sm.leapfrog(_state(posterior, z0, r0), posterior, params)
    back, _ = sm.leapfrog(
        sm.ChainState(z=forward.z, r=-forward.r, potential=forward.potential, grad=forward.grad),
        posterior,
        params,
    )
    assert np.abs(back.z - z0).max() < 1e-10
    assert np.abs(-back.r - r0).max() < 1e-10


def test_leapfrog_energy_error_is_second_order():
    posterior = QuadraticPosterior(1)
    steps = np.array([0.2, 0.1, 0.05, 0.025])
    errors = []
    for eps in steps:
        params = sm.HmcParams(epsilon=eps, n_leapfrog=int(round(2.0 / eps)))
        state = _state(posterior, np.array([1.0]), np.array([0.3]))
        prop, _ = sm.leapfrog(state, posterior, params)
        h0 = state.potential + sm.kinetic(state.r, np.ones(1))
        h1 = prop.potential + sm.kinetic(prop.r, np.ones(1))
        errors.append(abs(h1 - h0))
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert abs(slope - 2.0) <= 0.1


def test_leapfrog_divergence_flag_on_non_finite():
    class Exploding:
        latent_dim = 1

        def potential_and_grad(self, z):
            return np.inf, np.array([np.nan])

    posterior = Exploding()
    state = sm.ChainState(z=np.zeros(1), r=np.ones(1), potential=0.0, grad=np.zeros(1))
    prop, diverged = sm.leapfrog(state, posterior, sm.HmcParams(epsilon=0.1, n_leapfrog=2))
    assert diverged and prop is None


def test_hmc_flat_potential_always_accepts_with_unit_alpha():
    posterior = FlatPosterior(2)
    rng = np.random.default_rng(2)
    state = _state(posterior, np.zeros(2), np.zeros(2))
    for _ in range(50):
        new_state, accepted, diverged, alpha = sm._hmc_transition(
            state, posterior, sm.HmcParams(epsilon=0.2, n_leapfrog=3), rng
        )
        assert accepted and not diverged
        assert alpha == 1.0  # delta H is exactly zero for a free particle
        state = new_state


def test_hmc_step_rejection_keeps_position():
    class Wall:
        latent_dim = 1

        def potential_and_grad(self, z):
            z = np.asarray(z, float).ravel()
            # huge uphill potential away from the origin forces rejection
            return 1e6 * float(z @ z), 2e6 * z

    posterior = Wall()
    state = sm.ChainState(z=np.zeros(1), potential=0.0, grad=np.zeros(1))
    rng = np.random.default_rng(3)
    new_state, accepted = sm.hmc_step(state, posterior, sm.HmcParams(epsilon=0.5, n_leapfrog=3), rng)
    assert not accepted
    np.testing.assert_array_equal(new_state.z, state.z)


def test_hmc_pcn_rejection_retains_both_position_and_momentum():
    class Wall:
        latent_dim = 2

        def potential_and_grad(self, z):
            z = np.asarray(z, float).ravel()
            return 1e8 * float(z @ z), 2e8 * z

    posterior = Wall()
    rng = np.random.default_rng(4)
    r0 = rng.standard_normal(2)
    state = sm.ChainState(z=np.zeros(2), r=r0.copy(), potential=0.0, grad=np.zeros(2))
    # beta = 0 keeps the momentum through the refresh, exposing the raw retain
    params = sm.HmcParams(epsilon=0.3, n_leapfrog=2, beta=0.0)
    new_state, accepted, diverged, _ = sm._hmc_pcn_transition(state, posterior, params, rng)
    assert not accepted
    np.testing.assert_array_equal(new_state.z, state.z)
    np.testing.assert_array_equal(new_state.r, r0)


def test_momentum_refresh_limits():
    rng = np.random.default_rng(5)
    r = rng.standard_normal(8)
    mass = np.ones(8)
    np.testing.assert_array_equal(sm.refresh_momentum(r, 0.0, mass, rng), r)
    full = sm.refresh_momentum(r, 1.0, mass, np.random.default_rng(6))
    expected = np.random.default_rng(6).standard_normal(8)
    np.testing.assert_allclose(full, expected, atol=1e-12)


@pytest.mark.parametrize("beta", [0.1, 0.5, 0.9])
def test_momentum_refresh_preserves_gaussian_marginal(beta):
    rng = np.random.default_rng(7)
    mass = np.array([1.0, 2.5, 0.5])
    draws = np.sqrt(mass) * rng.standard_normal((100000, 3))
    refreshed = np.sqrt(1 - beta**2) * draws + beta * np.sqrt(mass) * rng.standard_normal(draws.shape)
    cov = np.cov(refreshed.T)
    assert np.abs(np.diag(cov) - mass).max() <= 0.03 * mass.max()
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() <= 0.03 * mass.max()


def test_pcn_step_small_beta_accepts():
    class Gauss:
        latent_dim = 3
        phi_includes_prior = False

        def pcn_potential(self, z):
            z = np.asarray(z, float).ravel()
            return 0.1 * float(z @ z)

    posterior = Gauss()
    rng = np.random.default_rng(8)
    state = sm.ChainState(z=np.zeros(3), potential=0.0)
    accepted_count = 0
    for _ in range(200):
        state, accepted = sm.pcn_step(state, posterior, 1e-4, rng)
        accepted_count += accepted
    assert accepted_count >= 199  # alpha -> 1 as beta -> 0


def test_pcn_step_rejects_invalid_beta():
    state = sm.ChainState(z=np.zeros(2), potential=0.0)
    with pytest.raises(ValueError):
        sm.pcn_step(state, None, 0.0, np.random.default_rng(0))


def test_hmc_params_validation():
    with pytest.raises(ValueError):
        sm.HmcParams(epsilon=-0.1)
    with pytest.raises(ValueError):
        sm.HmcParams(n_leapfrog=0)
    with pytest.raises(ValueError):
        sm.HmcParams(beta=1.5)
    with pytest.raises(ValueError):
        sm.HmcParams(mass=np.array([1.0, -1.0]))
