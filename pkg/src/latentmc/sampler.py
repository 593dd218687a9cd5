"""Posterior specifications and MCMC transition kernels.

The latent posterior combines the linear measurement operator, the generator
network, and a Gaussian noise level into the potential

    U(z) = ||y_obs - A G(z)||^2 / (2 sigma^2) + ||z||^2 / 2,

with the gradient assembled from the operator adjoint and the generator's
vector-Jacobian product. Kernels: plain HMC (full momentum resampling),
HMC with partial momentum refresh through the autoregressive Gaussian
proposal, and the dimension-robust pCN kernel (latent or image space with a
total-variation prior).

Sign conventions: the leapfrog kick is r <- r - (eps/2) grad U(z) and the
kinetic energy is K(r) = r^T M^{-1} r / 2 plus the log-normalizer of
N(0, M); this self-consistent pair conserves energy to second order.
"""

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .forward_model import RadonGeometry, Sinogram, projection_matrix
from .network.spectral import operator_norm

DIVERGENCE_THRESHOLD = 1000.0  # |delta H| beyond this marks a divergent proposal

CHAIN_MAGIC = b"LMCCHN01"

CHAIN_KINDS = ("hmc", "hmc-pcn", "pcn-latent", "pcn-tv")


class PoisonedStateError(RuntimeError):
    """The generator produced non-finite activations at the current state."""


class ChainFormatError(IOError):
    """Malformed chain record file."""


# ---------------------------------------------------------------------------
# Measurement operators
# ---------------------------------------------------------------------------


class RadonOperator:
    """Measurement operator backed by the sparse projection matrix."""

    def __init__(self, geom):
        self.geometry = geom
        self.in_shape = (geom.image_side, geom.image_side)
        self.out_shape = (geom.n_angles, geom.n_detectors)
        self._matrix = projection_matrix(geom)

    def apply(self, image):
        return (self._matrix @ np.asarray(image).ravel()).reshape(self.out_shape)

    def adjoint(self, meas):
        return (self._matrix.T @ np.asarray(meas).ravel()).reshape(self.in_shape)

    def norm(self):
        return operator_norm(self.apply, self.adjoint, self.in_shape)


class MatrixOperator:
    """Dense measurement operator, mainly for analytic fixtures."""

    def __init__(self, matrix, in_shape, out_shape):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (int(np.prod(out_shape)), int(np.prod(in_shape))):
            raise ValueError(f"matrix shape {matrix.shape} does not map {in_shape} to {out_shape}")
        self.matrix = matrix
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)

    def apply(self, image):
        return (self.matrix @ np.asarray(image).ravel()).reshape(self.out_shape)

    def adjoint(self, meas):
        return (self.matrix.T @ np.asarray(meas).ravel()).reshape(self.in_shape)

    def norm(self):
        return float(np.linalg.svd(self.matrix, compute_uv=False)[0])


def dense_operator_matrix(operator):
    """Materialize any operator as a dense matrix (for closed-form oracles)."""
    if isinstance(operator, MatrixOperator):
        return operator.matrix.copy()
    d = int(np.prod(operator.in_shape))
    basis = np.zeros(operator.in_shape)
    cols = []
    for i in range(d):
        basis.ravel()[i] = 1.0
        cols.append(operator.apply(basis).ravel().copy())
        basis.ravel()[i] = 0.0
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Posteriors
# ---------------------------------------------------------------------------


def _measurement_array(measurement):
    if isinstance(measurement, Sinogram):
        return measurement.values
    return np.asarray(measurement, dtype=np.float64)


class LatentPosterior:
    """Posterior over the generator's latent space given a noisy sinogram."""

    def __init__(self, operator, generator, measurement, sigma, phi_includes_prior=False):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.operator = operator
        self.generator = generator
        self.measurement = _measurement_array(measurement)
        if self.measurement.shape != tuple(operator.out_shape):
            raise ValueError(
                f"measurement shape {self.measurement.shape} != operator output {operator.out_shape}"
            )
        out = generator.output_shape
        if (out[0], out[1]) != tuple(operator.in_shape) or out[2] != 1:
            raise ValueError(
                f"generator output {out} does not feed operator input {operator.in_shape}"
            )
        self.sigma = float(sigma)
        self.phi_includes_prior = bool(phi_includes_prior)
        self.latent_dim = int(np.prod(generator.input_shape))

    def _image(self, out):
        return out.reshape(out.shape[0], out.shape[1])

    def _poison_check(self, z, out):
        if np.all(np.isfinite(out)):
            return
        x = np.asarray(z, dtype=np.float64).reshape(self.generator.input_shape)
        for layer in self.generator.layers:
            x, _ = layer.forward(x)
            if not np.all(np.isfinite(x)):
                raise PoisonedStateError(
                    f"non-finite activations after layer {layer.name!r} ({layer.kind})"
                )
        raise PoisonedStateError("non-finite generator output")

    def likelihood_potential(self, z):
        """Data-misfit potential ||y_obs - A G(z)||^2 / (2 sigma^2)."""
        out = self.generator.forward(z)
        self._poison_check(z, out)
        residual = self.operator.apply(self._image(out)) - self.measurement
        return float(np.sum(residual * residual)) / (2.0 * self.sigma**2)

    def pcn_potential(self, z):
        """Potential used in the pCN acceptance ratio.

        The Gaussian prior is the preserved reference measure of the pCN
        proposal, so by default only the likelihood enters. The compat flag
        adds the ||z||^2/2 term back in.
        """
        phi = self.likelihood_potential(z)
        if self.phi_includes_prior:
            phi += 0.5 * float(np.dot(np.ravel(z), np.ravel(z)))
        return phi

    def potential_value(self, z):
        z = np.asarray(z, dtype=np.float64).ravel()
        return self.likelihood_potential(z) + 0.5 * float(z @ z)

    def potential_and_grad(self, z):
        """U(z) and its gradient via the operator adjoint and generator VJP."""
        z = np.asarray(z, dtype=np.float64).ravel()
        out, pullback = self.generator.linearize(z)
        self._poison_check(z, out)
        residual = self.operator.apply(self._image(out)) - self.measurement
        u = float(np.sum(residual * residual)) / (2.0 * self.sigma**2) + 0.5 * float(z @ z)
        cot = self.operator.adjoint(residual / self.sigma**2)
        grad = pullback(cot.reshape(self.generator.output_shape)).ravel() + z
        return u, grad


def total_variation(image):
    """Anisotropic total variation with reflecting boundaries."""
    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(image, axis=0)).sum() + np.abs(np.diff(image, axis=1)).sum())


class TvPosterior:
    """Image-space posterior with a total-variation prior, for pCN baselines."""

    def __init__(self, measurement, sigma, tau, image_side=None, operator=None):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        if tau <= 0:
            raise ValueError("tau must be positive")
        if operator is None:
            if not isinstance(measurement, Sinogram):
                raise ValueError("an operator is required when the measurement is a bare array")
            operator = RadonOperator(measurement.geometry)
        self.operator = operator
        self.measurement = _measurement_array(measurement)
        self.sigma = float(sigma)
        self.tau = float(tau)
        self.image_side = int(image_side if image_side is not None else operator.in_shape[0])
        self.latent_dim = int(np.prod(operator.in_shape))

    def pcn_potential(self, x):
        """Likelihood plus TV prior, minus the Gaussian reference correction.

        The pCN proposal preserves N(0, I); writing the TV posterior as
        exp(-phi(x)) N(x; 0, I) requires phi to subtract the reference
        quadratic, so phi = misfit + tau TV(x) - ||x||^2 / 2.
        """
        x = np.asarray(x, dtype=np.float64).ravel()
        image = x.reshape(self.operator.in_shape)
        residual = self.operator.apply(image) - self.measurement
        misfit = float(np.sum(residual * residual)) / (2.0 * self.sigma**2)
        return misfit + self.tau * total_variation(image) - 0.5 * float(x @ x)

    def log_density_potential(self, x):
        """Negative log posterior density (misfit + TV), for diagnostics."""
        x = np.asarray(x, dtype=np.float64).ravel()
        image = x.reshape(self.operator.in_shape)
        residual = self.operator.apply(image) - self.measurement
        return float(np.sum(residual * residual)) / (2.0 * self.sigma**2) + self.tau * total_variation(image)


# ---------------------------------------------------------------------------
# States and parameters
# ---------------------------------------------------------------------------


@dataclass
class ChainState:
    """One MCMC walker: position, momentum, and cached potential/gradient."""

    z: np.ndarray
    r: np.ndarray = None
    potential: float = np.nan
    grad: np.ndarray = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).ravel()
        if self.r is not None:
            self.r = np.asarray(self.r, dtype=np.float64).ravel()
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=np.float64).ravel()


@dataclass(frozen=True)
class HmcParams:
    """Kernel parameters; `beta` doubles as the pCN step/refresh parameter."""

    epsilon: float = None  # None -> dual-averaging warmup during burn-in
    n_leapfrog: int = 10
    beta: float = 0.5
    mass: np.ndarray = None  # diagonal entries; None -> identity

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.n_leapfrog < 1:
            raise ValueError("n_leapfrog must be at least 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.mass is not None:
            mass = np.asarray(self.mass, dtype=np.float64).ravel()
            if np.any(mass <= 0):
                raise ValueError("mass entries must be positive")
            object.__setattr__(self, "mass", mass)

    def mass_diag(self, dim):
        if self.mass is None:
            return np.ones(dim)
        if self.mass.size == 1:
            return np.full(dim, float(self.mass[0]))
        if self.mass.size != dim:
            raise ValueError(f"mass has {self.mass.size} entries for dimension {dim}")
        return self.mass


def kinetic(r, mass):
    """Gaussian kinetic energy r^T M^{-1} r / 2 plus the N(0, M) normalizer.

    The constant keeps Hamiltonian differences meaningful if the mass matrix
    changes between runs; within one chain it cancels in every ratio.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    mass = np.asarray(mass, dtype=np.float64).ravel()
    if mass.shape != r.shape:
        raise ValueError("mass diagonal and momentum must have matching sizes")
    return 0.5 * float(np.sum(r * r / mass)) + 0.5 * float(np.sum(np.log(2.0 * np.pi * mass)))


def potential(posterior, z):
    """U(z) and grad U(z) for the latent posterior (module-level convenience)."""
    return posterior.potential_and_grad(z)


# ---------------------------------------------------------------------------
# Leapfrog and transition kernels
# ---------------------------------------------------------------------------


def leapfrog(state, posterior, params):
    """Run n_leapfrog steps with fused half-kicks.

    Uses the cached gradient of the input state, so each proposal costs
    n_leapfrog fresh gradient evaluations (n_leapfrog + 1 gradient values
    enter the integration). Returns (proposal, diverged); a non-finite
    trajectory reports diverged = True and no proposal.
    """
    eps = params.epsilon
    if eps is None or eps <= 0:
        raise ValueError("leapfrog requires a positive epsilon")
    mass = params.mass_diag(state.z.size)
    inv_mass = 1.0 / mass
    z = state.z
    r = state.r - 0.5 * eps * state.grad
    grad = None
    u = np.nan
    for step in range(params.n_leapfrog):
        z = z + eps * inv_mass * r
        if not np.all(np.isfinite(z)):
            return None, True
        try:
            u, grad = posterior.potential_and_grad(z)
        except PoisonedStateError:
            return None, True
        if not (np.isfinite(u) and np.all(np.isfinite(grad))):
            return None, True
        if step < params.n_leapfrog - 1:
            r = r - eps * grad
    r = r - 0.5 * eps * grad
    if not np.all(np.isfinite(r)):
        return None, True
    return ChainState(z=z, r=r, potential=u, grad=grad), False


def _ensure_caches(state, posterior):
    if state.grad is None or not np.isfinite(state.potential):
        u, g = posterior.potential_and_grad(state.z)
        return replace(state, potential=u, grad=g)
    return state


def _hmc_transition(state, posterior, params, rng):
    """Full-refresh HMC. Returns (state, accepted, diverged, accept_prob)."""
    mass = params.mass_diag(state.z.size)
    r0 = np.sqrt(mass) * rng.standard_normal(state.z.size)
    start = replace(state, r=r0)
    h0 = start.potential + kinetic(r0, mass)
    prop, diverged = leapfrog(start, posterior, params)
    if not diverged:
        h1 = prop.potential + kinetic(prop.r, mass)
        delta = h0 - h1
        if not np.isfinite(delta) or abs(delta) > DIVERGENCE_THRESHOLD:
            diverged = True
    if diverged:
        return state, False, True, 0.0
    alpha = min(1.0, float(np.exp(min(delta, 0.0))))
    if rng.uniform() < alpha:
        return replace(prop, r=None), True, False, alpha
    return state, False, False, alpha


def _hmc_pcn_transition(state, posterior, params, rng):
    """Leapfrog from persistent momentum, joint accept, then partial refresh.

    On acceptance both position and momentum are replaced; on rejection both
    are retained. The refresh r <- sqrt(1-beta^2) r + beta xi, xi ~ N(0, M)
    is applied either way and preserves the momentum marginal N(0, M).
    """
    mass = params.mass_diag(state.z.size)
    if state.r is None:
        state = replace(state, r=np.sqrt(mass) * rng.standard_normal(state.z.size))
    h0 = state.potential + kinetic(state.r, mass)
    prop, diverged = leapfrog(state, posterior, params)
    alpha = 0.0
    accepted = False
    current = state
    if not diverged:
        h1 = prop.potential + kinetic(prop.r, mass)
        delta = h0 - h1
        if not np.isfinite(delta) or abs(delta) > DIVERGENCE_THRESHOLD:
            diverged = True
        else:
            alpha = min(1.0, float(np.exp(min(delta, 0.0))))
            if rng.uniform() < alpha:
                current = prop
                accepted = True
    beta = params.beta
    xi = np.sqrt(mass) * rng.standard_normal(state.z.size)
    refreshed = np.sqrt(1.0 - beta**2) * current.r + beta * xi
    return replace(current, r=refreshed), accepted, diverged, alpha


def refresh_momentum(r, beta, mass, rng):
    """Partial momentum refresh: sqrt(1-beta^2) r + beta xi, xi ~ N(0, M)."""
    r = np.asarray(r, dtype=np.float64).ravel()
    mass = np.asarray(mass, dtype=np.float64).ravel()
    xi = np.sqrt(mass) * rng.standard_normal(r.size)
    return np.sqrt(1.0 - beta**2) * r + beta * xi


def _pcn_transition(state, posterior, beta, rng):
    """Autoregressive Gaussian proposal preserving N(0, I)."""
    z = state.z
    proposal = np.sqrt(1.0 - beta**2) * z + beta * rng.standard_normal(z.size)
    phi_new = posterior.pcn_potential(proposal)
    delta = state.potential - phi_new
    alpha = min(1.0, float(np.exp(min(delta, 0.0)))) if np.isfinite(delta) else 0.0
    if rng.uniform() < alpha:
        return ChainState(z=proposal, potential=phi_new), True, False, alpha
    return state, False, False, alpha


def hmc_step(state, posterior, params, rng):
    """One full-refresh HMC transition: (new_state, accepted)."""
    state = _ensure_caches(state, posterior)
    new_state, accepted, _, _ = _hmc_transition(state, posterior, params, rng)
    return new_state, accepted


def hmc_pcn_step(state, posterior, params, rng):
    """One HMC transition with pCN partial momentum refresh: (new_state, accepted)."""
    state = _ensure_caches(state, posterior)
    new_state, accepted, _, _ = _hmc_pcn_transition(state, posterior, params, rng)
    return new_state, accepted


def pcn_step(state, posterior, beta, rng):
    """One pCN transition against `posterior.pcn_potential`: (new_state, accepted)."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("pCN beta must lie in (0, 1]")
    if not np.isfinite(state.potential):
        state = ChainState(z=state.z, potential=posterior.pcn_potential(state.z))
    new_state, accepted, _, _ = _pcn_transition(state, posterior, beta, rng)
    return new_state, accepted


# ---------------------------------------------------------------------------
# Step-size adaptation (dual averaging, frozen after burn-in)
# ---------------------------------------------------------------------------


class _DualAveraging:
    """Nesterov dual averaging on log epsilon toward a target accept rate."""

    def __init__(self, eps0, target=0.65, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        weight = self.t ** (-self.kappa)
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    def frozen(self):
        return float(np.exp(self.log_eps_bar))


def _find_reasonable_epsilon(state, posterior, params, rng):
    """Double/halve epsilon until a single step's accept probability crosses 1/2."""
    mass = params.mass_diag(state.z.size)
    eps = 1.0
    r0 = np.sqrt(mass) * rng.standard_normal(state.z.size)
    start = replace(state, r=r0)
    h0 = start.potential + kinetic(r0, mass)

    def log_ratio(eps_try):
        probe = replace(params, epsilon=eps_try, n_leapfrog=1)
        prop, diverged = leapfrog(start, posterior, probe)
        if diverged:
            return -np.inf
        return h0 - (prop.potential + kinetic(prop.r, mass))

    ratio = log_ratio(eps)
    direction = 1.0 if ratio > np.log(0.5) else -1.0
    for _ in range(60):
        eps = eps * (2.0**direction)
        ratio = log_ratio(eps)
        if direction * ratio <= direction * np.log(0.5):
            break
    return max(eps, 1e-8)


# ---------------------------------------------------------------------------
# Chain driver and record
# ---------------------------------------------------------------------------


@dataclass
class ChainRecord:
    """Thinned draws plus the bookkeeping needed to reproduce them."""

    kind: str
    samples: np.ndarray
    potentials: np.ndarray
    accepts: np.ndarray
    accept_count: int
    n_proposals: int
    divergences: int
    seed: int
    latent_dim: int
    params: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self):
        return self.accept_count / self.n_proposals if self.n_proposals else 0.0

    def save(self, path):
        """Write the binary chain container (samples + acceptance trace)."""
        snapshot = dict(self.params)
        snapshot.update(
            kind=self.kind,
            seed=str(self.seed),
            accept_count=str(self.accept_count),
            n_proposals=str(self.n_proposals),
            divergences=str(self.divergences),
        )
        block = "".join(f"{k}={snapshot[k]}\n" for k in sorted(snapshot)).encode("utf-8")
        n, m = self.samples.shape
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(CHAIN_MAGIC)
            fh.write(struct.pack("<I", len(block)))
            fh.write(block)
            fh.write(struct.pack("<QI", n, m))
            fh.write(self.samples.astype("<f4").tobytes(order="C"))
            fh.write(self.accepts.astype(np.uint8).tobytes())
        os.replace(tmp, path)

    def write_diagnostics_csv(self, path):
        """CSV diagnostics: one row per recorded sample (iteration, potential, accept)."""
        burn_in = int(self.params.get("burn_in", 0))
        thin = int(self.params.get("thin", 1))
        lines = ["iteration,potential,accept"]
        for i, (u, _) in enumerate(zip(self.potentials, self.samples)):
            iteration = burn_in + (i + 1) * thin
            acc = int(self.accepts[(i + 1) * thin - 1]) if self.accepts.size else 0
            lines.append(f"{iteration},{u!r},{acc}")
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)


def load_chain(path):
    """Read a chain container back into a ChainRecord (potentials are NaN
    unless recomputed; the CSV sidecar carries them for diagnostics)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHAIN_MAGIC:
        raise ChainFormatError(f"{path}: bad magic, expected {CHAIN_MAGIC!r}")
    pos = 8
    (block_len,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    block = blob[pos : pos + block_len].decode("utf-8")
    pos += block_len
    n, m = struct.unpack("<QI", blob[pos : pos + 12])
    pos += 12
    count = n * m
    samples = np.frombuffer(blob[pos : pos + 4 * count], dtype="<f4").astype(np.float64)
    if samples.size != count:
        raise ChainFormatError(f"{path}: truncated sample payload")
    pos += 4 * count
    accepts = np.frombuffer(blob[pos:], dtype=np.uint8).copy()
    params = {}
    for line in block.splitlines():
        if line and "=" in line:
            key, value = line.split("=", 1)
            params[key] = value
    potentials = np.full(n, np.nan)
    return ChainRecord(
        kind=params.get("kind", "unknown"),
        samples=samples.reshape(n, m),
        potentials=potentials,
        accepts=accepts,
        accept_count=int(params.get("accept_count", 0)),
        n_proposals=int(params.get("n_proposals", max(accepts.size, 1))),
        divergences=int(params.get("divergences", 0)),
        seed=int(params.get("seed", 0)),
        latent_dim=m,
        params=params,
    )


def run_chain(kind, posterior, params, n_samples, burn_in=None, thin=1, seed=0):
    """Drive one chain to completion; deterministic given the seed.

    Burn-in defaults to 20% of the requested samples. With epsilon unset,
    the step size is tuned by dual averaging during burn-in (target accept
    0.65) and frozen afterwards; the frozen value lands in the params
    snapshot. Divergent proposals are auto-rejected and counted.
    """
    if kind not in CHAIN_KINDS:
        raise ValueError(f"unknown chain kind {kind!r}, expected one of {CHAIN_KINDS}")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if thin < 1:
        raise ValueError("thin must be at least 1")
    if burn_in is None:
        burn_in = int(round(0.2 * n_samples))
    rng = np.random.default_rng(seed)
    dim = posterior.latent_dim
    hamiltonian = kind in ("hmc", "hmc-pcn")

    z0 = rng.standard_normal(dim)
    if hamiltonian:
        u0, g0 = posterior.potential_and_grad(z0)
        state = ChainState(z=z0, potential=u0, grad=g0)
        mass = params.mass_diag(dim)
        if kind == "hmc-pcn":
            state = replace(state, r=np.sqrt(mass) * rng.standard_normal(dim))
        eps = params.epsilon
        adapter = None
        if eps is None:
            eps0 = _find_reasonable_epsilon(state, posterior, params, rng)
            adapter = _DualAveraging(eps0)
            eps = eps0
        live_params = replace(params, epsilon=eps)
    else:
        state = ChainState(z=z0, potential=posterior.pcn_potential(z0))
        beta = params.beta
        if not 0.0 < beta <= 1.0:
            raise ValueError("pCN kinds need beta in (0, 1]")
        live_params = params
        adapter = None

    n_transitions = burn_in + n_samples * thin
    samples = np.empty((n_samples, dim))
    potentials = np.empty(n_samples)
    accepts = np.zeros(n_samples * thin, dtype=np.uint8)
    accept_count = 0
    divergences = 0
    emitted = 0

    for t in range(n_transitions):
        if kind == "hmc":
            state, accepted, diverged, aprob = _hmc_transition(state, posterior, live_params, rng)
        elif kind == "hmc-pcn":
            state, accepted, diverged, aprob = _hmc_pcn_transition(state, posterior, live_params, rng)
        else:
            state, accepted, diverged, aprob = _pcn_transition(state, posterior, params.beta, rng)

        if t < burn_in:
            if adapter is not None:
                live_params = replace(live_params, epsilon=adapter.update(aprob))
                if t == burn_in - 1:
                    live_params = replace(live_params, epsilon=adapter.frozen())
            continue

        k = t - burn_in
        accepts[k] = 1 if accepted else 0
        accept_count += int(accepted)
        divergences += int(diverged)
        if (k + 1) % thin == 0:
            samples[emitted] = state.z
            if hamiltonian:
                potentials[emitted] = state.potential
            elif kind == "pcn-tv":
                potentials[emitted] = posterior.log_density_potential(state.z)
            else:
                prior_term = 0.0 if posterior.phi_includes_prior else 0.5 * float(state.z @ state.z)
                potentials[emitted] = state.potential + prior_term
            emitted += 1

    snapshot = {
        "kind": kind,
        "n_samples": str(n_samples),
        "burn_in": str(burn_in),
        "thin": str(thin),
        "beta": repr(float(params.beta)),
        "n_leapfrog": str(params.n_leapfrog),
        "epsilon": repr(float(live_params.epsilon)) if hamiltonian else "",
        "mass": "identity" if params.mass is None else ",".join(repr(v) for v in params.mass),
        "sigma": repr(float(getattr(posterior, "sigma", np.nan))),
    }
    return ChainRecord(
        kind=kind,
        samples=samples,
        potentials=potentials,
        accepts=accepts,
        accept_count=accept_count,
        n_proposals=n_samples * thin,
        divergences=divergences,
        seed=seed,
        latent_dim=dim,
        params=snapshot,
    )


# ---------------------------------------------------------------------------
# Ergodicity preconditions
# ---------------------------------------------------------------------------


@dataclass
class ErgodicityReport:
    """Numerical verification of the growth and local-Lipschitz bounds."""

    k_growth: float
    k_local: float
    radius: float
    operator_norm: float
    generator_at_zero: float
    measurement_norm: float
    lipschitz_bound: float
    max_growth_ratio: float
    max_local_ratio: float
    observed_lipschitz: float
    growth_violations: int
    local_violations: int
    probes: int

    @property
    def ok(self):
        return self.growth_violations == 0 and self.local_violations == 0


def _uniform_ball(rng, n, dim, radius):
    directions = rng.standard_normal((n, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * rng.uniform(size=n) ** (1.0 / dim)
    return directions * radii[:, None]


def check_ergodicity_conditions(posterior, lipschitz, probes=10000, radius=None, rng=None):
    """Probe the polynomial-growth and local-Lipschitz bounds of the misfit.

    The constants follow the spectral-normalization argument: with G having
    Lipschitz constant L and ||G(0)|| = g0,

        k    = max(||y_obs||^2, B^2 ||A||^2) / sigma^2,  B^2 = 2 g0^2 + 2 max(L, L^2)
        k(c) = (L ||A|| / sigma^2) (||y_obs|| + ||A|| (g0 + L c))

    and the report records the largest observed ratios of the misfit against
    k (1 + ||z||^2) and of its increments against k(c) ||z - z'||.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    dim = posterior.latent_dim
    if radius is None:
        radius = 2.0 * np.sqrt(dim)
    sigma2 = posterior.sigma**2
    a_norm = posterior.operator.norm()
    g0 = float(np.linalg.norm(posterior.generator.forward(np.zeros(dim))))
    y_norm = float(np.linalg.norm(posterior.measurement))
    b_sq = 2.0 * g0**2 + 2.0 * max(lipschitz, lipschitz**2)
    k_growth = max(y_norm**2, b_sq * a_norm**2) / sigma2
    k_local = (lipschitz * a_norm / sigma2) * (y_norm + a_norm * (g0 + lipschitz * radius))

    za = _uniform_ball(rng, probes, dim, radius)
    zb = _uniform_ball(rng, probes, dim, radius)
    max_growth = 0.0
    max_local = 0.0
    observed_lip = 0.0
    growth_violations = 0
    local_violations = 0
    for a, b in zip(za, zb):
        ga = posterior.generator.forward(a)
        gb = posterior.generator.forward(b)
        ra = posterior.operator.apply(ga.reshape(ga.shape[0], ga.shape[1])) - posterior.measurement
        rb = posterior.operator.apply(gb.reshape(gb.shape[0], gb.shape[1])) - posterior.measurement
        fa = float(np.sum(ra * ra)) / (2.0 * sigma2)
        fb = float(np.sum(rb * rb)) / (2.0 * sigma2)
        for z, f in ((a, fa), (b, fb)):
            ratio = f / (k_growth * (1.0 + float(z @ z)))
            max_growth = max(max_growth, ratio)
            if f > k_growth * (1.0 + float(z @ z)) * (1.0 + 1e-12):
                growth_violations += 1
        dz = float(np.linalg.norm(a - b))
        if dz > 0:
            allowance = k_local * dz
            ratio = abs(fa - fb) / allowance if allowance > 0 else float(abs(fa - fb) > 0)
            max_local = max(max_local, ratio)
            if abs(fa - fb) > allowance * (1.0 + 1e-12):
                local_violations += 1
            observed_lip = max(observed_lip, float(np.linalg.norm(ga - gb)) / dz)
    return ErgodicityReport(
        k_growth=k_growth,
        k_local=k_local,
        radius=radius,
        operator_norm=a_norm,
        generator_at_zero=g0,
        measurement_norm=y_norm,
        lipschitz_bound=lipschitz,
        max_growth_ratio=max_growth,
        max_local_ratio=max_local,
        observed_lipschitz=observed_lip,
        growth_violations=growth_violations,
        local_violations=local_violations,
        probes=probes,
    )
