"""Spectral norms, operator norms, and certified Lipschitz bounds."""

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    AvgPool,
    BatchNormInference,
    Conv,
    ConvTranspose,
    Dense,
    Flatten,
    FRN,
    GlobalAvgPool,
    LeakyReLU,
    Reshape,
    ResBlock,
    SelfAttention,
    SpectralNormWrapper,
    Tanh,
    TLU,
)

SIGMA_FLOOR = 1e-12


def spectral_normalize(weight, n_iter, u0=None, tol=1e-12):
    """Estimate the largest singular value by power iteration and divide by it.

    Returns (weight / sigma, sigma). A zero matrix reports the sigma floor
    and comes back unchanged (still all zero). The iteration is started from
    a fixed seeded vector, so results are reproducible across runs, and
    stops early once successive estimates agree to the relative tolerance.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("spectral_normalize expects a 2D matrix")
    if u0 is not None:
        u = np.asarray(u0, dtype=np.float64).reshape(w.shape[0])
    else:
        u = np.random.default_rng(0).standard_normal(w.shape[0])
    norm_u = np.linalg.norm(u)
    if norm_u < SIGMA_FLOOR:
        u = np.ones(w.shape[0])
        norm_u = np.linalg.norm(u)
    u = u / norm_u
    v = None
    previous = -np.inf
    for _ in range(n_iter):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv < SIGMA_FLOOR:
            return w.copy() / SIGMA_FLOOR, SIGMA_FLOOR
        v /= nv
        u = w @ v
        nu = np.linalg.norm(u)
        if nu < SIGMA_FLOOR:
            return w.copy() / SIGMA_FLOOR, SIGMA_FLOOR
        u /= nu
        if abs(nu - previous) <= tol * nu:
            break
        previous = nu
    sigma = float(u @ (w @ v))
    sigma = max(sigma, SIGMA_FLOOR)
    return w / sigma, sigma


def operator_norm(apply_fn, adjoint_fn, in_shape, n_iter=200, tol=1e-12, seed=0):
    """Largest singular value of a linear operator via power iteration.

    `apply_fn` maps an array of `in_shape` forward, `adjoint_fn` maps its
    output space back; both must be genuinely linear (no bias).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(in_shape)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(n_iter):
        y = apply_fn(x)
        ny = np.linalg.norm(y)
        if ny < SIGMA_FLOOR:
            return 0.0
        x_next = adjoint_fn(y / ny)
        nx = np.linalg.norm(x_next)
        if nx < SIGMA_FLOOR:
            return 0.0
        x_next /= nx
        if abs(ny - sigma) <= tol * max(1.0, ny):
            return float(ny)
        sigma = ny
        x = x_next
    return float(sigma)


@dataclass
class LipschitzReport:
    """Certified Lipschitz bound with per-layer factors and caveats."""

    bound: float
    per_layer: list = field(default_factory=list)
    assumptions: list = field(default_factory=list)

    @property
    def unbounded(self):
        return not np.isfinite(self.bound)


_MARGIN = 1.0 + 1e-9  # power-iteration estimates converge from below


def _linear_layer_norm(layer):
    zero = np.zeros(layer.in_shape)
    y0, _ = layer.forward(zero)

    def apply_fn(x):
        y, _ = layer.forward(x)
        return y - y0

    def adjoint_fn(u):
        return layer.backward(None, u)

    return operator_norm(apply_fn, adjoint_fn, layer.in_shape) * _MARGIN


def _matrix_norm(w):
    return float(np.linalg.svd(np.asarray(w, dtype=np.float64), compute_uv=False)[0])


def _layer_bound(layer, probes, report, frn_energy_floor):
    """Certified bound for one layer given probe activations at its input."""
    if isinstance(layer, SpectralNormWrapper):
        bound = _linear_layer_norm(layer.child)
        report.per_layer.append((layer.name, layer.kind, bound, "operator norm of normalized weight"))
        return bound
    if isinstance(layer, (Dense, Conv, ConvTranspose, AvgPool, GlobalAvgPool)):
        bound = _linear_layer_norm(layer)
        report.per_layer.append((layer.name, layer.kind, bound, "operator norm by power iteration"))
        return bound
    if isinstance(layer, (Flatten, Reshape)):
        report.per_layer.append((layer.name, layer.kind, 1.0, "isometry"))
        return 1.0
    if isinstance(layer, (TLU, Tanh)):
        report.per_layer.append((layer.name, layer.kind, 1.0, "1-Lipschitz activation"))
        return 1.0
    if isinstance(layer, LeakyReLU):
        bound = max(1.0, abs(layer.slope))
        report.per_layer.append((layer.name, layer.kind, bound, "max slope"))
        return bound
    if isinstance(layer, BatchNormInference):
        bound = float(np.max(np.abs(layer.scale)))
        report.per_layer.append((layer.name, layer.kind, bound, "max |affine scale|"))
        return bound
    if isinstance(layer, FRN):
        energies = [float(np.min(np.mean(p * p, axis=(0, 1)))) for p in probes]
        observed = min(energies) if energies else float("nan")
        floor = frn_energy_floor
        bound = float(np.max(np.abs(layer.gamma))) / np.sqrt(floor + layer.eps)
        report.per_layer.append((layer.name, layer.kind, bound, f"valid on mean(h^2) >= {floor:g}"))
        report.assumptions.append(
            f"{layer.name}: FRN bound assumes per-channel energy >= {floor:g} "
            f"(min observed on probes: {observed:g})"
        )
        return bound
    if isinstance(layer, SelfAttention):
        radius = max((float(np.linalg.norm(p)) for p in probes), default=0.0) * 1.25
        n_out = _matrix_norm(layer.wo)
        n_val = _matrix_norm(layer.wv)
        n_q = _matrix_norm(layer.wq)
        n_k = _matrix_norm(layer.wk)
        # residual identity + gated attention branch; the softmax Jacobian
        # contributes at most 1/2 per score direction, two score factors.
        bound = 1.0 + abs(layer.gate) * n_out * n_val * (1.0 + n_q * n_k * radius)
        report.per_layer.append((layer.name, layer.kind, bound, f"probe radius {radius:.3g}"))
        report.assumptions.append(
            f"{layer.name}: attention bound valid for activations with norm <= {radius:.6g}"
        )
        return bound
    if isinstance(layer, ResBlock):
        main = 1.0
        branch_probes = probes
        for child in layer.main:
            main *= _layer_bound(child, branch_probes, report, frn_energy_floor)
            branch_probes = [child.forward(p)[0] for p in branch_probes]
        short = 1.0
        branch_probes = probes
        for child in layer.shortcut:
            short *= _layer_bound(child, branch_probes, report, frn_energy_floor)
            branch_probes = [child.forward(p)[0] for p in branch_probes]
        bound = main + short
        report.per_layer.append((layer.name, layer.kind, bound, "main + shortcut"))
        return bound
    report.per_layer.append((layer.name, layer.kind, float("inf"), "unbounded"))
    report.assumptions.append(f"{layer.name}: no Lipschitz rule for kind {layer.kind!r} (unbounded)")
    return float("inf")


def lipschitz_bound(net, probe_count=16, rng=None, frn_energy_floor=1e-3):
    """Certified upper bound on the network's Lipschitz constant.

    The bound is the product of per-layer factors. Linear layers get their
    exact operator norm (power iteration at the layer's own input shape);
    FRN and attention factors are conservative and come with region
    assumptions, recorded in the returned report.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    probes = [rng.standard_normal(net.input_shape) for _ in range(probe_count)]
    report = LipschitzReport(bound=1.0)
    for layer in net.layers:
        factor = _layer_bound(layer, probes, report, frn_energy_floor)
        report.bound *= factor
        probes = [layer.forward(p)[0] for p in probes]
    return report
