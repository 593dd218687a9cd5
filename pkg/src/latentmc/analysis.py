"""Posterior statistics, reconstruction metrics, and convergence diagnostics."""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist

from .forward_model import ImageGrid

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class PosteriorSummary:
    """Pixelwise posterior mean/SD plus a credible envelope at level alpha."""

    mean: ImageGrid
    sd: ImageGrid
    n_samples: int
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    alpha: float = 0.05


@dataclass
class DimReport:
    """Trace comparison between the latent prior and encoded samples."""

    latent_dim: int
    trace_prior: float
    trace_encoded: float
    covariance: np.ndarray = field(repr=False)
    verdict: str = "Adequate"


VERDICTS = ("UnderDim", "Adequate", "ExcessDim")

# Relative trace gap below which the dimensions are called adequate.
TRACE_GAP_TOLERANCE = 0.01


def _as_2d(image):
    if isinstance(image, ImageGrid):
        return image.values
    return np.asarray(image, dtype=np.float64)


def _generated_stack(record, gen):
    images = [gen.generate(z) for z in record.samples]
    return np.stack(images, axis=0)


def summarize(record, gen, alpha=0.05):
    """Push latent draws through the generator and summarize pixelwise.

    The mean averages every sample; the credible envelope keeps the top
    (1 - alpha) fraction of samples by posterior density and takes the
    pixelwise min/max over the retained images.
    """
    n = record.samples.shape[0]
    if n < 2:
        raise ValueError("summarize needs at least 2 samples")
    stack = _generated_stack(record, gen)
    mean = stack.mean(axis=0)
    sd = stack.std(axis=0, ddof=1)
    lower, upper = hpd_envelope(stack, record.potentials, alpha)
    lower = np.minimum(lower, mean)
    upper = np.maximum(upper, mean)
    return PosteriorSummary(
        mean=ImageGrid.from_array(mean),
        sd=ImageGrid.from_array(sd),
        n_samples=n,
        lower=lower,
        upper=upper,
        alpha=alpha,
    )


def hpd_envelope(stack, potentials, alpha):
    """Pixelwise min/max over the top (1 - alpha) density fraction of samples.

    `potentials` are negative log densities, so low values rank first.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n = stack.shape[0]
    n_keep = max(1, int(np.ceil((1.0 - alpha) * n)))
    order = np.argsort(potentials, kind="stable")[:n_keep]
    kept = stack[order]
    return kept.min(axis=0), kept.max(axis=0)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with peak 1.0; identical inputs -> inf."""
    a = _as_2d(a)
    b = _as_2d(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _window_means(image, kernel):
    windows = sliding_window_view(image, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b):
    """Mean local structural similarity (11x11 Gaussian window, range 1.0)."""
    a = _as_2d(a)
    b = _as_2d(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _window_means(a, kernel)
    mu_b = _window_means(b, kernel)
    var_a = _window_means(a * a, kernel) - mu_a * mu_a
    var_b = _window_means(b * b, kernel) - mu_b * mu_b
    cov = _window_means(a * b, kernel) - mu_a * mu_b
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def hpdi_coverage(record, gen, log_post, truth, alpha, method="envelope"):
    """Percentage of truth pixels inside the credible region at level alpha.

    `envelope` ranks samples by posterior log density, keeps the top
    (1 - alpha) fraction, and covers with the pixelwise min/max over the
    retained generated images. `pixel-quantile` uses central per-pixel
    quantile intervals over all samples instead.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    truth = _as_2d(truth)
    stack = _generated_stack(record, gen)
    if method == "envelope":
        lower, upper = hpd_envelope(stack, -np.asarray(log_post, dtype=np.float64), alpha)
    elif method == "pixel-quantile":
        lower = np.quantile(stack, alpha / 2.0, axis=0)
        upper = np.quantile(stack, 1.0 - alpha / 2.0, axis=0)
    else:
        raise ValueError(f"unknown HPDI method {method!r}")
    inside = (truth >= lower) & (truth <= upper)
    return 100.0 * float(np.mean(inside))


def sample_covariance(samples):
    """Bessel-corrected covariance, symmetrized against rounding."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples for a covariance")
    cov = np.cov(samples, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return 0.5 * (cov + cov.T)


def intrinsic_dimension(encoded, prior):
    """Compare the encoded-sample covariance trace against the prior's.

    A prior trace exceeding the encoded trace (beyond a small relative
    tolerance) flags excess latent dimensions; the opposite flags too few.
    """
    encoded = np.asarray(encoded, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    m = encoded.shape[1]
    if prior.shape[1] != m:
        raise ValueError("encoded and prior samples must share the latent dimension")
    if encoded.shape[0] < m + 1 or prior.shape[0] < m + 1:
        raise ValueError(f"need at least {m + 1} samples per set for a rank-{m} covariance")
    cov_encoded = sample_covariance(encoded)
    trace_encoded = float(np.trace(cov_encoded))
    trace_prior = float(np.trace(sample_covariance(prior)))
    gap = (trace_prior - trace_encoded) / max(trace_prior, 1e-300)
    if gap > TRACE_GAP_TOLERANCE:
        verdict = "ExcessDim"
    elif gap < -TRACE_GAP_TOLERANCE:
        verdict = "UnderDim"
    else:
        verdict = "Adequate"
    return DimReport(
        latent_dim=m,
        trace_prior=trace_prior,
        trace_encoded=trace_encoded,
        covariance=cov_encoded,
        verdict=verdict,
    )


def mmd(set_a, set_b, bandwidth=None):
    """Unbiased squared maximum mean discrepancy with a Gaussian kernel.

    Inputs are flattened to vectors. The bandwidth defaults to the median
    pairwise distance over the pooled sets; the kernel is
    exp(-d^2 / (2 h^2)).
    """
    a = np.asarray(set_a, dtype=np.float64).reshape(len(set_a), -1)
    b = np.asarray(set_b, dtype=np.float64).reshape(len(set_b), -1)
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise ValueError("the unbiased estimator needs at least 2 samples per set")
    d_aa = cdist(a, a, "sqeuclidean")
    d_bb = cdist(b, b, "sqeuclidean")
    d_ab = cdist(a, b, "sqeuclidean")
    if bandwidth is None:
        pooled = np.concatenate(
            [
                np.sqrt(d_aa[np.triu_indices(n, 1)]),
                np.sqrt(d_bb[np.triu_indices(m, 1)]),
                np.sqrt(d_ab.ravel()),
            ]
        )
        bandwidth = float(np.median(pooled))
        if bandwidth <= 0:
            bandwidth = 1.0
    scale = 1.0 / (2.0 * bandwidth**2)
    k_aa = np.exp(-scale * d_aa)
    k_bb = np.exp(-scale * d_bb)
    k_ab = np.exp(-scale * d_ab)
    term_a = (k_aa.sum() - np.trace(k_aa)) / (n * (n - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (m * (m - 1))
    term_ab = 2.0 * k_ab.mean()
    return float(term_a + term_b - term_ab)


def chain_discrepancy(x_samples, z_record, gen, n_points=40):
    """Squared distance between running means of two posterior chains.

    `x_samples` are image-space draws (flattened or 2D images); the latent
    draws are pushed through the generator. Returns (ns, chis) on a
    log-spaced grid of sample counts.
    """
    x = np.asarray(x_samples, dtype=np.float64).reshape(len(x_samples), -1)
    g = np.stack([gen.generate(z).ravel() for z in z_record.samples], axis=0)
    if x.shape[1] != g.shape[1]:
        raise ValueError("image-space and generated samples have different sizes")
    n = min(x.shape[0], g.shape[0])
    if n < 1:
        raise ValueError("both chains must be nonempty")
    grid = np.unique(np.round(np.logspace(0, np.log10(n), n_points)).astype(int))
    grid = grid[grid >= 1]
    cum_x = np.cumsum(x[:n], axis=0)
    cum_g = np.cumsum(g[:n], axis=0)
    chis = np.empty(grid.size)
    for i, k in enumerate(grid):
        diff = cum_x[k - 1] / k - cum_g[k - 1] / k
        chis[i] = float(diff @ diff)
    return grid, chis
