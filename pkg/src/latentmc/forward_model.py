"""Discrete parallel-beam CT forward model.

The projection operator is ray-driven: each (angle, detector) ray is sampled
every 0.5 pixel along its length and the image is bilinearly interpolated at
the sample points. The sampling weights are assembled once per geometry into
a sparse matrix, so the adjoint is the exact transpose and repeated
projections are cheap. Filtered back projection uses the standard discrete
ramp filter with optional Hann apodization and a pixel-driven backprojector
(kept independent of the adjoint so the two can cross-check each other).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

RAY_STEP = 0.5  # sampling step along each ray, in pixels

_FILTERS = ("ramlak", "hann")

# Truncated-Gaussian placement: centers are drawn from an isotropic normal
# with this fraction of the placement radius as its scale, rejected to the disc.
PLACEMENT_SCALE_FRACTION = 0.5


class ShapeError(ValueError):
    """Operand shapes disagree with the projection geometry."""


class InsufficientDataError(ValueError):
    """Too few projection angles for the requested reconstruction."""


@dataclass(frozen=True)
class RadonGeometry:
    """Parallel-beam acquisition geometry.

    Angles are uniformly spaced over [0, pi); the default angle count is
    floor(side/2) and the default detector count equals the image side.
    """

    image_side: int
    n_angles: int
    n_detectors: int
    angles: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.image_side < 1:
            raise ValueError("image_side must be positive")
        if self.n_angles < 1 or self.n_detectors < 1:
            raise ValueError("angle and detector counts must be positive")
        angles = np.asarray(self.angles, dtype=np.float64)
        if angles.shape != (self.n_angles,):
            raise ShapeError("angles length must equal n_angles")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if angles[0] < 0 or angles[-1] >= np.pi:
            raise ValueError("angles must lie in [0, pi)")
        object.__setattr__(self, "angles", angles)

    @classmethod
    def standard(cls, image_side, n_angles=None, n_detectors=None):
        if n_angles is None:
            n_angles = max(1, image_side // 2)
        if n_detectors is None:
            n_detectors = image_side
        angles = np.arange(n_angles, dtype=np.float64) * (np.pi / n_angles)
        return cls(image_side=image_side, n_angles=n_angles,
                   n_detectors=n_detectors, angles=angles)

    def _key(self):
        return (self.image_side, self.n_angles, self.n_detectors,
                self.angles.tobytes())


@dataclass
class ImageGrid:
    """Square 2D scalar field, row-major."""

    height: int
    width: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise ShapeError(f"values shape {self.values.shape} != ({self.height}, {self.width})")
        if self.height != self.width:
            raise ValueError("images must be square")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image contains non-finite values")

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(height=values.shape[0], width=values.shape[1], values=values)


@dataclass
class Sinogram:
    """Stack of line-integral profiles, one row per projection angle."""

    geometry: RadonGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.n_angles, self.geometry.n_detectors)
        if self.values.shape != expected:
            raise ShapeError(f"sinogram shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")


@dataclass(frozen=True)
class NoiseModel:
    """Additive white Gaussian noise scaled off the clean measurement."""

    gamma: float
    sigma: float

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


PHANTOM_KINDS = ("disc", "ellipse", "disc_gradient", "ellipse_gradient")


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a random multi-feature phantom."""

    image_side: int
    n_features: int
    seed: int
    feature_kinds: tuple = PHANTOM_KINDS
    placement_radius: float = 0.0  # 0 -> image_side / 2

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be at least 1")
        if self.image_side < 4:
            raise ValueError("image_side too small for feature placement")
        unknown = set(self.feature_kinds) - set(PHANTOM_KINDS)
        if unknown:
            raise ValueError(f"unknown feature kinds: {sorted(unknown)}")
        if not self.feature_kinds:
            raise ValueError("feature_kinds must not be empty")
        if self.placement_radius < 0:
            raise ValueError("placement_radius must be non-negative")

    @property
    def radius(self):
        return self.placement_radius if self.placement_radius > 0 else self.image_side / 2.0


# ---------------------------------------------------------------------------
# Projection matrix assembly
# ---------------------------------------------------------------------------

_MATRIX_CACHE = {}


def projection_matrix(geom):
    """Sparse (n_angles*n_detectors) x (side*side) ray-integration matrix.

    Cached per geometry. Row r = a*n_detectors + d holds the bilinear
    integration weights of the ray at angle a, detector offset d.
    """
    key = geom._key()
    cached = _MATRIX_CACHE.get(key)
    if cached is not None:
        return cached

    side = geom.image_side
    center = (side - 1) / 2.0
    half_span = side * np.sqrt(2.0) / 2.0
    n_t = int(np.ceil(2.0 * half_span / RAY_STEP)) + 1
    ts = (np.arange(n_t) - (n_t - 1) / 2.0) * RAY_STEP
    offsets = np.arange(geom.n_detectors, dtype=np.float64) - (geom.n_detectors - 1) / 2.0

    rows_acc, cols_acc, vals_acc = [], [], []
    for a, theta in enumerate(geom.angles):
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        # sample grid: detectors x ray steps
        px = center + offsets[:, None] * cos_t - ts[None, :] * sin_t
        py = center + offsets[:, None] * sin_t + ts[None, :] * cos_t
        ix = np.floor(px).astype(np.int64)
        iy = np.floor(py).astype(np.int64)
        fx = px - ix
        fy = py - iy
        row_idx = np.broadcast_to(
            (a * geom.n_detectors + np.arange(geom.n_detectors))[:, None], px.shape
        )
        for dy, dx, w in (
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        ):
            yy = iy + dy
            xx = ix + dx
            inside = (yy >= 0) & (yy < side) & (xx >= 0) & (xx < side) & (w > 0)
            rows_acc.append(row_idx[inside])
            cols_acc.append((yy[inside] * side + xx[inside]))
            vals_acc.append(w[inside] * RAY_STEP)

    mat = sp.csr_matrix(
        (np.concatenate(vals_acc), (np.concatenate(rows_acc), np.concatenate(cols_acc))),
        shape=(geom.n_angles * geom.n_detectors, side * side),
    )
    mat.sum_duplicates()
    _MATRIX_CACHE[key] = mat
    return mat


def radon(image, geom):
    """Apply the discrete Radon transform."""
    if image.height != geom.image_side:
        raise ShapeError(f"image side {image.height} != geometry side {geom.image_side}")
    mat = projection_matrix(geom)
    values = (mat @ image.values.ravel()).reshape(geom.n_angles, geom.n_detectors)
    return Sinogram(geometry=geom, values=values)


def radon_adjoint(sino, geom):
    """Apply the exact transpose of the Radon transform (unfiltered backprojection)."""
    if sino.geometry._key() != geom._key():
        raise ShapeError("sinogram geometry does not match the requested geometry")
    mat = projection_matrix(geom)
    values = (mat.T @ sino.values.ravel()).reshape(geom.image_side, geom.image_side)
    return ImageGrid.from_array(values)


# ---------------------------------------------------------------------------
# Filtered back projection
# ---------------------------------------------------------------------------


def _ramp_kernel(size):
    """Spatial-domain band-limited ramp filter (unit detector spacing)."""
    h = np.zeros(size)
    h[0] = 0.25
    odd = np.arange(1, size // 2 + 1, 2)
    h[odd] = -1.0 / (np.pi * odd) ** 2
    h[-odd] = -1.0 / (np.pi * odd) ** 2
    return h


def _fourier_filter(size, filter_name):
    ramp = 2.0 * np.real(np.fft.fft(_ramp_kernel(size)))
    if filter_name == "hann":
        window = 0.5 * (1.0 + np.cos(2.0 * np.pi * np.fft.fftfreq(size)))
        ramp = ramp * window
    return ramp


def fbp(sino, geom, filter_name="ramlak"):
    """Filtered back projection, clipped to [0, 1].

    Rows are ramp-filtered in the frequency domain at the next power-of-two
    length >= 2 * n_detectors, then backprojected pixel-by-pixel with linear
    interpolation along the detector axis.
    """
    if filter_name not in _FILTERS:
        raise ValueError(f"unknown filter {filter_name!r}, expected one of {_FILTERS}")
    if sino.geometry._key() != geom._key():
        raise ShapeError("sinogram geometry does not match the requested geometry")
    if geom.n_angles < 2:
        raise InsufficientDataError("FBP needs at least 2 projection angles")

    n_det = geom.n_detectors
    pad = max(64, int(2 ** np.ceil(np.log2(2 * n_det))))
    filt = _fourier_filter(pad, filter_name)
    spectra = np.fft.fft(sino.values, n=pad, axis=1) * filt[None, :]
    filtered = np.real(np.fft.ifft(spectra, axis=1))[:, :n_det]

    side = geom.image_side
    center = (side - 1) / 2.0
    det_center = (n_det - 1) / 2.0
    ys, xs = np.mgrid[0:side, 0:side]
    xs = xs - center
    ys = ys - center

    recon = np.zeros((side, side))
    det_axis = np.arange(n_det, dtype=np.float64)
    for a, theta in enumerate(geom.angles):
        s = xs * np.cos(theta) + ys * np.sin(theta) + det_center
        recon += np.interp(s.ravel(), det_axis, filtered[a], left=0.0, right=0.0).reshape(side, side)
    recon *= np.pi / (2.0 * geom.n_angles)
    return ImageGrid.from_array(np.clip(recon, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Noise model
# ---------------------------------------------------------------------------

SIGMA_FLOOR = 1e-12


def add_noise(sino, gamma, rng):
    """Add white Gaussian noise with sigma = gamma * max|clean values|.

    Returns the noisy sinogram and the sigma actually used. The sigma is
    floored at a tiny positive value so downstream divisions stay defined
    even for gamma = 0 (which returns the clean values unchanged).
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    peak = float(np.max(np.abs(sino.values))) if sino.values.size else 0.0
    sigma = max(gamma * peak, SIGMA_FLOOR)
    if gamma == 0.0:
        return Sinogram(geometry=sino.geometry, values=sino.values.copy()), sigma
    noisy = sino.values + sigma * rng.standard_normal(sino.values.shape)
    return Sinogram(geometry=sino.geometry, values=noisy), sigma


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


def sample_placements(rng, n, radius):
    """Draw n feature centers from an isotropic normal truncated to a disc.

    The normal has scale PLACEMENT_SCALE_FRACTION * radius per axis; draws
    outside the disc of the given radius are rejected and redrawn.
    """
    scale = PLACEMENT_SCALE_FRACTION * radius
    centers = np.empty((n, 2))
    filled = 0
    while filled < n:
        batch = rng.standard_normal((max(n - filled, 8), 2)) * scale
        keep = batch[np.hypot(batch[:, 0], batch[:, 1]) <= radius]
        take = min(len(keep), n - filled)
        centers[filled : filled + take] = keep[:take]
        filled += take
    return centers


def generate_phantom(spec):
    """Render a random phantom of discs and ellipses, values in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    side = spec.image_side
    center = (side - 1) / 2.0
    ys, xs = np.mgrid[0:side, 0:side]
    canvas = np.zeros((side, side))

    centers = sample_placements(rng, spec.n_features, spec.radius)
    for cx, cy in centers:
        kind = spec.feature_kinds[rng.integers(len(spec.feature_kinds))]
        if kind.startswith("disc"):
            ax = ay = rng.uniform(0.08, 0.22) * side
        else:
            ax = rng.uniform(0.08, 0.25) * side
            ay = rng.uniform(0.05, 0.18) * side
        phi = rng.uniform(0.0, np.pi)
        level = rng.uniform(0.2, 1.0)

        dx = xs - (center + cx)
        dy = ys - (center + cy)
        u = (dx * np.cos(phi) + dy * np.sin(phi)) / ax
        v = (-dx * np.sin(phi) + dy * np.cos(phi)) / ay
        q = u * u + v * v
        mask = q <= 1.0
        if kind.endswith("gradient"):
            canvas += level * np.where(mask, 1.0 - q, 0.0)
        else:
            canvas += level * mask
    return ImageGrid.from_array(np.clip(canvas, 0.0, 1.0))
