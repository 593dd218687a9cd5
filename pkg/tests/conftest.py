"""Shared fixtures: small networks and the linear-Gaussian analytic setup."""

import numpy as np
import pytest

from latentmc import forward_model as fm
from latentmc import network as nw
from latentmc import sampler as sm


def make_smooth_basis(side, m, rng, scale=0.35):
    """Columns are normalized Gaussian bumps, so G(z) is a smooth image."""
    ys, xs = np.mgrid[0:side, 0:side]
    cols = []
    for _ in range(m):
        cx, cy = rng.uniform(side * 0.2, side * 0.8, size=2)
        width = rng.uniform(side * 0.1, side * 0.25)
        bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * width**2))
        cols.append(bump.ravel() / np.linalg.norm(bump))
    return scale * np.stack(cols, axis=1)  # (side*side, m)


def linear_generator(weight, side, name="linear-gen"):
    """Dense + reshape network mapping latent vectors to side x side images."""
    d, m = weight.shape
    assert d == side * side
    dense = nw.Dense(weight, np.zeros(d), name="mix")
    reshape = nw.Reshape((1, 1, d), (side, side, 1), name="to-image")
    return nw.NetworkGraph([dense, reshape], role="generator", latent_dim=m,
                           image_side=side, name=name)


class LinearGaussianFixture:
    """Linear generator + measurement operator with a closed-form posterior."""

    def __init__(self, side=16, m=8, gamma=0.1, seed=11, n_angles=None):
        rng = np.random.default_rng(seed)
        self.side = side
        self.m = m
        self.weight = make_smooth_basis(side, m, rng)
        self.generator = linear_generator(self.weight, side)
        self.geometry = fm.RadonGeometry.standard(side, n_angles=n_angles)
        radon_op = sm.RadonOperator(self.geometry)
        self.a_matrix = sm.dense_operator_matrix(radon_op)
        self.operator = sm.MatrixOperator(self.a_matrix, radon_op.in_shape, radon_op.out_shape)
        self.z_true = rng.standard_normal(m)
        self.truth = (self.weight @ self.z_true).reshape(side, side)
        clean = self.operator.apply(self.truth)
        self.sigma = max(gamma * float(np.abs(clean).max()), 1e-12)
        noise = self.sigma * rng.standard_normal(clean.shape)
        self.measurement = clean + noise

        forward = self.a_matrix @ self.weight  # (p, m)
        precision = np.eye(m) + forward.T @ forward / self.sigma**2
        self.post_cov = np.linalg.inv(precision)
        self.post_mean = self.post_cov @ (forward.T @ self.measurement.ravel()) / self.sigma**2

    def posterior(self, phi_includes_prior=False):
        return sm.LatentPosterior(
            self.operator,
            self.generator,
            self.measurement,
            sigma=self.sigma,
            phi_includes_prior=phi_includes_prior,
        )


@pytest.fixture(scope="session")
def linear_gaussian():
    return LinearGaussianFixture()


def build_tiny_generator(seed=0, latent_dim=6, gate=0.4):
    """Small generator covering dense/reshape/FRN/TLU/convT/attention/resblock."""
    rng = np.random.default_rng(seed)
    layers = [
        nw.Dense(0.4 * rng.standard_normal((48, latent_dim)), 0.1 * rng.standard_normal(48), name="fc"),
        nw.Reshape((1, 1, 48), (4, 4, 3), name="grid"),
        nw.FRN(np.ones(3), np.zeros(3), 1e-6, (4, 4, 3), name="frn0"),
        nw.TLU(-0.2 * np.ones(3), (4, 4, 3), name="tlu0"),
        nw.ConvTranspose(0.3 * rng.standard_normal((4, 4, 3, 4)), np.zeros(4), 2, 1, (4, 4, 3), name="up0"),
        nw.SelfAttention(
            nw.AttentionParams(
                0.5 * rng.standard_normal((2, 4)),
                0.5 * rng.standard_normal((2, 4)),
                0.5 * rng.standard_normal((2, 4)),
                0.5 * rng.standard_normal((4, 2)),
                gate,
            ),
            (8, 8, 4),
            name="attn",
        ),
        nw.ResBlock(
            main=[
                nw.FRN(np.ones(4), np.zeros(4), 1e-6, (8, 8, 4), name="rb-frn"),
                nw.TLU(-0.2 * np.ones(4), (8, 8, 4), name="rb-tlu"),
                nw.ConvTranspose(0.3 * rng.standard_normal((4, 4, 4, 2)), np.zeros(2), 2, 1, (8, 8, 4), name="rb-up"),
            ],
            shortcut=[
                nw.ConvTranspose(0.3 * rng.standard_normal((2, 2, 4, 2)), np.zeros(2), 2, 0, (8, 8, 4), name="rb-skip"),
            ],
            in_shape=(8, 8, 4),
            variant="up",
            name="rbup",
        ),
        nw.Conv(0.3 * rng.standard_normal((3, 3, 2, 1)), np.zeros(1), 1, 1, (16, 16, 2), name="head"),
        nw.Tanh((16, 16, 1), name="squash"),
        nw.BatchNormInference(
            np.array([0.5]), np.array([0.5]), np.array([0.0]), np.array([1.0 - 1e-5]), 1e-5,
            (16, 16, 1), name="to-unit",
        ),
    ]
    return nw.NetworkGraph(layers, role="generator", latent_dim=latent_dim, image_side=16, name="tiny-gen")


def build_tiny_encoder(seed=1, latent_dim=5):
    """Small encoder covering conv/leaky-relu/pool/resblock-down/flatten/SN."""
    rng = np.random.default_rng(seed)
    down_main = [
        nw.FRN(np.ones(4), np.zeros(4), 1e-6, (8, 8, 4), name="dn-frn"),
        nw.TLU(-0.2 * np.ones(4), (8, 8, 4), name="dn-tlu"),
        nw.Conv(0.3 * rng.standard_normal((3, 3, 4, 6)), np.zeros(6), 1, 1, (8, 8, 4), name="dn-conv"),
        nw.AvgPool(2, (8, 8, 6), name="dn-pool"),
    ]
    down_short = [
        nw.Conv(0.3 * rng.standard_normal((1, 1, 4, 6)), np.zeros(6), 1, 0, (8, 8, 4), name="dn-skip"),
        nw.AvgPool(2, (8, 8, 6), name="dn-skippool"),
    ]
    dense = nw.Dense(0.3 * rng.standard_normal((latent_dim, 96)), np.zeros(latent_dim), name="out")
    w_mat = dense.weight
    sigma = float(np.linalg.svd(w_mat, compute_uv=False)[0])
    normalized = nw.Dense(w_mat / sigma, np.zeros(latent_dim), name="out")
    layers = [
        nw.Conv(0.4 * rng.standard_normal((3, 3, 1, 4)), 0.05 * np.ones(4), 1, 1, (16, 16, 1), name="stem"),
        nw.LeakyReLU(0.2, (16, 16, 4), name="act0"),
        nw.AvgPool(2, (16, 16, 4), name="pool0"),
        nw.ResBlock(down_main, down_short, (8, 8, 4), variant="down", name="rbdown"),
        nw.Flatten((4, 4, 6), name="flat"),
        nw.SpectralNormWrapper(normalized, np.ones(latent_dim), sigma, name="sn-out"),
    ]
    return nw.NetworkGraph(layers, role="encoder", latent_dim=latent_dim, image_side=16, name="tiny-enc")


@pytest.fixture(scope="session")
def tiny_generator():
    return build_tiny_generator()


@pytest.fixture(scope="session")
def tiny_encoder():
    return build_tiny_encoder()
