"""Inference runtime for serialized generator/encoder networks."""

import numpy as np

from .graph import NetworkGraph
from .format import (
    InvalidMagicError,
    ManifestError,
    NetworkFormatError,
    TrailingDataError,
    TruncatedFileError,
    UnknownKindError,
    UnsupportedVersionError,
    load_network,
    manifest_path,
    save_network,
)
from .layers import (
    AttentionParams,
    AvgPool,
    BatchNormInference,
    Conv,
    ConvTranspose,
    Dense,
    Flatten,
    FRN,
    GlobalAvgPool,
    LeakyReLU,
    NetworkValidationError,
    NonFiniteParameterError,
    Reshape,
    ResBlock,
    SelfAttention,
    ShapeChainError,
    SpectralNormWrapper,
    Tanh,
    TLU,
)
from .spectral import LipschitzReport, lipschitz_bound, operator_norm, spectral_normalize


def forward(net, x):
    """Evaluate a network on one input."""
    return net.forward(x)


def vjp(net, x, cotangent):
    """Vector-Jacobian product J(x)^T cotangent through the whole network."""
    return net.vjp(x, cotangent)


def self_attention(features, params):
    """Functional attention on a (channels, locations) feature map."""
    features = np.asarray(features, dtype=np.float64)
    c, n = features.shape
    layer = SelfAttention(params, in_shape=(1, n, c))
    out, _ = layer.forward(features.T.reshape(1, n, c))
    return out.reshape(n, c).T


def frn_tlu(features, gamma, beta, tau, eps):
    """Filter response normalization followed by a thresholded linear unit."""
    features = np.asarray(features, dtype=np.float64)
    shape = features.shape
    frn = FRN(gamma, beta, eps, in_shape=shape)
    tlu = TLU(tau, in_shape=shape)
    y, _ = frn.forward(features)
    y, _ = tlu.forward(y)
    return y
