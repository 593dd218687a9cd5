"""SARTNET1 weight container.

Binary layout (little-endian):

    bytes 0..7  magic ``SARTNET1``
    u32         format version (currently 1)
    u32         top-level layer count
    then, per layer record:
        u16     kind code
        u16     name byte length, followed by that many UTF-8 bytes
        u32     dims count, followed by that many u32 values
        float32 parameters, row-major; the count is derived from dims

Dims always start with the six values (in_h, in_w, in_c, out_h, out_w,
out_c); kind-specific integers follow. Composite records (residual blocks,
spectral-norm wrappers) are followed by their child records, so the file
remains a flat stream of the records above.

A plain-text ``<path>.manifest`` sidecar records role, latent_dim,
image_side and a sha256 provenance hash of the weight bytes.
"""

import hashlib
import os
import struct

import numpy as np

from .graph import NetworkGraph
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
    Reshape,
    ResBlock,
    SelfAttention,
    SpectralNormWrapper,
    Tanh,
    TLU,
)

MAGIC = b"SARTNET1"
VERSION = 1

KIND_CODES = {
    "dense": 1,
    "conv": 2,
    "conv_transpose": 3,
    "frn": 4,
    "tlu": 5,
    "leaky_relu": 6,
    "tanh": 7,
    "batchnorm": 8,
    "avg_pool": 9,
    "global_avg_pool": 10,
    "self_attention": 11,
    "res_block": 12,
    "res_block_up": 13,
    "res_block_down": 14,
    "spectral_norm": 15,
    "flatten": 16,
    "reshape": 17,
}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


class NetworkFormatError(IOError):
    """Base class for weight container failures."""


class InvalidMagicError(NetworkFormatError):
    pass


class UnsupportedVersionError(NetworkFormatError):
    pass


class TruncatedFileError(NetworkFormatError):
    pass


class UnknownKindError(NetworkFormatError):
    pass


class TrailingDataError(NetworkFormatError):
    pass


class ManifestError(NetworkFormatError):
    pass


def manifest_path(path):
    return f"{path}.manifest"


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _encode_record(layer, out):
    kind = layer.kind
    code = KIND_CODES.get(kind)
    if code is None:
        raise NetworkFormatError(f"layer kind {kind!r} has no format mapping")
    name_bytes = layer.name.encode("utf-8")
    dims = [*layer.in_shape, *layer.out_shape, *layer.extra_dims()]
    out.append(struct.pack("<HH", code, len(name_bytes)))
    out.append(name_bytes)
    out.append(struct.pack("<I", len(dims)))
    out.append(struct.pack(f"<{len(dims)}I", *dims))
    for tensor in layer.param_tensors():
        out.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes(order="C"))
    for child in layer.children():
        _encode_record(child, out)


def save_network(net, path):
    """Serialize a NetworkGraph plus its manifest sidecar."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    for layer in net.layers:
        _encode_record(layer, chunks)
    blob = b"".join(chunks)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)

    entries = {
        "role": net.role,
        "latent_dim": "" if net.latent_dim is None else str(net.latent_dim),
        "image_side": "" if net.image_side is None else str(net.image_side),
        "provenance": hashlib.sha256(blob).hexdigest(),
    }
    lines = [f"{key}={entries[key]}" for key in sorted(entries)]
    mtmp = f"{manifest_path(path)}.tmp"
    with open(mtmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(mtmp, manifest_path(path))


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: truncated at byte {self.pos} (+{n} needed)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def floats(self, count):
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def done(self):
        return self.pos == len(self.data)


def _param_shapes(kind, in_shape, out_shape, extra):
    """Parameter tensor shapes in serialization order, derived from dims."""
    cin, cout = in_shape[2], out_shape[2]
    if kind == "dense":
        return [(cout, cin), (cout,)]
    if kind in ("conv", "conv_transpose"):
        kh, kw = extra[0], extra[1]
        return [(kh, kw, cin, cout), (cout,)]
    if kind == "frn":
        return [(cin,), (cin,), (1,)]
    if kind == "tlu":
        return [(cin,)]
    if kind == "leaky_relu":
        return [(1,)]
    if kind == "batchnorm":
        return [(cin,), (cin,), (cin,), (cin,), (1,)]
    if kind == "self_attention":
        cbar = extra[0]
        return [(cbar, cin), (cbar, cin), (cbar, cin), (cin, cbar), (1,)]
    if kind == "spectral_norm":
        return [(extra[1],), (1,)]
    return []


def _decode_record(reader):
    code = reader.u16()
    kind = CODE_KINDS.get(code)
    if kind is None:
        raise UnknownKindError(f"{reader.path}: unknown layer kind code {code}")
    name_len = reader.u16()
    name = reader.take(name_len).decode("utf-8")
    n_dims = reader.u32()
    if n_dims < 6 or n_dims > 64:
        raise NetworkFormatError(f"{reader.path}: layer {name!r} has implausible dims count {n_dims}")
    dims = struct.unpack(f"<{n_dims}I", reader.take(4 * n_dims))
    in_shape, out_shape, extra = dims[:3], dims[3:6], list(dims[6:])

    params = [reader.floats(int(np.prod(s))).reshape(s)
              for s in _param_shapes(kind, in_shape, out_shape, extra)]

    if kind == "dense":
        layer = Dense(params[0], params[1], name=name)
    elif kind == "conv":
        layer = Conv(params[0], params[1], stride=extra[2], pad=extra[3], in_shape=in_shape, name=name)
    elif kind == "conv_transpose":
        layer = ConvTranspose(params[0], params[1], stride=extra[2], pad=extra[3],
                              in_shape=in_shape, outpad=extra[4], name=name)
    elif kind == "frn":
        layer = FRN(params[0], params[1], float(params[2][0]), in_shape, name=name)
    elif kind == "tlu":
        layer = TLU(params[0], in_shape, name=name)
    elif kind == "leaky_relu":
        layer = LeakyReLU(float(params[0][0]), in_shape, name=name)
    elif kind == "tanh":
        layer = Tanh(in_shape, name=name)
    elif kind == "batchnorm":
        layer = BatchNormInference(params[0], params[1], params[2], params[3],
                                   float(params[4][0]), in_shape, name=name)
    elif kind == "avg_pool":
        layer = AvgPool(extra[0], in_shape, name=name)
    elif kind == "global_avg_pool":
        layer = GlobalAvgPool(in_shape, name=name)
    elif kind == "self_attention":
        attn = AttentionParams(params[0], params[1], params[2], params[3], float(params[4][0]))
        layer = SelfAttention(attn, in_shape, name=name)
    elif kind in ("res_block", "res_block_up", "res_block_down"):
        n_main, n_short = extra[0], extra[1]
        main = [_decode_record(reader) for _ in range(n_main)]
        shortcut = [_decode_record(reader) for _ in range(n_short)]
        variant = {"res_block": "same", "res_block_up": "up", "res_block_down": "down"}[kind]
        layer = ResBlock(main, shortcut, in_shape, variant=variant, name=name)
    elif kind == "spectral_norm":
        child = _decode_record(reader)
        layer = SpectralNormWrapper(child, params[0], float(params[1][0]), name=name)
    elif kind == "flatten":
        layer = Flatten(in_shape, name=name)
    elif kind == "reshape":
        layer = Reshape(in_shape, out_shape, name=name)
    else:  # pragma: no cover - exhaustive above
        raise UnknownKindError(f"{reader.path}: unhandled kind {kind!r}")

    if layer.in_shape != tuple(in_shape) or layer.out_shape != tuple(out_shape):
        from .layers import ShapeChainError

        raise ShapeChainError(
            f"{reader.path}: layer {name!r} declares {tuple(in_shape)}->{tuple(out_shape)} "
            f"but reconstructs as {layer.in_shape}->{layer.out_shape}"
        )
    return layer


def load_network(path):
    """Load and validate a SARTNET1 weight file (manifest sidecar required)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob, path)
    if reader.take(8) != MAGIC:
        raise InvalidMagicError(f"{path}: bad magic, expected {MAGIC!r}")
    version = reader.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    n_layers = reader.u32()
    layers = [_decode_record(reader) for _ in range(n_layers)]
    if not reader.done():
        raise TrailingDataError(f"{path}: {len(blob) - reader.pos} trailing bytes")

    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise ManifestError(f"{path}: missing manifest sidecar {mpath}")
    entries = {}
    with open(mpath, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ManifestError(f"{mpath}: malformed line {line!r}")
            key, value = line.split("=", 1)
            entries[key] = value
    role = entries.get("role")
    if role not in ("generator", "encoder"):
        raise ManifestError(f"{mpath}: missing or invalid role {role!r}")
    recorded = entries.get("provenance", "")
    if recorded and recorded != hashlib.sha256(blob).hexdigest():
        raise ManifestError(f"{path}: provenance hash mismatch (weights or manifest tampered)")

    def _opt_int(key):
        value = entries.get(key, "")
        return int(value) if value else None

    return NetworkGraph(
        layers,
        role=role,
        latent_dim=_opt_int("latent_dim"),
        image_side=_opt_int("image_side"),
        name=os.path.basename(path),
    )
