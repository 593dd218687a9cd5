"""Network layer primitives with forward evaluation and reverse-mode rules.

Activations are channels-last float64 arrays of shape (h, w, c); vectors are
carried as (1, 1, n). Parameters are kept as float32 masters (what the weight
file stores) with float64 working copies, so serialization round-trips are
bit-exact while evaluation runs in double precision.

Every layer implements `forward(x, want_ctx)` returning (output, ctx) and
`backward(ctx, cotangent)` returning the input cotangent J^T u. Inference
never needs parameter gradients, so only input cotangents are propagated.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


class NetworkValidationError(ValueError):
    """A layer or graph violates its shape or parameter contract."""


class ShapeChainError(NetworkValidationError):
    """Adjacent layer shapes do not chain."""


class NonFiniteParameterError(NetworkValidationError):
    """A parameter tensor contains NaN or infinity."""


def _master(values, shape=None):
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if shape is not None and arr.shape != tuple(shape):
        raise NetworkValidationError(f"parameter shape {arr.shape} != expected {tuple(shape)}")
    return arr


def _check_finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteParameterError(f"layer {name!r} has non-finite parameters")


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def convt_out_size(size, k, stride, pad, outpad):
    return (size - 1) * stride - 2 * pad + k + outpad


def _conv2d(x, kernel, stride, pad):
    """Cross-correlation, channels-last: x (h,w,ci), kernel (kh,kw,ci,co)."""
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    x = np.ascontiguousarray(x)
    kh, kw, ci, _ = kernel.shape
    ho = (x.shape[0] - kh) // stride + 1
    wo = (x.shape[1] - kw) // stride + 1
    s0, s1, s2 = x.strides
    patches = as_strided(x, (ho, wo, kh, kw, ci), (s0 * stride, s1 * stride, s0, s1, s2))
    return np.tensordot(patches, kernel, axes=([2, 3, 4], [0, 1, 2]))


def _conv2d_input_vjp(dy, kernel, stride, pad, in_hw):
    """Cotangent of _conv2d with respect to its input."""
    kh, kw, ci, _ = kernel.shape
    hp, wp = in_hw[0] + 2 * pad, in_hw[1] + 2 * pad
    ho, wo = dy.shape[:2]
    dpatch = np.tensordot(dy, kernel, axes=([2], [3]))  # (ho, wo, kh, kw, ci)
    dxp = np.zeros((hp, wp, ci))
    for r in range(kh):
        for c in range(kw):
            dxp[r : r + ho * stride : stride, c : c + wo * stride : stride] += dpatch[:, :, r, c, :]
    if pad:
        return dxp[pad : pad + in_hw[0], pad : pad + in_hw[1]]
    return dxp


class Layer:
    kind = "abstract"

    def __init__(self, name, in_shape, out_shape):
        self.name = name
        self.in_shape = tuple(int(v) for v in in_shape)
        self.out_shape = tuple(int(v) for v in out_shape)

    def forward(self, x, want_ctx=False):
        raise NotImplementedError

    def backward(self, ctx, cot):
        raise NotImplementedError

    def param_tensors(self):
        """Float32 parameter tensors in serialization order."""
        return []

    def extra_dims(self):
        """Kind-specific integers serialized after the shape prefix."""
        return []

    def children(self):
        return []

    def validate(self):
        _check_finite(self.name, *self.param_tensors())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, {self.in_shape}->{self.out_shape})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight, bias, name="dense"):
        weight = _master(weight)
        cout, cin = weight.shape
        super().__init__(name, (1, 1, cin), (1, 1, cout))
        self.weight32 = weight
        self.bias32 = _master(bias, (cout,))
        self.weight = self.weight32.astype(np.float64)
        self.bias = self.bias32.astype(np.float64)

    def forward(self, x, want_ctx=False):
        y = self.weight @ x.reshape(-1) + self.bias
        return y.reshape(self.out_shape), None

    def backward(self, ctx, cot):
        return (self.weight.T @ cot.reshape(-1)).reshape(self.in_shape)

    def param_tensors(self):
        return [self.weight32, self.bias32]


class Conv(Layer):
    kind = "conv"

    def __init__(self, weight, bias, stride, pad, in_shape, name="conv"):
        weight = _master(weight)
        kh, kw, cin, cout = weight.shape
        h, w, c = in_shape
        if c != cin:
            raise ShapeChainError(f"{name}: input channels {c} != kernel channels {cin}")
        out_shape = (conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad), cout)
        if out_shape[0] < 1 or out_shape[1] < 1:
            raise NetworkValidationError(f"{name}: kernel does not fit the input")
        super().__init__(name, in_shape, out_shape)
        self.weight32 = weight
        self.bias32 = _master(bias, (cout,))
        self.weight = self.weight32.astype(np.float64)
        self.bias = self.bias32.astype(np.float64)
        self.stride = int(stride)
        self.pad = int(pad)

    def forward(self, x, want_ctx=False):
        return _conv2d(x, self.weight, self.stride, self.pad) + self.bias, None

    def backward(self, ctx, cot):
        return _conv2d_input_vjp(cot, self.weight, self.stride, self.pad, self.in_shape[:2])

    def param_tensors(self):
        return [self.weight32, self.bias32]

    def extra_dims(self):
        kh, kw = self.weight32.shape[:2]
        return [kh, kw, self.stride, self.pad]


class ConvTranspose(Layer):
    kind = "conv_transpose"

    def __init__(self, weight, bias, stride, pad, in_shape, outpad=0, name="convt"):
        weight = _master(weight)
        kh, kw, cin, cout = weight.shape
        h, w, c = in_shape
        if c != cin:
            raise ShapeChainError(f"{name}: input channels {c} != kernel channels {cin}")
        out_shape = (
            convt_out_size(h, kh, stride, pad, outpad),
            convt_out_size(w, kw, stride, pad, outpad),
            cout,
        )
        if out_shape[0] < 1 or out_shape[1] < 1:
            raise NetworkValidationError(f"{name}: output size collapses to zero")
        super().__init__(name, in_shape, out_shape)
        self.weight32 = weight
        self.bias32 = _master(bias, (cout,))
        self.weight = self.weight32.astype(np.float64)
        self.bias = self.bias32.astype(np.float64)
        self.stride = int(stride)
        self.pad = int(pad)
        self.outpad = int(outpad)

    def _full_size(self):
        h, w, _ = self.in_shape
        kh, kw = self.weight32.shape[:2]
        return (h - 1) * self.stride + kh + self.outpad, (w - 1) * self.stride + kw + self.outpad

    def forward(self, x, want_ctx=False):
        kh, kw, _, cout = self.weight.shape
        h, w, _ = self.in_shape
        hf, wf = self._full_size()
        prod = np.tensordot(x, self.weight, axes=([2], [2]))  # (h, w, kh, kw, co)
        full = np.zeros((hf, wf, cout))
        s = self.stride
        for r in range(kh):
            for c in range(kw):
                full[r : r + (h - 1) * s + 1 : s, c : c + (w - 1) * s + 1 : s] += prod[:, :, r, c, :]
        p = self.pad
        out = full[p : p + self.out_shape[0], p : p + self.out_shape[1]]
        return out + self.bias, None

    def backward(self, ctx, cot):
        hf, wf = self._full_size()
        _, _, cout = self.out_shape
        p = self.pad
        full = np.zeros((hf, wf, cout))
        full[p : p + self.out_shape[0], p : p + self.out_shape[1]] = cot
        kh, kw, ci, _ = self.weight.shape
        h, w, _ = self.in_shape
        s0, s1, s2 = full.strides
        s = self.stride
        patches = as_strided(full, (h, w, kh, kw, cout), (s0 * s, s1 * s, s0, s1, s2))
        return np.tensordot(patches, self.weight, axes=([2, 3, 4], [0, 1, 3]))

    def param_tensors(self):
        return [self.weight32, self.bias32]

    def extra_dims(self):
        kh, kw = self.weight32.shape[:2]
        return [kh, kw, self.stride, self.pad, self.outpad]


class FRN(Layer):
    """Filter response normalization: per-channel second-moment scaling."""

    kind = "frn"

    def __init__(self, gamma, beta, eps, in_shape, name="frn"):
        c = in_shape[2]
        super().__init__(name, in_shape, in_shape)
        self.gamma32 = _master(gamma, (c,))
        self.beta32 = _master(beta, (c,))
        self.eps32 = _master([eps], (1,))
        self.gamma = self.gamma32.astype(np.float64)
        self.beta = self.beta32.astype(np.float64)
        self.eps = float(self.eps32[0])

    def forward(self, x, want_ctx=False):
        nu2 = np.mean(x * x, axis=(0, 1))
        inv = 1.0 / np.sqrt(nu2 + self.eps)
        y = self.gamma * (x * inv) + self.beta
        return y, (x, inv) if want_ctx else None

    def backward(self, ctx, cot):
        x, inv = ctx
        n = self.in_shape[0] * self.in_shape[1]
        u = cot * self.gamma
        dot = np.sum(x * u, axis=(0, 1)) / n
        return u * inv - (inv ** 3) * dot * x

    def param_tensors(self):
        return [self.gamma32, self.beta32, self.eps32]


class TLU(Layer):
    """Thresholded linear unit: max(x, tau) with a per-channel threshold."""

    kind = "tlu"

    def __init__(self, tau, in_shape, name="tlu"):
        c = in_shape[2]
        super().__init__(name, in_shape, in_shape)
        self.tau32 = _master(tau, (c,))
        self.tau = self.tau32.astype(np.float64)

    def forward(self, x, want_ctx=False):
        mask = x > self.tau
        return np.where(mask, x, self.tau), mask if want_ctx else None

    def backward(self, ctx, cot):
        return cot * ctx

    def param_tensors(self):
        return [self.tau32]


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope, in_shape, name="lrelu"):
        super().__init__(name, in_shape, in_shape)
        self.slope32 = _master([slope], (1,))
        self.slope = float(self.slope32[0])

    def forward(self, x, want_ctx=False):
        mask = x > 0
        return np.where(mask, x, self.slope * x), mask if want_ctx else None

    def backward(self, ctx, cot):
        return np.where(ctx, cot, self.slope * cot)

    def param_tensors(self):
        return [self.slope32]


class Tanh(Layer):
    kind = "tanh"

    def __init__(self, in_shape, name="tanh"):
        super().__init__(name, in_shape, in_shape)

    def forward(self, x, want_ctx=False):
        y = np.tanh(x)
        return y, y if want_ctx else None

    def backward(self, ctx, cot):
        return cot * (1.0 - ctx * ctx)


class BatchNormInference(Layer):
    """Frozen batch normalization: a fixed per-channel affine map."""

    kind = "batchnorm"

    def __init__(self, gamma, beta, mean, var, eps, in_shape, name="bn"):
        c = in_shape[2]
        super().__init__(name, in_shape, in_shape)
        self.gamma32 = _master(gamma, (c,))
        self.beta32 = _master(beta, (c,))
        self.mean32 = _master(mean, (c,))
        self.var32 = _master(var, (c,))
        self.eps32 = _master([eps], (1,))
        var = self.var32.astype(np.float64)
        if np.any(var < 0):
            raise NetworkValidationError(f"{name}: negative stored variance")
        self.scale = self.gamma32.astype(np.float64) / np.sqrt(var + float(self.eps32[0]))
        self.shift = self.beta32.astype(np.float64) - self.scale * self.mean32.astype(np.float64)

    def forward(self, x, want_ctx=False):
        return x * self.scale + self.shift, None

    def backward(self, ctx, cot):
        return cot * self.scale

    def param_tensors(self):
        return [self.gamma32, self.beta32, self.mean32, self.var32, self.eps32]


class AvgPool(Layer):
    kind = "avg_pool"

    def __init__(self, k, in_shape, name="pool"):
        h, w, c = in_shape
        if h % k or w % k:
            raise NetworkValidationError(f"{name}: input {h}x{w} not divisible by pool size {k}")
        super().__init__(name, in_shape, (h // k, w // k, c))
        self.k = int(k)

    def forward(self, x, want_ctx=False):
        k = self.k
        ho, wo, c = self.out_shape
        return x.reshape(ho, k, wo, k, c).mean(axis=(1, 3)), None

    def backward(self, ctx, cot):
        k = self.k
        return np.repeat(np.repeat(cot, k, axis=0), k, axis=1) / (k * k)

    def extra_dims(self):
        return [self.k]


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def __init__(self, in_shape, name="gpool"):
        super().__init__(name, in_shape, (1, 1, in_shape[2]))

    def forward(self, x, want_ctx=False):
        return x.mean(axis=(0, 1), keepdims=True), None

    def backward(self, ctx, cot):
        h, w, _ = self.in_shape
        return np.broadcast_to(cot / (h * w), self.in_shape).copy()


class AttentionParams:
    """Projection matrices and the residual gate of a self-attention block."""

    def __init__(self, w_query, w_key, w_value, w_out, gate):
        self.w_query32 = _master(w_query)
        cbar, c = self.w_query32.shape
        self.w_key32 = _master(w_key, (cbar, c))
        self.w_value32 = _master(w_value, (cbar, c))
        self.w_out32 = _master(w_out, (c, cbar))
        self.gate32 = _master([gate], (1,))
        if cbar > c:
            raise NetworkValidationError(f"attention reduced channels {cbar} exceed {c}")
        self.channels = c
        self.reduced = cbar

    def as_float64(self):
        return (
            self.w_query32.astype(np.float64),
            self.w_key32.astype(np.float64),
            self.w_value32.astype(np.float64),
            self.w_out32.astype(np.float64),
            float(self.gate32[0]),
        )


class SelfAttention(Layer):
    """Residual-gated self-attention over flattened spatial locations.

    For location features h_i, scores s_ij = (Wq h_i) . (Wk h_j) are
    normalized over i, the value projections are mixed accordingly, and the
    output is gate * attended + input, so a zero gate is an exact identity.
    """

    kind = "self_attention"

    def __init__(self, params, in_shape, name="attn"):
        if params.channels != in_shape[2]:
            raise ShapeChainError(f"{name}: attention channels {params.channels} != input {in_shape[2]}")
        super().__init__(name, in_shape, in_shape)
        self.params = params
        self.wq, self.wk, self.wv, self.wo, self.gate = params.as_float64()

    def forward(self, x, want_ctx=False):
        h, w, c = self.in_shape
        n = h * w
        flat = x.reshape(n, c)
        q = flat @ self.wq.T  # rows: projected locations
        k = flat @ self.wk.T
        scores = q @ k.T  # scores[i, j]
        scores -= scores.max(axis=0, keepdims=True)
        psi = np.exp(scores)
        psi /= psi.sum(axis=0, keepdims=True)  # column j sums to 1 over i
        v = flat @ self.wv.T
        mixed = psi.T @ v  # row j: sum_i psi[i, j] v_i
        out_flat = flat + self.gate * (mixed @ self.wo.T)
        ctx = (q, k, v, psi) if want_ctx else None
        return out_flat.reshape(self.in_shape), ctx

    def backward(self, ctx, cot):
        q, k, v, psi = ctx
        h, w, c = self.in_shape
        n = h * w
        dy = cot.reshape(n, c)
        dx = dy.copy()
        dmixed = self.gate * (dy @ self.wo)
        dv = psi @ dmixed
        dpsi = v @ dmixed.T  # dpsi[i, j]
        dscores = psi * (dpsi - np.sum(psi * dpsi, axis=0, keepdims=True))
        dq = dscores @ k
        dk = dscores.T @ q
        dx += dq @ self.wq + dk @ self.wk + dv @ self.wv
        return dx.reshape(self.in_shape)

    def param_tensors(self):
        p = self.params
        return [p.w_query32, p.w_key32, p.w_value32, p.w_out32, p.gate32]

    def extra_dims(self):
        return [self.params.reduced]


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, in_shape, name="flatten"):
        h, w, c = in_shape
        super().__init__(name, in_shape, (1, 1, h * w * c))

    def forward(self, x, want_ctx=False):
        return x.reshape(self.out_shape), None

    def backward(self, ctx, cot):
        return cot.reshape(self.in_shape)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, in_shape, out_shape, name="reshape"):
        if int(np.prod(in_shape)) != int(np.prod(out_shape)):
            raise ShapeChainError(f"{name}: cannot reshape {in_shape} to {out_shape}")
        super().__init__(name, in_shape, out_shape)

    def forward(self, x, want_ctx=False):
        return x.reshape(self.out_shape), None

    def backward(self, ctx, cot):
        return cot.reshape(self.in_shape)


class ResBlock(Layer):
    """Two-branch residual block: output = main(x) + shortcut(x).

    An empty shortcut is the identity. The up/down variants only differ in
    which resampling layers their branches carry; the container itself is
    agnostic and validates that both branches agree on the output shape.
    """

    kind = "res_block"

    def __init__(self, main, shortcut, in_shape, variant="same", name="res"):
        if variant not in ("same", "up", "down"):
            raise NetworkValidationError(f"{name}: unknown variant {variant!r}")
        if not main:
            raise NetworkValidationError(f"{name}: main branch must not be empty")
        out_shape = main[-1].out_shape
        super().__init__(name, in_shape, out_shape)
        self.main = list(main)
        self.shortcut = list(shortcut)
        self.variant = variant
        self.kind = {"same": "res_block", "up": "res_block_up", "down": "res_block_down"}[variant]

    def validate(self):
        shape = self.in_shape
        for layer in self.main:
            if layer.in_shape != shape:
                raise ShapeChainError(
                    f"{self.name}/{layer.name}: expected input {shape}, layer declares {layer.in_shape}"
                )
            layer.validate()
            shape = layer.out_shape
        if shape != self.out_shape:
            raise ShapeChainError(f"{self.name}: main branch ends at {shape}, block declares {self.out_shape}")
        shape = self.in_shape
        for layer in self.shortcut:
            if layer.in_shape != shape:
                raise ShapeChainError(
                    f"{self.name}/{layer.name}: expected input {shape}, layer declares {layer.in_shape}"
                )
            layer.validate()
            shape = layer.out_shape
        if shape != self.out_shape:
            raise ShapeChainError(
                f"{self.name}: shortcut ends at {shape}, block declares {self.out_shape}"
            )

    def forward(self, x, want_ctx=False):
        y = x
        main_ctx = []
        for layer in self.main:
            y, ctx = layer.forward(y, want_ctx)
            main_ctx.append(ctx)
        s = x
        short_ctx = []
        for layer in self.shortcut:
            s, ctx = layer.forward(s, want_ctx)
            short_ctx.append(ctx)
        return y + s, (main_ctx, short_ctx) if want_ctx else None

    def backward(self, ctx, cot):
        main_ctx, short_ctx = ctx
        du = cot
        for layer, lctx in zip(reversed(self.main), reversed(main_ctx)):
            du = layer.backward(lctx, du)
        ds = cot
        for layer, lctx in zip(reversed(self.shortcut), reversed(short_ctx)):
            ds = layer.backward(lctx, ds)
        return du + ds

    def children(self):
        return self.main + self.shortcut

    def extra_dims(self):
        return [len(self.main), len(self.shortcut)]


class SpectralNormWrapper(Layer):
    """Marks a linear layer whose weight was divided by its spectral norm.

    The wrapped weight is stored pre-normalized, so inference just delegates.
    The cached power-iteration vector and the export-time singular value are
    kept for re-verification tooling.
    """

    kind = "spectral_norm"

    def __init__(self, child, u, sigma, name="sn"):
        if not isinstance(child, (Dense, Conv, ConvTranspose)):
            raise NetworkValidationError(f"{name}: spectral norm wraps linear layers only")
        super().__init__(name, child.in_shape, child.out_shape)
        self.child = child
        self.u32 = _master(u)
        self.sigma32 = _master([sigma], (1,))

    def forward(self, x, want_ctx=False):
        return self.child.forward(x, want_ctx)

    def backward(self, ctx, cot):
        return self.child.backward(ctx, cot)

    def param_tensors(self):
        return [self.u32, self.sigma32]

    def extra_dims(self):
        return [1, self.u32.shape[0]]

    def children(self):
        return [self.child]

    def validate(self):
        _check_finite(self.name, *self.param_tensors())
        self.child.validate()

    def weight_matrix(self):
        """Wrapped weight reshaped to (out_features, in_features)."""
        w = self.child.weight
        if isinstance(self.child, Dense):
            return w
        kh, kw, ci, co = w.shape
        return w.transpose(3, 0, 1, 2).reshape(co, kh * kw * ci)
