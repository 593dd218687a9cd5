"""Evaluable network graph: an ordered layer chain with reverse-mode support."""

import numpy as np

from .layers import Layer, NetworkValidationError, ShapeChainError

ROLES = ("generator", "encoder")


class NetworkGraph:
    """Ordered layer list, evaluable forward and in reverse (vector-Jacobian).

    The graph is immutable after construction and holds no evaluation state,
    so a single instance can serve many sampling chains concurrently.
    """

    def __init__(self, layers, role, latent_dim=None, image_side=None, name=""):
        if role not in ROLES:
            raise NetworkValidationError(f"unknown role {role!r}, expected one of {ROLES}")
        if not layers:
            raise NetworkValidationError("a network needs at least one layer")
        self.layers = list(layers)
        self.role = role
        self.name = name
        self.latent_dim = latent_dim
        self.image_side = image_side
        self.validate()

    @property
    def input_shape(self):
        return self.layers[0].in_shape

    @property
    def output_shape(self):
        return self.layers[-1].out_shape

    def validate(self):
        shape = self.layers[0].in_shape
        for layer in self.layers:
            if layer.in_shape != shape:
                raise ShapeChainError(
                    f"layer {layer.name!r} expects input {layer.in_shape}, previous output is {shape}"
                )
            layer.validate()
            shape = layer.out_shape
        if self.latent_dim is not None:
            latent_shape = (1, 1, self.latent_dim)
            expected = latent_shape if self.role == "generator" else self.layers[-1].out_shape
            if self.role == "generator" and self.input_shape != latent_shape:
                raise ShapeChainError(
                    f"generator input {self.input_shape} != declared latent shape {latent_shape}"
                )
            if self.role == "encoder" and expected != latent_shape:
                raise ShapeChainError(
                    f"encoder output {self.output_shape} != declared latent shape {latent_shape}"
                )

    def _coerce_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x
        if x.size == int(np.prod(self.input_shape)):
            return x.reshape(self.input_shape)
        raise ShapeChainError(f"input shape {x.shape} incompatible with {self.input_shape}")

    def forward(self, x):
        """Evaluate the network; accepts any array of the right size."""
        y = self._coerce_input(x)
        for layer in self.layers:
            y, _ = layer.forward(y, want_ctx=False)
        return y

    def linearize(self, x):
        """Evaluate and return (output, pullback) where pullback(u) = J^T u."""
        y = self._coerce_input(x)
        contexts = []
        for layer in self.layers:
            y, ctx = layer.forward(y, want_ctx=True)
            contexts.append(ctx)

        def pullback(cotangent):
            cot = np.asarray(cotangent, dtype=np.float64)
            if cot.shape != self.output_shape:
                if cot.size != int(np.prod(self.output_shape)):
                    raise ShapeChainError(
                        f"cotangent shape {cot.shape} incompatible with output {self.output_shape}"
                    )
                cot = cot.reshape(self.output_shape)
            for layer, ctx in zip(reversed(self.layers), reversed(contexts)):
                cot = layer.backward(ctx, cot)
            return cot

        return y, pullback

    def vjp(self, x, cotangent):
        """Vector-Jacobian product J(x)^T cotangent."""
        _, pullback = self.linearize(x)
        return pullback(cotangent)

    def generate(self, latent):
        """Latent vector -> 2D image array (generator networks)."""
        out = self.forward(np.asarray(latent))
        return out.reshape(out.shape[0], out.shape[1])

    def encode(self, image):
        """2D image array -> latent vector (encoder networks)."""
        image = np.asarray(image, dtype=np.float64)
        out = self.forward(image.reshape(image.shape[0], image.shape[1], 1))
        return out.reshape(-1)

    def iter_all_layers(self):
        """Depth-first walk over all layers, composites included."""
        stack = list(reversed(self.layers))
        while stack:
            layer = stack.pop()
            yield layer
            stack.extend(reversed(layer.children()))

    def __repr__(self):
        return (
            f"NetworkGraph(role={self.role!r}, layers={len(self.layers)}, "
            f"{self.input_shape}->{self.output_shape})"
        )
