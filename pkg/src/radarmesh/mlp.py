"""Small fully-connected networks with hand-written exact gradients.

Only what the fixed two-network topology needs: batched forward with cached
activations, reverse-mode parameter/input gradients, and a forward tangent
(directional derivative) pass whose parameter gradients are required when a
loss depends on the network's input gradient (the SDF normal path).

Hidden activations are ReLU, outputs are linear.  ReLU is piecewise linear,
so the gradient *of* an input gradient w.r.t. parameters reuses the cached
reverse vectors with tangent activations in place of primal ones; there are
no second-order activation terms.  All math runs in the dtype of the
parameters (float64 for the verification configuration).
"""

from __future__ import annotations

import numpy as np

from .optim import Param


class Mlp:
    """Fully-connected net: sizes[0] -> ... -> sizes[-1], ReLU hidden layers."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float32):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.dtype = np.dtype(dtype)
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.weights.append(Param(w.astype(self.dtype)))
            self.biases.append(Param(np.zeros(fan_out, dtype=self.dtype)))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Param]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Return (output, cache); cache feeds every backward-style pass."""
        h = np.asarray(x, dtype=self.dtype)
        hs = [h]
        gates = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.value.T + b.value
            if i < self.num_layers - 1:
                gate = a > 0
                h = np.where(gate, a, 0.0)
                gates.append(gate)
            else:
                h = a
            hs.append(h)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite values in network forward pass")
        return h, {"hs": hs, "gates": gates}

    def backward(self, cache: dict, d_out: np.ndarray, accumulate: bool = True) -> np.ndarray:
        """Reverse pass; accumulates parameter gradients, returns d input."""
        hs, gates = cache["hs"], cache["gates"]
        delta = np.asarray(d_out, dtype=self.dtype)
        for i in range(self.num_layers - 1, -1, -1):
            if i < self.num_layers - 1:
                delta = delta * gates[i]
            if accumulate:
                self.weights[i].grad += delta.T @ hs[i]
                self.biases[i].grad += delta.sum(axis=0)
            delta = delta @ self.weights[i].value
        return delta

    def input_gradient(self, cache: dict, out_index: int) -> tuple[np.ndarray, list]:
        """Gradient of one output w.r.t. the input, per sample.

        Also returns the gated reverse vectors (one per layer), which the
        tangent-gradient pass reuses.
        """
        gates = cache["gates"]
        n = len(cache["hs"][0])
        delta = np.zeros((n, self.sizes[-1]), dtype=self.dtype)
        delta[:, out_index] = 1.0
        reverse = []
        for i in range(self.num_layers - 1, -1, -1):
            if i < self.num_layers - 1:
                delta = delta * gates[i]
            reverse.append(delta)
            delta = delta @ self.weights[i].value
        reverse.reverse()  # reverse[i] pairs with layer i
        return delta, reverse

    def tangent(self, cache: dict, t0: np.ndarray) -> list[np.ndarray]:
        """Forward directional derivatives: tangents of every layer input."""
        gates = cache["gates"]
        t = np.asarray(t0, dtype=self.dtype)
        ts = [t]
        for i in range(self.num_layers):
            t = t @ self.weights[i].value.T
            if i < self.num_layers - 1:
                t = t * gates[i]
            ts.append(t)
        return ts

    def accumulate_tangent_grads(self, reverse: list, tangents: list):
        """Parameter gradients of the summed tangent directional output.

        ``reverse`` comes from :meth:`input_gradient` for the same output
        index the tangent targets.  Valid because ReLU has no curvature:
        bias gradients vanish and weight gradients are outer products of
        reverse vectors with tangent activations.
        """
        for i in range(self.num_layers):
            self.weights[i].grad += reverse[i].T @ tangents[i]
