"""Cross-attention building blocks for the fusion network.

All blocks are pre-norm transformer sub-modules built from `autodiff` ops:
layer norm, multi-head cross attention, feed-forward, a gated cross-attention
stack (scalar tanh gate, zero-initialized so the stack contributes exactly
nothing at init), and a resampler that maps any input sequence to a fixed
number of learned query tokens.

`BLOCK_EVAL_COUNTER` counts every cross-attention block evaluation; the
efficiency probes assert it stays frozen while queries are being scored.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Incremented on every cross-attention block forward; see eval.latency_probe.
BLOCK_EVAL_COUNTER = {"count": 0}


class Module:
    """Minimal parameter container; children discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, elem in enumerate(value):
                    if isinstance(elem, Module):
                        yield from elem.named_parameters(prefix=f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    """Affine map. `init` picks the weight start: "xavier", "identity" (square
    only) or "zero". Identity/zero starts keep residual blocks close to a
    pass-through, which matters downstream: gated stacks receive gradient only
    through tanh(gate) * output, so an opening gate must already forward
    meaningful KV content."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, init: str = "xavier"):
        if init == "identity":
            if d_in != d_out:
                raise ValueError("identity init needs a square map")
            weight = np.eye(d_in, dtype=dtype)
        elif init == "zero":
            weight = np.zeros((d_in, d_out), dtype=dtype)
        else:
            weight = _xavier(rng, d_in, d_out, dtype)
        self.weight = ad.parameter(weight)
        self.bias = ad.parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    """Per-token normalization over the last axis, then elementwise affine."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = ad.parameter(np.ones(dim, dtype=dtype))
        self.bias = ad.parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / ad.sqrt(var + self.eps)
        return normed * self.gain + self.bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Functional layer norm; eps > 0 guards constant inputs."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return (centered / ad.sqrt(var + eps)) * gain + bias


class MultiHeadCrossAttention(Module):
    """Scaled dot-product attention, queries from one sequence, keys/values from another."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        # Identity value/output start: with near-uniform fresh attention the
        # block forwards an average of its KV tokens instead of a random
        # rotation of them.
        self.wv = Linear(dim, dim, rng, dtype, init="identity")
        self.wo = Linear(dim, dim, rng, dtype, init="identity")

    def _split(self, x: Tensor, n: int) -> Tensor:
        # (n, dim) -> (heads, n, head_dim)
        return ad.swapaxes(ad.reshape(x, (n, self.heads, self.head_dim)), 0, 1)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor, return_weights: bool = False):
        m, d = q_tokens.shape
        length, d_kv = kv_tokens.shape
        if d != self.dim or d_kv != self.dim:
            raise ValueError(f"attention dim mismatch: got {d} and {d_kv}, expected {self.dim}")
        if length < 1:
            raise ValueError("attention needs at least one key/value token")

        q = self._split(self.wq(q_tokens), m)
        k = self._split(self.wk(kv_tokens), length)
        v = self._split(self.wv(kv_tokens), length)

        scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(self.head_dim))
        weights = ad.softmax(scores, axis=-1)  # (heads, m, L)
        pooled = ad.matmul(weights, v)  # (heads, m, head_dim)
        merged = ad.reshape(ad.swapaxes(pooled, 0, 1), (m, self.dim))
        out = self.wo(merged)
        if return_weights:
            return out, weights.data.copy()
        return out


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, mult: int = 4, dtype=np.float32):
        self.fc1 = Linear(dim, dim * mult, rng, dtype)
        # Zero write-back: the residual branch starts as a no-op.
        self.fc2 = Linear(dim * mult, dim, rng, dtype, init="zero")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class CrossAttentionBlock(Module):
    """Pre-norm cross attention + feed-forward, both with residual connections.

    No positional encoding lives inside the block, so the output is invariant
    to permutations of the key/value rows.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.ln_q = LayerNorm(dim, dtype=dtype)
        self.ln_kv = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadCrossAttention(dim, heads, rng, dtype)
        self.ln_ff = LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, rng, dtype=dtype)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        dim = self.attn.dim
        if q_tokens.shape[-1] != dim or kv_tokens.shape[-1] != dim:
            raise ValueError(
                f"block dim mismatch: got {q_tokens.shape[-1]} and {kv_tokens.shape[-1]}, expected {dim}"
            )
        BLOCK_EVAL_COUNTER["count"] += 1
        x = q_tokens + self.attn(self.ln_q(q_tokens), self.ln_kv(kv_tokens))
        return x + self.ff(self.ln_ff(x))


class CrossAttentionStack(Module):
    """Blocks applied in sequence; every layer re-attends to the same KV tokens."""

    def __init__(self, dim: int, heads: int, depth: int, rng: np.random.Generator, dtype=np.float32):
        self.blocks = [CrossAttentionBlock(dim, heads, rng, dtype) for _ in range(depth)]

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        x = q_tokens
        for block in self.blocks:
            x = block(x, kv_tokens)
        return x


class GatedFusion(Module):
    """Cross-attention stack scaled by tanh of a learnable scalar gate.

    The gate starts at zero, so a freshly initialized stack contributes an
    exactly-zero matrix regardless of its inputs.
    """

    def __init__(self, dim: int, heads: int, depth: int, rng: np.random.Generator, dtype=np.float32):
        self.stack = CrossAttentionStack(dim, heads, depth, rng, dtype)
        self.gate = ad.parameter(np.zeros((), dtype=dtype))

    def __call__(self, visual_tokens: Tensor, modality_tokens: Tensor) -> Tensor:
        return ad.tanh(self.gate) * self.stack(visual_tokens, modality_tokens)

    def gate_value(self) -> float:
        return math.tanh(float(self.gate.data))


class Resampler(Module):
    """Maps an L x d token sequence to exactly n_queries x d via learned queries.

    Learned positional embeddings are added to the *inputs* before attention;
    inputs longer than `max_len` are rejected.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        n_queries: int,
        rng: np.random.Generator,
        depth: int = 1,
        max_len: int = 64,
        dtype=np.float32,
    ):
        scale = 1.0 / math.sqrt(dim)
        self.queries = ad.parameter(rng.normal(0.0, scale, size=(n_queries, dim)).astype(dtype))
        self.pos = ad.parameter(rng.normal(0.0, scale, size=(max_len, dim)).astype(dtype))
        self.stack = CrossAttentionStack(dim, heads, depth, rng, dtype)
        self.n_queries = n_queries
        self.max_len = max_len

    def __call__(self, tokens: Tensor) -> Tensor:
        length = tokens.shape[0]
        if length < 1:
            raise ValueError("resampler input must have at least one token")
        if length > self.max_len:
            raise ValueError(f"resampler input length {length} exceeds max_len {self.max_len}")
        kv = tokens + ad.narrow(self.pos, 0, 0, length)
        return self.stack(self.queries, kv)
