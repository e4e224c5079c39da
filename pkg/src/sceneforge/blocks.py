"""Composite differentiable blocks shared by both streams."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, DimensionError, ParameterStore, Tensor


@dataclass
class RefineBlockParams:
    """Residual refine block: ``Norm(Dropout(W2 gelu(W1 x + b1) + b2) + W3 x)``."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, in_dim: int, hidden: int, out_dim: int):
        return cls(
            w1=store.gaussian_init(f"{prefix}.w1", (hidden, in_dim)),
            b1=store.gaussian_init(f"{prefix}.b1", (hidden,), bias=True),
            w2=store.gaussian_init(f"{prefix}.w2", (out_dim, hidden)),
            b2=store.gaussian_init(f"{prefix}.b2", (out_dim,), bias=True),
            w3=store.gaussian_init(f"{prefix}.w3", (out_dim, in_dim)),
        )

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


def refine_block(
    x: Tensor,
    params: RefineBlockParams,
    train: bool = False,
    keep_prob: float = 0.5,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"refine block expects width {params.in_dim}, got {x.shape[-1]}")
    refined = nx.linear(nx.gelu(nx.linear(x, params.w1, params.b1)), params.w2, params.b2)
    refined = nx.dropout(refined, keep_prob, rng, train)
    return nx.layer_norm(nx.add(refined, nx.linear(x, params.w3)))


@dataclass
class AttentionParams:
    """Query/key/value projections with an optional output projection."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    wo: Tensor | None = None
    bo: Tensor | None = None

    @classmethod
    def create(
        cls,
        store: ParameterStore,
        prefix: str,
        q_dim: int,
        kv_dim: int,
        key_dim: int,
        value_dim: int | None = None,
        out_dim: int | None = None,
        with_bias: bool = True,
    ):
        value_dim = key_dim if value_dim is None else value_dim

        def bias(name, n):
            return store.gaussian_init(f"{prefix}.{name}", (n,), bias=True) if with_bias else None

        p = cls(
            wq=store.gaussian_init(f"{prefix}.wq", (key_dim, q_dim)),
            wk=store.gaussian_init(f"{prefix}.wk", (key_dim, kv_dim)),
            wv=store.gaussian_init(f"{prefix}.wv", (value_dim, kv_dim)),
            bq=bias("bq", key_dim),
            # no key bias: it shifts every logit of a query equally and the softmax ignores it
            bv=bias("bv", value_dim),
        )
        if out_dim is not None:
            p.wo = store.gaussian_init(f"{prefix}.wo", (out_dim, value_dim))
            p.bo = bias("bo", out_dim)
        return p


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, width = x.shape
    x = nx.reshape(x, (*lead, length, n_heads, width // n_heads))
    k = len(lead)
    return nx.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, n_heads, length, dh = x.shape
    k = len(lead)
    x = nx.transpose(x, (*range(k), k + 1, k, k + 2))
    return nx.reshape(x, (*lead, length, n_heads * dh))


def _swap_last(x: Tensor) -> Tensor:
    n = x.data.ndim
    return nx.transpose(x, (*range(n - 2), n - 1, n - 2))


def self_attention(
    queries: Tensor, keys_values: Tensor, params: AttentionParams, n_heads: int = 1
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention.

    ``queries`` is (..., Lq, dq) and ``keys_values`` is (..., Lk, dkv). Returns
    the attended output (..., Lq, d) and the weights; with ``n_heads > 1`` the
    weights carry an extra head axis before Lq.
    """
    if queries.shape[:-2] != keys_values.shape[:-2]:
        raise DimensionError(f"attention batch dims differ: {queries.dims} vs {keys_values.dims}")
    q = nx.linear(queries, params.wq, params.bq)
    k = nx.linear(keys_values, params.wk, params.bk)
    v = nx.linear(keys_values, params.wv, params.bv)
    key_dim = q.shape[-1]
    if key_dim % n_heads:
        raise ConfigError(f"key width {key_dim} not divisible by {n_heads} heads")
    if n_heads > 1:
        q, k, v = (_split_heads(t, n_heads) for t in (q, k, v))
    logits = nx.scale(nx.matmul(q, _swap_last(k)), 1.0 / math.sqrt(key_dim // n_heads))
    weights = nx.softmax(logits, axis=-1)
    out = nx.matmul(weights, v)
    if n_heads > 1:
        out = _merge_heads(out)
    if params.wo is not None:
        out = nx.linear(out, params.wo, params.bo)
    return out, weights


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass
class TransformerParams:
    """Post-norm encoder stack with an optional learned position table."""

    layers: list[EncoderLayerParams]
    n_heads: int
    d_model: int
    positions: Tensor | None = None

    @classmethod
    def create(
        cls,
        store: ParameterStore,
        prefix: str,
        d_model: int,
        n_layers: int = 2,
        n_heads: int = 8,
        ffn_dim: int | None = None,
        max_len: int | None = None,
    ):
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        ffn_dim = ffn_dim or 4 * d_model
        layers = []
        for i in range(n_layers):
            p = f"{prefix}.layer{i}"
            layers.append(
                EncoderLayerParams(
                    attn=AttentionParams.create(store, f"{p}.attn", d_model, d_model, d_model, out_dim=d_model),
                    ln1_g=store.register(f"{p}.ln1_g", np.ones(d_model)),
                    ln1_b=store.gaussian_init(f"{p}.ln1_b", (d_model,), bias=True),
                    ff_w1=store.gaussian_init(f"{p}.ff_w1", (ffn_dim, d_model)),
                    ff_b1=store.gaussian_init(f"{p}.ff_b1", (ffn_dim,), bias=True),
                    ff_w2=store.gaussian_init(f"{p}.ff_w2", (d_model, ffn_dim)),
                    ff_b2=store.gaussian_init(f"{p}.ff_b2", (d_model,), bias=True),
                    ln2_g=store.register(f"{p}.ln2_g", np.ones(d_model)),
                    ln2_b=store.gaussian_init(f"{p}.ln2_b", (d_model,), bias=True),
                )
            )
        positions = None
        if max_len is not None:
            positions = store.gaussian_init(f"{prefix}.pos", (max_len, d_model))
        return cls(layers=layers, n_heads=n_heads, d_model=d_model, positions=positions)


def transformer_encode(
    sequence, params: TransformerParams, use_positions: bool = False
) -> Tensor:
    """Encode a (..., L, d_model) sequence and return the full output sequence.

    A list of d_model vectors is stacked first. Without positions the map is
    permutation-equivariant along L.
    """
    if isinstance(sequence, (list, tuple)):
        if not sequence:
            raise DimensionError("empty sequence")
        sequence = nx.stack(sequence, axis=0)
    x = sequence
    if x.shape[-1] != params.d_model:
        raise DimensionError(f"encoder width {params.d_model}, got {x.shape[-1]}")
    if use_positions:
        if params.positions is None:
            raise ConfigError("positions requested but the encoder has no position table")
        length = x.shape[-2]
        if length > params.positions.shape[0]:
            raise ConfigError(f"sequence length {length} exceeds position table {params.positions.shape[0]}")
        x = nx.add(x, nx.take(params.positions, np.arange(length), axis=0))
    for layer in params.layers:
        attended, _ = self_attention(x, x, layer.attn, params.n_heads)
        x = nx.layer_norm(nx.add(x, attended), weight=layer.ln1_g, bias=layer.ln1_b)
        ff = nx.linear(nx.gelu(nx.linear(x, layer.ff_w1, layer.ff_b1)), layer.ff_w2, layer.ff_b2)
        x = nx.layer_norm(nx.add(x, ff), weight=layer.ln2_g, bias=layer.ln2_b)
    return x
