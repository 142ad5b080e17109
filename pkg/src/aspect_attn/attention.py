"""
Cross-attention variants of the ablation ladder.

``M1``  base two-head design (embedding + temporal heads). Softmax runs over
        the informed-feature axis F and the score matrix is transposed
        *afterwards*, so the weights that multiply the values are not
        row-stochastic. Kept verbatim for the ablation; do not use it for new
        work.
``M2``  same heads, transpose *before* softmax; softmax over D (embedding
        head) or T (temporal head).
``M3``  M2 scores, values replaced by the tiled raw informed features.
``M4``  one head: SSL frames query the K aspect tokens, which act as keys
        (after ``W_K``) and as values (identity projection). Softmax over K.

Shapes for the two-head variants, with ``X`` the ``T x D`` SSL sequence and
``x`` the length-F informed feature vector (keys use ``W_K = I``):

=========  =========================  ==========  ===========================
head       scores (pre-softmax)       d_k         values
=========  =========================  ==========  ===========================
embedding  (X W_Q)^T tile(x, T)  D x F  T           (X W_V)^T   D x T
temporal   (X W_Q) tile(x, D)    T x F  D           X W_V       T x D
=========  =========================  ==========  ===========================

M3 swaps the values for ``tile(x, D)`` (embedding) and ``tile(x, T)``
(temporal), so each output row equals ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import AspectTokenMatrix
from .errors import ConfigError, ShapeError
from .tensor import (Tensor, as_tensor, matmul, repeat_rows, scale, softmax,
                     transpose)

VARIANTS = ("m1", "m2", "m3", "m4")
HEADS = ("embedding", "temporal", "aspect")


@dataclass(frozen=True)
class AttentionVariant:
    tag: str
    head: str

    def __post_init__(self):
        tag = self.tag.lower()
        object.__setattr__(self, "tag", tag)
        if tag not in VARIANTS:
            raise ConfigError(f"unknown variant {self.tag!r}; expected one of {VARIANTS}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if (tag == "m4") != (self.head == "aspect"):
            raise ConfigError(f"head {self.head!r} is not valid for variant {tag}")

    @staticmethod
    def heads_for(tag: str) -> tuple["AttentionVariant", ...]:
        tag = tag.lower()
        if tag == "m4":
            return (AttentionVariant("m4", "aspect"),)
        return (AttentionVariant(tag, "embedding"), AttentionVariant(tag, "temporal"))


@dataclass
class AttentionParams:
    """
    Projection matrices of one attention head. ``None`` stands for the
    identity (``W_K`` of M1-M3, ``W_V`` of M3 and M4) and never receives a
    gradient.
    """

    w_q: Tensor
    w_k: Tensor | None = None
    w_v: Tensor | None = None
    d_k: int | None = None


@dataclass
class ScoreMatrix:
    """
    Attention weights of one head.

    ``weights`` is ``T x K`` for M4, ``D x F`` for embedding heads and
    ``T x F`` for temporal heads; ``axis`` is the axis along which the
    softmax normalised it.
    """

    weights: Tensor
    axis: int
    head: str = "aspect"

    @property
    def array(self) -> np.ndarray:
        return self.weights.data


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, d_k: int) -> tuple[Tensor, ScoreMatrix]:
    """``softmax(q k^T / sqrt(d_k)) v`` with the softmax over the rows of ``k``."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are incompatible")
    if d_k <= 0:
        raise ShapeError(f"d_k must be positive, got {d_k}")
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d_k))
    w = softmax(scores, axis=1)
    return matmul(w, v), ScoreMatrix(w, 1)


def _check_two_head_inputs(ssl: Tensor, informed: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    ssl, informed = as_tensor(ssl), as_tensor(informed)
    if ssl.ndim != 2:
        raise ShapeError(f"SSL input must be T x D, got shape {ssl.shape}")
    if informed.ndim != 1:
        raise ShapeError(f"informed features must be a vector, got shape {informed.shape}")
    D = ssl.shape[1]
    if params.w_q.shape != (D, D):
        raise ShapeError(f"W_Q has shape {params.w_q.shape}, expected {(D, D)}")
    if params.w_v is not None and params.w_v.shape != (D, D):
        raise ShapeError(f"W_V has shape {params.w_v.shape}, expected {(D, D)}")
    return ssl, informed


def _project(x: Tensor, w: Tensor | None) -> Tensor:
    return x if w is None else matmul(x, w)


def _embedding_scores(ssl: Tensor, informed: Tensor, params: AttentionParams) -> tuple[Tensor, int]:
    T = ssl.shape[0]
    d_k = params.d_k or T
    q = transpose(_project(ssl, params.w_q))                  # D x T
    keys = repeat_rows(informed, T)                           # T x F
    return scale(matmul(q, keys), 1.0 / np.sqrt(d_k)), d_k    # D x F


def _temporal_scores(ssl: Tensor, informed: Tensor, params: AttentionParams) -> tuple[Tensor, int]:
    D = ssl.shape[1]
    d_k = params.d_k or D
    q = _project(ssl, params.w_q)                             # T x D
    keys = repeat_rows(informed, D)                           # D x F
    return scale(matmul(q, keys), 1.0 / np.sqrt(d_k)), d_k    # T x F


def _scores(ssl, informed, params, head):
    if head == "embedding":
        return _embedding_scores(ssl, informed, params)[0]
    if head == "temporal":
        return _temporal_scores(ssl, informed, params)[0]
    raise ConfigError(f"head must be 'embedding' or 'temporal', got {head!r}")


def _ssl_values(ssl: Tensor, params: AttentionParams, head: str) -> Tensor:
    v = _project(ssl, params.w_v)                             # T x D
    return transpose(v) if head == "embedding" else v


def m1_attention(ssl, informed, params: AttentionParams, head: str) -> tuple[Tensor, ScoreMatrix]:
    """
    Base-method head, flaw included: softmax over F, *then* transpose.

    Returns ``Z = W^T V`` (``F x T`` for the embedding head, ``F x D`` for the
    temporal head) and the F-normalised scores.

    .. deprecated:: kept only to reproduce the ablation baseline.
    """
    ssl, informed = _check_two_head_inputs(ssl, informed, params)
    w = softmax(_scores(ssl, informed, params, head), axis=1)
    z = matmul(transpose(w), _ssl_values(ssl, params, head))
    return z, ScoreMatrix(w, 1, head)


def m1_embedding_attention(ssl, informed, params):
    return m1_attention(ssl, informed, params, "embedding")


def m1_temporal_attention(ssl, informed, params):
    return m1_attention(ssl, informed, params, "temporal")


def _fixed_weights(ssl, informed, params, head) -> Tensor:
    # transpose first, then normalise over D (embedding) or T (temporal)
    return softmax(transpose(_scores(ssl, informed, params, head)), axis=1)


def m2_fixed_attention(ssl, informed, params: AttentionParams, head: str) -> tuple[Tensor, ScoreMatrix]:
    """
    Transpose before softmax. ``W`` is ``F x D`` (embedding) or ``F x T``
    (temporal) with unit row sums, and ``Z = W V`` mixes value rows convexly.

    The returned ScoreMatrix keeps the ``D x F`` / ``T x F`` orientation of
    the raw scores, normalised along axis 0.
    """
    ssl, informed = _check_two_head_inputs(ssl, informed, params)
    w = _fixed_weights(ssl, informed, params, head)
    z = matmul(w, _ssl_values(ssl, params, head))
    return z, ScoreMatrix(transpose(w), 0, head)


def m3_interpretable_value_attention(ssl, informed, params: AttentionParams, head: str) -> tuple[Tensor, ScoreMatrix]:
    """M2 scores over values built by tiling the raw informed features; ``Z`` is ``F x F``."""
    ssl, informed = _check_two_head_inputs(ssl, informed, params)
    w = _fixed_weights(ssl, informed, params, head)
    n = ssl.shape[1] if head == "embedding" else ssl.shape[0]
    z = matmul(w, repeat_rows(informed, n))
    return z, ScoreMatrix(transpose(w), 0, head)


def aspect_attention(ssl, tokens: AspectTokenMatrix | Tensor, params: AttentionParams) -> tuple[Tensor, ScoreMatrix]:
    """
    Aspect cross-attention.

    Queries ``X W_Q`` (T x D) are scored against keys ``tokens W_K`` (K x D);
    the softmax runs over K, and the values are the tokens themselves, so
    every output row is a convex combination of the K tokens.
    """
    ssl = as_tensor(ssl)
    tok = tokens.tokens if isinstance(tokens, AspectTokenMatrix) else as_tensor(tokens)
    if ssl.ndim != 2 or tok.ndim != 2:
        raise ShapeError(f"expected T x D SSL and K x D tokens, got {ssl.shape} and {tok.shape}")
    D = ssl.shape[1]
    if tok.shape[1] != D:
        raise ShapeError(f"token dimension {tok.shape[1]} != SSL dimension {D}")
    if params.w_q.shape != (D, D) or (params.w_k is not None and params.w_k.shape != (D, D)):
        raise ShapeError(f"W_Q/W_K must be {(D, D)}")
    if params.w_v is not None:
        raise ConfigError("the aspect head uses identity values; W_V must be None")
    q = matmul(ssl, params.w_q)
    keys = _project(tok, params.w_k)
    return scaled_dot_attention(q, keys, tok, params.d_k or D)


def contribution_decomposition(weights, tokens) -> np.ndarray:
    """
    Split every output row into per-aspect terms ``c[t, k] = W[t, k] * token_k``.

    Returns a ``T x K x D`` array whose sum over ``k`` reproduces ``Z``.
    """
    w = weights.array if isinstance(weights, ScoreMatrix) else np.asarray(getattr(weights, "data", weights))
    tok = tokens.tokens.data if isinstance(tokens, AspectTokenMatrix) else np.asarray(getattr(tokens, "data", tokens))
    if w.ndim != 2 or tok.ndim != 2 or w.shape[1] != tok.shape[0]:
        raise ShapeError(f"weights {w.shape} and tokens {tok.shape} do not align")
    return w[:, :, None] * tok[None, :, :]
