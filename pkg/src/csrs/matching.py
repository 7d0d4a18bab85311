"""Relevance (interaction matrix) and semantic (co-attention) matching heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

POOL_AXES = ("code_column", "description_row")


@dataclass
class RelevanceFeatures:
    o_max: T.Tensor
    o_mean: T.Tensor
    R_hat: T.Tensor


@dataclass
class SemanticFeatures:
    o_desc: T.Tensor
    o_code: T.Tensor
    S: T.Tensor
    a_desc: T.Tensor
    a_code: T.Tensor


def _check_masks(mask_D, mask_C):
    if not np.all(np.asarray(mask_D).any(axis=-1)):
        raise ValueError("description mask has no unmasked position")
    if not np.all(np.asarray(mask_C).any(axis=-1)):
        raise ValueError("code mask has no unmasked position")


def relevance_match(D, mask_D, C, mask_C, pool_axis="code_column"):
    """Interaction matrix R = D C^T, softmax over code positions, then pooling.

    With ``pool_axis="code_column"`` (default) each code position j gets the
    max / mean over unmasked description rows of the normalised matrix, giving
    vectors of the code length n. ``"description_row"`` pools each description
    row over code positions instead (length m); its mean is identically 1/n
    and kept only for comparison.
    """
    mask_D = np.asarray(mask_D, dtype=bool)
    mask_C = np.asarray(mask_C, dtype=bool)
    _check_masks(mask_D, mask_C)
    R = T.matmul(D, T.transpose(C))
    R_hat = T.softmax_rows(R, mask_C[..., None, :])
    if pool_axis == "code_column":
        rows = mask_D[..., :, None]
        o_max = T.pool_max_cols(R_hat, rows)
        o_mean = T.pool_mean_cols(R_hat, rows)
    elif pool_axis == "description_row":
        cols = mask_C[..., None, :]
        keep = mask_D.astype(R_hat.dtype)
        o_max = T.mul_const(T.pool_max_rows(R_hat, cols), keep)
        o_mean = T.mul_const(T.pool_mean_rows(R_hat, cols), keep)
    else:
        raise ValueError(f"pool_axis must be one of {POOL_AXES}, got {pool_axis!r}")
    return RelevanceFeatures(o_max, o_mean, R_hat)


def _weighted_rows(weights, X):
    """(..., k) weights against (..., k, d) rows -> (..., d)."""
    lead = weights.shape[:-1]
    w = T.reshape(weights, lead + (1, weights.shape[-1]))
    out = T.matmul(w, X)
    return T.reshape(out, lead + (X.shape[-1],))


def semantic_match(D, mask_D, C, mask_C, W):
    """Co-attention: S = tanh(D W C^T), max-pooled both ways, softmax, weighted sums."""
    mask_D = np.asarray(mask_D, dtype=bool)
    mask_C = np.asarray(mask_C, dtype=bool)
    _check_masks(mask_D, mask_C)
    if W.shape != (D.shape[-1], C.shape[-1]):
        raise ValueError(f"co-attention matrix must be {D.shape[-1]}x{C.shape[-1]}, got {W.shape}")
    S = T.tanh(T.matmul(T.matmul(D, W), T.transpose(C)))
    u_desc = T.pool_max_rows(S, mask_C[..., None, :])
    u_code = T.pool_max_cols(S, mask_D[..., :, None])
    a_desc = T.softmax_rows(u_desc, mask_D)
    a_code = T.softmax_rows(u_code, mask_C)
    o_desc = _weighted_rows(a_desc, D)
    o_code = _weighted_rows(a_code, C)
    return SemanticFeatures(o_desc, o_code, S, a_desc, a_code)
