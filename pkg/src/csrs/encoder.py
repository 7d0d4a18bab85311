"""Multi-width n-gram embeddings of descriptions and code fields.

Each field is embedded, convolved once per window width with same padding,
and the per-width outputs are stacked along the sequence axis. Masked
positions are zeroed both before the convolution (so padding behaves exactly
like the zero border) and after it (so they carry no signal downstream).
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .corpus import PAD


def field_mask(ids):
    return np.asarray(ids) != PAD


def embed_field(table, ids, mask=None):
    """Row-gather ``table`` for ``ids`` of shape (..., L) -> (..., L, d).

    With a mask, masked rows are replaced by zeros.
    """
    E = T.embedding_lookup(table, np.asarray(ids))
    if mask is None:
        return E
    return T.mul_const(E, np.asarray(mask, dtype=E.dtype)[..., None])


def ngram_encode(E, mask, convs, widths=(1, 2, 3)):
    """Convolve ``E`` (..., L, d) at every width and concatenate along L.

    ``convs`` maps width -> (filters, bias). Returns the stacked matrix and
    its mask (the input mask repeated once per width).
    """
    mask = np.asarray(mask, dtype=bool)
    keep = mask[..., None].astype(E.dtype)
    blocks = []
    for h in widths:
        filters, bias = convs[h]
        out = T.conv1d_same(E, filters, bias, activation="tanh")
        blocks.append(T.mul_const(out, keep))
    stacked = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=-2)
    return stacked, np.concatenate([mask] * len(widths), axis=-1)


def encode_field(params, field, ids, widths=(1, 2, 3), mask=None):
    table = params["emb_desc"] if field == "description" else params["emb_code"]
    mask = field_mask(ids) if mask is None else np.asarray(mask, dtype=bool)
    E = embed_field(table, ids, mask)
    convs = {h: (params[f"conv_{field}_{h}_w"], params[f"conv_{field}_{h}_b"]) for h in widths}
    return ngram_encode(E, mask, convs, widths)


def encode_code(params, code_ids, fields=("tokens", "name", "api"), widths=(1, 2, 3), masks=None):
    """Code feature matrix C: tokens, name and API blocks in that order.

    ``code_ids`` maps field name -> id array (..., L_field).
    """
    blocks, block_masks = [], []
    for f in fields:
        C_f, m_f = encode_field(params, f, code_ids[f], widths,
                                None if masks is None else masks[f])
        blocks.append(C_f)
        block_masks.append(m_f)
    C = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=-2)
    return C, np.concatenate(block_masks, axis=-1)


def encode_description(params, desc_ids, widths=(1, 2, 3), mask=None):
    """Description feature matrix D and its mask."""
    mask = field_mask(desc_ids) if mask is None else np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("description consists only of padding")
    return encode_field(params, "description", desc_ids, widths, mask)
