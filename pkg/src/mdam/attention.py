"""Dual attention: multi-head self-attention and attention-by-question.

Both stacks share the same layer skeleton: a multi-head attention sub-layer
and a point-wise feed-forward sub-layer, each wrapped in residual + layer
norm (post-norm), with fresh parameters per layer. Self-attention walks the
pivot over every story position and updates all positions from the same
input (parallel, not sequential), which keeps the stack permutation
equivariant over unmasked positions. Attention-by-question uses the raw
question vector as the single pivot at every layer and keeps the weighted
rows unsummed, so the output stays one row per story position.

Masked story positions are never attended to and produce zero output rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mdam import autodiff as ad
from mdam.text import CONV_WIDTHS


@dataclass
class TraceRow:
    """One stored softmax row over the story positions."""

    stack: str      # "self" or "query"
    modality: str   # "frames", "captions" or "fused"
    layer: int
    head: int
    pivot: int | None  # story position, or None when the question is the pivot
    weights: np.ndarray


@dataclass
class AttentionTrace:
    """All softmax rows recorded during one forward pass."""

    rows: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append(TraceRow(**kw))


def scaled_dot_attention(x, keys, story_mask=None):
    """Dot-product attention of one pivot against a key/value matrix.

    Returns (weights, weighted_rows): weights is the masked softmax of
    x . keys^T / sqrt(d_proj); weighted_rows[j] = weights[j] * keys[j].
    Summing the rows gives the classical averaged attention output; keeping
    them gives the by-question per-position form.
    """
    d_proj = keys.shape[1]
    logits = ad.scale(ad.matmul(keys, x), 1.0 / math.sqrt(d_proj))
    weights = ad.softmax_lastdim(logits, mask=story_mask)
    weighted_rows = ad.mul(ad.reshape(weights, (keys.shape[0], 1)), keys)
    return weights, weighted_rows


def _mask_column(story_mask):
    return ad.constant(story_mask.astype(np.float64)[:, None])


def self_attention_update(x, params, prefix, heads, d_proj, story_mask,
                          attn_dropout=0.0, rng=None, trace=None,
                          trace_info=None):
    """Multi-head self-attention over all story positions at once.

    Every position serves as pivot against the same input; the per-pivot
    scaled-dot weights form an (N, N) matrix with masked key columns.
    """
    n = x.shape[0]
    inv = 1.0 / math.sqrt(d_proj)
    head_outs = []
    for h in range(heads):
        pivots = ad.matmul(x, params[f"{prefix}.h{h}.pivot_proj"])
        keys = ad.matmul(x, params[f"{prefix}.h{h}.key_proj"])
        scores = ad.scale(ad.matmul(pivots, ad.transpose(keys)), inv)
        weights = ad.softmax_lastdim(scores, mask=story_mask)
        if trace is not None:
            for j in range(n):
                if story_mask[j]:
                    trace.add(stack="self", head=h, pivot=j,
                              weights=weights.data[j].copy(), **trace_info)
        if attn_dropout > 0.0:
            weights = ad.dropout(weights, attn_dropout, rng)
        head_outs.append(ad.matmul(weights, keys))
    merged = ad.matmul(ad.concat_lastdim(head_outs), params[f"{prefix}.out_proj"])
    return ad.mul(merged, _mask_column(story_mask))


def question_attention_update(x, question, params, prefix, heads, d_proj,
                              story_mask, attn_dropout=0.0, rng=None,
                              trace=None, trace_info=None):
    """Multi-head attention with the question as the single pivot.

    The weighted rows are kept unsummed, so each head contributes an
    (N, d_proj) block and the merged output keeps one row per position.
    """
    n = x.shape[0]
    head_outs = []
    for h in range(heads):
        pivot = ad.matmul(question, params[f"{prefix}.h{h}.pivot_proj"])
        keys = ad.matmul(x, params[f"{prefix}.h{h}.key_proj"])
        weights, rows = scaled_dot_attention(pivot, keys, story_mask=story_mask)
        if trace is not None:
            trace.add(stack="query", head=h, pivot=None,
                      weights=weights.data.copy(), **trace_info)
        if attn_dropout > 0.0:
            rows = ad.dropout(rows, attn_dropout, rng)
        head_outs.append(rows)
    merged = ad.matmul(ad.concat_lastdim(head_outs), params[f"{prefix}.out_proj"])
    return ad.mul(merged, _mask_column(story_mask))


def _norm_affine(x, params, path):
    y = ad.layer_norm_lastdim(x)
    return ad.add(ad.mul(y, params[f"{path}.gain"]), params[f"{path}.bias"])


def _feed_forward(x, params, prefix, ffn_dropout=0.0, rng=None):
    inner = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.ffn.W1"]),
                           params[f"{prefix}.ffn.b1"]))
    out = ad.add(ad.matmul(inner, params[f"{prefix}.ffn.W2"]),
                 params[f"{prefix}.ffn.b2"])
    if ffn_dropout > 0.0:
        out = ad.dropout(out, ffn_dropout, rng)
    return out


def attention_stack(x, params, prefix, n_layers, heads, d_proj, story_mask,
                    mode="self", question=None, attn_dropout=0.0,
                    ffn_dropout=0.0, rng=None, trace=None, modality=""):
    """Stack of identical attention layers with fresh parameters per layer.

    Per layer: x <- norm(x + attention(x)); x <- norm(x + ffn(x)); the ffn
    inner width is 2 * d_k and applies identically to every position.
    """
    if mode not in ("self", "query"):
        raise ValueError(f"unknown stack mode {mode!r}")
    if mode == "query" and question is None:
        raise ValueError("query mode needs the question tensor")
    mask_col = _mask_column(story_mask)
    for layer in range(n_layers):
        lp = f"{prefix}.l{layer}"
        info = {"modality": modality, "layer": layer}
        if mode == "self":
            attn = self_attention_update(x, params, lp, heads, d_proj, story_mask,
                                         attn_dropout=attn_dropout, rng=rng,
                                         trace=trace, trace_info=info)
        else:
            attn = question_attention_update(x, question, params, lp, heads, d_proj,
                                             story_mask, attn_dropout=attn_dropout,
                                             rng=rng, trace=trace, trace_info=info)
        x = ad.mul(_norm_affine(ad.add(x, attn), params, f"{lp}.norm1"), mask_col)
        ffn = _feed_forward(x, params, lp, ffn_dropout=ffn_dropout, rng=rng)
        x = ad.mul(_norm_affine(ad.add(x, ffn), params, f"{lp}.norm2"), mask_col)
    return x


def conv_maxpool_aggregate(x, params, prefix, story_mask):
    """Collapse the story axis to one d_model vector via multi-width conv."""
    filters = [(params[f"{prefix}.w{w}.W"], params[f"{prefix}.w{w}.b"])
               for w in CONV_WIDTHS]
    return ad.conv1d_maxpool(x, filters, story_mask)
