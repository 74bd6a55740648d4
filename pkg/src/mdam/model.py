"""Model assembly: parameter construction, the six pipeline variants, and
the cross-modal graph audit.

Parameter paths are stable dotted strings (e.g. "attn.self.frames.l0.h2
.pivot_proj") so checkpoints round-trip and ablations can be audited by
prefix: the NoSelfAttn variant is exactly the full set minus "attn.self.*".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdam import autodiff as ad
from mdam import fusion
from mdam.answer import AnswerScores, score_answers
from mdam.attention import AttentionTrace, attention_stack, conv_maxpool_aggregate
from mdam.params import ModelParams, xavier_uniform
from mdam.text import (CONV_WIDTHS, EncodedStory, PAD_INDEX, UNK_INDEX,
                       preprocess_story)


def _stack_plan(spec):
    """Which attention streams a variant owns: (name, d_k, pivot_dim)."""
    v = spec.variant
    frames = ("frames", spec.d_v)
    captions = ("captions", spec.d_model)
    fused = ("fused", spec.d_model)
    if v in ("MDAM", "MulFusion"):
        return [frames, captions], [frames, captions]
    if v == "NoSelfAttn":
        return [], [frames, captions]
    if v == "FrameOnly":
        return [frames], [frames]
    if v == "CaptOnly":
        return [captions], [captions]
    if v == "EarlyFusion":
        return [fused], [fused]
    raise ValueError(f"unknown variant {v!r}")


def _fusion_plan(spec):
    """Residual-block inputs per variant: list of (block, x_dim), out width."""
    v = spec.variant
    d = spec.d_model
    if v in ("MDAM", "NoSelfAttn"):
        return [("v", d), ("c", d)], 2 * d
    if v == "EarlyFusion":
        return [("v", spec.d_v), ("c", d)], 2 * d
    if v == "MulFusion":
        return [], 2 * d
    if v == "FrameOnly":
        return [("v", d)], d
    if v == "CaptOnly":
        return [("c", d)], d
    raise ValueError(f"unknown variant {v!r}")


def _add_attention_layer(params, prefix, d_k, pivot_dim, spec, rng):
    for h in range(spec.heads):
        params.add(f"{prefix}.h{h}.pivot_proj",
                   ad.parameter(xavier_uniform((pivot_dim, spec.d_proj), rng)))
        params.add(f"{prefix}.h{h}.key_proj",
                   ad.parameter(xavier_uniform((d_k, spec.d_proj), rng)))
    params.add(f"{prefix}.out_proj",
               ad.parameter(xavier_uniform((spec.heads * spec.d_proj, d_k), rng)))
    params.add(f"{prefix}.ffn.W1", ad.parameter(xavier_uniform((d_k, 2 * d_k), rng)))
    params.add(f"{prefix}.ffn.b1", ad.parameter(np.zeros(2 * d_k)))
    params.add(f"{prefix}.ffn.W2", ad.parameter(xavier_uniform((2 * d_k, d_k), rng)))
    params.add(f"{prefix}.ffn.b2", ad.parameter(np.zeros(d_k)))
    for norm in ("norm1", "norm2"):
        params.add(f"{prefix}.{norm}.gain", ad.parameter(np.ones(d_k)))
        params.add(f"{prefix}.{norm}.bias", ad.parameter(np.zeros(d_k)))


def _add_conv_set(params, prefix, d_in, channels, rng):
    for w in CONV_WIDTHS:
        params.add(f"{prefix}.w{w}.W",
                   ad.parameter(xavier_uniform((w * d_in, channels), rng)))
        params.add(f"{prefix}.w{w}.b", ad.parameter(np.zeros(channels)))


def build_params(spec, vocab, rng, embeddings=None):
    """Create every learnable tensor for the variant, Xavier-initialized.

    Weight matrices draw uniform(-a, a) with a = sqrt(6/(fan_in+fan_out));
    biases and norm offsets start at zero, norm gains at one. Embedding rows
    come from ``embeddings`` (token -> vector) when given, otherwise Xavier;
    the padding row is zero and never trainable, the unknown-token row is
    always trainable.
    """
    spec.validate()
    params = ModelParams()

    table = xavier_uniform((len(vocab), spec.word_dim), rng)
    if embeddings is not None:
        for i, tok in enumerate(vocab.tokens):
            vec = embeddings.get(tok)
            if vec is not None:
                if len(vec) != spec.word_dim:
                    raise ValueError(
                        f"embedding width {len(vec)} vs configured word_dim {spec.word_dim}")
                table[i] = vec
    table[PAD_INDEX] = 0.0
    frozen = spec.freeze_embeddings
    if frozen is None:
        frozen = embeddings is not None
    row_mask = np.full(len(vocab), not frozen)
    row_mask[PAD_INDEX] = False
    row_mask[UNK_INDEX] = True
    params.add("text.embed.words", ad.parameter(table), row_mask=row_mask)
    params.add("text.embed.positions",
               ad.parameter(xavier_uniform((spec.max_words, spec.word_dim), rng)))
    _add_conv_set(params, "text.conv", spec.word_feature_dim, spec.conv_channels, rng)

    self_streams, query_streams = _stack_plan(spec)
    for name, d_k in self_streams:
        for layer in range(spec.l_attn):
            _add_attention_layer(params, f"attn.self.{name}.l{layer}", d_k, d_k, spec, rng)
    for name, d_k in query_streams:
        for layer in range(spec.l_attn):
            _add_attention_layer(params, f"attn.query.{name}.l{layer}", d_k,
                                 spec.d_model, spec, rng)
    for name, d_k in query_streams:
        _add_conv_set(params, f"agg.{name}", d_k, spec.conv_channels, rng)

    blocks, out_in = _fusion_plan(spec)
    for block, x_dim in blocks:
        for layer in range(spec.l_m):
            lp = f"fusion.{block}.l{layer}"
            params.add(f"{lp}.carry",
                       ad.parameter(xavier_uniform((spec.d_model, spec.d_model), rng)))
            params.add(f"{lp}.gate_h",
                       ad.parameter(xavier_uniform((spec.d_model, spec.d_model), rng)))
            params.add(f"{lp}.gate_x1",
                       ad.parameter(xavier_uniform((x_dim, spec.d_model), rng)))
            params.add(f"{lp}.gate_x2",
                       ad.parameter(xavier_uniform((spec.d_model, spec.d_model), rng)))
            if spec.fusion_bias:
                for name in ("carry", "gate_h", "gate_x1", "gate_x2"):
                    params.add(f"{lp}.{name}.b", ad.parameter(np.zeros(spec.d_model)))
    params.add("fusion.out_proj",
               ad.parameter(xavier_uniform((out_in, spec.d_model), rng)))
    if spec.fusion_bias:
        params.add("fusion.out_proj.b", ad.parameter(np.zeros(spec.d_model)))

    params.add("answer.score.W",
               ad.parameter(xavier_uniform((2 * spec.d_model, 1), rng)))
    params.add("answer.score.b", ad.parameter(np.zeros(1)))
    return params


@dataclass
class ForwardResult:
    scores: AnswerScores
    encoded: EncodedStory
    trace: AttentionTrace | None = None

    @property
    def logits(self):
        return self.scores.logits

    @property
    def probabilities(self):
        return self.scores.probabilities

    @property
    def predicted(self):
        return self.scores.predicted


class Model:
    """One variant's forward pipeline bound to its parameters and vocab."""

    def __init__(self, spec, params, vocab):
        self.spec = spec.validate()
        self.params = params
        self.vocab = vocab

    def encode(self, instance, n_story=None, max_words=None):
        # The frame-only ablation must not see captions anywhere, including
        # through the question's unigram/bigram match flags.
        inst = instance
        if self.spec.variant == "FrameOnly":
            return preprocess_story(inst, self.params, self.vocab, self.spec,
                                    n_story=n_story, max_words=max_words,
                                    caption_match=False)
        return preprocess_story(inst, self.params, self.vocab, self.spec,
                                n_story=n_story, max_words=max_words)

    def forward(self, item, train=False, rng=None, collect_trace=False,
                n_story=None, max_words=None):
        spec = self.spec
        enc = item if isinstance(item, EncodedStory) else self.encode(
            item, n_story=n_story, max_words=max_words)
        trace = AttentionTrace() if collect_trace else None
        attn_drop = spec.dropout_attn if train else 0.0
        ffn_drop = spec.dropout_ffn if train else 0.0
        cls_drop = spec.dropout_classifier if train else 0.0
        mask = enc.story_mask
        params = self.params
        common = dict(n_layers=spec.l_attn, heads=spec.heads, d_proj=spec.d_proj,
                      story_mask=mask, attn_dropout=attn_drop,
                      ffn_dropout=ffn_drop, rng=rng, trace=trace)

        variant = spec.variant
        if variant == "EarlyFusion":
            rows = []
            for i in range(len(mask)):
                rows.append(fusion.fuse_residual(
                    enc.question, ad.take_row(enc.frames, i),
                    ad.take_row(enc.captions, i), params, spec.l_m,
                    bias=spec.fusion_bias))
            x = ad.stack_rows(rows)
            x = attention_stack(x, params, "attn.self.fused", mode="self",
                                modality="fused", **common)
            x = attention_stack(x, params, "attn.query.fused", mode="query",
                                question=enc.question, modality="fused", **common)
            o = conv_maxpool_aggregate(x, params, "agg.fused", mask)
        elif variant in ("FrameOnly", "CaptOnly"):
            name = "frames" if variant == "FrameOnly" else "captions"
            x = enc.frames if variant == "FrameOnly" else enc.captions
            x = attention_stack(x, params, f"attn.self.{name}", mode="self",
                                modality=name, **common)
            x = attention_stack(x, params, f"attn.query.{name}", mode="query",
                                question=enc.question, modality=name, **common)
            pooled = conv_maxpool_aggregate(x, params, f"agg.{name}", mask)
            block = "fusion.v" if variant == "FrameOnly" else "fusion.c"
            o = fusion.fuse_single(enc.question, pooled, params, block, spec.l_m,
                                   bias=spec.fusion_bias)
        else:  # MDAM, MulFusion, NoSelfAttn
            xv, xc = enc.frames, enc.captions
            if variant != "NoSelfAttn":
                xv = attention_stack(xv, params, "attn.self.frames", mode="self",
                                     modality="frames", **common)
                xc = attention_stack(xc, params, "attn.self.captions", mode="self",
                                     modality="captions", **common)
            xv = attention_stack(xv, params, "attn.query.frames", mode="query",
                                 question=enc.question, modality="frames", **common)
            xc = attention_stack(xc, params, "attn.query.captions", mode="query",
                                 question=enc.question, modality="captions", **common)
            v = conv_maxpool_aggregate(xv, params, "agg.frames", mask)
            c = conv_maxpool_aggregate(xc, params, "agg.captions", mask)
            if variant == "MulFusion":
                o = fusion.fuse_multiplicative(enc.question, v, c, params,
                                               bias=spec.fusion_bias)
            else:
                o = fusion.fuse_residual(enc.question, v, c, params, spec.l_m,
                                         bias=spec.fusion_bias)

        if cls_drop > 0.0:
            o = ad.dropout(o, cls_drop, rng)
        scores = score_answers(o, enc.answers, params["answer.score.W"],
                               params["answer.score.b"])
        return ForwardResult(scores=scores, encoded=enc, trace=trace)

    def predict(self, instance):
        with ad.no_grad():
            return self.forward(instance).predicted


def build_variant(spec, vocab, rng=None, embeddings=None):
    """Instantiate a variant with freshly initialized parameters."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    params = build_params(spec, vocab, rng, embeddings=embeddings)
    return Model(spec, params, vocab)


def _full_topo(root):
    # Expansion-time visited marking keeps post-order valid on shared subgraphs.
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def count_fusion_sites(output):
    """Count graph nodes where frame and caption provenance first combine.

    Walks the forward graph from ``output``; each node's effective modality
    set is its own tag plus the union over parents. A node counts as a
    fusion site when it holds both streams but no single parent already
    does. The standard pipeline must show exactly one; the early-fusion
    ablation shows one per story slot.
    """
    count = 0
    eff = {}
    for node in _full_topo(output):
        tags = set(node.modality) if node.modality else set()
        parent_effs = [eff[id(p)] for p in node.parents]
        for pe in parent_effs:
            tags |= pe
        eff[id(node)] = tags
        if "visual" in tags and "caption" in tags and node.parents:
            if not any("visual" in pe and "caption" in pe for pe in parent_effs):
                count += 1
    return count
