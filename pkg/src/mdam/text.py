"""Word-level features and convolutional sentence encodings.

Each word becomes (embedding + learnable positional vector) concatenated
with 5 binary casing flags: capitalization, contains-digit, personal
pronoun, unigram match and bigram match against the paired text (captions
and answers pair with the question; the question pairs with the union of
captions and answers). Sentences are encoded by shared 1-D convolutions of
window widths 1-4 with ReLU and max-over-positions, giving d_model-wide
vectors (4 widths x d_model/4 channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mdam import autodiff as ad
from mdam.data import SentenceTooLongError, StoryTooLongError, SchemaError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

PERSONAL_PRONOUNS = frozenset(
    ["i", "you", "he", "she", "it", "we", "they",
     "me", "him", "her", "us", "them"])

CONV_WIDTHS = (1, 2, 3, 4)


class Vocabulary:
    """Lowercased token -> embedding-row map with reserved pad/unk rows."""

    def __init__(self, tokens):
        self.tokens = [PAD_TOKEN, UNK_TOKEN] + sorted(set(t.lower() for t in tokens)
                                                      - {PAD_TOKEN, UNK_TOKEN})
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def index(self, token):
        return self._index.get(token.lower(), UNK_INDEX)

    def indices(self, tokens):
        return np.array([self.index(t) for t in tokens], dtype=np.intp)

    @classmethod
    def from_instances(cls, instances):
        toks = []
        for inst in instances:
            toks.extend(inst.question)
            for c in inst.captions:
                toks.extend(c)
            for a in inst.answers:
                toks.extend(a)
        return cls(toks)


def load_embedding_file(path):
    """Text word-vector format: token then whitespace-separated floats."""
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            tok, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise ValueError(f"{path}:{ln}: expected {dim} values, got {len(vals)}")
            vectors[tok.lower()] = np.array(vals, dtype=np.float64)
    if dim is None:
        raise ValueError(f"{path}: empty embedding file")
    return vectors, dim


@dataclass
class MatchContext:
    """Paired-text token sets driving the unigram/bigram match flags."""

    unigrams: frozenset
    bigrams: frozenset

    @classmethod
    def from_sentences(cls, sentences):
        unis, bis = set(), set()
        for sent in sentences:
            low = [t.lower() for t in sent]
            unis.update(low)
            bis.update(zip(low, low[1:]))
        return cls(frozenset(unis), frozenset(bis))


EMPTY_CONTEXT = MatchContext(frozenset(), frozenset())


def casing_flags(tokens, context):
    """The 5 binary per-word flags as a (len, 5) array."""
    n = len(tokens)
    flags = np.zeros((n, 5))
    low = [t.lower() for t in tokens]
    for i, tok in enumerate(tokens):
        if any(ch.isupper() for ch in tok):
            flags[i, 0] = 1.0
        if any(ch.isdigit() for ch in tok):
            flags[i, 1] = 1.0
        if low[i] in PERSONAL_PRONOUNS:
            flags[i, 2] = 1.0
        if low[i] in context.unigrams:
            flags[i, 3] = 1.0
        if i + 1 < n and (low[i], low[i + 1]) in context.bigrams:
            flags[i, 4] = 1.0
    return flags


def word_features(tokens, params, vocab, context, max_words):
    """Per-word feature rows, zero-padded to (max_words, word_dim + 5).

    Row i of a valid word is concat(embedding_i + positional_i, casing_i).
    Longer-than-max sentences are an error; the caller truncates explicitly.
    """
    n = len(tokens)
    if n > max_words:
        raise SentenceTooLongError(f"sentence has {n} words, limit is {max_words}")
    if n == 0:
        raise ad.EmptySequenceError("cannot featurize an empty sentence")
    g = ad.gather_rows(params["text.embed.words"], vocab.indices(tokens))
    p = ad.gather_rows(params["text.embed.positions"], np.arange(n, dtype=np.intp))
    feats = ad.concat_lastdim([ad.add(g, p), ad.constant(casing_flags(tokens, context))])
    if n < max_words:
        pad = ad.constant(np.zeros((max_words - n, feats.shape[1])))
        feats = ad.concat_rows([feats, pad])
    mask = np.zeros(max_words, dtype=bool)
    mask[:n] = True
    return feats, mask


def _conv_filters(params, prefix):
    return [(params[f"{prefix}.w{w}.W"], params[f"{prefix}.w{w}.b"]) for w in CONV_WIDTHS]


def encode_sentences(sentences, params, vocab, max_words, conv_prefix="text.conv"):
    """Encode many sentences through the shared convolution stack at once.

    ``sentences`` is a list of (tokens, MatchContext). Returns a tensor of
    shape (n_sentences, d_model). One graph op per convolution stage serves
    every sentence, which keeps per-story op counts low.
    """
    if not sentences:
        raise ad.EmptySequenceError("no sentences to encode")
    lengths = []
    idx_parts, pos_parts, flag_parts = [], [], []
    for tokens, context in sentences:
        n = len(tokens)
        if n == 0:
            raise ad.EmptySequenceError("cannot encode an empty sentence")
        if n > max_words:
            raise SentenceTooLongError(f"sentence has {n} words, limit is {max_words}")
        lengths.append(n)
        idx_parts.append(vocab.indices(tokens))
        pos_parts.append(np.arange(n, dtype=np.intp))
        flag_parts.append(casing_flags(tokens, context))
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    g = ad.gather_rows(params["text.embed.words"], np.concatenate(idx_parts))
    p = ad.gather_rows(params["text.embed.positions"], np.concatenate(pos_parts))
    feats = ad.concat_lastdim([ad.add(g, p), ad.constant(np.vstack(flag_parts))])

    n_sent = len(sentences)
    blocks = []
    for width, (w, b) in zip(CONV_WIDTHS, _conv_filters(params, conv_prefix)):
        channels = w.shape[1]
        starts, bounds, present = [], [], []
        row = 0
        for s, n in enumerate(lengths):
            count = n - width + 1
            if count <= 0:
                continue
            starts.append(offsets[s] + np.arange(count, dtype=np.intp))
            bounds.append((row, row + count))
            present.append(s)
            row += count
        if not starts:
            blocks.append(ad.constant(np.zeros((n_sent, channels))))
            continue
        win = ad.sliding_windows(feats, width, np.concatenate(starts))
        act = ad.relu(ad.add(ad.matmul(win, w), b))
        seg = ad.segment_max_rows(act, bounds)
        if len(present) == n_sent:
            blocks.append(seg)
        else:
            blocks.append(ad.scatter_rows(seg, np.array(present, dtype=np.intp), n_sent))
    return ad.concat_lastdim(blocks)


def sentence_encode(tokens, context, params, vocab, max_words, conv_prefix="text.conv"):
    """Single d_model-wide sentence encoding (shared filters)."""
    enc = encode_sentences([(tokens, context)], params, vocab, max_words,
                           conv_prefix=conv_prefix)
    return ad.take_row(enc, 0)


@dataclass
class EncodedStory:
    """The long-term-memory tensors for one instance."""

    frames: ad.Tensor      # (n_story, d_v), zero rows beyond the true length
    captions: ad.Tensor    # (n_story, d_model)
    question: ad.Tensor    # (d_model,)
    answers: ad.Tensor     # (5, d_model)
    story_mask: np.ndarray  # (n_story,) bool
    qa_id: str = ""


def preprocess_story(instance, params, vocab, spec, n_story=None, max_words=None,
                     caption_match=True):
    """Build the memory tensors for one instance.

    ``n_story``/``max_words`` default to the spec values; padding positions
    are zero rows with a false story mask and are excluded from attention
    and pooling downstream. ``caption_match=False`` drops captions from the
    question's match-flag context (used by the frame-only ablation, whose
    output must not depend on caption content at all).
    """
    n_story = spec.n_story if n_story is None else n_story
    max_words = spec.max_words if max_words is None else max_words
    t = instance.length
    if t > n_story:
        raise StoryTooLongError(
            f"{instance.qa_id}: story has {t} positions, limit is {n_story}")
    if len(instance.answers) != 5:
        raise SchemaError(f"{instance.qa_id}: expected 5 answers, got {len(instance.answers)}")

    paired = (instance.captions if caption_match else []) + instance.answers
    question_ctx = MatchContext.from_sentences(paired)
    paired_with_q = MatchContext.from_sentences([instance.question])
    sentences = [(instance.question, question_ctx)]
    sentences += [(a, paired_with_q) for a in instance.answers]
    sentences += [(c, paired_with_q) for c in instance.captions]
    enc = encode_sentences(sentences, params, vocab, max_words)

    q = ad.take_row(enc, 0)
    answers = ad.gather_rows(enc, np.arange(1, 6, dtype=np.intp))
    caps = ad.gather_rows(enc, np.arange(6, 6 + t, dtype=np.intp))
    if t < n_story:
        caps = ad.concat_rows([caps, ad.constant(np.zeros((n_story - t, spec.d_model)))])
    caps.modality = frozenset(["caption"])

    fr = np.zeros((n_story, spec.d_v))
    for i, vec in enumerate(instance.frames):
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (spec.d_v,):
            raise SchemaError(
                f"{instance.qa_id}: frames[{i}]: dimension {v.shape} vs configured ({spec.d_v},)")
        fr[i] = v
    frames = ad.constant(fr)
    frames.modality = frozenset(["visual"])

    return EncodedStory(frames=frames, captions=caps, question=q, answers=answers,
                        story_mask=instance.story_mask(n_story), qa_id=instance.qa_id)
