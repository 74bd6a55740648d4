"""Dataset schema, tokenization, JSONL loading and frame-feature files.

One story instance pairs N frame-feature vectors 1:1 with N tokenized
captions, plus a question, exactly five candidate answers and the correct
index. Datasets are stored one JSON object per line with fields qa_id,
captions, question, answers, correct, and either inline "frames" arrays or
a "frame_feature_ref" pointing into a binary feature file.

Frame-feature binary: magic b"MDFV" | u32 count | u32 dim | count*dim
little-endian f32 | index table (u32 entries, then per entry u16 key length
+ utf-8 key "qa_id/frame_index" mapping to its payload row).
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

FRAME_MAGIC = b"MDFV"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class SchemaError(ValueError):
    """A dataset record violates the instance schema."""


class StoryTooLongError(ValueError):
    """More story positions than the configured story length."""


class SentenceTooLongError(ValueError):
    """More words than the configured sentence length."""


def tokenize(text):
    """Whitespace split after separating punctuation into its own tokens."""
    return _TOKEN_RE.findall(text)


@dataclass
class StoryInstance:
    """One multiple-choice QA item over a frame/caption story."""

    qa_id: str
    frames: list  # list of float vectors, one per caption
    captions: list  # list of token lists
    question: list  # token list
    answers: list  # exactly 5 token lists
    correct: int
    meta: dict = field(default_factory=dict)

    @property
    def length(self):
        return len(self.captions)

    def story_mask(self, n_story):
        m = np.zeros(n_story, dtype=bool)
        m[:self.length] = True
        return m


def validate_instance(inst, max_story=None, max_words=None):
    """Check the instance invariants; raises SchemaError naming the field."""
    qa = inst.qa_id
    if len(inst.frames) != len(inst.captions):
        raise SchemaError(
            f"{qa}: frames ({len(inst.frames)}) and captions ({len(inst.captions)}) must pair 1:1")
    if len(inst.captions) == 0:
        raise SchemaError(f"{qa}: captions: story is empty")
    if len(inst.answers) != 5:
        raise SchemaError(f"{qa}: answers: expected 5 candidates, got {len(inst.answers)}")
    if not (0 <= inst.correct < 5):
        raise SchemaError(f"{qa}: correct: index {inst.correct} outside [0, 5)")
    if len(inst.question) == 0:
        raise SchemaError(f"{qa}: question: empty")
    for j, ans in enumerate(inst.answers):
        if len(ans) == 0:
            raise SchemaError(f"{qa}: answers[{j}]: empty")
    for i, cap in enumerate(inst.captions):
        if len(cap) == 0:
            raise SchemaError(f"{qa}: captions[{i}]: empty")
    if max_story is not None and len(inst.captions) > max_story:
        raise StoryTooLongError(
            f"{qa}: story has {len(inst.captions)} positions, limit is {max_story}")
    if max_words is not None:
        for name, sents in (("captions", inst.captions), ("answers", inst.answers),
                            ("question", [inst.question])):
            for i, s in enumerate(sents):
                if len(s) > max_words:
                    raise SentenceTooLongError(
                        f"{qa}: {name}[{i}]: {len(s)} words, limit is {max_words}")
    return inst


def _record_to_instance(rec, features=None):
    qa = rec.get("qa_id", "<missing qa_id>")
    for key in ("captions", "question", "answers", "correct"):
        if key not in rec:
            raise SchemaError(f"{qa}: missing field {key!r}")
    captions = [tokenize(c) for c in rec["captions"]]
    if "frames" in rec:
        frames = [np.asarray(f, dtype=np.float64) for f in rec["frames"]]
    elif "frame_feature_ref" in rec:
        if features is None:
            raise SchemaError(f"{qa}: frame_feature_ref present but no feature store given")
        frames = [features.get(qa, i) for i in range(len(captions))]
    else:
        raise SchemaError(f"{qa}: needs either inline frames or frame_feature_ref")
    inst = StoryInstance(
        qa_id=rec["qa_id"],
        frames=frames,
        captions=captions,
        question=tokenize(rec["question"]),
        answers=[tokenize(a) for a in rec["answers"]],
        correct=int(rec["correct"]),
        meta=rec.get("meta", {}),
    )
    return validate_instance(inst)


def load_dataset(path, max_story=None, feature_store=None):
    """Parse a JSONL dataset; schema violations report qa_id and field."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{ln}: invalid JSON: {e}") from None
            inst = _record_to_instance(rec, features=feature_store)
            if max_story is not None:
                validate_instance(inst, max_story=max_story)
            out.append(inst)
    return out


def save_dataset(path, instances):
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            rec = {
                "qa_id": inst.qa_id,
                "captions": [" ".join(c) for c in inst.captions],
                "frames": [[float(x) for x in fr] for fr in inst.frames],
                "question": " ".join(inst.question),
                "answers": [" ".join(a) for a in inst.answers],
                "correct": inst.correct,
            }
            if inst.meta:
                rec["meta"] = inst.meta
            f.write(json.dumps(rec) + "\n")


class FrameFeatureStore:
    """Memory-resident map (qa_id, frame_index) -> float vector."""

    def __init__(self, dim, vectors, keys):
        self.dim = dim
        self._rows = {k: i for i, k in enumerate(keys)}
        self._vectors = vectors

    def get(self, qa_id, frame_index):
        key = f"{qa_id}/{frame_index}"
        if key not in self._rows:
            raise KeyError(f"no frame feature stored for {key!r}")
        return self._vectors[self._rows[key]].astype(np.float64)


def save_frame_features(path, entries, dim):
    """``entries`` is an ordered list of ((qa_id, frame_index), vector)."""
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack("<II", len(entries), dim))
        for (_, _), vec in entries:
            arr = np.asarray(vec, dtype="<f4")
            if arr.shape != (dim,):
                raise ValueError(f"feature vector has shape {arr.shape}, expected ({dim},)")
            f.write(arr.tobytes())
        f.write(struct.pack("<I", len(entries)))
        for (qa_id, idx), _ in entries:
            key = f"{qa_id}/{idx}".encode("utf-8")
            f.write(struct.pack("<H", len(key)))
            f.write(key)


def load_frame_features(path, expected_dim=None):
    with open(path, "rb") as f:
        if f.read(4) != FRAME_MAGIC:
            raise ValueError(f"{path}: not a frame-feature file (bad magic)")
        count, dim = struct.unpack("<II", f.read(8))
        if expected_dim is not None and dim != expected_dim:
            raise ValueError(
                f"{path}: feature dimension is {dim} but the configuration expects {expected_dim}")
        vectors = np.frombuffer(f.read(4 * count * dim), dtype="<f4").reshape(count, dim)
        (n_keys,) = struct.unpack("<I", f.read(4))
        keys = []
        for _ in range(n_keys):
            (klen,) = struct.unpack("<H", f.read(2))
            keys.append(f.read(klen).decode("utf-8"))
    return FrameFeatureStore(dim, vectors, keys)
