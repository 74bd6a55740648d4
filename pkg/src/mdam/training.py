"""Losses, optimizer, two-phase schedule, evaluation.

Phase 1 minimizes cross-entropy at the first learning rate with per-epoch
validation; once validation stalls (patience) or half the epoch budget is
spent, phase 2 restarts from the best-validation checkpoint and minimizes
the categorical hinge on raw logits at the second learning rate. Zero
padding never contributes to the error: masks exclude padded story slots
and words everywhere, which the padding-invariance tests assert end to end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from mdam import autodiff as ad
from mdam.model import Model, build_variant

# Published full-scale results recorded for context only; they depend on
# pretrained feature extractors and datasets this package does not ship,
# so nothing asserts them.
REFERENCE_ACCURACY = {"movieqa_test": 0.4141, "pororoqa_test": 0.489}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostics string."""


def cross_entropy_loss(probabilities, correct):
    """-log p[correct], with the probability clamped at 1e-12."""
    if not 0 <= correct < probabilities.shape[0]:
        raise IndexError(f"correct index {correct} outside [0, {probabilities.shape[0]})")
    return ad.neg(ad.log(ad.take_row(probabilities, correct), floor=1e-12))


def categorical_hinge_loss(logits, correct):
    """max(0, 1 + best wrong logit - correct logit), on raw logits."""
    n = logits.shape[0]
    if not 0 <= correct < n:
        raise IndexError(f"correct index {correct} outside [0, {n})")
    wrong = ad.gather_rows(logits, [i for i in range(n) if i != correct])
    margin = ad.add(ad.sub(ad.reduce_max_axis0(wrong), ad.take_row(logits, correct)), 1.0)
    return ad.relu(margin)


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        state = cls()
        for path, t in params.trainable_items():
            state.m[path] = np.zeros_like(t.data)
            state.v[path] = np.zeros_like(t.data)
        return state


def adam_step(params, state, lr):
    """Standard bias-corrected Adam update; frozen parameters untouched."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for path, tensor in params.trainable_items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        elif g.shape != tensor.data.shape:
            raise ad.DimensionError(
                f"{path}: gradient shape {g.shape} vs parameter shape {tensor.data.shape}")
        mask = params.row_masks.get(path)
        if mask is not None:
            g = g * mask[:, None]
        m = state.m[path]
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm is None or max_norm <= 0:
        return 1.0
    total = 0.0
    for _, t in params.trainable_items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = np.sqrt(total)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for _, t in params.trainable_items():
        if t.grad is not None:
            t.grad *= factor
    return factor


def batch_loss(model, batch, phase, rng=None, train=True):
    """Mean per-item loss over a batch (graphs share the parameter leaves)."""
    items = []
    for inst in batch:
        out = model.forward(inst, train=train, rng=rng)
        if phase == 1:
            loss = cross_entropy_loss(out.probabilities, inst.correct)
        else:
            loss = categorical_hinge_loss(out.logits, inst.correct)
        items.append(ad.reshape(loss, (1,)))
    return ad.mean_all(ad.concat_rows(items))


def evaluate(model, dataset):
    """Accuracy plus per-item (qa_id, predicted, probabilities); no dropout."""
    hits = 0
    predictions = []
    with ad.no_grad():
        for inst in dataset:
            out = model.forward(inst, train=False)
            hits += int(out.predicted == inst.correct)
            predictions.append((inst.qa_id, out.predicted,
                                out.probabilities.data.copy()))
    accuracy = hits / len(dataset) if dataset else 0.0
    return accuracy, predictions


@dataclass
class TrainState:
    """Everything the two-phase loop accumulates."""

    model: Model
    adam: AdamState
    phase: int = 1
    epoch: int = 0
    step: int = 0
    best_arrays: dict | None = None
    best_val_accuracy: float = -1.0
    best_epoch: int = -1
    phase1_best_arrays: dict | None = None
    phase2_start_arrays: dict | None = None
    metrics: list = field(default_factory=list)
    order_rng: np.random.Generator | None = None
    dropout_rng: np.random.Generator | None = None

    @property
    def params(self):
        return self.model.params


def _metrics_header(spec):
    lines = [f"# spec {spec.to_json()}", f"# seed {spec.seed}",
             "# columns: epoch phase loss lr train_loss val_accuracy wall_seconds"]
    return lines


def _check_finite(value, state, context):
    if np.isfinite(value):
        return
    diag = (f"non-finite loss ({value}) at epoch {state.epoch} step {state.step} "
            f"phase {state.phase}; {context}")
    raise TrainingDiverged(diag)


def train(spec, train_set, val_set, vocab=None, embeddings=None,
          log_fn=None, state=None, epoch_hook=None):
    """Run the two-phase schedule and return the populated TrainState.

    Deterministic given (seed, spec, dataset order): parameter init, batch
    shuffling and dropout each use their own seeded generator. ``state``
    resumes a previous run (the CLI persists it between epochs).
    """
    if not train_set:
        raise ValueError("empty training set")
    spec.validate()
    if state is None:
        if vocab is None:
            from mdam.text import Vocabulary
            vocab = Vocabulary.from_instances(list(train_set) + list(val_set))
        model = build_variant(spec, vocab, embeddings=embeddings)
        state = TrainState(model=model, adam=AdamState.for_params(model.params))
        state.metrics.extend(_metrics_header(spec))
        state.order_rng = np.random.default_rng(np.random.PCG64(spec.seed + 1))
        state.dropout_rng = np.random.default_rng(np.random.PCG64(spec.seed + 2))
    model = state.model
    phase1_budget = max(1, spec.epochs // 2)

    while state.epoch < spec.epochs:
        if state.phase == 1 and spec.enable_phase2:
            stale = state.epoch - state.best_epoch if state.best_epoch >= 0 else 0
            if state.epoch >= phase1_budget or stale >= spec.phase1_patience:
                state.phase = 2
                if state.best_arrays is not None:
                    state.phase1_best_arrays = {p: a.copy()
                                                for p, a in state.best_arrays.items()}
                    model.params.load_arrays(state.best_arrays)
                state.phase2_start_arrays = model.params.clone_arrays()
                state.adam = AdamState.for_params(model.params)

        state.epoch += 1
        lr = spec.phase1_lr if state.phase == 1 else spec.phase2_lr
        loss_name = "cross_entropy" if state.phase == 1 else "categorical_hinge"
        started = time.perf_counter()
        order = state.order_rng.permutation(len(train_set))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), spec.batch_size):
            batch = [train_set[i] for i in order[lo:lo + spec.batch_size]]
            model.params.zero_grads()
            loss = batch_loss(model, batch, state.phase, rng=state.dropout_rng)
            value = float(loss.data)
            _check_finite(value, state, f"batch of {len(batch)} starting at {lo}")
            ad.backward(loss)
            clip_gradients(model.params, spec.grad_clip)
            adam_step(model.params, state.adam, lr)
            state.step += 1
            epoch_loss += value
            n_batches += 1

        val_accuracy, _ = evaluate(model, val_set) if val_set else (0.0, [])
        if val_accuracy > state.best_val_accuracy:
            state.best_val_accuracy = val_accuracy
            state.best_epoch = state.epoch
            state.best_arrays = model.params.clone_arrays()
        wall = time.perf_counter() - started
        line = (f"{state.epoch} {state.phase} {loss_name} {lr:.6g} "
                f"{epoch_loss / max(n_batches, 1):.6f} {val_accuracy:.6f} {wall:.3f}")
        state.metrics.append(line)
        if log_fn:
            log_fn(line)
        if epoch_hook and epoch_hook(state):
            break
    if state.best_arrays is None:
        state.best_arrays = model.params.clone_arrays()
        state.best_epoch = state.epoch
    return state
