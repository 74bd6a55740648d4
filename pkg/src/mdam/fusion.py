"""Late multimodal fusion: gated deep-residual blocks over (question, x).

A block of depth L chains H <- H . W_carry + gate(H, x), seeded with
H = question. The gate is tanh(H W_h) * tanh(tanh(x W_1) W_2); the carry
path is purely linear, so with x = 0 the block is exactly linear in the
question. Frame and caption blocks use independent parameters; their
outputs are concatenated, projected and tanh-squashed into one vector.
No biases unless the spec's fusion_bias flag is set.
"""

from __future__ import annotations

from mdam import autodiff as ad


def _linear(x, params, path, bias):
    y = ad.matmul(x, params[f"{path}.W"] if f"{path}.W" in params else params[path])
    if bias and f"{path}.b" in params:
        y = ad.add(y, params[f"{path}.b"])
    return y


def residual_gate(h, x, params, layer_prefix, bias=False):
    """tanh(h W_h) * tanh(tanh(x W_1) W_2); zero whenever h or x is zero."""
    left = ad.tanh(_linear(h, params, f"{layer_prefix}.gate_h", bias))
    inner = ad.tanh(_linear(x, params, f"{layer_prefix}.gate_x1", bias))
    right = ad.tanh(_linear(inner, params, f"{layer_prefix}.gate_x2", bias))
    return ad.mul(left, right)


def deep_residual(question, x, params, prefix, depth, bias=False):
    """Unrolled recursion H_l = H_{l-1} W_carry_l + gate_l(H_{l-1}, x)."""
    if depth < 1:
        raise ValueError(f"residual block depth must be >= 1, got {depth}")
    h = question
    for layer in range(depth):
        lp = f"{prefix}.l{layer}"
        carry = _linear(h, params, f"{lp}.carry", bias)
        h = ad.add(carry, residual_gate(h, x, params, lp, bias=bias))
    return h


def fuse_residual(question, v, c, params, depth, bias=False):
    """The standard late fusion: two residual blocks, concat, project, tanh."""
    hv = deep_residual(question, v, params, "fusion.v", depth, bias=bias)
    hc = deep_residual(question, c, params, "fusion.c", depth, bias=bias)
    return ad.tanh(_linear(ad.concat_lastdim([hv, hc]), params, "fusion.out_proj", bias))


def fuse_multiplicative(question, v, c, params, bias=False):
    """Ablation fusion: element-wise products replace the residual blocks."""
    joint = ad.concat_lastdim([ad.mul(question, v), ad.mul(question, c)])
    return ad.tanh(_linear(joint, params, "fusion.out_proj", bias))


def fuse_single(question, x, params, prefix, depth, bias=False):
    """Unimodal variants: one residual block, then project and tanh."""
    h = deep_residual(question, x, params, prefix, depth, bias=bias)
    return ad.tanh(_linear(h, params, "fusion.out_proj", bias))
