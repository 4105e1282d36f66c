"""Structural transforms between nested transformer configurations.

Expansion grows a model by layer replication plus tail zero-padding of the
width axes; subsetting shrinks one by keeping a deterministic subset of
layers and the prefix of each width axis.  The two directions use mirrored
index rules (prefix-keep vs tail-pad), which makes subset-with-inverted-plan
an exact inverse of expansion.  Interpolation blends the expanded small
anchor with the subsetted large anchor elementwise.

Width-axis conventions per tensor:
  * embeddings and LN params live on d_model; new LN slots get gamma=0 and
    beta=0 so the padded dimensions stay silent,
  * attention projections are viewed as [.., n_heads, head_dim] on the inner
    axis; whole zero heads are appended / prefix heads kept,
  * FFN w1 grows zero columns on d_ff, w2 zero rows (mirrored on subset).

In identity replication mode every non-first occurrence of a source layer
has wo/bo and ffn.w2/b2 zeroed, so the replica is the identity on the
residual stream and depth growth preserves the computed function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, Meta
from .tensor import Tensor
from .transformer import ModelConfig, ParamSet, count_params, structurally_le


class SurgeryError(ValueError):
    pass


@dataclass(frozen=True)
class TransformPlan:
    kind: str  # "expand" | "subset"
    src: ModelConfig
    dst: ModelConfig
    layer_map: tuple[int, ...]
    replication_mode: str = "copy"  # "copy" | "identity"; expansion only

    def __post_init__(self):
        if self.kind not in ("expand", "subset"):
            raise SurgeryError(f"unknown plan kind {self.kind!r}")
        if self.replication_mode not in ("copy", "identity"):
            raise SurgeryError(f"unknown replication mode {self.replication_mode!r}")
        if self.kind == "expand":
            if len(self.layer_map) != self.dst.n_layers:
                raise SurgeryError("expansion layer_map length must equal dst.n_layers")
            if any(b < a for a, b in zip(self.layer_map, self.layer_map[1:])):
                raise SurgeryError("expansion layer_map must be non-decreasing")
            if set(self.layer_map) != set(range(self.src.n_layers)):
                raise SurgeryError("expansion layer_map must be surjective onto source layers")
        else:
            if len(self.layer_map) != self.dst.n_layers:
                raise SurgeryError("subset kept-indices length must equal dst.n_layers")
            if any(b <= a for a, b in zip(self.layer_map, self.layer_map[1:])):
                raise SurgeryError("subset kept-indices must be strictly increasing")
            if self.layer_map and not (0 <= self.layer_map[0] and self.layer_map[-1] < self.src.n_layers):
                raise SurgeryError("subset kept-indices out of range")


def plan_expand(src: ModelConfig, dst: ModelConfig, mode: str = "copy") -> TransformPlan:
    """layer_map[i] = floor(i * src.n_layers / dst.n_layers); widths tail-padded."""
    if not structurally_le(src, dst):
        raise SurgeryError("plan_expand requires src structurally <= dst")
    layer_map = tuple(i * src.n_layers // dst.n_layers for i in range(dst.n_layers))
    return TransformPlan(kind="expand", src=src, dst=dst, layer_map=layer_map, replication_mode=mode)


def plan_subset(src: ModelConfig, dst: ModelConfig) -> TransformPlan:
    """Evenly spaced kept layers with both endpoints; a single target layer
    keeps layer 0.  Rounding is half-up so the rule is platform-stable."""
    if not structurally_le(dst, src):
        raise SurgeryError("plan_subset requires dst structurally <= src")
    if dst.n_layers == 1:
        kept = (0,)
    else:
        span = (src.n_layers - 1) / (dst.n_layers - 1)
        kept = tuple(int(math.floor(j * span + 0.5)) for j in range(dst.n_layers))
    return TransformPlan(kind="subset", src=src, dst=dst, layer_map=kept)


def invert_expand(plan: TransformPlan) -> TransformPlan:
    """Subset plan keeping the first target occurrence of every source layer;
    prefix-keep mirrors the expansion's tail-padding, so applying both is the
    identity on the original checkpoint."""
    if plan.kind != "expand":
        raise SurgeryError("invert_expand expects an expansion plan")
    first = {}
    for i, j in enumerate(plan.layer_map):
        if j not in first:
            first[j] = i
    kept = tuple(first[j] for j in range(plan.src.n_layers))
    return TransformPlan(kind="subset", src=plan.dst, dst=plan.src, layer_map=kept)


def _pad_tail(arr: np.ndarray, axis: int, new: int) -> np.ndarray:
    if arr.shape[axis] == new:
        return arr
    widths = [(0, 0)] * arr.ndim
    widths[axis] = (0, new - arr.shape[axis])
    return np.pad(arr, widths)


def _keep_prefix(arr: np.ndarray, axis: int, new: int) -> np.ndarray:
    if arr.shape[axis] == new:
        return arr
    index = [slice(None)] * arr.ndim
    index[axis] = slice(0, new)
    return np.ascontiguousarray(arr[tuple(index)])


def _resize_heads(arr: np.ndarray, axis: int, src_heads: int, dst_heads: int, head_dim: int, grow: bool) -> np.ndarray:
    """Treat `axis` (length src_heads*head_dim) as [n_heads, head_dim] and
    append zero heads / keep prefix heads."""
    if src_heads == dst_heads:
        return arr
    shape = list(arr.shape)
    view = shape[:axis] + [src_heads, head_dim] + shape[axis + 1 :]
    arr = arr.reshape(view)
    arr = _pad_tail(arr, axis, dst_heads) if grow else _keep_prefix(arr, axis, dst_heads)
    out_shape = shape[:axis] + [dst_heads * head_dim] + shape[axis + 1 :]
    return arr.reshape(out_shape)


def _transform_tensor(name: str, arr: np.ndarray, plan: TransformPlan, src_layer: int | None) -> np.ndarray:
    src, dst = plan.src, plan.dst
    grow = plan.kind == "expand"
    resize = _pad_tail if grow else _keep_prefix
    hd = src.head_dim

    if name in ("embed.tok", "embed.pos"):
        return resize(arr, 1, dst.d_model)
    if name in ("final.ln.g", "final.ln.b") or name.endswith((".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b")):
        return resize(arr, 0, dst.d_model)
    if name == "lm_head.w":
        return resize(arr, 0, dst.d_model)
    if name.endswith((".attn.wq", ".attn.wk", ".attn.wv")):
        arr = resize(arr, 0, dst.d_model)
        return _resize_heads(arr, 1, src.n_heads, dst.n_heads, hd, grow)
    if name.endswith((".attn.bq", ".attn.bk", ".attn.bv")):
        return _resize_heads(arr, 0, src.n_heads, dst.n_heads, hd, grow)
    if name.endswith(".attn.wo"):
        arr = _resize_heads(arr, 0, src.n_heads, dst.n_heads, hd, grow)
        return resize(arr, 1, dst.d_model)
    if name.endswith(".attn.bo"):
        return resize(arr, 0, dst.d_model)
    if name.endswith(".ffn.w1"):
        arr = resize(arr, 0, dst.d_model)
        return resize(arr, 1, dst.d_ff)
    if name.endswith(".ffn.b1"):
        return resize(arr, 0, dst.d_ff)
    if name.endswith(".ffn.w2"):
        arr = resize(arr, 0, dst.d_ff)
        return resize(arr, 1, dst.d_model)
    if name.endswith(".ffn.b2"):
        return resize(arr, 0, dst.d_model)
    raise SurgeryError(f"no transform rule for tensor {name!r}")


# tensors zeroed on non-first replicas so the block is the residual identity
_IDENTITY_ZEROED = (".attn.wo", ".attn.bo", ".ffn.w2", ".ffn.b2")


def apply_transform(ckpt: Checkpoint, plan: TransformPlan) -> Checkpoint:
    if ckpt.config != plan.src:
        raise SurgeryError("checkpoint config does not match the plan's source config")
    ckpt.validate()
    src_params = ckpt.params
    out: ParamSet = {}
    dtype = src_params["embed.tok"].dtype

    def put(name: str, arr: np.ndarray) -> None:
        out[name] = Tensor(np.ascontiguousarray(arr), dtype=dtype.type)

    for name in ("embed.tok", "embed.pos", "final.ln.g", "final.ln.b"):
        put(name, _transform_tensor(name, src_params[name].data, plan, None))
    if not plan.src.tied_lm_head:
        put("lm_head.w", _transform_tensor("lm_head.w", src_params["lm_head.w"].data, plan, None))

    suffixes = [
        "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
        "attn.bq", "attn.bk", "attn.bv", "attn.bo",
        "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    ]
    if plan.kind == "expand":
        seen: set[int] = set()
        for i, j in enumerate(plan.layer_map):
            is_replica = j in seen
            seen.add(j)
            for sfx in suffixes:
                arr = _transform_tensor(f"L{j}.{sfx}", src_params[f"L{j}.{sfx}"].data, plan, j)
                if plan.replication_mode == "identity" and is_replica and f".{sfx}".endswith(_IDENTITY_ZEROED):
                    arr = np.zeros_like(arr)
                put(f"L{i}.{sfx}", arr)
    else:
        for i, j in enumerate(plan.layer_map):
            for sfx in suffixes:
                put(f"L{i}.{sfx}", _transform_tensor(f"L{j}.{sfx}", src_params[f"L{j}.{sfx}"].data, plan, j))

    stage = (
        f"{plan.kind}:{plan.replication_mode} {plan.src.n_layers}x{plan.src.d_model}"
        f"->{plan.dst.n_layers}x{plan.dst.d_model} from={ckpt.meta.name}"
        if plan.kind == "expand"
        else f"subset {plan.src.n_layers}x{plan.src.d_model}->{plan.dst.n_layers}x{plan.dst.d_model}"
        f" kept={list(plan.layer_map)} from={ckpt.meta.name}"
    )
    result = Checkpoint(config=plan.dst, params=out, meta=ckpt.meta.child(stage))
    result.validate()
    return result


def default_alpha(p_small: int, p_large: int, p_target: int) -> float:
    """Convex weight for the smaller anchor from relative distance in
    parameter count, clamped to [0, 1]."""
    if p_small >= p_large:
        raise SurgeryError("default_alpha requires p_small < p_large")
    alpha = (p_large - p_target) / (p_large - p_small)
    return min(1.0, max(0.0, alpha))


def interpolate(
    small: Checkpoint,
    large: Checkpoint,
    dst_config: ModelConfig,
    alpha: float,
    mode: str = "copy",
) -> Checkpoint:
    """Blend alpha * expand(small) + (1 - alpha) * subset(large) per tensor.
    alpha=1 / alpha=0 return the pure transform bitwise."""
    if not (0.0 <= alpha <= 1.0):
        raise SurgeryError(f"alpha {alpha} out of [0, 1]")
    if not structurally_le(small.config, dst_config) or not structurally_le(dst_config, large.config):
        raise SurgeryError("configs must nest: small <= target <= large")
    expanded = apply_transform(small, plan_expand(small.config, dst_config, mode=mode))
    subsetted = apply_transform(large, plan_subset(large.config, dst_config))
    stage = f"interpolated alpha={alpha:.6g} between {small.meta.name},{large.meta.name}"
    if alpha == 1.0:
        return Checkpoint(dst_config, expanded.params, expanded.meta.child(stage))
    if alpha == 0.0:
        return Checkpoint(dst_config, subsetted.params, subsetted.meta.child(stage))
    dtype = expanded.params["embed.tok"].dtype.type
    a = np.asarray(alpha, dtype=dtype)
    blended: ParamSet = {
        name: Tensor(a * expanded.params[name].data + (1 - a) * subsetted.params[name].data, dtype=dtype)
        for name in expanded.params
    }
    meta = Meta(
        name=f"interp-a{alpha:.3g}",
        seed=small.meta.seed,
        step_count=0,
        lineage=small.meta.lineage + large.meta.lineage + [stage],
    )
    return Checkpoint(dst_config, blended, meta)


def select_adjacent_anchors(anchors: list[Checkpoint], target_params: int) -> tuple[Checkpoint, Checkpoint]:
    """Tightest bracketing pair in a descending chain; an exact size match
    returns that anchor on both sides."""
    if not anchors:
        raise SurgeryError("empty anchor chain")
    counts = [count_params(c.config) for c in anchors]
    if any(b >= a for a, b in zip(counts, counts[1:])):
        raise SurgeryError("anchors must be sorted by strictly descending parameter count")
    if not (counts[-1] <= target_params <= counts[0]):
        raise SurgeryError(
            f"target {target_params} outside the chain's range [{counts[-1]}, {counts[0]}]"
        )
    for ckpt, n in zip(anchors, counts):
        if n == target_params:
            return ckpt, ckpt
    for idx in range(len(anchors) - 1):
        if counts[idx + 1] <= target_params <= counts[idx]:
            return anchors[idx + 1], anchors[idx]
    raise SurgeryError("unreachable: target not bracketed")
