"""Attention mechanics for scene-consistent generation.

Two mechanisms live here. Masked scene injection runs a text cross-attention
branch and a scene cross-attention branch in parallel and adds the scene
branch only outside the subject region, so subjects keep their own style
while the background absorbs the scene. Scene-sharing self-attention lets
two generation branches attend to each other's background keys/values,
which pulls their scenes toward each other without merging their subjects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import Tensor, as_tensor, masked_concat_kv, matmul, softmax_rows


@dataclass
class SubjectMask:
    """Per-spatial-token subject weights on an (h, w) grid, each in [0, 1]."""

    values: Tensor

    def __post_init__(self):
        self.values = as_tensor(self.values, "mask values")
        if self.values.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @classmethod
    def zeros(cls, height: int, width: int) -> "SubjectMask":
        return cls(np.zeros((height, width)))

    def flat(self) -> Tensor:
        """Row-major flattening to one value per spatial token."""
        return self.values.reshape(-1)

    def complement(self) -> "SubjectMask":
        return SubjectMask(1.0 - self.values)

    def rescale(self, height: int, width: int) -> "SubjectMask":
        """Nearest-neighbor resample; preserves [0, 1] and binary values.

        Identity at the current resolution, so repeated rescaling is stable.
        """
        h, w = self.resolution
        if (h, w) == (height, width):
            return SubjectMask(self.values.copy())
        rows = np.minimum((np.arange(height) + 0.5) * h // height, h - 1).astype(int)
        cols = np.minimum((np.arange(width) + 0.5) * w // width, w - 1).astype(int)
        return SubjectMask(self.values[np.ix_(rows, cols)])


@dataclass
class CrossAttentionState:
    """Running sum of a branch's text cross-attention maps over timesteps.

    Owned and mutated by exactly one generation branch; the averaged map is
    what the subject mask is derived from.
    """

    running_sum: Tensor
    step_count: int = 0

    @classmethod
    def empty(cls, spatial_tokens: int, text_tokens: int) -> "CrossAttentionState":
        return cls(np.zeros((spatial_tokens, text_tokens)), 0)

    def update(self, attention_map: Tensor) -> None:
        attention_map = as_tensor(attention_map, "attention map")
        if attention_map.shape != self.running_sum.shape:
            raise DimensionError(
                f"map shape {attention_map.shape} != state shape {self.running_sum.shape}")
        self.running_sum = self.running_sum + attention_map
        self.step_count += 1

    def average(self) -> Tensor:
        """Mean attention map so far; rows of the mean sum to 1."""
        if self.step_count < 1:
            raise ValueError("no attention maps recorded yet")
        avg = self.running_sum / self.step_count
        if not np.allclose(avg.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("averaged map is not row-stochastic")
        return avg


@dataclass(frozen=True)
class ProjectionSet:
    """Weight matrices for the two cross-attention branches.

    ``w_query`` maps latent tokens to queries; ``w_key_text``/``w_value_text``
    project prompt tokens and ``w_key_scene``/``w_value_scene`` project scene
    tokens. All key/query widths equal ``head_dim``.
    """

    w_query: Tensor
    w_key_text: Tensor
    w_value_text: Tensor
    w_key_scene: Tensor
    w_value_scene: Tensor
    head_dim: int

    def __post_init__(self):
        if self.head_dim <= 0:
            raise ValueError("head_dim must be positive")
        widths = {
            "w_query": self.w_query.shape[1],
            "w_key_text": self.w_key_text.shape[1],
            "w_key_scene": self.w_key_scene.shape[1],
        }
        for name, width in widths.items():
            if width != self.head_dim:
                raise DimensionError(f"{name} width {width} != head_dim {self.head_dim}")

    def text_values(self, text_tokens: Tensor) -> Tensor:
        return matmul(text_tokens, self.w_value_text)

    def scene_values(self, scene_tokens: Tensor) -> Tensor:
        return matmul(scene_tokens, self.w_value_scene)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v."""
    scores = matmul(q, as_tensor(k).T) / math.sqrt(q.shape[1])
    return matmul(softmax_rows(scores), v)


def cross_attention_maps(latent_tokens: Tensor, text_tokens: Tensor,
                         scene_tokens: Tensor, proj: ProjectionSet,
                         ) -> tuple[Tensor, Tensor]:
    """Row-stochastic attention maps of the latent against text and scene.

    Returns ``(text_map, scene_map)`` with shapes (hw, L) and (hw, L').
    """
    q = matmul(latent_tokens, proj.w_query)
    k_text = matmul(text_tokens, proj.w_key_text)
    k_scene = matmul(scene_tokens, proj.w_key_scene)
    scale = math.sqrt(proj.head_dim)
    text_map = softmax_rows(matmul(q, k_text.T) / scale)
    scene_map = softmax_rows(matmul(q, k_scene.T) / scale)
    return text_map, scene_map


def derive_subject_mask(state: CrossAttentionState, subject_token_index: int,
                        resolution: tuple[int, int],
                        threshold_policy: str | float = "mean") -> SubjectMask:
    """Binarize the subject token's averaged attention column into a mask.

    The column is reshaped to ``resolution``, min-max normalized, then
    thresholded: values >= threshold become 1. ``threshold_policy`` is
    either ``"mean"`` (threshold at the mean of the normalized column) or a
    fixed float. Min-max normalization makes the result invariant to any
    positive rescaling of the accumulated maps.
    """
    if state.step_count < 1:
        raise ValueError("cannot derive a mask from an empty state")
    # Raw mean, not .average(): min-max normalization below absorbs any
    # positive scaling of the accumulated maps, so no stochasticity check.
    avg = state.running_sum / state.step_count
    if not 0 <= subject_token_index < avg.shape[1]:
        raise IndexError(
            f"subject token index {subject_token_index} out of range for {avg.shape[1]} tokens")
    height, width = resolution
    if height * width != avg.shape[0]:
        raise DimensionError(
            f"resolution {resolution} does not flatten to {avg.shape[0]} spatial tokens")
    column = avg[:, subject_token_index].reshape(height, width)
    span = column.max() - column.min()
    if span > 0:
        normalized = (column - column.min()) / span
    else:
        normalized = np.zeros_like(column)
    if threshold_policy == "mean":
        threshold = float(normalized.mean())
    else:
        threshold = float(threshold_policy)
    return SubjectMask((normalized >= threshold).astype(np.float64))


def scene_inject(text_map: Tensor, text_values: Tensor, scene_map: Tensor,
                 scene_values: Tensor, mask: SubjectMask,
                 scene_weight: float) -> Tensor:
    """Text attention output plus a background-gated, weighted scene branch.

    Computes ``text_map @ text_values + w * (1 - m) * (scene_map @ scene_values)``
    with the flattened mask broadcast across the feature dimension, so the
    scene contributes only outside the subject region.
    """
    if scene_weight < 0:
        raise ValueError("scene_weight must be nonnegative")
    text_out = matmul(text_map, text_values)
    gate = 1.0 - mask.flat()
    if gate.shape[0] != text_out.shape[0]:
        raise DimensionError(
            f"mask flattens to {gate.shape[0]} tokens, expected {text_out.shape[0]}")
    scene_out = matmul(scene_map, scene_values)
    return text_out + scene_weight * gate[:, None] * scene_out


Branch = tuple[Tensor, Tensor, Tensor]


def scene_sharing_attention(branch_a: Branch, branch_b: Branch,
                            mask_a: SubjectMask, mask_b: SubjectMask,
                            mode: str = "drop", invert: bool = False,
                            ) -> tuple[Tensor, Tensor]:
    """Self-attention where each branch also sees the other's background.

    Each branch concatenates the other branch's keys/values after its own,
    gated by the other branch's subject mask (so only background tokens are
    shared), then attends with its own queries. ``invert=True`` swaps the
    gate to share subject tokens instead, which trades scene consistency
    for character consistency.
    """
    q_a, k_a, v_a = (as_tensor(x) for x in branch_a)
    q_b, k_b, v_b = (as_tensor(x) for x in branch_b)
    if q_a.shape[1] != q_b.shape[1]:
        raise DimensionError("branches must share the head dimension")
    gate_a = mask_a.complement().flat() if invert else mask_a.flat()
    gate_b = mask_b.complement().flat() if invert else mask_b.flat()
    out_a = attention(q_a,
                      masked_concat_kv(k_a, k_b, gate_b, mode),
                      masked_concat_kv(v_a, v_b, gate_b, mode))
    out_b = attention(q_b,
                      masked_concat_kv(k_b, k_a, gate_a, mode),
                      masked_concat_kv(v_b, v_a, gate_a, mode))
    return out_a, out_b
