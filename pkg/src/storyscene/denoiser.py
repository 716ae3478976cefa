"""Pluggable noise predictor plus the deterministic toy implementation.

The toy denoiser is the smallest circuit that exercises every attention
pathway: token embedding, one cross-attention block with masked scene
injection, one self-attention block with optional scene sharing, and a
linear head. All weights are fixed pseudo-random draws from a seed, so two
handles with equal seeds are extensionally equal. A latent-to-image decoder
with the same desk-scale flavor lives here as well.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .attention import (ProjectionSet, SubjectMask, attention,
                        cross_attention_maps, scene_inject,
                        scene_sharing_attention)
from .errors import ContractError, DimensionError
from .numerics import Tensor, as_tensor

_SCENE_EMBED_SEED = 20_240_601


def token_hash64(token: str) -> int:
    """Stable 64-bit hash of one whitespace token."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def toy_embed(text: str, d_model: int = 32) -> Tensor:
    """Hash each whitespace token to a deterministic unit-norm embedding."""
    tokens = text.split()
    if not tokens:
        raise ValueError("cannot embed empty text")
    rows = np.empty((len(tokens), d_model))
    for i, token in enumerate(tokens):
        rng = np.random.default_rng(token_hash64(token))
        row = rng.standard_normal(d_model)
        rows[i] = row / np.linalg.norm(row)
    return rows


def embedding_collision_rate(tokens) -> float:
    """Fraction of distinct tokens whose 64-bit hash collides with another."""
    distinct = sorted(set(tokens))
    if not distinct:
        return 0.0
    hashes = {token_hash64(token) for token in distinct}
    return (len(distinct) - len(hashes)) / len(distinct)


def embed_scene_image(pixels, d_model: int = 32, grid: int = 4) -> Tensor:
    """Pool an RGB image onto a grid and project each cell to a scene token.

    The projection weights are fixed global constants (not per-handle), so
    a scene image always embeds to the same tokens.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    height, width = arr.shape[:2]
    cells = np.empty((grid * grid, 3))
    for gy in range(grid):
        for gx in range(grid):
            block = arr[gy * height // grid:(gy + 1) * height // grid,
                        gx * width // grid:(gx + 1) * width // grid]
            cells[gy * grid + gx] = block.mean(axis=(0, 1))
    feats = cells / 127.5 - 1.0
    rng = np.random.default_rng(np.random.SeedSequence([_SCENE_EMBED_SEED, d_model]))
    proj = rng.standard_normal((3, d_model))
    pos = 0.2 * rng.standard_normal((grid * grid, d_model))
    tokens = feats @ proj + pos
    return tokens / np.maximum(np.linalg.norm(tokens, axis=1, keepdims=True), 1e-12)


@dataclass
class PromptBinding:
    """A story sub-prompt encoded for the denoiser."""

    embeddings: Tensor
    subject_token_index: int
    text: str

    def __post_init__(self):
        self.embeddings = as_tensor(self.embeddings, "prompt embeddings")
        if not 0 <= self.subject_token_index < self.embeddings.shape[0]:
            raise IndexError(
                f"subject token index {self.subject_token_index} out of range "
                f"for {self.embeddings.shape[0]} tokens")

    @classmethod
    def from_text(cls, text: str, subject_token_index: int,
                  d_model: int = 32) -> "PromptBinding":
        return cls(toy_embed(text, d_model), subject_token_index, text)


@dataclass
class SceneBinding:
    """A local scene encoded as visual tokens shared by all of its stories."""

    embeddings: Tensor
    source: str = ""

    def __post_init__(self):
        self.embeddings = as_tensor(self.embeddings, "scene embeddings")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DimensionError("scene binding needs at least one token row")

    @classmethod
    def from_image(cls, pixels, d_model: int = 32, grid: int = 4,
                   source: str = "") -> "SceneBinding":
        return cls(embed_scene_image(pixels, d_model, grid), source)


@dataclass(frozen=True)
class DenoiserConfig:
    seed: int = 0
    latent_height: int = 8
    latent_width: int = 8
    latent_channels: int = 4
    d_model: int = 32
    head_dim: int = 32
    heads: int = 1
    depth: int = 1
    scene_weight: float = 0.5
    mask_mode: str = "drop"
    invert_mask: bool = False
    mask_threshold: str | float = "mean"
    weight_scale: float = 1.0
    head_gain: float = 0.5

    def __post_init__(self):
        if self.head_dim % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide head_dim ({self.head_dim})")
        if self.scene_weight < 0:
            raise ValueError("scene_weight must be nonnegative")
        if self.mask_mode not in ("zero", "drop"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_height, self.latent_width, self.latent_channels)


@dataclass
class CallRecord:
    timestep: int
    story_ids: tuple[int, ...]
    batch_size: int
    sharing: bool


@dataclass
class DenoiserStats:
    """Instrumentation snapshot: counters only ever move upward."""

    invocations: int = 0
    max_batch: int = 0
    records: list[CallRecord] = field(default_factory=list)

    def joint_calls_per_story(self, timestep: int) -> dict[int, int]:
        """How many paired calls each story id joined at one timestep."""
        counts: dict[int, int] = {}
        for record in self.records:
            if record.timestep == timestep and record.sharing:
                for story_id in record.story_ids:
                    counts[story_id] = counts.get(story_id, 0) + 1
        return counts

    def blended_timesteps(self) -> list[int]:
        return sorted({r.timestep for r in self.records if r.sharing}, reverse=True)


@dataclass
class EpsPrediction:
    """Noise estimates plus the text cross-attention map for each latent."""

    eps: list[Tensor]
    text_maps: list[Tensor]


class ToyDenoiser:
    """Deterministic toy noise predictor over (h, w, c) latents.

    Accepts one latent (independent denoising) or exactly two (a pair with
    scene sharing); a larger batch is a structural contract violation, which
    is what keeps per-call cost flat no matter how many stories are sampled.
    """

    tag = "toy"

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        self.config = config
        self.stats = DenoiserStats()
        self._lock = threading.Lock()
        rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed & 0xFFFF_FFFF_FFFF_FFFF]))
        c, dm, d = config.latent_channels, config.d_model, config.head_dim
        hw = config.latent_height * config.latent_width
        scale = config.weight_scale

        def draw(rows: int, cols: int) -> Tensor:
            return scale * rng.standard_normal((rows, cols)) / np.sqrt(rows)

        self.w_embed = draw(c, dm)
        self.pos_embed = scale * rng.standard_normal((hw, dm))
        self.cross_proj = ProjectionSet(
            w_query=draw(dm, d), w_key_text=draw(dm, d), w_value_text=draw(dm, d),
            w_key_scene=draw(dm, d), w_value_scene=draw(dm, d), head_dim=d)
        self.w_cross_out = draw(d, dm)
        self.w_q_self = draw(dm, d)
        self.w_k_self = draw(dm, d)
        self.w_v_self = draw(dm, d)
        self.w_self_out = draw(d, dm)
        self.w_head = draw(dm, c)

    def _head_slices(self) -> list[slice]:
        per_head = self.config.head_dim // self.config.heads
        return [slice(h * per_head, (h + 1) * per_head)
                for h in range(self.config.heads)]

    def _mask_or_zero(self, mask: SubjectMask | None) -> SubjectMask:
        cfg = self.config
        if mask is None:
            return SubjectMask.zeros(cfg.latent_height, cfg.latent_width)
        return mask.rescale(cfg.latent_height, cfg.latent_width)

    def _cross_block(self, tokens: Tensor, prompt: PromptBinding,
                     scene: SceneBinding, mask: SubjectMask,
                     ) -> tuple[Tensor, Tensor]:
        """Masked scene injection; returns (updated tokens, mean text map)."""
        proj = self.cross_proj
        head_maps = []
        injected = []
        for sl in self._head_slices():
            head_proj = ProjectionSet(
                w_query=proj.w_query[:, sl], w_key_text=proj.w_key_text[:, sl],
                w_value_text=proj.w_value_text[:, sl],
                w_key_scene=proj.w_key_scene[:, sl],
                w_value_scene=proj.w_value_scene[:, sl],
                head_dim=sl.stop - sl.start)
            text_map, scene_map = cross_attention_maps(
                tokens, prompt.embeddings, scene.embeddings, head_proj)
            head_maps.append(text_map)
            injected.append(scene_inject(
                text_map, head_proj.text_values(prompt.embeddings),
                scene_map, head_proj.scene_values(scene.embeddings),
                mask, self.config.scene_weight))
        mean_map = head_maps[0] if len(head_maps) == 1 else np.mean(head_maps, axis=0)
        out = np.concatenate(injected, axis=1)
        return tokens + out @ self.w_cross_out, mean_map

    def _self_qkv(self, tokens: Tensor, sl: slice) -> tuple[Tensor, Tensor, Tensor]:
        return (tokens @ self.w_q_self[:, sl], tokens @ self.w_k_self[:, sl],
                tokens @ self.w_v_self[:, sl])

    def _embed_latent(self, z: Tensor) -> Tensor:
        cfg = self.config
        flat = z.reshape(-1, cfg.latent_channels)
        return flat @ self.w_embed + self.pos_embed

    def predict_eps(self, latents: list[Tensor], t: int,
                    prompts: list[PromptBinding], scene: SceneBinding,
                    masks: list[SubjectMask | None], sharing: bool = False,
                    story_ids: tuple[int, ...] | None = None) -> EpsPrediction:
        """Predict noise for one latent or a scene-sharing pair."""
        cfg = self.config
        if not 1 <= len(latents) <= 2:
            raise ContractError(
                f"denoiser accepts 1 or 2 latents per call, got {len(latents)}")
        if sharing != (len(latents) == 2):
            raise ContractError("sharing must be set exactly for paired calls")
        if len(prompts) != len(latents) or len(masks) != len(latents):
            raise ContractError("prompts and masks must align with latents")
        latents = [as_tensor(z, "latent") for z in latents]
        for z in latents:
            if z.shape != cfg.latent_shape:
                raise DimensionError(
                    f"latent shape {z.shape} != configured {cfg.latent_shape}")
        self._record(t, story_ids, len(latents), sharing)

        norm_masks = [self._mask_or_zero(m) for m in masks]
        tokens = [self._embed_latent(z) for z in latents]
        collected_maps: list[list[Tensor]] = [[] for _ in latents]
        # Depth repeats the (cross-attention, self-attention) block pair with
        # shared weights; masks are shared across every repetition.
        for _ in range(cfg.depth):
            updated = []
            for index, (tok, prompt, mask) in enumerate(
                    zip(tokens, prompts, norm_masks)):
                tok, text_map = self._cross_block(tok, prompt, scene, mask)
                collected_maps[index].append(text_map)
                updated.append(tok)
            tokens = updated

            if sharing:
                outs = [np.zeros((tok.shape[0], 0)) for tok in tokens]
                for sl in self._head_slices():
                    out_a, out_b = scene_sharing_attention(
                        self._self_qkv(tokens[0], sl),
                        self._self_qkv(tokens[1], sl),
                        norm_masks[0], norm_masks[1],
                        mode=cfg.mask_mode, invert=cfg.invert_mask)
                    outs[0] = np.concatenate([outs[0], out_a], axis=1)
                    outs[1] = np.concatenate([outs[1], out_b], axis=1)
            else:
                outs = []
                for tok in tokens:
                    head_outs = [attention(*self._self_qkv(tok, sl))
                                 for sl in self._head_slices()]
                    outs.append(np.concatenate(head_outs, axis=1))
            tokens = [tok + out @ self.w_self_out
                      for tok, out in zip(tokens, outs)]

        eps = []
        for z, tok in zip(latents, tokens):
            # Latent pass-through cancels the sampler's noise-ratio growth;
            # the tanh-bounded head keeps the content residual from drifting
            # the trajectory out of the decoder's range over long countdowns.
            residual = cfg.head_gain * np.tanh(tok @ self.w_head)
            eps_tokens = z.reshape(-1, cfg.latent_channels) + residual
            eps.append(eps_tokens.reshape(cfg.latent_shape))
        text_maps = [maps[0] if len(maps) == 1 else np.mean(maps, axis=0)
                     for maps in collected_maps]
        return EpsPrediction(eps=eps, text_maps=text_maps)

    def _record(self, timestep: int, story_ids: tuple[int, ...] | None,
                batch_size: int, sharing: bool) -> None:
        with self._lock:
            self.stats.invocations += 1
            self.stats.max_batch = max(self.stats.max_batch, batch_size)
            self.stats.records.append(CallRecord(
                timestep, story_ids or (), batch_size, sharing))

    def reset_stats(self) -> None:
        with self._lock:
            self.stats = DenoiserStats()


class RemoteDenoiser:
    """Adapter stub for a real model served remotely. Declared, not built."""

    tag = "remote"

    def __init__(self, endpoint: str):
        self.endpoint = endpoint

    def predict_eps(self, *args, **kwargs):
        raise NotImplementedError("remote denoiser adapter is a stub")


class ToyDecoder:
    """Map a latent to an RGB image: fixed per-channel affine to [0, 255],
    then nearest-neighbor upsampling by ``upsample``."""

    def __init__(self, latent_shape: tuple[int, int, int] = (8, 8, 4),
                 upsample: int = 8, gain: float = 51.0):
        self.latent_shape = latent_shape
        self.upsample = upsample
        self.gain = gain

    def __call__(self, z: Tensor) -> np.ndarray:
        z = as_tensor(z, "latent")
        if z.shape != self.latent_shape:
            raise DimensionError(
                f"latent shape {z.shape} != configured {self.latent_shape}")
        rgb = 127.5 + self.gain * z[:, :, :3]
        img = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
        return img.repeat(self.upsample, axis=0).repeat(self.upsample, axis=1)
