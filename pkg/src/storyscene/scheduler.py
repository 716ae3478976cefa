"""Deterministic DDIM sampling with pairwise noise blending.

Inside a configured countdown window the N story latents are denoised as
unordered pairs with scene sharing active, each story's noise predictions
are accumulated over its N-1 pairings and averaged, and the averaged noise
drives an ordinary DDIM update. At most two latents ever enter the denoiser
together, so the denoiser-side cost per call is flat in N.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import CrossAttentionState, SubjectMask, derive_subject_mask
from .errors import DimensionError, GenerationError
from .numerics import Tensor, as_tensor


@dataclass(frozen=True)
class BlendingConfig:
    """Sampling-loop parameters.

    ``blend_min_step``/``blend_max_step`` bound the countdown timesteps on
    which pairwise blending runs; outside that window stories are denoised
    independently.
    """

    total_steps: int = 50
    story_count: int = 5
    blend_min_step: int = 0
    blend_max_step: int = 25
    blending_enabled: bool = True

    def __post_init__(self):
        if not 0 <= self.blend_min_step <= self.blend_max_step <= self.total_steps:
            raise ValueError(
                f"need 0 <= blend_min_step <= blend_max_step <= total_steps, got "
                f"[{self.blend_min_step}, {self.blend_max_step}] with T={self.total_steps}")
        if self.story_count < 1:
            raise ValueError("story_count must be >= 1")

    def blends_at(self, timestep: int) -> bool:
        return (self.blending_enabled and self.story_count >= 2
                and self.blend_min_step <= timestep <= self.blend_max_step)


@dataclass
class NoiseSchedule:
    """Training betas, cumulative alphas, and the inference-step mapping.

    ``step_alpha_bars[t - 1]`` is the cumulative alpha for countdown step t;
    t runs from ``total_steps`` (most noisy) down to 1 (decoded).
    """

    betas: Tensor
    alphas_cumprod: Tensor
    step_alpha_bars: Tensor

    def __post_init__(self):
        if np.any(self.betas <= 0) or np.any(np.diff(self.betas) <= 0):
            raise ValueError("betas must be strictly positive and increasing")
        if np.any(self.alphas_cumprod <= 0) or np.any(self.alphas_cumprod > 1):
            raise ValueError("alphas_cumprod must lie in (0, 1]")
        if np.any(np.diff(self.alphas_cumprod) >= 0):
            raise ValueError("alphas_cumprod must be strictly decreasing")

    @property
    def total_steps(self) -> int:
        return len(self.step_alpha_bars)

    @classmethod
    def linear(cls, total_steps: int = 50, train_steps: int = 1000,
               beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        """Linear betas over the training range, evenly strided to inference steps."""
        if not 1 <= total_steps <= train_steps:
            raise ValueError("need 1 <= total_steps <= train_steps")
        betas = np.linspace(beta_start, beta_end, train_steps)
        alphas_cumprod = np.cumprod(1.0 - betas)
        stride = train_steps // total_steps
        indices = np.arange(total_steps) * stride
        return cls(betas, alphas_cumprod, alphas_cumprod[indices])

    @classmethod
    def from_alpha_bars(cls, alpha_bars) -> "NoiseSchedule":
        """Build directly from per-step cumulative alphas (test hook).

        Skips the beta bookkeeping; ties between adjacent steps are allowed
        so degenerate no-op steps can be exercised.
        """
        step_alpha_bars = as_tensor(alpha_bars, "alpha_bars")
        if np.any(step_alpha_bars <= 0) or np.any(step_alpha_bars > 1):
            raise ValueError("alpha_bars must lie in (0, 1]")
        if np.any(np.diff(step_alpha_bars) > 0):
            raise ValueError("alpha_bars must be non-increasing in the countdown index")
        schedule = cls.__new__(cls)
        schedule.betas = None  # type: ignore[assignment]
        schedule.alphas_cumprod = None  # type: ignore[assignment]
        schedule.step_alpha_bars = step_alpha_bars
        return schedule

    def alpha_bar(self, timestep: int) -> float:
        """Cumulative alpha at a 1-based countdown step."""
        if not 1 <= timestep <= self.total_steps:
            raise IndexError(f"timestep {timestep} outside [1, {self.total_steps}]")
        return float(self.step_alpha_bars[timestep - 1])


@dataclass
class LatentBatch:
    """The N story latents at one countdown timestep, plus their bindings.

    ``mask_states`` carries each story's running text cross-attention sum so
    subject masks can be averaged over previous steps; entries start None
    and are created after the first denoiser call.
    """

    latents: list[Tensor]
    timestep: int
    prompts: list
    scene: object
    mask_states: list[CrossAttentionState | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.latents:
            raise ValueError("latent batch is empty")
        shapes = {tuple(z.shape) for z in self.latents}
        if len(shapes) > 1:
            raise DimensionError(f"latents disagree on shape: {sorted(shapes)}")
        if self.timestep < 1:
            raise ValueError(f"timestep must be >= 1, got {self.timestep}")
        if len(self.prompts) != len(self.latents):
            raise DimensionError("need one prompt binding per latent")
        if not self.mask_states:
            self.mask_states = [None] * len(self.latents)

    @property
    def story_count(self) -> int:
        return len(self.latents)


def enumerate_pairs(story_count: int) -> list[tuple[int, int]]:
    """All unordered story pairs (i, j) with 1 <= i < j <= story_count.

    Lexicographic order; every story appears in exactly story_count - 1
    pairs, giving story_count * (story_count - 1) / 2 pairs in total.
    """
    if story_count < 2:
        raise ValueError(f"need at least 2 stories to pair, got {story_count}")
    return list(itertools.combinations(range(1, story_count + 1), 2))


def ddim_step(z_t: Tensor, eps: Tensor, timestep: int,
              schedule: NoiseSchedule) -> Tensor:
    """One deterministic DDIM update from countdown step t to t - 1.

    Predicts x0 = (z - sqrt(1 - a_t) * eps) / sqrt(a_t) and re-noises it to
    the t - 1 level: sqrt(a_prev) * x0 + sqrt(1 - a_prev) * eps. When the
    two alpha levels coincide the update is algebraically the identity and
    is returned as such.
    """
    if timestep < 2:
        raise IndexError(f"ddim_step needs timestep >= 2, got {timestep}")
    z_t = as_tensor(z_t, "z_t")
    eps = as_tensor(eps, "eps")
    if z_t.shape != eps.shape:
        raise DimensionError(f"latent shape {z_t.shape} != eps shape {eps.shape}")
    a_t = schedule.alpha_bar(timestep)
    a_prev = schedule.alpha_bar(timestep - 1)
    if a_prev == a_t:
        return z_t.copy()
    x0 = (z_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps


def peak_denoiser_batch(cfg: BlendingConfig) -> int:
    """Largest latent count any single denoiser call can see: 2 when
    blending with at least two stories, else 1."""
    if cfg.blending_enabled and cfg.story_count >= 2:
        return 2
    return 1


def _current_masks(batch: LatentBatch, resolution: tuple[int, int],
                   ) -> list[SubjectMask | None]:
    masks: list[SubjectMask | None] = []
    for state, prompt in zip(batch.mask_states, batch.prompts):
        if state is None or state.step_count < 1:
            masks.append(None)
        else:
            masks.append(derive_subject_mask(
                state, prompt.subject_token_index, resolution))
    return masks


def blended_denoise_step(batch: LatentBatch, cfg: BlendingConfig, denoiser,
                         schedule: NoiseSchedule,
                         max_workers: int | None = None) -> LatentBatch:
    """Advance every story latent by one countdown step.

    In the blending window each unordered pair is denoised jointly with
    scene sharing, the two returned noises are accumulated into their
    stories, and each accumulator is divided by story_count - 1 before the
    DDIM update. Outside the window (or with blending disabled) each story
    is denoised independently. Pair evaluations may run on a thread pool;
    accumulation always happens in lexicographic pair order, so results do
    not depend on ``max_workers``.
    """
    if batch.timestep < 2:
        raise ValueError(f"denoise loop runs down to t=2; got t={batch.timestep}")
    n = batch.story_count
    t = batch.timestep
    height, width = batch.latents[0].shape[0], batch.latents[0].shape[1]
    masks = _current_masks(batch, (height, width))
    eps_sums = [np.zeros_like(z) for z in batch.latents]
    text_maps: dict[int, Tensor] = {}

    if cfg.blends_at(t):
        norm = n - 1
        pairs = enumerate_pairs(n)

        def eval_pair(pair: tuple[int, int]):
            i, j = pair
            a, b = i - 1, j - 1
            try:
                return denoiser.predict_eps(
                    [batch.latents[a], batch.latents[b]], t,
                    [batch.prompts[a], batch.prompts[b]], batch.scene,
                    [masks[a], masks[b]], sharing=True, story_ids=(i, j))
            except GenerationError:
                raise
            except Exception as exc:
                raise GenerationError(
                    f"denoiser failed for pair ({i}, {j}) at step {t}: {exc}",
                    timestep=t, pair=(i, j)) from exc

        if max_workers is not None and max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = list(pool.map(eval_pair, pairs))
        else:
            results = [eval_pair(pair) for pair in pairs]
        for (i, j), prediction in zip(pairs, results):
            a, b = i - 1, j - 1
            eps_sums[a] += prediction.eps[0]
            eps_sums[b] += prediction.eps[1]
            # The text map depends only on the story's own latent and prompt,
            # so every pairing yields the same map; keep one per story.
            text_maps[a] = prediction.text_maps[0]
            text_maps[b] = prediction.text_maps[1]
    else:
        norm = 1
        for k in range(n):
            try:
                prediction = denoiser.predict_eps(
                    [batch.latents[k]], t, [batch.prompts[k]], batch.scene,
                    [masks[k]], sharing=False, story_ids=(k + 1,))
            except GenerationError:
                raise
            except Exception as exc:
                raise GenerationError(
                    f"denoiser failed for story {k + 1} at step {t}: {exc}",
                    timestep=t) from exc
            eps_sums[k] += prediction.eps[0]
            text_maps[k] = prediction.text_maps[0]

    new_latents = [ddim_step(batch.latents[k], eps_sums[k] / norm, t, schedule)
                   for k in range(n)]
    new_states = list(batch.mask_states)
    for k, text_map in text_maps.items():
        if new_states[k] is None:
            new_states[k] = CrossAttentionState.empty(*text_map.shape)
        new_states[k].update(text_map)
    return LatentBatch(new_latents, t - 1, batch.prompts, batch.scene, new_states)


def run_sampler(initial: LatentBatch, cfg: BlendingConfig, denoiser,
                schedule: NoiseSchedule, decoder,
                max_workers: int | None = None) -> list:
    """Denoise from the initial timestep down to 1 and decode every story."""
    if initial.timestep != cfg.total_steps:
        raise ValueError(
            f"initial batch is at t={initial.timestep}, config says T={cfg.total_steps}")
    batch = initial
    while batch.timestep >= 2:
        batch = blended_denoise_step(batch, cfg, denoiser, schedule,
                                     max_workers=max_workers)
    return [decoder(z) for z in batch.latents]


def seeded_latents(shape: tuple[int, ...], story_count: int, seed: int,
                   scene_index: int = 0) -> list[Tensor]:
    """Standard-normal latents, independently seeded per (seed, scene, story).

    Seeds are taken modulo 2**64, so negative values get their unsigned
    64-bit reading.
    """
    latents = []
    for story in range(story_count):
        rng = np.random.default_rng(np.random.SeedSequence(
            [seed & 0xFFFF_FFFF_FFFF_FFFF, scene_index, story]))
        latents.append(rng.standard_normal(shape))
    return latents
