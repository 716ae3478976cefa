"""Scene-consistent story image generation at desk scale.

Plans local scenes and story sub-prompts from a theme through pluggable
model clients, then samples mutually scene-consistent story latents with
masked scene-injection cross-attention, scene-sharing self-attention, and
pairwise noise-blending DDIM.
"""

from .attention import (CrossAttentionState, ProjectionSet, SubjectMask,
                        cross_attention_maps, derive_subject_mask,
                        scene_inject, scene_sharing_attention)
from .clients import (ChatTranscript, ClientConfig, MockT2iClient,
                      MockVlmClient, make_t2i_client, make_vlm_client)
from .denoiser import (DenoiserConfig, PromptBinding, SceneBinding,
                       ToyDecoder, ToyDenoiser, toy_embed)
from .planner import (SceneRegion, StoryPlan, conceptualize, craft, crop,
                      judge_plan, load_project, plan_story, save_project,
                      snap_region, visualize)
from .scheduler import (BlendingConfig, LatentBatch, NoiseSchedule,
                        blended_denoise_step, ddim_step, enumerate_pairs,
                        peak_denoiser_batch, run_sampler, seeded_latents)

__version__ = "0.1.0"

__all__ = [
    "BlendingConfig", "ChatTranscript", "ClientConfig", "CrossAttentionState",
    "DenoiserConfig", "LatentBatch", "MockT2iClient", "MockVlmClient",
    "NoiseSchedule", "ProjectionSet", "PromptBinding", "SceneBinding",
    "SceneRegion", "StoryPlan", "SubjectMask", "ToyDecoder", "ToyDenoiser",
    "blended_denoise_step", "conceptualize", "craft", "crop",
    "cross_attention_maps", "ddim_step", "derive_subject_mask",
    "enumerate_pairs", "judge_plan", "load_project", "make_t2i_client",
    "make_vlm_client", "peak_denoiser_batch", "plan_story", "run_sampler",
    "save_project", "scene_inject", "scene_sharing_attention",
    "seeded_latents", "snap_region", "toy_embed", "visualize",
]
