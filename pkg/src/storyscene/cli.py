"""Command-line surface: plan, generate, run, judge, and report.

Configuration flows default -> config file -> flags; secrets only ever come
from environment variables named in the client configs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import planner
from .clients import ClientConfig, make_t2i_client, make_vlm_client
from .denoiser import (DenoiserConfig, PromptBinding, SceneBinding,
                       ToyDecoder, ToyDenoiser)
from .errors import StorySceneError
from .scheduler import (BlendingConfig, LatentBatch, NoiseSchedule,
                        enumerate_pairs, peak_denoiser_batch, run_sampler,
                        seeded_latents)

MANIFEST_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one generation run; mirrors the sampling invariants."""

    scene_count: int = 4
    story_count: int | None = None
    steps: int = 50
    blend_min_step: int = 0
    blend_max_step: int = 25
    blending: bool = True
    scene_weight: float = 0.5
    seed: int = 0
    mask_mode: str = "drop"
    invert_mask: bool = False
    deterministic: bool = True
    max_workers: int | None = None
    latent_height: int = 8
    latent_width: int = 8
    latent_channels: int = 4
    d_model: int = 32
    head_dim: int = 32
    heads: int = 1
    vlm: ClientConfig = field(default_factory=ClientConfig)
    t2i: ClientConfig = field(default_factory=ClientConfig)
    judge: ClientConfig = field(default_factory=ClientConfig)

    def blending_config(self, story_count: int) -> BlendingConfig:
        return BlendingConfig(
            total_steps=self.steps, story_count=story_count,
            blend_min_step=min(self.blend_min_step, self.steps),
            blend_max_step=min(self.blend_max_step, self.steps),
            blending_enabled=self.blending)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            seed=self.seed, latent_height=self.latent_height,
            latent_width=self.latent_width,
            latent_channels=self.latent_channels, d_model=self.d_model,
            head_dim=self.head_dim, heads=self.heads,
            scene_weight=self.scene_weight, mask_mode=self.mask_mode,
            invert_mask=self.invert_mask)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_height, self.latent_width, self.latent_channels)


_CLIENT_KEYS = {"vlm", "t2i", "judge"}
_LATENT_KEYS = {"height": "latent_height", "width": "latent_width",
                "channels": "latent_channels"}


def load_run_config(path: str | Path | None) -> RunConfig:
    """Build a RunConfig from a JSON config file (all keys optional)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    updates: dict = {}
    for key, value in payload.items():
        if key in _CLIENT_KEYS:
            updates[key] = ClientConfig(**value)
        elif key == "latent":
            for sub, attr in _LATENT_KEYS.items():
                if sub in value:
                    updates[attr] = value[sub]
        elif key in {f.name for f in fields(RunConfig)}:
            updates[key] = value
        else:
            raise StorySceneError(f"unknown config key {key!r}")
    return replace(cfg, **updates)


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates: dict = {}
    for name in ("scene_count", "story_count", "steps", "blend_min_step",
                 "blend_max_step", "scene_weight", "seed", "mask_mode",
                 "max_workers", "heads"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "no_blending", False):
        updates["blending"] = False
    if getattr(args, "invert_mask", False):
        updates["invert_mask"] = True
    if getattr(args, "non_deterministic", False):
        updates["deterministic"] = False
    if getattr(args, "backend", None):
        for key in _CLIENT_KEYS:
            updates[key] = replace(getattr(cfg, key), backend=args.backend)
    return replace(cfg, **updates)


def _resolved_config(args: argparse.Namespace) -> RunConfig:
    return _apply_overrides(load_run_config(getattr(args, "config", None)), args)


def cmd_plan(args: argparse.Namespace) -> int:
    cfg = _resolved_config(args)
    out_path = Path(args.out)
    metadata = {"seed": cfg.seed, "vlm_model": cfg.vlm.model,
                "t2i_model": cfg.t2i.model,
                "created_at": None if cfg.deterministic else time.strftime(
                    "%Y-%m-%dT%H:%M:%SZ", time.gmtime())}

    if args.regions_file:
        if not args.global_image:
            print("error: --regions-file requires --global-image", file=sys.stderr)
            return 2
        image = Image.open(args.global_image).convert("RGB")
        entries = json.loads(Path(args.regions_file).read_text(encoding="utf-8"))
        theme = args.theme or entries.get("theme", "")
        if not theme:
            print("error: no theme given (flag or regions file)", file=sys.stderr)
            return 2
        plan = planner.manual_plan(theme, image, entries, metadata)
    else:
        if not args.theme:
            print("error: --theme is required without --regions-file",
                  file=sys.stderr)
            return 2
        vlm = make_vlm_client(cfg.vlm)
        t2i = make_t2i_client(cfg.t2i)
        plan, image = planner.plan_story(args.theme, vlm, t2i,
                                         cfg.scene_count,
                                         args.stories_per_scene or 5,
                                         metadata)

    out_path.parent.mkdir(parents=True, exist_ok=True)
    image_name = out_path.stem + "_global.png"
    image.save(out_path.parent / image_name, format="PNG")
    plan.global_image_path = image_name
    planner.save_project(plan, out_path)
    print(f"plan written to {out_path} ({plan.scene_count} scenes x "
          f"{plan.stories_per_scene} stories)")
    for warning in plan.warnings:
        print(f"warning: {warning}")
    return 0


def _load_plan_and_image(project_path: Path) -> tuple[planner.StoryPlan, Image.Image]:
    plan = planner.load_project(project_path)
    image_path = project_path.parent / plan.global_image_path
    return plan, Image.open(image_path).convert("RGB")


def _verify_pairing(stats, blend_cfg: BlendingConfig) -> tuple[bool, list[str]]:
    """Check the per-step pairing structure recorded by the denoiser."""
    n = blend_cfg.story_count
    problems: list[str] = []
    expected_peak = peak_denoiser_batch(blend_cfg)
    if stats.max_batch > expected_peak:
        problems.append(f"peak batch {stats.max_batch} exceeds {expected_peak}")
    if expected_peak == 2:
        expected_pairs = len(enumerate_pairs(n))
        for timestep in stats.blended_timesteps():
            counts = stats.joint_calls_per_story(timestep)
            if sorted(counts) != list(range(1, n + 1)):
                problems.append(f"step {timestep}: stories {sorted(counts)} paired")
            if set(counts.values()) != {n - 1}:
                problems.append(
                    f"step {timestep}: pairings per story {sorted(set(counts.values()))}, "
                    f"expected {n - 1}")
            total = sum(counts.values())
            if total != 2 * expected_pairs:
                problems.append(
                    f"step {timestep}: {total // 2} pairs, expected {expected_pairs}")
    return not problems, problems


def generate_scene(plan: planner.StoryPlan, scene_index: int, image: Image.Image,
                   cfg: RunConfig, story_count: int, out_dir: Path) -> dict:
    """Sample every story of one local scene and write its images."""
    region = plan.regions[scene_index]
    local = planner.crop(image, [region])[0]
    scene_binding = SceneBinding.from_image(
        np.asarray(local), cfg.d_model,
        source=f"{plan.global_image_path}#{region.to_list()}")
    stories = plan.sub_prompts[scene_index]
    indices = plan.subject_indices[scene_index]
    prompt_bindings = [
        PromptBinding.from_text(stories[k % len(stories)],
                                indices[k % len(indices)], cfg.d_model)
        for k in range(story_count)]

    blend_cfg = cfg.blending_config(story_count)
    denoiser = ToyDenoiser(cfg.denoiser_config())
    schedule = NoiseSchedule.linear(cfg.steps)
    decoder = ToyDecoder(cfg.latent_shape)
    latents = seeded_latents(cfg.latent_shape, story_count, cfg.seed, scene_index)
    batch = LatentBatch(latents, cfg.steps, prompt_bindings, scene_binding)

    start = time.perf_counter()
    images = run_sampler(batch, blend_cfg, denoiser, schedule, decoder,
                         max_workers=None if cfg.deterministic else cfg.max_workers)
    elapsed = time.perf_counter() - start

    image_names = []
    for story, pixels in enumerate(images):
        name = f"scene{scene_index + 1:02d}_story{story + 1:02d}.png"
        Image.fromarray(pixels, mode="RGB").save(out_dir / name, format="PNG")
        image_names.append(name)

    passed, problems = _verify_pairing(denoiser.stats, blend_cfg)
    return {
        "scene_index": scene_index + 1,
        "region": region.to_list(),
        "images": image_names,
        "seed": cfg.seed,
        "wall_time_s": round(elapsed, 6),
        "denoiser_invocations": denoiser.stats.invocations,
        "peak_denoiser_batch": denoiser.stats.max_batch,
        "expected_peak_batch": peak_denoiser_batch(blend_cfg),
        "pair_check_passed": passed,
        "pair_check_problems": problems,
        "errors": [],
    }


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _resolved_config(args)
    project_path = Path(args.project)
    plan, image = _load_plan_and_image(project_path)
    story_count = cfg.story_count or plan.stories_per_scene
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    scenes = []
    all_ok = True
    for scene_index in range(plan.scene_count):
        try:
            entry = generate_scene(plan, scene_index, image, cfg, story_count,
                                   out_dir)
        except StorySceneError as exc:
            entry = {"scene_index": scene_index + 1,
                     "region": plan.regions[scene_index].to_list(),
                     "images": [], "errors": [str(exc)],
                     "pair_check_passed": False}
            print(f"scene {scene_index + 1} failed: {exc}", file=sys.stderr)
        if entry["errors"] or not entry["pair_check_passed"]:
            all_ok = False
        scenes.append(entry)

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "kind": "storyscene-manifest",
        "project": str(project_path),
        "scene_count": plan.scene_count,
        "story_count": story_count,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "blending_enabled": cfg.blending,
        "blend_window": [min(cfg.blend_min_step, cfg.steps),
                         min(cfg.blend_max_step, cfg.steps)],
        "deterministic": cfg.deterministic,
        "scenes": scenes,
        "all_passed": all_ok,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n",
                             encoding="utf-8")
    total = sum(len(entry["images"]) for entry in scenes)
    print(f"{total} images and manifest written to {out_dir}")
    return 0 if all_ok else 1


def cmd_run(args: argparse.Namespace) -> int:
    code = cmd_plan(args)
    if code != 0:
        return code
    args.project = args.out
    return cmd_generate(args)


def cmd_judge(args: argparse.Namespace) -> int:
    cfg = _resolved_config(args)
    plan, _ = _load_plan_and_image(Path(args.project))
    judge = make_vlm_client(cfg.judge)
    warnings: list[str] = []
    coherence, adherence, layout = planner.judge_plan(plan, judge, warnings)
    print(f"narrative_coherence: {coherence:.4f}")
    print(f"theme_adherence: {adherence:.4f}")
    print(f"layout_reasonableness: {layout:.4f}")
    for warning in warnings:
        print(f"warning: {warning}")
    return 0


REPORT_FIELDS = ("story_count", "peak_denoiser_batch", "wall_time_s", "manifest")


def report_rows(manifest_paths: list[str | Path]) -> list[dict]:
    rows = []
    for path in manifest_paths:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorySceneError(f"cannot read manifest {path}: {exc}") from exc
        if payload.get("kind") != "storyscene-manifest":
            raise StorySceneError(f"{path} is not a manifest file")
        scenes = payload.get("scenes", [])
        rows.append({
            "story_count": payload["story_count"],
            "peak_denoiser_batch": max(
                (s.get("peak_denoiser_batch", 0) for s in scenes), default=0),
            "wall_time_s": round(sum(s.get("wall_time_s", 0.0) for s in scenes), 6),
            "manifest": str(path),
        })
    rows.sort(key=lambda row: row["story_count"])
    return rows


def render_report(rows: list[dict]) -> str:
    widths = {name: max(len(name), *(len(str(r[name])) for r in rows))
              for name in REPORT_FIELDS}
    lines = ["  ".join(name.ljust(widths[name]) for name in REPORT_FIELDS)]
    for row in rows:
        lines.append("  ".join(str(row[name]).ljust(widths[name])
                               for name in REPORT_FIELDS))
    return "\n".join(lines)


def report_csv(rows: list[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=REPORT_FIELDS)
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def cmd_report(args: argparse.Namespace) -> int:
    if not args.manifests:
        print("error: at least one manifest is required", file=sys.stderr)
        return 2
    rows = report_rows(args.manifests)
    print(render_report(rows))
    if args.csv:
        Path(args.csv).write_text(report_csv(rows), encoding="utf-8")
        print(f"csv written to {args.csv}")
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--backend", choices=["mock", "http"],
                        help="override every client backend")
    parser.add_argument("--seed", type=int, default=None)


def _add_generate_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--story-count", type=int, default=None,
                        help="stories per scene (default: as planned)")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--blend-min-step", type=int, default=None)
    parser.add_argument("--blend-max-step", type=int, default=None)
    parser.add_argument("--no-blending", action="store_true")
    parser.add_argument("--scene-weight", type=float, default=None)
    parser.add_argument("--mask-mode", choices=["zero", "drop"], default=None)
    parser.add_argument("--invert-mask", action="store_true")
    parser.add_argument("--heads", type=int, default=None)
    parser.add_argument("--max-workers", type=int, default=None)
    parser.add_argument("--non-deterministic", action="store_true",
                        help="allow parallel pair evaluation")


def _add_plan_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--theme")
    parser.add_argument("--global-image", help="manual planning: scene image")
    parser.add_argument("--regions-file",
                        help="manual planning: JSON with regions and sub_prompts")
    parser.add_argument("--scene-count", type=int, default=None)
    parser.add_argument("--stories-per-scene", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storyscene",
        description="Plan scene-consistent stories and generate their images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="theme -> project file")
    _add_plan_flags(p_plan)
    p_plan.add_argument("--out", required=True, help="project JSON path")
    _add_config_flags(p_plan)
    p_plan.set_defaults(func=cmd_plan)

    p_generate = sub.add_parser("generate", help="project file -> images")
    p_generate.add_argument("--project", required=True)
    _add_generate_flags(p_generate)
    _add_config_flags(p_generate)
    p_generate.set_defaults(func=cmd_generate)

    p_run = sub.add_parser("run", help="plan then generate")
    _add_plan_flags(p_run)
    p_run.add_argument("--out", required=True, help="project JSON path")
    _add_generate_flags(p_run)
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_judge = sub.add_parser("judge", help="score a plan on three criteria")
    p_judge.add_argument("--project", required=True)
    _add_config_flags(p_judge)
    p_judge.set_defaults(func=cmd_judge)

    p_report = sub.add_parser("report", help="summarize manifests")
    p_report.add_argument("manifests", nargs="*")
    p_report.add_argument("--csv", help="also write the table as CSV")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StorySceneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
