"""Scene planning: conceptualize a global scene from a theme, visualize it,
carve it into local scenes with story sub-prompts, and judge the result.

The heavy lifting is delegated to a vision-language client and an image
client; this module owns prompt flow, reply parsing, coordinate snapping,
cropping, and the project-file schema.
"""

from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from PIL import Image

from . import prompts
from .clients import ChatTranscript, png_data_url
from .errors import (ConfigError, JudgingError, PlanningError, PlanParseError,
                     StorySceneError, TransportError)

GLOBAL_IMAGE_SIZE = 1024
MIN_REGION_EXTENT = 64
PROJECT_SCHEMA_VERSION = 1

_ARTICLES = {"a", "an", "the"}
_WORD_LIMIT = 50


@dataclass(frozen=True)
class SceneRegion:
    """Axis-aligned crop rectangle in pixel coordinates, corners inclusive-
    exclusive like a slice: x1 <= x < x2, y1 <= y < y2."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise ValueError(f"region {self.to_list()} has no area")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def to_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    def within(self, width: int, height: int) -> bool:
        return 0 <= self.x1 and self.x2 <= width and 0 <= self.y1 and self.y2 <= height


@dataclass
class StoryPlan:
    """Everything one theme plans out to: the global scene, its local scene
    rectangles, and per-scene story sub-prompts with tagged subjects."""

    theme: str
    global_description: str
    global_image_path: str
    global_image_size: tuple[int, int]
    regions: list[SceneRegion]
    sub_prompts: list[list[str]]
    subject_indices: list[list[int]]
    warnings: list[str] = field(default_factory=list)
    transcripts: list[ChatTranscript] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def scene_count(self) -> int:
        return len(self.regions)

    @property
    def stories_per_scene(self) -> int:
        return len(self.sub_prompts[0]) if self.sub_prompts else 0

    def validate(self) -> None:
        if not self.regions:
            raise ValueError("plan has no regions")
        if len(self.sub_prompts) != len(self.regions):
            raise ValueError("need one sub-prompt list per region")
        if len(self.subject_indices) != len(self.regions):
            raise ValueError("need one subject-index list per region")
        n = self.stories_per_scene
        if n < 1:
            raise ValueError("each scene needs at least one story")
        width, height = self.global_image_size
        for region in self.regions:
            if not region.within(width, height):
                raise ValueError(f"region {region.to_list()} exceeds the image")
        for scene, (stories, indices) in enumerate(
                zip(self.sub_prompts, self.subject_indices)):
            if len(stories) != n or len(indices) != n:
                raise ValueError(f"scene {scene} does not have {n} stories")
            for story, index in zip(stories, indices):
                if not 0 <= index < len(story.split()):
                    raise ValueError(
                        f"subject index {index} out of range for {story!r}")


def snap_region(raw, width: int, height: int) -> SceneRegion:
    """Clamp a raw coordinate quadruple to the nearest valid rectangle.

    Each coordinate is clamped into bounds; an axis left without extent is
    re-expanded to ``MIN_REGION_EXTENT`` pixels (or the full axis if the
    image is smaller) centered on the clamped midpoint and shifted back
    inside the image. Idempotent: a valid region passes through unchanged.
    """
    x1, y1, x2, y2 = (int(round(float(v))) for v in raw)

    def snap_axis(lo: int, hi: int, bound: int) -> tuple[int, int]:
        lo = min(max(lo, 0), bound)
        hi = min(max(hi, 0), bound)
        if lo < hi:
            return lo, hi
        extent = min(MIN_REGION_EXTENT, bound)
        center = (lo + hi) // 2
        lo = center - extent // 2
        hi = lo + extent
        if lo < 0:
            return 0, extent
        if hi > bound:
            return bound - extent, bound
        return lo, hi

    x1, x2 = snap_axis(x1, x2, width)
    y1, y2 = snap_axis(y1, y2, height)
    return SceneRegion(x1, y1, x2, y2)


def tag_subject_index(prompt: str) -> int:
    """Index of the grammatical subject token: the token after a leading
    article, else the first token."""
    tokens = prompt.split()
    if not tokens:
        raise ValueError("cannot tag an empty prompt")
    first = tokens[0].strip(".,!?;:'\"").lower()
    if first in _ARTICLES and len(tokens) > 1:
        return 1
    return 0


_QUAD = re.compile(
    r"\[?\s*(-?\d{1,4})\s*,\s*(-?\d{1,4})\s*,\s*(-?\d{1,4})\s*,\s*(-?\d{1,4})\s*\]?")
_STORY_MARKER = re.compile(r"(?<![\[\d.,])(\d{1,3})\s*[.)]\s*")


def _stories_in_block(block: str) -> list[str]:
    markers = list(_STORY_MARKER.finditer(block))
    stories = []
    for index, marker in enumerate(markers):
        end = markers[index + 1].start() if index + 1 < len(markers) else len(block)
        text = block[marker.end():end].strip()
        text = re.sub(r"\s*\.{2,}$", ".", text)
        if len(text) >= 3:
            stories.append(text)
    return stories


def parse_craft_reply(text: str, scene_count: int, stories_per_scene: int,
                      ) -> list[tuple[tuple[int, int, int, int], list[str]]]:
    """Pull (coordinates, stories) blocks out of a story-director reply.

    Coordinates are any four comma-separated integers, bracketed or not;
    the numbered sentences that follow each quadruple (until the next one)
    are that scene's stories. Raises ``PlanParseError`` when fewer than the
    requested scenes or stories can be recovered.
    """
    quads = list(_QUAD.finditer(text))
    if len(quads) < scene_count:
        raise PlanParseError(
            f"found {len(quads)} coordinate quadruples, need {scene_count}",
            transcript=text, stage="craft")
    quads = quads[:scene_count]
    blocks = []
    for index, match in enumerate(quads):
        end = quads[index + 1].start() if index + 1 < len(quads) else len(text)
        coords = tuple(int(match.group(g)) for g in range(1, 5))
        stories = _stories_in_block(text[match.end():end])
        if len(stories) < stories_per_scene:
            raise PlanParseError(
                f"scene {index + 1} has {len(stories)} stories, need "
                f"{stories_per_scene}", transcript=text, stage="craft")
        blocks.append((coords, stories[:stories_per_scene]))
    return blocks


def conceptualize(theme: str, vlm) -> str:
    """One chat turn from theme to global scene description.

    Replies longer than the 50-word budget trigger one condensing re-prompt
    and are truncated afterwards if still too long.
    """
    if not theme.strip():
        raise PlanningError("theme must be nonempty", stage="conceptualize")
    messages = prompts.conceptualize_messages(theme)
    try:
        result = vlm.chat(messages)
    except (TransportError, ConfigError) as exc:
        raise PlanningError(f"scene description failed: {exc}",
                            stage="conceptualize") from exc
    description = result.text.strip()
    if not description:
        raise PlanningError("model returned an empty scene description",
                            stage="conceptualize")
    if len(description.split()) > _WORD_LIMIT:
        retry = [*messages,
                 {"role": "assistant", "content": result.text},
                 {"role": "user",
                  "content": f"Please condense that description to at most "
                             f"{_WORD_LIMIT} words."}]
        try:
            description = vlm.chat(retry).text.strip()
        except (TransportError, ConfigError) as exc:
            raise PlanningError(f"scene description failed: {exc}",
                                stage="conceptualize") from exc
        if not description:
            raise PlanningError("model returned an empty scene description",
                                stage="conceptualize")
        if len(description.split()) > _WORD_LIMIT:
            description = " ".join(description.split()[:_WORD_LIMIT])
    return description


def visualize(description: str, t2i,
              warnings: list[str] | None = None) -> Image.Image:
    """Turn the description into the global scene image.

    Output is guaranteed to be RGB at ``GLOBAL_IMAGE_SIZE``; anything else
    coming back from the client is resized with a warning record.
    """
    if not description.strip():
        raise PlanningError("description must be nonempty", stage="visualize")
    try:
        png = t2i.generate_image(description)
    except (TransportError, ConfigError) as exc:
        raise PlanningError(f"global image generation failed: {exc}",
                            stage="visualize") from exc
    image = Image.open(io.BytesIO(png)).convert("RGB")
    expected = (GLOBAL_IMAGE_SIZE, GLOBAL_IMAGE_SIZE)
    if image.size != expected:
        if warnings is not None:
            warnings.append(
                f"global image came back {image.size[0]}x{image.size[1]}; "
                f"resized to {expected[0]}x{expected[1]}")
        image = image.resize(expected, Image.NEAREST)
    return image


_REPROMPT_NOTE = (
    "Your previous reply could not be parsed. Answer again following the "
    "Output Format exactly: for every sub-scene give coordinates as "
    "[x1, y1, x2, y2] followed by its numbered stories.")


def craft(global_image: Image.Image, theme: str, vlm, scene_count: int = 4,
          stories_per_scene: int = 5, warnings: list[str] | None = None,
          ) -> tuple[list[SceneRegion], list[list[str]], list[list[int]]]:
    """Ask the story director for local scenes and stories, then snap and tag.

    One automatic re-prompt is attempted when the reply does not parse;
    after that the parse error (with the raw transcript) propagates.
    """
    messages = prompts.craft_messages(theme, png_data_url(global_image),
                                      scene_count, stories_per_scene)
    try:
        result = vlm.chat(messages)
    except (TransportError, ConfigError) as exc:
        raise PlanningError(f"scene crafting failed: {exc}", stage="craft") from exc
    try:
        blocks = parse_craft_reply(result.text, scene_count, stories_per_scene)
    except PlanParseError:
        retry = [*messages,
                 {"role": "assistant", "content": result.text},
                 {"role": "user", "content": _REPROMPT_NOTE}]
        try:
            second = vlm.chat(retry)
        except (TransportError, ConfigError) as exc:
            raise PlanningError(f"scene crafting failed: {exc}",
                                stage="craft") from exc
        blocks = parse_craft_reply(second.text, scene_count, stories_per_scene)
        if warnings is not None:
            warnings.append("craft reply required one re-prompt before parsing")

    width, height = global_image.size
    regions: list[SceneRegion] = []
    sub_prompts: list[list[str]] = []
    subject_indices: list[list[int]] = []
    for coords, stories in blocks:
        region = snap_region(coords, width, height)
        if warnings is not None and region.to_list() != list(coords):
            warnings.append(f"region {list(coords)} snapped to {region.to_list()}")
        regions.append(region)
        sub_prompts.append(stories)
        subject_indices.append([tag_subject_index(story) for story in stories])
    return regions, sub_prompts, subject_indices


def crop(global_image: Image.Image, regions: list[SceneRegion],
         ) -> list[Image.Image]:
    """Pixel-exact crops, one per region, order preserved."""
    width, height = global_image.size
    crops = []
    for region in regions:
        if not region.within(width, height):
            raise StorySceneError(
                f"region {region.to_list()} escapes a {width}x{height} image")
        crops.append(global_image.crop((region.x1, region.y1,
                                        region.x2, region.y2)))
    return crops


def region_overlap_statistic(regions: list[SceneRegion]) -> float:
    """Largest pairwise overlap, as a fraction of the smaller region."""
    worst = 0.0
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            dx = min(a.x2, b.x2) - max(a.x1, b.x1)
            dy = min(a.y2, b.y2) - max(a.y1, b.y1)
            if dx > 0 and dy > 0:
                smaller = min(a.width * a.height, b.width * b.height)
                worst = max(worst, (dx * dy) / smaller)
    return worst


def judge_plan(plan: StoryPlan, judge,
               warnings: list[str] | None = None) -> tuple[float, float, float]:
    """Score the plan's narrative coherence, theme adherence, and layout
    reasonableness, each normalized to [0, 1]."""
    plan.validate()
    messages = prompts.judge_messages(
        plan.theme, plan.global_description,
        [r.to_list() for r in plan.regions], plan.sub_prompts)
    try:
        result = judge.chat(messages)
    except (TransportError, ConfigError) as exc:
        raise PlanningError(f"plan judging failed: {exc}", stage="judge") from exc
    raw = prompts.parse_judge_reply(result.text)
    if raw is None:
        retry = [*messages,
                 {"role": "assistant", "content": result.text},
                 {"role": "user",
                  "content": 'Reply with exactly three percentages separated '
                             'by slashes, for example "80 / 90 / 70".'}]
        try:
            second = judge.chat(retry)
        except (TransportError, ConfigError) as exc:
            raise PlanningError(f"plan judging failed: {exc}",
                                stage="judge") from exc
        raw = prompts.parse_judge_reply(second.text)
        if raw is None:
            raise JudgingError(
                f"judge reply stayed unparseable: {second.text!r}",
                stage="judge")
    scores = []
    for criterion, value in zip(prompts.JUDGE_CRITERIA, raw):
        if (value < 0.0 or value > 100.0) and warnings is not None:
            warnings.append(f"{criterion} score {value} clamped into [0, 100]")
        scores.append(min(max(value / 100.0, 0.0), 1.0))
    return scores[0], scores[1], scores[2]


def plan_story(theme: str, vlm, t2i, scene_count: int = 4,
               stories_per_scene: int = 5, metadata: dict | None = None,
               ) -> tuple[StoryPlan, Image.Image]:
    """Run the three planning stages end to end for one theme."""
    warnings: list[str] = []
    start = len(vlm.transcripts)
    description = conceptualize(theme, vlm)
    image = visualize(description, t2i, warnings)
    regions, sub_prompts, subject_indices = craft(
        image, theme, vlm, scene_count, stories_per_scene, warnings)
    plan = StoryPlan(
        theme=theme, global_description=description, global_image_path="",
        global_image_size=image.size, regions=regions, sub_prompts=sub_prompts,
        subject_indices=subject_indices, warnings=warnings,
        transcripts=list(vlm.transcripts[start:]),
        metadata={"planner": "vlm",
                  "max_region_overlap": region_overlap_statistic(regions),
                  **(metadata or {})})
    plan.validate()
    return plan, image


def manual_plan(theme: str, global_image: Image.Image, entries: dict,
                metadata: dict | None = None) -> StoryPlan:
    """Build a plan from user-supplied regions (and stories), skipping the
    crafting stage; coordinates still go through snapping."""
    if "regions" not in entries or "sub_prompts" not in entries:
        raise PlanningError(
            "a manual plan file needs 'regions' and 'sub_prompts'",
            stage="manual")
    warnings: list[str] = []
    width, height = global_image.size
    regions = []
    for raw in entries["regions"]:
        region = snap_region(raw, width, height)
        if region.to_list() != [int(v) for v in raw]:
            warnings.append(f"region {list(raw)} snapped to {region.to_list()}")
        regions.append(region)
    sub_prompts = [list(stories) for stories in entries["sub_prompts"]]
    subject_indices = entries.get("subject_indices") or [
        [tag_subject_index(story) for story in stories]
        for stories in sub_prompts]
    plan = StoryPlan(
        theme=theme, global_description=entries.get("description", theme),
        global_image_path="", global_image_size=global_image.size,
        regions=regions, sub_prompts=sub_prompts,
        subject_indices=[list(ix) for ix in subject_indices],
        warnings=warnings,
        metadata={"planner": "manual",
                  "max_region_overlap": region_overlap_statistic(regions),
                  **(metadata or {})})
    plan.validate()
    return plan


def save_project(plan: StoryPlan, path: str | Path) -> None:
    """Write the plan as a versioned, key-sorted JSON document."""
    payload = {
        "schema_version": PROJECT_SCHEMA_VERSION,
        "kind": "storyscene-project",
        "theme": plan.theme,
        "global_description": plan.global_description,
        "global_image": {
            "path": plan.global_image_path,
            "width": plan.global_image_size[0],
            "height": plan.global_image_size[1],
        },
        "regions": [region.to_list() for region in plan.regions],
        "sub_prompts": plan.sub_prompts,
        "subject_indices": plan.subject_indices,
        "warnings": plan.warnings,
        "transcripts": [t.to_dict() for t in plan.transcripts],
        "metadata": plan.metadata,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_project(path: str | Path) -> StoryPlan:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("kind") != "storyscene-project":
        raise ConfigError(f"{path} is not a storyscene project file")
    version = payload.get("schema_version")
    if version != PROJECT_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported project schema version {version!r}; "
            f"expected {PROJECT_SCHEMA_VERSION}")
    image_info = payload["global_image"]
    plan = StoryPlan(
        theme=payload["theme"],
        global_description=payload["global_description"],
        global_image_path=image_info.get("path", ""),
        global_image_size=(image_info["width"], image_info["height"]),
        regions=[SceneRegion(*quad) for quad in payload["regions"]],
        sub_prompts=[list(s) for s in payload["sub_prompts"]],
        subject_indices=[list(ix) for ix in payload["subject_indices"]],
        warnings=list(payload.get("warnings", [])),
        transcripts=[ChatTranscript.from_dict(t)
                     for t in payload.get("transcripts", [])],
        metadata=dict(payload.get("metadata", {})))
    plan.validate()
    return plan


def load_theme_corpus() -> list[str]:
    """The fixed offline theme corpus shipped with the package."""
    text = resources.files("storyscene.assets").joinpath("themes.json").read_text("utf-8")
    return json.loads(text)["themes"]


def generate_themes(vlm, count: int = 12) -> list[str]:
    """Ask the chat client for fresh story themes, one per numbered line."""
    if count < 1:
        raise ValueError("count must be >= 1")
    result = vlm.chat([{
        "role": "user",
        "content": f"Generate {count} distinct story themes across different "
                   "domains, one per line, each numbered like '1. <theme>'.",
    }])
    themes = []
    for line in result.text.splitlines():
        match = re.match(r"\s*\d+\s*[.)]\s*(.+)", line)
        if match:
            themes.append(match.group(1).strip())
    if not themes:
        raise PlanParseError("no themes found in reply", transcript=result.text,
                             stage="themes")
    return themes[:count]
