"""Prompt template assets: loading, slot substitution, and exemplars.

The two system templates ship verbatim as package data; rendering replaces
the named slots and, for the crafting template, rewrites the scene/story
count numerals when non-default counts are requested, leaving every other
byte untouched.
"""

from __future__ import annotations

import re
from importlib import resources

CONCEPTUALIZE_SLOT = "{User Prompt}"
CRAFT_THEME_SLOT = "{}"

# Few-shot exchange shipped with the conceptualizing template.
CONCEPT_EXAMPLE_THEME = "Snowy dreams and falling stars."
CONCEPT_EXAMPLE_REPLY = (
    "A misty forest at dawn, bathed in soft golden light filtering through "
    "ancient trees. Delicate ferns and moss-covered rocks line winding paths, "
    "while a serene stream meanders through, reflecting the sky's pale hues. "
    "Birdsong fills the air, and gentle breezes stir the leaves, creating a "
    "peaceful, dreamlike atmosphere."
)

# Reference reply format for the crafting stage: one bracketed coordinate
# quadruple followed by numbered one-sentence stories.
CRAFT_EXAMPLE_REPLY = (
    "[Location of a local scene]: [18, 8, 506, 499]. "
    "1.A fox explores the meadow, sniffing flowers under the moonlight. "
    "2.The girl dances among the trees, feeling the magic of the night. "
    "3.An owl perches on a branch, watching over the serene landscape. "
    "4.A rabbit hops through the grass, seeking shelter for the night. "
    "5.A deer grazes quietly, enjoying the peaceful evening ......"
)


def load_template(name: str) -> str:
    text = resources.files("storyscene.templates").joinpath(name).read_text("utf-8")
    return text.removesuffix("\n")


def render_conceptualize(theme: str) -> str:
    """Fill the scene-planner system prompt with the user theme."""
    if not theme.strip():
        raise ValueError("theme must be nonempty")
    template = load_template("conceptualize_system.txt")
    return template.replace(CONCEPTUALIZE_SLOT, theme)


def render_craft(theme: str, scene_count: int = 4,
                 stories_per_scene: int = 5) -> str:
    """Fill the story-director system prompt.

    Defaults reproduce the shipped template byte-for-byte outside the theme
    slot; other counts rewrite only the three count numerals.
    """
    if not theme.strip():
        raise ValueError("theme must be nonempty")
    if scene_count < 1 or stories_per_scene < 1:
        raise ValueError("scene and story counts must be >= 1")
    text = load_template("craft_system.txt")
    if (scene_count, stories_per_scene) != (4, 5):
        text = text.replace("Select 4 distinct sub-scenes",
                            f"Select {scene_count} distinct sub-scenes")
        text = text.replace("Create 5 unique stories",
                            f"Create {stories_per_scene} unique stories")
        text = text.replace("(20 stories in total)",
                            f"({scene_count * stories_per_scene} stories in total)")
    return text.replace(CRAFT_THEME_SLOT, theme)


def conceptualize_messages(theme: str) -> list[dict]:
    """System instruction plus the few-shot exchange, ending on the theme."""
    return [
        {"role": "system", "content": render_conceptualize(theme)},
        {"role": "user", "content": CONCEPT_EXAMPLE_THEME},
        {"role": "assistant", "content": CONCEPT_EXAMPLE_REPLY},
        {"role": "user", "content": theme},
    ]


def craft_messages(theme: str, image_data_url: str, scene_count: int = 4,
                   stories_per_scene: int = 5) -> list[dict]:
    """Story-director instruction plus the global scene image."""
    return [
        {"role": "system",
         "content": render_craft(theme, scene_count, stories_per_scene)},
        {"role": "user", "content": [
            {"type": "text", "text": "Here is the global scene image."},
            {"type": "image_url", "image_url": {"url": image_data_url}},
        ]},
    ]


JUDGE_CRITERIA = ("Narrative Coherence", "Theme Adherence", "Layout Reasonableness")

# Published large-scale averages for this three-criterion rubric; recorded
# for context only, never asserted against.
REFERENCE_JUDGE_SCORES = (0.9006, 0.9257, 0.9029)


def judge_messages(theme: str, description: str, regions: list,
                   sub_prompts: list[list[str]]) -> list[dict]:
    lines = [
        "You are a strict reviewer of storyboard plans for visual stories.",
        f"Theme: {theme}",
        f"Global scene description: {description}",
        "Local scenes and their stories:",
    ]
    for index, (region, stories) in enumerate(zip(regions, sub_prompts), start=1):
        lines.append(f"Scene {index} at {list(region)}:")
        lines.extend(f"  {k}. {story}" for k, story in enumerate(stories, start=1))
    lines.append(
        "Score the plan on three criteria, each on a 10-level scale from 0% "
        "to 100%: " + ", ".join(JUDGE_CRITERIA) + ".")
    lines.append('Reply with exactly three percentages separated by slashes, '
                 'for example "80 / 90 / 70".')
    return [{"role": "user", "content": "\n".join(lines)}]


_NUMBER = re.compile(r"(\d+(?:\.\d+)?)\s*%?")


def parse_judge_reply(text: str) -> list[float] | None:
    """Extract three raw rubric percentages, or None when the reply has
    neither three numbers nor a single overall score.

    A single bare number is read as one overall score for all criteria.
    """
    numbers = [float(m.group(1)) for m in _NUMBER.finditer(text)]
    if len(numbers) >= 3:
        return numbers[:3]
    if len(numbers) == 1:
        return numbers * 3
    return None
