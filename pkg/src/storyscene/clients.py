"""Model-service clients: OpenAI-style chat and image generation over HTTP,
plus fully deterministic in-process mocks that every test runs against.

Both client families record a transcript per call so planning runs can be
persisted and replayed; the HTTP clients additionally keep a retry log.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass

import httpx
import numpy as np
from PIL import Image

from . import prompts
from .errors import ConfigError, TransportError


@dataclass(frozen=True)
class ClientConfig:
    backend: str = "mock"
    base_url: str = ""
    model: str = "mock-model"
    api_key_env: str = "STORYSCENE_API_KEY"
    timeout_s: float = 30.0
    max_retries: int = 2
    temperature: float = 0.0
    backoff_s: float = 0.5
    chat_path: str = "/chat/completions"
    images_path: str = "/images/generations"
    image_size: int = 1024

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"unknown backend {self.backend!r}")


@dataclass
class ChatTranscript:
    """One chat exchange, assistant reply included, plus usage metadata."""

    messages: list[dict]
    usage: dict | None = None

    def __post_init__(self):
        self.validate_roles()

    def validate_roles(self) -> None:
        roles = [m.get("role") for m in self.messages]
        if not roles:
            raise ValueError("transcript has no messages")
        body = roles[1:] if roles[0] == "system" else roles
        for position, role in enumerate(body):
            if role not in ("user", "assistant"):
                raise ValueError(f"unexpected role {role!r}")
            if position > 0 and role == body[position - 1]:
                raise ValueError("user/assistant turns must alternate")

    def to_dict(self) -> dict:
        return {"messages": self.messages, "usage": self.usage}

    @classmethod
    def from_dict(cls, payload: dict) -> "ChatTranscript":
        return cls(messages=payload["messages"], usage=payload.get("usage"))


@dataclass
class ChatResult:
    text: str
    transcript: ChatTranscript


def messages_key(messages: list[dict]) -> str:
    """Stable key over the textual content of a message list."""
    digest = hashlib.sha256()
    for message in messages:
        digest.update(message.get("role", "").encode())
        digest.update(b"\x00")
        digest.update(_message_text(message).encode())
        digest.update(b"\x01")
    return digest.hexdigest()


def _message_text(message: dict) -> str:
    content = message.get("content", "")
    if isinstance(content, str):
        return content
    parts = []
    for part in content:
        if isinstance(part, dict) and part.get("type") == "text":
            parts.append(part.get("text", ""))
    return "\n".join(parts)


def _all_text(messages: list[dict]) -> str:
    return "\n".join(_message_text(m) for m in messages)


def png_bytes_from_array(pixels: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buffer, format="PNG")
    return buffer.getvalue()


def png_data_url(image: Image.Image) -> str:
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    encoded = base64.b64encode(buffer.getvalue()).decode("ascii")
    return f"data:image/png;base64,{encoded}"


def _text_seed(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"),
                                          digest_size=8).digest(), "big")


def procedural_image(seed_text: str, size: int = 1024) -> np.ndarray:
    """Smooth deterministic RGB field seeded by a text hash."""
    rng = np.random.default_rng(_text_seed(seed_text))
    axis = np.linspace(0.0, 1.0, size)
    grid_y, grid_x = np.meshgrid(axis, axis, indexing="ij")
    channels = []
    for _ in range(3):
        fx, fy, phase_x, phase_y = rng.uniform(0.5, 4.0, size=4)
        wave = (np.sin(2 * math.pi * (fx * grid_x + phase_x))
                + np.cos(2 * math.pi * (fy * grid_y + phase_y))
                + rng.uniform(-0.5, 0.5) * (grid_x + grid_y))
        low, high = wave.min(), wave.max()
        channels.append((wave - low) / max(high - low, 1e-9))
    stacked = np.stack(channels, axis=-1)
    return np.clip(np.rint(stacked * 255.0), 0, 255).astype(np.uint8)


class _RetryingHttp:
    """Shared POST-with-retries machinery for the HTTP clients."""

    def __init__(self, cfg: ClientConfig, transport: httpx.BaseTransport | None = None):
        if cfg.backend != "http":
            raise ConfigError("HTTP client constructed with a non-http config")
        if not cfg.base_url:
            raise ConfigError("base_url is required for the http backend")
        api_key = os.environ.get(cfg.api_key_env, "")
        if not api_key:
            raise ConfigError(
                f"environment variable {cfg.api_key_env} is not set; refusing "
                "to start a live client")
        self.cfg = cfg
        self.retry_log: list[str] = []
        self.transcripts: list[ChatTranscript] = []
        self._lock = threading.Lock()
        self._client = httpx.Client(
            timeout=cfg.timeout_s, transport=transport,
            headers={"Authorization": f"Bearer {api_key}"})

    def post_json(self, path: str, payload: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + path
        last_error = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            try:
                response = self._client.post(url, json=payload)
            except httpx.TimeoutException as exc:
                last_error = f"timeout: {exc}"
            except httpx.TransportError as exc:
                last_error = f"transport: {exc}"
            else:
                if response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}"
                elif response.status_code >= 400:
                    raise ConfigError(
                        f"request rejected with HTTP {response.status_code}: "
                        f"{response.text[:500]}")
                else:
                    try:
                        return response.json()
                    except (json.JSONDecodeError, ValueError):
                        raise TransportError("reply is not valid JSON",
                                             body=response.text)
            if attempt < self.cfg.max_retries:
                with self._lock:
                    self.retry_log.append(last_error)
                time.sleep(self.cfg.backoff_s * (2 ** attempt))
        raise TransportError(
            f"request failed after {self.cfg.max_retries} retries: {last_error}")

    def record(self, transcript: ChatTranscript) -> None:
        with self._lock:
            self.transcripts.append(transcript)


class HttpVlmClient(_RetryingHttp):
    """OpenAI-compatible chat-completions client."""

    def chat(self, messages: list[dict]) -> ChatResult:
        if not messages:
            raise ValueError("messages must be nonempty")
        payload = {"model": self.cfg.model, "messages": messages,
                   "temperature": self.cfg.temperature}
        reply = self.post_json(self.cfg.chat_path, payload)
        try:
            text = reply["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TransportError("reply lacks choices[0].message.content",
                                 body=json.dumps(reply))
        transcript = ChatTranscript(
            messages=[*messages, {"role": "assistant", "content": text}],
            usage=reply.get("usage"))
        self.record(transcript)
        return ChatResult(text=text, transcript=transcript)


class HttpT2iClient(_RetryingHttp):
    """Image-generation client returning raw PNG bytes."""

    def generate_image(self, prompt: str) -> bytes:
        if not prompt.strip():
            raise ValueError("prompt must be nonempty")
        size = self.cfg.image_size
        payload = {"model": self.cfg.model, "prompt": prompt,
                   "size": f"{size}x{size}", "response_format": "b64_json"}
        reply = self.post_json(self.cfg.images_path, payload)
        try:
            encoded = reply["data"][0]["b64_json"]
        except (KeyError, IndexError, TypeError):
            raise TransportError("reply lacks data[0].b64_json",
                                 body=json.dumps(reply))
        self.record(ChatTranscript(messages=[
            {"role": "user", "content": prompt},
            {"role": "assistant", "content": f"<{size}x{size} image>"},
        ]))
        return base64.b64decode(encoded)


_SUBJECTS = ["fox", "girl", "owl", "rabbit", "deer", "boy", "wolf", "heron",
             "cat", "traveler"]
_VERBS = ["explores", "crosses", "watches", "follows", "discovers", "guards",
          "sketches", "chases", "studies", "remembers"]
_PLACES = ["the meadow", "the stream", "the old bridge", "the lantern path",
           "the quiet grove", "the stone stairs", "the market square",
           "the foggy shore", "the tower garden", "the snowy field"]
_TAILS = ["at dawn", "under the moonlight", "before the storm",
          "as lanterns glow", "in gentle rain", "while stars fall", "at dusk",
          "in the morning mist"]
_SETTINGS = ["A quiet harbor town at dusk", "A terraced mountain village",
             "An overgrown observatory garden", "A rain-washed market street",
             "A frozen river valley", "A cliffside lighthouse meadow"]
_DETAILS = [
    "warm lamplight spilling over cobblestones and slate rooftops",
    "long shadows folding across mossy stone walls and wooden stalls",
    "paper lanterns swaying over narrow stairways and still water",
    "low fog threading between pines and weathered fences",
    "amber light catching on ropes, sails, and drifting leaves",
    "snow settling on railings, archways, and distant terraces",
]
_MOODS = ["calm and expectant", "soft and dreamlike", "bright yet hushed",
          "weathered and warm", "cool and luminous"]


class MockVlmClient:
    """Deterministic chat stand-in.

    Resolution order: exact keyed replies, then a scripted FIFO queue, then
    built-in planner/judge heuristics keyed off the rendered prompt text.
    """

    def __init__(self, keyed: dict[str, str] | None = None,
                 scripted: list[str] | None = None):
        self.keyed = dict(keyed or {})
        self.scripted = list(scripted or [])
        self.transcripts: list[ChatTranscript] = []
        self.retry_log: list[str] = []
        self._lock = threading.Lock()

    def chat(self, messages: list[dict]) -> ChatResult:
        if not messages:
            raise ValueError("messages must be nonempty")
        key = messages_key(messages)
        if key in self.keyed:
            text = self.keyed[key]
        elif self.scripted:
            text = self.scripted.pop(0)
        else:
            text = self._heuristic_reply(_all_text(messages))
        transcript = ChatTranscript(
            messages=[*messages, {"role": "assistant", "content": text}],
            usage={"mock": True})
        with self._lock:
            self.transcripts.append(transcript)
        return ChatResult(text=text, transcript=transcript)

    def _heuristic_reply(self, text: str) -> str:
        if "scene planner" in text:
            return self._conceptualize_reply(text)
        if "story director" in text:
            return self._craft_reply(text)
        if "Narrative Coherence" in text:
            return "90 / 90 / 90"
        if "story themes" in text:
            return "\n".join(f"{i}. {theme}" for i, theme in enumerate(
                ["Snowy dreams and falling stars",
                 "Lanterns over the flooded valley",
                 "The clockmaker's last apprentice"], start=1))
        return "Understood."

    def _conceptualize_reply(self, text: str) -> str:
        if prompts.CONCEPT_EXAMPLE_THEME.rstrip(".").lower() in text.lower():
            return prompts.CONCEPT_EXAMPLE_REPLY
        match = re.search(r'Theme: "(.*?)\."', text, re.DOTALL)
        theme = match.group(1) if match else text
        seed = _text_seed(theme)
        setting = _SETTINGS[seed % len(_SETTINGS)]
        detail = _DETAILS[(seed // 7) % len(_DETAILS)]
        mood = _MOODS[(seed // 49) % len(_MOODS)]
        return (f"{setting}, with {detail}. The air feels {mood}, and every "
                "path seems to wait for a story to begin.")

    def _craft_reply(self, text: str) -> str:
        scene_match = re.search(r"Select (\d+) distinct sub-scenes", text)
        story_match = re.search(r"Create (\d+) unique stories", text)
        theme_match = re.search(r'for the theme "(.*?)" while', text, re.DOTALL)
        scene_count = int(scene_match.group(1)) if scene_match else 4
        stories_per_scene = int(story_match.group(1)) if story_match else 5
        theme = theme_match.group(1) if theme_match else ""
        offset = _text_seed(theme) % len(_SUBJECTS)
        blocks = []
        for scene in range(scene_count):
            region = self._mock_region(scene, scene_count)
            if scene == 0 and (scene_count, stories_per_scene) == (4, 5):
                blocks.append(prompts.CRAFT_EXAMPLE_REPLY)
                continue
            stories = []
            for story in range(stories_per_scene):
                pick = offset + scene * stories_per_scene + story
                subject = _SUBJECTS[pick % len(_SUBJECTS)]
                verb = _VERBS[(pick // 3 + scene) % len(_VERBS)]
                place = _PLACES[(pick + story) % len(_PLACES)]
                tail = _TAILS[(pick // 2) % len(_TAILS)]
                article = "An" if subject[0] in "aeiou" else "A"
                stories.append(
                    f"{story + 1}.{article} {subject} {verb} {place} {tail}.")
            blocks.append(f"[Location of a local scene]: {region}. "
                          + " ".join(stories))
        return "\n".join(blocks)

    @staticmethod
    def _mock_region(index: int, scene_count: int, size: int = 1024) -> str:
        cols = max(1, math.isqrt(scene_count - 1) + 1)
        rows = (scene_count + cols - 1) // cols
        gx, gy = index % cols, index // cols
        x1, x2 = gx * size // cols, (gx + 1) * size // cols
        y1, y2 = gy * size // rows, (gy + 1) * size // rows
        return f"[{x1}, {y1}, {x2}, {y2}]"


class MockT2iClient:
    """Deterministic procedural image generator."""

    def __init__(self, size: int = 1024):
        self.size = size
        self.transcripts: list[ChatTranscript] = []
        self.retry_log: list[str] = []

    def generate_image(self, prompt: str) -> bytes:
        if not prompt.strip():
            raise ValueError("prompt must be nonempty")
        pixels = procedural_image(prompt, self.size)
        self.transcripts.append(ChatTranscript(messages=[
            {"role": "user", "content": prompt},
            {"role": "assistant", "content": f"<{self.size}x{self.size} image>"},
        ]))
        return png_bytes_from_array(pixels)


def make_vlm_client(cfg: ClientConfig,
                    transport: httpx.BaseTransport | None = None):
    if cfg.backend == "mock":
        return MockVlmClient()
    return HttpVlmClient(cfg, transport)


def make_t2i_client(cfg: ClientConfig,
                    transport: httpx.BaseTransport | None = None):
    if cfg.backend == "mock":
        return MockT2iClient(cfg.image_size)
    return HttpT2iClient(cfg, transport)
