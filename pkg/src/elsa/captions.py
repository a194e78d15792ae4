"""Spatial captions: attribute-to-descriptor bands, caption templates,
rephrasing prompts, and zero-shot probe captions.

The deterministic template engine stands in for an external rephrasing
model so corpora are reproducible; the HTTP client contract for a real
rephraser is provided separately (`rephrase_external`).
"""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .roomsim import SpatialAttributes

log = logging.getLogger(__name__)

REPHRASE_INSTRUCTION = (
    "Rephrase as a short English sentence describing the sound "
    "and all the details of its source."
)


class UnknownLabelError(KeyError):
    """Probe label outside the descriptor vocabulary."""


@dataclass(frozen=True)
class DescriptorSet:
    """Natural-language descriptors for one sample; None = attribute in a
    mid band with no descriptor.  room_size is always present."""

    distance: str | None = None  # near | far
    direction: str | None = None  # left | right | front | back
    elevation: str | None = None  # up | down
    room_size: str = "medium"  # small | medium | large
    reverb: str | None = None  # highly reverberant | acoustically dampened

    def __post_init__(self):
        _check(self.distance, (None, "near", "far"), "distance")
        _check(self.direction, (None, "left", "right", "front", "back"), "direction")
        _check(self.elevation, (None, "up", "down"), "elevation")
        _check(self.room_size, ("small", "medium", "large"), "room_size")
        _check(self.reverb, (None, "highly reverberant", "acoustically dampened"), "reverb")


def _check(value, allowed, name):
    if value not in allowed:
        raise ValueError(f"bad {name} descriptor: {value!r}")


@dataclass(frozen=True)
class CaptionRecord:
    original_caption: str
    spatial_caption: str
    descriptors: DescriptorSet
    attributes: SpatialAttributes

    def __post_init__(self):
        if not self.spatial_caption:
            raise ValueError("spatial_caption must be non-empty")


def attrs_to_descriptors(attrs: SpatialAttributes) -> DescriptorSet:
    """Band mapping from numeric attributes to language descriptors.

    Note the rear wedge is |azimuth| >= 145 degrees, symmetric with the
    published left/right/front bands.
    """
    distance = None
    if attrs.distance_m < 1.0:
        distance = "near"
    elif attrs.distance_m > 2.0:
        distance = "far"

    az = attrs.azimuth_deg
    direction = None
    if -125.0 <= az <= -55.0:
        direction = "left"
    elif 55.0 <= az <= 125.0:
        direction = "right"
    elif -35.0 <= az <= 35.0:
        direction = "front"
    elif abs(az) >= 145.0:
        direction = "back"

    elevation = None
    if attrs.elevation_deg > 40.0:
        elevation = "up"
    elif attrs.elevation_deg < -40.0:
        elevation = "down"

    if attrs.floor_area_m2 < 50.0:
        room_size = "small"
    elif attrs.floor_area_m2 > 100.0:
        room_size = "large"
    else:
        room_size = "medium"

    reverb = None
    if attrs.t30_ms > 1000.0:
        reverb = "highly reverberant"
    elif attrs.t30_ms < 200.0:
        reverb = "acoustically dampened"

    return DescriptorSet(distance, direction, elevation, room_size, reverb)


# Slot-style adjectives ("the near upper left") and phrase-style tails
# ("nearby, up above, to the left").  The phrase forms deliberately reuse
# the probe-caption vocabulary so templated training text covers it.
_SLOT_ELEVATION = {"up": "upper", "down": "lower"}
_PHRASE_DISTANCE = {"near": "nearby", "far": "far away"}
_PHRASE_ELEVATION = {"up": "up above", "down": "down below"}
_PHRASE_DIRECTION = {
    "left": "to the left",
    "right": "to the right",
    "front": "out in front",
    "back": "at the back",
}


def _room_phrase(d: DescriptorSet, article: bool = True) -> str:
    words = [d.room_size]
    if d.reverb:
        words.append(d.reverb)
    noun = " ".join(words) + " room"
    if not article:
        return noun
    art = "an" if noun[0] in "aeiou" else "a"
    return f"{art} {noun}"


def _slot_core(d: DescriptorSet) -> str:
    """"the near upper left of" segment; empty if no positional descriptor."""
    parts = [p for p in (d.distance, _SLOT_ELEVATION.get(d.elevation), d.direction) if p]
    if not parts:
        return ""
    return "the " + " ".join(parts) + " of "


def _phrase_tail(d: DescriptorSet) -> str:
    parts = []
    if d.distance:
        parts.append(_PHRASE_DISTANCE[d.distance])
    if d.elevation:
        parts.append(_PHRASE_ELEVATION[d.elevation])
    if d.direction:
        parts.append(_PHRASE_DIRECTION[d.direction])
    return ", ".join(parts)


def _capitalize(text: str) -> str:
    return text[0].upper() + text[1:] if text else text


def _t_in_room(cap, d):
    tail = _phrase_tail(d)
    tail = f" {tail}" if tail else ""
    return f"In {_room_phrase(d)}, the sound of {cap} can be heard{tail}."


def _t_you_hear(cap, d):
    tail = _phrase_tail(d)
    tail = f" {tail}" if tail else ""
    return f"You hear {cap}{tail} in {_room_phrase(d)}."


def _t_heard_at(cap, d):
    core = _slot_core(d)
    where = f"at {core}{_room_phrase(d)}" if core else f"in {_room_phrase(d)}"
    return f"{_capitalize(cap)} is heard {where}."


def _t_somewhere(cap, d):
    tail = _phrase_tail(d)
    tail = f" {tail}" if tail else ""
    return f"Somewhere in {_room_phrase(d)}, {cap} sounds{tail}."


def _t_plays(cap, d):
    tail = _phrase_tail(d)
    tail = f" {tail}" if tail else ""
    return f"{_capitalize(cap)} plays{tail} in {_room_phrase(d)}."


def _t_from_the(cap, d):
    core = _slot_core(d)
    if core:
        return f"From {core}{_room_phrase(d)} comes the sound of {cap}."
    return f"From {_room_phrase(d)} comes the sound of {cap}."


def _t_canonical(cap, d):
    core = _slot_core(d)
    where = f"{core}{_room_phrase(d)}" if core else _room_phrase(d)
    return f"The sound of {cap} is coming from {where}."


def _t_carries(cap, d):
    tail = _phrase_tail(d)
    tail = f" {tail}" if tail else ""
    return f"{_capitalize(_room_phrase(d))} carries the sound of {cap}{tail}."


_TEMPLATES = (
    _t_in_room,
    _t_you_hear,
    _t_heard_at,
    _t_somewhere,
    _t_plays,
    _t_from_the,
    _t_canonical,
    _t_carries,
)


def build_spatial_caption(original_caption: str, d: DescriptorSet, rng: np.random.Generator) -> str:
    """Deterministic surface realization of a spatial caption (seeded choice
    among fixed templates)."""
    if not original_caption:
        raise ValueError("original caption must be non-empty")
    idx = int(rng.integers(len(_TEMPLATES)))
    return _TEMPLATES[idx](original_caption.strip(), d)


# Marker vocabulary used to parse descriptors back out of generated captions.
# Unambiguous for captions whose base text avoids these tokens.
_MARKERS: dict[str, dict[str, frozenset[str]]] = {
    "distance": {"near": frozenset({"near", "nearby"}), "far": frozenset({"far"})},
    "direction": {
        "left": frozenset({"left"}),
        "right": frozenset({"right"}),
        "front": frozenset({"front"}),
        "back": frozenset({"back"}),
    },
    "elevation": {
        "up": frozenset({"up", "upper", "above"}),
        "down": frozenset({"down", "lower", "below"}),
    },
    "room_size": {
        "small": frozenset({"small"}),
        "medium": frozenset({"medium"}),
        "large": frozenset({"large"}),
    },
    "reverb": {
        "highly reverberant": frozenset({"reverberant"}),
        "acoustically dampened": frozenset({"dampened"}),
    },
}


def tokenize(text: str) -> list[str]:
    """Lowercase split on non-alphanumerics (the text encoder's convention)."""
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def parse_descriptors(caption: str) -> DescriptorSet:
    """Recover the DescriptorSet from a generated spatial caption."""
    tokens = set(tokenize(caption))
    found: dict[str, str | None] = {}
    for dim, table in _MARKERS.items():
        hits = [value for value, markers in table.items() if tokens & markers]
        if len(hits) > 1:
            raise ValueError(f"ambiguous {dim} descriptors {hits} in caption: {caption!r}")
        found[dim] = hits[0] if hits else None
    if found["room_size"] is None:
        raise ValueError(f"no room size descriptor in caption: {caption!r}")
    return DescriptorSet(
        distance=found["distance"],
        direction=found["direction"],
        elevation=found["elevation"],
        room_size=found["room_size"],
        reverb=found["reverb"],
    )


def build_llm_prompt(original_caption: str, d: DescriptorSet) -> str:
    """Byte-exact rephrasing prompt with absent slots omitted.

    Uses the raw descriptor words (near/far, up/down, left/right/front/back,
    small/medium/large, reverb phrases) in the fixed sentence frame.
    """
    if not original_caption:
        raise ValueError("original caption must be non-empty")
    inner = [p for p in (d.distance, d.elevation, d.direction) if p]
    size_part = d.room_size + (f" {d.reverb}" if d.reverb else "")
    if inner:
        where = f"the {' '.join(inner)} of a {size_part} room"
    else:
        where = f"a {size_part} room"
    return (
        f"The sound: {original_caption.strip()} is coming from {where}. "
        + REPHRASE_INSTRUCTION
    )


_PROBE_PHRASES = {
    "near": "nearby",
    "far": "far away",
    "left": "the left",
    "right": "the right",
    "front": "the front",
    "back": "the back",
    "up": "above",
    "down": "below",
    "small": "a small room",
    "medium": "a medium room",
    "large": "a large room",
    "highly reverberant": "a highly reverberant room",
    "acoustically dampened": "an acoustically dampened room",
}


def probe_caption(attribute_class: str) -> str:
    """Templated zero-shot probe: "A sound coming from <phrase>"."""
    try:
        phrase = _PROBE_PHRASES[attribute_class]
    except KeyError:
        raise UnknownLabelError(f"no probe phrase for label {attribute_class!r}") from None
    return f"A sound coming from {phrase}"


@dataclass(frozen=True)
class RephraserEndpoint:
    """External rephrasing service: one JSON POST per prompt."""

    url: str
    timeout_s: float = 10.0
    temperature: float = 0.9
    max_tokens: int = 1024


def rephrase_external(
    prompt: str, endpoint: RephraserEndpoint, fallback: str
) -> tuple[str, bool]:
    """POST the prompt; return (text, used_fallback).

    Any transport or format failure is non-fatal: the deterministic
    template caption passed as `fallback` is returned instead.
    """
    body = json.dumps(
        {
            "prompt": prompt,
            "temperature": endpoint.temperature,
            "max_tokens": endpoint.max_tokens,
        }
    ).encode("utf-8")
    req = urllib.request.Request(
        endpoint.url, data=body, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout_s) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        text = payload["text"]
        if not isinstance(text, str) or not text:
            raise ValueError("empty or non-string completion")
        return text, False
    except (urllib.error.URLError, TimeoutError, ValueError, KeyError, OSError) as exc:
        log.warning("rephraser fallback (%s): %s", endpoint.url, exc)
        return fallback, True
