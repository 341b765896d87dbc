"""The deterministic mock world.

A mock face is an image split into nine equal horizontal bands, one per
attribute kind in enumeration order, each painted the solid color
registered for one change token of that kind (or a designated
"corrupted" gray). Band states are decoded by sampling band centers, so
faces survive bilinear resizing.

The mock editor honors only the first detected attribute of an
instruction and degrades resolution by exactly 2/3 per successful edit,
refusing to edit at all below a width gate. The mock super-resolver
doubles dimensions up to a cap. Together these reproduce, at desk
scale, the failure mode chained editing exists to fix: single-shot
multi-attribute edits neglect everything after the first attribute, and
long chains without super-resolution degrade until edits stop landing.
"""

from __future__ import annotations

import random
from collections.abc import Mapping

import numpy as np

from ..decomposer import split_attributed_fragments
from ..errors import BothOrNeitherInput, NotSyntheticFace, UnsplittableInstruction
from ..imaging import FaceImage, RegionMask, resize
from ..instructions import (
    AttributeEdit,
    detect_attributes,
    detect_state_pairs,
    find_change_token,
)
from ..taxonomy import ALL_KINDS, AttributeKind, registered_pairs, vocabulary_for

# Degradation parameters. Chosen so that, starting from 512, a chain of
# four edits without super-resolution goes 512 -> 341 -> 227 -> 151 and
# the fourth edit falls under the gate.
W_MIN = 192
DOWNSCALE_NUM, DOWNSCALE_DEN = 2, 3
S_MAX = 512

CORRUPTED = "corrupted"
CORRUPTED_COLOR = (128, 128, 128)

STATE_COLORS: dict[tuple[AttributeKind, str], tuple[int, int, int]] = {
    (AttributeKind.HAIR, "red"): (200, 30, 30),
    (AttributeKind.HAIR, "black"): (25, 25, 25),
    (AttributeKind.HAIR, "gray"): (160, 160, 160),
    (AttributeKind.HAIR, "blonde"): (230, 200, 90),
    (AttributeKind.HAIR, "brown"): (120, 70, 30),
    (AttributeKind.SKIN, "white"): (245, 230, 215),
    (AttributeKind.SKIN, "pink"): (240, 170, 180),
    (AttributeKind.SKIN, "brown"): (150, 100, 60),
    (AttributeKind.SKIN, "olive"): (170, 150, 100),
    (AttributeKind.SKIN, "tan"): (210, 170, 120),
    (AttributeKind.EYES, "blue"): (40, 80, 200),
    (AttributeKind.EYES, "black"): (15, 15, 35),
    (AttributeKind.AGE, "younger"): (90, 200, 160),
    (AttributeKind.AGE, "older"): (110, 60, 130),
    (AttributeKind.GENDER, "male"): (70, 120, 220),
    (AttributeKind.GENDER, "female"): (220, 120, 170),
    (AttributeKind.ANIME, "real"): (90, 90, 110),
    (AttributeKind.ANIME, "anime"): (255, 140, 200),
    (AttributeKind.BEARD, "add"): (80, 50, 20),
    (AttributeKind.BEARD, "remove"): (235, 220, 200),
    (AttributeKind.GLASSES, "add"): (30, 30, 90),
    (AttributeKind.GLASSES, "remove"): (225, 225, 235),
    (AttributeKind.EXPRESSION, "happy"): (250, 220, 60),
    (AttributeKind.EXPRESSION, "angry"): (190, 45, 45),
    (AttributeKind.EXPRESSION, "sad"): (70, 90, 160),
    (AttributeKind.EXPRESSION, "fear"): (140, 120, 200),
    (AttributeKind.EXPRESSION, "disgust"): (110, 160, 80),
}

# Noun used for each kind in captions; must be recoverable by the lexicon.
KIND_NOUNS: dict[AttributeKind, str] = {
    AttributeKind.HAIR: "hair",
    AttributeKind.SKIN: "skin",
    AttributeKind.EYES: "eyes",
    AttributeKind.AGE: "age",
    AttributeKind.GENDER: "gender",
    AttributeKind.ANIME: "style",
    AttributeKind.BEARD: "beard",
    AttributeKind.GLASSES: "glasses",
    AttributeKind.EXPRESSION: "expression",
}

_COLOR_TO_STATE: dict[AttributeKind, dict[tuple[int, int, int], str]] = {}
for (_kind, _state), _color in STATE_COLORS.items():
    _COLOR_TO_STATE.setdefault(_kind, {})[_color] = _state

StateMap = dict[AttributeKind, str]


def band_bounds(height: int, index: int) -> tuple[int, int]:
    """Row range [lo, hi) of band `index` for the given image height."""
    return (index * height) // 9, ((index + 1) * height) // 9


def render_face(states: Mapping[AttributeKind, str], width: int, height: int) -> FaceImage:
    """Paint a banded face from a state map. Needs height >= 9 so every
    band owns at least one row."""
    if height < 9 or width < 1:
        raise NotSyntheticFace(f"cannot band a {width}x{height} image")
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    for i, kind in enumerate(ALL_KINDS):
        state = states[kind]
        color = (
            CORRUPTED_COLOR
            if state == CORRUPTED
            else STATE_COLORS[(kind, state)]
        )
        lo, hi = band_bounds(height, i)
        arr[lo:hi, :] = color
    return FaceImage.from_array(arr)


def decode_face(img: FaceImage) -> StateMap:
    """Read the band states back by sampling each band's center pixel."""
    if img.height < 9:
        raise NotSyntheticFace(f"{img.height} rows cannot hold 9 bands")
    states: StateMap = {}
    col = img.width // 2
    for i, kind in enumerate(ALL_KINDS):
        lo, hi = band_bounds(img.height, i)
        row = (lo + hi) // 2
        color = tuple(int(c) for c in img.pixels[row, col])
        states[kind] = _COLOR_TO_STATE[kind].get(color, CORRUPTED)
    return states


def band_mask(width: int, height: int, kind: AttributeKind) -> RegionMask:
    """The rectangle a kind's band occupies, as a mask in image coords."""
    bits = np.zeros((height, width), dtype=bool)
    lo, hi = band_bounds(height, ALL_KINDS.index(kind))
    bits[lo:hi, :] = True
    return RegionMask.from_array(bits, attribute=kind)


def corrupt_band(img: FaceImage, kind: AttributeKind) -> FaceImage:
    states = decode_face(img)
    return render_face({**states, kind: CORRUPTED}, img.width, img.height)


def random_states(rng: random.Random) -> StateMap:
    return {kind: rng.choice(vocabulary_for(kind)) for kind in ALL_KINDS}


def random_face(rng: random.Random, width: int, height: int | None = None) -> FaceImage:
    return render_face(random_states(rng), width, height or width)


_REWRITE_MARKER = "Rewritten caption:"


class MockBackendSuite:
    """All eight capabilities as pure deterministic functions.

    Safe to share across threads; the served mock wraps this same object
    so the two are bit-identical by construction.
    """

    # -- editor --------------------------------------------------------------

    def edit(self, image: FaceImage, instruction_text: str) -> FaceImage:
        states = decode_face(image)
        kinds = detect_attributes(instruction_text)
        if not kinds:
            return image
        if image.width < W_MIN:
            return image  # too degraded to edit
        token = find_change_token(instruction_text, kinds[0])
        if token is None:
            return image
        new_states = {**states, kinds[0]: token}
        new_w = (image.width * DOWNSCALE_NUM) // DOWNSCALE_DEN
        new_h = (image.height * DOWNSCALE_NUM) // DOWNSCALE_DEN
        return render_face(new_states, new_w, new_h)

    # -- super-resolution ----------------------------------------------------

    def sr(self, image: FaceImage) -> FaceImage:
        states = decode_face(image)
        new_w = min(2 * image.width, S_MAX)
        new_h = min(2 * image.height, S_MAX)
        return render_face(states, new_w, new_h)

    # -- captioning / embedding ----------------------------------------------

    def caption(self, image: FaceImage) -> str:
        return self.caption_for_states(decode_face(image))

    @staticmethod
    def caption_for_states(states: Mapping[AttributeKind, str]) -> str:
        clauses = [
            f"{states[kind]} {KIND_NOUNS[kind]}"
            for kind in ALL_KINDS
            if kind in states
        ]
        return "a face with " + ", ".join(clauses)

    def embed(
        self, text: str | None = None, image: FaceImage | None = None
    ) -> np.ndarray:
        if (text is None) == (image is None):
            raise BothOrNeitherInput("embed takes exactly one of text or image")
        pairs = registered_pairs()
        vec = np.zeros(len(pairs), dtype=np.float64)
        if image is not None:
            states = decode_face(image)
            mentioned = {(k, s) for k, s in states.items() if s != CORRUPTED}
        else:
            mentioned = set(detect_state_pairs(text))
        for i, pair in enumerate(pairs):
            if pair in mentioned:
                vec[i] = 1.0
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            return vec  # NoSignal by convention: the zero vector
        return vec / norm

    # -- judging / quality ---------------------------------------------------

    def judge(
        self, input_image: FaceImage, output_image: FaceImage, edit: AttributeEdit
    ) -> bool:
        before = decode_face(input_image)
        if (output_image.width, output_image.height) != (
            input_image.width,
            input_image.height,
        ):
            output_image = resize(output_image, input_image.width, input_image.height)
        after = decode_face(output_image)
        if after[edit.kind] != edit.change:
            return False
        return all(
            after[kind] == before[kind] for kind in ALL_KINDS if kind != edit.kind
        )

    def quality(self, image: FaceImage) -> float:
        states = decode_face(image)
        corrupted = sum(1 for s in states.values() if s == CORRUPTED)
        base = min(1.0, image.width / S_MAX)
        return max(0.0, base - 0.1 * corrupted)

    # -- text completion -----------------------------------------------------

    def complete(
        self, prompt: str, temperature: float = 0.0, max_tokens: int = 256
    ) -> str:
        if _REWRITE_MARKER in prompt:
            return self._rewrite_caption(prompt)
        return self._decompose(prompt)

    def _decompose(self, prompt: str) -> str:
        lines = [ln for ln in prompt.splitlines() if ln.strip()]
        query = ""
        for ln in lines:
            if ln.strip().lower().startswith("input:"):
                query = ln.split(":", 1)[1].strip()  # final Input wins
        if not query:
            query = lines[-1].strip() if lines else ""
        try:
            fragments = split_attributed_fragments(query)
        except UnsplittableInstruction:
            fragments = [query] if query else []
        numbered = "\n".join(f"{i}. {frag}" for i, frag in enumerate(fragments, 1))
        return f"Output:\n{numbered}" if numbered else "Output:"

    def _rewrite_caption(self, prompt: str) -> str:
        caption = ""
        instruction = ""
        for ln in prompt.splitlines():
            stripped = ln.strip()
            if stripped.lower().startswith("caption:"):
                caption = stripped.split(":", 1)[1].strip()
            elif stripped.lower().startswith("instruction:"):
                instruction = stripped.split(":", 1)[1].strip()
        states: dict[AttributeKind, str] = dict(detect_state_pairs(caption))
        for kind in detect_attributes(instruction):
            token = find_change_token(instruction, kind)
            if token:
                states[kind] = token
        return self.caption_for_states(states)

    # -- paired editing ------------------------------------------------------

    def pair_edit(
        self, image: FaceImage, source_caption: str, target_caption: str
    ) -> FaceImage:
        states = decode_face(image)
        for kind, token in detect_state_pairs(target_caption):
            states[kind] = token
        return render_face(states, image.width, image.height)
