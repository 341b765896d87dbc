"""Capability contracts every backend suite satisfies.

These are structural protocols: the in-process mock suite and the HTTP
client both implement them without inheriting anything. Real models
(diffusion editors, CLIP-style embedders, face-quality scorers, LLM
completers) live out of repo as services speaking the wire protocol in
`server.py`; nothing in this package embeds an ML runtime.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from ..imaging import FaceImage
from ..instructions import AttributeEdit


@runtime_checkable
class ImageEditor(Protocol):
    def edit(self, image: FaceImage, instruction_text: str) -> FaceImage: ...


@runtime_checkable
class SuperResolver(Protocol):
    def sr(self, image: FaceImage) -> FaceImage: ...


@runtime_checkable
class Captioner(Protocol):
    def caption(self, image: FaceImage) -> str: ...


@runtime_checkable
class Embedder(Protocol):
    def embed(
        self, text: str | None = None, image: FaceImage | None = None
    ) -> np.ndarray: ...


@runtime_checkable
class QualityScorer(Protocol):
    def quality(self, image: FaceImage) -> float: ...


@runtime_checkable
class AttributeJudge(Protocol):
    def judge(
        self, input_image: FaceImage, output_image: FaceImage, edit: AttributeEdit
    ) -> bool: ...


@runtime_checkable
class TextCompleter(Protocol):
    def complete(
        self, prompt: str, temperature: float = 0.0, max_tokens: int = 256
    ) -> str: ...


@runtime_checkable
class PairedEditor(Protocol):
    def pair_edit(
        self, image: FaceImage, source_caption: str, target_caption: str
    ) -> FaceImage: ...
