"""HTTP client for the backend wire protocol.

All capabilities are plain JSON POSTs carrying base64 PNG images. The
retry policy is deliberate: transport failures and 5xx responses are
retried with exponential backoff, 4xx responses are never retried (the
request itself is wrong). Every call carries a request id header which
the server echoes; calls are logged so traces can be correlated.
"""

from __future__ import annotations

import base64
import binascii
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import requests

from ..errors import (
    BackendRejected,
    BackendUnavailable,
    BothOrNeitherInput,
    ProtocolError,
    UnsupportedFormat,
)
from ..imaging import FaceImage, decode_png, encode_png
from ..instructions import AttributeEdit

REQUEST_ID_HEADER = "X-Request-Id"


@dataclass(frozen=True)
class BackendEndpoint:
    base_url: str
    timeout_ms: int = 60000
    max_retries: int = 2
    backoff_ms: int = 500  # doubles per retry
    auth_token_env: str | None = None

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0 or self.backoff_ms < 0:
            raise ValueError("retry settings must be non-negative")


@dataclass
class CallRecord:
    capability: str
    request_id: str
    attempts: int
    status: int | None  # None when no HTTP response was ever received


def image_to_b64(img: FaceImage) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def image_from_b64(data: str) -> FaceImage:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ProtocolError(f"invalid base64 image payload: {exc}") from exc
    try:
        return decode_png(raw)
    except UnsupportedFormat as exc:
        raise ProtocolError(f"invalid PNG image payload: {exc}") from exc


def _error_envelope(body: object) -> tuple[str, str]:
    if isinstance(body, dict) and isinstance(body.get("error"), dict):
        err = body["error"]
        return str(err.get("code", "")), str(err.get("message", ""))
    return "", str(body)


def http_call(
    endpoint: BackendEndpoint,
    capability: str,
    request: dict,
    session: requests.Session | None = None,
    sleep=time.sleep,
) -> tuple[dict, CallRecord]:
    """POST one capability request, applying the endpoint's retry policy.

    Returns the parsed response body plus a record of what happened.
    """
    url = f"{endpoint.base_url.rstrip('/')}/v1/{capability}"
    headers = {REQUEST_ID_HEADER: uuid.uuid4().hex}
    if endpoint.auth_token_env:
        token = os.environ.get(endpoint.auth_token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
    post = (session or requests).post

    record = CallRecord(capability, headers[REQUEST_ID_HEADER], attempts=0, status=None)
    last_failure = ""
    for attempt in range(endpoint.max_retries + 1):
        record.attempts = attempt + 1
        if attempt:
            sleep(endpoint.backoff_ms * 2 ** (attempt - 1) / 1000.0)
        try:
            resp = post(
                url,
                json=request,
                headers=headers,
                timeout=endpoint.timeout_ms / 1000.0,
            )
        except requests.RequestException as exc:
            last_failure = f"transport error: {exc}"
            continue
        record.status = resp.status_code
        if 200 <= resp.status_code < 300:
            try:
                body = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{capability}: response is not JSON") from exc
            if not isinstance(body, dict):
                raise ProtocolError(f"{capability}: response must be a JSON object")
            return body, record
        if 400 <= resp.status_code < 500:
            code, message = _error_envelope(_safe_json(resp))
            raise BackendRejected(
                f"{capability} rejected ({resp.status_code} {code}): {message}",
                status_code=resp.status_code,
                code=code,
            )
        last_failure = f"server error {resp.status_code}"
    raise BackendUnavailable(
        f"{capability} at {url} failed after {record.attempts} attempt(s): "
        f"{last_failure}"
    )


def _safe_json(resp: requests.Response) -> object:
    try:
        return resp.json()
    except ValueError:
        return resp.text


def _field(body: dict, key: str, kinds: type | tuple, capability: str):
    value = body.get(key)
    if not isinstance(value, kinds) or isinstance(value, bool) and kinds is not bool:
        raise ProtocolError(f"{capability}: missing or invalid field {key!r}")
    return value


@dataclass
class HttpBackendSuite:
    """Every capability against one or more wire endpoints.

    `endpoints` maps capability name to its endpoint; capabilities not
    listed fall back to the "default" entry.
    """

    endpoints: dict[str, BackendEndpoint]
    sleep: object = time.sleep
    call_log: list[CallRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._session = requests.Session()
        self._lock = threading.Lock()
        # one session per suite; requests.Session is thread-safe for posts

    @classmethod
    def for_base_url(cls, base_url: str, **endpoint_kwargs) -> "HttpBackendSuite":
        return cls({"default": BackendEndpoint(base_url, **endpoint_kwargs)})

    def _endpoint(self, capability: str) -> BackendEndpoint:
        try:
            return self.endpoints.get(capability) or self.endpoints["default"]
        except KeyError:
            raise BackendUnavailable(
                f"no endpoint configured for capability {capability!r}"
            ) from None

    def _call(self, capability: str, request: dict) -> dict:
        body, record = http_call(
            self._endpoint(capability),
            capability,
            request,
            session=self._session,
            sleep=self.sleep,
        )
        with self._lock:
            self.call_log.append(record)
        return body

    # -- capabilities --------------------------------------------------------

    def edit(self, image: FaceImage, instruction_text: str) -> FaceImage:
        body = self._call(
            "edit", {"image": image_to_b64(image), "instruction": instruction_text}
        )
        return image_from_b64(_field(body, "image", str, "edit"))

    def sr(self, image: FaceImage) -> FaceImage:
        body = self._call("sr", {"image": image_to_b64(image)})
        return image_from_b64(_field(body, "image", str, "sr"))

    def caption(self, image: FaceImage) -> str:
        body = self._call("caption", {"image": image_to_b64(image)})
        return _field(body, "text", str, "caption")

    def embed(
        self, text: str | None = None, image: FaceImage | None = None
    ) -> np.ndarray:
        if (text is None) == (image is None):
            raise BothOrNeitherInput("embed takes exactly one of text or image")
        request = (
            {"text": text} if text is not None else {"image": image_to_b64(image)}
        )
        body = self._call("embed", request)
        vector = _field(body, "vector", list, "embed")
        dim = _field(body, "dim", int, "embed")
        if len(vector) != dim or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in vector
        ):
            raise ProtocolError("embed: vector/dim mismatch")
        return np.asarray(vector, dtype=np.float64)

    def quality(self, image: FaceImage) -> float:
        body = self._call("quality", {"image": image_to_b64(image)})
        score = body.get("score")
        if not isinstance(score, (int, float)) or isinstance(score, bool):
            raise ProtocolError("quality: missing or invalid field 'score'")
        return float(score)

    def judge(
        self, input_image: FaceImage, output_image: FaceImage, edit: AttributeEdit
    ) -> bool:
        body = self._call(
            "judge",
            {
                "input_image": image_to_b64(input_image),
                "output_image": image_to_b64(output_image),
                "attribute": edit.kind.value,
                "change": edit.change,
            },
        )
        correct = body.get("correct")
        if not isinstance(correct, bool):
            raise ProtocolError("judge: missing or invalid field 'correct'")
        return correct

    def complete(
        self, prompt: str, temperature: float = 0.0, max_tokens: int = 256
    ) -> str:
        body = self._call(
            "complete",
            {"prompt": prompt, "temperature": temperature, "max_tokens": max_tokens},
        )
        return _field(body, "text", str, "complete")

    def pair_edit(
        self, image: FaceImage, source_caption: str, target_caption: str
    ) -> FaceImage:
        body = self._call(
            "pair_edit",
            {
                "image": image_to_b64(image),
                "source_caption": source_caption,
                "target_caption": target_caption,
            },
        )
        return image_from_b64(_field(body, "image", str, "pair_edit"))
