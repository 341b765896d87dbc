"""Serve the mock backend suite over the wire protocol.

One POST route per capability under /v1/, JSON bodies with base64 PNG
images, errors as {"error": {"code", "message"}} envelopes. The routes
call the exact same MockBackendSuite object used in process, which is
what makes served and in-process results bit-identical.
"""

from __future__ import annotations

import base64
import binascii

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import EditChainError, UnsupportedFormat
from ..imaging import FaceImage, decode_png, encode_png
from ..instructions import AttributeEdit
from ..taxonomy import AttributeKind
from .mock import MockBackendSuite


class _BadRequest(Exception):
    def __init__(self, message: str, code: str = "BadRequest") -> None:
        super().__init__(message)
        self.code = code


def _envelope(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status, content={"error": {"code": code, "message": message}}
    )


def _require_str(body: dict, key: str) -> str:
    value = body.get(key)
    if not isinstance(value, str):
        raise _BadRequest(f"field {key!r} must be a string")
    return value


def _require_image(body: dict, key: str = "image") -> FaceImage:
    raw = _require_str(body, key)
    try:
        return decode_png(base64.b64decode(raw, validate=True))
    except (binascii.Error, ValueError, UnsupportedFormat) as exc:
        raise _BadRequest(f"field {key!r} is not a base64 PNG: {exc}") from exc


def _b64(img: FaceImage) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def create_app(suite: MockBackendSuite | None = None) -> FastAPI:
    suite = suite or MockBackendSuite()
    app = FastAPI(title="editchain mock backends", docs_url=None, redoc_url=None)

    @app.middleware("http")
    async def echo_request_id(request: Request, call_next):
        response = await call_next(request)
        request_id = request.headers.get("X-Request-Id")
        if request_id:
            response.headers["X-Request-Id"] = request_id
        return response

    async def read_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception as exc:
            raise _BadRequest(f"body must be JSON: {exc}") from exc
        if not isinstance(body, dict):
            raise _BadRequest("body must be a JSON object")
        return body

    def handle(fn):
        async def route(request: Request):
            try:
                body = await read_body(request)
                return fn(body)
            except _BadRequest as exc:
                return _envelope(400, exc.code, str(exc))
            except EditChainError as exc:
                # domain rejections: the request is wrong, not the server
                return _envelope(400, type(exc).__name__, str(exc))
            except Exception as exc:  # pragma: no cover - defensive
                return _envelope(500, "InternalError", str(exc))

        return route

    def edit(body: dict):
        img = _require_image(body)
        instruction = _require_str(body, "instruction")
        return {"image": _b64(suite.edit(img, instruction))}

    def sr(body: dict):
        return {"image": _b64(suite.sr(_require_image(body)))}

    def caption(body: dict):
        return {"text": suite.caption(_require_image(body))}

    def embed(body: dict):
        has_text = "text" in body
        has_image = "image" in body
        if has_text == has_image:
            raise _BadRequest(
                "embed takes exactly one of 'text' or 'image'",
                code="BothOrNeitherInput",
            )
        if has_text:
            vector = suite.embed(text=_require_str(body, "text"))
        else:
            vector = suite.embed(image=_require_image(body))
        return {"vector": [float(v) for v in vector], "dim": int(vector.shape[0])}

    def quality(body: dict):
        return {"score": suite.quality(_require_image(body))}

    def judge(body: dict):
        input_image = _require_image(body, "input_image")
        output_image = _require_image(body, "output_image")
        try:
            kind = AttributeKind(_require_str(body, "attribute"))
        except ValueError as exc:
            raise _BadRequest(str(exc), code="UnknownAttribute") from exc
        edit_req = AttributeEdit(kind=kind, change=_require_str(body, "change"))
        return {"correct": suite.judge(input_image, output_image, edit_req)}

    def complete(body: dict):
        prompt = _require_str(body, "prompt")
        temperature = body.get("temperature", 0.0)
        max_tokens = body.get("max_tokens", 256)
        if not isinstance(temperature, (int, float)) or isinstance(temperature, bool):
            raise _BadRequest("field 'temperature' must be a number")
        if not isinstance(max_tokens, int) or isinstance(max_tokens, bool):
            raise _BadRequest("field 'max_tokens' must be an integer")
        return {"text": suite.complete(prompt, float(temperature), max_tokens)}

    def pair_edit(body: dict):
        img = _require_image(body)
        source = _require_str(body, "source_caption")
        target = _require_str(body, "target_caption")
        return {"image": _b64(suite.pair_edit(img, source, target))}

    for name, fn in [
        ("edit", edit),
        ("sr", sr),
        ("caption", caption),
        ("embed", embed),
        ("quality", quality),
        ("judge", judge),
        ("complete", complete),
        ("pair_edit", pair_edit),
    ]:
        app.post(f"/v1/{name}")(handle(fn))

    return app


def serve(port: int, host: str = "127.0.0.1") -> None:
    """Run the mock server until interrupted."""
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port, log_level="warning")
