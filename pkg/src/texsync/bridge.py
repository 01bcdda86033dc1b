"""Client side of the external-backbone wire protocol.

A real latent-diffusion backbone (text prompt, depth/normal conditioning,
VAE decode) runs in a separate process and is reached over a local TCP
socket. This module owns the request/response frame codec, the per-view
directional prompt composition, and a NoisePredictor implementation that
forwards every engine call across the wire.

Frame layout, both directions:

    4-byte little-endian unsigned length N
    N bytes of payload:
        UTF-8 header, one "key=value" per line, terminated by a blank line
        raw little-endian float32 tensor data, concatenated in view order

Tensor dimensions ride in the header as base-10 "HxWxC" strings, so either
end can parse frames with nothing beyond a socket and a float32 view.
Header values must not contain newlines; the first '=' splits key from
value, so values may contain '='. One request is in flight per connection.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from .denoisers import AttentionPlan, PredictorError
from .geometry import Camera, camera_azimuth_elevation
from .uv_transport import LatentGrid

PROTOCOL_VERSION = 1

OP_PREDICT = "predict-noise"
OP_DECODE = "decode-latent"
_OPS = (OP_PREDICT, OP_DECODE)


class BridgeError(PredictorError):
    """Transport or protocol failure talking to the backbone process."""


# ---------------------------------------------------------------------------
# Request / response containers


@dataclass
class BridgeRequest:
    """One engine call: all view latents plus everything the backbone needs."""

    op: str
    t: int
    latents: list[np.ndarray]
    prompts: list[str]
    conditioning: list[np.ndarray] | None = None
    sources: tuple[tuple[int, ...], ...] = ()
    beta: float = 1.0
    t_ref: int = 0
    v_ref: int = 0
    version: int = PROTOCOL_VERSION

    def validate(self) -> None:
        if self.op not in _OPS:
            raise ValueError(f"unknown op: {self.op}")
        if not self.latents:
            raise ValueError("request carries no views")
        shape = self.latents[0].shape
        for a in self.latents:
            if a.shape != shape or a.ndim != 3:
                raise ValueError("all view latents must share one (H, W, C) shape")
        if len(self.prompts) != len(self.latents):
            raise ValueError("one prompt per view required")
        if self.op == OP_PREDICT and any(not p for p in self.prompts):
            raise ValueError("prompts must be non-empty for predict ops")
        for p in self.prompts:
            if "\n" in p:
                raise ValueError("prompts must not contain newlines")
        if self.conditioning is not None:
            if len(self.conditioning) != len(self.latents):
                raise ValueError("one conditioning image per view required")
            cshape = self.conditioning[0].shape
            for c in self.conditioning:
                if c.shape != cshape or c.ndim != 3:
                    raise ValueError("conditioning images must share one (H, W, C) shape")
        if self.sources and len(self.sources) != len(self.latents):
            raise ValueError("attention sources must cover every view")


@dataclass
class BridgeResponse:
    """Backbone reply: per-view tensors on ok, error text otherwise."""

    status: str  # ok | error
    tensors: list[np.ndarray] = field(default_factory=list)
    error: str = ""
    version: int = PROTOCOL_VERSION

    def validate(self) -> None:
        if self.status not in ("ok", "error"):
            raise ValueError(f"unknown status: {self.status}")
        if self.status == "ok" and not self.tensors:
            raise ValueError("ok response must carry tensors")
        if "\n" in self.error:
            raise ValueError("error text must not contain newlines")


# ---------------------------------------------------------------------------
# Frame codec


def _fmt_shape(shape: tuple[int, ...]) -> str:
    return "x".join(str(int(d)) for d in shape)


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(d) for d in text.split("x"))
    except ValueError as exc:
        raise ValueError(f"bad shape field: {text!r}") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"bad shape field: {text!r}")
    return dims


def _f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4")


def _assemble(header: list[str], tensors: list[np.ndarray]) -> bytes:
    head = ("\n".join(header) + "\n\n").encode("utf-8")
    body = b"".join(_f32(a).tobytes() for a in tensors)
    return head + body


def _split_payload(payload: bytes) -> tuple[dict[str, str], bytes]:
    sep = payload.find(b"\n\n")
    if sep < 0:
        raise ValueError("frame has no header terminator")
    fields: dict[str, str] = {}
    for line in payload[:sep].decode("utf-8").splitlines():
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError(f"malformed header line: {line!r}")
        fields[key] = value
    return fields, payload[sep + 2 :]


def _take_tensors(body: bytes, count: int, shape: tuple[int, ...], offset: int) -> tuple[list[np.ndarray], int]:
    size = int(np.prod(shape)) * 4
    out = []
    for _ in range(count):
        chunk = body[offset : offset + size]
        if len(chunk) != size:
            raise ValueError("frame payload shorter than declared tensors")
        out.append(np.frombuffer(chunk, dtype="<f4").reshape(shape).copy())
        offset += size
    return out, offset


def _require(fields: dict[str, str], key: str) -> str:
    if key not in fields:
        raise ValueError(f"frame header missing {key!r}")
    return fields[key]


def _check_version(fields: dict[str, str]) -> int:
    version = int(_require(fields, "version"))
    if version != PROTOCOL_VERSION:
        raise ValueError(f"unsupported protocol version {version}")
    return version


def encode_request(req: BridgeRequest) -> bytes:
    """Serialize a request to one payload (no length prefix)."""
    req.validate()
    header = [
        "type=request",
        f"version={req.version}",
        f"op={req.op}",
        f"t={req.t}",
        f"views={len(req.latents)}",
        f"shape={_fmt_shape(req.latents[0].shape)}",
        "cond_shape=" + (_fmt_shape(req.conditioning[0].shape) if req.conditioning else "none"),
        f"beta={req.beta!r}",
        f"t_ref={req.t_ref}",
        f"v_ref={req.v_ref}",
        "sources=" + ";".join(",".join(str(s) for s in row) for row in req.sources),
    ]
    header += [f"prompt.{i}={p}" for i, p in enumerate(req.prompts)]
    tensors = list(req.latents) + list(req.conditioning or [])
    return _assemble(header, tensors)


def decode_request(payload: bytes) -> BridgeRequest:
    fields, body = _split_payload(payload)
    if _require(fields, "type") != "request":
        raise ValueError("frame is not a request")
    version = _check_version(fields)
    views = int(_require(fields, "views"))
    shape = _parse_shape(_require(fields, "shape"))
    cond_field = _require(fields, "cond_shape")
    latents, offset = _take_tensors(body, views, shape, 0)
    conditioning = None
    if cond_field != "none":
        conditioning, offset = _take_tensors(body, views, _parse_shape(cond_field), offset)
    if offset != len(body):
        raise ValueError("frame payload longer than declared tensors")
    sources_field = _require(fields, "sources")
    sources = tuple(
        tuple(int(s) for s in row.split(",")) for row in sources_field.split(";") if row
    )
    req = BridgeRequest(
        op=_require(fields, "op"),
        t=int(_require(fields, "t")),
        latents=latents,
        prompts=[_require(fields, f"prompt.{i}") for i in range(views)],
        conditioning=conditioning,
        sources=sources,
        beta=float(_require(fields, "beta")),
        t_ref=int(_require(fields, "t_ref")),
        v_ref=int(_require(fields, "v_ref")),
        version=version,
    )
    req.validate()
    return req


def encode_response(resp: BridgeResponse) -> bytes:
    """Serialize a response to one payload (no length prefix)."""
    resp.validate()
    header = [
        "type=response",
        f"version={resp.version}",
        f"status={resp.status}",
        f"views={len(resp.tensors)}",
        "shape=" + (_fmt_shape(resp.tensors[0].shape) if resp.tensors else "none"),
        f"error={resp.error}",
    ]
    return _assemble(header, resp.tensors)


def decode_response(payload: bytes) -> BridgeResponse:
    fields, body = _split_payload(payload)
    if _require(fields, "type") != "response":
        raise ValueError("frame is not a response")
    version = _check_version(fields)
    views = int(_require(fields, "views"))
    shape_field = _require(fields, "shape")
    tensors: list[np.ndarray] = []
    offset = 0
    if shape_field != "none":
        tensors, offset = _take_tensors(body, views, _parse_shape(shape_field), 0)
    if offset != len(body):
        raise ValueError("frame payload longer than declared tensors")
    resp = BridgeResponse(
        status=_require(fields, "status"),
        tensors=tensors,
        error=fields.get("error", ""),
        version=version,
    )
    resp.validate()
    return resp


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def read_frame(sock: socket.socket) -> bytes:
    """Read one length-prefixed frame; raises BridgeError on truncation."""
    prefix = _read_exact(sock, 4)
    (length,) = struct.unpack("<I", prefix)
    return _read_exact(sock, length)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise BridgeError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Directional prompts


def directional_prompt(base: str, camera: Camera) -> str:
    """Append the view-direction keyword for this camera to a base prompt.

    Buckets (exhaustive): elevation above 30 degrees is "top view";
    otherwise azimuth, measured counterclockwise from +x and wrapped into
    [-180, 180), buckets as front [-45, 45), left side [45, 135),
    back [135, 225) and right side [225, 315).
    """
    az, el = camera_azimuth_elevation(camera)
    if np.degrees(el) > 30.0:
        keyword = "top view"
    else:
        deg = np.degrees(az) % 360.0
        if deg >= 315.0 or deg < 45.0:
            keyword = "front view"
        elif deg < 135.0:
            keyword = "left side view"
        elif deg < 225.0:
            keyword = "back view"
        else:
            keyword = "right side view"
    return f"{base}, {keyword}"


# ---------------------------------------------------------------------------
# The remote predictor


def _parse_address(address: str) -> tuple[str, int]:
    host, colon, port = address.rpartition(":")
    if not colon:
        host, port = "127.0.0.1", address
    try:
        return (host or "127.0.0.1", int(port))
    except ValueError as exc:
        raise BridgeError(f"bad bridge address {address!r}, expected host:port") from exc


class BridgePredictor:
    """NoisePredictor that forwards every call to the backbone process.

    Latents, conditioning images, and the attention plan travel to the
    backbone; per-view prompts are composed here (base prompt plus the
    camera's directional keyword) because only the engine side knows the
    rig. The connection opens lazily on first use and is reused; requests
    are strictly serialized.
    """

    supports_attention_reuse = True
    supports_decode = True

    def __init__(self, address: str, base_prompt: str, rig: list[Camera], timeout: float = 60.0):
        self._address = _parse_address(address)
        self._prompts = [directional_prompt(base_prompt, cam) for cam in rig]
        self._timeout = timeout
        self._sock: socket.socket | None = None

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self) -> "BridgePredictor":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _connection(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self._address, timeout=self._timeout)
            except OSError as exc:
                raise BridgeError(f"cannot reach backbone at {self._address}: {exc}") from exc
        return self._sock

    def _round_trip(self, req: BridgeRequest) -> list[np.ndarray]:
        sock = self._connection()
        try:
            write_frame(sock, encode_request(req))
            resp = decode_response(read_frame(sock))
        except (OSError, ValueError) as exc:
            self.close()  # connection state unknown after a failed exchange
            raise BridgeError(f"bridge exchange failed: {exc}") from exc
        if resp.status != "ok":
            raise BridgeError(f"backbone error: {resp.error}")
        if len(resp.tensors) != len(req.latents):
            raise BridgeError("backbone returned wrong view count")
        return resp.tensors

    def _request(
        self,
        op: str,
        views: list[LatentGrid],
        t: int,
        plan: AttentionPlan | None,
        conditioning: list[LatentGrid] | None,
    ) -> BridgeRequest:
        if len(views) != len(self._prompts):
            raise BridgeError(
                f"predictor built for {len(self._prompts)} views, got {len(views)}"
            )
        if plan is None:
            plan = AttentionPlan(sources=tuple((v,) for v in range(len(views))))
        return BridgeRequest(
            op=op,
            t=t,
            latents=[v.data for v in views],
            prompts=list(self._prompts),
            conditioning=[c.data for c in conditioning] if conditioning else None,
            sources=plan.sources,
            beta=plan.beta,
            t_ref=plan.t_ref,
            v_ref=plan.reference_view,
        )

    def predict(self, views, t, schedule, plan=None, conditioning=None) -> list[LatentGrid]:
        req = self._request(OP_PREDICT, views, t, plan, conditioning)
        tensors = self._round_trip(req)
        for v, a in enumerate(tensors):
            if a.shape != views[v].data.shape:
                raise BridgeError(f"view {v}: noise shape {a.shape} mismatches latent")
        return [LatentGrid(a, views[v].role) for v, a in enumerate(tensors)]

    def decode(self, views: list[LatentGrid]) -> list[LatentGrid]:
        req = self._request(OP_DECODE, views, 0, None, None)
        tensors = self._round_trip(req)
        return [LatentGrid(a, "rgb") for a in tensors]
