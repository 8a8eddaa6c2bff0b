"""Single gateway for all model calls: live chat-completions HTTP or a scripted oracle.

Every stage of the pipeline funnels its model invocations through
``complete(profile, request)``. A profile either points at a live
chat-completions endpoint or carries an in-process handler (the scripted
oracle), so the rest of the pipeline never knows which backend it is
talking to.
"""

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import requests as _requests

from .model import GcotForgeError, InvariantViolation

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 1024


class TransportError(GcotForgeError):
    """The backend could not be reached or answered with a failure status."""


class ProtocolError(GcotForgeError):
    """The backend answered, but the body is not a chat completion."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if self.temperature < 0:
            raise InvariantViolation("temperature must be >= 0")
        if self.max_tokens < 1:
            raise InvariantViolation("max_tokens must be >= 1")
        n_images = sum(
            1 for m in self.messages for p in m.parts if isinstance(p, ImagePart)
        )
        if n_images > 1:
            raise InvariantViolation(
                f"at most one image attachment per request, got {n_images}"
            )

    def text(self) -> str:
        """All text parts joined, in order. Used by the oracle classifier."""
        return "\n".join(
            p.text for m in self.messages for p in m.parts if isinstance(p, TextPart)
        )

    def image_bytes(self) -> bytes | None:
        for m in self.messages:
            for p in m.parts:
                if isinstance(p, ImagePart):
                    return p.data
        return None


def user_request(
    model: str,
    text: str,
    image: bytes | None = None,
    media_type: str = "image/png",
    temperature: float = 0.0,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ChatRequest:
    """Single-turn user request, optionally with one image attachment."""
    parts: list = [TextPart(text)]
    if image is not None:
        parts.append(ImagePart(image, media_type))
    msg = Message(role="user", parts=tuple(parts))
    return ChatRequest(
        model=model,
        messages=(msg,),
        temperature=temperature,
        max_tokens=max_tokens,
    )


class _InFlightGauge:
    """Thread-safe current/peak counter for requests in flight."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0
        self.total = 0

    def enter(self):
        with self._lock:
            self.current += 1
            self.total += 1
            self.peak = max(self.peak, self.current)

    def leave(self):
        with self._lock:
            self.current -= 1


@dataclass
class BackendProfile:
    """How to reach one backend, plus its runtime concurrency state.

    ``handler`` short-circuits the wire: when set, completions come from the
    in-process callable (the scripted oracle) instead of HTTP. The in-flight
    bound applies either way.
    """

    name: str
    endpoint_url: str
    auth_env_var: str = "GCOT_API_KEY"
    timeout_s: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    handler: Callable[[ChatRequest], str] | None = field(
        default=None, repr=False, compare=False
    )
    _sem: threading.BoundedSemaphore = field(init=False, repr=False, compare=False)
    gauge: _InFlightGauge = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.max_retries < 0:
            raise InvariantViolation("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise InvariantViolation("max_in_flight must be >= 1")
        self._sem = threading.BoundedSemaphore(self.max_in_flight)
        self.gauge = _InFlightGauge()


def request_body(request: ChatRequest) -> dict:
    """Wire body for POST {endpoint_url}/chat/completions."""
    messages = []
    for m in request.messages:
        content = []
        for p in m.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            elif isinstance(p, ImagePart):
                b64 = base64.b64encode(p.data).decode("ascii")
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": f"data:{p.media_type};base64,{b64}"},
                    }
                )
            else:
                raise ProtocolError(f"unknown message part {type(p).__name__}")
        messages.append({"role": m.role, "content": content})
    return {
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }


def request_body_bytes(request: ChatRequest) -> bytes:
    """Canonical bytes of the wire body; golden fixtures compare these exactly."""
    return json.dumps(
        request_body(request), sort_keys=True, ensure_ascii=False, separators=(",", ":")
    ).encode("utf-8")


def parse_completion(body: object) -> str:
    """Extract the first choice's message content from a response body."""
    try:
        choices = body["choices"]  # type: ignore[index]
        content = choices[0]["message"]["content"]
    except (TypeError, KeyError, IndexError) as exc:
        raise ProtocolError(f"malformed completion body: {exc!r}") from exc
    if not isinstance(content, str):
        raise ProtocolError(f"completion content is {type(content).__name__}, not text")
    return content


class _Retryable(Exception):
    """Internal marker: transport failure worth retrying."""


def _post_once(profile: BackendProfile, body: bytes) -> str:
    url = profile.endpoint_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(profile.auth_env_var, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    try:
        resp = _requests.post(url, data=body, headers=headers, timeout=profile.timeout_s)
    except (_requests.ConnectionError, _requests.Timeout) as exc:
        raise _Retryable(str(exc)) from exc
    if resp.status_code >= 500 or resp.status_code == 429:
        raise _Retryable(f"status {resp.status_code}")
    if resp.status_code >= 400:
        raise TransportError(f"{url}: status {resp.status_code}: {resp.text[:200]}")
    try:
        parsed = resp.json()
    except ValueError as exc:
        raise ProtocolError(f"{url}: response is not JSON") from exc
    return parse_completion(parsed)


def complete(
    profile: BackendProfile,
    request: ChatRequest,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Run one completion against the profile's backend.

    Transient transport failures are retried with exponential backoff
    (1s base, factor 2) up to max_retries times. Well-formed but useless
    completions are never retried; they are data-quality signals for the
    caller to record.
    """
    profile._sem.acquire()
    profile.gauge.enter()
    try:
        if profile.handler is not None:
            return profile.handler(request)
        body = request_body_bytes(request)
        attempt = 0
        while True:
            try:
                return _post_once(profile, body)
            except _Retryable as exc:
                if attempt >= profile.max_retries:
                    raise TransportError(
                        f"{profile.name}: giving up after "
                        f"{attempt + 1} attempts: {exc}"
                    ) from exc
                delay = 1.0 * (2.0**attempt)
                logger.warning(
                    "%s: transport failure (%s), retry %d/%d in %.0fs",
                    profile.name,
                    exc,
                    attempt + 1,
                    profile.max_retries,
                    delay,
                )
                sleep(delay)
                attempt += 1
    finally:
        profile.gauge.leave()
        profile._sem.release()


def oracle_configure(world, policy, name: str = "synth-oracle") -> BackendProfile:
    """Profile whose completions come from synthetic ground truth.

    Answers are fully determined by (world, policy) including the policy
    seed, so runs against the oracle reproduce bit-for-bit.
    """
    from .synthworld import ScriptedOracle

    oracle = ScriptedOracle(world, policy)
    return BackendProfile(
        name=name,
        endpoint_url=f"oracle://{name}",
        handler=oracle,
    )
