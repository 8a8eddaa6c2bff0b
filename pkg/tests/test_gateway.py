import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from conftest import FIXTURES, perfect_profile

from gcot_forge import gateway
from gcot_forge.distill import DISTILL_TEMPLATE
from gcot_forge.grounding import GROUND_PROMPT, READ_PROMPT
from gcot_forge.model import InvariantViolation
from gcot_forge.synthworld import OraclePolicy, ScriptedOracle

WIRE = FIXTURES / "wire"

FAN_LETTERS_QUESTION = (
    "An actor was informed how many fan letters he received each day. "
    "How many fan letters total were received on Thursday and Monday?"
)


def fixture_image() -> bytes:
    return (WIRE / "pixel.png").read_bytes()


class TestWireGolden:
    def test_grounding_request_bytes(self):
        req = gateway.user_request(
            model="viscot-7b",
            text=f"Where is the $1.85? {GROUND_PROMPT}",
            image=fixture_image(),
        )
        assert gateway.request_body_bytes(req) == (WIRE / "grounding_request.json").read_bytes()

    def test_reading_request_bytes(self):
        req = gateway.user_request(
            model="viscot-7b", text=READ_PROMPT, image=fixture_image()
        )
        assert gateway.request_body_bytes(req) == (WIRE / "reading_request.json").read_bytes()

    def test_distillation_request_bytes(self):
        req = gateway.user_request(
            model="llama-3.2",
            text=DISTILL_TEMPLATE.format(question=FAN_LETTERS_QUESTION),
            image=fixture_image(),
        )
        assert gateway.request_body_bytes(req) == (
            WIRE / "distillation_request.json"
        ).read_bytes()

    def test_fixtures_carry_verbatim_prompts(self):
        ground = (WIRE / "grounding_request.json").read_text("utf-8")
        read = (WIRE / "reading_request.json").read_text("utf-8")
        dist = (WIRE / "distillation_request.json").read_text("utf-8")
        assert "Please provide the bounding box coordinate of the region." in ground
        assert "The content in this image is:" in read
        assert "*Answer*:" in dist

    def test_image_part_is_base64_data_uri(self):
        req = gateway.user_request(model="m", text="x", image=b"\x89PNG123")
        body = gateway.request_body(req)
        part = body["messages"][0]["content"][1]
        assert part["type"] == "image_url"
        assert part["image_url"]["url"].startswith("data:image/png;base64,")

    def test_completion_response_fixture_parses(self):
        payload = json.loads((WIRE / "completion_response.json").read_text("utf-8"))
        assert gateway.parse_completion(payload) == "[0.611, 0.381, 0.875, 0.455]"

    @pytest.mark.parametrize(
        "payload",
        [{}, {"choices": []}, {"choices": [{"message": {}}]}, {"choices": [{"message": {"content": 7}}]}],
    )
    def test_malformed_completion(self, payload):
        with pytest.raises(gateway.ProtocolError):
            gateway.parse_completion(payload)

    def test_at_most_one_image(self):
        parts = (
            gateway.TextPart("x"),
            gateway.ImagePart(b"a"),
            gateway.ImagePart(b"b"),
        )
        with pytest.raises(InvariantViolation):
            gateway.ChatRequest(model="m", messages=(gateway.Message("user", parts),))


class _ScriptedHandler(BaseHTTPRequestHandler):
    script = []  # list of (status, body bytes) consumed per request
    seen = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = self.rfile.read(length)
        type(self).seen.append((self.path, dict(self.headers), body))
        status, payload = (
            self.script.pop(0) if self.script else (200, _completion_body("ok"))
        )
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def _completion_body(text: str) -> bytes:
    return json.dumps(
        {"choices": [{"message": {"role": "assistant", "content": text}}]}
    ).encode()


@pytest.fixture
def http_backend():
    handler = type("Handler", (_ScriptedHandler,), {"script": [], "seen": []})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}", handler
    finally:
        server.shutdown()
        thread.join()


def _profile(url, **kw):
    defaults = dict(name="live", endpoint_url=url, max_retries=3, timeout_s=5.0)
    defaults.update(kw)
    return gateway.BackendProfile(**defaults)


class TestLiveTransport:
    def test_round_trip(self, http_backend):
        url, handler = http_backend
        handler.script.append((200, _completion_body("[0.611, 0.381, 0.875, 0.455]")))
        req = gateway.user_request(model="m", text="Where is the $1.85?")
        out = gateway.complete(_profile(url), req)
        assert out == "[0.611, 0.381, 0.875, 0.455]"
        path, headers, body = handler.seen[0]
        assert path == "/chat/completions"
        assert json.loads(body)["model"] == "m"

    def test_bearer_token_from_env(self, http_backend, monkeypatch):
        url, handler = http_backend
        monkeypatch.setenv("GCOT_API_KEY", "sekrit")
        gateway.complete(_profile(url), gateway.user_request("m", "hi"))
        _, headers, _ = handler.seen[0]
        assert headers["Authorization"] == "Bearer sekrit"

    def test_retry_on_5xx_with_backoff(self, http_backend):
        url, handler = http_backend
        handler.script.extend([(500, b"boom"), (503, b"boom"), (200, _completion_body("ok"))])
        delays = []
        out = gateway.complete(
            _profile(url), gateway.user_request("m", "hi"), sleep=delays.append
        )
        assert out == "ok"
        assert delays == [1.0, 2.0]
        assert len(handler.seen) == 3

    def test_retries_exhausted(self, http_backend):
        url, handler = http_backend
        handler.script.extend([(500, b"x")] * 3)
        with pytest.raises(gateway.TransportError):
            gateway.complete(
                _profile(url, max_retries=2),
                gateway.user_request("m", "hi"),
                sleep=lambda s: None,
            )
        assert len(handler.seen) == 3

    def test_client_error_no_retry(self, http_backend):
        url, handler = http_backend
        handler.script.append((404, b"nope"))
        with pytest.raises(gateway.TransportError):
            gateway.complete(_profile(url), gateway.user_request("m", "hi"))
        assert len(handler.seen) == 1

    def test_unreachable_endpoint(self):
        profile = _profile("http://127.0.0.1:1", max_retries=1, timeout_s=0.2)
        with pytest.raises(gateway.TransportError):
            gateway.complete(profile, gateway.user_request("m", "hi"), sleep=lambda s: None)

    def test_malformed_body_is_protocol_error_without_retry(self, http_backend):
        url, handler = http_backend
        handler.script.append((200, b"not json"))
        with pytest.raises(gateway.ProtocolError):
            gateway.complete(_profile(url), gateway.user_request("m", "hi"))
        assert len(handler.seen) == 1


class TestInFlightBound:
    def test_peak_never_exceeds_limit(self):
        def slow_handler(request):
            time.sleep(0.005)
            return "done"

        profile = gateway.BackendProfile(
            name="stress",
            endpoint_url="oracle://stress",
            max_in_flight=3,
            handler=slow_handler,
        )
        req = gateway.user_request("m", "hi")
        threads = [
            threading.Thread(target=gateway.complete, args=(profile, req))
            for _ in range(24)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert profile.gauge.total == 24
        assert profile.gauge.peak <= 3
        assert profile.gauge.current == 0


class TestOracleDeterminism:
    def test_identical_world_policy_seed_identical_stream(self, tmp_path):
        from gcot_forge.distill import build_distill_prompt
        from gcot_forge.grounding import crop_png_bytes, to_pixel_rect
        from gcot_forge.synthworld import generate_world

        world_a = generate_world(seed=5, n_images=2, items_per_image=3, out_dir=tmp_path / "a")
        world_b = generate_world(seed=5, n_images=2, items_per_image=3, out_dir=tmp_path / "b")
        policy = OraclePolicy(
            recall_schedule=(0.5, 0.8), box_jitter_rate=0.4, wrong_content_rate=0.3, seed=11
        )

        def stream(world):
            oracle = ScriptedOracle(world, policy)
            out = []
            for wq in world.qa:
                sample = wq.sample
                image_bytes = open(sample.image.uri, "rb").read()
                out.append(
                    oracle(
                        gateway.user_request(
                            "synth-oracle", build_distill_prompt(sample), image_bytes
                        )
                    )
                )
                for surface in (wq.items[0][0], wq.items[0][1]):
                    out.append(
                        oracle(
                            gateway.user_request(
                                "synth-oracle/it1",
                                f"Where is the {surface}? {GROUND_PROMPT}",
                                image_bytes,
                            )
                        )
                    )
                cell = world.image(sample.image.id).cells[0]
                crop = crop_png_bytes(
                    to_pixel_rect(cell.box, sample.image, 0.0), sample.image
                )
                out.append(
                    oracle(gateway.user_request("synth-oracle/it1", READ_PROMPT, crop))
                )
            return out

        assert stream(world_a) == stream(world_b)
