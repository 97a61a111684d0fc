import base64
import io
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from prompttank.backends import (
    BackendError,
    DirectorySource,
    MockBackend,
    RemoteBackend,
    StillImageSource,
    SyntheticSource,
    mock_generate,
)
from prompttank.engine import GenerationRequest
from prompttank.pixels import encode_png, save_png
from prompttank.prompts import WeightedPrompt


def request(image, prompts, strength, seed=7, index=0):
    return GenerationRequest(image=image, prompts=tuple(prompts), strength=strength,
                             seed=seed, frame_index=index, timestamp=0.0)


RNG = np.random.default_rng(99)


class TestMockBackend:
    def test_strength_zero_passes_through(self):
        img = RNG.random((32, 32, 3))
        out = mock_generate(request(img, [WeightedPrompt("frog", 1.0)], 0.0))
        assert out is img

    def test_strength_one_ignores_input(self):
        prompts = [WeightedPrompt("frog", 1.0)]
        a = mock_generate(request(RNG.random((16, 16, 3)), prompts, 1.0))
        b = mock_generate(request(RNG.random((16, 16, 3)), prompts, 1.0))
        assert np.array_equal(a, b)

    def test_deterministic_across_calls(self):
        img = RNG.random((24, 24, 3))
        prompts = [WeightedPrompt("frog", 1.0), WeightedPrompt("glass", 0.4)]
        a = mock_generate(request(img, prompts, 0.6))
        b = mock_generate(request(img, prompts, 0.6))
        assert np.array_equal(a, b)

    def test_weight_nudge_avalanches_pattern(self):
        img = np.zeros((64, 64, 3))
        a = mock_generate(request(img, [WeightedPrompt("frog", 1.00)], 1.0))
        b = mock_generate(request(img, [WeightedPrompt("frog", 1.01)], 1.0))
        assert np.mean(np.any(a != b, axis=2)) >= 0.5

    def test_seed_changes_pattern(self):
        img = np.zeros((32, 32, 3))
        a = mock_generate(request(img, [WeightedPrompt("frog", 1.0)], 1.0, seed=1))
        b = mock_generate(request(img, [WeightedPrompt("frog", 1.0)], 1.0, seed=2))
        assert not np.array_equal(a, b)

    def test_capabilities(self):
        caps = MockBackend().capabilities()
        assert caps.deterministic

    def test_output_in_range(self):
        img = RNG.random((16, 16, 3))
        out = mock_generate(request(img, [WeightedPrompt("x", 2.0)], 0.5))
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


class _StubHandler(BaseHTTPRequestHandler):
    behaviour = "echo"
    received = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).received.append(body)
        if self.behaviour == "slow":
            time.sleep(1.0)
        if self.behaviour == "error":
            self.send_response(503)
            self.end_headers()
            return
        if self.behaviour == "garbage":
            payload = b"this is not a png"
        else:
            payload = base64.b64decode(body["image"])
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.behaviour = "echo"
    _StubHandler.received = []
    yield f"http://127.0.0.1:{server.server_port}/generate"
    server.shutdown()
    server.server_close()


class TestRemoteBackend:
    def test_well_formed_response_decodes(self, stub_server):
        backend = RemoteBackend(stub_server, timeout=5.0)
        img = RNG.random((8, 8, 3))
        out = backend.generate(request(img, [WeightedPrompt("frog", 1.0)], 0.5))
        assert out.shape == img.shape
        assert np.max(np.abs(out - img)) <= 1.0 / 255.0  # PNG round-trip quantization
        body = _StubHandler.received[0]
        assert body["prompt"] == "(frog:1.00)"
        assert body["strength"] == 0.5
        assert body["seed"] == 7

    def test_http_error_raises_status(self, stub_server):
        _StubHandler.behaviour = "error"
        backend = RemoteBackend(stub_server, timeout=5.0)
        with pytest.raises(BackendError) as exc:
            backend.generate(request(np.zeros((4, 4, 3)), [], 0.5))
        assert exc.value.kind == "status"

    def test_garbage_body_raises_decode(self, stub_server):
        _StubHandler.behaviour = "garbage"
        backend = RemoteBackend(stub_server, timeout=5.0)
        with pytest.raises(BackendError) as exc:
            backend.generate(request(np.zeros((4, 4, 3)), [], 0.5))
        assert exc.value.kind == "decode"

    def test_timeout_raises(self, stub_server):
        _StubHandler.behaviour = "slow"
        backend = RemoteBackend(stub_server, timeout=0.2)
        with pytest.raises(BackendError) as exc:
            backend.generate(request(np.zeros((4, 4, 3)), [], 0.5))
        assert exc.value.kind == "timeout"

    def test_unreachable_endpoint(self):
        backend = RemoteBackend("http://127.0.0.1:9/generate", timeout=0.5)
        with pytest.raises(BackendError) as exc:
            backend.generate(request(np.zeros((4, 4, 3)), [], 0.5))
        assert exc.value.kind in ("connection", "timeout")

    def test_auto_timeout_tracks_fps(self):
        backend = RemoteBackend("http://example.invalid/", timeout=None)
        backend.configure_for_fps(12.0)
        assert backend.timeout == pytest.approx(2.0 / 12.0)
        pinned = RemoteBackend("http://example.invalid/", timeout=3.0)
        pinned.configure_for_fps(12.0)
        assert pinned.timeout == 3.0


class TestFrameSources:
    def test_still_image_loops(self, tmp_path):
        img = RNG.random((10, 12, 3))
        path = tmp_path / "plate.png"
        save_png(img, path)
        source = StillImageSource(path)
        assert source.resolution == (12, 10)
        a, b = source.next_frame(), source.next_frame()
        assert np.array_equal(a, b)

    def test_directory_cycles_sorted(self, tmp_path):
        for i, value in enumerate((0.1, 0.5, 0.9)):
            save_png(np.full((4, 4, 3), value), tmp_path / f"frame_{i}.png")
        source = DirectorySource(tmp_path)
        values = [float(source.next_frame()[0, 0, 0]) for _ in range(4)]
        assert values[0] == values[3]
        assert values[0] < values[1] < values[2]

    def test_directory_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            DirectorySource(tmp_path)

    def test_directory_mixed_shapes_rejected(self, tmp_path):
        save_png(np.zeros((4, 4, 3)), tmp_path / "a.png")
        save_png(np.zeros((6, 4, 3)), tmp_path / "b.png")
        with pytest.raises(ValueError):
            DirectorySource(tmp_path)

    def test_synthetic_is_deterministic_per_counter(self):
        a = SyntheticSource(width=64, height=64, blob_count=2, seed=5)
        b = SyntheticSource(width=64, height=64, blob_count=2, seed=5)
        for _ in range(3):
            assert np.array_equal(a.next_frame(), b.next_frame())

    def test_synthetic_moves_over_time(self):
        source = SyntheticSource(width=64, height=64, blob_count=2, seed=5, speed=0.05)
        first = source.next_frame()
        for _ in range(10):
            later = source.next_frame()
        assert not np.array_equal(first, later)

    def test_synthetic_blob_count_zero(self):
        source = SyntheticSource(width=32, height=32, blob_count=0, seed=1)
        assert np.all(source.next_frame() == 0.9)

    def test_synthetic_resolution(self):
        source = SyntheticSource(width=48, height=36, blob_count=1, seed=0)
        assert source.next_frame().shape == (36, 48, 3)
