import http.server
import json
import socket
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metamargin import keyframes as kf
from metamargin.harness.verify import planted_instance, planted_recovered
from metamargin.numerics import make_rng
from oracles import distance_index_bruteforce, knn_density_bruteforce

GOLDEN = Path(__file__).parent / "golden"


def test_two_frames_example():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    d = kf.local_density(x, 1)
    np.testing.assert_array_equal(d, [np.exp(-25.0)] * 2)
    # equal densities: neither is strictly denser, both take the far branch
    np.testing.assert_array_equal(kf.distance_index(x, d), [25.0, 25.0])
    np.testing.assert_array_equal(kf.distance_index(x, d, squared_far=False), [5.0, 5.0])


def test_tight_pair_and_outlier():
    x = np.array([[0.0], [0.1], [5.0]])
    sel = kf.select_keyframes(x, K=1, Q=2)
    # frames 0 and 1 tie on density, so both are peaks; the outlier is sparse
    assert sel.density[2] < sel.density[0] == sel.density[1]
    assert sel.selected == (0, 1)


@pytest.mark.parametrize("K", [0, 5])
def test_k_out_of_range(K):
    with pytest.raises(ValueError, match="K="):
        kf.local_density(np.zeros((5, 2)), K)


def test_q_larger_than_frames():
    with pytest.raises(ValueError, match="Q="):
        kf.select_keyframes(np.random.default_rng(0).normal(size=(8, 3)), K=2, Q=12)


def test_non_finite_frames_rejected():
    x = np.zeros((4, 2))
    x[1, 1] = np.nan
    with pytest.raises(ValueError):
        kf.FrameFeatures(x, "v")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(13, 60))
def test_matches_bruteforce(seed, N):
    rng = make_rng(seed)
    x = rng.normal(size=(N, int(rng.integers(1, 6))))
    if rng.random() < 0.3:
        x[: N // 3] = x[0]  # duplicates exercise tie-breaking
    sel = kf.select_keyframes(x, 6, 12)
    d, dist = knn_density_bruteforce(x.tolist(), 6)
    g = distance_index_bruteforce(dist, d)
    assert np.array_equal(sel.density, d)
    assert np.array_equal(sel.distance_index, g)
    order = sorted(range(N), key=lambda i: (-d[i] * g[i], i))
    assert sel.selected == tuple(order[:12])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_translation_and_permutation_invariance(seed):
    rng = make_rng(seed)
    x = np.round(rng.normal(size=(30, 4)) * 8) / 8  # dyadic values keep shifts exact
    sel = kf.select_keyframes(x, 6, 12)
    shifted = kf.select_keyframes(x + 0.5, 6, 12)
    assert shifted.selected == sel.selected
    perm = rng.permutation(30)
    moved = kf.select_keyframes(x[perm], 6, 12)
    np.testing.assert_array_equal(moved.score, sel.score[perm])


def test_density_in_unit_interval():
    x = make_rng(1).normal(size=(40, 3))
    d = kf.local_density(x, 6)
    assert np.all((d > 0) & (d <= 1))
    assert np.all(kf.local_density(np.zeros((7, 2)), 6) == 1.0)


def test_planted_clusters_recovered():
    rng = make_rng(2)
    hits = sum(planted_recovered(*planted_instance(rng)) for _ in range(20))
    assert hits >= 19


def test_plan_grid_examples():
    sel = kf.KeyframeSelection(np.zeros(20), np.zeros(20), np.zeros(20), (9, 2, 17, 0, 5, 11, 3, 14, 8, 1, 19, 6))
    layout = kf.plan_grid(sel, 4, 3)
    assert layout.rows() == [[0, 1, 2, 3], [5, 6, 8, 9], [11, 14, 17, 19]]
    assert kf.plan_grid((4,), 1, 1).order == (4,)
    a, b = kf.plan_grid((7, 1, 5, 3, 0, 2, 6, 4), 2, 4), kf.plan_grid((7, 1, 5, 3, 0, 2, 6, 4), 4, 2)
    assert a.order == b.order and a.rows() != b.rows()
    assert kf.plan_grid((0, 1, 2), 3, 1, temporal_order=[5.0, 1.0, 3.0]).order == (1, 2, 0)
    with pytest.raises(ValueError):
        kf.plan_grid(sel, 3, 3)


def test_prompt_matches_golden_file():
    layout = kf.plan_grid(tuple(range(12)), 4, 3)
    req = kf.build_caption_request("vid7", layout)
    assert req.prompt.encode("utf-8") == (GOLDEN / "caption_prompt.txt").read_bytes()
    assert json.loads(req.to_json())["prompt"].encode("utf-8") == (GOLDEN / "caption_prompt.txt").read_bytes()


def test_request_roundtrip_and_validation():
    req = kf.build_caption_request("v1", kf.plan_grid((3, 1, 2, 0), 2, 2))
    d = req.to_dict()
    assert d == {"video_id": "v1", "grid": {"w": 2, "h": 2}, "frame_refs": [0, 1, 2, 3], "prompt": kf.CAPTION_PROMPT}
    assert kf.CaptionRequest.from_dict(json.loads(req.to_json())) == req
    with pytest.raises(ValueError):
        kf.build_caption_request("", req.layout)
    with pytest.raises(ValueError):
        kf.CaptionRequest("v1", req.layout, prompt=kf.CAPTION_PROMPT + ".")


def test_mock_backend_is_deterministic():
    req = kf.build_caption_request("v2", kf.plan_grid((5, 2), 2, 1))
    text = kf.submit_caption_request(req, kf.MockBackend())
    assert text == kf.submit_caption_request(req, kf.MockBackend())
    assert text == "video v2: frames 2, 5 shown in reading order"
    assert kf.augmented_pair(req, text) == {"video_id": "v2", "text": text, "selected_frames": [2, 5]}


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _serve(body: bytes, delay: float = 0.0):
    class Handler(http.server.BaseHTTPRequestHandler):
        def do_POST(self):
            n = int(self.headers["Content-Length"])
            Handler.received = json.loads(self.rfile.read(n))
            time.sleep(delay)
            self.send_response(200)
            self.end_headers()
            try:
                self.wfile.write(body)
            except OSError:
                pass

        def log_message(self, *args):
            pass

    server = http.server.HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, Handler


REQ = kf.build_caption_request("v3", kf.plan_grid((1, 0), 1, 2))


def test_http_backend_success():
    server, handler = _serve(json.dumps({"text": "a cat on a mat"}).encode())
    try:
        backend = kf.HttpBackend(f"http://127.0.0.1:{server.server_port}/", timeout=5)
        assert backend.caption(REQ) == "a cat on a mat"
        assert handler.received == REQ.to_dict()
    finally:
        server.shutdown()


def test_http_backend_unreachable():
    with pytest.raises(kf.CaptionTransportError):
        kf.HttpBackend(f"http://127.0.0.1:{_free_port()}/", timeout=2).caption(REQ)


@pytest.mark.parametrize("body", [b"not json", b'{"caption": "x"}', b'{"text": 3}'])
def test_http_backend_malformed_reply(body):
    server, _ = _serve(body)
    try:
        with pytest.raises(kf.CaptionTransportError):
            kf.HttpBackend(f"http://127.0.0.1:{server.server_port}/", timeout=5).caption(REQ)
    finally:
        server.shutdown()


def test_http_backend_timeout():
    server, _ = _serve(b'{"text": "late"}', delay=1.0)
    try:
        with pytest.raises(kf.CaptionTransportError):
            kf.HttpBackend(f"http://127.0.0.1:{server.server_port}/", timeout=0.2).caption(REQ)
    finally:
        server.shutdown()


def test_frame_features_roundtrip(tmp_path):
    ff = kf.FrameFeatures(make_rng(3).normal(size=(5, 2)), "clip")
    p = tmp_path / "f.json"
    p.write_text(json.dumps(ff.to_dict()))
    back = kf.FrameFeatures.load(p)
    assert back.video_id == "clip" and np.array_equal(back.frames, ff.frames)
    sel = kf.select_keyframes(ff, 2, 3)
    again = kf.KeyframeSelection.from_dict(json.loads(json.dumps(sel.to_dict())))
    assert again.selected == sel.selected and np.array_equal(again.score, sel.score)
