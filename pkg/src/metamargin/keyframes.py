"""Density-peak key-frame selection and caption-request assembly.

Frames are scored by local density times distance to the nearest denser
frame; the top ``Q`` are laid out on a ``W x H`` grid in temporal order and
sent to a caption backend together with a fixed prompt.
"""

from __future__ import annotations

import json
import math
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .numerics import check_finite, sq_dist_matrix

CAPTION_PROMPT = "Write a short caption sentence for the video in order from left to right, top to bottom"


@dataclass(frozen=True)
class FrameFeatures:
    frames: np.ndarray
    video_id: str

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty N x D matrix, got shape {frames.shape}")
        check_finite("frames", frames)
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    def to_dict(self) -> dict:
        return {"video_id": self.video_id, "frames": self.frames.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameFeatures":
        return cls(np.asarray(d["frames"], dtype=np.float64), str(d["video_id"]))

    @classmethod
    def load(cls, path) -> "FrameFeatures":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class KeyframeSelection:
    density: np.ndarray
    distance_index: np.ndarray
    score: np.ndarray
    selected: tuple

    def to_dict(self) -> dict:
        return {
            "density": self.density.tolist(),
            "distance_index": self.distance_index.tolist(),
            "score": self.score.tolist(),
            "selected": list(self.selected),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyframeSelection":
        return cls(
            np.asarray(d["density"], dtype=np.float64),
            np.asarray(d["distance_index"], dtype=np.float64),
            np.asarray(d["score"], dtype=np.float64),
            tuple(int(i) for i in d["selected"]),
        )


def _as_matrix(frames) -> np.ndarray:
    if isinstance(frames, FrameFeatures):
        return frames.frames
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"frames must be a non-empty N x D matrix, got shape {x.shape}")
    return x


def _check_k(K: int, N: int) -> None:
    if not 1 <= K <= N - 1:
        raise ValueError(f"K={K} outside 1..{N - 1} for {N} frames")


def _density_from_dist(dist: np.ndarray, K: int) -> np.ndarray:
    N = dist.shape[0]
    idx = np.arange(N)
    nn = np.empty((N, K))
    for j in range(N):
        others = idx[idx != j]
        # nearest first; equal distances go to the lower index
        order = np.lexsort((others, dist[j, others]))[:K]
        nn[j] = dist[j, others[order]]
    total = np.zeros(N)
    for k in range(K):
        total += nn[:, k]
    return np.array([math.exp(-(t / K)) for t in total])


def local_density(frames, K: int) -> np.ndarray:
    """``d_j = exp(-mean squared distance to the K nearest other frames)``."""
    x = _as_matrix(frames)
    _check_k(K, x.shape[0])
    return _density_from_dist(sq_dist_matrix(x), K)


def _distance_index_from_dist(dist: np.ndarray, d: np.ndarray, squared_far: bool) -> np.ndarray:
    N = dist.shape[0]
    gamma = np.empty(N)
    for j in range(N):
        denser = d > d[j]
        if denser.any():
            gamma[j] = dist[denser, j].min()
        else:
            far = dist[:, j].max()
            gamma[j] = far if squared_far else math.sqrt(far)
    return gamma


def distance_index(frames, d, squared_far: bool = True) -> np.ndarray:
    """Squared distance to the nearest strictly denser frame.

    A frame with no strictly denser frame gets its largest squared distance
    to any frame. ``squared_far=False`` takes the square root in that branch
    instead, which mixes units with the other branch.
    """
    x = _as_matrix(frames)
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (x.shape[0],):
        raise ValueError(f"density has shape {d.shape}, expected ({x.shape[0]},)")
    return _distance_index_from_dist(sq_dist_matrix(x), d, squared_far)


def rank_by_score(score: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties go to the lower index."""
    score = np.asarray(score)
    return np.lexsort((np.arange(score.size), -score))


def select_keyframes(frames, K: int = 6, Q: int = 12, squared_far: bool = True) -> KeyframeSelection:
    x = _as_matrix(frames)
    N = x.shape[0]
    if not 1 <= Q <= N:
        raise ValueError(f"Q={Q} outside 1..{N}")
    _check_k(K, N)
    dist = sq_dist_matrix(x)
    d = _density_from_dist(dist, K)
    gamma = _distance_index_from_dist(dist, d, squared_far)
    score = d * gamma
    selected = tuple(int(i) for i in rank_by_score(score)[:Q])
    return KeyframeSelection(d, gamma, score, selected)


@dataclass(frozen=True)
class GridLayout:
    w: int
    h: int
    order: tuple

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError("grid sides must be positive")
        if self.w * self.h != len(self.order):
            raise ValueError(f"{self.w}x{self.h} grid cannot hold {len(self.order)} frames")

    def rows(self) -> list:
        return [list(self.order[r * self.w : (r + 1) * self.w]) for r in range(self.h)]


def plan_grid(selection, w: int, h: int, temporal_order: Optional[Sequence] = None) -> GridLayout:
    """Place selected frames row-major in ascending temporal order.

    ``temporal_order[i]`` is the timestamp of frame ``i``; by default the frame
    index itself. Equal timestamps keep index order.
    """
    selected = list(selection.selected if isinstance(selection, KeyframeSelection) else selection)
    if w * h != len(selected):
        raise ValueError(f"grid {w}x{h} needs {w * h} frames, selection has {len(selected)}")
    if temporal_order is None:
        key = {i: i for i in selected}
    else:
        key = {i: temporal_order[i] for i in selected}
    return GridLayout(w, h, tuple(sorted(selected, key=lambda i: (key[i], i))))


@dataclass(frozen=True)
class CaptionRequest:
    video_id: str
    layout: GridLayout
    prompt: str = CAPTION_PROMPT

    def __post_init__(self):
        if self.prompt != CAPTION_PROMPT:
            raise ValueError("caption prompt differs from the canonical prompt")

    @property
    def frame_refs(self) -> tuple:
        return self.layout.order

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "grid": {"w": self.layout.w, "h": self.layout.h},
            "frame_refs": list(self.frame_refs),
            "prompt": self.prompt,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionRequest":
        layout = GridLayout(int(d["grid"]["w"]), int(d["grid"]["h"]), tuple(int(i) for i in d["frame_refs"]))
        return cls(d["video_id"], layout, d["prompt"])


def build_caption_request(video_id: str, layout: GridLayout) -> CaptionRequest:
    if not video_id:
        raise ValueError("video_id must be non-empty")
    return CaptionRequest(video_id, layout, CAPTION_PROMPT)


class CaptionTransportError(RuntimeError):
    """The caption backend could not be reached or gave an unusable reply."""


class CaptionBackend(Protocol):
    def caption(self, request: CaptionRequest) -> str: ...


class MockBackend:
    """Deterministic stand-in: a template over the video id and frame order."""

    def caption(self, request: CaptionRequest) -> str:
        frames = ", ".join(str(i) for i in request.frame_refs)
        return f"video {request.video_id}: frames {frames} shown in reading order"


class HttpBackend:
    """POSTs the request JSON to ``endpoint`` and reads ``{"text": ...}`` back.

    One attempt per call. Holds no per-call state, so one instance can be
    shared across threads.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def caption(self, request: CaptionRequest) -> str:
        req = urllib.request.Request(
            self.endpoint,
            data=request.to_json().encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except (urllib.error.URLError, socket.timeout, ConnectionError, ValueError) as exc:
            raise CaptionTransportError(f"caption request to {self.endpoint} failed: {exc}") from exc
        try:
            text = json.loads(body)["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CaptionTransportError(f"malformed caption reply from {self.endpoint}") from exc
        if not isinstance(text, str):
            raise CaptionTransportError(f"caption reply from {self.endpoint} has non-string text")
        return text


def submit_caption_request(request: CaptionRequest, backend: CaptionBackend) -> str:
    return backend.caption(request)


def augmented_pair(request: CaptionRequest, text: str) -> dict:
    """Record pairing a video with its generated description."""
    return {"video_id": request.video_id, "text": text, "selected_frames": list(request.frame_refs)}
