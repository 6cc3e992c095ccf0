"""Storyboards to interleaved text/video token sequences.

A storyboard file is UTF-8 text with ``<scene start>`` / ``<scene end>`` on
their own lines; inside a scene, paragraphs (one per segment) are separated by
blank lines. Each paragraph becomes one sequence segment: its text tokens
followed by its video tokens. Consecutive segments share ``overlap_frames``
frames of video: the later segment's first frame(s) are the earlier segment's
last frame(s). Shared tokens are stored once in the flat sequence and belong to
both segments in the attention mask.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .baselines import AttentionMask

SCENE_START = "<scene start>"
SCENE_END = "<scene end>"

# token ids: specials, then one id per byte, then video ids
PAD, NULL_TEXT, QUERY_MARK = 0, 1, 2
N_SPECIAL = 4
BYTE_BASE = N_SPECIAL
VIDEO_BASE = BYTE_BASE + 256

AVG_PARAGRAPH_TOKENS = 132


class StoryboardError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Storyboard:
    scenes: list  # list of scenes; each a list of paragraph strings

    @property
    def paragraphs(self) -> list[str]:
        return [p for scene in self.scenes for p in scene]

    @property
    def n_segments(self) -> int:
        return sum(len(s) for s in self.scenes)

    def scene_of_segment(self) -> list[int]:
        return [i for i, scene in enumerate(self.scenes) for _ in scene]


def parse_storyboard(text: str) -> Storyboard:
    """Parse the scene-marked storyboard format; raises StoryboardError with a line number."""
    scenes: list = []
    current: Optional[list] = None
    opened_at = None
    para: list[str] = []

    def flush():
        if para:
            current.append("\n".join(para))
            para.clear()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line == SCENE_START:
            if current is not None:
                raise StoryboardError(f"nested {SCENE_START} (scene opened at line {opened_at} is still open)", lineno)
            current, opened_at = [], lineno
        elif line == SCENE_END:
            if current is None:
                raise StoryboardError(f"{SCENE_END} without a matching {SCENE_START}", lineno)
            flush()
            if not current:
                raise StoryboardError(f"empty scene (opened at line {opened_at})", lineno)
            scenes.append(current)
            current = None
        elif not line:
            if current is not None:
                flush()
        else:
            if current is None:
                raise StoryboardError("text outside of any scene", lineno)
            para.append(line)
    if current is not None:
        raise StoryboardError(f"unclosed {SCENE_START}", opened_at)
    if not scenes:
        raise StoryboardError("storyboard has no scenes")
    return Storyboard(scenes)


def serialize_storyboard(sb: Storyboard) -> str:
    blocks = [f"{SCENE_START}\n" + "\n\n".join(scene) + f"\n{SCENE_END}\n" for scene in sb.scenes]
    return "\n".join(blocks)


@dataclass
class FreeTextPrompt:
    """A plot summary (format 1) or a sentence-per-segment plot (format 2)."""

    format: int
    sentences: list
    scene_hints: list = field(default_factory=list)


_SENT = re.compile(r"(?<=[.!?])\s+")
_HINT = re.compile(r"^\s*(scene\s*\d+[^:]*):", re.IGNORECASE | re.MULTILINE)


def parse_prompt(text: str) -> Union[Storyboard, FreeTextPrompt]:
    """Storyboards are parsed strictly; anything without scene markers is free text.

    Free text with scene labels or at least 10 sentences counts as format 2,
    shorter summaries as format 1. Free text is not converted to a storyboard.
    """
    if SCENE_START in text or SCENE_END in text:
        return parse_storyboard(text)
    hints = [h.strip() for h in _HINT.findall(text)]
    body = _HINT.sub("", text)
    sentences = [s.strip() for s in _SENT.split(body.strip()) if s.strip()]
    fmt = 2 if hints or len(sentences) >= 10 else 1
    return FreeTextPrompt(fmt, sentences, hints)


def tokenize_text(paragraph: str) -> np.ndarray:
    """Byte-level ids (UTF-8 byte + offset)."""
    if not paragraph:
        raise ValueError("cannot tokenize an empty paragraph")
    return np.frombuffer(paragraph.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_BASE


def detokenize_text(ids) -> str:
    ids = np.asarray(ids)
    ids = ids[(ids >= BYTE_BASE) & (ids < VIDEO_BASE)]
    return (ids - BYTE_BASE).astype(np.uint8).tobytes().decode("utf-8", errors="replace")


@dataclass(frozen=True)
class ProfileConfig:
    tokens_per_frame: int
    frames_per_segment: int
    text_tokens_per_segment: int
    overlap_frames: int = 1
    name: str = "custom"

    def __post_init__(self):
        if self.tokens_per_frame < 1 or self.frames_per_segment < 1:
            raise ValueError("tokens_per_frame and frames_per_segment must be positive")
        if self.text_tokens_per_segment < 0 or self.overlap_frames < 0:
            raise ValueError("text length and overlap must be non-negative")
        if self.overlap_frames >= self.frames_per_segment:
            raise ValueError("overlap_frames must be smaller than frames_per_segment")

    @property
    def video_tokens_per_segment(self) -> int:
        return self.frames_per_segment * self.tokens_per_frame

    @property
    def overlap_tokens(self) -> int:
        return self.overlap_frames * self.tokens_per_frame

    def video_tokens(self, n_segments: int) -> int:
        """Distinct video tokens for ``n_segments`` (shared frames counted once)."""
        if n_segments < 1:
            return 0
        return n_segments * self.video_tokens_per_segment - (n_segments - 1) * self.overlap_tokens

    def context_length(self, n_segments: int) -> int:
        return self.video_tokens(n_segments) + n_segments * self.text_tokens_per_segment


# 13 latent frames of 1350 tokens per 3-second segment; text is excluded so the
# 21-segment context equals the 63-second row of the fine-tuning table
FULL_SCALE = ProfileConfig(tokens_per_frame=1350, frames_per_segment=13, text_tokens_per_segment=0,
                           overlap_frames=1, name="full-scale")
TOY = ProfileConfig(tokens_per_frame=4, frames_per_segment=3, text_tokens_per_segment=5,
                    overlap_frames=1, name="toy")
PROFILES = {"full-scale": FULL_SCALE, "toy": TOY}


@dataclass(frozen=True)
class Span:
    segment: int
    scene: int
    text_start: int
    text_len: int
    video_start: int   # first token of this segment's own (unshared) video
    video_len: int
    shared_start: int  # frames aliased from the previous segment
    shared_len: int

    @property
    def start(self) -> int:
        return self.shared_start if self.shared_len else self.text_start

    @property
    def end(self) -> int:
        return self.video_start + self.video_len

    def video_indices(self) -> np.ndarray:
        own = np.arange(self.video_start, self.video_start + self.video_len)
        if not self.shared_len:
            return own
        return np.concatenate([np.arange(self.shared_start, self.shared_start + self.shared_len), own])


@dataclass
class InterleavedSequence:
    tokens: np.ndarray
    spans: list
    segment_of: np.ndarray       # owning segment of each token
    last_segment_of: np.ndarray  # last segment containing the token (> owner for shared frames)
    scene_of: list

    @property
    def n_segments(self) -> int:
        return len(self.spans)

    def __len__(self) -> int:
        return int(self.tokens.size)

    def segments_of(self, t: int) -> range:
        return range(int(self.segment_of[t]), int(self.last_segment_of[t]) + 1)


VideoSource = Union[Callable[[int, int], np.ndarray], Sequence[np.ndarray], None]


def placeholder_video(segment: int, n_tokens: int) -> np.ndarray:
    """Deterministic stand-in video ids for one segment."""
    return VIDEO_BASE + (np.arange(n_tokens, dtype=np.int64) + segment * n_tokens) % 4096


def assemble_sequence(sb: Storyboard, profile: ProfileConfig, video_source: VideoSource = None) -> InterleavedSequence:
    """Concatenate per-paragraph segments (text then video) into one flat sequence.

    ``video_source`` gives each segment's ``frames_per_segment * tokens_per_frame``
    video ids, as a sequence or a ``(segment, n_tokens) -> ids`` callable. For
    segments after the first, the leading shared frames are taken from the
    previous segment and the source's own leading frames are dropped.
    """
    n = sb.n_segments
    nv = profile.video_tokens_per_segment
    if video_source is None:
        video_source = placeholder_video
    if callable(video_source):
        videos = [np.asarray(video_source(i, nv), dtype=np.int64) for i in range(n)]
    else:
        videos = [np.asarray(v, dtype=np.int64) for v in video_source]
        if len(videos) != n:
            raise ValueError(f"video source has {len(videos)} segments, storyboard has {n}")
    for i, v in enumerate(videos):
        if v.size != nv:
            raise ValueError(f"segment {i}: expected {nv} video tokens, got {v.size}")

    ov = profile.overlap_tokens
    nt = profile.text_tokens_per_segment
    scene_of = sb.scene_of_segment()
    pieces, spans = [], []
    owner, last = [], []
    pos = 0
    prev_tail = None
    for i, para in enumerate(sb.paragraphs):
        text = _fit(tokenize_text(para), nt)
        shared = ov if i > 0 else 0
        own_video = videos[i][shared:]
        shared_start = prev_tail if shared else pos
        span = Span(i, scene_of[i], pos, nt, pos + nt, own_video.size, shared_start, shared)
        spans.append(span)
        pieces += [text, own_video]
        owner += [i] * (nt + own_video.size)
        last += [i] * (nt + own_video.size)
        if shared:
            for t in range(shared_start, shared_start + shared):
                last[t] = i
        pos += nt + own_video.size
        prev_tail = pos - ov
    tokens = np.concatenate(pieces) if pieces else np.zeros(0, np.int64)
    return InterleavedSequence(tokens, spans, np.asarray(owner), np.asarray(last), scene_of)


def _fit(ids: np.ndarray, n: int) -> np.ndarray:
    if ids.size >= n:
        return ids[:n]
    return np.concatenate([ids, np.full(n - ids.size, PAD, dtype=np.int64)])


TEXT_DROPOUT = 0.1


def drop_text(seq: InterleavedSequence, rng: np.random.Generator, p: float = TEXT_DROPOUT) -> InterleavedSequence:
    """Independently per segment, replace the whole text span with ``NULL_TEXT`` with probability ``p``.

    The null id has its own (learned) embedding; spans, masks and video tokens are untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    tokens = seq.tokens.copy()
    for sp, drop in zip(seq.spans, rng.random(len(seq.spans)) < p):
        if drop:
            tokens[sp.text_start:sp.text_start + sp.text_len] = NULL_TEXT
    return InterleavedSequence(tokens, seq.spans, seq.segment_of, seq.last_segment_of, seq.scene_of)


def build_local_mask(seq: InterleavedSequence) -> AttentionMask:
    """Token t admits s iff they share a segment (shared frames belong to two)."""
    starts = np.array([s.start for s in seq.spans])
    ends = np.array([s.end for s in seq.spans])
    return AttentionMask(starts[seq.segment_of], ends[seq.last_segment_of], kind="local")


def write_sequence(seq: InterleavedSequence, stem: Union[str, Path]) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (one row per segment) and ``<stem>.tokens.bin`` (little-endian int32)."""
    stem = Path(stem)
    csv_path = stem.with_suffix(".csv")
    bin_path = stem.with_suffix(".tokens.bin")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "scene", "text_start", "text_len", "video_start", "video_len",
                    "shared_start", "shared_len"])
        for s in seq.spans:
            w.writerow([s.segment, s.scene, s.text_start, s.text_len, s.video_start, s.video_len,
                        s.shared_start, s.shared_len])
    seq.tokens.astype("<i4").tofile(bin_path)
    return csv_path, bin_path


def read_tokens(path: Union[str, Path]) -> np.ndarray:
    return np.fromfile(path, dtype="<i4").astype(np.int64)
