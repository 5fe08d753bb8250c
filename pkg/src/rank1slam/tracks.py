"""Track-file ingestion and the keyframe / expanding-window state machine."""
from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, Intrinsics, Rotation, pixel_to_bearing

log = logging.getLogger(__name__)

QUAT_TOL = 1e-6
DEFAULT_TRACK_RATIO = 0.30
DEFAULT_KEYFRAME_PARALLAX = np.radians(1.15)
DEFAULT_MIN_TRACKS = 8


class TrackFileError(ValueError):
    """Malformed track or pose-graph file; carries the offending line number."""

    def __init__(self, msg, lineno=None):
        self.lineno = lineno
        super().__init__(msg if lineno is None else "line %d: %s" % (lineno, msg))


class UndefinedParallaxError(ValueError):
    pass


@dataclass
class FeatureTrack:
    track_id: int
    observations: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class Frame:
    """Observations of one frame, sorted by track id."""

    frame_id: int
    ids: np.ndarray
    pixels: np.ndarray
    bearings: np.ndarray

    def __len__(self):
        return len(self.ids)

    def lookup(self, track_ids):
        """Row indices of ``track_ids`` (all must be present)."""
        return np.searchsorted(self.ids, track_ids)

    def subset(self, track_ids):
        idx = self.lookup(track_ids)
        return self.pixels[idx], self.bearings[idx]


@dataclass
class TrackData:
    intrinsics: Intrinsics
    frames: dict[int, Frame] = field(default_factory=dict)
    rotations: dict[int, Rotation] = field(default_factory=dict)
    ground_truth: dict[int, CameraPose] = field(default_factory=dict)

    @classmethod
    def from_observations(cls, intrinsics, obs, rotations=None, ground_truth=None):
        """Build from ``{frame_id: {track_id: (x, y)}}``."""
        frames = {}
        for fid in sorted(obs):
            tracks = obs[fid]
            ids = np.array(sorted(tracks), dtype=np.int64)
            px = np.array([tracks[t] for t in ids], dtype=float).reshape(-1, 2)
            frames[fid] = Frame(fid, ids, px, pixel_to_bearing(px, intrinsics).reshape(-1, 3))
        return cls(intrinsics, frames, dict(rotations or {}), dict(ground_truth or {}))

    @property
    def frame_ids(self) -> list[int]:
        return sorted(self.frames)

    def tracks(self) -> dict[int, FeatureTrack]:
        out: dict[int, FeatureTrack] = {}
        for fid in self.frame_ids:
            fr = self.frames[fid]
            for tid, px in zip(fr.ids, fr.pixels):
                out.setdefault(int(tid), FeatureTrack(int(tid))).observations[fid] = px
        return out

    def frame(self, fid) -> Frame:
        fr = self.frames.get(fid)
        if fr is None:
            fr = Frame(fid, np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 3)))
        return fr


def _floats(parts, lineno, n):
    if len(parts) != n:
        raise TrackFileError("expected %d fields, got %d" % (n, len(parts)), lineno)
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise TrackFileError(str(exc), lineno) from None


def _frame_id(tok, lineno):
    try:
        v = int(tok)
    except ValueError:
        raise TrackFileError("bad frame id %r" % tok, lineno) from None
    if v < 0:
        raise TrackFileError("negative frame id", lineno)
    return v


def read_quaternion(vals, lineno) -> Rotation:
    q = np.asarray(vals, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise TrackFileError("quaternion not normalized", lineno)
    return Rotation(q)


def ingest_track_file(stream) -> TrackData:
    """Parse a track file from a path, a text stream or a string."""
    if isinstance(stream, os.PathLike) or (isinstance(stream, str) and "\n" not in stream):
        with open(stream) as fh:
            return ingest_track_file(fh)
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    intrinsics = None
    obs: dict[int, dict[int, tuple]] = {}
    rots: dict[int, Rotation] = {}
    gt: dict[int, CameraPose] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, args = parts[0], parts[1:]
        if intrinsics is None and kind != "intrinsics":
            raise TrackFileError("missing intrinsics header", lineno)
        if kind == "intrinsics":
            if intrinsics is not None:
                raise TrackFileError("duplicate intrinsics record", lineno)
            fx, fy, cx, cy, w, h = _floats(args, lineno, 6)
            if w != int(w) or h != int(h):
                raise TrackFileError("image size must be integral", lineno)
            try:
                intrinsics = Intrinsics(fx, fy, cx, cy, int(w), int(h))
            except ValueError as exc:
                raise TrackFileError(str(exc), lineno) from None
        elif kind == "obs":
            if len(args) != 4:
                raise TrackFileError("obs needs 4 fields", lineno)
            fid = _frame_id(args[0], lineno)
            tid = _frame_id(args[1], lineno)
            x, y = _floats(args[2:], lineno, 2)
            per = obs.setdefault(fid, {})
            if tid in per:
                raise TrackFileError("duplicate observation of track %d in frame %d" % (tid, fid), lineno)
            per[tid] = (x, y)
        elif kind == "rot":
            if len(args) != 5:
                raise TrackFileError("rot needs 5 fields", lineno)
            fid = _frame_id(args[0], lineno)
            if fid in rots:
                raise TrackFileError("duplicate rot record", lineno)
            rots[fid] = read_quaternion(_floats(args[1:], lineno, 4), lineno)
        elif kind == "gt":
            if len(args) != 8:
                raise TrackFileError("gt needs 8 fields", lineno)
            fid = _frame_id(args[0], lineno)
            if fid in gt:
                raise TrackFileError("duplicate gt record", lineno)
            vals = _floats(args[1:], lineno, 7)
            gt[fid] = CameraPose(read_quaternion(vals[:4], lineno), vals[4:])
        else:
            raise TrackFileError("unknown record type %r" % kind, lineno)
    if intrinsics is None:
        raise TrackFileError("missing intrinsics header")
    return TrackData.from_observations(intrinsics, obs, rots, gt)


def _fmt(x) -> str:
    # repr of a float is the shortest string that round-trips exactly
    return repr(float(x))


def format_track_file(data: TrackData, header: str | None = None) -> str:
    K = data.intrinsics
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.append("intrinsics %s %s %s %s %d %d" % (_fmt(K.fx), _fmt(K.fy), _fmt(K.cx), _fmt(K.cy),
                                                 K.width, K.height))
    for fid in sorted(data.rotations):
        q = data.rotations[fid].quat
        lines.append("rot %d %s" % (fid, " ".join(_fmt(v) for v in q)))
    for fid in sorted(data.ground_truth):
        p = data.ground_truth[fid]
        vals = list(p.rotation.quat) + list(p.position)
        lines.append("gt %d %s" % (fid, " ".join(_fmt(v) for v in vals)))
    for fid in data.frame_ids:
        fr = data.frames[fid]
        for tid, (x, y) in zip(fr.ids, fr.pixels):
            lines.append("obs %d %d %s %s" % (fid, tid, _fmt(x), _fmt(y)))
    return "\n".join(lines) + "\n"


def write_track_file(data: TrackData, path, header=None):
    with open(path, "w") as fh:
        fh.write(format_track_file(data, header))


def median_parallax(bearings_a, bearings_b, R_a=None, R_b=None) -> float:
    """Median angle (radians) between paired view rays after rotating both
    into the world frame with world-to-camera rotations ``R_a``, ``R_b``."""
    a = np.asarray(bearings_a, dtype=float).reshape(-1, 3)
    b = np.asarray(bearings_b, dtype=float).reshape(-1, 3)
    if len(a) == 0:
        raise UndefinedParallaxError("no shared tracks")
    if R_a is not None:
        a = a @ _as_matrix(R_a)
    if R_b is not None:
        b = b @ _as_matrix(R_b)
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    dot = np.einsum("ij,ij->i", a, b)
    return float(np.median(np.arctan2(cross, dot)))


def _as_matrix(R):
    return R.matrix if isinstance(R, Rotation) else np.asarray(R, dtype=float)


def frame_parallax(data: TrackData, fa: int, fb: int, rotations) -> float:
    A, B = data.frame(fa), data.frame(fb)
    shared = np.intersect1d(A.ids, B.ids)
    _, ba = A.subset(shared)
    _, bb = B.subset(shared)
    return median_parallax(ba, bb, rotations[fa], rotations[fb])


@dataclass(frozen=True)
class LocalWindow:
    keyframe_id: int
    member_frames: tuple
    keyframe_tracks: frozenset
    tracks_full: frozenset
    frame_tracks: dict = field(hash=False, compare=False, repr=False)

    @classmethod
    def start(cls, keyframe_id, keyframe_tracks) -> LocalWindow:
        kt = frozenset(int(t) for t in keyframe_tracks)
        return cls(keyframe_id, (keyframe_id,), kt, kt, {keyframe_id: kt})

    @property
    def tracks_partial(self) -> frozenset:
        """Keyframe tracks seen in some but not all other member frames."""
        seen = set()
        for f in self.member_frames[1:]:
            seen |= self.frame_tracks[f] & self.keyframe_tracks
        return frozenset(seen - self.tracks_full)

    def expanded(self, frame_id, track_ids) -> LocalWindow:
        tr = frozenset(int(t) for t in track_ids)
        ft = dict(self.frame_tracks)
        ft[frame_id] = tr
        return LocalWindow(self.keyframe_id, self.member_frames + (frame_id,), self.keyframe_tracks,
                           self.tracks_full & tr, ft)


@dataclass(frozen=True)
class WindowDecision:
    """Outcome of offering a frame to a window.

    ``expand`` False means the old window closed and ``window`` is the new one
    anchored at ``new_keyframe_id``; ``low_parallax`` marks a fallback keyframe
    that did not reach the parallax threshold.
    """

    expand: bool
    window: LocalWindow
    closed: LocalWindow | None = None
    new_keyframe_id: int | None = None
    low_parallax: bool = False
    reason: str = ""


def update_window(window: LocalWindow, frame_id: int, track_ids, parallax_to,
                  ratio=DEFAULT_TRACK_RATIO, min_parallax=DEFAULT_KEYFRAME_PARALLAX,
                  min_tracks=DEFAULT_MIN_TRACKS) -> WindowDecision:
    """Offer frame ``frame_id`` observing ``track_ids`` to ``window``.

    ``parallax_to(candidate_id)`` returns the median parallax between a member
    frame and the new frame (raising UndefinedParallaxError without overlap).
    """
    if frame_id <= window.member_frames[-1]:
        raise ValueError("frame ids must increase")
    tr = frozenset(int(t) for t in track_ids)
    tracked = len(window.keyframe_tracks & tr)
    frac = tracked / max(len(window.keyframe_tracks), 1)
    full_after = window.tracks_full & tr
    if frac > ratio and len(full_after) >= min_tracks:
        return WindowDecision(True, window.expanded(frame_id, tr))

    reason = "tracked fraction %.3f" % frac if frac <= ratio else "insufficient support"
    candidates = list(reversed(window.member_frames[1:]))
    chosen, low = None, False
    for cand in candidates:
        try:
            if parallax_to(cand) >= min_parallax:
                chosen = cand
                break
        except UndefinedParallaxError:
            continue
    if chosen is None:
        low = True
        chosen = candidates[0] if candidates else frame_id
        log.warning("no keyframe candidate reaches %.3f deg parallax; using frame %d",
                    np.degrees(min_parallax), chosen)
    if chosen == frame_id:
        new = LocalWindow.start(frame_id, tr)
    else:
        pos = window.member_frames.index(chosen)
        new = LocalWindow.start(chosen, window.frame_tracks[chosen])
        for f in window.member_frames[pos + 1:]:
            new = new.expanded(f, window.frame_tracks[f])
        new = new.expanded(frame_id, tr)
    return WindowDecision(False, new, closed=window, new_keyframe_id=chosen, low_parallax=low,
                          reason=reason)
