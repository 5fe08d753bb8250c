import math

import numpy as np
import pytest

from rank1slam.geometry import Rotation, exp_so3
from rank1slam.synth import SceneConfig, make_dataset
from rank1slam.tracks import (LocalWindow, TrackFileError, UndefinedParallaxError, format_track_file,
                              frame_parallax, ingest_track_file, median_parallax, update_window)

from conftest import unit

HEADER = "intrinsics 500 500 320 240 640 480\n"


def test_only_intrinsics():
    data = ingest_track_file(HEADER)
    assert data.intrinsics.fx == 500 and data.frames == {}


def test_round_trip_synth():
    cfg = SceneConfig(motion="circular", seed=2, rotation_noise_deg=0.3, n_frames=6)
    _, data = make_dataset(cfg)
    text = format_track_file(data, header="generated")
    back = ingest_track_file(text)
    assert back.intrinsics == data.intrinsics
    assert back.frame_ids == data.frame_ids
    for f in data.frame_ids:
        assert np.array_equal(back.frame(f).ids, data.frame(f).ids)
        assert np.array_equal(back.frame(f).pixels, data.frame(f).pixels)
        assert np.array_equal(back.rotations[f].quat, data.rotations[f].quat)
        assert np.array_equal(back.ground_truth[f].position, data.ground_truth[f].position)
    assert format_track_file(back, header="generated") == text


@pytest.mark.parametrize("body,line", [
    ("obs 0 1 2.0 3.0\nobs 0 1 4.0 5.0\n", 3),
    ("obs 0 1 2.0\n", 2),
    ("obs -1 1 2.0 3.0\n", 2),
    ("rot 0 1 1 0 0\n", 2),
    ("frob 1\n", 2),
    ("intrinsics 500 500 320 240 640 480\n", 2),
])
def test_parse_errors_carry_line_number(body, line):
    with pytest.raises(TrackFileError) as ei:
        ingest_track_file(HEADER + body)
    assert ei.value.lineno == line


def test_missing_intrinsics():
    with pytest.raises(TrackFileError):
        ingest_track_file("obs 0 1 2.0 3.0\n")
    with pytest.raises(TrackFileError):
        ingest_track_file("# nothing\n\n")


def test_quaternion_normalized_on_read():
    data = ingest_track_file(HEADER + "rot 0 1.0 2e-7 0 0\n")
    assert abs(np.linalg.norm(data.rotations[0].quat) - 1) < 1e-15


def test_median_parallax_identical_frames(rng):
    b = unit(rng, 10)
    assert median_parallax(b, b) == 0.0
    with pytest.raises(UndefinedParallaxError):
        median_parallax(np.zeros((0, 3)), np.zeros((0, 3)))


def test_median_parallax_brute_force(rng):
    a = unit(rng, 31)
    b = unit(rng, 31)
    Ra = exp_so3(unit(rng) * 0.4)
    Rb = exp_so3(unit(rng) * 0.7)
    ref = np.median([math.acos(np.clip((Ra.matrix.T @ x) @ (Rb.matrix.T @ y), -1, 1)) for x, y in zip(a, b)])
    assert abs(median_parallax(a, b, Ra, Rb) - ref) < 1e-9


def test_median_parallax_rotation_compensated(rng):
    # a pure rotation has zero parallax once compensated
    b = unit(rng, 20)
    R = exp_so3([0.1, 0.2, -0.3])
    assert median_parallax(b, b @ R.matrix.T, Rotation.identity(), R) < 1e-12


def _window(kf_tracks):
    return LocalWindow.start(0, kf_tracks)


def test_expand_all_tracked():
    w = _window(range(100))
    d = update_window(w, 1, range(100), lambda c: 0.0)
    assert d.expand and d.window.member_frames == (0, 1)


def test_close_at_ten_percent():
    w = _window(range(100)).expanded(1, range(100))
    d = update_window(w, 2, range(10), lambda c: 1.0)
    assert not d.expand and d.new_keyframe_id == 1
    assert d.window.member_frames == (1, 2)


def test_exactly_thirty_percent_closes():
    w = _window(range(100))
    d = update_window(w, 1, range(30), lambda c: 1.0)
    assert not d.expand
    d = update_window(w, 1, range(31), lambda c: 1.0)
    assert d.expand


def test_keyframe_is_most_recent_with_parallax():
    w = _window(range(100))
    for f in (1, 2, 3):
        w = w.expanded(f, range(100))
    par = {1: math.radians(2.0), 2: math.radians(1.2), 3: math.radians(0.5)}
    d = update_window(w, 4, range(5), lambda c: par[c])
    assert d.new_keyframe_id == 2 and not d.low_parallax
    assert d.window.member_frames == (2, 3, 4)
    d = update_window(w, 4, range(5), lambda c: 0.0)
    assert d.low_parallax and d.new_keyframe_id == 3


def test_tracks_full_monotone(rng):
    w = _window(range(200))
    sizes = [len(w.tracks_full)]
    for f in range(1, 20):
        tr = np.flatnonzero(rng.random(200) < 0.9)
        d = update_window(w, f, tr, lambda c: 1.0, min_tracks=1)
        if not d.expand:
            break
        w = d.window
        sizes.append(len(w.tracks_full))
        assert w.tracks_full <= w.keyframe_tracks
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_windows_partition_sequence():
    cfg = SceneConfig(motion="forward", depth="close", n_frames=60, camera_interval=0.3, seed=1,
                      pixel_noise_sigma=0.0)
    _, data = make_dataset(cfg)
    rots = data.rotations
    w = LocalWindow.start(0, data.frame(0).ids)
    windows = []
    for f in data.frame_ids[1:]:
        d = update_window(w, f, data.frame(f).ids, lambda c, f=f: frame_parallax(data, c, f, rots))
        if not d.expand:
            windows.append(w)
        w = d.window
    windows.append(w)
    assert len(windows) > 1
    members = [f for win in windows for f in win.member_frames[1:]]
    keys = [win.keyframe_id for win in windows]
    # every non-keyframe member is covered, keyframes anchor one window each
    assert len(set(keys)) == len(keys)
    assert set(members) | set(keys) == set(data.frame_ids)


def test_frame_ids_must_increase():
    w = _window(range(10)).expanded(3, range(10))
    with pytest.raises(ValueError):
        update_window(w, 2, range(10), lambda c: 0.0)
