import io
import itertools
import math

import numpy as np
import pytest

from egoloc3d.location_prior import (CameraTrack, LocationDistribution, downsample_distribution,
                                     make_prior, parse_track, write_track)
from egoloc3d.mesh_env import GridSpec


def _grid(n=(5, 5, 5)):
    return GridSpec((0, 0, 0), tuple(float(v) for v in n), n)


def _brute_prior(cells, dims, sigma):
    """Direct kernel sum: every grid cell against every key-frame cell."""
    r = math.ceil(3 * sigma)
    out = np.zeros(dims)
    for c in cells:
        for idx in itertools.product(*(range(d) for d in dims)):
            off = [i - j for i, j in zip(idx, c)]
            if max(abs(o) for o in off) <= r:
                out[idx] += math.exp(-sum(o * o for o in off) / (2 * sigma ** 2)) / len(cells)
    return out / out.sum()


def test_empty_track_is_uniform():
    d = make_prior(CameraTrack([]), _grid((2, 2, 2)))
    assert np.allclose(d.probs, 1 / 8) and not d.uniform_fallback


def test_all_outside_falls_back_with_flag():
    d = make_prior(CameraTrack([(0, (9, 9, 9)), (3, (-1, 0, 0))]), _grid((2, 2, 2)))
    assert np.allclose(d.probs, 1 / 8) and d.uniform_fallback


def test_delta_limit():
    d = make_prior(CameraTrack([(0, (2.5, 2.5, 2.5))]), _grid(), sigma=1e-6)
    expected = np.zeros((5, 5, 5))
    expected[2, 2, 2] = 1
    assert np.allclose(d.probs, expected, atol=1e-9, rtol=0)


def test_matches_brute_force_kernel_sum():
    d = make_prior(CameraTrack([(0, (0.2, 4.1, 2.5))]), _grid(), sigma=1.0)
    assert np.allclose(d.probs, _brute_prior([(0, 4, 2)], (5, 5, 5), 1.0), atol=1e-12)


def test_key_frames_are_averaged_and_outside_ones_skipped():
    track = CameraTrack([(0, (0.5, 0.5, 0.5)), (4, (3.5, 1.5, 4.5)), (7, (50, 0, 0))])
    d = make_prior(track, _grid(), sigma=0.7)
    ref = _brute_prior([(0, 0, 0), (3, 1, 4)], (5, 5, 5), 0.7)
    assert np.allclose(d.probs, ref, atol=1e-12)
    assert not d.uniform_fallback


def test_argmax_kept_far_from_boundary():
    g = _grid((9, 9, 9))
    d = make_prior(CameraTrack([(0, (4.5, 4.2, 4.9))]), g, sigma=1.0)
    assert d.argmax() == (4, 4, 4)


def test_invalid_sigma_and_track():
    with pytest.raises(ValueError):
        make_prior(CameraTrack([]), _grid(), sigma=0)
    with pytest.raises(ValueError):
        CameraTrack([(3, (0, 0, 0)), (3, (1, 1, 1))])
    with pytest.raises(ValueError):
        CameraTrack([(0, (0, float("inf"), 0))])


def test_downsample_examples():
    d = downsample_distribution(LocationDistribution.uniform((4, 4, 2)), 4, 4, 2)
    assert d.dims == (1, 1, 1) and abs(d.probs[0, 0, 0] - 1) < 1e-12
    rng = np.random.default_rng(0)
    p = rng.random((28, 28, 8))
    d = downsample_distribution(LocationDistribution(p / p.sum()), 4, 4, 2)
    assert d.dims == (7, 7, 4) and abs(d.probs.sum() - 1) < 1e-9
    with pytest.raises(ValueError):
        downsample_distribution(LocationDistribution.uniform((5, 4, 2)), 4, 4, 2)


def test_track_round_trip_and_errors():
    track = CameraTrack([(1, (0.1, 2.0, -3.25)), (10, (1e-17, 5.0, 7.0))])
    buf = io.StringIO()
    write_track(track, buf)
    back = parse_track(buf.getvalue())
    assert back.key_frames == track.key_frames
    assert len(parse_track("track\n")) == 0
    with pytest.raises(ValueError, match="header"):
        parse_track("k 0 1 2 3\n")
    with pytest.raises(ValueError, match="line 2"):
        parse_track("track\nk 0 1 2\n")
