"""Randomized distribution invariants."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egoloc3d import diffcore as dc
from egoloc3d.location_prior import CameraTrack, LocationDistribution, downsample_distribution, make_prior
from egoloc3d.mesh_env import GridSpec

TRIALS = settings(max_examples=1000, deadline=None)

dims3 = st.tuples(*[st.integers(1, 5)] * 3)
finite = st.floats(-30, 30, allow_nan=False)


@st.composite
def distributions(draw, dims=None):
    dims = dims or draw(dims3)
    w = draw(arrays(np.float64, dims, elements=st.floats(0, 1, allow_nan=False)))
    # sparse supports happen: some cells exactly zero
    w = w + (w.sum() == 0)
    return w / w.sum()


@TRIALS
@given(dims3.flatmap(lambda d: arrays(np.float64, d, elements=finite)))
def test_softmax_grid_sums_to_one(z):
    s = dc.softmax_grid(dc.Tensor(z)).value
    assert abs(s.sum() - 1) <= 1e-9 and np.all(s >= 0)


@TRIALS
@given(distributions(), st.floats(0.05, 10), st.integers(0, 2 ** 32 - 1))
def test_gumbel_softmax_sums_to_one(r, theta, seed):
    s = dc.gumbel_softmax(dc.Tensor(r), theta, np.random.default_rng(seed)).value
    assert abs(s.sum() - 1) <= 1e-9 and np.all(s >= 0)


@TRIALS
@given(dims3, st.floats(0.05, 3), st.lists(st.tuples(*[st.floats(-1, 6)] * 3), max_size=4))
def test_make_prior_sums_to_one(dims, sigma, points):
    grid = GridSpec((0, 0, 0), tuple(float(d) for d in dims), dims)
    d = make_prior(CameraTrack([(i, p) for i, p in enumerate(points)]), grid, sigma)
    assert abs(d.probs.sum() - 1) <= 1e-9 and np.all(d.probs >= 0)


@TRIALS
@given(st.tuples(*[st.integers(1, 3)] * 3), st.tuples(*[st.integers(1, 3)] * 3), st.data())
def test_downsample_sums_to_one(blocks, factors, data):
    p = data.draw(distributions(tuple(b * f for b, f in zip(blocks, factors))))
    d = downsample_distribution(LocationDistribution(p), *factors)
    assert d.dims == blocks and abs(d.probs.sum() - 1) <= 1e-9


@TRIALS
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(distributions((n, 1, 1)), distributions((n, 1, 1)))))
def test_kl_nonnegative_and_zero_on_self(pq):
    p, q = pq
    assert dc.kl_divergence(dc.Tensor(p), q).item() >= 0
    assert abs(dc.kl_divergence(dc.Tensor(p), p).item()) <= 1e-12
