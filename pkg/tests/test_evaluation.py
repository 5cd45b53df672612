import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoloc3d.evaluation import (EvalReport, evaluate, f1_score, localization_metrics,
                                 recognition_metrics)
from egoloc3d.location_prior import LocationDistribution


def _onehot(dims, *cells):
    p = np.zeros(dims)
    for c in cells:
        p[c] = 1.0 / len(cells)
    return LocationDistribution(p)


def test_recognition_examples():
    assert recognition_metrics([0, 1, 2], [0, 1, 2], 3)[:2] == (1.0, 1.0)
    mca, top1, per = recognition_metrics([0, 0, 0, 0], [0, 0, 0, 1], 2)
    assert (top1, mca) == (0.75, 0.5) and per == {0: 1.0, 1: 0.0}
    labels = [0] * 9 + [1]
    mca, top1, _ = recognition_metrics([0] * 10, labels, 2)
    assert mca < top1
    with pytest.raises(ValueError):
        recognition_metrics([], [], 2)
    with pytest.raises(ValueError):
        recognition_metrics([0], [0, 1], 2)


def test_absent_classes_excluded_and_duplication_invariance():
    preds, labels = [0, 2, 2, 1], [0, 2, 1, 1]
    mca, _, per = recognition_metrics(preds, labels, 5)
    assert set(per) == {0, 1, 2}
    dup_p = preds + [p for p, y in zip(preds, labels) if y == 1]
    dup_y = labels + [y for y in labels if y == 1]
    assert recognition_metrics(dup_p, dup_y, 5)[0] == mca


def test_localization_examples():
    a = _onehot((2, 2, 1), (0, 0, 0), (0, 1, 0))
    b = _onehot((2, 2, 1), (0, 1, 0), (1, 1, 0))
    assert localization_metrics(a, b, (1, 1, 1), tau=0.1) == (0.5, 0.5, 0.5)
    assert localization_metrics(a, a, (1, 1, 1), tau=0.1) == (1.0, 1.0, 1.0)
    c = _onehot((2, 2, 1), (1, 0, 0))
    d = _onehot((2, 2, 1), (0, 0, 0))
    assert localization_metrics(c, d, (1, 1, 1)) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        localization_metrics(a, _onehot((2, 1, 1), (0, 0, 0)), (1, 1, 1))


def test_default_tau_is_uniform_density():
    # pooled 2x1x1 grid gives tau = 0.5; a cell sitting exactly on tau is not positive
    flat = LocationDistribution(np.full((4, 1, 1), 0.25))
    peaked = LocationDistribution(np.array([0.4, 0.3, 0.2, 0.1]).reshape(4, 1, 1))
    assert localization_metrics(flat, peaked, (2, 1, 1)) == (0.0, 0.0, 0.0)
    assert localization_metrics(peaked, peaked, (2, 1, 1)) == (1.0, 1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.001, 0.3))
def test_f1_formula_and_swap_symmetry(seed, tau):
    rng = np.random.default_rng(seed)
    a = LocationDistribution(rng.dirichlet(np.ones(16) * 0.3).reshape(4, 2, 2))
    b = LocationDistribution(rng.dirichlet(np.ones(16) * 0.3).reshape(4, 2, 2))
    P, R, F = localization_metrics(a, b, (2, 1, 2), tau)
    P2, R2, F2 = localization_metrics(b, a, (2, 1, 2), tau)
    assert (P, R) == (R2, P2) and F == F2
    assert 0 <= P <= 1 and 0 <= R <= 1
    if P + R > 0:
        assert abs(F - 2 * P * R / (P + R)) <= 1e-12
    else:
        assert F == 0.0


def test_f1_score_zero():
    assert f1_score(0.0, 0.0) == 0.0


class _ChanceModel:
    """Zero-weight stand-in exposing the estimator surface ``evaluate`` needs."""

    class config_:
        pool = (1, 1, 1)

    def __init__(self, n, dims):
        self.n_classes_ = n
        self.dims = dims

    def predict_all(self, X, env=None, n_jobs=1):
        k = len(X)
        return (np.zeros(k, np.int64), np.full((k, self.n_classes_), 1 / self.n_classes_),
                [LocationDistribution.uniform(self.dims) for _ in range(k)])


def test_evaluate_chance_level_and_report_formats():
    from egoloc3d.model import EpisodeClip
    rng = np.random.default_rng(0)
    N, n = 4, 800
    eps = [EpisodeClip(np.zeros((1, 4, 4, 1)), int(rng.integers(0, N)),
                       LocationDistribution.uniform((4, 4, 2))) for _ in range(n)]
    rep = evaluate(_ChanceModel(N, (4, 4, 2)), eps, factors=(2, 2, 1))
    bound = 3 * np.sqrt((1 / N) * (1 - 1 / N) / n)
    assert abs(rep.top1_acc - 1 / N) <= bound
    d = rep.to_dict()
    assert all(0 <= d[k] <= 1 for k in ("mean_class_acc", "top1_acc", "loc_precision",
                                         "loc_recall", "loc_f1"))
    assert json.loads(rep.to_json())["n_episodes"] == n
    text = rep.to_text()
    assert "top1_acc = " in text and "class_0_acc = " in text
    csv = rep.predictions_csv().splitlines()
    assert csv[0] == "episode,label,pred,top_voxel" and len(csv) == n + 1
    again = evaluate(_ChanceModel(N, (4, 4, 2)), eps, factors=(2, 2, 1))
    assert again.to_json() == rep.to_json()
    with pytest.raises(ValueError):
        evaluate(_ChanceModel(N, (4, 4, 2)), [])
