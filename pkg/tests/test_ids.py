import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distbvnet import ids
from distbvnet.ids import BENIGN, MALICIOUS, FlowFeatures, FlowSchema, ForestConfig

C_256 = 10.244770920116851  # 2*(ln 255 + 0.5772156649) - 2*255/256, evaluated separately


def test_normalizer_base_cases():
    assert ids.avg_path_normalizer(1) == 0.0
    assert ids.avg_path_normalizer(0) == 0.0
    assert ids.avg_path_normalizer(2) == 1.0


def test_normalizer_256():
    assert ids.avg_path_normalizer(256) == pytest.approx(C_256, rel=1e-12)


def test_score_half_when_path_equals_normalizer():
    for n in (2, 10, 64, 256):
        assert ids.score_from_path_length(ids.avg_path_normalizer(n), n) == pytest.approx(0.5, abs=1e-15)


def test_score_tends_to_one_for_short_paths():
    assert ids.score_from_path_length(1e-9, 256) == pytest.approx(1.0, abs=1e-9)


def test_constant_data_gives_leaf_only_trees():
    X = np.ones((1000, 3))
    forest = ids.fit(X, ForestConfig(n_trees=10, subsample_size=256), seed=0)
    assert all(t.is_leaf_only and t.size[0] == 256 for t in forest.trees)
    scores = forest.score_samples(X[:5])
    assert np.allclose(scores, 0.5)


def test_fit_is_deterministic():
    X, _ = ids.synthetic_flows(seed=3)
    cfg = ForestConfig(n_trees=20, subsample_size=64)
    a = ids.fit(X, cfg, seed=11).score_samples(X)
    b = ids.fit(X, cfg, seed=11).score_samples(X)
    assert np.array_equal(a, b)
    c = ids.fit(X, cfg, seed=12).score_samples(X)
    assert not np.array_equal(a, c)


def test_outliers_outscore_inliers_seed_42():
    X, labels = ids.synthetic_flows(seed=42)
    scores = ids.fit(X, ForestConfig(n_trees=100, subsample_size=256), seed=42).score_samples(X)
    lab = np.array(labels)
    assert scores[lab == MALICIOUS].min() > scores[lab == BENIGN].max()


def test_five_point_dataset_far_point_is_most_anomalous():
    X = np.array([[0.0], [0.1], [0.2], [0.3], [100.0]])
    forest = ids.fit(X, ForestConfig(n_trees=50, subsample_size=256), seed=7)
    scores = forest.score_samples(X)
    assert int(np.argmax(scores)) == 4
    assert all(scores[4] > s for s in scores[:4])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(1, 4))
def test_scores_in_open_unit_interval(seed, n, dim):
    X = np.random.default_rng(seed).normal(size=(n, dim))
    forest = ids.fit(X, ForestConfig(n_trees=8, subsample_size=32), seed=seed)
    probe = np.vstack([X, X * 100.0])
    s = forest.score_samples(probe)
    assert np.all((s > 0) & (s < 1))


def test_vectorized_matches_scalar_traversal():
    X, _ = ids.synthetic_flows(seed=1)
    forest = ids.fit(X, ForestConfig(n_trees=15, subsample_size=64), seed=2)
    probe = X[::37]

    def depth(tree, x):
        node = 0
        while tree.left[node] >= 0:
            node = tree.left[node] if x[tree.feature[node]] < tree.split[node] else tree.right[node]
        return tree.depth[node] + ids.avg_path_normalizer(int(tree.size[node]))

    for x, s in zip(probe, forest.score_samples(probe)):
        mean = sum(depth(t, x) for t in forest.trees) / len(forest.trees)
        assert s == pytest.approx(2 ** (-mean / ids.avg_path_normalizer(64)), rel=1e-12)


class _Stub:
    def __init__(self, score, threshold=0.5):
        self.threshold = threshold
        self._s = score

    def score_samples(self, X):
        return np.array([self._s])


@pytest.mark.parametrize("score,expected", [(0.9, MALICIOUS), (0.3, BENIGN), (0.5, MALICIOUS)])
def test_classify_threshold_and_tie(score, expected):
    assert ids.classify(_Stub(score), FlowFeatures((0.0,))) == expected


def test_evaluate_perfect():
    r = ids.evaluate([MALICIOUS, BENIGN, BENIGN], [MALICIOUS, BENIGN, BENIGN])
    assert (r.accuracy, r.precision, r.recall, r.f1) == (100.0, 100.0, 100.0, 100.0)


def test_evaluate_confusion_arithmetic():
    preds = [MALICIOUS] * 99 + [MALICIOUS] + [BENIGN] * 99 + [BENIGN]
    labels = [MALICIOUS] * 99 + [BENIGN] + [BENIGN] * 99 + [MALICIOUS]
    r = ids.evaluate(preds, labels)
    assert r.confusion == (99, 1, 99, 1)
    assert r.accuracy == pytest.approx(99.0)
    assert r.precision == pytest.approx(99.0)
    assert r.recall == pytest.approx(99.0)
    assert r.f1 == pytest.approx(99.0)


def test_evaluate_rejects_bad_input():
    with pytest.raises(ValueError):
        ids.evaluate([BENIGN], [])
    with pytest.raises(ValueError):
        ids.evaluate([], [])


@given(st.lists(st.tuples(st.sampled_from([BENIGN, MALICIOUS]), st.sampled_from([BENIGN, MALICIOUS])),
                min_size=1, max_size=50))
def test_evaluate_bounds(pairs):
    preds, labels = zip(*pairs)
    r = ids.evaluate(preds, labels)
    assert sum(r.confusion) == len(pairs)
    for m in (r.accuracy, r.precision, r.recall, r.f1):
        assert 0.0 <= m <= 100.0


def _csv(tmp_path, text):
    p = tmp_path / "flows.csv"
    p.write_text(text)
    return p


def test_ingest_clean(tmp_path):
    p = _csv(tmp_path, "a,b,Label\n1,2,Benign\n3,4,DDoS\n5,6,Benign\n")
    flows, dropped = ids.ingest_flows(p, FlowSchema(("a", "b")))
    assert len(flows) == 3 and dropped == 0
    assert flows[1].values == (3.0, 4.0) and flows[1].label is None


def test_ingest_drops_infinity(tmp_path):
    p = _csv(tmp_path, "a,b,Label\n1,2,Benign\n3,Infinity,Benign\n5,6,Benign\n")
    flows, dropped = ids.ingest_flows(p, FlowSchema(("a", "b"), "Label"))
    assert len(flows) == 2 and dropped == 1


def test_ingest_label_mapping(tmp_path):
    p = _csv(tmp_path, "a,Label\n1,Benign\n2,DoS-Hulk\n3,benign\n4,Bot\n")
    flows, _ = ids.ingest_flows(p, FlowSchema(("a",), "Label"))
    assert [f.label for f in flows] == [BENIGN, MALICIOUS, BENIGN, MALICIOUS]


def test_ingest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ids.ingest_flows(tmp_path / "nope.csv", FlowSchema(("a",)))
    p = _csv(tmp_path, "a,Label\n1,Benign\n")
    with pytest.raises(KeyError):
        ids.ingest_flows(p, FlowSchema(("b",), "Label"))


def test_bundled_fixture_shape(data_dir):
    flows, dropped = ids.ingest_flows(data_dir / "ids_fixture.csv",
                                      FlowSchema(("flow_duration", "packet_rate"), "Label"))
    assert dropped == 0 and len(flows) == 1000
    assert sum(f.label == MALICIOUS for f in flows) == 10


def test_forest_persistence_round_trip(tmp_path):
    X, _ = ids.synthetic_flows(seed=5)
    forest = ids.fit(X, ForestConfig(n_trees=10, subsample_size=64, threshold=0.6), seed=5)
    ids.save_forest(forest, tmp_path / "f.json")
    loaded = ids.load_forest(tmp_path / "f.json")
    assert loaded.threshold == 0.6 and loaded.n_trees == 10
    assert np.array_equal(loaded.score_samples(X), forest.score_samples(X))


def test_dimension_mismatch_rejected():
    forest = ids.fit(np.random.default_rng(0).normal(size=(50, 2)), ForestConfig(n_trees=3), seed=0)
    with pytest.raises(ValueError):
        forest.score_samples(np.zeros((1, 3)))


def test_fit_needs_two_rows():
    with pytest.raises(ValueError):
        ids.fit(np.zeros((1, 2)), ForestConfig(n_trees=2), seed=0)
    assert math.isfinite(ids.fit(np.zeros((2, 2)), ForestConfig(n_trees=2), seed=0).score_samples([[0, 0]])[0])
