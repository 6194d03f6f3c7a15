import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedledger import ml
from fedledger.assets import MetricSpec
from fedledger.errors import BadK, DimensionMismatch, EmptyInput, EmptyTestSet, NonFiniteError, ParseError, SchemaError

from support import OPENER, linear_data


def central_diff(f, w, h=1e-6):
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        out[i] = (f(w + e) - f(w - e)) / (2 * h)
    return out


# ---------------------------------------------------------------- training


def test_linreg_single_step_hand_gradient():
    spec = ml.TrainerSpec("linear_regression", 0.1, 1)
    out = ml.train(spec, ml.ModelWeights((0.0, 0.0)), [[1.0]], [2.0])
    assert out.values == pytest.approx((0.4, 0.4), abs=1e-15)


def test_zero_learning_rate_leaves_weights():
    init = ml.ModelWeights((0.25, -1.0, 3.0))
    X, y = linear_data(5)
    assert ml.train(ml.TrainerSpec("logistic_regression", 0.0, 1), init, X, (y > 0).astype(float)) == init


def test_trainer_spec_validation():
    with pytest.raises(ValueError):
        ml.TrainerSpec("linear_regression", 0.1, 0)
    with pytest.raises(ValueError):
        ml.TrainerSpec("svm", 0.1, 1)
    with pytest.raises(ValueError):
        ml.TrainerSpec("linear_regression", -0.1, 1)


def test_training_fits_clean_data():
    X, y = linear_data(50, seed=3)
    w = ml.train(ml.TrainerSpec("linear_regression", 0.3, 400), None, X, y)
    assert w.values == pytest.approx((1.5, -2.0, 0.3), abs=1e-6)


def test_dimension_mismatch_and_divergence():
    X, y = linear_data(4)
    with pytest.raises(DimensionMismatch):
        ml.train(ml.TrainerSpec("linear_regression", 0.1, 1), ml.ModelWeights((0.0, 0.0)), X, y)
    with pytest.raises(DimensionMismatch):
        ml.train(ml.TrainerSpec("linear_regression", 0.1, 1), None, X, y[:3])
    with pytest.raises(EmptyInput):
        ml.train(ml.TrainerSpec("linear_regression", 0.1, 1), None, np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(NonFiniteError):
        ml.train(ml.TrainerSpec("linear_regression", 1e6, 50), None, X * 100, y)


def test_training_is_bitwise_deterministic():
    X, y = linear_data(20, seed=9, logistic=True)
    spec = ml.TrainerSpec("logistic_regression", 0.7, 25, seed=4)
    assert ml.train(spec, None, X, y).encode() == ml.train(spec, None, X, y).encode()


def test_seeded_init_differs_from_zeros():
    X, y = linear_data(5)
    zeros = ml.train(ml.TrainerSpec("linear_regression", 0.0, 1), None, X, y)
    seeded = ml.train(ml.TrainerSpec("linear_regression", 0.0, 1, seed=1), None, X, y)
    assert zeros.values == (0.0, 0.0, 0.0) and seeded.values != zeros.values


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("family", ml.FAMILIES)
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(family, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 3))
    y = (rng.random(6) > 0.5).astype(float) if family == "logistic_regression" else rng.standard_normal(6)
    w = rng.standard_normal(4)
    fd = central_diff(lambda v: ml.loss(family, v, X, y), w)
    assert np.max(np.abs(ml.gradient(family, w, X, y) - fd)) < 1e-6


@pytest.mark.parametrize("head", ml.FAMILIES)
def test_composite_gradient_matches_finite_differences(head):
    rng = np.random.default_rng(7)
    spec = ml.CompositeSpec(1, head, 0.1, 1)
    X = rng.standard_normal((4, 2))
    y = (rng.random(4) > 0.5).astype(float) if head == "logistic_regression" else rng.standard_normal(4)
    params = rng.standard_normal(spec.trunk_len(2) + spec.head_len())
    fd = central_diff(lambda v: ml.composite_loss(spec, v, X, y), params)
    assert np.max(np.abs(ml.composite_gradient(spec, params, X, y) - fd)) < 1e-6


# ---------------------------------------------------------------- composite


def test_composite_zero_lr_returns_inputs():
    spec = ml.CompositeSpec(2, "linear_regression", 0.0, 3, seed=5)
    X, y = linear_data(6)
    trunk, head = ml.init_composite(spec, 2)
    assert ml.train_composite(spec, trunk, head, X, y) == (trunk, head)
    assert len(trunk) == 6 and len(head) == 3


def test_composite_dimension_checks():
    spec = ml.CompositeSpec(1, "linear_regression", 0.1, 1)
    X, y = linear_data(4)
    with pytest.raises(DimensionMismatch):
        ml.train_composite(spec, ml.ModelWeights((0.0,)), None, X, y)


def test_composite_predict_matches_manual_forward():
    spec = ml.CompositeSpec(1, "linear_regression", 0.1, 1)
    trunk, head = ml.ModelWeights((2.0, 1.0, 0.5)), ml.ModelWeights((3.0, -1.0))
    # z = 2*1 + 1*2 + 0.5 = 4.5; out = 3*4.5 - 1
    assert ml.predict_composite(spec, trunk, head, [1.0, 2.0]) == pytest.approx([12.5])


# ---------------------------------------------------------------- aggregation


def test_uniform_mean():
    spec = ml.AggregatorSpec()
    out = ml.aggregate(spec, [ml.ModelWeights((1.0, 3.0)), ml.ModelWeights((3.0, 5.0))])
    assert out.values == (2.0, 4.0)


def test_single_model_is_identity():
    m = ml.ModelWeights((0.1, 0.2), layout=(1, 1))
    assert ml.aggregate(ml.AggregatorSpec(), [m]) == m


def test_weighted_mean():
    out = ml.aggregate(ml.AggregatorSpec("by_sample_count"), [ml.ModelWeights((0.0,)), ml.ModelWeights((4.0,))], [1, 3])
    assert out.values == (3.0,)


def test_aggregate_errors():
    with pytest.raises(EmptyInput):
        ml.aggregate(ml.AggregatorSpec(), [])
    with pytest.raises(DimensionMismatch):
        ml.aggregate(ml.AggregatorSpec(), [ml.ModelWeights((1.0,)), ml.ModelWeights((1.0, 2.0))])
    with pytest.raises(ValueError):
        ml.aggregate(ml.AggregatorSpec(), [ml.ModelWeights((1.0,))], [1])


def test_one_round_equals_centralized_step():
    X, y = linear_data(32, seed=2, noise=0.1)
    spec = ml.TrainerSpec("linear_regression", 0.2, 1)
    parts = [ml.train(spec, None, X[i::4], y[i::4]) for i in range(4)]
    avg = ml.aggregate(ml.AggregatorSpec(), parts)
    central = -0.2 * ml.gradient("linear_regression", np.zeros(3), X, y)
    assert np.max(np.abs(avg.array() - central)) < 1e-12


# ---------------------------------------------------------------- evaluation


def test_accuracy_two_thirds():
    assert ml.score(MetricSpec("accuracy"), [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]) == pytest.approx(2 / 3)


def test_perfect_fit_mse_zero():
    X, y = linear_data(10)
    model = ml.ModelWeights((1.5, -2.0, 0.3))
    assert ml.evaluate(MetricSpec("mse"), "linear_regression", model, X, y) == pytest.approx(0.0, abs=1e-24)


def test_half_probability_predicts_class_zero():
    model = ml.ModelWeights((0.0, 0.0, 0.0))
    X = np.zeros((4, 2))
    y = np.array([0.0, 1.0, 0.0, 0.0])
    assert ml.evaluate(MetricSpec("accuracy"), "logistic_regression", model, X, y) == 0.75


def test_evaluate_errors():
    with pytest.raises(EmptyTestSet):
        ml.evaluate(MetricSpec("mse"), "linear_regression", ml.ModelWeights((0.0, 0.0, 0.0)), np.zeros((0, 2)), [])
    with pytest.raises(DimensionMismatch):
        ml.score(MetricSpec("mse"), [1.0], [1.0, 2.0])


def test_sigmoid_is_stable():
    assert ml.sigmoid(0.0) == 0.5
    assert ml.sigmoid(-1000.0) == 0.0 and ml.sigmoid(1000.0) == 1.0


# ---------------------------------------------------------------- data opening


def test_open_concatenates_blobs():
    X, y = linear_data(6)
    blobs = [ml.samples_to_csv(OPENER, X[:3], y[:3], "marker a"), ml.samples_to_csv(OPENER, X[3:], y[3:])]
    X2, y2 = ml.open_samples(OPENER, blobs)
    assert X2.shape == (6, 2)
    np.testing.assert_array_equal(X2, X)
    np.testing.assert_array_equal(y2, y)


def test_parse_error_reports_coordinates():
    blob = b"x1,x2,y\n1,2,3\n4,oops,6\n"
    with pytest.raises(ParseError) as exc:
        ml.open_samples(OPENER, [blob])
    assert (exc.value.row, exc.value.column) == (3, "x2")


def test_missing_label_column():
    with pytest.raises(SchemaError):
        ml.open_samples(OPENER, [b"x1,x2\n1,2\n"])


def test_opener_validation():
    with pytest.raises(SchemaError):
        ml.OpenerDescriptor((), "y")
    with pytest.raises(SchemaError):
        ml.OpenerDescriptor(("y",), "y")
    assert ml.OpenerDescriptor.from_dict(OPENER.to_dict()) == OPENER


def test_other_delimiter():
    opener = ml.OpenerDescriptor(("a",), "b", delimiter=";")
    X, y = ml.open_samples(opener, [b"b;a\n1;2\n"])
    assert X.tolist() == [[2.0]] and y.tolist() == [1.0]


# ---------------------------------------------------------------- serialization


def test_weights_roundtrip_and_validation():
    m = ml.ModelWeights((0.1, -2.5e-300, 1e300))
    assert ml.ModelWeights.decode(m.encode()) == m
    with pytest.raises(NonFiniteError):
        ml.ModelWeights((float("inf"),))
    with pytest.raises(DimensionMismatch):
        ml.ModelWeights((1.0, 2.0), layout=(1, 2))
    with pytest.raises(ValueError):
        ml.ModelWeights.decode(b'{"a": 1}')


def test_spec_roundtrip():
    for spec in (ml.TrainerSpec("logistic_regression", 0.5, 3, 7), ml.AggregatorSpec("by_sample_count"), ml.CompositeSpec(2, "linear_regression", 0.1, 2, 3)):
        assert ml.decode_spec(ml.encode_spec(spec)) == spec


# ---------------------------------------------------------------- k-fold


def test_kfold_three_of_six():
    keys = [f"k{i}" for i in range(6)]
    folds = ml.kfold_split(list(reversed(keys)), 3)
    assert [test for _, test in folds] == [["k0", "k1"], ["k2", "k3"], ["k4", "k5"]]


def test_leave_one_out():
    folds = ml.kfold_split(["a", "b", "c"], 3)
    assert folds[1] == (["a", "c"], ["b"])


def test_bad_k():
    with pytest.raises(BadK):
        ml.kfold_split(["a", "b"], 3)
    with pytest.raises(BadK):
        ml.kfold_split(["a", "b"], 1)
    with pytest.raises(BadK):
        ml.kfold_split(["a", "a"], 2)


@settings(max_examples=80)
@given(st.integers(2, 30).flatmap(lambda n: st.tuples(st.just(n), st.integers(2, n))))
def test_kfold_partition_property(nk):
    n, k = nk
    keys = [f"{i:03d}" for i in range(n)]
    folds = ml.kfold_split(keys, k)
    tests = [set(t) for _, t in folds]
    assert set().union(*tests) == set(keys)
    assert sum(len(t) for t in tests) == n
    assert max(map(len, tests)) - min(map(len, tests)) <= 1
    for train, test in folds:
        assert set(train) | set(test) == set(keys) and not set(train) & set(test)
