import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taxiverify.network import (
    Activation,
    Layer,
    Network,
    NetworkError,
    concatenate,
    dumps,
    evaluate,
    from_dict,
    identity,
    load,
    mlp,
    save,
    to_dict,
)

RELU, IDENT = Activation.RELU, Activation.IDENTITY


def net_of(*layers):
    return Network(tuple(Layer(np.array(w, float), np.array(b, float), a) for w, b, a in layers))


def random_net(rng, sizes):
    return mlp(sizes, rng)


class TestLayer:
    def test_bias_length_must_match_rows(self):
        with pytest.raises(NetworkError, match="bias"):
            Layer(np.ones((2, 3)), np.ones(3), RELU)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        w = np.ones((2, 2))
        w[0, 1] = bad
        with pytest.raises(NetworkError):
            Layer(w, np.zeros(2), IDENT)

    def test_arrays_are_read_only(self):
        layer = Layer(np.ones((1, 1)), np.zeros(1), IDENT)
        with pytest.raises(ValueError):
            layer.weights[0, 0] = 2.0


class TestNetwork:
    def test_dims(self):
        net = random_net(np.random.default_rng(0), [4, 7, 3])
        assert (net.input_dim, net.output_dim) == (4, 3)

    def test_adjacent_dims_checked(self):
        with pytest.raises(NetworkError):
            net_of(([[1.0, 2.0]], [0.0], RELU), ([[1.0, 1.0]], [0.0], IDENT))

    def test_final_layer_must_be_identity(self):
        with pytest.raises(NetworkError):
            net_of(([[1.0]], [0.0], RELU))

    def test_index_of(self):
        net = random_net(np.random.default_rng(0), [4, 2])
        net = Network(net.layers, input_names=("z1", "z2", "p", "theta"))
        assert net.index_of("p") == 2
        with pytest.raises(NetworkError):
            net.index_of("q")


class TestEvaluate:
    def test_identity(self):
        assert evaluate(identity(1), [3.5]).tolist() == [3.5]

    def test_relu_clips(self):
        net = net_of(([[1.0]], [-2.0], RELU), ([[1.0]], [0.0], IDENT))
        assert evaluate(net, [1.0]).tolist() == [0.0]

    def test_hand_composed(self):
        # 1 - relu(2 * 3)
        net = net_of(([[2.0]], [0.0], RELU), ([[-1.0]], [1.0], IDENT))
        assert evaluate(net, [3.0]).tolist() == [-5.0]

    def test_dimension_mismatch_reports_both(self):
        with pytest.raises(NetworkError, match=r"3.*2|2.*3"):
            evaluate(identity(2), [1.0, 2.0, 3.0])

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(3)
        net = random_net(rng, [3, 8, 8, 2])
        x = rng.normal(size=(20, 3))
        rows = np.array([evaluate(net, xi) for xi in x])
        np.testing.assert_allclose(evaluate(net, x), rows, rtol=0, atol=1e-14)


class TestConcatenate:
    def test_identities(self):
        net = concatenate(identity(2), identity(2))
        x = np.random.default_rng(0).normal(size=(50, 2))
        np.testing.assert_array_equal(evaluate(net, x), x)

    def test_against_two_step_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a, b, c = rng.integers(1, 6, size=3)
            g = random_net(rng, [a, int(rng.integers(1, 6)), b])
            h = random_net(rng, [b, int(rng.integers(1, 6)), c])
            x = rng.normal(size=a)
            np.testing.assert_allclose(
                evaluate(concatenate(g, h), x), evaluate(h, evaluate(g, x)), rtol=1e-12, atol=1e-12
            )

    def test_generator_controller_shape(self):
        rng = np.random.default_rng(0)
        g = Network(random_net(rng, [4, 16, 128]).layers, input_names=("z1", "z2", "p", "theta"))
        h = random_net(rng, [128, 8, 2])
        comp = concatenate(g, h)
        assert (comp.input_dim, comp.output_dim) == (4, 2)
        assert comp.input_names == g.input_names
        assert len(comp.layers) == len(g.layers) + len(h.layers)

    def test_mismatch(self):
        with pytest.raises(NetworkError):
            concatenate(identity(2), identity(3))


class TestSerialization:
    def test_identity_round_trip(self, tmp_path):
        save(identity(3), tmp_path / "id.json")
        assert load(tmp_path / "id.json") == identity(3)

    def test_full_scale_generator_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        net = random_net(rng, [4, 256, 256, 256, 256, 128])
        save(net, tmp_path / "g.json")
        back = load(tmp_path / "g.json")
        assert back == net
        x = rng.uniform(-1, 1, size=(100, 4))
        np.testing.assert_array_equal(evaluate(back, x), evaluate(net, x))

    def test_bias_length_rejected(self, tmp_path):
        d = to_dict(identity(2))
        d["layers"][0]["bias"] = [0.0]
        (tmp_path / "bad.json").write_text(json.dumps(d))
        with pytest.raises(NetworkError, match="bias"):
            load(tmp_path / "bad.json")

    def test_missing_field_named(self):
        d = to_dict(identity(2))
        del d["layers"][0]["bias"]
        with pytest.raises(NetworkError, match=r"layers\[0\].*bias"):
            from_dict(d)

    def test_bad_activation_named(self):
        d = to_dict(identity(2))
        d["layers"][0]["activation"] = "tanh"
        with pytest.raises(NetworkError, match="activation"):
            from_dict(d)

    def test_dumps_deterministic(self):
        net = random_net(np.random.default_rng(2), [3, 5, 2])
        assert dumps(net) == dumps(from_dict(json.loads(dumps(net))))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=4, max_size=4))
    def test_bit_exact_floats(self, vals):
        w = np.array(vals[:2]).reshape(1, 2)
        net = Network((Layer(w, np.array(vals[2:3]), IDENT),))
        back = from_dict(json.loads(dumps(net)))
        assert back.layers[0].weights.tobytes() == net.layers[0].weights.tobytes()


class TestInit:
    def test_glorot_range_and_zero_bias(self):
        net = mlp([10, 30, 5], np.random.default_rng(0))
        for layer in net.layers:
            fan_out, fan_in = layer.weights.shape
            assert np.abs(layer.weights).max() <= np.sqrt(6 / (fan_in + fan_out))
            assert not layer.bias.any()
        assert net.layers[-1].activation is IDENT
        assert all(layer.activation is RELU for layer in net.layers[:-1])

    def test_seeded(self):
        a = mlp([3, 4, 2], np.random.default_rng(7))
        b = mlp([3, 4, 2], np.random.default_rng(7))
        assert a == b
