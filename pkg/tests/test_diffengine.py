import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebm_sysid import diffengine as de


def _gradcheck(program, inputs, rel=1e-5, floor=1e-8, step=1e-5):
    tape = de.record_scalar(program, inputs)
    got = de.backward(tape, list(inputs)).gradients
    want = de.finite_difference_oracle(program, inputs, step=step)
    for name in inputs:
        np.testing.assert_allclose(got[name], want[name], rtol=rel, atol=floor)


def test_forward_value_half_sqnorm():
    tape = de.record_scalar(lambda v: 0.5 * de.dot(v["x"], v["x"]), {"x": np.array([3.0, 4.0])})
    assert tape.value == 12.5


def test_forward_value_logsumexp_uniform():
    tape = de.record_scalar(lambda v: de.logsumexp(v["x"]), {"x": np.zeros(2)})
    assert np.isclose(tape.value, np.log(2.0))


def test_gradient_half_sqnorm_identity():
    tape = de.record_scalar(lambda v: 0.5 * de.dot(v["x"], v["x"]), {"x": np.array([3.0, 4.0])})
    g = de.backward(tape, ["x"]).gradients["x"]
    np.testing.assert_array_equal(g, np.array([3.0, 4.0]))


def test_gradient_logsumexp_uniform_is_softmax():
    tape = de.record_scalar(lambda v: de.logsumexp(v["x"]), {"x": np.zeros(2)})
    g = de.backward(tape, ["x"]).gradients["x"]
    np.testing.assert_allclose(g, [0.5, 0.5], atol=1e-15)


def test_fd_oracle_quadratic():
    got = de.finite_difference_oracle(
        lambda v: 0.5 * de.dot(v["x"], v["x"]), {"x": np.array([1.0, 0.0])}, step=1e-5)
    np.testing.assert_allclose(got["x"], [1.0, 0.0], atol=1e-8)


def test_fd_oracle_sin():
    got = de.finite_difference_oracle(
        lambda v: de.sum(de.sin(v["x"])), {"x": np.array([0.0])}, step=1e-5)
    np.testing.assert_allclose(got["x"], [1.0], atol=1e-9)


@pytest.mark.parametrize("build", [
    lambda v: de.sum(de.exp(v["x"])),
    lambda v: de.sum(de.log(de.abspow(v["x"], 2.0) + 1.5)),
    lambda v: de.sum(de.sin(v["x"])) + de.sum(de.cos(v["x"])),
    lambda v: de.sum(de.tanh(v["x"])),
    lambda v: de.sum(de.logcosh(v["x"])),
    lambda v: de.sum(de.abspow(v["x"], 1.5)),
    lambda v: de.sum(de.sgnpow(v["x"], 2.5)),
    lambda v: de.logsumexp(v["x"]),
    lambda v: de.dot(v["x"], v["x"]),
    lambda v: de.sum(v["x"] * v["x"] - 2.0 * v["x"]),
])
def test_primitive_gradients_match_fd(build):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(-3.0, 3.0, size=rng.integers(1, 6))
        # stay away from the |.|^p kink where FD straddles it
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        _gradcheck(build, {"x": x})


def test_matrix_program_gradients():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)

    def build(v):
        h = de.matmul(v["X"], v["W"]) + v["b"]
        p = de.exp(h - de.logsumexp(h, axis=1))
        return de.sum(de.mul(p, p)) + de.dot(v["b"], v["b"])

    X = rng.standard_normal((5, 3))
    _gradcheck(build, {"X": X, "W": A, "b": b}, rel=1e-4)


def test_cols_and_hstack_gradients():
    rng = np.random.default_rng(2)

    def build(v):
        a = de.cols(v["X"], 0, 1)
        b = de.cols(v["X"], 1, 2)
        stacked = de.hstack([de.mul(a, b), a + 2.0 * b])
        return de.sum(de.mul(stacked, stacked))

    _gradcheck(build, {"X": rng.standard_normal((4, 2))})


def test_transpose_gradient():
    rng = np.random.default_rng(3)

    def build(v):
        return de.sum(de.matmul(v["A"], v["A"].T))

    _gradcheck(build, {"A": rng.standard_normal((3, 2))})


def test_max_gradient_is_first_argmax():
    x = np.array([1.0, 5.0, 5.0, 2.0])
    tape = de.record_scalar(lambda v: de.max(v["x"]), {"x": x})
    g = de.backward(tape, ["x"]).gradients["x"]
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0, 0.0])


def test_abspow_subgradient_zero_at_kink():
    tape = de.record_scalar(lambda v: de.sum(de.abspow(v["x"], 1.5)), {"x": np.array([0.0, 2.0])})
    g = de.backward(tape, ["x"]).gradients["x"]
    assert g[0] == 0.0
    assert np.isfinite(g).all()


def test_linearity_exact_for_power_of_two_weights():
    x = np.random.default_rng(4).standard_normal(5)

    def f(v):
        return de.sum(de.sin(v["x"]))

    def g(v):
        return de.logsumexp(v["x"])

    gf = de.backward(de.record_scalar(f, {"x": x}), ["x"]).gradients["x"]
    gg = de.backward(de.record_scalar(g, {"x": x}), ["x"]).gradients["x"]

    def combo(v):
        return 2.0 * f(v) + 0.5 * g(v)

    gc = de.backward(de.record_scalar(combo, {"x": x}), ["x"]).gradients["x"]
    np.testing.assert_array_equal(gc, 2.0 * gf + 0.5 * gg)


def test_linearity_general_weights():
    x = np.random.default_rng(8).standard_normal(5)

    def f(v):
        return de.sum(de.sin(v["x"]) * v["x"])

    def g(v):
        return de.logsumexp(v["x"])

    gf = de.backward(de.record_scalar(f, {"x": x}), ["x"]).gradients["x"]
    gg = de.backward(de.record_scalar(g, {"x": x}), ["x"]).gradients["x"]

    def combo(v):
        return 0.3 * f(v) + 1.7 * g(v)

    gc = de.backward(de.record_scalar(combo, {"x": x}), ["x"]).gradients["x"]
    np.testing.assert_allclose(gc, 0.3 * gf + 1.7 * gg, rtol=1e-14, atol=1e-16)


def test_backward_deterministic_bit_identical():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((6, 3))

    def build(v):
        h = de.matmul(v["X"], v["X"].T)
        return de.logsumexp(h) + de.sum(de.tanh(h))

    g1 = de.backward(de.record_scalar(build, {"X": X}), ["X"]).gradients["X"]
    g2 = de.backward(de.record_scalar(build, {"X": X}), ["X"]).gradients["X"]
    np.testing.assert_array_equal(g1, g2)


def test_replay_reproduces_value_bitwise():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(4)
    tape = de.record_scalar(lambda v: de.logsumexp(de.sin(v["x"]) * 3.0), {"x": x})
    assert tape.replay({"x": x}) == tape.value


def test_unsupported_primitives_rejected():
    x = np.ones(3)
    with pytest.raises(de.UnsupportedPrimitiveError, match="divide"):
        de.record_scalar(lambda v: de.sum(v["x"] / v["x"]), {"x": x})
    with pytest.raises(de.UnsupportedPrimitiveError, match="pow"):
        de.record_scalar(lambda v: de.sum(v["x"] ** v["x"]), {"x": x})


def test_shape_mismatch_rejected_with_operands():
    with pytest.raises(de.ShapeMismatchError, match="matmul"):
        de.record_scalar(lambda v: de.sum(de.matmul(v["A"], v["B"])),
                         {"A": np.ones((2, 3)), "B": np.ones((2, 3))})
    with pytest.raises(de.ShapeMismatchError, match="dot"):
        de.record_scalar(lambda v: de.dot(v["A"], v["B"]),
                         {"A": np.ones(2), "B": np.ones(3)})


def test_unknown_input_rejected():
    tape = de.record_scalar(lambda v: de.sum(v["x"]), {"x": np.ones(2)})
    with pytest.raises(de.UnknownInputError):
        de.backward(tape, ["y"])


def test_nonscalar_output_rejected():
    with pytest.raises(de.ShapeMismatchError, match="scalar"):
        de.record_scalar(lambda v: v["x"] * 2.0, {"x": np.ones(2)})


def test_fd_oracle_nonfinite_rejection_names_coordinate():
    def build(v):
        return de.sum(de.log(v["x"]))

    with pytest.raises(de.NonFiniteEvaluationError, match=r"x\[\(0,\)\]"):
        de.finite_difference_oracle(build, {"x": np.array([1e-6, 1.0])}, step=1e-5)


def test_gradient_entries_cover_all_requested_inputs():
    tape = de.record_scalar(lambda v: de.sum(v["a"]), {"a": np.ones(2), "b": np.ones((2, 2))})
    res = de.backward(tape, ["a", "b"])
    assert res.gradients["a"].shape == (2,)
    # "b" is unused by the program: gradient present and zero
    np.testing.assert_array_equal(res.gradients["b"], np.zeros((2, 2)))


@settings(max_examples=60, derandomize=True, deadline=None)
@given(st.lists(st.floats(min_value=-3.0, max_value=3.0), min_size=1, max_size=6),
       st.sampled_from(["exp", "tanh", "logcosh", "sin", "smooth_abspow"]))
def test_property_gradients_match_fd(values, kind):
    x = np.asarray(values)
    x = np.where(np.abs(x) < 1e-3, 1.0, x)  # keep FD probes off the kink
    builders = {
        "exp": lambda v: de.sum(de.exp(v["x"])),
        "tanh": lambda v: de.sum(de.tanh(v["x"])),
        "logcosh": lambda v: de.sum(de.logcosh(v["x"])),
        "sin": lambda v: de.sum(de.sin(v["x"])),
        "smooth_abspow": lambda v: de.sum(de.abspow(v["x"], 3.0)),
    }
    _gradcheck(builders[kind], {"x": x}, rel=1e-4, floor=1e-7)


def test_thousand_random_inputs_primitive_sweep():
    rng = np.random.default_rng(7)
    builders = [
        lambda v: de.sum(de.exp(v["x"])),
        lambda v: de.logsumexp(v["x"]),
        lambda v: de.sum(de.abspow(v["x"], 1.5)),
        lambda v: de.sum(de.tanh(v["x"])) + de.dot(v["x"], v["x"]),
    ]
    checked = 0
    for _ in range(250):
        x = rng.uniform(-3.0, 3.0, size=4)
        x = np.where(np.abs(x) < 1e-3, 0.75, x)
        for build in builders:
            tape = de.record_scalar(build, {"x": x})
            got = de.backward(tape, ["x"]).gradients["x"]
            want = de.finite_difference_oracle(build, {"x": x}, step=1e-5)["x"]
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-8)
            checked += 1
    assert checked == 1000
