import zlib

import numpy as np
import pytest

from corrdiff import autodiff as ad
from corrdiff.autodiff import Tape, TapeError, grad_check, load_checkpoint, save_checkpoint

from oracles import finite_difference

RNG = np.random.default_rng(1234)


def tape_grad(build, x: np.ndarray) -> np.ndarray:
    tape = Tape()
    p = tape.parameter("x", x)
    return tape.backward(build(p))["x"]


def numeric_grad(build, x: np.ndarray) -> np.ndarray:
    return finite_difference(lambda v: build(Tape().parameter("x", v)).value.item(), x)


def assert_grad_matches(build, x, rtol=1e-4, floor=1e-6):
    a = tape_grad(build, x)
    n = numeric_grad(build, x)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    assert rel.max() < rtol, f"max relative error {rel.max():.3g}"


class TestForwardValues:
    def test_softmax_uniform(self):
        t = Tape()
        out = ad.softmax_rows_masked(t.constant([[0.0, 0.0]]), np.array([[True, True]]))
        np.testing.assert_array_equal(out.value, [[0.5, 0.5]])

    def test_softmax_single_survivor(self):
        t = Tape()
        out = ad.softmax_rows_masked(t.constant([[5.0, 5.0]]), np.array([[True, False]]))
        np.testing.assert_array_equal(out.value, [[1.0, 0.0]])

    def test_softmax_fully_masked_row(self):
        t = Tape()
        with pytest.raises(ValueError, match="fully masked"):
            ad.softmax_rows_masked(t.constant([[1.0, 2.0]]), np.array([[False, False]]))

    def test_mse_hand(self):
        t = Tape()
        assert ad.mse(t.constant([[1.0, 2.0]]), np.zeros((1, 2))).value.item() == 2.5

    def test_matmul_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ValueError):
            ad.matmul(t.parameter("a", np.ones((2, 3))), t.constant(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ValueError):
            ad.add(t.parameter("a", np.ones((2, 3))), t.constant(np.ones((3, 2))))

    def test_gelu_values(self):
        t = Tape()
        out = ad.gelu(t.constant([[0.0, 1.0, -1.0]])).value
        np.testing.assert_allclose(out, [[0.0, 0.8413447460685429, -0.15865525393145707]], rtol=1e-15)

    def test_batched_matmul_matches_loop(self):
        t = Tape()
        a = RNG.normal(size=(3, 4, 5))
        w = RNG.normal(size=(5, 2))
        out = ad.matmul(t.parameter("a", a), t.parameter("w", w)).value
        for b in range(3):
            np.testing.assert_allclose(out[b], a[b] @ w, rtol=1e-13)


class TestBackward:
    def test_mean_gradient(self):
        g = tape_grad(ad.mean_all, np.array([[1.0, 2.0, 3.0, 4.0]]))
        np.testing.assert_array_equal(g, [[0.25, 0.25, 0.25, 0.25]])

    def test_mse_gradient_hand(self):
        g = tape_grad(lambda p: ad.mse(p, np.zeros((1, 1))), np.array([[3.0]]))
        np.testing.assert_array_equal(g, [[6.0]])

    def test_backward_before_forward(self):
        t = Tape()
        with pytest.raises(TapeError, match="before any forward"):
            t.backward(t.constant(1.0))

    def test_non_scalar_loss(self):
        t = Tape()
        p = t.parameter("p", np.ones((2, 2)))
        with pytest.raises(TapeError, match="scalar"):
            t.backward(ad.relu(p))

    def test_foreign_loss(self):
        t1, t2 = Tape(), Tape()
        loss = ad.mean_all(t1.parameter("p", np.ones((1, 2))))
        t2.parameter("q", np.ones((1, 1)))
        with pytest.raises(TapeError):
            t2.backward(loss)

    def test_context_clears_graph(self):
        with Tape() as t:
            p = t.parameter("p", np.ones((2, 2)))
            out = ad.mean_all(ad.mul(p, p))
            grads = t.backward(out)
        assert t.nodes == [] and t.parameters == {}
        # values and gradients outlive the graph
        assert out.value.item() == 1.0
        np.testing.assert_array_equal(grads["p"], np.full((2, 2), 0.5))
        with pytest.raises(TapeError, match="before any forward"):
            t.backward(out)

    def test_unreached_parameter_gets_zeros(self):
        t = Tape()
        p = t.parameter("p", np.ones((1, 2)))
        t.parameter("q", np.ones((3, 1)))
        grads = t.backward(ad.mean_all(p))
        np.testing.assert_array_equal(grads["q"], np.zeros((3, 1)))

    def test_constants_get_no_gradient(self):
        t = Tape()
        p = t.parameter("p", np.ones((2, 2)))
        c = t.constant(np.full((2, 2), 3.0))
        grads = t.backward(ad.mean_all(ad.mul(p, c)))
        assert set(grads) == {"p"}

    def test_deterministic(self):
        x = RNG.normal(size=(4, 3))
        w = RNG.normal(size=(3, 3))

        def run():
            t = Tape()
            h = ad.gelu(ad.matmul(t.parameter("x", x), t.parameter("w", w)))
            return t.backward(ad.mean_all(ad.softmax_rows_masked(h)))

        a, b = run(), run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_masked_logit_has_zero_gradient(self):
        mask = np.array([[True, False, True], [True, True, False], [False, True, True]])
        weights = RNG.normal(size=(3, 3))

        def build(p):
            s = ad.softmax_rows_masked(p, mask)
            return ad.mean_all(ad.mul(s, s.tape.constant(weights)))

        g = tape_grad(build, RNG.normal(size=(3, 3)))
        assert np.all(g[~mask] == 0.0)

    def test_fan_out_accumulates(self):
        # loss = mean(p * p) reuses p twice
        x = RNG.normal(size=(2, 3))
        g = tape_grad(lambda p: ad.mean_all(ad.mul(p, p)), x)
        np.testing.assert_allclose(g, 2 * x / x.size, rtol=1e-14)


W_FIXED = RNG.normal(size=(3, 4))
MASK = np.eye(5, dtype=bool) | (RNG.random((5, 5)) < 0.5)
MIX = RNG.normal(size=(5, 5))


def _c(p, v):
    return p.tape.constant(v)


K0 = RNG.normal(size=(5, 4))
K1 = RNG.normal(size=(5, 3))
K2 = RNG.normal(size=(5, 4))
K3 = RNG.normal(size=(5, 4))
K4 = RNG.normal(size=(5, 4))
K5 = RNG.normal(size=(3, 3))
K6 = RNG.normal(size=(4, 2))
K7 = RNG.normal(size=(3, 2))
K8 = RNG.normal(size=(2, 1, 3))
K9 = RNG.normal(size=(2, 5, 3))
K10 = RNG.normal(size=(2, 5, 4))

OP_GRAPHS = {
    "matmul_left": (lambda p: ad.mean_all(ad.mul(ad.matmul(p, _c(p, W_FIXED)), _c(p, K0))), (5, 3)),
    "matmul_right": (lambda p: ad.mse(ad.matmul(_c(p, K1), p), np.ones((5, 4))), (3, 4)),
    "add": (lambda p: ad.mse(ad.add(p, _c(p, K2)), np.zeros((5, 4))), (5, 4)),
    "broadcast_row": (lambda p: ad.mse(ad.broadcast_add_row(_c(p, K3), p), np.zeros((5, 4))), (1, 4)),
    "broadcast_col": (lambda p: ad.mse(ad.broadcast_add_col(_c(p, K4), p), np.zeros((5, 4))), (5, 1)),
    "scale": (lambda p: ad.mse(ad.scale(p, -2.5), np.ones((2, 3))), (2, 3)),
    "mul": (lambda p: ad.mse(ad.mul(p, _c(p, K5)), np.ones((3, 3))), (3, 3)),
    "relu": (lambda p: ad.mse(ad.relu(p), np.ones((4, 4))), (4, 4)),
    "gelu": (lambda p: ad.mse(ad.gelu(p), np.ones((4, 4))), (4, 4)),
    "softmax": (lambda p: ad.mean_all(ad.mul(ad.softmax_rows_masked(p, MASK), _c(p, MIX))), (5, 5)),
    "softmax_unmasked": (lambda p: ad.mse(ad.softmax_rows_masked(p), np.eye(5)), (5, 5)),
    "transpose": (lambda p: ad.mse(ad.transpose(p), K6), (2, 4)),
    "concat": (lambda p: ad.mse(ad.concat(p, ad.scale(p, 2.0)), np.ones((3, 4))), (3, 2)),
    "reshape": (lambda p: ad.mse(ad.reshape(p, (3, 2)), K7), (2, 3)),
    "mean_rows": (lambda p: ad.mse(ad.mean_rows(p), K8), (2, 4, 3)),
    "nll": (lambda p: ad.log_softmax_nll(p, np.array([0, 2, 1, 1])), (4, 3)),
    "batched_matmul": (lambda p: ad.mse(ad.matmul(p, _c(p, W_FIXED)), np.zeros((2, 5, 4))), (2, 5, 3)),
    "batched_weight": (lambda p: ad.mse(ad.matmul(_c(p, K9), p), np.ones((2, 5, 4))), (3, 4)),
    "batched_row": (lambda p: ad.mse(ad.broadcast_add_row(_c(p, K10), p), np.zeros((2, 5, 4))), (1, 4)),
}


class TestVjpAgainstFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(OP_GRAPHS))
    def test_op(self, name):
        build, shape = OP_GRAPHS[name]
        x = np.random.default_rng(zlib.crc32(name.encode())).normal(size=shape)
        if name == "relu":
            x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
        assert_grad_matches(build, x)

    def test_composed_graph(self):
        w1 = RNG.normal(size=(3, 6))
        w2 = RNG.normal(size=(6, 3))
        mask = np.eye(4, dtype=bool) | np.eye(4, k=1, dtype=bool)

        def build(p):
            h = ad.gelu(ad.matmul(p, _c(p, w1)))
            a = ad.softmax_rows_masked(ad.matmul(h, ad.transpose(h)), mask)
            return ad.mse(ad.add(ad.matmul(ad.matmul(a, h), _c(p, w2)), p), np.zeros((4, 3)))

        assert_grad_matches(build, RNG.normal(size=(4, 3)))


class TestGradCheck:
    @staticmethod
    def linear_loss(tape, params):
        x = tape.constant(np.linspace(-1, 1, 12).reshape(4, 3))
        w = tape.parameter("W", params["W"])
        b = tape.parameter("b", params["b"])
        return ad.mse(ad.broadcast_add_row(ad.matmul(x, w), b), np.ones((4, 2)))

    def params(self):
        r = np.random.default_rng(7)
        return {"W": r.normal(size=(3, 2)), "b": r.normal(size=(1, 2))}

    def test_linear_model_tight(self):
        rep = grad_check(self.linear_loss, self.params())
        assert rep.n_checked == 8
        assert rep.max_rel_err < 1e-7
        assert rep.passed

    def test_corrupted_rule_is_reported(self, monkeypatch):
        good = ad.VJP["add"]

        def bad(g, node):
            return tuple(None if gi is None else 0.5 * gi for gi in good(g, node))

        monkeypatch.setitem(ad.VJP, "add", bad)
        rep = grad_check(self.linear_loss, self.params())
        assert not rep.passed
        assert rep.max_rel_err > 0.1
        assert "b" in {f[0] for f in rep.failures}


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        tensors = {"enc0.W": RNG.normal(size=(3, 5)), "b": np.array([[1e-300, -0.0, 1 / 3]]), "e": np.zeros((0, 4))}
        save_checkpoint(tensors, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert list(back) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
            assert back[k].shape == tensors[k].shape

    def test_grammar(self, tmp_path):
        save_checkpoint({"a": np.array([[1.0, 2.0], [3.0, 0.1]])}, tmp_path / "m.ckpt")
        lines = (tmp_path / "m.ckpt").read_text().split("\n")
        assert lines[:4] == ["CKPT1 1", "a 2 2", "1 2", "3 0.10000000000000001"]

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValueError, match="2-D"):
            save_checkpoint({"a": np.ones(3)}, tmp_path / "m.ckpt")

    @pytest.mark.parametrize(
        "text, msg",
        [("", "empty"), ("CKPT2 1\n", "not a CKPT1"), ("CKPT1 2\na 1 1\n1\n", "truncated"), ("CKPT1 1\na 2 1\n1\n", "truncated")],
    )
    def test_malformed(self, tmp_path, text, msg):
        (tmp_path / "m.ckpt").write_text(text)
        with pytest.raises(ValueError, match=msg):
            load_checkpoint(tmp_path / "m.ckpt")
