"""Tensor substrate: against brute-force scalar oracles and finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperlora import tensor as T
from hyperlora.tensor import ParamStore, Tensor


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product, accumulated in float64."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def fd_grad(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of scalar f at x, coordinate by coordinate."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        dn = f()
        flat[i] = keep
        gf[i] = (up - dn) / (2.0 * h)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-3, floor: float = 1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    mask = np.abs(analytic) >= floor
    if not mask.any():
        raise AssertionError("all analytic entries below the exclusion floor; test is vacuous")
    rel = np.abs(analytic[mask] - numeric[mask]) / np.abs(analytic[mask])
    assert rel.max() <= rtol, f"max relative grad error {rel.max():.3e}"


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(3, 3)).astype(np.float32)
        out = T.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_one_by_one(self):
        out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data.shape == (1, 1)
        assert out.item() == pytest.approx(6.0)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3)).astype(np.float32)
        b = rng.normal(size=(3, 5)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).data
        want = matmul_oracle(a, b)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(6, 4, 3)).astype(np.float32)
        b = rng.normal(size=(6, 3, 2)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(6):
            np.testing.assert_allclose(got[i], matmul_oracle(a[i], b[i]), atol=1e-6)

    def test_broadcast_rhs(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 4, 3)).astype(np.float32)
        b = rng.normal(size=(3, 2)).astype(np.float32)
        got = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(5):
            np.testing.assert_allclose(got[i], matmul_oracle(a[i], b), atol=1e-6)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    @given(st.integers(2, 5), st.integers(2, 5), st.integers(2, 5), st.integers(2, 5), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_associativity(self, m, k, l, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(m, k)).astype(np.float32)
        b = rng.normal(size=(k, l)).astype(np.float32)
        c = rng.normal(size=(l, n)).astype(np.float32)
        left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
        np.testing.assert_allclose(left, right, atol=1e-4)


class TestActivations:
    def test_silu_fixed_points(self):
        assert T.silu(Tensor([0.0])).data[0] == 0.0
        x = T.silu(Tensor([20.0])).data[0]
        assert abs(x - 20.0) / 20.0 <= 1e-6

    def test_silu_at_one(self):
        want = 1.0 / (1.0 + math.exp(-1.0))  # scalar oracle in float64
        got = T.silu(Tensor([1.0])).data[0]
        assert got == pytest.approx(want, abs=1e-6)

    def test_gelu_fixed_points(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0
        assert abs(T.gelu(Tensor([-20.0])).data[0]) <= 1e-6

    def test_gelu_at_one(self):
        want = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))  # erf-based oracle
        got = T.gelu(Tensor([1.0])).data[0]
        assert got == pytest.approx(want, abs=1e-6)

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor([-200.0, 0.0, 200.0])).data
        assert np.all(np.isfinite(out))
        assert out[1] == pytest.approx(0.5)


class TestSoftmax:
    def test_uniform_row(self):
        out = T.softmax_lastdim(Tensor(np.zeros((1, 7), dtype=np.float32))).data
        np.testing.assert_allclose(out, 1.0 / 7.0, atol=1e-7)

    def test_spike(self):
        x = np.zeros((1, 4), dtype=np.float32)
        x[0, 2] = 1000.0
        out = T.softmax_lastdim(Tensor(x)).data
        assert out[0, 2] == pytest.approx(1.0, abs=1e-6)

    def test_against_scalar_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 6)).astype(np.float32)
        got = T.softmax_lastdim(Tensor(x)).data
        for i in range(3):
            row = x[i].astype(np.float64)
            e = [math.exp(v - max(row)) for v in row]
            want = np.array([v / sum(e) for v in e])
            np.testing.assert_allclose(got[i], want, atol=1e-7)

    @given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        x = (10.0 * rng.normal(size=(rows, cols))).astype(np.float32)
        out = T.softmax_lastdim(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def _ln(self, x):
        d = x.shape[-1]
        g = Tensor(np.ones(d, dtype=np.float32))
        b = Tensor(np.zeros(d, dtype=np.float32))
        return T.layer_norm(Tensor(x), g, b).data

    def test_constant_row_is_zero(self):
        out = self._ln(np.full((2, 5), 3.7, dtype=np.float32))
        np.testing.assert_allclose(out, 0.0, atol=1e-5)

    def test_standardized_row_fixed_point(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 64))
        x = ((x - x.mean()) / x.std()).astype(np.float32)
        np.testing.assert_allclose(self._ln(x), x, atol=1e-3)

    def test_against_scalar_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 9)).astype(np.float32)
        row = x[0].astype(np.float64)
        mu = sum(row) / 9
        var = sum((v - mu) ** 2 for v in row) / 9
        want = (row - mu) / math.sqrt(var + 1e-5)
        np.testing.assert_allclose(self._ln(x)[0], want, atol=1e-6)

    @given(st.integers(2, 32), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_moments(self, d, seed):
        rng = np.random.default_rng(seed)
        x = (1.0 + 3.0 * rng.normal(size=(4, d))).astype(np.float32)
        out = self._ln(x)
        assert np.abs(out.mean(axis=-1)).max() <= 1e-5
        if d >= 4:  # variance check is meaningless for near-degenerate rows
            assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-3

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError):
            self._ln(np.zeros((2, 0), dtype=np.float32))


class TestBce:
    def test_logit_zero_label_one(self):
        out = T.bce_with_logits(Tensor([0.0]), np.array([1.0]))
        assert out.data[0] == pytest.approx(math.log(2.0), abs=1e-7)

    def test_saturated_positive(self):
        out = T.bce_with_logits(Tensor([50.0]), np.array([1.0]))
        assert out.data[0] <= 1e-6

    def test_against_scalar_oracle(self):
        # -[y log s + (1-y) log(1-s)] at z=-2, y=0, evaluated in float64
        want = -math.log(1.0 - 1.0 / (1.0 + math.exp(2.0)))
        out = T.bce_with_logits(Tensor([-2.0]), np.array([0.0]))
        assert out.data[0] == pytest.approx(want, abs=1e-7)

    def test_stable_for_huge_logits(self):
        out = T.bce_with_logits(Tensor([1e4, -1e4]), np.array([0.0, 1.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1e4, 1e4], rtol=1e-6)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


class TestBackward:
    def test_linear_map_gradient_structure(self):
        # loss = sum(x @ W): dL/dW[i, j] = sum_rows x[:, i]  (x replicated)
        rng = np.random.default_rng(20)
        x = rng.normal(size=(5, 3)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 2)).astype(np.float32), requires_grad=True)
        loss = T.tsum(T.matmul(Tensor(x), w))
        loss.backward()
        want = np.repeat(x.sum(axis=0, dtype=np.float64)[:, None], 2, axis=1)
        np.testing.assert_allclose(w.grad, want, rtol=1e-5)

    def test_frozen_params_absent_from_grad_map(self):
        store = ParamStore()
        w = store.add("w", np.ones((2, 2), dtype=np.float32), trainable=True)
        frozen = store.add("base", np.ones((2, 2), dtype=np.float32), trainable=False)
        loss = T.tsum(T.matmul(frozen, w))
        loss.backward()
        grads = store.grads()
        assert "w" in grads and "base" not in grads
        assert frozen.grad is None

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            (w * 2.0).backward()

    def test_reused_tensor_accumulates(self):
        w = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
        loss = T.tsum(T.add(T.mul(w, w), w))  # w^2 + w -> 2w + 1 = 7
        loss.backward()
        assert w.grad[0] == pytest.approx(7.0, rel=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_difference_each_op(self, seed):
        """Per-op FD sweep: analytic gradients of the float32 ops vs central
        differences of the same computation run on float64 copies (the ops
        preserve dtype), which measures the true derivative rather than
        float32 rounding noise."""
        rng = np.random.default_rng(seed)
        h = 1e-3

        def check(build, x):
            xt = Tensor(x.copy(), requires_grad=True)
            loss = build(xt)
            loss.backward()
            analytic = xt.grad.astype(np.float64)
            x64 = xt.data.astype(np.float64)
            numeric = fd_grad(lambda: build(Tensor(x64)).item(), x64, h)
            assert_grad_close(analytic, numeric, rtol=1e-3, floor=1e-6)

        x = rng.normal(size=(3, 4)).astype(np.float32)
        w = rng.normal(size=(4, 3)).astype(np.float32)
        check(lambda t: T.tsum(T.matmul(t, Tensor(w))), x)
        check(lambda t: T.tsum(T.silu(t)), x + 0.5)
        check(lambda t: T.tsum(T.gelu(t)), x + 0.5)
        check(lambda t: T.tsum(T.sigmoid(t)), x)
        check(lambda t: T.tsum(T.softmax_lastdim(t) * Tensor(w.T)), x)
        g = np.ones(4, dtype=np.float32)
        b = np.zeros(4, dtype=np.float32)
        check(lambda t: T.tsum(T.layer_norm(t, Tensor(g), Tensor(b)) * Tensor(w.T)), 2.0 * x)
        y = (rng.random((3, 4)) < 0.5).astype(np.float32)
        check(lambda t: T.tmean(T.bce_with_logits(t, y)), x)
        check(lambda t: T.tsum(T.tmean(t, axis=1)), x)
        check(lambda t: T.tsum(T.reshape(t, (4, 3)) * Tensor(w)), x)
        check(lambda t: T.tsum(T.transpose(t, (1, 0)) * Tensor(w)), x)
        check(lambda t: T.tsum(T.concat([t, t], axis=0) * Tensor(np.vstack([w.T, w.T]))), x)
        check(lambda t: T.tsum(T.narrow(t, 1, 1, 2)), x)
        check(lambda t: T.tsum(T.index_rows(t, np.array([0, 2, 2]))), x)
        check(lambda t: T.tsum(T.broadcast_to(T.reshape(t, (3, 1, 4)), (3, 5, 4))), x)

    def test_layer_norm_affine_grads(self):
        rng = np.random.default_rng(33)
        x = rng.normal(size=(4, 6)).astype(np.float32)
        c = rng.normal(size=(4, 6)).astype(np.float32)
        for which in ("gamma", "beta"):
            p = Tensor((np.ones if which == "gamma" else np.zeros)(6, dtype=np.float32), requires_grad=True)
            g = p if which == "gamma" else Tensor(np.ones(6, dtype=np.float32))
            b = p if which == "beta" else Tensor(np.zeros(6, dtype=np.float32))
            loss = T.tsum(T.layer_norm(Tensor(x), g, b) * Tensor(c))
            loss.backward()
            p64 = p.data.astype(np.float64)
            x64 = x.astype(np.float64)
            numeric = fd_grad(
                lambda: T.tsum(
                    T.layer_norm(Tensor(x64), Tensor(p64) if which == "gamma" else g.detach(),
                                 Tensor(p64) if which == "beta" else b.detach())
                    * Tensor(c)
                ).item(),
                p64,
                1e-3,
            )
            assert_grad_close(p.grad, numeric, rtol=1e-3, floor=1e-6)

    def test_dropout_identity_when_eval(self):
        x = Tensor(np.ones((4, 4), dtype=np.float32), requires_grad=True)
        out = T.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_dropout_scaling_and_grad(self):
        rng = np.random.default_rng(4)
        x = Tensor(np.ones((1000,), dtype=np.float32), requires_grad=True)
        out = T.dropout(x, 0.25, rng, training=True)
        kept = out.data != 0.0
        np.testing.assert_allclose(out.data[kept], 1.0 / 0.75, rtol=1e-6)
        T.tsum(out).backward()
        np.testing.assert_allclose(x.grad[kept], 1.0 / 0.75, rtol=1e-6)
        np.testing.assert_allclose(x.grad[~kept], 0.0)


class TestMode:
    def test_no_grad_blocks_graph(self):
        w = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        with T.no_grad():
            out = T.matmul(w, w)
        assert not out.requires_grad
        assert out._backward is None

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(16, 16)).astype(np.float32)
        b = rng.normal(size=(16, 16)).astype(np.float32)
        r1 = T.matmul(T.silu(Tensor(a)), Tensor(b)).data
        r2 = T.matmul(T.silu(Tensor(a)), Tensor(b)).data
        assert r1.tobytes() == r2.tobytes()

    def test_ops_finite_on_sane_inputs(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 8)).astype(np.float32)
        for f in (T.silu, T.gelu, T.sigmoid, T.softmax_lastdim):
            assert np.all(np.isfinite(f(Tensor(x)).data))


class TestParamStore:
    def test_duplicate_path_rejected(self):
        store = ParamStore()
        store.add("a", np.zeros(1))
        with pytest.raises(ValueError):
            store.add("a", np.zeros(1))

    def test_counts(self):
        store = ParamStore()
        store.add("a", np.zeros((2, 3)), trainable=True)
        store.add("b", np.zeros((4,)), trainable=False)
        assert store.n_params(trainable_only=True) == 6
        assert store.n_params(trainable_only=False) == 10
        assert store.trainable_paths() == ["a"]
