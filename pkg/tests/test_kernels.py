import numpy as np
import pytest

import devmat as dm
from devmat import kernels


def _host(m):
    return m.to_numpy()


class TestElementwise:
    def test_scalar_minus_pre_at_zero_negates(self, ref_backend):
        a = dm.Matrix(5, 5, fill="randu")
        out = dm.evaluate(0 - a)
        np.testing.assert_array_equal(_host(out), -_host(a))

    def test_self_division_gives_ones(self, ref_backend):
        a = dm.evaluate(dm.Matrix(5, 5, fill="randu") + 0.5)
        out = dm.evaluate(a / a)
        np.testing.assert_array_equal(_host(out), np.ones((5, 5), dtype=np.float32))

    def test_fused_chain_matches_oracle_in_one_launch(self, ref_backend):
        a = dm.Matrix(16, 16, fill="randu")
        b = dm.Matrix(16, 16, fill="randu")
        node = 4 * a + b - 2
        expected = dm.tree_walk_oracle(node)
        dm.synchronise()
        before = dm.counters()
        got = dm.evaluate(node)
        dm.synchronise()
        assert (dm.counters() - before).launches == 1
        err = np.abs(_host(got) - expected).max()
        assert err <= 1e-6 * max(np.abs(expected).max(), 1.0)

    def test_unary_functions_match_numpy(self, ref_backend):
        a = dm.evaluate(0.1 + 0.8 * dm.Matrix(7, 3, fill="randu"))
        host = _host(a)
        for fn, ref in [(dm.exp, np.exp), (dm.log, np.log), (dm.log10, np.log10),
                        (dm.sqrt, np.sqrt), (dm.square, np.square),
                        (dm.cos, np.cos), (dm.sin, np.sin), (dm.tan, np.tan),
                        (dm.acos, np.arccos), (dm.asin, np.arcsin),
                        (dm.atan, np.arctan), (dm.absolute, np.abs)]:
            got = _host(dm.evaluate(fn(a)))
            np.testing.assert_allclose(got, ref(host), rtol=2e-6, atol=1e-7)

    def test_power(self, ref_backend):
        a = dm.Matrix(4, 4, fill="randu")
        got = _host(dm.evaluate(dm.power(a, 3)))
        np.testing.assert_allclose(got, _host(a) ** 3, rtol=1e-6)

    def test_int_arithmetic_wraps_like_device(self, ref_backend):
        a = dm.Matrix.from_numpy(np.array([[7, -3]], dtype=np.int32))
        got = _host(dm.evaluate(a * a))
        np.testing.assert_array_equal(got, [[49, 9]])

    def test_large_buffer_blocked_execution(self, ref_backend):
        n = kernels.ELEM_BLOCK * 2 + 17
        v = dm.Col(n, fill="randu")
        out = dm.evaluate(2 * v)
        np.testing.assert_array_equal(_host(out), 2 * _host(v))


class TestReductions:
    def test_accu_exact_for_ones(self, ref_backend):
        assert dm.accu(dm.Col(1000, fill="ones")) == 1000.0

    def test_accu_empty_is_zero(self, ref_backend):
        assert dm.accu(dm.Matrix(0, 0)) == 0

    def test_dot(self, ref_backend):
        a = dm.Matrix.from_numpy(np.array([[1.0], [2.0], [3.0]], dtype=np.float32))
        b = dm.Matrix.from_numpy(np.array([[2.0], [2.0], [2.0]], dtype=np.float32))
        assert dm.dot(a, b) == 12.0

    def test_dot_length_mismatch(self, ref_backend):
        a = dm.Col(3, fill="ones")
        b = dm.Col(4, fill="ones")
        with pytest.raises(dm.DimensionError):
            dm.dot(a, b)

    def test_accu_deterministic_across_block_counts(self, ref_backend):
        dm.set_seed(3)
        n = kernels.REDUCE_BLOCK * 3 + 41
        v = dm.Col(n, fill="randu")
        first = dm.accu(v)
        for _ in range(3):
            assert dm.accu(v) == first

    def test_min_max_over_empty_is_an_error(self, ref_backend):
        from devmat import runtime as rt_mod
        from devmat.runtime import FlatView, KernelInvocation
        rt = rt_mod.get_runtime()
        buf = rt.acquire_memory(0, "f32")
        with pytest.raises(ValueError):
            rt.execute_reduce(KernelInvocation("reduce_min", (FlatView(buf, 0, 0),), None))
        with pytest.raises(ValueError):
            rt.execute_reduce(KernelInvocation("reduce_max", (FlatView(buf, 0, 0),), None))

    def test_reduce_scalar_transfer_accounting(self, ref_backend):
        v = dm.Col(10000, fill="randu")
        dm.synchronise()
        before = dm.counters()
        dm.accu(v)
        delta = dm.counters() - before
        assert delta.launches == 1
        assert delta.transfers_d2h == 1
        assert delta.bytes_d2h == 4


class TestReduceDim:
    def test_sum_eye_columns(self, ref_backend):
        got = _host(dm.evaluate(dm.sum(dm.Matrix(3, 3, fill="eye"), 0)))
        np.testing.assert_array_equal(got, [[1, 1, 1]])

    def test_var_of_constant_is_zero(self, ref_backend):
        m = dm.Matrix(4, 5, fill="ones")
        for dim in (0, 1):
            assert dm.accu(dm.var(m, dim)) == 0.0

    def test_mean_var_match_two_pass_host_oracle(self, ref_backend):
        dm.set_seed(5)
        m = dm.Matrix(5, 4, fill="randu")
        a = _host(m).astype(np.float64)
        for dim in (0, 1):
            axis = 0 if dim == 0 else 1
            mean = _host(dm.evaluate(dm.mean(m, dim))).ravel()
            np.testing.assert_allclose(mean, a.mean(axis=axis), rtol=1e-6)
            var = _host(dm.evaluate(dm.var(m, dim))).ravel()
            two_pass = ((a - a.mean(axis=axis, keepdims=True)) ** 2).sum(axis=axis) / (a.shape[axis] - 1)
            np.testing.assert_allclose(var, two_pass, rtol=1e-5)
            sd = _host(dm.evaluate(dm.stddev(m, dim))).ravel()
            np.testing.assert_allclose(sd, np.sqrt(two_pass), rtol=1e-5)

    def test_min_max_dim(self, ref_backend):
        m = dm.Matrix.from_numpy(np.array([[1, 5], [4, 2]], dtype=np.float32))
        np.testing.assert_array_equal(_host(dm.evaluate(dm.max(m, 0))).ravel(), [4, 5])
        np.testing.assert_array_equal(_host(dm.evaluate(dm.min(m, 1))).ravel(), [1, 2])


class TestGenerators:
    def test_linspace_inclusive_endpoint(self, ref_backend):
        got = _host(dm.linspace(0, 1, 3).eval()).ravel()
        np.testing.assert_array_equal(got, [0.0, 0.5, 1.0])

    def test_linspace_degenerate_single_point(self, ref_backend):
        got = _host(dm.linspace(5, 5, 1).eval()).ravel()
        np.testing.assert_array_equal(got, [5.0])

    def test_repmat_identity(self, ref_backend):
        a = dm.Matrix(3, 2, fill="randu")
        got = _host(dm.repmat(a, 1, 1).eval())
        np.testing.assert_array_equal(got, _host(a))

    def test_repmat_blocks(self, ref_backend):
        a = dm.Matrix.from_numpy(np.array([[1, 2], [3, 4]], dtype=np.float32))
        got = _host(dm.repmat(a, 2, 3).eval())
        np.testing.assert_array_equal(got, np.tile(_host(a), (2, 3)))

    def test_eye_rectangular(self, ref_backend):
        got = _host(dm.eye(2, 4).eval())
        np.testing.assert_array_equal(got, np.eye(2, 4, dtype=np.float32))

    def test_randu_schedule_independent(self):
        dm.init("parallel", worker_count=2)
        dm.set_seed(123)
        a = _host(dm.Matrix(100, 100, fill="randu"))
        dm.shutdown()
        dm.init("parallel", worker_count=2)
        dm.set_seed(123)
        b = _host(dm.Matrix(100, 100, fill="randu"))
        assert a.tobytes() == b.tobytes()

    def test_repeated_fills_differ(self, ref_backend):
        dm.set_seed(9)
        m = dm.Matrix(8, 8, fill="randu")
        first = _host(m)
        m.randu()
        second = _host(m)
        assert first.tobytes() != second.tobytes()

    def test_randn_moments(self, ref_backend):
        dm.set_seed(11)
        z = _host(dm.Matrix(500, 500, fill="randn")).astype(np.float64)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01


class TestMovement:
    def test_transpose_involution_bit_identical(self, ref_backend):
        a = dm.Matrix(13, 7, fill="randu")
        t1 = dm.evaluate(dm.build_node("op_htrans", (a._as_expr_node(),)))
        t2 = dm.evaluate(dm.build_node("op_htrans", (t1._as_expr_node(),)))
        assert _host(t2).tobytes() == _host(a).tobytes()

    def test_resize_grows_with_zero_fill(self, ref_backend):
        a = dm.Matrix(2, 2, fill="ones")
        got = _host(dm.resize(a, 3, 3).eval())
        expect = np.zeros((3, 3), dtype=np.float32)
        expect[:2, :2] = 1
        np.testing.assert_array_equal(got, expect)

    def test_resize_shrinks_keeping_top_left(self, ref_backend):
        a = dm.Matrix.from_numpy(np.arange(16, dtype=np.float32).reshape(4, 4))
        got = _host(dm.resize(a, 2, 3).eval())
        np.testing.assert_array_equal(got, _host(a)[:2, :3])

    def test_join_cols_lengthens(self, ref_backend):
        a = dm.Matrix(2, 3, fill="ones")
        b = dm.Matrix(2, 3, fill="zeros")
        got = _host(dm.join_cols(a, b).eval())
        assert got.shape == (4, 3)
        np.testing.assert_array_equal(got[:2], np.ones((2, 3)))
        np.testing.assert_array_equal(got[2:], np.zeros((2, 3)))

    def test_join_rows_widens(self, ref_backend):
        a = dm.Matrix(2, 2, fill="ones")
        b = dm.Matrix(2, 3, fill="zeros")
        got = _host(dm.join_rows(a, b).eval())
        assert got.shape == (2, 5)

    def test_vectorise_column_major_order(self, ref_backend):
        a = dm.Matrix.from_numpy(np.array([[1, 3], [2, 4]], dtype=np.float32))
        got = _host(dm.vectorise(a).eval()).ravel()
        np.testing.assert_array_equal(got, [1, 2, 3, 4])

    def test_diagmat_and_diagvec_roundtrip(self, ref_backend):
        v = dm.Matrix.from_numpy(np.array([[1.0], [2.0], [3.0]], dtype=np.float32))
        d = dm.diagmat(v).eval()
        np.testing.assert_array_equal(_host(d), np.diag([1, 2, 3]).astype(np.float32))
        back = dm.diagvec(d).eval()
        np.testing.assert_array_equal(_host(back).ravel(), [1, 2, 3])


class TestPredicates:
    def test_find_on_zeros_is_empty(self, ref_backend):
        out = dm.find(dm.Matrix(3, 3, fill="zeros"))
        assert out.n_rows == 0

    def test_find_eye_column_major_indices(self, ref_backend):
        out = dm.find(dm.Matrix(3, 3, fill="eye"))
        np.testing.assert_array_equal(_host(out).ravel(), [0, 4, 8])

    def test_find_indices_strictly_ascending(self, ref_backend):
        dm.set_seed(21)
        m = dm.Matrix(100, 100, fill="randu")
        idx = _host(dm.find(m > 0.5)).ravel()
        assert np.all(np.diff(idx.astype(np.int64)) > 0)

    def test_count_matches_host_loop_with_few_transfers(self, ref_backend):
        dm.set_seed(33)
        m = dm.Matrix(1000, 1000, fill="randu")
        host = _host(m)
        dm.synchronise()
        before = dm.counters()
        count = dm.find(m > 0.3).n_rows
        delta = dm.counters() - before
        assert count == int((host > 0.3).sum())
        assert delta.transfers_d2h <= 2

    def test_all_any(self, ref_backend):
        m = dm.Matrix(4, 4, fill="ones")
        assert dm.all(m)
        assert dm.any(m)
        z = dm.Matrix(4, 4, fill="zeros")
        assert not dm.any(z)
        assert not dm.all(z)
        assert dm.all(m < 2)
        assert not dm.any(m > 5)

    def test_all_any_empty_conventions(self, ref_backend):
        e = dm.Matrix(0, 0)
        assert dm.all(e) is True
        assert dm.any(e) is False


class TestTwoWayEquivalence:
    @pytest.mark.parametrize("target", ["f64", "i32", "u64"])
    def test_fused_conversion_equals_convert_after(self, ref_backend, target):
        dm.set_seed(17)
        a = dm.Matrix(9, 9, fill="randu")
        scaled = 10 * a + 1  # keeps u64 targets positive
        fused = dm.evaluate(dm.conv_to(scaled, target))
        plain = dm.evaluate(scaled)
        converted = dm.evaluate(dm.conv_to(plain, target), fuse=False)
        assert _host(fused).tobytes() == _host(converted).tobytes()

    def test_twoway_movement_matches(self, ref_backend):
        a = dm.Matrix(4, 4, fill="randu")
        fused = dm.evaluate(dm.conv_to(dm.resize(a, 6, 2), "f64"))
        staged = dm.evaluate(dm.conv_to(dm.resize(a, 6, 2).eval(), "f64"), fuse=False)
        assert _host(fused).tobytes() == _host(staged).tobytes()


class TestPurity:
    def test_rerun_bit_identical(self, ref_backend):
        dm.set_seed(8)
        a = dm.Matrix(64, 64, fill="randu")
        b = dm.Matrix(64, 64, fill="randu")
        node = dm.exp(0 - (a * b)) + 2
        x = _host(dm.evaluate(node))
        y = _host(dm.evaluate(node))
        assert x.tobytes() == y.tobytes()

    def test_kernel_source_templates_exist_for_inventory(self):
        for kind, in_t, out_t in kernels.full_inventory():
            text = kernels.kernel_source(kind, in_t, out_t)
            assert kind in text
            assert kernels.source_hash(kind, in_t, out_t) != kernels.source_hash(
                kind, in_t, "f32" if out_t != "f32" else "f64")
