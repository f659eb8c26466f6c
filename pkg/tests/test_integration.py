"""Cross-module edge cases: aliasing, sharing, threading, degenerate shapes."""

import threading

import numpy as np
import pytest

import devmat as dm


class TestVectorInvariants:
    def test_col_rejects_matrix_shaped_assignment(self, ref_backend):
        c = dm.Col(5, fill="randu")
        with pytest.raises(dm.DimensionError):
            dm.evaluate(dm.Matrix(2, 3, fill="ones") + 0, out=c)

    def test_col_rejects_matrix_shape_even_when_aliased(self, ref_backend):
        c = dm.Col(4, fill="randu")
        with pytest.raises(dm.DimensionError):
            # aliased output takes the buffer-adoption path; the vector
            # invariant must hold there too
            dm.evaluate(dm.repmat(c, 1, 2), out=c)

    def test_col_accepts_vector_results(self, ref_backend):
        c = dm.Col(5, fill="randu")
        dm.evaluate(2 * c, out=c)
        assert (c.n_rows, c.n_cols) == (5, 1)

    def test_row_transpose_evaluates_to_column(self, ref_backend):
        r = dm.Row(5, fill="randu")
        t = r.t().eval()
        assert (t.n_rows, t.n_cols) == (5, 1)

    def test_single_arg_set_size_keeps_orientation(self, ref_backend):
        c = dm.Col(4)
        c.set_size(7)
        assert (c.n_rows, c.n_cols) == (7, 1)
        r = dm.Row(4)
        r.set_size(7)
        assert (r.n_rows, r.n_cols) == (1, 7)


class TestConversionChains:
    def test_nested_conversions(self, ref_backend):
        a = dm.Matrix.from_numpy(np.array([[1.9, -2.9]], dtype=np.float32))
        node = dm.conv_to(dm.conv_to(a, "i32"), "f64")
        out = dm.evaluate(node)
        assert out.elem_type == "f64"
        np.testing.assert_array_equal(out.to_numpy().ravel(), [1.0, -2.0])

    def test_conv_over_product_stays_standalone(self, ref_backend):
        a = dm.Matrix(4, 4, fill="randu")
        node = dm.conv_to(a @ a, "f64")
        plan = dm.plan(node)
        assert plan.n_invocations == 2
        assert plan.steps[0].kernel == "gemm"
        assert plan.steps[1].kernel == "mov_copy"

    def test_chain_through_converted_input(self, ref_backend):
        ints = dm.Matrix.from_numpy(np.array([[1, 2], [3, 4]], dtype=np.int32))
        node = dm.exp(dm.conv_to(ints, "f32")) + 1
        got = dm.evaluate(node).to_numpy()
        np.testing.assert_allclose(
            got, np.exp(ints.to_numpy().astype(np.float32)) + 1, rtol=1e-6)


class TestSharingAndLifetime:
    def test_shared_subexpression_evaluates_consistently(self, ref_backend):
        a = dm.Matrix(6, 6, fill="randu")
        shared = 2 * a + 1
        node = (shared + shared) - shared
        expected = dm.tree_walk_oracle(node)
        np.testing.assert_allclose(dm.evaluate(node).to_numpy(), expected, rtol=1e-6)

    def test_expression_keeps_operands_alive(self, ref_backend):
        a = dm.Matrix(5, 5, fill="ones")
        node = a + 1
        del a
        import gc
        gc.collect()
        assert dm.accu(dm.evaluate(node)) == 50.0

    def test_deep_chain_splits_by_stage_cap(self, ref_backend):
        node = dm.Matrix(4, 4, fill="randu")._as_expr_node()
        for i in range(20):
            node = dm.build_node("eop_scalar_plus", (node,), (i,))
        plan = dm.plan(node)
        assert plan.n_invocations == 3  # 8 + 8 + 4 stages

    def test_eval_with_elem_type_sugar(self, ref_backend):
        a = dm.Matrix(3, 3, fill="ones")
        out = (2 * a).eval("i32")
        assert out.elem_type == "i32"
        assert dm.accu(out) == 18


class TestDegenerateShapes:
    def test_inner_zero_product_is_zero_matrix(self, ref_backend):
        a = dm.Matrix(3, 0)
        b = dm.Matrix(0, 4)
        out = dm.evaluate(a @ b)
        assert (out.n_rows, out.n_cols) == (3, 4)
        np.testing.assert_array_equal(out.to_numpy(), np.zeros((3, 4), dtype=np.float32))

    def test_empty_elementwise(self, ref_backend):
        e = dm.Matrix(0, 5)
        out = dm.evaluate(2 * e + 1)
        assert out.n_elem == 0

    def test_one_by_one_everything(self, ref_backend):
        m = dm.Matrix.from_numpy(np.array([[4.0]], dtype=np.float32))
        assert dm.as_scalar(m @ m) == 16.0
        assert dm.det(m) == pytest.approx(4.0)
        np.testing.assert_allclose(dm.eig_sym(m).to_numpy().ravel(), [4.0])
        low, up, perm = dm.lu(m)
        assert low[0, 0] == 1.0 and up[0, 0] == 4.0

    def test_print_formats_ints_and_doubles(self, ref_backend):
        i = dm.Matrix.from_numpy(np.array([[1, -2]], dtype=np.int32))
        assert i.to_string() == "1 -2\n"
        d = dm.Matrix.from_numpy(np.array([[0.25]], dtype=np.float64))
        assert d.to_string() == "0.25\n"


class TestConcurrency:
    def test_parallel_evaluations_in_threads(self, par_backend):
        a = dm.Matrix(64, 64, fill="randu")
        expected = dm.evaluate(2 * a + 1).to_numpy()
        results = [None] * 4
        errors = []

        def work(i):
            try:
                results[i] = dm.evaluate(2 * a + 1).to_numpy()
            except BaseException as exc:  # surfaced by the assert below
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert not errors
        for r in results:
            assert r is not None
            assert r.tobytes() == expected.tobytes()

    def test_reductions_from_threads(self, par_backend):
        dm.set_seed(5)
        v = dm.Col(100_000, fill="randu")
        expected = dm.accu(v)
        outcomes = []

        def work():
            outcomes.append(dm.accu(v))

        threads = [threading.Thread(target=work) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert outcomes == [expected] * 4


class TestElemTypePaths:
    def test_u64_arithmetic_and_reductions(self, ref_backend):
        idx = dm.find(dm.Matrix(3, 3, fill="eye"))
        assert idx.elem_type == "u64"
        doubled = dm.evaluate(2 * idx)
        np.testing.assert_array_equal(doubled.to_numpy().ravel(), [0, 8, 16])
        assert dm.accu(idx) == 12

    def test_integer_matrix_product(self, ref_backend):
        a = dm.Matrix.from_numpy(np.array([[1, 2], [3, 4]], dtype=np.int32))
        out = dm.gemm(a, a)
        np.testing.assert_array_equal(out.to_numpy(),
                                      np.array([[7, 10], [15, 22]], dtype=np.int32))

    def test_i32_trunc_division(self, ref_backend):
        a = dm.Matrix.from_numpy(np.array([[-7, 7]], dtype=np.int32))
        got = dm.evaluate(a / 2).to_numpy().ravel()
        np.testing.assert_array_equal(got, [-3, 3])  # trunc, not floor

    def test_f64_expression_gated_without_f64_leaves(self):
        dm.init("parallel", device_id=1, worker_count=1)
        with pytest.raises(dm.PrecisionUnsupportedError):
            dm.zeros(3, 3, elem_type="f64").eval()
        src = dm.Matrix(2, 2, fill="ones")  # f32 is fine
        with pytest.raises(dm.PrecisionUnsupportedError):
            dm.evaluate(dm.conv_to(src, "f64"))


class TestHostBridge:
    def test_host_matrix_f64_and_int_roundtrip(self, ref_backend):
        for arr in (np.arange(6, dtype=np.float64).reshape(2, 3),
                    np.arange(6, dtype=np.int32).reshape(3, 2)):
            m = dm.Matrix.from_numpy(arr)
            np.testing.assert_array_equal(m.to_numpy(), arr)

    def test_precision_gate_blocks_host_upload(self):
        dm.init("parallel", device_id=1, worker_count=1)
        host = dm.HostMatrix.from_numpy(np.zeros((2, 2)))
        assert host.elem_type == "f64"
        with pytest.raises(dm.PrecisionUnsupportedError):
            dm.to_device(host)

    def test_wall_clock_measures(self, ref_backend):
        import time
        c = dm.wall_clock()
        c.tic()
        time.sleep(0.01)
        assert c.toc() >= 0.009
