import numpy as np
import pytest

import devmat as dm


class TestConstruct:
    def test_eye_trace(self, ref_backend):
        m = dm.Matrix(3, 3, fill="eye")
        assert dm.trace(m) == 3.0

    def test_randu_in_unit_interval(self, ref_backend):
        dm.set_seed(42)
        m = dm.Matrix(2, 2, fill="randu")
        a = m.to_numpy()
        assert np.all(a >= 0.0) and np.all(a < 1.0)

    def test_randn_deterministic_rerun(self, ref_backend):
        dm.set_seed(7)
        a = dm.Matrix(4, 4, fill="randn").to_numpy()
        dm.set_seed(7)
        b = dm.Matrix(4, 4, fill="randn").to_numpy()
        assert a.tobytes() == b.tobytes()

    def test_construct_uses_one_generator_launch(self, ref_backend):
        before = dm.counters()
        dm.Matrix(8, 8, fill="zeros")
        delta = dm.counters() - before
        assert delta.launches == 1
        assert delta.buffers_acquired == 1

    def test_fill_none_does_not_launch(self, ref_backend):
        before = dm.counters()
        dm.Matrix(8, 8)
        assert (dm.counters() - before).launches == 0

    def test_f64_on_gateless_device_raises(self):
        dm.init("parallel", device_id=1, worker_count=2)
        with pytest.raises(dm.PrecisionUnsupportedError):
            dm.Matrix(3, 3, fill="zeros", elem_type="f64")

    def test_col_row_shapes(self, ref_backend):
        c = dm.Col(5, fill="ones")
        r = dm.Row(5, fill="ones")
        assert (c.n_rows, c.n_cols) == (5, 1)
        assert (r.n_rows, r.n_cols) == (1, 5)
        assert c.is_vec() and r.is_vec()


class TestElementAccess:
    def test_checked_read(self, ref_backend):
        m = dm.Matrix(2, 2, fill="eye")
        assert m[0, 0] == 1.0
        assert m[0, 1] == 0.0
        assert m[3] == 1.0  # linear, column-major

    def test_each_read_is_one_transfer(self, ref_backend):
        m = dm.Matrix(10, 10, fill="randu")
        dm.synchronise()
        before = dm.counters()
        n = 25
        for i in range(n):
            m[i]
        delta = dm.counters() - before
        assert delta.transfers_d2h == n

    def test_out_of_range_read(self, ref_backend):
        m = dm.Matrix(2, 2, fill="zeros")
        with pytest.raises(dm.BoundsError):
            m[m.n_elem]
        with pytest.raises(dm.BoundsError):
            m[2, 0]

    def test_write_then_read_roundtrip(self, ref_backend):
        m = dm.Matrix(3, 3, fill="zeros")
        m[1, 1] = 2.5
        assert m[1, 1] == 2.5

    def test_write_counts_one_h2d(self, ref_backend):
        m = dm.Matrix(3, 3, fill="zeros")
        dm.synchronise()
        before = dm.counters()
        m[1, 1] = 4.0
        delta = dm.counters() - before
        assert delta.transfers_h2d == 1

    def test_set_then_accu(self, ref_backend):
        m = dm.Matrix(3, 3, fill="zeros")
        m[1, 1] = 7.0
        assert dm.accu(m) == 7.0

    def test_write_out_of_bounds(self, ref_backend):
        m = dm.Matrix(2, 2, fill="zeros")
        with pytest.raises(dm.BoundsError):
            m[5, 0] = 1.0

    def test_unchecked_at(self, ref_backend):
        m = dm.Matrix(2, 2, fill="eye")
        assert m.at(1, 1) == 1.0

    def test_column_major_linear_layout(self, ref_backend):
        m = dm.Matrix.from_numpy(np.arange(6, dtype=np.float32).reshape(2, 3))
        for r in range(2):
            for c in range(3):
                assert m[r, c] == m[r + c * m.n_rows]

    def test_no_iteration(self, ref_backend):
        m = dm.Matrix(3, 3, fill="ones")
        with pytest.raises(TypeError):
            iter(m)
        with pytest.raises(TypeError):
            for _ in m:
                pass

    def test_no_public_iterator_in_api(self):
        # deliberate absence: expressions and find() replace element loops
        assert "__iter__" in dm.Matrix.__dict__  # the blocker itself
        import inspect
        src = inspect.getsource(dm.Matrix.__iter__)
        assert "raise TypeError" in src


class TestMutators:
    def test_reshape_preserves_column_major_sequence(self, ref_backend):
        m = dm.Matrix.from_numpy(
            np.array([[1, 3, 5], [2, 4, 6]], dtype=np.float32))
        m.reshape(3, 2)
        np.testing.assert_array_equal(
            m.to_numpy(), np.array([[1, 4], [2, 5], [3, 6]], dtype=np.float32))

    def test_reshape_zero_pads_growth(self, ref_backend):
        m = dm.Matrix.from_numpy(np.array([[1, 3], [2, 4]], dtype=np.float32))
        m.reshape(3, 3)
        flat = m.to_numpy().flatten(order="F")
        np.testing.assert_array_equal(flat[:4], [1, 2, 3, 4])
        np.testing.assert_array_equal(flat[4:], np.zeros(5, dtype=np.float32))

    def test_set_size_without_preserving(self, ref_backend):
        m = dm.Matrix(2, 2, fill="ones")
        m.set_size(5, 5)
        assert m.n_elem == 25

    def test_set_size_same_elem_count_keeps_buffer(self, ref_backend):
        m = dm.Matrix(4, 6, fill="ones")
        buf = m.mem.buffer_id
        m.set_size(6, 4)
        assert m.mem.buffer_id == buf

    def test_reset(self, ref_backend):
        m = dm.Matrix(3, 3, fill="ones")
        m.reset()
        assert m.n_elem == 0
        assert m.is_empty()

    def test_fill_value(self, ref_backend):
        m = dm.Matrix(2, 2)
        m.fill(3.5)
        assert dm.accu(m) == 14.0

    def test_member_refills(self, ref_backend):
        m = dm.Matrix(2, 2)
        m.ones(4, 4)
        assert dm.accu(m) == 16.0
        m.eye()
        assert dm.accu(m) == 4.0

    def test_predicates(self, ref_backend):
        assert dm.Matrix(1, 5).is_vec()
        assert not dm.Matrix(3, 4).is_square()
        assert dm.Matrix(0, 0).is_empty()


class TestSubviews:
    def test_diag_of_eye(self, ref_backend):
        d = dm.Matrix(3, 3, fill="eye").diag().eval()
        np.testing.assert_array_equal(d.to_numpy().ravel(), [1, 1, 1])

    def test_offset_diagonals(self, ref_backend):
        m = dm.Matrix.from_numpy(np.arange(9, dtype=np.float32).reshape(3, 3))
        np.testing.assert_array_equal(m.diag(1).eval().to_numpy().ravel(),
                                      m.to_numpy().diagonal(1))
        np.testing.assert_array_equal(m.diag(-1).eval().to_numpy().ravel(),
                                      m.to_numpy().diagonal(-1))

    def test_row_write_scatter(self, ref_backend):
        z = dm.Matrix(3, 3, fill="zeros")
        z.row(1).assign(dm.ones(1, 3))
        assert dm.accu(z) == 3.0
        np.testing.assert_array_equal(z.to_numpy()[1], [1, 1, 1])

    def test_full_extent_submat_reads_whole(self, ref_backend):
        m = dm.Matrix(2, 2, fill="randu")
        np.testing.assert_array_equal(
            m.submat(0, 0, 1, 1).eval().to_numpy(), m.to_numpy())

    def test_read_is_one_extraction_launch(self, ref_backend):
        m = dm.Matrix(5, 5, fill="randu")
        dm.synchronise()
        before = dm.counters()
        m.cols(1, 3).eval()
        assert (dm.counters() - before).launches == 1

    def test_write_is_one_insertion_launch(self, ref_backend):
        m = dm.Matrix(5, 5, fill="zeros")
        v = dm.Matrix(5, 1, fill="ones")
        dm.synchronise()
        before = dm.counters()
        m.col(2).assign(v)
        assert (dm.counters() - before).launches == 1

    def test_diag_write(self, ref_backend):
        m = dm.Matrix(3, 3, fill="zeros")
        m.diag().assign(dm.Matrix.from_numpy(
            np.array([[1.0], [2.0], [3.0]], dtype=np.float32)))
        np.testing.assert_array_equal(m.to_numpy(),
                                      np.diag([1, 2, 3]).astype(np.float32))

    def test_region_bounds_checked(self, ref_backend):
        m = dm.Matrix(3, 3, fill="zeros")
        with pytest.raises(dm.BoundsError):
            m.row(3)
        with pytest.raises(dm.BoundsError):
            m.submat(0, 0, 3, 1)

    def test_write_shape_mismatch(self, ref_backend):
        m = dm.Matrix(3, 3, fill="zeros")
        with pytest.raises(dm.DimensionError):
            m.row(0).assign(dm.ones(1, 4))

    def test_subview_in_expression(self, ref_backend):
        m = dm.Matrix.from_numpy(np.arange(9, dtype=np.float32).reshape(3, 3))
        got = dm.evaluate(m.col(1) + m.col(2)).to_numpy().ravel()
        a = m.to_numpy()
        np.testing.assert_array_equal(got, a[:, 1] + a[:, 2])


class TestPrint:
    def test_golden_eye_with_header(self, ref_backend):
        text = dm.Matrix(2, 2, fill="eye").to_string("I")
        assert text == "I\n1 0\n0 1\n"

    def test_renders_row_by_row(self, ref_backend):
        m = dm.Matrix.from_numpy(np.array([[1.5, 2], [3, 4]], dtype=np.float32))
        assert m.to_string() == "1.5 2\n3 4\n"

    def test_print_writes_stdout(self, ref_backend, capsys):
        dm.Matrix(1, 2, fill="ones").print("hdr")
        assert capsys.readouterr().out == "hdr\n1 1\n"


class TestConvTo:
    def test_device_host_roundtrip_bit_identical(self, ref_backend):
        m = dm.Matrix(4, 4, fill="randu")
        host = dm.conv_to(m, "host")
        back = dm.conv_to(host, "device")
        assert back.to_numpy().tobytes() == m.to_numpy().tobytes()

    def test_d2h_counts_bytes(self, ref_backend):
        m = dm.Matrix(10, 10, fill="randu")
        dm.synchronise()
        before = dm.counters()
        dm.conv_to(m, "host")
        delta = dm.counters() - before
        assert delta.transfers_d2h == 1
        assert delta.bytes_d2h == 10 * 10 * 4

    def test_float_to_int_truncates_toward_zero(self, ref_backend):
        m = dm.Matrix.from_numpy(np.array([[1.7, -2.3]], dtype=np.float32))
        out = dm.evaluate(dm.conv_to(m, "i32"))
        np.testing.assert_array_equal(out.to_numpy().ravel(), [1, -2])

    def test_conv_over_resize_single_twoway_launch(self, ref_backend):
        m = dm.Matrix(3, 3, fill="ones", elem_type="i32")
        dm.synchronise()
        before = dm.counters()
        out = dm.evaluate(dm.conv_to(dm.resize(m, 5, 6), "f32"))
        dm.synchronise()
        assert (dm.counters() - before).launches == 1
        assert out.elem_type == "f32"

    def test_lazy_conversion_node(self, ref_backend):
        m = dm.Matrix(2, 2, fill="ones")
        node = dm.conv_to(m, "f64")
        assert isinstance(node, dm.ExprNode)
        assert node.elem_type == "f64"

    def test_get_dev_mem(self, ref_backend):
        m = dm.Matrix(3, 4, fill="zeros")
        buf = m.get_dev_mem()
        assert buf.length >= m.n_elem
        other = dm.Matrix(3, 4, fill="zeros")
        assert other.get_dev_mem().buffer_id != buf.buffer_id

    def test_dev_mem_handle_lifetime(self, ref_backend):
        from devmat import runtime as rt_mod
        rt = rt_mod.get_runtime()
        m = dm.Matrix(4, 4, fill="ones")
        buf = m.get_dev_mem()
        dm.evaluate(m + 1)  # unrelated work keeps the handle valid
        assert rt.read_scalar(buf, 0) == 1.0
        m.set_size(8, 8)  # resize invalidates the old handle
        dm.synchronise()
        with pytest.raises(dm.BufferError_):
            rt.read_scalar(buf, 0)

    def test_bulk_ops_constant_transfers(self, ref_backend):
        m = dm.Matrix(100, 100, fill="randu")
        dm.synchronise()
        before = dm.counters()
        dm.accu(m)
        delta = dm.counters() - before
        assert delta.transfers_d2h == 1
