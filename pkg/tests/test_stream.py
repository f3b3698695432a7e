import tracemalloc

import numpy as np
import pytest

from rangenet.stream import (
    BinarySource,
    CenteredSource,
    CenteringState,
    CsvSource,
    EdgeListSource,
    MatrixHeader,
    MemorySource,
    StreamError,
    center_batch,
    compute_mean_pass,
    materialize,
    open_source,
    read_binary,
    write_binary,
)


def _collect(src):
    out = []
    while True:
        b = src.next_batch()
        if b is None:
            return out
        out.append((src.current_rows(), b.copy()))


class TestHeaderAndBinary:
    def test_header_rejects_empty(self):
        with pytest.raises(StreamError):
            MatrixHeader(0, 3)

    @pytest.mark.parametrize("dtype", ["f64", "f32"])
    def test_round_trip(self, tmp_path, rng, dtype):
        x = rng.standard_normal((7, 5))
        p = tmp_path / "x.bin"
        write_binary(p, x, dtype)
        y = read_binary(p)
        tol = 0 if dtype == "f64" else 1e-6
        np.testing.assert_allclose(y, x, atol=tol)
        with BinarySource(p, 3) as src:
            assert src.header.dtype == dtype
            np.testing.assert_allclose(materialize(src), x, atol=tol)

    def test_header_layout(self, tmp_path):
        p = tmp_path / "x.bin"
        write_binary(p, np.ones((2, 3)))
        raw = p.read_bytes()
        assert raw[:4] == b"RNSV"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:16], "little") == 2
        assert int.from_bytes(raw[16:24], "little") == 3
        assert raw[24] == 1
        assert len(raw) == 25 + 6 * 8

    def test_lin500_batches(self, tmp_path, lin500):
        p = tmp_path / "lin.bin"
        write_binary(p, lin500)
        with open_source(p, batch_rows=100) as src:
            assert src.shape == (500, 500)
            assert src.batches_per_pass == 5

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"XXXX" + bytes(21))
        with pytest.raises(StreamError, match="magic"):
            BinarySource(p, 2)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.bin"
        write_binary(p, np.ones((4, 4)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(StreamError, match="bytes"):
            BinarySource(p, 2)


class TestBatches:
    def test_sizes_4_4_2(self):
        src = MemorySource(np.arange(20.0).reshape(10, 2), 4)
        sizes = [b.shape[0] for _, b in _collect(src)]
        assert sizes == [4, 4, 2]

    def test_resets_after_pass(self):
        src = MemorySource(np.arange(20.0).reshape(10, 2), 4)
        first = _collect(src)
        second = _collect(src)
        assert src.passes_completed == 2
        for (r1, b1), (r2, b2) in zip(first, second):
            assert r1 == r2 and np.array_equal(b1, b2)

    def test_shuffled_deterministic(self, rng):
        x = rng.standard_normal((23, 3))
        a = [r for r, _ in _collect(MemorySource(x, 4, "shuffled", seed=7))]
        src = MemorySource(x, 4, "shuffled", seed=7)
        b = [r for r, _ in _collect(src)]
        c = [r for r, _ in _collect(src)]
        assert a == b == c
        assert a != sorted(a)

    def test_round_trip_resorted(self, rng):
        x = rng.standard_normal((23, 3))
        parts = _collect(MemorySource(x, 5, "shuffled", seed=1))
        parts.sort(key=lambda t: t[0][0])
        y = np.vstack([b for _, b in parts])
        assert np.array_equal(x, y)

    def test_every_row_once(self, rng):
        x = rng.standard_normal((17, 2))
        rows = []
        for (start, stop), b in _collect(MemorySource(x, 4, "shuffled", seed=3)):
            assert 1 <= b.shape[0] <= 4
            rows.extend(range(start, stop))
        assert sorted(rows) == list(range(17))

    def test_only_final_sequential_batch_short(self):
        src = MemorySource(np.ones((11, 2)), 3)
        sizes = [b.shape[0] for _, b in _collect(src)]
        assert sizes[:-1] == [3, 3, 3] and sizes[-1] == 2

    def test_rejects_bad_params(self):
        with pytest.raises(StreamError):
            MemorySource(np.ones((2, 2)), 0)
        with pytest.raises(StreamError):
            MemorySource(np.ones((2, 2)), 1, order="random")

    def test_cycle_wraps(self):
        src = MemorySource(np.arange(6.0).reshape(3, 2), 2)
        it = src.cycle()
        got = [next(it) for _ in range(5)]
        assert [g.shape[0] for g in got] == [2, 1, 2, 1, 2]
        assert src.passes_completed == 2


class TestCsv:
    def test_fifteen_by_fifteen(self, tmp_path, rank5_15):
        p = tmp_path / "x.csv"
        np.savetxt(p, rank5_15, delimiter=",", fmt="%.17g")
        with open_source(p, batch_rows=4) as src:
            assert src.header == MatrixHeader(15, 15)
            np.testing.assert_array_equal(materialize(src), rank5_15)

    def test_skip_header(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("a,b\n1,2\n3,4\n")
        with CsvSource(p, 1, skip_header=True) as src:
            np.testing.assert_array_equal(materialize(src), [[1, 2], [3, 4]])

    def test_ragged_row_reports_index(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("1,2\n3,4\n5\n")
        with pytest.raises(StreamError, match="row 2"):
            CsvSource(p, 2)

    def test_non_numeric_reports_index(self, tmp_path):
        p = tmp_path / "n.csv"
        p.write_text("1,2\nx,4\n")
        with pytest.raises(StreamError, match="row 1"):
            CsvSource(p, 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(StreamError):
            open_source(tmp_path / "nope.csv")


class TestEdges:
    def test_path_graph(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("0 1\n1 2\n")
        with open_source(p, fmt="edges", batch_rows=2, n=3) as src:
            np.testing.assert_array_equal(materialize(src), [[0, 1, 0], [1, 0, 1], [0, 1, 0]])

    def test_weights_one_based_and_loops(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("# comment\n1 2 2.5\n3 3\n")
        with EdgeListSource(p, 8, one_based=True) as src:
            a = materialize(src)
        np.testing.assert_array_equal(a, [[0, 2.5, 0], [2.5, 0, 0], [0, 0, 1]])
        assert np.array_equal(a, a.T)

    def test_index_outside_n(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("0 5\n")
        with pytest.raises(StreamError):
            EdgeListSource(p, 2, n=3)

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("0 1\n0\n")
        with pytest.raises(StreamError, match="line 1"):
            EdgeListSource(p, 2)


class TestCentering:
    def test_mean_small(self):
        st = compute_mean_pass(MemorySource(np.array([[1.0, 1], [3, 3]]), 1))
        np.testing.assert_array_equal(st.mean, [2, 2])
        assert st.count == 2

    def test_mean_zero_matrix(self):
        st = compute_mean_pass(MemorySource(np.zeros((4, 3)), 3))
        np.testing.assert_array_equal(st.mean, 0)

    def test_mean_one_pass_matches_dense(self, rng):
        x = rng.standard_normal((100, 8)) + 3
        src = MemorySource(x, 7)
        st = compute_mean_pass(src)
        assert src.passes_completed == 1
        np.testing.assert_allclose(st.mean, x.mean(axis=0), atol=1e-12)

    def test_center_batch(self):
        st = CenteringState(np.array([2.0, 2.0]), 1)
        np.testing.assert_array_equal(center_batch([[2.0, 2.0]], st), [[0, 0]])
        b = np.array([[1.0, 5.0]])
        np.testing.assert_array_equal(center_batch(b, CenteringState(np.zeros(2), 1)), b)
        with pytest.raises(StreamError):
            center_batch(np.ones((1, 3)), st)

    def test_centered_column_sums(self, rng):
        x = rng.standard_normal((50, 4)) * 10 + 7
        src = MemorySource(x, 8)
        cs = CenteredSource(src, compute_mean_pass(src))
        assert np.all(np.abs(materialize(cs).sum(axis=0)) <= 1e-10)


def test_streaming_footprint_is_one_batch(tmp_path, rng):
    m, n, b = 4000, 64, 50
    p = tmp_path / "big.bin"
    write_binary(p, rng.standard_normal((m, n)))
    with BinarySource(p, b) as src:
        tracemalloc.start()
        total = 0.0
        for _, batch in src.iter_pass():
            total += float(batch.sum())
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    full = m * n * 8
    assert peak < 4 * b * n * 8 + 64_000
    assert peak < full / 10
