import io

import numpy as np
import pytest

from ettrack import bench, head as hd


class TestTiming:
    def test_minimums_enforced(self):
        with pytest.raises(ValueError, match="warmup"):
            bench.time_call(lambda: None, warmup=2)
        with pytest.raises(ValueError, match="repeats"):
            bench.time_call(lambda: None, repeats=29)

    def test_interleaved_counts_calls(self):
        calls = [0, 0]

        def f0():
            calls[0] += 1

        def f1():
            calls[1] += 1

        out = bench.time_interleaved([f0, f1], 3, 30)
        assert calls == [33, 33]
        assert len(out) == 2 and all(t.shape == (30,) and np.all(t >= 0) for t in out)

    def test_median_iqr(self):
        assert bench.median_iqr([1, 2, 3, 4, 5]) == (3.0, 2.0)

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv("ETTK_THREADS", "3")
        assert bench.thread_cap() == 3
        monkeypatch.delenv("ETTK_THREADS")
        assert bench.thread_cap() == 1


class TestRows:
    def test_bench_heads_rows(self):
        rows = bench.bench_heads(["conv", "exemplar"], sizes=[4, 6], D=8)
        assert [(r.head_kind, r.H) for r in rows] == [("conv", 4), ("conv", 6), ("exemplar", 4), ("exemplar", 6)]
        assert all(r.median_us > 0 and r.iqr_us >= 0 and r.D == 8 for r in rows)

    def test_write_rows(self):
        buf = io.StringIO()
        bench.write_rows([bench.BenchRow("conv", 16, 16, 128, 12.345, 1.0)], buf)
        assert buf.getvalue().splitlines() == ["head_kind,H,W,D,median_us,iqr_us", "conv,16,16,128,12.3,1.0"]

    def test_default_exemplar_is_depthwise(self):
        h = bench.default_head("exemplar", D=8)
        assert h.cls_modules[0].attn.groups == 8

    def test_repeat_runs_agree_within_iqr(self):
        h = hd.init_head("conv", D=16, rng=0)
        corr = np.random.default_rng(0).standard_normal((16, 8, 8)).astype(np.float32)
        # two 30-call runs, interleaved so load drift on a shared machine hits both alike
        a, b = bench.time_interleaved([lambda: hd.head(corr, h)] * 2)
        (ma, ia), (mb, ib) = bench.median_iqr(a), bench.median_iqr(b)
        assert abs(ma - mb) <= max(ia, ib)

    def test_kernel_rows_cover_backends(self):
        rows = bench.bench_kernels(C=4, H=6, W=6)
        kernels = {r.kernel for r in rows}
        assert {"im2col", "depthwise_conv2d", "layernorm_columns"} <= kernels
