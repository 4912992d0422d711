import numpy as np
import pytest
from hypothesis import given, strategies as st

from driftlab.errors import ParameterError
from driftlab.io import fmt_float, read_csv, read_json, write_csv, write_json
from driftlab.market_model import default_params
from driftlab.rng import Streams, derive_seed, stream
from driftlab.rules import constant_rule, default_clip, interp_grid, myopic_rule, zero_rule, DecisionRule
from driftlab.simulation import run_chunked


class TestStreams:
    def test_reproducible(self):
        assert np.array_equal(stream(5, "W_R").standard_normal(10), stream(5, "W_R").standard_normal(10))

    def test_names_and_counters_independent(self):
        a = stream(5, "W_R").standard_normal(1000)
        b = stream(5, "marks").standard_normal(1000)
        c = stream(5, "W_R", 1).standard_normal(1000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1 and abs(np.corrcoef(a, c)[0, 1]) < 0.1

    def test_adding_stream_does_not_perturb_others(self):
        s1, s2 = Streams(3), Streams(3)
        s2["extra"].standard_normal(50)
        assert np.array_equal(s1["W_R"].standard_normal(5), s2["W_R"].standard_normal(5))

    def test_cached_generator(self):
        s = Streams(1)
        assert s["a"] is s["a"] and s.child(2).counter == 2

    def test_derived_seed(self):
        a = derive_seed(0, "evaluate", 1)
        assert a == derive_seed(0, "evaluate", 1) and 0 <= a < 2 ** 63
        assert a != derive_seed(0, "evaluate", 2)


class TestChunks:
    @staticmethod
    def task(n, streams):
        return {"x": streams["a"].standard_normal(n), "v_y": np.zeros((2, n)), "meta": n}

    def test_chunking_independent_of_workers(self):
        a = run_chunked(self.task, 10, 4, workers=1, chunk_size=4)
        b = run_chunked(self.task, 10, 4, workers=2, chunk_size=4)
        assert np.array_equal(a["x"], b["x"]) and a["meta"] == [4, 4, 2]
        assert a["v_y"].shape == (2, 10)

    def test_prefix_stable(self):
        # a larger run reuses the noise of the smaller one for the shared chunks
        a = run_chunked(self.task, 8, 4, chunk_size=4)
        b = run_chunked(self.task, 12, 4, chunk_size=4)
        assert np.array_equal(a["x"], b["x"][:8])


class TestIO:
    @given(x=st.floats(allow_nan=False, allow_infinity=False))
    def test_float_roundtrip(self, x):
        assert float(fmt_float(x)) == x

    def test_special_values(self):
        assert fmt_float(True) == "1" and fmt_float(np.int64(3)) == "3" and fmt_float("a") == "a"

    def test_csv(self, tmp_path):
        rows = np.array([[0.1, 1e-300], [np.pi, -2.0]])
        write_csv(tmp_path / "a" / "x.csv", ["u", "v"], rows)
        header, back = read_csv(tmp_path / "a" / "x.csv")
        assert header == ["u", "v"] and np.array_equal(back, rows)
        assert b"\r" not in (tmp_path / "a" / "x.csv").read_bytes()

    def test_json_numpy(self, tmp_path):
        write_json(tmp_path / "x.json", {"a": np.arange(3), "b": np.float64(0.5), "c": np.int32(2)})
        assert read_json(tmp_path / "x.json") == {"a": [0, 1, 2], "b": 0.5, "c": 2}


class TestRules:
    def test_kinds(self):
        p = default_params()
        m = np.array([[0.1], [-0.2]])
        q = np.full((2, 1, 1), 0.05)
        assert np.all(zero_rule()(0.0, m, q) == 0.0)
        assert np.allclose(constant_rule([0.3])(0.0, m, q), 0.3)
        assert np.allclose(myopic_rule(p)(0.0, m, q), m / (0.5 * 0.25))

    def test_clip(self):
        r = constant_rule([5.0], clip=1.0)
        assert r(0.0, [0.0], [[0.0]])[0] == 1.0
        with pytest.raises(ParameterError):
            DecisionRule("myopic", 1, 0.0)
        with pytest.raises(ParameterError):
            DecisionRule("other", 1, 1.0)

    def test_default_clip(self):
        p = default_params()
        assert default_clip(p, 0.04) == pytest.approx(10 * 8 * (0.1 + 6 * 0.2))

    def test_two_asset_myopic(self):
        from driftlab.market_model import ModelParams
        p = ModelParams(kappa=np.eye(2), mu_bar=[0, 0], sigma_mu=np.eye(2), sigma_R=[[0.5, 0.0], [0.1, 0.4]],
                        Gamma=np.eye(2), lam=1.0, theta=-1.0, T=1.0, m0=[0, 0], q0=np.eye(2))
        m = np.array([0.1, -0.05])
        assert np.allclose(myopic_rule(p)(0.0, m, np.eye(2)), np.linalg.solve(p.Sigma_R, m) / 2.0)

    def test_interp_exact_on_trilinear(self):
        t, m, q = np.linspace(0, 1, 3), np.linspace(-1, 1, 5), np.linspace(0, 0.2, 4)
        T, M, Q = np.meshgrid(t, m, q, indexing="ij")
        table = 1 + 2 * T + 3 * M - 4 * Q + T * M
        x = interp_grid(t, m, q, table, 0.3, np.array([0.25, -0.7]), np.array([0.05, 0.11]))
        assert np.allclose(x, 1 + 0.6 + 3 * np.array([0.25, -0.7]) - 4 * np.array([0.05, 0.11])
                           + 0.3 * np.array([0.25, -0.7]))

    def test_interp_clamps(self):
        t, m, q = np.linspace(0, 1, 2), np.linspace(-1, 1, 3), np.linspace(0, 1, 2)
        table = np.broadcast_to(m[None, :, None], (2, 3, 2))
        assert interp_grid(t, m, q, table, 2.0, np.array([5.0]), np.array([-1.0]))[0] == 1.0
