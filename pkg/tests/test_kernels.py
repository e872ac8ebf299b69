import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedpriv import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")

shapes = st.tuples(st.integers(1, 5), st.integers(1, 12), st.integers(1, 9))


def block(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape) * 3


@needs_numba
class TestBackendsAgree:
    @given(shape=shapes, seed=st.integers(0, 2**31))
    def test_sorted_sums(self, shape, seed):
        x = block(seed, shape)
        # identical ordering of additions gives bitwise equal sums
        assert np.array_equal(K.sorted_observation_sums_numpy(x), K.sorted_observation_sums_numba(x))

    @given(shape=shapes, seed=st.integers(0, 2**31), tau=st.floats(0.01, 10))
    def test_clipped_sums(self, shape, seed, tau):
        x = block(seed, shape)
        assert np.array_equal(K.clipped_observation_sums_numpy(x, tau), K.clipped_observation_sums_numba(x, tau))

    @given(n=st.integers(2, 30), d=st.integers(1, 20), seed=st.integers(0, 2**31))
    def test_leave_one_out(self, n, d, seed):
        x = block(seed, (n, d))
        a, b = K.max_leave_one_out_inner_numpy(x), K.max_leave_one_out_inner_numba(x)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    @given(n=st.integers(2, 20), d=st.integers(1, 10), seed=st.integers(0, 2**31), slack=st.floats(0, 50))
    def test_subset_excess(self, n, d, seed, slack):
        rng = np.random.default_rng(seed)
        x = block(seed, (n, d))
        sizes = rng.integers(1, n + 1, size=6)
        members = np.concatenate([rng.choice(n, size=k, replace=False) for k in sizes])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        a = K.subset_norm_excess_numpy(x, members, offsets, slack)
        b = K.subset_norm_excess_numba(x, members, offsets, slack)
        assert a == pytest.approx(b, rel=1e-12, abs=1e-9)


def test_sorted_sums_ignore_observation_order():
    x = block(1, (3, 11, 4))
    perm = np.random.default_rng(2).permutation(11)
    assert np.array_equal(K.sorted_observation_sums(x), K.sorted_observation_sums(x[:, perm]))


def test_leave_one_out_matches_definition():
    x = block(3, (6, 4))
    direct = max(abs(x[i] @ (x.sum(axis=0) - x[i])) for i in range(6))
    assert K.max_leave_one_out_inner(x) == pytest.approx(direct, rel=1e-13)


@pytest.mark.parametrize(
    "env, expected",
    [({"FEDPRIV_BACKEND": "numpy"}, "numpy"), ({"FEDPRIV_DISABLE_NUMBA": "1"}, "numpy"),
     ({"FEDPRIV_BACKEND": "numba"}, "numba" if K.HAS_NUMBA else "numpy")],
)
def test_backend_flag(env, expected):
    clean = {k: v for k, v in os.environ.items() if not k.startswith("FEDPRIV_")}
    out = subprocess.run(
        [sys.executable, "-c", "from fedpriv import _kernels; print(_kernels.BACKEND)"],
        env={**clean, **env}, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected


def test_bad_backend_flag():
    clean = {k: v for k, v in os.environ.items() if not k.startswith("FEDPRIV_")}
    out = subprocess.run(
        [sys.executable, "-c", "import fedpriv._kernels"],
        env={**clean, "FEDPRIV_BACKEND": "cuda"}, capture_output=True, text=True,
    )
    assert out.returncode != 0 and "FEDPRIV_BACKEND" in out.stderr


def test_statistics_identical_across_backends():
    code = (
        "import numpy as np\n"
        "from fedpriv.procedures import build_procedure, simulate_statistics\n"
        "from fedpriv.sequence_model import ModelConfig\n"
        "cfg = ModelConfig(m=4, n=20, sigma=1.0, s=1.0, epsilon=0.7, delta=1e-3, alpha=0.05)\n"
        "out = [simulate_statistics(build_procedure(t, cfg, 2), np.full(6, 0.2), 20, 3, 1) for t in ('I', 'II', 'III')]\n"
        "print(np.concatenate(out).tobytes().hex())\n"
    )
    clean = {k: v for k, v in os.environ.items() if not k.startswith("FEDPRIV_")}
    runs = [
        subprocess.run([sys.executable, "-c", code], env={**clean, "FEDPRIV_BACKEND": b},
                       capture_output=True, text=True, check=True).stdout
        for b in ("numpy", "numba")
    ]
    assert runs[0] == runs[1]
