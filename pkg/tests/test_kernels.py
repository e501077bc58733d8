import os
import subprocess
import sys

import numpy as np
import pytest

from dpbilevel import kernels, streams
from dpbilevel.experiments import inner_scaling_instance
from dpbilevel.inner import derive_inner_params, dp_loc_sgd
from dpbilevel.kernels import _fallback

compiled = pytest.importorskip("dpbilevel.kernels._affine")


def _inputs(seed, d=6, k=500, radius=0.3):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((d, d))
    H = M @ M.T / d + np.eye(d)
    drive = rng.standard_normal((k, d))
    etas = 1.0 / np.arange(1, k + 1, dtype=float)
    center = rng.standard_normal(d) * 0.1
    return center.copy(), center, radius, H, drive, etas


@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    y1, center, R, H, drive, etas = _inputs(seed)
    y2 = y1.copy()
    acc1, acc2 = np.zeros_like(y1), np.zeros_like(y1)
    w1 = compiled.affine_round(y1, center, R, H, drive, etas, acc1, np.empty_like(y1))
    w2 = _fallback.affine_round(y2, center, R, H, drive, etas, acc2, np.empty_like(y2))
    assert np.allclose(y1, y2, rtol=0, atol=1e-12)
    assert np.allclose(acc1, acc2, rtol=1e-12, atol=1e-12)
    assert w1 == pytest.approx(w2, rel=1e-12)
    assert w1 <= 1.0


def test_iterates_never_leave_ball():
    y, center, R, H, drive, etas = _inputs(0, radius=0.05)
    for t in range(drive.shape[0]):
        acc = np.zeros_like(y)
        compiled.affine_round(y, center, R, H, drive[t:t + 1] * 50, etas[t:t + 1], acc, np.empty_like(y))
        assert np.linalg.norm(y - center) <= R + 1e-12


def test_solver_results_agree_across_backends():
    obj, *_ = inner_scaling_instance(500, 5)
    p = derive_inner_params(1.0, 3.0, 500, 5, 1.0, 1e-3, b_in=10, overrides={"T_cap": 300})
    a = dp_loc_sgd(obj, np.zeros(5), p, streams.stream(0), backend=compiled.affine_round)
    b = dp_loc_sgd(obj, np.zeros(5), p, streams.stream(0), backend=_fallback.affine_round)
    assert np.allclose(a.y, b.y, rtol=0, atol=1e-10)


def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_environment_forces_fallback():
    env = dict(os.environ, DPBILEVEL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from dpbilevel import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
