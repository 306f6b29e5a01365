import numpy as np
import pytest

from msgl import kernels
from msgl.kernels import _rgrn_numpy


def _case(rng, T=7, n=5, F=4, h=6, masked=True):
    A = rng.random((n, n)) * (rng.random((n, n)) < 0.4)
    np.fill_diagonal(A, 0.0)
    s = A.sum(1, keepdims=True)
    A = np.divide(A, s, out=np.zeros_like(A), where=s > 0)
    rmask = (rng.random((n, h)) > 0.2) / 0.8 if masked else None
    return (rng.normal(size=(T, n, F)), A, rng.normal(size=(F, 4 * h)) * 0.4,
            rng.normal(size=(h, 4 * h)) * 0.4, rng.normal(size=4 * h) * 0.2,
            rng.normal(size=(h, h)) * 0.4, rng.normal(size=h) * 0.2, rmask)


def test_numpy_backend_always_available():
    assert "numpy" in kernels.available_backends()
    assert kernels.backend_name() in kernels.available_backends()


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")
@pytest.mark.parametrize("masked", [True, False])
def test_compiled_matches_numpy(rng, masked):
    for _ in range(5):
        args = _case(rng, masked=masked)
        H0, c0 = _rgrn_numpy.rgrn_forward(*args)
        with kernels.use_backend("compiled"):
            H1, c1 = kernels.rgrn_forward(*args)
            dH = rng.normal(size=H0.shape)
            g1 = kernels.rgrn_backward(c1, dH, need_dx=True)
        g0 = _rgrn_numpy.rgrn_backward(c0, dH, need_dx=True)
        np.testing.assert_allclose(H1, H0, rtol=0, atol=1e-12)
        for a, b in zip(g1, g0):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-11)


def test_use_backend_restores_previous():
    before = kernels.backend_name()
    with kernels.use_backend("numpy"):
        assert kernels.backend_name() == "numpy"
    assert kernels.backend_name() == before


def test_float32_routes_to_numpy(rng):
    args = [a.astype(np.float32) if isinstance(a, np.ndarray) else a for a in _case(rng)]
    H, _ = kernels.rgrn_forward(*args)
    assert H.dtype == np.float32
