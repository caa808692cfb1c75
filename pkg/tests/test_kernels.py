import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ffm.kernels import (
    KernelSpec,
    SingularInteractionError,
    dense_block,
    helmholtz_kernel,
    is_oscillatory,
    kernel_by_name,
    laplace_kernel,
)

vec3 = arrays(np.float64, 3, elements=st.floats(-5, 5, allow_nan=False))


def test_laplace_values():
    G = laplace_kernel()
    assert G([0, 0, 0], [1, 0, 0]) == pytest.approx(1 / (4 * np.pi))
    assert G([0, 0, 0], [0, 2, 0]) == pytest.approx(1 / (8 * np.pi))
    assert G([1, 2, 3], [4, 6, 3]) == pytest.approx(1 / (20 * np.pi))
    assert G.field == "real" and G.wavenumber == 0


def test_helmholtz_values():
    G = helmholtz_kernel(2 * np.pi)
    assert G([0, 0, 0], [1, 0, 0]) == pytest.approx(1 / (4 * np.pi))
    assert helmholtz_kernel(np.pi)([0, 0, 0], [0, 0, 1]) == pytest.approx(-1 / (4 * np.pi))
    val = helmholtz_kernel(1.0)([0, 0, 0], [2, 0, 0])
    assert val == pytest.approx((np.cos(2) + 1j * np.sin(2)) / (8 * np.pi), rel=1e-14)
    assert val.real == pytest.approx(-0.016558, abs=1e-6)
    assert G.field == "complex"


def test_helmholtz_rejects_nonpositive_wavenumber():
    with pytest.raises(ValueError):
        helmholtz_kernel(0.0)
    with pytest.raises(ValueError):
        helmholtz_kernel(-1.0)


def test_oscillatory_kernels_must_be_complex():
    with pytest.raises(ValueError):
        KernelSpec(lambda x, y: x[..., 0], field="real", wavenumber=1.0)


def test_kernel_by_name():
    assert kernel_by_name("laplace").name == "laplace"
    assert kernel_by_name("Helmholtz", 3.0).wavenumber == 3.0
    with pytest.raises(ValueError):
        kernel_by_name("helmholtz")
    with pytest.raises(ValueError):
        kernel_by_name("yukawa")


def test_is_oscillatory():
    assert not is_oscillatory(laplace_kernel(), 1e6)
    assert is_oscillatory(helmholtz_kernel(100.0), 1.0, 1.0)
    assert not is_oscillatory(helmholtz_kernel(0.5), 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 50), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_is_oscillatory_monotone(k, d1, d2):
    G = helmholtz_kernel(k)
    lo, hi = sorted((d1, d2))
    assert is_oscillatory(G, lo) <= is_oscillatory(G, hi)


@settings(max_examples=100, deadline=None)
@given(vec3, vec3, vec3)
def test_translation_invariance_and_symmetry(x, y, t):
    if np.linalg.norm(x - y) < 1e-3:
        return
    for G in (laplace_kernel(), helmholtz_kernel(2.5)):
        np.testing.assert_allclose(G(x + t, y + t), G(x, y), rtol=1e-9)
    L = laplace_kernel()
    assert L(x, y) == pytest.approx(L(y, x), rel=1e-12)
    assert abs(helmholtz_kernel(2.5)(x, y)) == pytest.approx(L(x, y), rel=1e-12)


def test_dense_block_hand_values():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 3, 0]], dtype=float)
    y = np.array([[0, 0, 1], [0, 4, 0]], dtype=float)
    K = dense_block(laplace_kernel(), x, y)
    r = np.array([[1, 4], [np.sqrt(2), np.sqrt(17)], [np.sqrt(10), 1]])
    np.testing.assert_allclose(K, 1 / (4 * np.pi * r))


def test_dense_block_single_entry():
    K = dense_block(helmholtz_kernel(1.0), [[0, 0, 0]], [[2, 0, 0]])
    assert K.shape == (1, 1)
    assert K[0, 0] == helmholtz_kernel(1.0)([0, 0, 0], [2, 0, 0])


def test_dense_block_self_exclusion(rng):
    x = rng.random((5, 3))
    ids = np.arange(5)
    K = dense_block(laplace_kernel(), x, x, target_ids=ids, source_ids=ids)
    assert np.all(np.diag(K) == 0)
    assert np.all(K[~np.eye(5, dtype=bool)] > 0)


def test_dense_block_reports_coincident_nodes():
    x = np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]], dtype=float)
    ids = np.arange(3)
    with pytest.raises(SingularInteractionError) as err:
        dense_block(laplace_kernel(), x, x, target_ids=ids, source_ids=ids)
    assert {err.value.target, err.value.source} == {0, 2}


def test_custom_kernel_without_radial(rng):
    G = KernelSpec(lambda x, y: np.exp(-np.sum((x - y) ** 2, axis=-1)), name="gauss")
    x, y = rng.random((4, 3)), rng.random((3, 3))
    K = dense_block(G, x, y)
    np.testing.assert_allclose(K, np.exp(-((x[:, None] - y[None]) ** 2).sum(-1)))
    assert not G.supports_planewave
