import numpy as np
import pytest

from polyrbf.errors import UnidentifiableTensorError
from polyrbf.gradients import GradientScheme
from polyrbf.microstructure import (
    DiffusionTensor,
    components_to_matrix,
    fa,
    fit_tensor_wlls,
    fit_tensors,
    md,
    negative_eigenvalue_flags,
)
from polyrbf.phantom import euler_to_matrix, tensor_from_eig

# sqrt(1.5 * sum((l - mean)^2) / sum(l^2)) for (2.0, 0.2, 0.2)e-3 (mpmath oracle)
FA_FIXTURE = 0.8911327886790069


def _components(D):
    return np.array([D[0, 0], D[1, 1], D[2, 2], D[0, 1], D[0, 2], D[1, 2]])


def test_planted_tensor_recovered(hcp):
    D = tensor_from_eig([1.7e-3, 0.4e-3, 0.2e-3], euler_to_matrix([0.3, 1.1, -0.4]))
    S = np.exp(-hcp.bvals * np.einsum("mi,ij,mj->m", hcp.bvecs, D, hcp.bvecs))
    t = fit_tensor_wlls(hcp, S)
    assert np.max(np.abs(t.matrix - D)) < 1e-8
    assert abs(t.log_s0) < 1e-8


def test_isotropic_eigenvalues_equal(hcp):
    S = np.exp(-hcp.bvals * 0.9e-3)
    lam = fit_tensor_wlls(hcp, S).eigenvalues
    np.testing.assert_allclose(lam, 0.9e-3, rtol=0, atol=1e-8)
    assert fa(lam) == pytest.approx(0.0, abs=1e-6)


def test_coplanar_directions_unidentifiable():
    ang = np.linspace(0, np.pi, 6, endpoint=False)
    vecs = np.c_[np.cos(ang), np.sin(ang), np.zeros(6)]
    s = GradientScheme(np.r_[0.0, np.full(6, 1000.0)], np.vstack([[0, 0, 0], vecs]))
    with pytest.raises(UnidentifiableTensorError):
        fit_tensors(s, np.ones((1, 7)))


def test_fa_md_fixtures():
    lam = np.array([2.0e-3, 0.2e-3, 0.2e-3])
    assert fa(lam) == pytest.approx(FA_FIXTURE, abs=1e-12)
    assert md(lam) == pytest.approx(0.8e-3, abs=1e-18)
    assert fa([1e-3, 0.0, 0.0]) == pytest.approx(1.0, abs=1e-15)
    assert fa(np.eye(3) * 1e-3) == 0.0 and md(np.eye(3) * 1e-3) == pytest.approx(1e-3)
    assert fa(np.zeros(3)) == 0.0


def test_input_forms_agree():
    D = tensor_from_eig([1.5e-3, 0.5e-3, 0.3e-3], euler_to_matrix([0.1, 0.2, 0.3]))
    c = _components(D)
    t = DiffusionTensor(c)
    np.testing.assert_allclose(components_to_matrix(c), D, rtol=0, atol=1e-18)
    assert fa(t) == pytest.approx(fa(D)) == pytest.approx(fa(c))
    assert fa(np.stack([c, c])).shape == (2,)


def test_negative_eigenvalue_flag():
    c = np.array([1e-3, 1e-3, -1e-4, 0, 0, 0])
    assert negative_eigenvalue_flags(c)
    assert DiffusionTensor(c).has_negative_eigenvalues
