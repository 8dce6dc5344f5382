import warnings

import numpy as np
import pytest

from polyrbf.errors import ExtrapolationError, InvalidArgumentError
from polyrbf.estimator import fit_signal_volume
from polyrbf.geometry import BasisConfig, design_rows
from polyrbf.gradients import GradientScheme
from polyrbf.metrics import mse_log
from polyrbf.phantom import PhantomSpec, default_phantom_spec, generate_phantom
from polyrbf.predictor import (
    baseline_indices,
    baseline_predict,
    check_extrapolation,
    predict_log,
    predict_signal,
    resample_volume,
)
from polyrbf.protocols import SUBSAMPLED_PROTOCOLS, hcp_scheme, subsample_protocol, train_test_split
from polyrbf.volume import normalize_b0

from .test_geometry import unfolded_value
from .conftest import random_config, random_unit

# noise-free single-tensor phantom, Protocol-1 training, held-out HCP frames
# (oracle run: 1.65e-6)
SINGLE_TENSOR_HELDOUT_LOGMSE = 1e-5


def test_b0_prediction_is_one(rng):
    cfg = random_config(rng)
    beta = rng.standard_normal(cfg.n_coef)
    assert predict_log(beta, cfg, 0.0, [0.0, 0.0, 0.0]) == 0.0
    assert predict_signal(beta, cfg, 0.0, [1.0, 0.0, 0.0]) == 1.0


def test_antipodal_and_positive(rng):
    cfg = random_config(rng)
    beta = rng.standard_normal(cfg.n_coef)
    p = random_unit(rng, 50)
    b = rng.uniform(0, cfg.b_scale, 50)
    np.testing.assert_array_equal(predict_log(beta, cfg, b, p), predict_log(beta, cfg, b, -p))
    assert np.all(predict_signal(beta, cfg, b, p) > 0)


def test_matches_unfolded_oracle(rng):
    for _ in range(20):
        cfg = random_config(rng)
        beta = rng.standard_normal(cfg.n_coef)
        b = float(rng.uniform(0, 4000))
        p = random_unit(rng, 1)[0]
        got = predict_log(beta, cfg, b, p)
        assert isinstance(got, float)
        assert abs(got - unfolded_value(b, p, cfg, beta)) <= 1e-12 * max(1.0, abs(got))


def test_stacked_betas(rng):
    cfg = random_config(rng)
    B = rng.standard_normal((4, cfg.n_coef))
    p = random_unit(rng, 3)
    out = predict_log(B, cfg, [1.0, 2.0, 3.0], p)
    assert out.shape == (4, 3)
    np.testing.assert_array_equal(out[2], predict_log(B[2], cfg, [1.0, 2.0, 3.0], p))


def test_wrong_coefficient_length(rng):
    cfg = random_config(rng, N=3, K=2)
    with pytest.raises(InvalidArgumentError):
        predict_log(np.zeros(5), cfg, 1000.0, [1, 0, 0])


@pytest.fixture(scope="module")
def phantom_hcp():
    sch = hcp_scheme()
    raw, gt = generate_phantom(default_phantom_spec((6, 6, 4), 0.02, seed=5), sch)
    return sch, raw, gt


def test_in_sample_resample_equals_residual(phantom_hcp):
    _, raw, _ = phantom_hcp
    norm, _ = normalize_b0(raw)
    fits = fit_signal_volume(norm, BasisConfig.for_scheme(norm.scheme))
    pred, rep = resample_volume(fits, norm.scheme)
    got = np.mean((np.log(pred.voxels()) - np.log(norm.voxels())) ** 2)
    M, P = len(norm.scheme), fits.cfg.n_coef
    expected = np.sum(fits.residual_variance * (M - P)) / (M * fits.n_voxels)
    assert got == pytest.approx(expected, rel=1e-10)
    assert rep["extrapolated_frames"] == []


def test_resample_b0_and_outside_mask(phantom_hcp):
    sch, raw, _ = phantom_hcp
    norm, _ = normalize_b0(raw)
    mask = norm.mask.copy()
    mask[0, 0, 0] = False
    fits = fit_signal_volume(norm, BasisConfig.for_scheme(norm.scheme), mask=mask)
    pred, _ = resample_volume(fits, sch)
    assert np.all(pred.data[mask][:, sch.b0_mask] == 1.0)
    assert not np.any(pred.data[0, 0, 0])


def test_extrapolation_guard():
    target = GradientScheme([0.0, 3000.0], [[0, 0, 0], [1, 0, 0]])
    with pytest.raises(ExtrapolationError, match="b=2000"):
        check_extrapolation(2000.0, target)
    with pytest.warns(UserWarning):
        assert check_extrapolation(2000.0, target, allow=True) == [1]
    assert check_extrapolation(3000.0, target) == []


def test_protocol1_beats_baseline_on_heldout(phantom_hcp):
    sch, raw, _ = phantom_hcp
    from polyrbf.experiments import benchmark_volume

    rows = benchmark_volume(raw, {1: SUBSAMPLED_PROTOCOLS[1]}, replications=1, seed=0)
    assert rows[0].n_train == 105
    assert rows[0].polyrbf < rows[0].baseline


def test_single_tensor_heldout_accuracy():
    sch = hcp_scheme()
    spec = PhantomSpec.from_dict({"dims": [4, 4, 4], "sigma": 0.0, "regions": [
        {"bounds": [[0, 4], [0, 4], [0, 4]], "jitter": {"angle": 0.3},
         "compartments": [{"weight": 1.0, "eigenvalues": [1.7e-3, 0.4e-3, 0.3e-3]}]}]})
    raw, gt = generate_phantom(spec, sch)
    rng = np.random.default_rng(0)
    train, test = train_test_split(sch, rng)
    idx = np.sort(np.r_[sch.b0_indices, subsample_protocol(sch, train, SUBSAMPLED_PROTOCOLS[1], rng)])
    from polyrbf.experiments import subset_volume

    norm, _ = normalize_b0(subset_volume(raw, idx))
    fits = fit_signal_volume(norm, BasisConfig.for_scheme(norm.scheme))
    pred = np.exp(fits.betas @ design_rows(sch.bvals[test], sch.bvecs[test], fits.cfg).T)
    assert mse_log(pred, gt.signal[gt.mask][:, test]) < SINGLE_TENSOR_HELDOUT_LOGMSE


def test_baseline_exact_frame_and_antipode(rng):
    p = random_unit(rng, 6)
    s = GradientScheme([1000.0] * 3 + [2000.0] * 3, p)
    S = rng.uniform(0.1, 1.0, 6)
    for i in range(6):
        assert baseline_predict(s, S, s.bvals[i], p[i]) == S[i]
        assert baseline_predict(s, S, s.bvals[i], -p[i]) == S[i]
    # nearest shell wins over direction
    assert baseline_indices(s, [1900.0], p[:1])[0] >= 3


def test_baseline_tie_goes_to_lowest_index():
    s = GradientScheme([1000.0, 1000.0], [[1, 0, 0], [0, 1, 0]])
    q = np.array([[1.0, 1.0, 0.0]]) / np.sqrt(2)
    assert baseline_indices(s, [1000.0], q)[0] == 0
