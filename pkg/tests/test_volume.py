import numpy as np
import pytest

from polyrbf.errors import InvalidArgumentError
from polyrbf.gradients import GradientScheme
from polyrbf.volume import CLAMP_EPS, SignalVolume, normalize_b0, read_nifti, write_nifti


@pytest.fixture
def scheme():
    return GradientScheme([0.0, 1000.0, 0.0, 2000.0], [[0, 0, 0], [1, 0, 0], [0, 0, 0], [0, 1, 0]])


def test_b0_ratio(scheme):
    data = np.zeros((1, 1, 1, 4))
    data[0, 0, 0] = [100.0, 50.0, 100.0, 25.0]
    norm, rep = normalize_b0(SignalVolume(data, scheme=scheme))
    assert norm.data[0, 0, 0].tolist() == [0.5, 0.25]
    assert norm.normalized and len(norm.scheme) == 2
    assert rep.dropped_frames == [0, 2] and rep.clamped == 0


def test_zero_signal_clamped(scheme):
    data = np.zeros((1, 1, 2, 4))
    data[..., 0] = data[..., 2] = 100.0
    data[0, 0, 0, 1] = 0.0
    data[0, 0, 1, 1] = -3.0
    data[..., 3] = 10.0
    norm, rep = normalize_b0(SignalVolume(data, scheme=scheme))
    assert norm.data[0, 0, 0, 0] == CLAMP_EPS and norm.data[0, 0, 1, 0] == CLAMP_EPS
    assert rep.clamped == 2
    assert np.all(norm.data[norm.mask] >= CLAMP_EPS)


def test_degenerate_voxel_leaves_mask(scheme):
    data = np.ones((2, 1, 1, 4))
    data[1, 0, 0, [0, 2]] = 0.0
    norm, rep = normalize_b0(SignalVolume(data, scheme=scheme))
    assert norm.mask.tolist() == [[[True]], [[False]]]
    assert rep.degenerate_voxels == 1


def test_needs_b0():
    s = GradientScheme([1000.0], [[1, 0, 0]])
    with pytest.raises(InvalidArgumentError, match="b0"):
        normalize_b0(SignalVolume(np.ones((1, 1, 1, 1)), scheme=s))


def test_frame_count_checked(scheme):
    with pytest.raises(InvalidArgumentError, match="frames"):
        SignalVolume(np.ones((2, 2, 2, 3)), scheme=scheme)


def test_mask_shape_checked():
    with pytest.raises(InvalidArgumentError):
        SignalVolume(np.ones((2, 2, 2, 3)), mask=np.ones((2, 2), bool))


def test_voxels_c_order():
    data = np.arange(2 * 2 * 1 * 3, dtype=float).reshape(2, 2, 1, 3)
    vol = SignalVolume(data)
    np.testing.assert_array_equal(vol.voxels(), data.reshape(4, 3))


def test_nifti_volume_round_trip(tmp_path, scheme, rng):
    data = rng.uniform(0, 100, (3, 3, 2, 4)).astype(np.float32)
    write_nifti(SignalVolume(data, pixdim=(2.0, 2.0, 2.0, 1.0)), tmp_path / "v.nii")
    back = read_nifti(tmp_path / "v.nii", scheme)
    assert back.data.tobytes() == data.tobytes()
    assert back.pixdim[0] == 2.0 and back.scheme is scheme
