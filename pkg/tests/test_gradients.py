import numpy as np
import pytest

from polyrbf.errors import InvalidArgumentError
from polyrbf.gradients import (
    GradientScheme,
    format_bvals,
    format_bvecs,
    parse_bvals,
    parse_bvecs,
    read_scheme,
    scheme_from_text,
    write_scheme,
)


def test_fsl_text_three_frames():
    s = scheme_from_text("0 1000 1000\n", "0 1 0\n0 0 1\n0 0 0\n")
    assert len(s) == 3
    assert s.b0_indices.tolist() == [0]
    np.testing.assert_array_equal(s.bvecs, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_unit_vector_accepted_unchanged():
    s = GradientScheme([1000.0], [[0.6, 0.8, 0.0]])
    np.testing.assert_allclose(s.bvecs[0], [0.6, 0.8, 0.0], rtol=0, atol=1e-15)


def test_length_mismatch():
    with pytest.raises(InvalidArgumentError, match="length mismatch"):
        scheme_from_text("0 1000", "1 0 0\n0 1 0\n0 0 1\n")


def test_column_bvals_and_transposed_bvecs():
    assert parse_bvals("0\n1000\n2000\n").tolist() == [0, 1000, 2000]
    v = parse_bvecs("1 0 0\n0 1 0\n0 0 1\n0.6 0.8 0\n")
    assert v.shape == (4, 3)


@pytest.mark.parametrize("text, where", [("0 10x0", "line 1, column 2"), ("0 1\n5 nan? ", "line 2")])
def test_parse_error_position(text, where):
    with pytest.raises(InvalidArgumentError, match=where):
        parse_bvals(text)


def test_bvals_must_be_one_row_or_column():
    with pytest.raises(InvalidArgumentError):
        parse_bvals("0 1\n2 3\n")


def test_bad_bvecs_shape():
    with pytest.raises(InvalidArgumentError, match="3 rows"):
        parse_bvecs("1 0\n0 1\n")


def test_invariants():
    with pytest.raises(InvalidArgumentError, match="negative"):
        GradientScheme([-1.0], [[1, 0, 0]])
    with pytest.raises(InvalidArgumentError, match="zero b-vector"):
        GradientScheme([1000.0], [[0, 0, 0]])
    with pytest.raises(InvalidArgumentError, match="unit norm"):
        GradientScheme([1000.0], [[0.5, 0, 0]])
    # tolerance for text rounding; renormalised on load
    s = GradientScheme([1000.0], [[1.0005, 0, 0]])
    assert s.bvecs[0, 0] == 1.0


def test_renormalisation_is_idempotent(rng):
    v = rng.standard_normal((200, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    s1 = GradientScheme(np.full(200, 1000.0), v)
    s2 = GradientScheme(s1.bvals, s1.bvecs)
    assert s1.fingerprint() == s2.fingerprint()


def test_round_trip(tmp_path, hcp):
    write_scheme(hcp, tmp_path / "b.bval", tmp_path / "b.bvec")
    back = read_scheme(tmp_path / "b.bval", tmp_path / "b.bvec")
    np.testing.assert_array_equal(back.bvals, hcp.bvals)
    np.testing.assert_array_equal(back.bvecs, hcp.bvecs)
    assert format_bvals(back) == format_bvals(hcp)
    assert format_bvecs(back) == format_bvecs(hcp)


def test_shells_and_subset(hcp):
    assert hcp.shells().tolist() == [1000, 2000, 3000]
    assert hcp.b0_indices.size == 18
    sub = hcp.subset(hcp.dw_indices)
    assert len(sub) == 270 and sub.b0_indices.size == 0


def test_read_only(hcp):
    with pytest.raises(ValueError):
        hcp.bvals[0] = 5.0
