import math

import mpmath as mp
import numpy as np
import pytest

from polyrbf.errors import InvalidArgumentError
from polyrbf.metrics import (
    abs_difference_quantiles,
    betainc_reg,
    icc,
    icc_difference_map,
    icc_map,
    mse_log,
    neglogp_threshold_counts,
    paired_t_test,
    paired_t_test_map,
    student_t_cdf,
    student_t_two_sided_p,
)

ICC_FIXTURE = 0.9423076923076923  # 1 - 2 / (104/3)
T_FIXTURE = (3.4641016151377544, 0.07417990022744854)  # d = (1, 2, 3), mpmath quad


def t_oracle(t, df):
    n = mp.mpf(df)
    c = mp.gamma((n + 1) / 2) / (mp.sqrt(n * mp.pi) * mp.gamma(n / 2))
    return float(2 * mp.quad(lambda x: c * (1 + x * x / n) ** (-(n + 1) / 2), [abs(t), mp.inf]))


def test_mse_log():
    o = np.array([0.2, 0.5, 0.9])
    assert mse_log(o, o) == 0.0
    assert mse_log(math.e * o, o) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(InvalidArgumentError):
        mse_log([0.0], [1.0])
    with pytest.raises(InvalidArgumentError):
        mse_log([1.0, 2.0], [1.0])


@pytest.mark.parametrize("df", [1, 2, 5, 17, 100])
@pytest.mark.parametrize("t", [0.05, 1.0, 3.0, 12.0])
def test_t_pvalue_against_quadrature(t, df):
    assert student_t_two_sided_p(t, df) == pytest.approx(t_oracle(t, df), abs=1e-10)


def test_t_edge_cases():
    assert student_t_two_sided_p(0.0, 4) == 1.0
    assert student_t_two_sided_p(math.inf, 4) == 0.0
    assert math.isnan(student_t_two_sided_p(math.nan, 4))
    assert student_t_cdf(0.0, 3) == 0.5
    assert student_t_cdf(1.2, 7) + student_t_cdf(-1.2, 7) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(InvalidArgumentError):
        student_t_two_sided_p(1.0, 0)


def test_betainc_against_mpmath():
    for a, b, x in [(0.5, 0.5, 0.3), (3.0, 7.0, 0.9), (50.0, 0.5, 0.97)]:
        ref = float(mp.betainc(a, b, 0, x, regularized=True))
        assert betainc_reg(a, b, x) == pytest.approx(ref, abs=1e-14)


def test_paired_t_fixtures():
    r = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert r.t == pytest.approx(T_FIXTURE[0], abs=1e-12)
    assert r.p == pytest.approx(T_FIXTURE[1], abs=1e-12)
    assert r.df == 2
    same = paired_t_test([1.0, 5.0], [1.0, 5.0])
    assert same.t == 0.0 and same.p == 1.0 and same.degenerate
    flipped = paired_t_test([0.0, 0.0, 0.0], [1.0, 2.0, 3.0])
    assert flipped.t == -r.t and flipped.p == r.p
    shift = paired_t_test([2.0, 3.0], [1.0, 2.0])
    assert shift.p == 0.0 and shift.degenerate


def test_paired_t_map(rng):
    A = rng.standard_normal((6, 4))
    B = rng.standard_normal((6, 4))
    t, p, deg = paired_t_test_map(A, B)
    assert t[2] == paired_t_test(A[:, 2], B[:, 2]).t
    assert not deg.any()


def test_threshold_counts():
    assert neglogp_threshold_counts(np.ones(5), [3, 5]) == [0, 0]
    p = np.array([1.0, 0.5, 1e-2, 1e-7])
    assert neglogp_threshold_counts(p, [0.0]) == [3]
    assert neglogp_threshold_counts(p, [3, 5, 10, 15]) == [2, 1, 1, 1]
    assert neglogp_threshold_counts(p, [1, 2], base=10) == [2, 1]


def test_icc_fixtures():
    assert icc([(0, 2), (10, 12)]).value == pytest.approx(ICC_FIXTURE, abs=1e-12)
    assert icc([(1, 1), (5, 5)]).value == 1.0
    assert icc([(3, 3), (3, 3)]).undefined
    low = icc([(0, 10), (1, 9)])
    assert low.value == 0.0 and low.clipped


def test_icc_map_matches_scalar(rng):
    X = rng.standard_normal((4, 3, 6))
    vals, _ = icc_map(X)
    for v in range(6):
        r = icc(X[:, :, v])
        assert vals[v] == pytest.approx(r.value, abs=1e-14)


def test_icc_difference_ties():
    X = np.random.default_rng(0).standard_normal((3, 2, 5))
    d = icc_difference_map(X, X)
    assert np.all(d["difference"][~np.isnan(d["difference"])] == 0)
    assert d["summary"]["improved_fraction"] == 0.0 and d["summary"]["all_ties"]


def test_icc_difference_regions_permute(rng):
    O = rng.standard_normal((4, 3, 8))
    H = O + rng.normal(0, 0.1, O.shape)
    labels = np.array([1, 1, 2, 2, 3, 3, 3, 1])
    perm = {1: 3, 2: 1, 3: 2}
    a = icc_difference_map(O, H, labels)
    b = icc_difference_map(O, H, np.vectorize(perm.get)(labels))
    for r, new in perm.items():
        assert a["regions"][r] == b["regions"][new]


def test_icc_difference_shape_mismatch():
    with pytest.raises(InvalidArgumentError, match="manifest mismatch"):
        icc_difference_map(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))


def test_icc_improves_when_scan_effect_removed(rng):
    subj = rng.normal(0, 1, (6, 1, 50))
    scan = np.array([0.0, 1.0, -1.0])[None, :, None]
    noise = rng.normal(0, 0.2, (6, 3, 50))
    d = icc_difference_map(subj + scan + noise, subj + noise)
    assert d["summary"]["median_difference"] > 0


def test_abs_difference_quantiles():
    q = abs_difference_quantiles([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], quantiles=(0.5,))
    assert q == {0.5: 1.0}
