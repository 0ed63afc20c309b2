import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmiconf import diffcore as dc
from nmiconf import gaussfuse as gf
from nmiconf import infotheory as it

from conftest import random_spd

I4 = np.eye(4)
H_UNIT = 2 * math.log2(2 * math.pi * math.e)  # entropy of I4 in bits


def test_mutual_information_examples():
    assert abs(it.mutual_information(I4, I4, 0.5 * I4) - 2.0) <= 1e-12
    assert it.mutual_information(I4, I4, I4) == 0.0


@pytest.mark.parametrize("a,b", [(0.5, 2.0), (1.0, 3.0), (4.0, 0.25)])
def test_mutual_information_scalar_covariances(a, b):
    _, vj = gf.gaussian_product([(np.zeros(4), a * I4), (np.zeros(4), b * I4)])
    assert abs(it.mutual_information(a * I4, b * I4, vj) - 2 * math.log2(a + b)) <= 1e-10


def test_entropy_examples():
    assert abs(it.entropy(I4) - H_UNIT) <= 1e-12
    assert abs(H_UNIT - 8.18838) < 1e-5  # the stated 8.1888 is off in the 4th decimal
    for c in (0.1, 2.0, 7.5):
        assert abs(it.entropy(c * I4) - (H_UNIT + 2 * math.log2(c))) <= 1e-10
    c = 1.0 / (2 * math.pi * math.e)  # |cI4| = (2 pi e)^-4
    assert abs(it.entropy(c * I4)) <= 1e-12


def test_nmi_examples():
    value, clamped = it.nmi(2.0, 8.1888, 8.1888)
    assert abs(value - 0.2442) < 1e-4 and not clamped
    assert it.nmi(0.0, 8.0, 8.0) == (0.0, False)


def test_nmi_clamps_and_reports_raw_value():
    # V_a = V_b = c I, V_joint = c/2 I gives NMI = (2 + 2L) / (H_UNIT + 2L), L = log2 c
    target = 1.3
    log_c = (target * H_UNIT - 2.0) / (2.0 - 2.0 * target)
    c = 2.0**log_c
    rep = it.info_report(c * I4, c * I4, 0.5 * c * I4)
    assert rep.nmi == 1.0 and rep.clamped
    assert abs(rep.diagnostics["raw_nmi"] - target) <= 1e-9


def test_nmi_zero_denominator():
    with pytest.raises(it.InformationError):
        it.nmi(1.0, 2.0, -2.0)


def test_nonpositive_determinant_rejected():
    with pytest.raises(it.InformationError):
        it.entropy(np.diag([1.0, 1.0, -1.0, 1.0]))


def test_mutual_information_gradient_finite_differences(rng):
    def f(lv):
        va, vb = dc.symmetrize(lv["va"]), dc.symmetrize(lv["vb"])
        _, vj = gf.gaussian_product([(dc.const(np.zeros(4)), va), (dc.const(np.zeros(4)), vb)])
        return it.mutual_information(va, vb, vj)

    rep = dc.grad_check(f, {"va": random_spd(rng), "vb": random_spd(rng)})
    assert rep.worst <= 1e-4


def test_differentiable_nmi_gradient(rng):
    def f(lv):
        va, vb = dc.symmetrize(lv["va"]), dc.symmetrize(lv["vb"])
        _, vj = gf.gaussian_product([(dc.const(np.zeros(4)), va), (dc.const(np.zeros(4)), vb)])
        return it.nmi_node(it.mutual_information(va, vb, vj), it.entropy(va), it.entropy(vb))

    va, vb = random_spd(rng, lo=1, hi=3), random_spd(rng, lo=1, hi=3)
    node = f({"va": dc.leaf(va), "vb": dc.leaf(vb)})
    assert 0 < node.item() < 1
    assert dc.grad_check(f, {"va": va, "vb": vb}).worst <= 1e-4


seeds = st.integers(min_value=0, max_value=2**32 - 1)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_mutual_information_symmetric(seed):
    r = np.random.default_rng(seed)
    va, vb = random_spd(r), random_spd(r)
    _, vj = gf.gaussian_product([(np.zeros(4), va), (np.zeros(4), vb)])
    assert abs(it.mutual_information(va, vb, vj) - it.mutual_information(vb, va, vj)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_mi_nonnegative_for_unit_volume_covariances(seed):
    r = np.random.default_rng(seed)
    va, vb = random_spd(r, lo=1.0, hi=4.0), random_spd(r, lo=1.0, hi=4.0)
    _, vj = gf.gaussian_product([(np.zeros(4), va), (np.zeros(4), vb)])
    assert it.mutual_information(va, vb, vj) >= 0.0


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(min_value=1e-3, max_value=1e3))
def test_entropy_scaling(seed, c):
    v = random_spd(np.random.default_rng(seed))
    assert abs(it.entropy(c * v) - it.entropy(v) - 2 * math.log2(c)) <= 1e-10
