import numpy as np
import pytest

from splinewave.geometry import (
    AtomicPatch,
    UnitCell,
    build_decomposition,
    face_quadrature,
    gauss_rule,
)


def test_single_patch_2d_faces_and_interface_measure():
    cell = UnitCell(4.0, 2)
    dec = build_decomposition(cell, [AtomicPatch((0.0, 0.0), 0.2)])
    assert len(dec.faces) == 4
    assert dec.interface_measure == pytest.approx(1.6)


def test_single_patch_3d_faces_and_interface_measure():
    cell = UnitCell(4.0, 3)
    dec = build_decomposition(cell, [AtomicPatch((0.0, 0.0, 0.0), 0.2)])
    assert len(dec.faces) == 6
    assert dec.interface_measure == pytest.approx(6 * 0.16)


def test_two_patch_2d_matches_two_atom_layout():
    cell = UnitCell(4.0, 2)
    dec = build_decomposition(
        cell, [AtomicPatch((-1.0, 0.0), 0.2), AtomicPatch((1.0, 0.0), 0.2)]
    )
    assert len(dec.faces) == 8
    # patch boxes are [-1.2,-0.8]x[-0.2,0.2] and [0.8,1.2]x[-0.2,0.2]
    assert dec.patch_of([(-1.1, 0.1)]) == [0]
    assert dec.patch_of([(0.9, -0.1)]) == [1]
    assert dec.patch_of([(0.0, 0.0)]) == [-1]
    assert dec.patches[0].contains([(-1.2, -0.2)])
    assert not dec.patches[0].contains([(-1.21, 0.0)])


def test_overlapping_patches_rejected():
    cell = UnitCell(4.0, 2)
    with pytest.raises(ValueError, match="overlap"):
        build_decomposition(
            cell, [AtomicPatch((0.0, 0.0), 0.3), AtomicPatch((0.5, 0.0), 0.3)]
        )


def test_patch_touching_boundary_rejected():
    cell = UnitCell(4.0, 2)
    with pytest.raises(ValueError, match="boundary"):
        build_decomposition(cell, [AtomicPatch((1.9, 0.0), 0.2)])


def test_gauss_rule_order1():
    rule = gauss_rule(1, (-1.0, 1.0))
    assert rule.points == pytest.approx([0.0])
    assert rule.weights == pytest.approx([2.0])


def test_gauss_rule_order2_exactness():
    rule = gauss_rule(2, (-1.0, 1.0))
    assert rule.integrate(rule.points**3) == pytest.approx(0.0, abs=1e-15)
    assert rule.integrate(rule.points**2) == pytest.approx(2.0 / 3.0)


def test_gauss_rule_sin():
    rule = gauss_rule(8, (0.0, 1.0))
    assert rule.integrate(np.sin(rule.points)) == pytest.approx(
        1.0 - np.cos(1.0), abs=1e-14
    )


def test_face_quadrature_measures():
    cell2 = UnitCell(4.0, 2)
    dec2 = build_decomposition(cell2, [AtomicPatch((0.0, 0.0), 0.2)])
    rule = face_quadrature(dec2.faces[0], 4)
    assert rule.weights.sum() == pytest.approx(0.4)

    cell3 = UnitCell(4.0, 3)
    dec3 = build_decomposition(cell3, [AtomicPatch((0.0, 0.0, 0.0), 0.2)])
    rule3 = face_quadrature(dec3.faces[0], 4)
    assert rule3.weights.sum() == pytest.approx(0.16)


def test_face_quadrature_oscillatory_closed_form():
    # face x = +0.2, y in [-0.2, 0.2]; integrand e^{i k.r}, k = (pi/2, 0)
    cell = UnitCell(4.0, 2)
    dec = build_decomposition(cell, [AtomicPatch((0.0, 0.0), 0.2)])
    face = [f for f in dec.faces if f.axis == 0 and f.side == 1][0]
    rule = face_quadrature(face, 8)
    k = np.array([np.pi / 2, 0.0])
    val = rule.integrate(np.exp(1j * rule.points @ k))
    assert val == pytest.approx(np.exp(1j * np.pi / 10) * 0.4, abs=1e-12)


def test_face_quadrature_constant_exact_and_high_frequency():
    cell = UnitCell(4.0, 2)
    dec = build_decomposition(cell, [AtomicPatch((0.0, 0.0), 0.2)])
    K = 20
    kmax = 2 * np.pi * K / 4.0
    order = max(1 + 2, int(np.ceil(0.7 * 2 * kmax * 0.2)) + 8)
    for face in dec.faces:
        rule = face_quadrature(face, order)
        assert rule.weights.sum() == pytest.approx(face.measure, rel=1e-14)
        k = np.array([2 * kmax, 0.0])
        got = rule.integrate(np.exp(1j * rule.points @ k))
        # analytic: phase at the fixed coordinate times 2R sinc(k_t R) tangentially
        if face.axis == 0:
            want = np.exp(1j * 2 * kmax * 0.2 * face.side) * 0.4
        else:
            want = 0.4 * np.sin(2 * kmax * 0.2) / (2 * kmax * 0.2)
        assert got == pytest.approx(want, abs=1e-10)


def test_point_classification_consistent_with_faces():
    cell = UnitCell(4.0, 2)
    dec = build_decomposition(cell, [AtomicPatch((0.0, 0.0), 0.2)])
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 2, size=(500, 2))
    inside = dec.inside_any_patch(pts)
    ref = np.all(np.abs(pts) <= 0.2, axis=1)
    assert np.array_equal(inside, ref)
    # boundary points are classified as patch interior (closed convention)
    on_face = np.array([[0.2, 0.05], [-0.2, 0.0], [0.13, -0.2]])
    assert dec.inside_any_patch(on_face).all()


def test_interstitial_boxes_partition_volume():
    cell = UnitCell(4.0, 2)
    dec = build_decomposition(
        cell, [AtomicPatch((-1.0, 0.0), 0.2), AtomicPatch((1.0, 0.3), 0.15)]
    )
    boxes = dec.interstitial_boxes()
    vol = sum(np.prod(hi - lo) for lo, hi in boxes)
    assert vol == pytest.approx(dec.interstitial_volume, rel=1e-12)
    # boxes must not intersect any patch
    for lo, hi in boxes:
        mid = 0.5 * (lo + hi)
        assert not dec.inside_any_patch(mid[None, :])[0]


def test_interstitial_boxes_partition_volume_3d():
    cell = UnitCell(4.0, 3)
    dec = build_decomposition(cell, [AtomicPatch((0.0, 0.0, 0.0), 0.2)])
    boxes = dec.interstitial_boxes()
    vol = sum(np.prod(hi - lo) for lo, hi in boxes)
    assert vol == pytest.approx(dec.interstitial_volume, rel=1e-12)
