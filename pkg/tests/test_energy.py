import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tuttedeform.deform import PointSet, forward, realize
from tuttedeform.energy import (HandleConstraint, LossWeights,
                                deformation_gradients, distortion_multipliers,
                                elastic_loss, fitting_loss, handle_loss,
                                layer_regularization, net_regularization,
                                strain_energy_density, total_loss)
from tuttedeform.mesh2d import build_mesh, locate_points
from tuttedeform.prism import triplane_frames
from tuttedeform.tutte import identity_params

from conftest import random_net


def test_strain_zero_for_rotations():
    R = Rotation.random(32, random_state=0).as_matrix()
    assert np.abs(strain_energy_density(R)).max() < 1e-12


def test_strain_known_value_for_scaling():
    for s in (0.5, 1.3, 2.0):
        J = (s * np.eye(3))[None]
        expected = 3.0 * (s * s - 1.0) ** 2
        assert np.isclose(strain_energy_density(J)[0], expected)


def test_strain_rotation_invariance():
    rng = np.random.default_rng(1)
    J = rng.normal(size=(16, 3, 3))
    R = Rotation.random(16, random_state=2).as_matrix()
    # E(R J) == E(J): the measure depends on J^T J only
    assert np.allclose(strain_energy_density(np.einsum("nij,njk->nik", R, J)),
                       strain_energy_density(J))


def test_distortion_multiplier_buckets():
    e = np.array([0.0, 0.019, 0.02, 0.0201, 0.05, 0.0501, 3.0])
    m = distortion_multipliers(e)
    assert np.array_equal(m, [1, 1, 1, 2, 2, 5, 5])


def test_elastic_loss_matches_manual_computation():
    rng = np.random.default_rng(2)
    net = random_net(rng, resolution=7, layers=3)
    pts = rng.uniform(-0.5, 0.5, size=(64, 3))
    w = rng.uniform(0.5, 2.0, size=64)
    from tuttedeform.deform import jacobians
    e = strain_energy_density(jacobians(net, pts))
    manual = np.mean(distortion_multipliers(e) * w * e)
    assert np.isclose(elastic_loss(net, PointSet(pts, w)), manual)
    with pytest.raises(ValueError):
        elastic_loss(net, PointSet(pts))  # weights are required


def test_handle_loss_identity_net():
    mesh = build_mesh(5)
    net = realize(mesh, [identity_params(mesh)] * 2, triplane_frames(2))
    pts = np.random.default_rng(3).uniform(-0.4, 0.4, size=(20, 3))
    R = Rotation.from_rotvec([0, 0, 0.3]).as_matrix()
    t = np.array([0.05, 0.0, -0.02])
    c = HandleConstraint(points=PointSet(pts), rotation=R, translation=t)
    # identity net leaves points in place, so the loss is the mean squared
    # distance to the rigidly moved targets
    expected = np.mean(np.sum((pts - (pts @ R.T + t)) ** 2, axis=1))
    assert np.isclose(handle_loss(net, [c]), expected, atol=1e-10)
    static = HandleConstraint(points=PointSet(pts))
    assert static.is_static
    assert handle_loss(net, [static]) < 1e-16


def test_layer_regularization_against_monte_carlo():
    rng = np.random.default_rng(4)
    net = random_net(rng, resolution=7, layers=1, scale=2.0)
    layer = net.layers[0]
    exact = layer_regularization(layer)
    samples = rng.uniform(-1, 1, size=(400_000, 2))
    tri, _ = locate_points(net.mesh, samples)
    A = layer.plmap.A[tri]
    AtA = np.einsum("nji,njk->nik", A, A)
    dev = AtA - np.eye(2)
    vals = np.einsum("nij,nij->n", dev, dev)
    mc = 4.0 * vals.mean()                       # square area is 4
    se = 4.0 * vals.std() / np.sqrt(len(vals))
    assert abs(exact - mc) < 4 * se


def test_net_regularization_is_layer_mean():
    rng = np.random.default_rng(5)
    net = random_net(rng, resolution=5, layers=4)
    per_layer = [layer_regularization(l) for l in net.layers]
    assert np.isclose(net_regularization(net), np.mean(per_layer))


def test_elastic_weight_schedule():
    w = LossWeights()
    assert w.elastic_at(0) == 0.004
    assert w.elastic_at(599) == 0.004
    assert w.elastic_at(600) == 0.003
    assert w.elastic_at(1200) == 0.002
    assert w.elastic_at(1800) == 0.001
    assert w.elastic_at(5000) == 0.001  # floor


def test_total_loss_combination():
    rng = np.random.default_rng(6)
    net = random_net(rng, resolution=5, layers=2)
    pts = rng.uniform(-0.3, 0.3, size=(16, 3))
    c = HandleConstraint(points=PointSet(pts))
    samples = PointSet(pts, np.ones(16))
    w = LossWeights()
    br = total_loss(net, [c], samples, w, step=700)
    assert br.elastic_weight == w.elastic_at(700)
    assert np.isclose(br.total, br.elastic_weight * br.elastic
                      + w.handle * br.handle + w.reg * br.reg)


def test_deformation_gradients_affine_oracle():
    rng = np.random.default_rng(7)
    rest = rng.uniform(-1, 1, size=(30, 3))
    tris = np.array([[i, i + 1, i + 2] for i in range(0, 27, 3)])
    M = Rotation.from_rotvec([0.2, -0.1, 0.4]).as_matrix() @ np.diag([1.2, 0.9, 1.1])
    deformed = rest @ M.T + np.array([0.1, 0.2, -0.3])
    F = deformation_gradients(rest, tris, deformed)
    # F acts like M on vectors inside each triangle's plane
    e1 = rest[tris[:, 1]] - rest[tris[:, 0]]
    e2 = rest[tris[:, 2]] - rest[tris[:, 0]]
    for E in (e1, e2):
        lhs = np.einsum("nij,nj->ni", F, E)
        assert np.abs(lhs - E @ M.T).max() < 1e-9


def test_fitting_loss_zero_on_exact_identity():
    mesh = build_mesh(7)
    net = realize(mesh, [identity_params(mesh)] * 2, triplane_frames(2))
    rng = np.random.default_rng(8)
    src = rng.uniform(-0.5, 0.5, size=(60, 3))
    tris = np.array([[i, i + 1, i + 2] for i in range(0, 57, 3)])
    fl = fitting_loss(net, PointSet(src), tris, src)
    assert fl.vertex < 1e-16
    assert fl.gradient < 1e-12
    assert np.isclose(fl.total, fl.vertex + 0.1 * fl.gradient)


def test_fitting_loss_shape_mismatch():
    rng = np.random.default_rng(9)
    net = random_net(rng, resolution=5, layers=1)
    src = rng.uniform(-0.3, 0.3, size=(10, 3))
    with pytest.raises(ValueError):
        fitting_loss(net, PointSet(src), None, src[:5])
