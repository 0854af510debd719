import numpy as np
import pytest

from tuttedeform.deform import (PointSet, forward, forward_trace, inverse,
                                inverse_jacobians, jacobians, realize)
from tuttedeform.errors import OutOfDomainError
from tuttedeform.mesh2d import build_mesh
from tuttedeform.prism import triplane_frames
from tuttedeform.tutte import identity_params

from conftest import random_net


def test_pointset_validation():
    with pytest.raises(ValueError):
        PointSet(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointSet(np.array([[0.0, 0.0, np.inf]]))
    with pytest.raises(ValueError):
        PointSet(np.zeros((3, 3)), weights=np.array([1.0, -1.0, 0.0]))
    ps = PointSet(np.zeros((3, 3)), weights=np.ones(3))
    assert len(ps) == 3


def test_identity_net_is_identity():
    mesh = build_mesh(7)
    params = [identity_params(mesh)] * 4
    net = realize(mesh, params, triplane_frames(4))
    pts = np.random.default_rng(0).uniform(-0.9, 0.9, size=(300, 3))
    assert np.abs(forward(net, pts) - pts).max() < 1e-8


def test_realize_validates_counts():
    mesh = build_mesh(5)
    params = [identity_params(mesh)] * 2
    with pytest.raises(ValueError):
        realize(mesh, params, triplane_frames(3))


def test_forward_inverse_roundtrip():
    rng = np.random.default_rng(1)
    net = random_net(rng, resolution=7, layers=5, scale=1.5)
    pts = rng.uniform(-1, 1, size=(2000, 3))
    err = np.abs(inverse(net, forward(net, pts)) - pts).max()
    assert err < 1e-9


def test_pointset_passthrough():
    rng = np.random.default_rng(2)
    net = random_net(rng, resolution=5, layers=2)
    ps = PointSet(rng.uniform(-0.5, 0.5, size=(10, 3)))
    out = forward(net, ps)
    assert isinstance(out, PointSet)
    assert np.array_equal(out.points, forward(net, ps.points))


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = random_net(rng, resolution=7, layers=6, scale=1.2)
    pts = rng.uniform(-0.5, 0.5, size=(25, 3))
    J = jacobians(net, pts)
    h = 1e-7
    for k in range(len(pts)):
        fd = np.empty((3, 3))
        for c in range(3):
            e = np.zeros(3)
            e[c] = h
            fd[:, c] = (forward(net, (pts[k] + e)[None])[0]
                        - forward(net, (pts[k] - e)[None])[0]) / (2 * h)
        rel = np.abs(J[k] - fd).max() / max(1.0, np.abs(fd).max())
        assert rel < 1e-5


def test_inverse_jacobians_invert_forward_jacobians():
    rng = np.random.default_rng(4)
    net = random_net(rng, resolution=7, layers=4, scale=1.5)
    pts = rng.uniform(-0.8, 0.8, size=(50, 3))
    out = forward(net, pts)
    J = jacobians(net, pts)
    Ji = inverse_jacobians(net, out)
    prod = np.einsum("nij,njk->nik", Ji, J)
    assert np.abs(prod - np.eye(3)).max() < 1e-8


def test_all_layer_determinants_positive():
    rng = np.random.default_rng(5)
    net = random_net(rng, resolution=9, layers=8, scale=2.0)
    for layer in net.layers:
        assert np.all(layer.plmap.det > 0)


def test_forward_trace_consistency():
    rng = np.random.default_rng(6)
    net = random_net(rng, resolution=5, layers=3, scale=1.0)
    pts = rng.uniform(-0.7, 0.7, size=(40, 3))
    trace = forward_trace(net, pts, need_jacobian=True)
    assert np.array_equal(trace.outputs, forward(net, pts))
    assert np.abs(trace.jac - jacobians(net, pts)).max() < 1e-14
    assert np.allclose(trace.prefixes[0], np.eye(3))
    assert trace.tris.shape == (3, len(pts))
    assert np.allclose(trace.barys.sum(axis=2), 1.0)


def test_out_of_domain_reports_index():
    rng = np.random.default_rng(7)
    net = random_net(rng, resolution=5, layers=1)
    bad = np.array([[0.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    with pytest.raises(OutOfDomainError) as ei:
        forward(net, bad)
    assert ei.value.point_index == 1


def test_forward_is_deterministic():
    rng = np.random.default_rng(8)
    mesh = build_mesh(7)
    from conftest import random_params
    params = [random_params(rng, mesh) for _ in range(3)]
    pts = rng.uniform(-1, 1, size=(500, 3))
    a = forward(realize(mesh, params, triplane_frames(3)), pts)
    b = forward(realize(mesh, params, triplane_frames(3)), pts)
    assert np.array_equal(a, b)
