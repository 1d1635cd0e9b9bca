import numpy as np
import pytest

from hetlb.core import ClusterSpec, TailState, metric_distance
from hetlb.equilibrium import fixed_point, mean_sojourn
from hetlb.meanfield import (
    ProjectionError,
    drift,
    integrate,
    lipschitz_bound,
    lipschitz_ratio,
    read_trajectory_csv,
    rhs,
    rhs_bound,
    rhs_scheme1,
    rhs_scheme2,
    v1_rate,
    v_aggregate,
)

from conftest import random_spec, random_tails


def test_empty_system_drift():
    s = ClusterSpec((1.0,), (1.0,), (2,), 0.6)
    l = rhs_scheme1(TailState.empty(1, 10), s).dudt
    assert l[0, 1] == pytest.approx(0.6)
    assert np.all(l[0, 2:] == 0) and l[0, 0] == 0


@pytest.mark.parametrize("scheme", ["scheme1", "scheme2"])
def test_zero_at_equilibrium(skewed_spec, scheme):
    P = fixed_point(skewed_spec, scheme)
    assert rhs(P, skewed_spec, scheme).norm() < 1e-8


def test_symmetric_types_differ_only_by_tie_bias():
    s = ClusterSpec((0.5, 0.5), (1.0, 1.0), (2, 2), 0.6)
    row = 0.7 ** np.arange(12)
    u = TailState(np.vstack([row, row]))
    l = rhs_scheme1(u, s).dudt
    # type 1 (lower index) sees type 2 at level k, type 2 sees type 1 at level k-1
    p = row**2
    k = np.arange(1, 12)
    nxt = np.append(p[1:], 0.0)
    exp0 = 2 * 0.6 * (p[k - 1] - nxt[k - 1]) * nxt[k - 1] - (row[k] - np.append(row[2:], 0.0))
    exp1 = 2 * 0.6 * (p[k - 1] - nxt[k - 1]) * p[k - 1] - (row[k] - np.append(row[2:], 0.0))
    np.testing.assert_allclose(l[0, 1:], exp0, atol=1e-14)
    np.testing.assert_allclose(l[1, 1:], exp1, atol=1e-14)


def test_scheme2_reductions():
    rng = np.random.default_rng(0)
    s1 = ClusterSpec((1.0,), (1.3,), (3,), 0.8)
    u = random_tails(rng, 1, 20)
    np.testing.assert_array_equal(rhs_scheme1(u, s1).dudt, rhs_scheme2(u, s1).dudt)
    s2 = ClusterSpec((0.3, 0.7), (1.1, 1.1), (2, 3), 0.8)
    for _ in range(20):
        u = random_tails(rng, 2, 20)
        np.testing.assert_allclose(rhs_scheme1(u, s2).dudt, rhs_scheme2(u, s2).dudt, atol=1e-15)


@pytest.mark.parametrize("scheme", ["scheme1", "scheme2"])
def test_boundary_and_sign_structure(scheme):
    rng = np.random.default_rng(5)
    for _ in range(200):
        s = random_spec(rng)
        u = random_tails(rng, s.M, 15).u.copy()
        # force a plateau and a zero to create tangent cases
        j, n = rng.integers(s.M), rng.integers(1, 13)
        u[j, n + 1] = u[j, n]
        u = TailState(u)
        l = drift(u.u, s, scheme)
        assert np.all(l[:, 0] == 0)
        for jj in range(s.M):
            for nn in range(1, 15):
                if u.u[jj, nn] == u.u[jj, nn + 1]:
                    assert l[jj, nn] >= -1e-14
                    assert l[jj, nn + 1] <= 1e-14
                if u.u[jj, nn] == 0:
                    assert l[jj, nn] >= -1e-14


def test_integrate_stays_at_equilibrium(table_spec):
    P = fixed_point(table_spec)
    traj = integrate(P, table_spec, t_end=5.0, dt=0.02, stride=50)
    for t, u in traj:
        assert metric_distance(u, P) < 1e-9 * max(t, 1.0)


def test_v1_grows_to_single_type_equilibrium():
    s = ClusterSpec((1.0,), (1.0,), (2,), 0.9)
    traj = integrate(TailState.empty(1, 40), s, t_end=300.0, dt=0.02, stride=100)
    v = np.array([v_aggregate(u, 1, s) for _, u in traj])
    assert np.all(np.diff(v) >= -1e-12)
    target = sum(0.9 ** (2**k - 1) for k in range(1, 40))
    assert v[-1] == pytest.approx(target, abs=1e-6)


def test_v_aggregate_examples(table_spec):
    assert v_aggregate(TailState.empty(2, 10), 1, table_spec) == 0
    u = np.zeros((2, 11))
    u[:, :4] = 1
    assert v_aggregate(TailState(u), 1, table_spec) == pytest.approx(3)
    P = fixed_point(table_spec)
    assert v_aggregate(P, 1, table_spec) == pytest.approx(table_spec.lam * mean_sojourn(P, table_spec))


def test_v1_derivative_identity(table_spec):
    dt = 0.01
    traj = integrate(TailState.geometric(0.8, 2, 40), table_spec, t_end=2.0, dt=dt)
    v = np.array([v_aggregate(u, 1, table_spec) for _, u in traj])
    fd = (v[2:] - v[:-2]) / (2 * dt)
    rate = np.array([v1_rate(traj.state(i), table_spec) for i in range(1, len(traj) - 1)])
    assert np.max(np.abs(fd - rate)) < 1e-3


def test_monotone_pair_small(skewed_spec):
    rng = np.random.default_rng(2)
    for scheme in ("scheme1", "scheme2"):
        hi = random_tails(rng, 2, 30)
        lo = TailState.project(hi.u * rng.uniform(0, 1, hi.u.shape))
        a = integrate(lo, skewed_spec, scheme, t_end=3.0, dt=0.01, stride=30)
        b = integrate(hi, skewed_spec, scheme, t_end=3.0, dt=0.01, stride=30)
        assert np.all(a.states <= b.states + 1e-8)


def test_bounds_on_random_states():
    rng = np.random.default_rng(7)
    for _ in range(100):
        s = random_spec(rng)
        a, b = random_tails(rng, s.M, 20), random_tails(rng, s.M, 20)
        for scheme in ("scheme1", "scheme2"):
            assert rhs(a, s, scheme).norm() <= rhs_bound(s) + 1e-12
            if metric_distance(a, b) > 0:
                assert lipschitz_ratio(a, b, s, scheme) <= lipschitz_bound(s)


def test_lipschitz_ratio_single_deep_index(table_spec):
    a = TailState.geometric(0.5, 2, 30)
    u = a.u.copy()
    u[1, 25] += 1e-9
    r = lipschitz_ratio(a, TailState(u), table_spec)
    assert np.isfinite(r) and r > 0
    with pytest.raises(ValueError):
        lipschitz_ratio(a, a, table_spec)


def test_projection_error_on_large_step():
    s = ClusterSpec((0.05, 0.95), (0.2, 1.8), (3, 3), 0.9)
    with pytest.raises(ProjectionError):
        integrate(TailState.geometric(0.99, 2, 20), s, t_end=1.0, dt=0.1)
    traj = integrate(TailState.geometric(0.99, 2, 20), s, t_end=1.0, dt=0.1, check_projection=False)
    assert traj.max_projection > 0


def test_default_step_and_samples(table_spec):
    traj = integrate(TailState.empty(2, 10), table_spec, t_end=1.0, sample_times=[0.0, 0.5, 1.0])
    assert len(traj) == 3
    assert traj.times[-1] == pytest.approx(1.0)
    assert abs(traj.times[1] - 0.5) < 0.01 / rhs_bound(table_spec)


def test_trajectory_csv_round_trip(tmp_path, table_spec):
    traj = integrate(TailState.empty(2, 6), table_spec, t_end=0.5, dt=0.05, stride=2)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["t", "u[0][0]", "u[0][1]"] and header[-1] == "u[1][6]"
    back = read_trajectory_csv(path)
    np.testing.assert_array_equal(back.times, traj.times)
    np.testing.assert_array_equal(back.states, traj.states)
