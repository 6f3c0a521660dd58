import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taxiverify.plant import (
    GAIN_P,
    GAIN_THETA,
    LatentSource,
    PlantParams,
    control_law,
    perfect_estimator,
    simulate,
    simulate_batch,
    step,
    step_overapprox,
    step_overapprox_all,
    write_trajectories,
)
from taxiverify.zonotope import Box


def test_constants():
    assert (GAIN_P, GAIN_THETA) == (-0.74, -0.44)
    p = PlantParams()
    assert (p.v, p.L, p.dt) == (5.0, 5.0, 0.1)


@pytest.mark.parametrize("kw", [dict(v=0.0), dict(L=-1.0), dict(dt=0.0)])
def test_params_positive(kw):
    with pytest.raises(ValueError):
        PlantParams(**kw)


class TestStep:
    def test_fixed_point(self):
        assert step(0.0, 0.0, 0.0) == (0.0, 0.0)

    def test_heading_moves_p(self):
        p, theta = step(0.0, 30.0, 0.0)
        assert p == pytest.approx(0.25) and theta == 30.0

    def test_steering_turns(self):
        _, theta = step(0.0, 0.0, 45.0)
        assert theta == pytest.approx(np.degrees(0.1))
        assert theta == pytest.approx(5.7296, abs=1e-4)

    @pytest.mark.parametrize("phi", [90.0, -90.0, 120.0])
    def test_singularity_rejected(self, phi):
        with pytest.raises(ValueError):
            step(0.0, 0.0, phi)


def test_control_law():
    assert control_law(0.0, 0.0) == 0.0
    assert control_law(1.0, 0.0) == -0.74
    assert control_law(0.0, 1.0) == -0.44


class TestOverapprox:
    def test_point_cell_is_step(self):
        b = step_overapprox(Box([1.0, 3.0], [1.0, 3.0]), -2.0, -2.0)
        p, theta = step(1.0, 3.0, -2.0)
        assert b == Box([p, theta], [p, theta])

    def test_reference_cell(self):
        cell = Box([0.0, 0.0], [0.171875, 0.46875])
        b = step_overapprox(cell, -0.5, 0.0)
        k = np.degrees(0.1)
        np.testing.assert_allclose(b.lo, [0.0, -k * np.tan(np.radians(0.5))])
        np.testing.assert_allclose(b.hi, [0.171875 + 0.5 * np.sin(np.radians(0.46875)), 0.46875])
        rng = np.random.default_rng(0)
        s = cell.sample(rng, 300)
        phi = rng.uniform(-0.5, 0.0, 300)
        nxt = np.column_stack(step(s[:, 0], s[:, 1], phi))
        assert b.contains(nxt).all()

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(-11, 11), st.floats(-30, 30), st.floats(0, 2), st.floats(0, 5),
        st.floats(-60, 60), st.floats(0, 20), st.integers(0, 2**16),
    )
    def test_sampled_containment(self, p0, t0, wp, wt, phi0, wphi, seed):
        cell = Box([p0, t0], [p0 + wp, t0 + wt])
        b = step_overapprox(cell, phi0, phi0 + wphi)
        rng = np.random.default_rng(seed)
        s = cell.sample(rng, 300)
        phi = rng.uniform(phi0, phi0 + wphi, 300)
        assert b.contains(np.column_stack(step(s[:, 0], s[:, 1], phi))).all()

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(1)
        lo = rng.uniform(-10, 10, (20, 2))
        hi = lo + rng.uniform(0, 1, (20, 2))
        pmin = rng.uniform(-20, 0, 20)
        pmax = pmin + rng.uniform(0, 10, 20)
        new_lo, new_hi = step_overapprox_all(lo, hi, pmin, pmax)
        for k in range(20):
            b = step_overapprox(Box(lo[k], hi[k]), pmin[k], pmax[k])
            np.testing.assert_array_equal(b.lo, new_lo[k])
            np.testing.assert_array_equal(b.hi, new_hi[k])

    def test_rejections(self):
        with pytest.raises(ValueError):
            step_overapprox(Box([0.0, 0.0], [1.0, 1.0]), 1.0, 0.0)
        with pytest.raises(ValueError):
            step_overapprox(Box([0.0, 0.0], [1.0, 1.0]), 0.0, 95.0)
        with pytest.raises(ValueError):
            step_overapprox(Box([0.0, 80.0], [1.0, 95.0]), 0.0, 1.0)


class TestSimulate:
    def test_perfect_state_converges(self):
        tr = simulate(perfect_estimator, 8.0, 0.0, 200)
        assert len(tr) == 201
        assert abs(tr.p[-1]) < 0.5

    def test_origin_stays(self):
        tr = simulate(perfect_estimator, 0.0, 0.0, 50)
        assert not tr.p.any() and not tr.theta.any()

    def test_records_controls(self):
        tr = simulate(perfect_estimator, 2.0, 1.0, 3)
        np.testing.assert_allclose(tr.phi, control_law(tr.p, tr.theta))
        np.testing.assert_allclose(tr.t, [0.0, 0.1, 0.2, 0.3])

    def test_envelope_recorded_not_fatal(self):
        tr = simulate(lambda p, t, z: (-50.0, 0.0), 10.5, 0.0, 30)
        assert tr.out_of_domain.any() and len(tr) == 31

    def test_seeded_latents(self):
        def est(p, t, z):
            return p + z[0], t + z[1]

        a = simulate(est, 5.0, 0.0, 40, latent=LatentSource("random", seed=3))
        b = simulate(est, 5.0, 0.0, 40, latent=LatentSource("random", seed=3))
        np.testing.assert_array_equal(a.p, b.p)

    def test_batch_matches_single(self):
        starts = np.array([[-8.0, 0.0], [3.0, 4.0], [6.0, -10.0]])
        batch = simulate_batch(lambda s, z: s, starts, 60)
        for tr, (p0, t0) in zip(batch, starts):
            single = simulate(perfect_estimator, p0, t0, 60)
            np.testing.assert_allclose(tr.p, single.p, rtol=0, atol=1e-12)
            np.testing.assert_allclose(tr.theta, single.theta, rtol=0, atol=1e-12)

    def test_csv(self, tmp_path):
        trs = simulate_batch(lambda s, z: s, [[1.0, 0.0], [2.0, 0.0]], 4)
        write_trajectories(tmp_path / "t.csv", trs)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "run,t,p,theta,phi,p_hat,theta_hat,out_of_domain"
        assert len(lines) == 1 + 2 * 5


def test_latent_source_kinds():
    assert not LatentSource("zero")().any()
    assert LatentSource("fixed", value=[0.1, 0.2])().tolist() == [0.1, 0.2]
    z = np.array([LatentSource("random", seed=1)() for _ in range(1)])
    assert np.all(np.abs(z) <= 0.8)
    with pytest.raises(ValueError):
        LatentSource("gaussian")
