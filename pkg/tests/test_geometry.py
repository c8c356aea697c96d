import numpy as np
import pytest

from certattack import geometry as geo

from _oracles import random_ball_config, ray_march_union_exit


def _ledger(balls, original_class=0):
    led = geo.BallLedger(original_class=original_class)
    for i, (c, r, cls) in enumerate(balls):
        led.append(geo.CertifiedBall(center=np.asarray(c, dtype=float),
                                     radius=r, class_label=cls, step_index=i))
    return led


# ---------------------------------------------------------------------------
# containers

def test_ball_validation():
    with pytest.raises(ValueError):
        geo.CertifiedBall(center=np.array([0.5, 0.5]), radius=-0.1,
                          class_label=0, step_index=0)
    with pytest.raises(ValueError):
        geo.CertifiedBall(center=np.array([1.5, 0.5]), radius=0.1,
                          class_label=0, step_index=0)


def test_ledger_orders_and_prunes():
    led = geo.BallLedger(original_class=1)
    led.append(geo.CertifiedBall(np.array([0.5, 0.5]), 0.2, 1, 0))
    led.append(geo.CertifiedBall(np.array([0.4, 0.4]), 0.0, 1, 1))  # pruned
    led.append(geo.CertifiedBall(np.array([0.3, 0.3]), 0.1, 0, 2))
    assert len(led) == 2
    with pytest.raises(ValueError):
        led.append(geo.CertifiedBall(np.array([0.2, 0.2]), 0.1, 1, 2))
    same_c, same_r = led.same_class_arrays()
    adv_c, adv_r = led.adversarial_arrays()
    assert same_r.tolist() == [0.2]
    assert adv_r.tolist() == [0.1]
    doc = led.to_json()
    assert doc["original_class"] == 1
    assert [b["step_index"] for b in doc["balls"]] == [0, 2]


# ---------------------------------------------------------------------------
# project / clip_step

def test_project_cases():
    assert geo.project(np.array([0.5])).tolist() == [0.5]
    assert geo.project(np.array([-0.2, 1.3])).tolist() == [0.0, 1.0]
    x = np.array([-3.0, 0.4, 2.0])
    assert np.array_equal(geo.project(geo.project(x)), geo.project(x))


def test_clip_step():
    assert geo.clip_step(0.5, 0.1, 1.0) == 0.5
    assert geo.clip_step(0.01, 0.1, 1.0) == 0.1
    assert geo.clip_step(5.0, 0.1, 1.0) == 1.0
    with pytest.raises(ValueError):
        geo.clip_step(0.5, 1.0, 0.1)
    with pytest.raises(ValueError):
        geo.clip_step(0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# exit_radius

def test_exit_radius_sphere_from_center():
    d = 784
    x = np.full(d, 0.5)
    direction = np.full(d, 1.0) / np.sqrt(d)
    led = _ledger([(x, 1.0, 0)])
    rho = geo.exit_radius(led, x, direction)
    assert abs(rho - 1.0) < 1e-6
    assert not rho.saturated


def test_exit_radius_empty_union_is_zero():
    led = geo.BallLedger(original_class=0)
    rho = geo.exit_radius(led, np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert rho == 0.0


def test_exit_radius_start_outside_is_zero():
    led = _ledger([((0.9, 0.9), 0.05, 0)])
    assert geo.exit_radius(led, np.array([0.2, 0.2]),
                           np.array([1.0, 0.0])) == 0.0


def test_exit_radius_two_overlapping_balls_analytic():
    # along p(rho) = (0.5 - rho, 0.5): ball A covers rho in [0, 0.45],
    # ball B covers rho in [0.18, 0.42]; union exit at 0.45
    x = np.array([0.5, 0.5])
    direction = np.array([1.0, 0.0])
    led = _ledger([((0.3, 0.5), 0.25, 0), ((0.2, 0.5), 0.12, 0)])
    rho = geo.exit_radius(led, x, direction)
    assert abs(rho - 0.45) < 1e-6
    oracle, _ = ray_march_union_exit(x, direction,
                                     np.array([[0.3, 0.5], [0.2, 0.5]]),
                                     np.array([0.25, 0.12]), cap=np.sqrt(2))
    assert abs(rho - oracle) < 1e-3


def test_exit_radius_ignores_other_class_balls():
    x = np.array([0.5, 0.5])
    direction = np.array([1.0, 0.0])
    led = _ledger([((0.5, 0.5), 0.2, 0), ((0.5, 0.5), 0.45, 1)])
    rho = geo.exit_radius(led, x, direction)
    assert abs(rho - 0.2) < 1e-6


def test_exit_radius_saturates_at_box_corner():
    # projected ray pins at the corner (0,0), which stays inside the ball
    x = np.array([0.1, 0.1])
    direction = np.array([1.0, 1.0]) / np.sqrt(2)
    led = _ledger([((0.0, 0.0), 0.3, 0)])
    rho = geo.exit_radius(led, x, direction)
    assert rho.saturated
    assert rho == pytest.approx(np.sqrt(2))


def test_exit_radius_monotone_under_ball_removal():
    rng = np.random.default_rng(3)
    x, direction, centers, radii = random_ball_config(rng, 10, max_balls=6)
    balls = [(c, r, 0) for c, r in zip(centers, radii)]
    full = geo.exit_radius(_ledger(balls), x, direction)
    for drop in range(len(balls)):
        sub = [b for i, b in enumerate(balls) if i != drop]
        part = geo.exit_radius(_ledger(sub), x, direction)
        assert part <= full + 1e-6


def test_exit_radius_boundary_sandwich():
    rng = np.random.default_rng(4)
    for trial in range(25):
        x, direction, centers, radii = random_ball_config(rng, 2)
        led = _ledger([(c, r, 0) for c, r in zip(centers, radii)])
        rho = geo.exit_radius(led, x, direction)
        if rho.saturated or rho == 0.0:
            continue

        def inside(r_test):
            p = np.clip(x - r_test * direction, 0, 1)
            return np.any(np.linalg.norm(centers - p, axis=1) <= radii)

        assert not inside(rho + 1e-4)
        assert inside(max(0.0, rho - 1e-4))


def test_exit_radius_requires_unit_direction():
    led = _ledger([((0.5, 0.5), 0.2, 0)])
    with pytest.raises(ValueError):
        geo.exit_radius(led, np.array([0.5, 0.5]), np.array([1.0, 1.0]))


# ---------------------------------------------------------------------------
# stay_radius

def test_stay_radius_single_ball():
    # ball strictly interior to the box so the ray exits before clipping
    x = np.array([0.5, 0.5])
    led = _ledger([(x, 0.4, 1)], original_class=0)  # adversarial class 1
    rho = geo.stay_radius(led, x, np.array([0.0, 1.0]))
    assert abs(rho - 0.4) < 1e-6
    assert not rho.outside


def test_stay_radius_chained_balls_match_oracle():
    x = np.array([0.6, 0.5])
    direction = np.array([1.0, 0.0])
    centers = np.array([[0.55, 0.5], [0.3, 0.5]])
    radii = np.array([0.1, 0.2])
    led = _ledger([(c, r, 1) for c, r in zip(centers, radii)],
                  original_class=0)
    rho = geo.stay_radius(led, x, direction)
    oracle, _ = ray_march_union_exit(x, direction, centers, radii,
                                     cap=np.sqrt(2))
    assert abs(rho - oracle) < 1e-3
    assert abs(rho - 0.5) < 1e-6  # analytic: exits second ball at x1 = 0.1


def test_stay_radius_empty_or_outside():
    led = geo.BallLedger(original_class=0)
    rho = geo.stay_radius(led, np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert rho == 0.0 and rho.outside
    led = _ledger([((0.9, 0.9), 0.05, 1)], original_class=0)
    rho = geo.stay_radius(led, np.array([0.2, 0.2]), np.array([1.0, 0.0]))
    assert rho == 0.0 and rho.outside


def test_stay_radius_does_not_claim_disconnected_component():
    # two far-apart adversarial balls along the ray; the walk must stop at
    # the first ball's boundary, not tunnel to the second
    x = np.array([0.9, 0.5])
    direction = np.array([1.0, 0.0])
    centers = np.array([[0.85, 0.5], [0.2, 0.5]])
    radii = np.array([0.1, 0.1])
    led = _ledger([(c, r, 1) for c, r in zip(centers, radii)],
                  original_class=0)
    rho = geo.stay_radius(led, x, direction)
    assert abs(rho - 0.15) < 1e-6


def test_stay_radius_marched_path_never_leaves_union():
    rng = np.random.default_rng(5)
    for trial in range(25):
        x, direction, centers, radii = random_ball_config(rng, 2)
        led = _ledger([(c, r, 1) for c, r in zip(centers, radii)],
                      original_class=0)
        rho = geo.stay_radius(led, x, direction)
        if rho.outside or rho == 0.0:
            continue
        for t in np.linspace(0.0, max(rho - 1e-4, 0.0), 50):
            p = np.clip(x - t * direction, 0, 1)
            assert np.any(np.linalg.norm(centers - p, axis=1)
                          <= radii + geo.TOL)


# ---------------------------------------------------------------------------
# oracle agreement across dimensions (small slice; acceptance runs the
# full 1000-configuration version)

@pytest.mark.parametrize("dim", [2, 10])
def test_exit_and_stay_agree_with_ray_marching(dim):
    rng = np.random.default_rng(100 + dim)
    for trial in range(30):
        x, direction, centers, radii = random_ball_config(rng, dim)
        cap = np.sqrt(dim)
        oracle, sat = ray_march_union_exit(x, direction, centers, radii, cap,
                                           steps=20_000)
        led_same = _ledger([(c, r, 0) for c, r in zip(centers, radii)])
        got = geo.exit_radius(led_same, x, direction)
        assert got.saturated == sat
        if not sat:
            assert abs(got - oracle) < 1e-3

        led_adv = _ledger([(c, r, 1) for c, r in zip(centers, radii)],
                          original_class=0)
        got2 = geo.stay_radius(led_adv, x, direction)
        if not sat:
            assert abs(got2 - oracle) < 1e-3
