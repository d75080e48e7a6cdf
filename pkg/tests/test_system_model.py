import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_mhe import kl_calculus as klc
from robust_mhe.errors import ConfigError, ConstraintError, LengthMismatch
from robust_mhe.system_model import (
    Box,
    IossCertificate,
    Trajectory,
    check_ioss,
    iota,
    make_system,
    pi_sequence,
    read_trajectory_csv,
    shipped_certificate,
    simulate,
    stream,
    validate_certificate,
    write_trajectory_csv,
)

SYSTEMS = ["contraction", "sin-contraction", "rotation-contraction"]


def zero_run(model, x0, t):
    return simulate(model, x0, np.zeros((t, model.g)), np.zeros((t, model.p)))


class TestSimulate:
    def test_contraction_rollout(self):
        tr = zero_run(make_system("contraction"), [1.0], 3)
        assert tr.x[:, 0].tolist() == [1.0, 0.5, 0.25, 0.125]

    @pytest.mark.parametrize("name", SYSTEMS)
    def test_equilibrium(self, name):
        m = make_system(name)
        tr = zero_run(m, np.zeros(m.n), 5)
        assert not tr.x.any() and not tr.y.any()

    def test_outputs_include_noise(self):
        m = make_system("contraction")
        tr = simulate(m, [1.0], [[0.01]], [[-0.02]])
        assert tr.y[0, 0] == pytest.approx(0.98)
        assert tr.x[1, 0] == pytest.approx(0.51)

    def test_box_violations(self):
        m = make_system("contraction", delta_w=0.05)
        with pytest.raises(ConstraintError):
            simulate(m, [0.0], [[0.06]], [[0.0]])
        with pytest.raises(LengthMismatch):
            simulate(m, [0.0], [[0.0], [0.0]], [[0.0]])

    def test_unknown_system(self):
        with pytest.raises(ConfigError):
            make_system("pendulum")

    def test_rotation_disturbance_box_inside_disc(self):
        m = make_system("rotation-contraction", delta_w=0.1)
        assert m.W.radius == pytest.approx(0.1)

    def test_csv_round_trip(self, tmp_path):
        m = make_system("rotation-contraction")
        rng = stream(3, 0)
        tr = simulate(m, [0.3, -0.2], m.W.sample_uniform(rng, 6), m.V.sample_uniform(rng, 6))
        path = tmp_path / "tr.csv"
        write_trajectory_csv(tr, path)
        back = read_trajectory_csv(path)
        for a, b in zip((tr.x, tr.w, tr.v, tr.y), (back.x, back.w, back.v, back.y)):
            assert np.array_equal(a, b)


class TestPiSequence:
    def test_identical(self):
        m = make_system("contraction")
        tr = zero_run(m, [0.7], 4)
        assert all(not np.any(p) for p in pi_sequence(tr, tr, m))

    def test_hand_rollout(self):
        m = make_system("contraction")
        pi = pi_sequence(zero_run(m, [1.0], 3), zero_run(m, [0.0], 3), m)
        assert len(pi) == 7
        assert [float(p[0]) for p in pi] == [1.0, 0.0, 0.0, 0.0, -1.0, -0.5, -0.25]

    def test_count(self):
        m = make_system("contraction")
        assert len(pi_sequence(zero_run(m, [1.0], 5), zero_run(m, [0.0], 5))) == 11

    def test_without_model_uses_noise_free_outputs(self):
        m = make_system("contraction")
        rng = stream(0, 1)
        a = simulate(m, [1.0], m.W.sample_uniform(rng, 4), m.V.sample_uniform(rng, 4))
        b = simulate(m, [0.2], m.W.sample_uniform(rng, 4), m.V.sample_uniform(rng, 4))
        for p, q in zip(pi_sequence(a, b), pi_sequence(a, b, m)):
            assert np.allclose(p, q, atol=1e-15)


class TestIota:
    def test_examples(self):
        assert iota(0, 3) == -1
        assert iota(2, 3) == 1
        assert iota(5, 3) == 1

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            iota(7, 3)

    @pytest.mark.parametrize("t", [0, 1, 4, 9])
    def test_preimages(self, t):
        values = [iota(i, t) for i in range(2 * t + 1)]
        assert set(values) == set(range(-1, t))
        for tau in range(t):
            assert values.count(tau) == 2


class TestCertificates:
    def test_geometric_constants(self):
        lam = math.sqrt(0.5)
        c = max(2, 1 / (1 - math.sqrt(0.5))) * 2
        assert shipped_certificate("contraction").exp_form == pytest.approx((c, lam))

    def test_identical_pair_zero_margin(self):
        m = make_system("contraction")
        tr = zero_run(m, [0.4], 10)
        report = check_ioss(m, shipped_certificate("contraction"), tr, tr)
        assert report.holds and report.worst_margin == 0.0

    @pytest.mark.parametrize("name", SYSTEMS)
    def test_shipped_certificates_hold(self, name):
        m = make_system(name)
        result = validate_certificate(m, shipped_certificate(name), pairs=200, t_max=40)
        assert result.passed, result.counterexample

    def test_too_fast_decay_is_caught(self):
        m = make_system("contraction")
        bad = IossCertificate(klc.ExpPower(1.0, 1.0, 0.3))
        result = validate_certificate(m, bad, pairs=50, t_max=20)
        assert not result.passed and result.counterexample is not None

    def test_round_trip(self):
        cert = shipped_certificate("rotation-contraction")
        assert IossCertificate.from_dict(cert.to_dict()) == cert

    def test_lambda_scaling(self):
        cert = shipped_certificate("contraction").with_lambda_scaled(0.5)
        assert cert.alpha.lam == pytest.approx(math.sqrt(0.5) / 2)


class TestBox:
    def test_sampling_stays_inside(self):
        box = Box.symmetric(0.3, 3)
        rng = stream(0)
        assert all(box.contains(x) for x in box.sample_uniform(rng, 100))
        corners = box.sample_corner(rng, 50)
        assert np.all(np.abs(corners) == 0.3)

    def test_streams_are_reproducible(self):
        assert stream(5, 2).uniform() == stream(5, 2).uniform()
        assert stream(5, 2).uniform() != stream(5, 3).uniform()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 15))
def test_pi_antisymmetry(seed, t):
    m = make_system("sin-contraction")
    rng = stream(seed)
    a = simulate(m, rng.uniform(-2, 2, 1), m.W.sample_uniform(rng, t), m.V.sample_uniform(rng, t))
    b = simulate(m, rng.uniform(-2, 2, 1), m.W.sample_uniform(rng, t), m.V.sample_uniform(rng, t))
    for p, q in zip(pi_sequence(a, b, m), pi_sequence(b, a, m)):
        assert np.array_equal(p, -q)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(SYSTEMS))
def test_certificate_holds_on_random_pairs(seed, name):
    m = make_system(name)
    rng = stream(seed)
    t = 25
    trs = [
        simulate(m, rng.uniform(-2, 2, m.n), m.W.sample_uniform(rng, t).reshape(t, m.g), m.V.sample_uniform(rng, t).reshape(t, m.p))
        for _ in range(2)
    ]
    assert check_ioss(m, shipped_certificate(name), *trs).holds
