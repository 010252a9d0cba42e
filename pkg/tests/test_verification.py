import numpy as np
import pytest
import sympy

from conftest import MLP6, fdg_config
from fdg.data import batch_stream
from fdg.layers import build_network
from fdg.partition import make_partition
from fdg.trainers import train_bp
from fdg.verification import (Checkpoint, LeastSquaresObjective, MonitorLog, NetworkObjective, NetworkProbe,
                              TheoremConstants, admissible_lr, descent_monitor, estimate_constants,
                              geometric_term, run_delayed_sgd, serial_emulate_fdg, verification_report,
                              z_terms)


def _power_iteration(A, iters=2000, seed=0):
    v = np.random.default_rng(seed).normal(size=A.shape[0])
    for _ in range(iters):
        v = A @ v
        v /= np.linalg.norm(v)
    return float(v @ A @ v)


@pytest.fixture
def quadratic():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 8)) * np.linspace(0.5, 2.0, 8)
    return LeastSquaresObjective(X, batch_size=20, theta0=rng.normal(size=8))


def test_l_hat_matches_top_eigenvalue(quadratic):
    lam = _power_iteration(quadratic.hessian)
    c = estimate_constants(quadratic)
    assert abs(c.L_hat - lam) / lam < 0.05
    assert c.L_hat <= lam * (1 + 1e-9)  # a lower bound


def test_doubling_data_quadruples_m_hat():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 5))
    theta = rng.normal(size=5)
    m1 = estimate_constants(LeastSquaresObjective(X, theta0=theta), seed=3).M_hat
    m2 = estimate_constants(LeastSquaresObjective(2 * X, theta0=theta), seed=3).M_hat
    # y = 0, so every minibatch gradient X_B^T X_B theta / b scales by 4, its square norm by 16;
    # at theta0 = 0 with targets y, the gradient X_B^T y / b scales by 2 and the square by 4
    assert np.isclose(m2, 16 * m1, rtol=1e-12)
    y = rng.normal(size=200)
    m1 = estimate_constants(LeastSquaresObjective(X, y), seed=3).M_hat
    m2 = estimate_constants(LeastSquaresObjective(2 * X, y), seed=3).M_hat
    assert np.isclose(m2, 4 * m1, rtol=1e-12)


def test_estimate_errors(quadratic):
    with pytest.raises(ValueError):
        estimate_constants(quadratic, samples=0)
    with pytest.raises(ValueError):
        estimate_constants(quadratic, samples=9)
    zero = LeastSquaresObjective(np.zeros((50, 3)))
    with pytest.raises(ValueError):
        estimate_constants(zero)


def test_z2_example_beta_one_k2():
    c = TheoremConstants(L_hat=3.0, M_hat=5.0, samples=10, scale=1e-3)
    t = 50
    _, z2 = z_terms([1.0, 1.0], c, 1.0, 2, t)
    LM = 15.0
    assert z2 == LM * 2 + LM * 2


def test_z_terms_symbolic():
    beta, L, M = sympy.Rational(1, 3), sympy.Integer(2), sympy.Integer(7)
    K, t = 4, 5
    norms = [sympy.Rational(n, 10) for n in (3, 1, 4, 1)]
    z1 = sum(beta ** (K - k) * norms[k - 1] for k in range(1, K + 1))
    stale = sum(beta ** (3 * (K - k)) * (t - max(0, t - 2 * (K - k))) for k in range(1, K + 1))
    z2 = L * M * (beta ** K - 1) / (beta - 1) + L * M * stale
    c = TheoremConstants(L_hat=2.0, M_hat=7.0, samples=10, scale=1e-3)
    got1, got2 = z_terms([float(n) for n in norms], c, 1 / 3, K, t)
    assert np.isclose(got1, float(z1), rtol=1e-14)
    assert np.isclose(got2, float(z2), rtol=1e-14)


def test_z1_equals_independent_sum():
    rng = np.random.default_rng(0)
    c = TheoremConstants(1.0, 1.0, 10, 1e-3)
    norms = list(rng.random(3))
    z1, _ = z_terms(norms, c, 0.6, 3, 10)
    assert z1 == 0.6 ** 2 * norms[0] + 0.6 * norms[1] + norms[2]


def test_geometric_term_continuity():
    assert geometric_term(1.0, 5) == 5.0
    assert np.isclose(geometric_term(1 - 1e-9, 5), 5.0, rtol=1e-6)


def test_admissible_lr_formula():
    c = TheoremConstants(L_hat=2.0, M_hat=1.0, samples=10, scale=1e-3)
    z1, z2 = z_terms([1.0, 1.0], c, 1.0, 2, 10)
    assert admissible_lr([1.0, 1.0], c, 1.0, 2, 10) == min(0.5, z1 / (2 * z2))


def test_zero_gradient_checkpoint_flagged():
    c = TheoremConstants(1.0, 1.0, 10, 1e-3)
    log = MonitorLog([Checkpoint(3, 0.1, 1.0, [0.0, 0.0], 1.0)], K=2, beta=1.0)
    r = descent_monitor(log, c)
    rec = r["records"][0]
    assert rec.Z1 == 0.0 and rec.zero_gradient and rec.rhs > 0
    assert r["zero_gradient_checkpoints"] == [3]


def test_monitor_missing_norms():
    c = TheoremConstants(1.0, 1.0, 10, 1e-3)
    with pytest.raises(ValueError):
        descent_monitor(MonitorLog([Checkpoint(1, 0.1, 1.0, None, 0.9)], 2, 1.0), c)
    with pytest.raises(ValueError):
        descent_monitor(MonitorLog([Checkpoint(1, 0.1, 1.0, [1.0], 0.9)], 2, 1.0), c)


def test_monitor_cross_checks_consumed_batches():
    c = TheoremConstants(1.0, 1.0, 10, 1e-3)
    good = Checkpoint(5, 0.1, 1.0, [1.0, 1.0], 0.9, consumed=[3, 5])
    assert descent_monitor(MonitorLog([good], 2, 1.0), c)["checkpoints"] == 1
    bad = Checkpoint(5, 0.1, 1.0, [1.0, 1.0], 0.9, consumed=[4, 5])
    with pytest.raises(ValueError):
        descent_monitor(MonitorLog([bad], 2, 1.0), c)


@pytest.mark.parametrize("beta", [0.5, 1.0])
def test_descent_satisfied_on_quadratic(quadratic, beta):
    K = 3
    c = estimate_constants(quadratic)
    log, _ = run_delayed_sgd(quadratic, K, 500, beta=beta,
                             lr_rule=lambda t, sq: 0.5 * admissible_lr(sq, c, beta, K, t))
    r = descent_monitor(log, c)
    assert r["checkpoints"] == 500
    assert r["lr_admissible_rate"] == 1.0
    assert r["satisfaction_rate"] >= 0.95


def test_delayed_sgd_k1_is_plain_sgd(quadratic):
    log, theta = run_delayed_sgd(quadratic, 1, 30, lr=0.01, seed=4)
    rng = np.random.default_rng(4)
    ref = quadratic.theta0.copy()
    for _ in range(30):
        ref = ref - 0.01 * quadratic.grad(ref, quadratic.sample_batch(rng))
    assert np.array_equal(theta, ref)
    assert all(c.consumed == [c.t] for c in log.checkpoints)


def test_delayed_sgd_argument_check(quadratic):
    with pytest.raises(ValueError):
        run_delayed_sgd(quadratic, 2, 5)


def test_network_objective_and_probe(teacher):
    net = build_network(MLP6, (10,), seed=0)
    obj = NetworkObjective(net, teacher, batch_size=32, full_size=256)
    g = obj.grad(obj.theta0)
    assert g.shape == obj.theta0.shape
    c = estimate_constants(obj, samples=10)
    assert c.L_hat > 0 and c.M_hat > 0

    from fdg.scheduler import run_lockstep
    net = build_network(MLP6, (10,), seed=0)
    part = make_partition(net, 2)
    cfg = fdg_config(k=2, momentum=0.0, weight_decay=0.0, lr=0.05)
    probe = NetworkProbe(net, part, teacher.inputs[:256], teacher.labels[:256], lambda t: 0.05)
    probe.start()
    run_lockstep(net, part, cfg, 20, batch_stream(teacher, 32), hooks=[probe])
    mlog = probe.monitor_log(cfg.beta)
    assert len(mlog.checkpoints) == 20
    assert all(len(cp.block_sq_norms) == 2 for cp in mlog.checkpoints)
    r = descent_monitor(mlog, c)
    assert 0.0 <= r["satisfaction_rate"] <= 1.0


def test_serial_k1_matches_bp(teacher):
    a, b = build_network(MLP6, (10,), seed=0), build_network(MLP6, (10,), seed=0)
    ref = train_bp(a, teacher, fdg_config(method="bp"), 30, batches=batch_stream(teacher, 32))
    log = serial_emulate_fdg(b, make_partition(b, 1), fdg_config(k=1), 30, batch_stream(teacher, 32))
    assert log.first_divergence(ref) is None


def test_serial_requires_deterministic(teacher):
    net = build_network(MLP6, (10,), seed=0)
    with pytest.raises(ValueError):
        serial_emulate_fdg(net, make_partition(net, 2), fdg_config(k=2, deterministic=False), 5,
                           batch_stream(teacher, 32))


def test_verification_report_shape():
    r = verification_report()
    assert r["pass"]
    assert set(r) >= {"grad-check", "oracle-equivalence", "theorem"}
    assert set(r["grad-check"]) == {"max-rel-err", "pass"}
    assert {"bit-exact", "first-divergence"} <= set(r["oracle-equivalence"])
    assert {"L-hat", "M-hat", "admissible-lr", "satisfaction-rate"} <= set(r["theorem"])
