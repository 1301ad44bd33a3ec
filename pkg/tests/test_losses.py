"""Loss terms, schedules, total objective, and gradient/finite-difference
agreement through the recorded training programs."""

import math

import numpy as np
import pytest

from symkan import network as nw
from symkan.autodiff import Tape, backward
from symkan.errors import ConfigError
from symkan.losses import (LossReport, LossWeights, Schedules, bias_loss,
                           bias_loss_terms, data_loss, entropy_loss, nms_loss,
                           physics_losses, schedule_eval, total_loss,
                           unit_loss)
from symkan.network import NetworkConfig, forward, init_network
from symkan.problems import (make_laplace_problem, make_rd_problem,
                             make_regression_problem)
from symkan.training import SoftStepper

LIB13 = ["zero", "one", "identity", "square", "cube", "sin", "cos", "tanh",
         "exp", "log1pabs", "lorentz", "sinh", "cosh"]


def _neutral(edge, p_idx, w=None, b=0.0, amp=1.0):
    if w is not None:
        edge.w = np.asarray(w, dtype=float)
    edge.b = b
    edge.gamma = np.ones_like(edge.gamma)
    edge.beta = np.zeros_like(edge.beta)
    edge.amp = np.zeros_like(edge.amp)
    edge.amp[p_idx] = amp
    edge.off = np.zeros_like(edge.off)


def _harden_to(net, picks):
    flat = [u for layer in net.layers for u in layer]
    for u, (e_idx, p_name) in zip(flat, picks):
        u.hard = (e_idx, net.library.index[p_name])
    net.hardened = True
    return net


# -- weights and schedule validation --------------------------------------------

def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_data=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(lambda_nms=-0.5)
    with pytest.raises(ConfigError):
        LossWeights(unit_penalty="multiplicative")
    with pytest.raises(ConfigError):
        LossWeights(unit_penalty="budgeted", rho=1.0)
    LossWeights(unit_penalty="budgeted", rho=0.5)  # valid


def test_schedules_validation():
    with pytest.raises(ConfigError):
        Schedules(tau_start=0.1, tau_end=1.0)
    with pytest.raises(ConfigError):
        Schedules(tau_end=0.0)
    with pytest.raises(ConfigError):
        Schedules(ramp_fraction=0.0)
    with pytest.raises(ConfigError):
        Schedules(ramp_fraction=1.5)


def test_schedule_endpoints():
    s = Schedules(tau_start=5.0, tau_end=0.1, lambda_sel_max=1.0,
                  ramp_fraction=0.5, lr0=1e-2, lr_decay=0.1)
    tau, lam, lr, lrg = schedule_eval(s, 0, 1000)
    assert tau == 5.0 and lam == 0.0 and lr == 1e-2
    tau, lam, lr, lrg = schedule_eval(s, 1000, 1000)
    assert abs(tau - 0.1) < 1e-12
    assert lam == 1.0
    assert abs(lr - 1e-3) < 1e-15
    assert abs(lrg - 0.1 * lr) < 1e-18


def test_schedule_geometric_midpoint():
    s = Schedules(tau_start=5.0, tau_end=0.1)
    tau, _, _, _ = schedule_eval(s, 500, 1000)
    assert abs(tau - math.sqrt(0.5)) < 1e-12


def test_schedule_monotone():
    s = Schedules()
    taus, lams, lrs = [], [], []
    for t in range(0, 1001, 50):
        tau, lam, lr, _ = schedule_eval(s, t, 1000)
        taus.append(tau)
        lams.append(lam)
        lrs.append(lr)
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    assert all(a <= b for a, b in zip(lams, lams[1:]))
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_ramp_reaches_max_at_fraction():
    s = Schedules(ramp_fraction=0.25, lambda_sel_max=3.0)
    _, lam, _, _ = schedule_eval(s, 250, 1000)
    assert lam == 3.0
    _, lam, _, _ = schedule_eval(s, 125, 1000)
    assert abs(lam - 1.5) < 1e-12


# -- data loss -------------------------------------------------------------------

def _const_net(value):
    cfg = NetworkConfig(n_in=1, widths=[1], edges=1, n_out=1, library=LIB13, seed=0)
    net = init_network(cfg)
    _neutral(net.layers[0][0].edges[0], net.library.index["one"], w=[0.0], amp=value)
    return _harden_to(net, [(0, "one")])


def _identity_net():
    cfg = NetworkConfig(n_in=1, widths=[1], edges=1, n_out=1, library=LIB13, seed=0)
    net = init_network(cfg)
    _neutral(net.layers[0][0].edges[0], net.library.index["identity"], w=[1.0])
    return _harden_to(net, [(0, "identity")])


def test_data_loss_zero_on_exact():
    net = _identity_net()
    X = np.array([[0.5, 1.5, 2.5]])
    assert data_loss(net, X, X, mode="hard") == 0.0


def test_data_loss_single_pair():
    net = _const_net(2.0)
    assert data_loss(net, np.array([[1.0]]), np.array([[0.0]]), mode="hard") == 4.0


def test_data_loss_mean():
    net = _identity_net()
    X = np.array([[1.0, 2.0]])
    Y = np.array([[0.0, -1.0]])  # squared errors 1 and 9
    assert data_loss(net, X, Y, mode="hard") == 5.0


def test_data_loss_empty():
    net = _identity_net()
    with pytest.raises(ConfigError):
        data_loss(net, np.empty((1, 0)), np.empty((1, 0)))


# -- selection regularizers ------------------------------------------------------

def test_entropy_one_hot_zero():
    assert entropy_loss([[[[1.0, 0.0, 0.0]]]]) == 0.0


def test_entropy_uniform():
    assert abs(entropy_loss([[0.2] * 5]) - math.log(5)) < 1e-12
    assert abs(entropy_loss([[0.5, 0.5]]) - math.log(2)) < 1e-12


def test_entropy_sums_over_edges():
    e = entropy_loss([[[0.5, 0.5], [0.5, 0.5]]])
    assert abs(e - 2 * math.log(2)) < 1e-12


def test_entropy_bound():
    rng = np.random.default_rng(0)
    alphas = []
    for _ in range(6):
        v = rng.random(7)
        alphas.append(list(v / v.sum()))
    h = entropy_loss(alphas)
    assert 0.0 <= h <= 6 * math.log(7) + 1e-12


def test_nms_distinct_one_hot():
    assert nms_loss([[[1.0, 0.0], [0.0, 1.0]]]) == 0.0


def test_nms_same_one_hot():
    assert nms_loss([[[1.0, 0.0], [1.0, 0.0]]]) == 1.0


def test_nms_uniform_pair():
    assert abs(nms_loss([[[0.5, 0.5], [0.5, 0.5]]]) - 0.5) < 1e-15


def test_nms_three_edges_pairwise():
    # three identical one-hot edges: three pairs, each overlap 1
    unit = [[1.0, 0.0]] * 3
    assert nms_loss([unit]) == 3.0


def test_unit_loss_additive():
    assert unit_loss([[1.0, 1.0]], "additive") == 2.0
    assert unit_loss([[0.25, 0.5], [0.75]], "additive") == 1.5


def test_unit_loss_budgeted():
    assert unit_loss([[0.5, 0.5]], "budgeted", rho=0.5) == 0.0
    assert unit_loss([[1.0, 0.0]], "budgeted", rho=0.5) == 0.0
    assert abs(unit_loss([[1.0, 1.0]], "budgeted", rho=0.5) - 0.25) < 1e-15


def test_unit_loss_budgeted_rho_domain():
    with pytest.raises(ConfigError):
        unit_loss([[0.5]], "budgeted", rho=0.0)


def test_unit_loss_skips_disabled_rows():
    assert unit_loss([[None, None]], "additive") == 0.0


def test_bias_loss_values():
    net = init_network(NetworkConfig(n_in=1, widths=[1], edges=1, n_out=1,
                                     library=LIB13, seed=0))
    assert bias_loss(net) == 0.0  # offs start at zero
    net.layers[0][0].edges[0].off[0] = 1.0
    net.layers[0][0].edges[0].off[1] = -2.0
    assert bias_loss(net) == 5.0


def test_bias_loss_gradient():
    t = Tape()
    b1 = t.leaf(1.0)
    b2 = t.leaf(-2.0)
    loss = bias_loss_terms([b1, b2])
    g = backward(t, loss)
    assert g[b1.idx] == pytest.approx(2.0)
    assert g[b2.idx] == pytest.approx(-4.0)


# -- physics losses ---------------------------------------------------------------

def _laplace_exact_net():
    """sin(pi x) sinh(pi y) via the polarization identity
    s*h = ((s+h)^2 - (s-h)^2)/4 on a [2,2] network."""
    cfg = NetworkConfig(n_in=2, widths=[2, 2], edges=1, n_out=1, library=LIB13, seed=0)
    net = init_network(cfg)
    _neutral(net.layers[0][0].edges[0], net.library.index["sin"], w=[math.pi, 0.0])
    _neutral(net.layers[0][1].edges[0], net.library.index["sinh"], w=[0.0, math.pi])
    _neutral(net.layers[1][0].edges[0], net.library.index["square"], w=[1.0, 1.0],
             amp=0.25)
    _neutral(net.layers[1][1].edges[0], net.library.index["square"], w=[1.0, -1.0],
             amp=-0.25)
    return _harden_to(net, [(0, "sin"), (0, "sinh"), (0, "square"), (0, "square")])


def test_laplace_exact_solution_residual():
    prob = make_laplace_problem(n_interior=64, n_boundary=16, seed=0)
    net = _laplace_exact_net()
    pred = forward(net, prob.S_b, mode="hard")
    np.testing.assert_allclose(pred, prob.G_b, atol=1e-10)
    out = physics_losses(net, prob, mode="hard")
    assert out["active"]["pde"] and out["active"]["bc"]
    assert not out["active"]["ic"]
    assert out["pde"] <= 1e-10
    assert out["bc"] <= 1e-20


def test_laplace_zero_net_bc_loss():
    prob = make_laplace_problem(n_interior=16, n_boundary=16, seed=0)
    net = _const_net(0.0)
    # rebuild with n_in=2 to match the problem
    cfg = NetworkConfig(n_in=2, widths=[1], edges=1, n_out=1, library=LIB13, seed=0)
    net = init_network(cfg)
    _neutral(net.layers[0][0].edges[0], net.library.index["zero"], w=[0.0, 0.0])
    _harden_to(net, [(0, "zero")])
    out = physics_losses(net, prob, mode="hard")
    want = float(np.mean(prob.G_b ** 2))
    assert abs(out["bc"] - want) < 1e-12
    assert out["bc"] > 0


def test_rd_exact_solution_residual():
    prob = make_rd_problem(m_half=2.0, n_train=8, n_interior=128, seed=0)
    # u(x) = sin^3(6x) as cube(sin(6x))
    cfg = NetworkConfig(n_in=1, widths=[1, 1], edges=1, n_out=1, library=LIB13, seed=0)
    net = init_network(cfg)
    _neutral(net.layers[0][0].edges[0], net.library.index["sin"], w=[6.0])
    _neutral(net.layers[1][0].edges[0], net.library.index["cube"], w=[1.0])
    _harden_to(net, [(0, "sin"), (0, "cube")])
    prob.set_values({"kappa": 0.7})
    out = physics_losses(net, prob, mode="hard")
    assert out["pde"] <= 1e-8
    assert out["bc"] <= 1e-20


# -- total objective ---------------------------------------------------------------

def test_total_loss_data_only():
    prob = make_regression_problem("square", n_train=16, seed=0)
    net = init_network(NetworkConfig(n_in=1, widths=[2, 2], edges=2, n_out=1,
                                     library=LIB13,
                                     input_affine=prob.input_affine(), seed=1))
    w = LossWeights(lambda_ent=0.0, lambda_nms=0.0, lambda_bias=0.0)
    rep = total_loss(net, prob, w, Schedules(), t=100, t1=1000)
    assert rep.total == pytest.approx(rep.data, rel=1e-12)
    assert rep.active["data"] and not rep.active["pde"]
    assert not rep.active["unit"]


def test_total_loss_report_identity():
    prob = make_regression_problem("square", n_train=16, seed=0)
    net = init_network(NetworkConfig(n_in=1, widths=[2, 2], edges=2, n_out=1,
                                     library=LIB13, unit_gates=True,
                                     input_affine=prob.input_affine(), seed=2))
    w = LossWeights(unit_penalty="budgeted", rho=0.4)
    sched = Schedules()
    t, t1 = 300, 1000
    rep = total_loss(net, prob, w, sched, t=t, t1=t1)
    _, lam_sel, _, _ = schedule_eval(sched, t, t1)
    want = (w.lambda_data * rep.data + w.lambda_r * rep.pde
            + w.lambda_b * rep.bc + w.lambda_0 * rep.ic
            + lam_sel * (w.lambda_ent * rep.ent + w.lambda_nms * rep.nms)
            + w.lambda_unit * rep.unit + w.lambda_bias * rep.bias)
    assert rep.total == pytest.approx(want, abs=1e-12)
    assert rep.ent > 0          # fresh logits are diffuse
    assert rep.active["unit"]


# -- gradient vs finite differences through the recorded programs ------------------

def _fd_sweep(stepper, x, tau, lam, h=1e-6, tol=1e-5):
    _, g = stepper.evaluate(x.copy(), tau, lam, st_on=False)
    worst = 0.0
    for i in range(x.size):
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        lp, _ = stepper.evaluate(xp, tau, lam, st_on=False)
        lm, _ = stepper.evaluate(xm, tau, lam, st_on=False)
        fd = (lp["total"] - lm["total"]) / (2 * h)
        err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1.0)
        worst = max(worst, err)
    assert worst <= tol, worst


def test_gradient_matches_fd_regression():
    prob = make_regression_problem("square", n_train=6, seed=0)
    net = init_network(NetworkConfig(n_in=1, widths=[2, 2], edges=2, n_out=1,
                                     library=["identity", "square", "sin"],
                                     input_affine=prob.input_affine(), seed=3))
    stepper = SoftStepper(net, prob, LossWeights())
    rng = np.random.default_rng(0)
    for trial in range(3):
        x = stepper.pack() + rng.normal(scale=0.05, size=stepper.pack().size)
        _fd_sweep(stepper, x, tau=0.9, lam=0.7)


def test_gradient_matches_fd_unit_gates():
    prob = make_regression_problem("square", n_train=6, seed=0)
    net = init_network(NetworkConfig(n_in=1, widths=[2, 2], edges=2, n_out=1,
                                     library=["identity", "square", "sin"],
                                     unit_gates=True,
                                     input_affine=prob.input_affine(), seed=4))
    stepper = SoftStepper(net, prob, LossWeights(unit_penalty="budgeted", rho=0.5))
    x = stepper.pack()
    _fd_sweep(stepper, x, tau=1.1, lam=0.4)


def test_gradient_matches_fd_pde():
    # second-derivative (u_xx) terms through the jets: looser 1e-3 bound
    prob = make_laplace_problem(n_interior=12, n_boundary=8, seed=0)
    net = init_network(NetworkConfig(n_in=2, widths=[2, 2], edges=2, n_out=1,
                                     library=["identity", "square", "sin"],
                                     input_affine=prob.input_affine(), seed=5))
    stepper = SoftStepper(net, prob, LossWeights())
    rng = np.random.default_rng(1)
    for trial in range(2):
        x = stepper.pack() + rng.normal(scale=0.05, size=stepper.pack().size)
        _fd_sweep(stepper, x, tau=0.8, lam=0.5, tol=1e-3)


def test_gradient_matches_fd_inverse_learnable():
    # learnable kappa rides at the tail of the packed vector
    prob = make_rd_problem(m_half=2.0, n_train=5, n_interior=10, seed=0)
    net = init_network(NetworkConfig(n_in=1, widths=[2, 2], edges=2, n_out=1,
                                     library=["identity", "square", "sin"],
                                     input_affine=prob.input_affine(), seed=6))
    stepper = SoftStepper(net, prob, LossWeights())
    x = stepper.pack()
    assert x.size == nw.param_count(net) + 1
    _, g = stepper.evaluate(x.copy(), 0.9, 0.6, st_on=False)
    h = 1e-6
    xp = x.copy(); xp[-1] += h
    xm = x.copy(); xm[-1] -= h
    lp, _ = stepper.evaluate(xp, 0.9, 0.6, st_on=False)
    lm, _ = stepper.evaluate(xm, 0.9, 0.6, st_on=False)
    fd = (lp["total"] - lm["total"]) / (2 * h)
    assert abs(g[-1] - fd) / max(abs(fd), 1.0) < 1e-5
