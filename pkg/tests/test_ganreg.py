import math

import numpy as np
import pytest

from diglab.autodiff import Tape, backward
from diglab.ganreg import (EmaState, NonFiniteNormError, PairingError,
                           dig_penalty, discriminator_loss, dragan_penalty,
                           generator_loss, gp1_penalty, input_grad_norms,
                           pair_samples, r1_penalty, r2_penalty, raw_gap_value,
                           regularized_d_loss, scores_and_input_grad_norms)
from diglab.nn import MlpConfig, mlp_forward, mlp_init, params_to_leaves
from conftest import assert_grad_close, fd_grad


def _batch(t, vals):
    return t.leaf(np.asarray(vals, dtype=float).reshape(-1, 1))


# --- losses -----------------------------------------------------------------

def test_generator_loss_values():
    t = Tape()
    assert generator_loss(t, "nonsaturating_js", _batch(t, [0.0, 0.0])).item() \
        == pytest.approx(math.log(2), abs=1e-12)
    assert generator_loss(t, "hinge", _batch(t, [1.0, 3.0])).item() == -2.0
    assert generator_loss(t, "nonsaturating_js", _batch(t, [10.0])).item() \
        == pytest.approx(math.log(1 + math.exp(-10)), rel=1e-12)


def test_discriminator_loss_values():
    t = Tape()
    assert discriminator_loss(t, "nonsaturating_js",
                              _batch(t, [0.0]), _batch(t, [0.0])).item() \
        == pytest.approx(2 * math.log(2), abs=1e-12)
    assert discriminator_loss(t, "hinge",
                              _batch(t, [2.0]), _batch(t, [-2.0])).item() == 0.0
    assert discriminator_loss(t, "hinge",
                              _batch(t, [0.0]), _batch(t, [0.0])).item() == 2.0


def test_losses_accept_scalar_node_lists():
    t = Tape()
    scores = [t.scalar(0.0), t.scalar(0.0)]
    assert generator_loss(t, "nonsaturating_js", scores).item() \
        == pytest.approx(math.log(2), abs=1e-12)
    assert discriminator_loss(t, "hinge", [t.scalar(2.0)], [t.scalar(-2.0)]).item() == 0.0


def test_empty_batch_rejected():
    t = Tape()
    with pytest.raises(ValueError, match="empty"):
        generator_loss(t, "hinge", [])


def test_unknown_family_rejected():
    t = Tape()
    with pytest.raises(ValueError, match="family"):
        generator_loss(t, "wasserstein", _batch(t, [0.0]))


# --- input gradient norms ----------------------------------------------------

def _linear_d(slope):
    def d_apply(t, x):
        return t.scalar_mul(x, slope)
    return d_apply


def _const_d(value):
    def d_apply(t, x):
        return t.scalar(value)
    return d_apply


def test_input_grad_norms_linear_and_constant():
    t = Tape()
    norms = input_grad_norms(t, _linear_d(3.0), np.array([[0.5], [-2.0], [7.0]]))
    assert [n.item() for n in norms] == [3.0, 3.0, 3.0]
    t = Tape()
    norms = input_grad_norms(t, _const_d(0.7), np.array([[1.0], [2.0]]))
    assert [n.item() for n in norms] == [0.0, 0.0]


def test_input_grad_norms_match_finite_differences(rng):
    cfg = MlpConfig((2, 4, 1), hidden_activation="sigmoid")
    params = mlp_init(cfg, seed=31)
    xs = rng.uniform(-1, 1, size=(3, 2))

    def d_apply(t, x):
        return mlp_forward(t, cfg, params, x)

    t = Tape()
    norms = input_grad_norms(t, d_apply, xs)
    from diglab.nn import mlp_eval
    for i, n in enumerate(norms):
        g = fd_grad(lambda xv: mlp_eval(cfg, params, xv)[0, 0], xs[i:i + 1].copy())
        assert n.item() == pytest.approx(np.linalg.norm(g), rel=1e-5)


def test_norms_are_differentiable_wrt_params(rng):
    cfg = MlpConfig((1, 3, 1), hidden_activation="tanh")
    base = mlp_init(cfg, seed=13)
    xs = np.array([[0.4]])

    def objective(params_arrays):
        t = Tape()
        leaves = params_to_leaves(t, params_arrays)
        norms = input_grad_norms(
            t, lambda tp, x: mlp_forward(tp, cfg, leaves, x), xs)
        return t, leaves, norms[0]

    t, leaves, norm = objective(base)
    grads = backward(t, norm, leaves.flat())
    for ti, tensor in enumerate(base.flat()):
        def f(tv, ti=ti):
            mod = base.copy()
            mod.flat()[ti][...] = tv
            return objective(mod)[2].item()
        assert_grad_close(grads[leaves.flat()[ti].nid], fd_grad(f, tensor.copy()),
                          atol=1e-8, rtol=1e-4)


# --- pairing -----------------------------------------------------------------

def test_pairing_batch_of_one():
    r, f = np.zeros((1, 1)), np.zeros((1, 1))
    rng = np.random.default_rng(0)
    assert pair_samples("random", r, f, rng=rng) == [(0, 0)]
    assert pair_samples("same_class", r, f, labels=([0], [0]), rng=rng) == [(0, 0)]
    assert pair_samples("gradient_magnitude", r, f, norms=([1.0], [2.0])) == [(0, 0)]


def test_gradient_magnitude_sorts_ascending_to_ascending():
    r, f = np.zeros((2, 1)), np.zeros((2, 1))
    pairs = pair_samples("gradient_magnitude", r, f, norms=([5.0, 1.0], [2.0, 9.0]))
    assert pairs == [(1, 0), (0, 1)]


def test_random_pairing_is_reproducible_bijection():
    r, f = np.zeros((6, 1)), np.zeros((6, 1))
    seen = set()
    for draw in range(1000):
        rng = np.random.default_rng(draw)
        pairs = pair_samples("random", r, f, rng=rng)
        assert sorted(p[0] for p in pairs) == list(range(6))
        assert sorted(p[1] for p in pairs) == list(range(6))
        seen.add(tuple(p[1] for p in pairs))
        rng2 = np.random.default_rng(draw)
        assert pair_samples("random", r, f, rng=rng2) == pairs
    assert len(seen) > 100  # many distinct bijections actually occur


def test_same_class_pairing_respects_labels():
    r, f = np.zeros((4, 1)), np.zeros((4, 1))
    labels = ([0, 1, 0, 1], [1, 0, 1, 0])
    pairs = pair_samples("same_class", r, f, labels=labels,
                         rng=np.random.default_rng(1))
    for ri, fi in pairs:
        assert labels[0][ri] == labels[1][fi]


def test_same_class_deficit_report():
    r, f = np.zeros((3, 1)), np.zeros((3, 1))
    with pytest.raises(PairingError, match="class 0.*2 real vs 1 fake"):
        pair_samples("same_class", r, f, labels=([0, 0, 1], [0, 1, 1]),
                     rng=np.random.default_rng(0))


def test_pairing_size_mismatch():
    with pytest.raises(PairingError, match="equal batch sizes"):
        pair_samples("random", np.zeros((2, 1)), np.zeros((3, 1)),
                     rng=np.random.default_rng(0))


# --- gradient-gap penalty ----------------------------------------------------

def _norm_nodes(t, values):
    return [t.scalar(v) for v in values]


def test_dig_equal_norms_is_zero():
    t = Tape()
    ema = EmaState(alpha=1.0)
    r, ema2 = dig_penalty(t, _norm_nodes(t, [3.0]), _norm_nodes(t, [3.0]),
                          [(0, 0)], ema)
    assert r.item() == 0.0
    assert (ema2.g_real, ema2.g_fake, ema2.t) == (3.0, 3.0, 1)


def test_dig_five_two_gives_nine():
    t = Tape()
    r, _ = dig_penalty(t, _norm_nodes(t, [5.0]), _norm_nodes(t, [2.0]),
                       [(0, 0)], EmaState(alpha=1.0))
    assert r.item() == 9.0


def test_dig_blend_hand_example():
    # alpha=0.5, previous averages (4, 0), current norms (2, 2):
    # blended real 3, blended fake 1, squared gap 4.
    t = Tape()
    ema = EmaState(alpha=0.5, g_real=4.0, g_fake=0.0, t=1)
    r, ema2 = dig_penalty(t, _norm_nodes(t, [2.0]), _norm_nodes(t, [2.0]),
                          [(0, 0)], ema)
    assert r.item() == 4.0
    assert ema2.g_real == 3.0 and ema2.g_fake == 1.0 and ema2.t == 2


def test_dig_symmetry():
    t = Tape()
    nr, nf = _norm_nodes(t, [1.5, 0.2]), _norm_nodes(t, [0.9, 2.4])
    pairs = [(0, 1), (1, 0)]
    a, _ = dig_penalty(t, nr, nf, pairs, EmaState(alpha=1.0))
    b, _ = dig_penalty(t, nf, nr, [(f, r) for r, f in pairs], EmaState(alpha=1.0))
    assert a.item() == b.item()


def test_dig_zero_iff_paired_norms_equal_at_alpha_one():
    t = Tape()
    nr, nf = _norm_nodes(t, [1.0, 2.0]), _norm_nodes(t, [2.0, 1.0])
    r, _ = dig_penalty(t, nr, nf, [(0, 1), (1, 0)], EmaState(alpha=1.0))
    assert r.item() == 0.0
    r2, _ = dig_penalty(t, nr, nf, [(0, 0), (1, 1)], EmaState(alpha=1.0))
    assert r2.item() > 0.0


@pytest.mark.parametrize("alpha", [1.0, 0.7, 0.5, 0.3, 0.1, 1e-3])
def test_ema_constant_stream_is_exact_fixed_point(alpha):
    ema = EmaState(alpha=alpha)
    t = Tape()
    g = 1.7320508075688772  # sqrt(3), full double precision
    for _ in range(50):
        _, ema = dig_penalty(t, _norm_nodes(t, [g]), _norm_nodes(t, [g]),
                             [(0, 0)], ema)
    assert ema.g_real == g and ema.g_fake == g


def test_dig_mean_then_gap_mode():
    t = Tape()
    nr, nf = _norm_nodes(t, [1.0, 3.0]), _norm_nodes(t, [2.0, 0.0])
    r, _ = dig_penalty(t, nr, nf, [(0, 0), (1, 1)], EmaState(alpha=1.0),
                       mode="mean_then_gap")
    assert r.item() == pytest.approx((2.0 - 1.0) ** 2, abs=1e-12)


def test_dig_rejects_nonfinite_norms():
    t = Tape()
    with pytest.raises(NonFiniteNormError):
        dig_penalty(t, _norm_nodes(t, [np.inf]), _norm_nodes(t, [1.0]),
                    [(0, 0)], EmaState(alpha=1.0))


def test_dig_history_carries_no_derivative(rng):
    # At alpha=0.5 the penalty's derivative w.r.t. the current norm is
    # scaled by alpha; history enters as a constant.
    t = Tape()
    nr = t.scalar(2.0)
    nf = t.scalar(1.0)
    ema = EmaState(alpha=0.5, g_real=4.0, g_fake=1.0, t=3)
    r, _ = dig_penalty(t, [nr], [nf], [(0, 0)], ema)
    grads = backward(t, r, [nr, nf])
    # blended: real 3.0, fake 1.0, gap 2.0; dR/dnr = 2*gap*alpha = 2.0
    assert grads[nr.nid][0, 0] == pytest.approx(2.0, abs=1e-12)
    assert grads[nf.nid][0, 0] == pytest.approx(-2.0, abs=1e-12)


def test_raw_gap_value_matches_definition():
    t = Tape()
    nr, nf = _norm_nodes(t, [5.0, 1.0]), _norm_nodes(t, [2.0, 2.0])
    assert raw_gap_value(nr, nf) == pytest.approx((3.0 - 2.0) ** 2, abs=1e-12)


# --- comparison penalties ----------------------------------------------------

def test_gp1_closed_forms(rng):
    reals = np.array([[0.0], [4.0]])
    fakes = np.array([[1.0], [2.0]])
    t = Tape()
    assert gp1_penalty(t, _linear_d(1.0), reals, fakes, rng).item() \
        == pytest.approx(0.0, abs=1e-12)
    t = Tape()
    assert gp1_penalty(t, _const_d(2.0), reals, fakes, rng).item() == 1.0
    t = Tape()
    assert gp1_penalty(t, _linear_d(3.0), reals, fakes, rng).item() \
        == pytest.approx(4.0, abs=1e-12)


def test_r1_r2_closed_forms(rng):
    batch = np.array([[0.3], [-1.2]])
    t = Tape()
    assert r1_penalty(t, _const_d(1.0), batch).item() == 0.0
    t = Tape()
    assert r1_penalty(t, _linear_d(3.0), batch).item() == pytest.approx(9.0, abs=1e-12)
    t = Tape()
    assert r2_penalty(t, _linear_d(3.0), batch).item() == pytest.approx(9.0, abs=1e-12)


def test_r1_matches_squared_input_grad_norms(rng):
    cfg = MlpConfig((2, 5, 1), hidden_activation="sigmoid")
    params = mlp_init(cfg, seed=8)
    batch = rng.uniform(-1, 1, size=(4, 2))

    def d_apply(t, x):
        return mlp_forward(t, cfg, params, x)

    t = Tape()
    pen = r1_penalty(t, d_apply, batch).item()
    t2 = Tape()
    norms = input_grad_norms(t2, d_apply, batch)
    want = np.mean([n.item() ** 2 for n in norms])
    assert pen == pytest.approx(want, abs=1e-12)


def test_dragan_closed_forms(rng):
    reals = np.array([[0.0], [4.0]])
    t = Tape()
    assert dragan_penalty(t, _linear_d(1.0), reals, 0.5, rng).item() \
        == pytest.approx(0.0, abs=1e-12)
    t = Tape()
    assert dragan_penalty(t, _const_d(0.0), reals, 0.5, rng).item() == 1.0
    with pytest.raises(ValueError):
        dragan_penalty(Tape(), _linear_d(1.0), reals, 0.0, rng)


def test_dragan_tiny_noise_matches_gp1_at_reals():
    cfg = MlpConfig((1, 6, 1), hidden_activation="tanh")
    params = mlp_init(cfg, seed=21)
    reals = np.array([[0.2], [1.8], [-0.4]])

    def d_apply(t, x):
        return mlp_forward(t, cfg, params, x)

    t = Tape()
    drag = dragan_penalty(t, d_apply, reals, 1e-8, np.random.default_rng(4)).item()
    t2 = Tape()
    gp = gp1_penalty(t2, d_apply, reals, reals.copy(), np.random.default_rng(9)).item()
    assert drag == pytest.approx(gp, abs=1e-6)


def test_regularized_loss_lambda_zero_identity_and_value():
    t = Tape()
    l_d = t.scalar(2.0)
    r = t.scalar(9.0)
    assert regularized_d_loss(t, l_d, r, 0.0).item() == 2.0
    assert regularized_d_loss(t, l_d, r, 1.0).item() == 11.0
    with pytest.raises(ValueError):
        regularized_d_loss(t, l_d, r, -0.5)


def test_regularized_loss_gradient_is_linear_combination():
    cfg = MlpConfig((1, 4, 1), hidden_activation="sigmoid")
    base = mlp_init(cfg, seed=3)
    reals = np.array([[0.0], [4.0]])
    fakes = np.array([[0.5], [3.5]])
    lam = 0.7

    def build(with_reg):
        t = Tape()
        leaves = params_to_leaves(t, base)
        d_apply = lambda tp, x: mlp_forward(tp, cfg, leaves, x)
        s_r, n_r = scores_and_input_grad_norms(t, d_apply, reals)
        s_f, n_f = scores_and_input_grad_norms(t, d_apply, fakes)
        l_d = discriminator_loss(t, "nonsaturating_js", s_r, s_f)
        pen, _ = dig_penalty(t, n_r, n_f, [(0, 0), (1, 1)], EmaState(alpha=1.0))
        out = regularized_d_loss(t, l_d, pen, lam) if with_reg else (l_d, pen)
        return t, leaves, out

    t, leaves, (l_d, pen) = build(False)
    g_ld = backward(t, l_d, leaves.flat())
    g_r = backward(t, pen, leaves.flat())
    t2, leaves2, total = build(True)
    g_tot = backward(t2, total, leaves2.flat())
    for a, b in zip(leaves.flat(), leaves2.flat()):
        want = g_ld[a.nid] + lam * g_r[a.nid]
        assert np.max(np.abs(g_tot[b.nid] - want)) < 1e-10


def test_penalties_pass_second_order_finite_differences(rng):
    cfg = MlpConfig((1, 4, 1), hidden_activation="sigmoid")
    base = mlp_init(cfg, seed=17)
    reals = np.array([[0.0], [4.0]])
    fakes = np.array([[1.0], [2.5]])

    def build(kind, params):
        t = Tape()
        leaves = params_to_leaves(t, params)
        d_apply = lambda tp, x: mlp_forward(tp, cfg, leaves, x)
        if kind == "dig":
            _, n_r = scores_and_input_grad_norms(t, d_apply, reals)
            _, n_f = scores_and_input_grad_norms(t, d_apply, fakes)
            pen, _ = dig_penalty(t, n_r, n_f, [(0, 0), (1, 1)], EmaState(alpha=1.0))
        elif kind == "gp1":
            pen = gp1_penalty(t, d_apply, reals, fakes, np.random.default_rng(2))
        elif kind == "r1":
            pen = r1_penalty(t, d_apply, reals)
        elif kind == "r2":
            pen = r2_penalty(t, d_apply, fakes)
        else:
            pen = dragan_penalty(t, d_apply, reals, 0.3, np.random.default_rng(2))
        return t, leaves, pen

    for kind in ("dig", "gp1", "r1", "r2", "dragan"):
        t, leaves, pen = build(kind, base)
        assert pen.item() >= 0.0
        grads = backward(t, pen, leaves.flat())
        for ti, tensor in enumerate(base.flat()):
            def f(tv, ti=ti):
                mod = base.copy()
                mod.flat()[ti][...] = tv
                return build(kind, mod)[2].item()
            assert_grad_close(grads[leaves.flat()[ti].nid],
                              fd_grad(f, tensor.copy()), atol=1e-7, rtol=1e-4)
