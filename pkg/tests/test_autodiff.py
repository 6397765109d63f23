import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matcrush.autodiff import (
    AEArch,
    LossSpec,
    TrainConfig,
    TrainingDivergedError,
    ae_forward,
    backward,
    batch_weights,
    init_params,
    loss_eval,
    train,
)
from matcrush.linalg import rmse, truncated_svd

from gradcheck import arch_variants, loss_variants, max_rel_error, random_case


# -- forward ---------------------------------------------------------------

def test_identity_composition():
    m = 5
    arch = AEArch.linear(m, m, bias=False)
    A = np.random.default_rng(0).standard_normal((m, m))
    params = {"enc.0.w": A, "dec.0.w": np.linalg.inv(A)}
    X = np.random.default_rng(1).standard_normal((7, m))
    np.testing.assert_allclose(ae_forward(params, arch, X)[1], X, atol=1e-12)


def test_zero_decoder_gives_zero():
    arch = AEArch.linear(6, 2, bias=False)
    params = init_params(arch, 0)
    params["dec.0.w"][:] = 0
    X = np.random.default_rng(2).standard_normal((4, 6))
    assert not ae_forward(params, arch, X)[1].any()


@pytest.mark.parametrize("arch", list(arch_variants()), ids=lambda a: f"{len(a.encoder_spec)}L-{a.encoder_spec[0][1]}")
def test_norm_preservation_postcondition(arch):
    if not arch.preserve_norm:
        pytest.skip("norm preservation off")
    params, X = random_case(3, arch)
    X[2] = 0.0
    recon = ae_forward(params, arch, X)[1]
    live = np.linalg.norm(X, axis=1) >= 1e-12
    np.testing.assert_allclose(np.linalg.norm(recon[live], axis=1), np.linalg.norm(X[live], axis=1), rtol=0, atol=1e-9)


def test_shape_mismatch():
    arch = AEArch.linear(4, 2)
    with pytest.raises(ValueError):
        ae_forward(init_params(arch, 0), arch, np.ones((3, 5)))


def test_arch_validation():
    with pytest.raises(ValueError):
        AEArch.mlp(4, 2, (3,), activation="relu6")
    with pytest.raises(ValueError):
        AEArch(4, 2, ((3, "identity"),), ((4, "identity"),))


def test_arch_dict_round_trip():
    arch = AEArch.mlp(10, 3, (8, 6), "tanh", preserve_norm=True, bias=False)
    assert AEArch.from_dict(arch.to_dict()) == arch
    assert arch.decoder_param_count() == 3 * 6 + 6 * 8 + 8 * 10


# -- loss ------------------------------------------------------------------

def test_loss_examples():
    X = np.random.default_rng(4).standard_normal((3, 4))
    assert loss_eval(LossSpec(0.0), X, X) == 0.0
    assert loss_eval(LossSpec(1.0), [[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(1.0)
    assert loss_eval(LossSpec(0.5), [[0, 0, 0, 2.0]], [[0, 0, 0, 1.0]]) == pytest.approx(0.25, abs=1e-15)


def test_beta_out_of_range():
    with pytest.raises(ValueError):
        LossSpec(1.5)


def test_uniform_weights_equal_unweighted():
    rng = np.random.default_rng(5)
    X, Y = rng.standard_normal((2, 10, 4))
    plain = loss_eval(LossSpec(0.3), X, Y)
    assert loss_eval(LossSpec(0.3, np.ones(10)), X, Y) == pytest.approx(plain, rel=1e-14)
    assert loss_eval(LossSpec(0.3, np.full(10, 7.0), True), X, Y) == pytest.approx(plain, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=20))
def test_batch_norm_weights_have_mean_one(w):
    out = batch_weights(LossSpec(0.0, np.array(w), True), len(w))
    assert out.mean() == pytest.approx(1.0, rel=1e-12)


def test_batch_norm_all_equal_is_exact_ones():
    out = batch_weights(LossSpec(0.0, np.full(7, 0.1), True), 7)
    assert np.array_equal(out, np.ones(7))


# -- gradients -------------------------------------------------------------

@pytest.mark.parametrize("arch", list(arch_variants()),
                         ids=lambda a: f"{a.encoder_spec}-norm{int(a.preserve_norm)}")
def test_gradient_matches_finite_differences(arch):
    for spec in loss_variants():
        params, X = random_case(7, arch)
        assert max_rel_error(params, arch, spec, X) <= 1e-5


def test_gradient_vanishes_at_svd_solution():
    X = np.random.default_rng(8).standard_normal((40, 10))
    f = truncated_svd(X, 3)
    arch = AEArch.linear(10, 3, bias=False)
    params = {"enc.0.w": f.V.copy(), "dec.0.w": f.V.T.copy()}
    grads = backward(params, arch, LossSpec(0.0), X)
    assert max(np.abs(g).max() for g in grads.values()) <= 1e-8


@pytest.mark.parametrize("beta", [0.0, 0.4, 1.0])
def test_gradient_linear_in_loss_scale(beta):
    arch = AEArch.mlp(8, 3, (6,), "tanh", preserve_norm=True)
    params, X = random_case(9, arch)
    spec = LossSpec(beta, np.linspace(0.5, 2.0, 16), True)
    g1 = backward(params, arch, spec, X)
    g2 = backward(params, arch, spec, X, scale=2.0)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-14, atol=0)


def test_backward_shapes():
    arch = AEArch.mlp(8, 3, (6, 5), "leaky_relu")
    params, X = random_case(10, arch)
    grads = backward(params, arch, LossSpec(0.5), X)
    assert {k: v.shape for k, v in grads.items()} == {k: v.shape for k, v in params.items()}


# -- training --------------------------------------------------------------

FAST = TrainConfig(learning_rate=1e-2, batch_size=32, max_steps=20000, patience=10, eval_every=50)


def test_train_rank_one_exact():
    rng = np.random.default_rng(11)
    X = np.outer(rng.standard_normal(32), rng.standard_normal(16))
    arch = AEArch.linear(16, 1)
    params, rep = train(X, arch, LossSpec(0.0), FAST)
    assert rmse(X, ae_forward(params, arch, X)[1]) <= 1e-4


def test_train_full_rank_identity():
    X = np.random.default_rng(12).standard_normal((32, 6))
    arch = AEArch.linear(6, 6)
    params, _ = train(X, arch, LossSpec(0.0), FAST)
    assert rmse(X, ae_forward(params, arch, X)[1]) <= 1e-4


def test_train_deterministic():
    X = np.random.default_rng(13).standard_normal((50, 8))
    arch = AEArch.mlp(8, 2, (5,), "tanh")
    cfg = TrainConfig(learning_rate=1e-2, batch_size=16, max_steps=300, eval_every=20)
    p1, r1 = train(X, arch, LossSpec(0.5), cfg)
    p2, r2 = train(X, arch, LossSpec(0.5), cfg)
    assert r1.to_json() == r2.to_json()
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)


def test_best_loss_monotone_in_steps():
    X = np.random.default_rng(14).standard_normal((60, 8))
    arch = AEArch.linear(8, 2)
    best = [train(X, arch, LossSpec(0.2), TrainConfig(learning_rate=5e-3, batch_size=16, max_steps=s,
                                                       eval_every=10, patience=1000))[1].best_loss
            for s in (10, 40, 160, 640)]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))


def test_uniform_fisher_with_bn_matches_unweighted_trajectory():
    X = np.random.default_rng(15).standard_normal((40, 8))
    arch = AEArch.linear(8, 3)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, max_steps=200, eval_every=20)
    p_plain, r_plain = train(X, arch, LossSpec(0.3), cfg)
    p_fish, r_fish = train(X, arch, LossSpec(0.3, np.full(40, 0.37), True), cfg)
    assert r_plain.loss_curve == r_fish.loss_curve
    assert all(np.array_equal(p_plain[k], p_fish[k]) for k in p_plain)


def test_report_excludes_timing_by_default():
    X = np.random.default_rng(16).standard_normal((10, 4))
    _, rep = train(X, AEArch.linear(4, 1), LossSpec(0.0), TrainConfig(max_steps=20, eval_every=5))
    assert "wall_time" not in rep.to_dict()
    assert rep.wall_time > 0


def test_divergence_names_step():
    X = np.random.default_rng(17).standard_normal((10, 4))
    arch = AEArch.linear(4, 2)
    init = init_params(arch, 0)
    init["dec.0.w"][0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as exc:
        train(X, arch, LossSpec(0.0), TrainConfig(max_steps=20), init=init)
    assert exc.value.step == 0
    assert "step 0" in str(exc.value)


def test_row_weight_length_checked():
    with pytest.raises(ValueError):
        train(np.ones((5, 3)), AEArch.linear(3, 1), LossSpec(0.0, np.ones(4)), TrainConfig(max_steps=1))
