import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cankd import autograd as ag
from cankd.autograd import Tensor, grad_check
from cankd.can import (
    AffinityKind,
    CanBlockParams,
    ChannelAligner,
    affinity_matrix,
    align_channels,
    can_block,
    can_operation,
)
from cankd.errors import ConfigInvalid, GaussianChannelMismatch, ShapeMismatch, SpatialMismatch
from cankd.oracle import oracle_can_block, oracle_can_operation

KINDS = list(AffinityKind)


def random_params(rng, c, kind, pool=1, residual=True, d=None, zero_wz=False) -> CanBlockParams:
    p = CanBlockParams.init(c, rng, kind, embed_dim=d, pool_scale=pool, residual=residual)
    if not zero_wz:
        p.w_z.data[:] = rng.normal(size=p.w_z.shape)
    return p


def oracle_weights(p: CanBlockParams) -> dict:
    return {k: v.data for k, v in p.parameters().items()}


def eye_param(n=1):
    return Tensor(np.eye(n), requires_grad=True)


# --- affinity ---------------------------------------------------------------


def test_gaussian_affinity_of_zeros_is_uniform():
    aff = affinity_matrix(Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2))), "gaussian")
    assert aff.normalization == "softmax"
    np.testing.assert_allclose(aff.matrix.data, np.full((3, 4), 0.25), atol=1e-15)


def test_dot_product_affinity_scalar():
    aff = affinity_matrix(Tensor([[2.0]]), Tensor([[3.0]]), AffinityKind.DOT_PRODUCT)
    assert aff.matrix.data.tolist() == [[6.0]]
    assert aff.normalization == "count"


def test_embedded_gaussian_is_softmax_of_dots():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    got = affinity_matrix(Tensor(x), Tensor(y), "embedded_gaussian").matrix.data
    e = np.exp(x @ y.T)
    np.testing.assert_allclose(got, e / e.sum(axis=1, keepdims=True), rtol=0, atol=1e-12)


def test_affinity_width_mismatch():
    with pytest.raises(ShapeMismatch):
        affinity_matrix(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 4))), "dot_product")
    with pytest.raises(GaussianChannelMismatch):
        affinity_matrix(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 4))), "gaussian")


@pytest.mark.parametrize("kind", ["gaussian", "embedded_gaussian"])
def test_softmax_affinity_invariant_to_uniform_row_shift(kind):
    # adding v to every key shifts row i by x_i . v, the same for all j
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    v = rng.normal(size=3)
    a = affinity_matrix(Tensor(x), Tensor(y), kind).matrix.data
    b = affinity_matrix(Tensor(x), Tensor(y + v), kind).matrix.data
    assert np.max(np.abs(a - b)) < 1e-10


# --- params -----------------------------------------------------------------


def test_gaussian_forbids_embeddings():
    with pytest.raises(ConfigInvalid):
        CanBlockParams(w_g=eye_param(2), w_z=eye_param(2), w_theta=eye_param(2), w_phi=eye_param(2),
                       affinity="gaussian")


def test_embedded_kinds_require_embeddings():
    with pytest.raises(ConfigInvalid):
        CanBlockParams(w_g=eye_param(2), w_z=eye_param(2), affinity="dot_product")


def test_bad_pool_scale():
    with pytest.raises(ConfigInvalid):
        CanBlockParams.init(2, np.random.default_rng(0), pool_scale=3)


def test_default_embed_dim_is_channel_count_and_wz_zero():
    p = CanBlockParams.init(5, np.random.default_rng(0))
    assert p.embed_dim == 5
    assert not p.w_z.data.any()
    assert np.all(np.abs(p.w_g.data) <= np.sqrt(1 / 5))


# --- can operation ----------------------------------------------------------


def test_hand_case_gives_18():
    p = CanBlockParams(w_g=eye_param(), w_z=eye_param(), w_theta=eye_param(), w_phi=eye_param(),
                       affinity="dot_product", pool_scale=1)
    z = can_operation(Tensor([[[2.0]]]), Tensor([[[3.0]]]), p)
    assert z.data.tolist() == [[[18.0]]]


def test_gaussian_with_constant_teacher_ignores_student():
    rng = np.random.default_rng(2)
    p = random_params(rng, 3, "gaussian")
    c = np.array([0.5, -1.0, 2.0])
    f_t = np.broadcast_to(c[:, None, None], (3, 4, 4)).copy()
    expected = p.w_g.data @ c
    for _ in range(2):
        z = can_operation(Tensor(rng.normal(size=(3, 4, 4))), Tensor(f_t), p).data
        np.testing.assert_allclose(z, np.broadcast_to(expected[:, None, None], z.shape), atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("pool", [1, 2])
def test_can_operation_matches_oracle(kind, pool):
    rng = np.random.default_rng(7)
    p = random_params(rng, 2, kind, pool)
    f_s, f_t = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    got = can_operation(Tensor(f_s), Tensor(f_t), p).data
    w = oracle_weights(p)
    want = oracle_can_operation(f_s, f_t, w["w_g"], w.get("w_theta"), w.get("w_phi"), kind.value, pool)
    assert np.max(np.abs(got - want)) < 1e-10


def test_embed_dim_other_than_channels():
    rng = np.random.default_rng(8)
    p = random_params(rng, 4, "dot_product", pool=2, d=2)
    f_s, f_t = rng.normal(size=(4, 5, 5)), rng.normal(size=(4, 5, 5))
    got = can_block(Tensor(f_s), Tensor(f_t), p).data
    want = oracle_can_block(f_s, f_t, affinity="dot_product", pool_scale=2, **oracle_weights(p))
    assert np.max(np.abs(got - want)) < 1e-10


def test_batched_equals_per_sample():
    rng = np.random.default_rng(9)
    p = random_params(rng, 3, "embedded_gaussian", pool=2)
    f_s, f_t = rng.normal(size=(4, 3, 6, 6)), rng.normal(size=(4, 3, 6, 6))
    batched = can_block(Tensor(f_s), Tensor(f_t), p).data
    for b in range(4):
        single = can_block(Tensor(f_s[b]), Tensor(f_t[b]), p).data
        assert np.max(np.abs(batched[b] - single)) < 1e-12


def test_spatial_mismatch_is_an_error():
    p = random_params(np.random.default_rng(0), 2, "dot_product")
    with pytest.raises(SpatialMismatch):
        can_operation(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((2, 4, 5))), p)


def test_gaussian_channel_mismatch():
    p = random_params(np.random.default_rng(0), 2, "gaussian")
    with pytest.raises(GaussianChannelMismatch):
        can_operation(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((3, 4, 4))), p)


def test_dot_product_is_quadratic_in_teacher_scale():
    rng = np.random.default_rng(10)
    p = random_params(rng, 3, "dot_product", pool=2)
    f_s, f_t = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    k = 2.5
    z1 = can_operation(Tensor(f_s), Tensor(f_t), p).data
    zk = can_operation(Tensor(f_s), Tensor(k * f_t), p).data
    assert np.max(np.abs(zk - k * k * z1)) < 1e-10


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("s", [2, 4])
def test_pooling_lossless_on_blockwise_constant_teacher(kind, s):
    rng = np.random.default_rng(11)
    coarse = rng.normal(size=(3, 2, 2))
    f_t = np.repeat(np.repeat(coarse, s, axis=1), s, axis=2)
    f_s = rng.normal(size=f_t.shape)
    p1 = random_params(rng, 3, kind, pool=1)
    ps = CanBlockParams(**{**p1.__dict__, "pool_scale": s})
    z1 = can_operation(Tensor(f_s), Tensor(f_t), p1).data
    zs = can_operation(Tensor(f_s), Tensor(f_t), ps).data
    assert np.max(np.abs(z1 - zs)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["gaussian", "embedded_gaussian"]), st.sampled_from([1, 2, 4]))
def test_softmax_attention_rows_sum_to_one(seed, kind, pool):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 3, kind, pool)
    f_s, f_t = Tensor(rng.normal(size=(3, 5, 5))), Tensor(rng.normal(size=(3, 5, 5)))
    q = f_s if kind == "gaussian" else ag.conv1x1(f_s, p.w_theta)
    k = f_t if kind == "gaussian" else ag.conv1x1(f_t, p.w_phi)
    if pool > 1:
        k = ag.maxpool2d(k, pool)
    flat = lambda t: ag.transpose2d(ag.reshape(t, (t.shape[0], -1)))  # noqa: E731
    rows = affinity_matrix(flat(q), flat(k), kind).matrix.data
    assert np.all(np.abs(rows.sum(axis=1) - 1.0) <= 1e-12)


# --- can block --------------------------------------------------------------


def test_zero_wz_with_residual_is_identity():
    rng = np.random.default_rng(12)
    p = random_params(rng, 3, "dot_product", pool=2, zero_wz=True)
    f_s = rng.normal(size=(3, 4, 4))
    out = can_block(Tensor(f_s), Tensor(rng.normal(size=(3, 4, 4))), p).data
    np.testing.assert_array_equal(out, f_s)


def test_zero_wz_without_residual_is_zero():
    rng = np.random.default_rng(13)
    p = random_params(rng, 3, "gaussian", residual=False, zero_wz=True)
    out = can_block(Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 4, 4))), p).data
    assert not out.any()


@pytest.mark.parametrize("kind", KINDS)
def test_residual_difference_is_student_map(kind):
    rng = np.random.default_rng(14)
    on = random_params(rng, 3, kind, pool=2, residual=True)
    off = CanBlockParams(**{**on.__dict__, "residual": False})
    f_s, f_t = rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 5, 5))
    a = can_block(Tensor(f_s), Tensor(f_t), on).data
    b = can_block(Tensor(f_s), Tensor(f_t), off).data
    # the residual arm is exactly the no-residual arm plus F_S, bit for bit
    np.testing.assert_array_equal(a, b + f_s)
    # so the difference recovers F_S up to the rounding of that one addition
    assert np.max(np.abs((a - b) - f_s)) <= 4 * np.finfo(float).eps * np.max(np.abs(a))


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("pool", [1, 2])
def test_can_block_gradients(seed, kind, pool):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 2, kind, pool)
    f_s = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    f_t = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    probe = Tensor(rng.normal(size=(2, 3, 4)))
    params = {**p.parameters(), "f_s": f_s, "f_t": f_t}
    rep = grad_check(lambda: ag.reduce_sum(ag.mul(can_block(f_s, f_t, p), probe)), params, tol=1e-5)
    assert rep.passed, rep


# --- aligner ----------------------------------------------------------------


def test_identity_aligner():
    x = np.random.default_rng(0).normal(size=(3, 2, 2))
    out = align_channels(Tensor(x), ChannelAligner(Tensor(np.eye(3))))
    np.testing.assert_array_equal(out.data, x)


def test_aligner_two_to_three_channels():
    al = ChannelAligner(Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    out = align_channels(Tensor(np.ones((2, 3, 3))), al).data
    assert out.shape == (3, 3, 3)
    np.testing.assert_array_equal(out[:, 0, 0], [1.0, 1.0, 2.0])
    assert np.all(out == out[:, :1, :1])


def test_aligner_matches_matmul_reshape():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(4, 3, 5)), rng.normal(size=(6, 4))
    out = align_channels(Tensor(x), ChannelAligner(Tensor(w))).data
    ref = (w @ x.reshape(4, -1)).reshape(6, 3, 5)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_aligner_gradients_reach_weights_and_input():
    rng = np.random.default_rng(5)
    al = ChannelAligner.init(2, 3, rng)
    x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    probe = Tensor(rng.normal(size=(3, 3, 3)))
    rep = grad_check(lambda: ag.reduce_sum(ag.mul(align_channels(x, al), probe)), {"w": al.w_align, "x": x})
    assert rep.passed


def test_aligner_wrong_input_channels():
    with pytest.raises(ShapeMismatch):
        align_channels(Tensor(np.ones((4, 2, 2))), ChannelAligner(Tensor(np.ones((3, 2)))))
