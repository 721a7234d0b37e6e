"""Cross-checks between the loop references and the vectorised implementation."""

import ast
import itertools
import math
from pathlib import Path

import numpy as np
import pytest

import cankd.oracle as oracle_mod
from cankd.autograd import Tensor
from cankd.can import CanBlockParams, can_block
from cankd.distill import DistillConfig, InstanceNormConfig, feature_loss, instance_norm, total_loss
from cankd.oracle import (
    compare,
    oracle_attention_rows,
    oracle_can_block,
    oracle_can_operation,
    oracle_feature_loss,
    oracle_instance_norm,
    oracle_total_loss,
)

KINDS = ["dot_product", "gaussian", "embedded_gaussian"]


def _weights(p: CanBlockParams) -> dict:
    out = {"w_g": p.w_g.data, "w_z": p.w_z.data}
    if p.w_theta is not None:
        out["w_theta"] = p.w_theta.data
        out["w_phi"] = p.w_phi.data
    return out


def _random_case(rng, kind, pool, residual, c=None, h=None, w=None):
    c = c or int(rng.integers(1, 5))
    h = h or int(rng.integers(1, 7))
    w = w or int(rng.integers(1, 7))
    p = CanBlockParams.init(c, rng, kind, embed_dim=int(rng.integers(1, 5)) if kind != "gaussian" else None,
                            pool_scale=pool, residual=residual)
    p.w_z.data[:] = rng.normal(size=(c, c))
    f_s, f_t = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))
    return p, f_s, f_t


def test_oracle_module_imports_nothing_from_package():
    tree = ast.parse(Path(oracle_mod.__file__).read_text())
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            assert node.level == 0 and not (node.module or "").startswith("cankd")
        elif isinstance(node, ast.Import):
            assert all(not a.name.startswith("cankd") for a in node.names)


def test_hand_case_18():
    one = np.ones((1, 1))
    z = oracle_can_operation(np.array([[[2.0]]]), np.array([[[3.0]]]), one, one, one)
    assert z.tolist() == [[[18.0]]]
    p = CanBlockParams(w_g=Tensor(one), w_z=Tensor(one), w_theta=Tensor(one), w_phi=Tensor(one),
                       pool_scale=1, residual=False)
    assert can_block(Tensor([[[2.0]]]), Tensor([[[3.0]]]), p).item() == 18.0


@pytest.mark.parametrize(
    "kind,pool,residual,seed", list(itertools.product(KINDS, [1, 2, 4], [True, False], [0, 1, 2]))
)
def test_full_grid_agreement(kind, pool, residual, seed):
    rng = np.random.default_rng(1000 * seed + pool)
    # 5x6 exercises ragged pooling windows at scale 2 and 4
    p, f_s, f_t = _random_case(rng, kind, pool, residual, h=5, w=6)
    got = can_block(Tensor(f_s), Tensor(f_t), p).data
    want = oracle_can_block(f_s, f_t, affinity=kind, pool_scale=pool, residual=residual, **_weights(p))
    rep = compare(f"{kind}/{pool}/{residual}/{seed}", got, want, 1e-10)
    assert rep.passed, rep


def test_thirty_random_configurations():
    rng = np.random.default_rng(2024)
    reports = []
    for i in range(30):
        kind = KINDS[i % 3]
        pool = int(rng.choice([1, 2, 4, 8]))
        residual = bool(rng.integers(0, 2))
        p, f_s, f_t = _random_case(rng, kind, pool, residual)
        got = can_block(Tensor(f_s), Tensor(f_t), p).data
        want = oracle_can_block(f_s, f_t, affinity=kind, pool_scale=pool, residual=residual, **_weights(p))
        reports.append(compare(f"case{i}", got, want, 1e-10))
    assert all(r.passed for r in reports), [r for r in reports if not r.passed]


@pytest.mark.parametrize("kind", ["gaussian", "embedded_gaussian"])
def test_softmax_rows_sum_to_one(kind):
    rng = np.random.default_rng(9)
    p, f_s, f_t = _random_case(rng, kind, 2, True, c=3, h=6, w=6)
    w = _weights(p)
    rows = oracle_attention_rows(f_s, f_t, w.get("w_theta"), w.get("w_phi"), kind, 2)
    assert rows.shape == (36, 9)
    assert np.max(np.abs(rows.sum(axis=1) - 1.0)) < 1e-12


def test_instance_norm_oracle_cases():
    assert not oracle_instance_norm(np.full((1, 2, 2), 3.0)).any()
    v = (1 + 1e-5) ** -0.5
    np.testing.assert_allclose(oracle_instance_norm(np.array([[[1.0, 3.0]]])), [[[-v, v]]], atol=1e-15)
    f = np.random.default_rng(0).normal(size=(4, 5, 5))
    assert compare("in", instance_norm(Tensor(f), InstanceNormConfig()).data, oracle_instance_norm(f), 1e-10).passed


def test_loss_oracles():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert oracle_feature_loss(a, a) == 0.0
    assert abs(oracle_feature_loss(a, b) - feature_loss(Tensor(a), Tensor(b)).item()) < 1e-10
    assert oracle_total_loss(1.5, [0.3, 0.7], 0.0) == 1.5
    assert abs(oracle_total_loss(1.0, [0.2], 5.0) - 2.0) < 1e-15
    total, _ = total_loss(Tensor(0.9), [(Tensor(a), Tensor(b))], DistillConfig(mu=10.0, distill_levels=[0]))
    assert abs(total.item() - oracle_total_loss(0.9, [oracle_feature_loss(a, b)], 10.0)) < 1e-10


def test_compare_reports():
    assert compare("x", [1.0, 2.0], [1.0, 2.0 + 1e-12], 1e-10).passed
    bad = compare("y", [1.0], [1.5], 1e-10)
    assert not bad.passed and bad.max_abs_deviation == 0.5
    assert math.isinf(compare("z", [1.0], [1.0, 2.0], 1.0).max_abs_deviation)
