"""Architectures: shape plans, parameter naming, freezing and determinism."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from factortransfer import functional as F
from factortransfer.errors import ConfigurationError, DimensionError
from factortransfer.losses import factor_transfer_loss
from factortransfer.nn import (build_from_arch, build_paraphraser, build_student, build_teacher,
                               build_translator, extract_factor, factor_channels, forward_collect)
from factortransfer.tensor import Tensor, backward, no_grad, tsum


@pytest.fixture(scope="module")
def teacher():
    return build_teacher(3, 16, 10, seed=0)


def test_teacher_shape_plan(teacher):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 32, 32)))
    logits, groups = forward_collect(teacher, x)
    assert logits.shape == (2, 10)
    assert {k: v.shape for k, v in groups.items()} == {
        "g1": (2, 16, 32, 32), "g2": (2, 32, 16, 16), "g3": (2, 64, 8, 8)}


def test_teacher_has_more_parameters_than_student(teacher):
    assert teacher.num_parameters() > build_student(1, 16, 10).num_parameters()


def test_zero_input_in_eval_mode_is_finite(teacher):
    out = teacher.eval()(Tensor(np.zeros((1, 3, 32, 32))))
    teacher.train()
    assert np.isfinite(out.data).all()


def test_student_matches_teacher_spatial_dims(teacher):
    assert build_student(1, 16, 10).group_shapes["g3"] == teacher.group_shapes["g3"]
    assert build_student(3, 8, 10).group_shapes["g3"] == (32, 8, 8)


def test_student_softmax_rows_sum_to_one():
    logits = build_student(1, 8, 10)(Tensor(np.random.default_rng(1).random((3, 3, 32, 32))))
    np.testing.assert_allclose(F.softmax_t(logits).data.sum(axis=1), np.ones(3), atol=1e-6)


@pytest.mark.parametrize("args", [(0, 16, 10), (1, 4, 10), (1, 16, 1)])
def test_invalid_sizes_rejected(args):
    with pytest.raises(ConfigurationError):
        build_teacher(*args)


def test_parameter_names_unique_and_structured(teacher):
    names = [n for n, _ in teacher.named_parameters()]
    assert len(names) == len(set(names))
    assert "g1.0.conv1.weight" in names
    assert "head.2.weight" in names


def test_same_seed_same_initialisation():
    a, b = build_student(1, 8, 4, seed=7), build_student(1, 8, 4, seed=7)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()
    c = build_student(1, 8, 4, seed=8)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters().values(),
                                                                 c.parameters().values()))


def test_eval_forward_is_deterministic(teacher):
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 32, 32)))
    teacher.eval()
    first, second = teacher(x).data, teacher(x).data
    teacher.train()
    assert first.tobytes() == second.tobytes()


def test_input_shape_mismatch(teacher):
    with pytest.raises(DimensionError):
        teacher(Tensor(np.zeros((1, 1, 32, 32))))


# -- paraphraser and translator ---------------------------------------------------

@pytest.mark.parametrize("k,expected", [(0.5, 32), (0.75, 48), (1, 64), (2, 128), (4, 256)])
def test_factor_channels(k, expected):
    assert factor_channels(64, k) == expected


def test_factor_channels_round_half_up_and_lower_bound():
    assert factor_channels(5, 0.5) == 3
    assert factor_channels(3, Fraction(1, 2)) == 2
    with pytest.raises(ConfigurationError):
        factor_channels(4, 0.1)


def test_paraphraser_shapes():
    para = build_paraphraser(64, 0.5)
    x = Tensor(np.random.default_rng(3).standard_normal((2, 64, 8, 8)))
    factor = para.run_until("encoder", x)
    assert factor.shape == (2, 32, 8, 8)
    assert para(x).shape == (2, 64, 8, 8)


@given(st.integers(1, 12), st.sampled_from([0.25, 0.5, 0.75, 1, 2]), st.integers(2, 5))
def test_paraphraser_and_translator_shape_invariants(m, k, hw):
    assume(m * k >= 0.5)
    para = build_paraphraser(m, k, (hw, hw))
    trans = build_translator(3, m, k, (hw, hw))
    x = Tensor(np.ones((1, m, hw, hw)))
    factor = para.run_until("encoder", x)
    assert para(x).shape == x.shape
    assert factor.shape == (1, factor_channels(m, k), hw, hw)
    assert trans(Tensor(np.ones((1, 3, hw, hw)))).shape == factor.shape


def test_translator_shapes_and_presence():
    trans = build_translator(32, 64, 0.5)
    assert trans(Tensor(np.ones((1, 32, 8, 8)))).shape == (1, 32, 8, 8)
    same = build_translator(64, 64, 1)
    assert same.num_parameters() > 0
    assert len(same.groups["translator"]) == 5


def test_translator_spatial_mismatch_message():
    with pytest.raises(ConfigurationError, match="stride plan"):
        build_translator(32, 64, 0.5, (8, 8), teacher_spatial=(4, 4))


def test_frozen_paraphraser_gets_no_gradient_and_translator_does():
    rng = np.random.default_rng(4)
    para = build_paraphraser(8, 0.5, (4, 4), seed=1)
    trans = build_translator(8, 8, 0.5, (4, 4), seed=2)
    teacher_feat = Tensor(rng.standard_normal((2, 8, 4, 4)), requires_grad=True)
    student_feat = Tensor(rng.standard_normal((2, 8, 4, 4)), requires_grad=True)
    ft = extract_factor(para, teacher_feat, frozen=True)
    fs = extract_factor(trans, student_feat, frozen=False)
    backward(factor_transfer_loss(ft, fs, 1))
    assert all(p.grad is None for p in para.parameters().values())
    assert teacher_feat.grad is None
    assert all(np.abs(p.grad).sum() > 0 for n, p in trans.named_parameters() if n.endswith("weight"))
    assert np.abs(student_feat.grad).sum() > 0


def test_factor_of_zero_map_without_bias_is_zero():
    para = build_paraphraser(8, 0.5, (4, 4), seed=1)
    for name, p in para.named_parameters():
        if name.endswith("bias"):
            p.data[...] = 0
    with no_grad():
        factor = extract_factor(para, Tensor(np.zeros((1, 8, 4, 4))), frozen=True)
    np.testing.assert_array_equal(factor.data, 0)


def test_group_features_chain_into_paraphraser(teacher):
    _, groups = teacher.forward_collect(Tensor(np.zeros((1, 3, 32, 32))))
    para = build_paraphraser(64, 0.5)
    assert para(groups["g3"]).shape == (1, 64, 8, 8)


def test_build_from_arch_roundtrip():
    for net in (build_student(1, 8, 4, (3, 16, 16)), build_paraphraser(16, 0.75, (4, 4)),
                build_translator(8, 16, 2, (4, 4))):
        rebuilt = build_from_arch(net.arch)
        assert rebuilt.identifier == net.identifier
        assert [n for n, _ in rebuilt.named_parameters()] == [n for n, _ in net.named_parameters()]
    with pytest.raises(ConfigurationError):
        build_from_arch({"kind": "mystery"})


def test_stride_two_block_backward_runs():
    net = build_student(1, 8, 3, (3, 8, 8))
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 8, 8)))
    backward(tsum(net(x)))
    assert all(p.grad is not None for p in net.parameters().values())
