import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phishkd.evalbench import confusion, metrics
from phishkd.exceptions import ContractError, ParameterError
from phishkd.models import ModelConfig, TeacherLogits, build_student, build_teacher
from phishkd.numerics import Parameter, backward
from phishkd.training import (
    AdamState,
    DistillConfig,
    EncodedData,
    TrainConfig,
    adam_step,
    bce_loss,
    distill_loss,
    distill_train,
    kl_soft_loss,
    model_logits2,
    predict_proba,
    train,
)


def _toy(n=64, seed=0, prefix="s"):
    """Class 0 emails use ids 4..13, class 1 emails ids 14..23."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    seqs = [rng.integers(4 + 10 * c, 14 + 10 * c, size=rng.integers(3, 9)) for c in y]
    return EncodedData(seqs, y, [f"{prefix}{i}" for i in range(n)])


def _cfg(kind, **kw):
    base = dict(vocab_size=24, embed_dim=8, hidden=8, heads=2, head_dim=4, layers=1, max_len=16,
                ffn_dim=16, dropout=0.1)
    return ModelConfig(kind=kind, **{**base, **kw})


def _acc(model, data):
    return metrics(confusion((predict_proba(model, data) >= 0.5).astype(int), data.y)).accuracy


def test_bce_examples():
    assert float(bce_loss([0.5], [1]).data) == pytest.approx(math.log(2), abs=1e-15)
    assert float(bce_loss([1.0, 0.0], [1, 0]).data) == pytest.approx(0.0, abs=1e-11)
    a = float(bce_loss([0.2, 0.9, 0.4], [0, 1, 1]).data)
    assert a == pytest.approx(float(bce_loss([0.4, 0.2, 0.9], [1, 0, 1]).data), abs=1e-15)
    with pytest.raises(ContractError):
        bce_loss([0.5, 0.5], [1])


def test_kl_closed_form():
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    expected = float(np.sum(p * np.log(p / 0.5)))
    got = float(kl_soft_loss(np.array([[2.0, 0.0]]), np.array([[0.0, 0.0]]), 2.0).data)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.110944, abs=1e-6)


def test_kl_rejects_bad_tau():
    with pytest.raises(ParameterError):
        kl_soft_loss([[1.0, 0.0]], [[0.0, 0.0]], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_kl_nonnegative_and_zero_on_match(seed, tau):
    rng = np.random.default_rng(seed)
    zt, zs = rng.normal(scale=3, size=(1000, 2)), rng.normal(scale=3, size=(1000, 2))
    assert float(kl_soft_loss(zt, zs, tau).data) >= -1e-15
    assert abs(float(kl_soft_loss(zt, zt, tau).data)) <= 1e-12


def test_distill_loss_degenerate_cases():
    rng = np.random.default_rng(1)
    zs, zt, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), np.array([0, 1, 1, 0, 1, 0])
    lb = distill_loss(zs, zt, y, DistillConfig(alpha=1.0))
    assert lb.l_distill == lb.l_hard
    assert distill_loss(zs, zs, y, DistillConfig(alpha=0.0)).l_distill == pytest.approx(0.0, abs=1e-12)
    lb = distill_loss(zs, zt, y, DistillConfig(alpha=0.5, tau=2.0))
    assert lb.l_distill == pytest.approx(0.5 * lb.l_hard + 2.0 * lb.l_soft, abs=1e-12)
    assert float(lb.total.data) == pytest.approx(lb.l_distill, abs=1e-12)


def test_teacher_logits_get_no_gradient():
    zs = Parameter(np.random.default_rng(2).normal(size=(4, 2)))
    zt = Parameter(np.random.default_rng(3).normal(size=(4, 2)))
    g = backward(distill_loss(zs, zt, [0, 1, 0, 1], DistillConfig()).total, {"zs": zs, "zt": zt})
    assert not g["zt"].any() and g["zs"].any()


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(alpha=-0.1), dict(tau=0.0), dict(lr=0.0)])
def test_distill_config_ranges(kw):
    with pytest.raises(ParameterError):
        DistillConfig(**kw)


def test_train_config_ranges():
    with pytest.raises(ParameterError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)


def test_adam_zero_gradient_keeps_params():
    p = {"w": Parameter(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), TrainConfig())
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr():
    p = {"w": Parameter(np.array([1.0, -2.0, 0.5]))}
    adam_step(p, {"w": np.array([1e3, -1e3, 50.0])}, AdamState(), TrainConfig(lr=1e-3))
    np.testing.assert_allclose(p["w"].data, [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], rtol=0, atol=1e-10)


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step({"w": Parameter(np.zeros(2))}, {"w": np.zeros(3)}, AdamState(), TrainConfig())


def test_train_separates_toy_set():
    data = _toy()
    m = build_student(_cfg("bilstm"), seed=0)
    hist = train(m, data, TrainConfig(lr=1e-2, epochs=5, batch_size=8))
    losses = hist.epoch_losses()
    assert len(losses) == 5 and all(b < a for a, b in zip(losses, losses[1:]))
    assert _acc(m, data) >= 0.99


def test_train_zero_epochs_and_empty():
    m = build_student(_cfg("lstm"))
    before = m.state_dict()
    assert len(train(m, _toy(), TrainConfig(epochs=0))) == 0
    assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())
    with pytest.raises(ParameterError):
        train(m, EncodedData([], [], []), TrainConfig(epochs=1))


def test_train_rejects_overlapping_validation():
    data = _toy(16)
    with pytest.raises(ContractError):
        train(build_student(_cfg("lstm")), data, TrainConfig(epochs=1), val=data.subset(range(4)))


def test_train_keeps_partial_batch_and_logs_validation(tmp_path):
    data, val = _toy(20), _toy(10, seed=1, prefix="v")
    hist = train(build_student(_cfg("lstm")), data, TrainConfig(epochs=2, batch_size=8), val)
    assert len(hist) == 6
    assert hist.steps[2].val_acc is not None and hist.steps[0].val_acc is None
    path = tmp_path / "h.csv"
    hist.export_csv(path)
    assert path.read_text().splitlines()[0] == "epoch,step,l_hard,l_soft,l_distill,val_acc,val_f1"


def test_training_is_reproducible():
    data = _toy(24)
    runs = []
    for _ in range(2):
        m = build_student(_cfg("bilstm_mh"), seed=1)
        train(m, data, TrainConfig(lr=1e-2, epochs=2, batch_size=8, seed=5))
        runs.append(m.state_dict())
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


def _trained_teacher(data):
    t = build_teacher(_cfg("tiny_teacher"), seed=9)
    train(t, data, TrainConfig(lr=1e-2, epochs=5, batch_size=8))
    return t


def test_distill_freezes_teacher_and_keeps_identity():
    data = _toy(32)
    teacher = _trained_teacher(data)
    before = teacher.state_dict()
    hist = distill_train(build_student(_cfg("kd_student")), teacher, data, DistillConfig(lr=1e-2, epochs=2, batch_size=8))
    assert all(before[k].tobytes() == v.tobytes() for k, v in teacher.state_dict().items())
    for s in hist.steps:
        assert abs(s.l_distill - (0.5 * s.l_hard + 2.0 * s.l_soft)) <= 1e-12


def test_distill_alpha_one_matches_plain_training():
    data = _toy(24)
    teacher = build_teacher(_cfg("tiny_teacher"), seed=9)
    a, b = build_student(_cfg("kd_student"), seed=2), build_student(_cfg("kd_student"), seed=2)
    h1 = distill_train(a, teacher, data, DistillConfig(alpha=1.0, lr=1e-3, epochs=2, batch_size=8, seed=4))
    h2 = train(b, data, TrainConfig(lr=1e-3, epochs=2, batch_size=8, seed=4))
    assert [s.l_hard for s in h1.steps] == [s.l_hard for s in h2.steps]
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_distill_from_logit_table():
    data = _toy(16)
    table = TeacherLogits({i: (0.0, 3.0 if y else -3.0) for i, y in zip(data.ids, data.y)})
    hist = distill_train(build_student(_cfg("kd_student")), table, data, DistillConfig(epochs=1, batch_size=8))
    assert len(hist) == 2
    with pytest.raises(ContractError, match="missing"):
        distill_train(build_student(_cfg("kd_student")), TeacherLogits({}), data, DistillConfig(epochs=1))


def test_distill_vocab_mismatch():
    data = _toy(8)
    with pytest.raises(ContractError):
        distill_train(build_student(_cfg("kd_student")), build_teacher(_cfg("tiny_teacher", vocab_size=30)),
                      data, DistillConfig(epochs=1))


def test_distill_matches_or_beats_hard_labels():
    data, val = _toy(48), _toy(32, seed=7, prefix="v")
    teacher = _trained_teacher(data)
    budget = dict(lr=1e-2, epochs=2, batch_size=8)
    kd, hard = [], []
    for seed in range(5):
        s = build_student(_cfg("kd_student"), seed=seed)
        distill_train(s, teacher, data, DistillConfig(seed=seed, **budget))
        kd.append(metrics(confusion((predict_proba(s, val) >= 0.5).astype(int), val.y)).f1)
        h = build_student(_cfg("kd_student"), seed=seed)
        train(h, data, TrainConfig(seed=seed, **budget))
        hard.append(metrics(confusion((predict_proba(h, val) >= 0.5).astype(int), val.y)).f1)
    assert np.mean(kd) >= np.mean(hard)


def test_model_logits2_shapes():
    data = _toy(5)
    assert model_logits2(build_student(_cfg("lstm")), data).shape == (5, 2)
    assert model_logits2(build_teacher(_cfg("tiny_teacher")), data).shape == (5, 2)
