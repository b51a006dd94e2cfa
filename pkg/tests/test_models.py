import io

import numpy as np
import pytest

from phishkd.exceptions import ContractError, ParameterError
from phishkd.models import (
    KINDS,
    STUDENT_KINDS,
    ModelConfig,
    TeacherLogits,
    build_model,
    build_student,
    build_teacher,
    default_config,
    load_model,
    load_teacher_logits,
    param_count,
    transfer_embeddings,
    trunk_param_count,
)
from phishkd.training import EncodedData, TrainConfig, train


def _small(kind, **kw):
    base = dict(vocab_size=50, embed_dim=8, hidden=6, heads=2, head_dim=4, layers=1, max_len=16, ffn_dim=12)
    return ModelConfig(kind=kind, **{**base, **kw})


def _batch(seed=0, B=4, T=7, vocab=50):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, vocab, size=(B, T))
    ids[0, 5:] = 0
    return ids


def test_kd_student_default_count():
    n = param_count(build_student(default_config("kd_student")))
    assert 4_200_000 <= n <= 4_800_000
    assert n == 4_365_825


def test_teacher_default_count_and_trunk():
    teacher = build_teacher(default_config("tiny_teacher"))
    student = build_student(default_config("kd_student"))
    assert param_count(teacher) < 2_000_000
    assert trunk_param_count(student) < trunk_param_count(teacher)


def test_lstm_closed_form_count():
    i, h = 100, 128
    m = build_student(ModelConfig(kind="lstm", vocab_size=10, embed_dim=i, hidden=h))
    lstm = sum(t.size for k, t in m.params.items() if k.startswith("lstm."))
    assert lstm == 4 * ((i + h) * h + h)
    assert param_count(m) == 10 * i + lstm + (h + 1)


def test_invalid_kinds():
    with pytest.raises(ParameterError):
        ModelConfig(kind="gru")
    with pytest.raises(ParameterError):
        build_student(_small("tiny_teacher"))
    with pytest.raises(ParameterError):
        build_teacher(_small("lstm"))


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_same_init(kind):
    a, b = build_model(_small(kind), seed=3), build_model(_small(kind), seed=3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = build_model(_small(kind), seed=4)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


@pytest.mark.parametrize("kind", STUDENT_KINDS)
def test_student_probabilities(kind):
    p = build_student(_small(kind)).predict_proba(_batch())
    assert p.shape == (4,) and np.all((p > 0) & (p < 1))


def test_eval_forward_deterministic():
    m = build_teacher(_small("tiny_teacher"))
    ids = _batch()
    np.testing.assert_array_equal(m.forward(ids).data, m.forward(ids).data)
    assert m.forward(ids).shape == (4, 2)


def test_teacher_without_layers():
    m = build_teacher(_small("tiny_teacher", layers=0))
    assert not any(k.startswith("block") for k in m.params)
    assert m.forward(_batch()).shape == (4, 2)


def test_teacher_rejects_long_input():
    with pytest.raises(ParameterError):
        build_teacher(_small("tiny_teacher")).forward(np.ones((1, 17), dtype=int))


def test_student_two_logit_view():
    m = build_student(_small("bilstm_mh"))
    ids = _batch()
    z = m.logits2(ids).data
    assert not z[:, 0].any()
    np.testing.assert_allclose(1 / (1 + np.exp(-z[:, 1])), m.predict_proba(ids), rtol=0, atol=1e-15)


def test_padding_id_out_of_range():
    with pytest.raises(ParameterError):
        build_student(_small("lstm")).forward(np.array([[60]]))


def test_train_mode_needs_rng():
    m = build_student(_small("lstm")).train()
    with pytest.raises(ParameterError):
        m.forward(_batch())


def test_transfer_embeddings():
    teacher = build_teacher(_small("tiny_teacher"), seed=1)
    student = build_student(_small("kd_student"), seed=2)
    transfer_embeddings(student, teacher)
    assert student.params["embed.table"].data.tobytes() == teacher.params["embed.table"].data.tobytes()
    with pytest.raises(ContractError, match=r"\(50, 8\).*\(50, 10\)"):
        transfer_embeddings(student, build_teacher(_small("tiny_teacher", embed_dim=10)))
    with pytest.raises(ContractError):
        transfer_embeddings(student, build_teacher(_small("tiny_teacher", vocab_size=40)))


def test_frozen_table_survives_training():
    teacher = build_teacher(_small("tiny_teacher"), seed=1)
    student = build_student(_small("kd_student", dropout=0.0), seed=2)
    transfer_embeddings(student, teacher, freeze=True)
    before = student.params["embed.table"].data.copy()
    ids = _batch(B=8)
    data = EncodedData([row[row != 0] for row in ids], [0, 1] * 4, [str(i) for i in range(8)])
    train(student, data, TrainConfig(lr=1e-2, epochs=1, batch_size=4))
    np.testing.assert_array_equal(student.params["embed.table"].data, before)
    assert not np.array_equal(student.params["head.W"].data, build_student(_small("kd_student"), 2).params["head.W"].data)


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip_is_bitwise(kind):
    m = build_model(_small(kind), seed=5)
    buf = io.BytesIO()
    m.save(buf)
    buf.seek(0)
    loaded = load_model(buf)
    ids = _batch(1)
    assert loaded.forward(ids).data.tobytes() == m.forward(ids).data.tobytes()
    assert loaded.cfg == m.cfg


def test_teacher_logits_round_trip(tmp_path):
    tl = TeacherLogits({"a": (0.25, -1.5), "b": (1.0, 2.0)})
    path = tmp_path / "t.csv"
    tl.save(path)
    back = load_teacher_logits(path)
    assert back.table == tl.table and back.fmt == "pair"


def test_teacher_logits_single_format(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("id,z\na,1.5\nb,-0.5\n")
    tl = load_teacher_logits(path)
    assert tl.fmt == "single"
    np.testing.assert_array_equal(tl.lookup(["b", "a"]), [[0.0, -0.5], [0.0, 1.5]])


def test_teacher_logits_errors(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("id,z0,z1\na,1,2\na,3,4\n")
    with pytest.raises(ContractError, match="duplicate"):
        load_teacher_logits(path)
    tl = TeacherLogits({"a": (0.0, 1.0)})
    with pytest.raises(ContractError, match="missing"):
        tl.lookup(["a", "x", "y"])
