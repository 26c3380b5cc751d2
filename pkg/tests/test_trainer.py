import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdistill.audio import AudioEncoder
from cmdistill.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from cmdistill.config import FULL_SCALE_REFERENCE, TrainConfig
from cmdistill.data import SpeechSet
from cmdistill.errors import ConfigError, DataError, FormatError, TrainingError, UsageError
from cmdistill.numcore import Rng, Tensor
from cmdistill.optim import AdamW, clip_grad_norm, global_grad_norm
from cmdistill.qformer import DonorDecoder
from cmdistill.toylm import ToyLM
from cmdistill.trainer import METRICS_HEADER, lr_at, metrics_csv, student_state, train, write_metrics

F64 = np.float64


# -- schedule ---------------------------------------------------------------------

def test_schedule_endpoints():
    assert lr_at(0, 600, 1e-3, 0.01) == 0.0
    assert lr_at(6, 600, 1e-3, 0.01) == pytest.approx(1e-3, abs=1e-15)
    assert abs(lr_at(600, 600, 1e-3, 0.01)) < 1e-12
    assert lr_at(303, 600, 1e-3, 0.01) == pytest.approx(5e-4, abs=1e-12)


def test_schedule_out_of_range():
    with pytest.raises(UsageError):
        lr_at(-1, 10, 1.0, 0.1)
    with pytest.raises(UsageError):
        lr_at(11, 10, 1.0, 0.1)


@settings(max_examples=50)
@given(total=st.integers(10, 10000), frac=st.floats(0.001, 0.5), base=st.floats(1e-6, 1.0))
def test_schedule_continuous_at_boundary_and_bounded(total, frac, base):
    w = frac * total
    d = 1e-9 * w
    assert abs(lr_at(w, total, base, frac) - base) < 1e-12
    assert abs(lr_at(w - d, total, base, frac) - base) <= 1e-8 * base
    assert abs(lr_at(w + d, total, base, frac) - base) <= 1e-8 * base
    for s in np.linspace(0, total, 17):
        assert -1e-15 <= lr_at(float(s), total, base, frac) <= base * (1 + 1e-12)


def test_full_scale_reference_values_recorded():
    assert FULL_SCALE_REFERENCE["total_steps"] == 4300
    assert FULL_SCALE_REFERENCE["batch_size"] == 512
    assert FULL_SCALE_REFERENCE["base_lr"] == 5e-5
    assert FULL_SCALE_REFERENCE["weight_decay"] == 0.1
    assert FULL_SCALE_REFERENCE["warmup_fraction"] == 0.01


# -- AdamW ------------------------------------------------------------------------------

def param(values, grad=None):
    p = Tensor(np.asarray(values, dtype=F64), requires_grad=True)
    p.grad = None if grad is None else np.asarray(grad, dtype=F64)
    return p


def test_zero_gradient_no_decay_leaves_parameters():
    p = param([1.0, -2.0], [0.0, 0.0])
    AdamW({"p": p}, weight_decay=0.0).step(0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_single_scalar_step_by_hand():
    p = param(0.5, 0.2)
    AdamW({"p": p}, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8).step(0.01)
    m_hat = (0.1 * 0.2) / 0.1
    v_hat = (0.001 * 0.04) / 0.001
    expected = 0.5 - 0.01 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 0.1 * 0.5)
    assert abs(float(p.data) - expected) < 1e-12


def test_two_steps_by_hand():
    p = param(1.0, 0.3)
    opt = AdamW({"p": p}, weight_decay=0.0)
    opt.step(0.1)
    p.grad = np.asarray(-0.1)
    opt.step(0.1)
    m = 0.9 * 0.1 * 0.3 + 0.1 * -0.1
    v = 0.999 * 0.001 * 0.09 + 0.001 * 0.01
    first = 1.0 - 0.1 * 0.3 / (0.3 + 1e-8)
    expected = first - 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert abs(float(p.data) - expected) < 1e-12


def test_decoupled_decay_shrinks_by_factor():
    p = param([2.0, -4.0], [0.0, 0.0])
    AdamW({"p": p}, weight_decay=0.1).step(0.01)
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.01 * 0.1), atol=1e-15)


def test_nan_gradient_names_parameter():
    p = param([1.0], [np.nan])
    with pytest.raises(TrainingError, match="encoder.w"):
        AdamW({"encoder.w": p}).step(0.1)


def test_moment_shapes_match_parameters():
    ps = {"a": param(np.zeros((2, 3)), np.ones((2, 3))), "b": param(np.zeros(4), np.ones(4))}
    opt = AdamW(ps)
    opt.step(0.1)
    for k, arr in opt.state_arrays().items():
        assert arr.shape == ps[k.split(".", 2)[2]].shape


def test_clip_grad_norm():
    ps = {"a": param([0.0, 0.0], [3.0, 0.0]), "b": param([0.0], [4.0])}
    assert clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
    assert global_grad_norm(ps) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(ps["a"].grad, [0.6, 0.0], atol=1e-9)
    assert clip_grad_norm(ps, None) == pytest.approx(1.0, abs=1e-9)


# -- checkpoints --------------------------------------------------------------------------

TENSORS = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(1.5, dtype=np.float32),
           "c": np.zeros((0, 4), dtype=np.float64)}


def test_checkpoint_round_trip_bitwise(tmp_path):
    save_checkpoint(TENSORS, tmp_path / "x.ckpt")
    loaded = load_checkpoint(tmp_path / "x.ckpt")
    assert list(loaded) == list(TENSORS)
    for k in TENSORS:
        assert loaded[k].dtype == TENSORS[k].dtype and loaded[k].shape == TENSORS[k].shape
        assert loaded[k].tobytes() == TENSORS[k].tobytes()
    save_checkpoint(loaded, tmp_path / "y.ckpt")
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_header_layout():
    buf = encode_checkpoint({"ab": np.array([1.0, 2.0], dtype=np.float32)})
    assert buf[:4] == MAGIC
    assert struct.unpack("<IQ", buf[4:16]) == (1, 1)
    assert struct.unpack("<I", buf[16:20]) == (2,)
    assert buf[20:22] == b"ab"
    assert struct.unpack("<IQB", buf[22:35]) == (1, 2, 0)
    assert np.frombuffer(buf[35:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
])
def test_corrupt_checkpoints_are_format_errors(mutate, match):
    with pytest.raises(FormatError, match=match):
        decode_checkpoint(mutate(encode_checkpoint(TENSORS)))


def test_duplicate_names_and_bad_tag():
    one = encode_checkpoint({"x": np.zeros(1, np.float32)})
    body = one[16:]
    dup = one[:4] + struct.pack("<IQ", 1, 2) + body + body
    with pytest.raises(FormatError, match="duplicate"):
        decode_checkpoint(dup)
    bad = bytearray(one)
    bad[16 + 4 + 1 + 4 + 8] = 7
    with pytest.raises(FormatError, match="tag"):
        decode_checkpoint(bytes(bad))


def test_unsupported_dtype_rejected():
    with pytest.raises(FormatError):
        encode_checkpoint({"i": np.zeros(2, dtype=np.int32)})


def test_unwritable_path_is_os_error(tmp_path):
    with pytest.raises(OSError, match="missing"):
        save_checkpoint(TENSORS, tmp_path / "missing" / "x.ckpt")


# -- training loop ----------------------------------------------------------------------------

def tiny_setup(n=12):
    lm = ToyLM(20, 16, 1, 2, 24, Rng(0)).freeze()
    enc = AudioEncoder(4, 8, 1, 2, Rng(1))
    donor = DonorDecoder(20, 8, 1, 2, 8, Rng(2))
    rng = Rng(3)
    transcripts = [[12 + int(rng.integers(0, 8)) for _ in range(1 + i % 3)] for i in range(n)]
    data = SpeechSet([f"train-{i:05d}" for i in range(n)], transcripts,
                     rng.normal((n, 10, 4)).astype(np.float32))
    return lm, enc, donor, data


def tiny_cfg(**kw):
    base = dict(total_steps=6, batch_size=4, base_lr=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_two_step_run_is_bitwise_reproducible(tmp_path):
    lm, enc, donor, data = tiny_setup()
    a = train(tiny_cfg(total_steps=2), data, lm, enc, donor, 5, checkpoint_path=tmp_path / "a.ckpt")
    b = train(tiny_cfg(total_steps=2), data, lm, enc, donor, 5, checkpoint_path=tmp_path / "b.ckpt")
    assert metrics_csv(a.rows) == metrics_csv(b.rows)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_metrics_schema(tmp_path):
    lm, enc, donor, data = tiny_setup()
    res = train(tiny_cfg(), data, lm, enc, donor, 5)
    write_metrics(res.rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,lr,l_con,l_distill,combined,reference_kl"
    assert len(lines) == 7
    assert [int(r.split(",")[0]) for r in lines[1:]] == list(range(6))
    assert METRICS_HEADER == tuple(lines[0].split(","))
    assert res.series("lr")[-1] == 0.0


@pytest.mark.parametrize("arm", ["full", "distill_only", "align_only"])
def test_teacher_checksum_unchanged_for_every_arm(arm):
    lm, enc, donor, data = tiny_setup()
    before = lm.checksum()
    res = train(tiny_cfg(arm=arm), data, lm, enc, donor, 5)
    assert lm.checksum() == before == res.teacher_checksum
    assert all(p.grad is None for p in lm.parameters())


def test_align_only_still_logs_distill():
    lm, enc, donor, data = tiny_setup()
    res = train(tiny_cfg(arm="align_only"), data, lm, enc, donor, 5)
    assert np.all(res.series("l_distill") > 0)
    np.testing.assert_allclose(res.series("combined"), res.series("l_distill") + res.series("l_con"))


def test_caller_encoder_untouched():
    lm, enc, donor, data = tiny_setup()
    before = {k: v.copy() for k, v in enc.state_dict().items()}
    res = train(tiny_cfg(), data, lm, enc, donor, 5)
    for k, v in enc.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert any(not np.array_equal(v, before[k]) for k, v in res.student.encoder.state_dict().items())


def test_frozen_encoder_not_updated():
    lm, enc, donor, data = tiny_setup()
    res = train(tiny_cfg(freeze_encoder=True), data, lm, enc, donor, 5)
    for k, v in res.student.encoder.state_dict().items():
        np.testing.assert_array_equal(v, enc.state_dict()[k])


def test_student_state_names():
    lm, enc, donor, data = tiny_setup()
    res = train(tiny_cfg(total_steps=1), data, lm, enc, donor, 5)
    names = student_state(res.student)
    assert all(n.startswith(("encoder.", "adapter.")) for n in names)
    assert "adapter.queries" in names


def test_unfrozen_teacher_rejected():
    lm, enc, donor, data = tiny_setup()
    lm.frozen = False
    with pytest.raises(TrainingError):
        train(tiny_cfg(), data, lm, enc, donor, 5)


def test_empty_data_rejected():
    lm, enc, donor, data = tiny_setup()
    with pytest.raises(DataError):
        train(tiny_cfg(), data.subset([]), lm, enc, donor, 5)


def test_non_finite_loss_reports_step():
    lm, enc, donor, data = tiny_setup()
    data.feats[3:] = np.nan
    with pytest.raises(TrainingError, match="step"):
        train(tiny_cfg(batch_size=12), data, lm, enc, donor, 5)


@pytest.mark.parametrize("kw", [dict(total_steps=0), dict(warmup_fraction=0.0), dict(warmup_fraction=1.0),
                                dict(arm="kl"), dict(init_mode="random"), dict(batch_size=0)])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        tiny_cfg(**kw).validate()
