import math
import wave

import numpy as np
import pytest

from scenedialog import audioclf as ac
from scenedialog import numerics as nx

SMALL = ((8, 4, 4), (4, 2, 6))


def test_synth_dataset_split_and_normalization():
    ds = ac.synth_dataset()
    assert len(ds.train) == 160 and len(ds.test) == 40
    assert ds.class_names == ac.CLASS_NAMES
    for items in (ds.train, ds.test):
        counts = np.bincount([y for _, y in items], minlength=5)
        assert len(set(counts.tolist())) == 1
    for w, _ in ds.train + ds.test:
        assert w.samples.size == round(0.25 * 44100)
        assert abs(np.abs(w.samples).max() - 1.0) < 1e-9


def test_synth_dataset_deterministic_and_validated():
    a, b = ac.synth_dataset(per_class=4, rng_seed=3), ac.synth_dataset(per_class=4, rng_seed=3)
    for (wa, ya), (wb, yb) in zip(a.train + a.test, b.train + b.test):
        assert ya == yb and wa.samples.tobytes() == wb.samples.tobytes()
    c = ac.synth_dataset(per_class=4, rng_seed=4)
    assert not np.array_equal(a.train[0][0].samples, c.train[0][0].samples)
    with pytest.raises(ValueError):
        ac.synth_dataset(classes=1)
    with pytest.raises(ValueError):
        ac.synth_dataset(classes=6)


def test_normalize_is_scale_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=100)
    for c in (0.01, 3.0, -7.5):
        np.testing.assert_allclose(ac.normalize(c * x), np.sign(c) * ac.normalize(x), atol=1e-15)
    np.testing.assert_array_equal(ac.normalize(np.zeros(4)), np.zeros(4))


def test_waveform_validation():
    with pytest.raises(ValueError):
        ac.Waveform(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ac.Waveform(np.zeros(3), sample_rate=0)
    assert ac.Waveform(np.ones(4410), 44100).duration == pytest.approx(0.1)


def test_receptive_field_and_short_input():
    p = ac.AudioClassifierParams.init(3, SMALL)
    assert p.receptive_field == 8 + (4 - 1) * 4
    assert p.embed_dim == 6
    emb, _ = ac.features_forward(p, np.zeros((2, p.receptive_field)))
    assert emb.shape == (2, 6)
    with pytest.raises(ValueError, match="receptive field"):
        ac.features_forward(p, np.zeros((1, p.receptive_field - 1)))


def test_network_gradients():
    rng = np.random.default_rng(1)
    p = ac.AudioClassifierParams.init(3, SMALL, rng_seed=2)
    for arr in p.store.params.values():
        arr[:] = rng.normal(scale=0.5, size=arr.shape)
    x, y = rng.normal(size=(3, 40)), np.array([0, 2, 1])
    p.store.zero_grad()
    ac.batch_loss(p, x, y)
    errs = nx.gradient_check(lambda: ac.batch_loss(p, x, y, backward=False), p.store.params, p.store.grads)
    assert max(errs.values()) < 1e-4, errs


def test_first_epoch_beats_chance_and_training_is_deterministic():
    ds = ac.synth_dataset()
    p1 = ac.train_audio_clf(ds, epochs=1)
    x = np.stack([w.samples for w, _ in ds.train])
    y = np.array([label for _, label in ds.train])
    assert ac.batch_loss(p1, x, y, backward=False) < math.log(5)
    p2 = ac.train_audio_clf(ds, epochs=1)
    for name in p1.store.params:
        assert p1.store[name].tobytes() == p2.store[name].tobytes()


def test_single_class_training_rejected():
    ds = ac.synth_dataset(classes=2, per_class=4, duration_s=0.02)
    ds.train = [item for item in ds.train if item[1] == 0]
    with pytest.raises(ValueError, match="two classes"):
        ac.train_audio_clf(ds, epochs=1)


def enumerate_windows(L, W, hop):
    """Every start s with s % hop == 0 whose window fits inside [0, L)."""
    return [s for s in range(L) if s % hop == 0 and s + W <= L]


@pytest.mark.parametrize("L,W,hop", [(10, 10, 10), (10, 3, 1), (10, 3, 2), (44100, 44100, 44100),
                                     (60, 10, 10), (65, 10, 10), (7, 2, 5)])
def test_window_starts_match_enumeration(L, W, hop):
    starts = ac.window_starts(L, W, hop)
    assert starts == enumerate_windows(L, W, hop)
    assert len(starts) == 1 + (L - W) // hop


def test_window_errors():
    with pytest.raises(ValueError, match="shorter"):
        ac.window_starts(5, 6, 1)
    with pytest.raises(ValueError):
        ac.window_starts(5, 0, 1)


def test_embed_audio_frame_counts():
    p = ac.AudioClassifierParams.init(5, SMALL)
    sr = 1000
    one = ac.embed_audio(p, ac.Waveform(np.sin(np.arange(1000)), sr), window_s=1.0, hop_s=1.0)
    assert one.shape == (1, 6) and one.source_tag == "aclnet_standin"
    six = ac.embed_audio(p, ac.Waveform(np.sin(np.arange(3500)), sr), window_s=1.0, hop_s=0.5)
    assert six.shape == (6, 6)
    # each frame equals the embedding of its own window
    w = ac.Waveform(np.sin(np.arange(3500)), sr)
    direct, _ = ac.features_forward(p, w.samples[None, 2500:3500])
    np.testing.assert_allclose(six.frames[5], direct[0], atol=1e-15)


def test_silence_gives_constant_embedding():
    p = ac.AudioClassifierParams.init(5, SMALL, rng_seed=3)
    for arr in (v for k, v in p.store.params.items() if k.endswith(".b")):
        arr[:] = np.random.default_rng(4).normal(size=arr.shape)
    seq = ac.embed_audio(p, ac.Waveform(np.zeros(3000), 1000), 1.0, 1.0)
    assert seq.shape[0] == 3
    np.testing.assert_array_equal(seq.frames[0], seq.frames[1])
    np.testing.assert_array_equal(seq.frames[1], seq.frames[2])


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    seq = ac.FeatureSequence("audio", rng.normal(size=(4, 128)) * 1e3)
    ac.save_features(tmp_path / "f.txt", seq)
    back = ac.load_features(tmp_path / "f.txt")
    assert np.max(np.abs(back.frames - seq.frames)) <= 1e-12
    assert back.modality == "audio" and back.source_tag == "external_vggish"
    assert ac.load_features(tmp_path / "f.txt", "aclnet_standin").source_tag == "aclnet_standin"


@pytest.mark.parametrize("text,line", [
    ("", 1), ("audio 1\n", 1), ("sound 1 2\n1 2\n", 1), ("audio x 2\n1 2\n", 1),
    ("audio 2 2\n1 2\n", 3), ("audio 1 3\n1 2\n", 2), ("visual 2 2\n1 2\n1 q\n", 3),
    ("audio 1 2\n1 nan\n", 2),
])
def test_feature_file_errors_name_the_line(tmp_path, text, line):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(ac.FeatureFormatError, match=f":{line}:"):
        ac.load_features(p)


def test_feature_row_of_127_floats(tmp_path):
    p = tmp_path / "vggish.txt"
    p.write_text("audio 2 128\n" + " ".join(["0.5"] * 128) + "\n" + " ".join(["0.5"] * 127) + "\n")
    with pytest.raises(ac.FeatureFormatError, match=r":3: expected 128 values, found 127"):
        ac.load_features(p)


def test_feature_sequence_validation():
    with pytest.raises(ValueError):
        ac.FeatureSequence("smell", np.zeros((1, 2)))
    with pytest.raises(ValueError):
        ac.FeatureSequence("audio", np.zeros((1, 2)), "unknown_tag")


def test_wav_round_trip(tmp_path):
    w = ac.Waveform(np.sin(np.linspace(0, 20, 500)), 8000)
    ac.write_wav(tmp_path / "a.wav", w)
    back = ac.read_waveform(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    np.testing.assert_allclose(back.samples, w.samples, atol=2 / 32768)
    with wave.open(str(tmp_path / "st.wav"), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(8000)
        fh.writeframes(bytes(8))
    with pytest.raises(ac.FeatureFormatError, match="mono"):
        ac.read_wav(tmp_path / "st.wav")


def test_float_text_waveform(tmp_path):
    p = tmp_path / "w.txt"
    p.write_text("# sample_rate 16000\n0.5 -1.0\n0.25\n")
    w = ac.read_waveform(p)
    assert w.sample_rate == 16000
    np.testing.assert_array_equal(w.samples, [0.5, -1.0, 0.25])
    p.write_text("0.1\nabc\n")
    with pytest.raises(ac.FeatureFormatError, match=":2:"):
        ac.read_float_text(p)
    p.write_text("# nothing\n")
    with pytest.raises(ac.FeatureFormatError, match="no samples"):
        ac.read_float_text(p)
