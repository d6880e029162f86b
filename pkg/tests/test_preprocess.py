import numpy as np
import pytest
from scipy import signal

from ssmecg.preprocess import (DegenerateSignalError, PreprocessConfig, Window, clean,
                               detect_r_peaks, heart_rate_bpm, highpass, hr_bin, load_windows,
                               moving_average, preprocess_records, resample, save_windows,
                               segment, zscore_subject)
from ssmecg.signal_io import EcgRecord
from ssmecg.synthetic import synth_record


class TestResample:
    def test_identity_and_dc(self):
        x = np.random.default_rng(0).standard_normal(50)
        np.testing.assert_array_equal(resample(x, 100, 100), x)
        y = resample(np.full(1000, 3.0), 250, 100)
        assert len(y) == 400
        np.testing.assert_allclose(y, 3.0, atol=1e-12)

    def test_sinusoid_matches_analytic(self):
        t = np.arange(400) / 200
        y = resample(np.sin(2 * np.pi * t), 200, 100)
        assert len(y) == 200
        expected = np.sin(2 * np.pi * np.arange(200) / 100)
        assert np.max(np.abs(y - expected)[10:-10]) < 1e-3

    def test_aliasing_tone_is_suppressed(self):
        t = np.arange(5000) / 500
        y = resample(np.sin(2 * np.pi * 80 * t), 500, 100)  # 80 Hz would fold to 20 Hz
        assert np.max(np.abs(y[50:-50])) < 0.01

    def test_rejects_upsampling(self):
        with pytest.raises(ValueError):
            resample(np.zeros(10), 50, 100)


class TestMovingAverage:
    def test_hand_values(self):
        np.testing.assert_allclose(moving_average([0, 0, 3, 0, 0], 3), [0, 1, 1, 1, 0])
        np.testing.assert_array_equal(moving_average([1.0, 2, 3], 1), [1, 2, 3])
        np.testing.assert_allclose(moving_average(np.full(9, 2.5), 5), 2.5)
        # shrinking edge windows
        np.testing.assert_allclose(moving_average([3.0, 0, 0, 0], 3)[0], 1.5)

    def test_errors(self):
        with pytest.raises(ValueError):
            moving_average(np.zeros(5), 4)
        with pytest.raises(ValueError):
            moving_average(np.zeros(3), 5)


class TestHighpass:
    def test_dc_rejected(self):
        y = highpass(np.full(1000, 7.0))
        assert np.max(np.abs(y[200:-200])) < 7e-3

    @pytest.mark.parametrize("freq", [5.0, 0.05])
    def test_matches_squared_butterworth_response(self, freq):
        t = np.arange(6000) / 100
        y = highpass(np.sin(2 * np.pi * freq * t))
        _, h = signal.sosfreqz(signal.butter(5, 0.5, btype="highpass", fs=100, output="sos"),
                               worN=[freq], fs=100)
        gain = np.abs(h[0]) ** 2
        mid = np.abs(y[2000:4000]).max()
        if freq == 5.0:
            assert mid == pytest.approx(1.0, rel=0.01)
            assert mid == pytest.approx(gain, rel=0.01)
        else:
            assert 20 * np.log10(mid) <= -20

    def test_cutoff_validation(self):
        with pytest.raises(ValueError):
            highpass(np.zeros(100), cutoff_hz=60)


class TestZscore:
    def test_pooled_statistics(self):
        rng = np.random.default_rng(0)
        a, b = 5 + 2 * rng.standard_normal(300), 5 + 2 * rng.standard_normal(200)
        out = zscore_subject({"s": [a, b], "t": [100 * rng.standard_normal(50)]})
        pooled = np.concatenate(out["s"])
        assert abs(pooled.mean()) < 1e-9 and abs(pooled.std() - 1) < 1e-9
        assert abs(out["t"][0].std() - 1) < 1e-9

    def test_constant_subject(self):
        with pytest.raises(DegenerateSignalError, match="flat"):
            zscore_subject({"flat": [np.ones(10)]})


class TestSegment:
    def test_fixed(self):
        ws = segment(np.arange(3500.0), 1000)
        assert [w.start_offset_samples for w in ws] == [0, 1000, 2000]
        one = segment(np.arange(1000.0), 1000)
        assert len(one) == 1
        np.testing.assert_array_equal(one[0].values, np.arange(1000.0))

    def test_random_offset_reproducible(self):
        a = segment(np.arange(1500.0), 1000, "random_offset", seed=4)[0]
        b = segment(np.arange(1500.0), 1000, "random_offset", seed=4)[0]
        assert 0 <= a.start_offset_samples <= 500
        assert a.start_offset_samples == b.start_offset_samples
        assert a.values[0] == a.start_offset_samples

    def test_too_short(self):
        with pytest.raises(ValueError):
            segment(np.zeros(999), 1000)


class TestPeaks:
    def test_impulse_train(self):
        x = np.zeros(1000)
        x[50::100] = 1.0
        peaks = detect_r_peaks(x, 100)
        np.testing.assert_allclose(peaks, np.arange(50, 1000, 100), atol=2)

    def test_constant_signal(self):
        assert len(detect_r_peaks(np.ones(500), 100)) == 0

    def test_synthetic_75_bpm(self):
        x, _ = synth_record(75, duration_s=10, rng=np.random.default_rng(1), rr_jitter=0.0)
        peaks = detect_r_peaks(x, 100)
        assert len(peaks) in (12, 13)
        assert abs(heart_rate_bpm(peaks, 100) - 75) <= 3
        assert np.all(np.diff(peaks) >= 20)

    def test_jittered_80_bpm(self):
        x, true = synth_record(80, duration_s=15, rng=np.random.default_rng(2))
        peaks = detect_r_peaks(x, 100)
        assert abs(heart_rate_bpm(peaks, 100) - 60 / np.mean(np.diff(true) / 100)) <= 2
        assert abs(heart_rate_bpm(peaks, 100) - 80) <= 2

    def test_heart_rate_arithmetic(self):
        assert heart_rate_bpm(np.arange(0, 1000, 100), 100) == 60.0
        assert heart_rate_bpm([0, 50], 100) == 120.0
        with pytest.raises(ValueError):
            heart_rate_bpm([3], 100)

    def test_hr_bins(self):
        assert (hr_bin(40), hr_bin(75), hr_bin(210)) == (0, 3, 16)
        with pytest.raises(ValueError):
            hr_bin(39.9)


def test_full_chain_and_window_files(tmp_path):
    rng = np.random.default_rng(0)
    recs = [EcgRecord(f"r{i}", f"s{i % 2}", 250.0, synth_record(70, 15, 250, rng)[0],
                      labels={"stress": i % 2}) for i in range(4)]
    a = preprocess_records(recs, window_mode="random_offset", seed=3)
    b = preprocess_records(recs, window_mode="random_offset", seed=3)
    assert len(a) == 4 and all(len(w.values) == 1000 for w in a)
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa.values, wb.values)
    save_windows(a, tmp_path)
    back = load_windows(tmp_path)
    assert [w.record_id for w in back] == ["r0", "r1", "r2", "r3"]
    np.testing.assert_array_equal(back[2].values, a[2].values.astype(np.float32))
    assert back[1].labels == {"stress": 1}


def test_clean_output_rate_and_config_validation():
    x, _ = synth_record(70, 12, 500, np.random.default_rng(0))
    assert len(clean(x, 500)) == 1200
    assert PreprocessConfig().window_len == 1000
    with pytest.raises(ValueError):
        PreprocessConfig(smoothing_kernel_len=4)
    assert isinstance(Window(np.zeros(3), "s", "r", 0), Window)
