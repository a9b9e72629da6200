import numpy as np
import pytest

from sonopipe import synth
from sonopipe.augment import NOISE_NAMES
from sonopipe.dataset import filter_min_samples
from sonopipe.spectro import spectrogram
from sonopipe.synth import SonotypeTemplate, make_benchmark, make_noise_bank, render


BIN_HZ = 44100 / 256


class TestRender:
    def test_chirp_ridge_sweeps_expected_bins(self):
        template = SonotypeTemplate(family="chirp", f_start=1000.0, f_end=2000.0,
                                    duration_s=1.0, amplitude=0.6, freq_jitter=0.0,
                                    duration_jitter=0.0, amp_jitter_db=0.0)
        buffer, clip = render(template, rng_seed=3, pad_s=0.15)
        spec = spectrogram(buffer)
        t0 = int(np.searchsorted(spec.time_axis_s, clip.begin_s))
        t1 = int(np.searchsorted(spec.time_axis_s, clip.end_s, side="right")) - 1
        ridge = np.argmax(spec.grid[:, t0:t1 + 1], axis=0)
        # oracle: the sweep's instantaneous frequency at each frame center
        times = spec.time_axis_s[t0:t1 + 1]
        f_inst = 1000.0 + 1000.0 * np.clip((times - 0.15) / 1.0, 0.0, 1.0)
        predicted = np.round(f_inst / BIN_HZ).astype(int)
        assert np.all(np.abs(ridge[2:-2] - predicted[2:-2]) <= 1)
        assert ridge[0] == round(1000.0 / BIN_HZ) == 6
        assert ridge.max() == round(2000.0 / BIN_HZ) == 12
        assert np.all(np.diff(ridge) >= 0)

    def test_zero_amplitude_rejects_clip(self):
        template = SonotypeTemplate(family="chirp", f_start=1000.0, f_end=2000.0,
                                    duration_s=0.5, amplitude=0.0)
        buffer, clip = render(template, rng_seed=0)
        assert clip is None
        assert np.all(buffer.samples == 0.0)

    def test_same_seed_same_waveform(self):
        template = SonotypeTemplate(family="pulse_train", f_start=2000.0,
                                    f_end=2400.0, duration_s=0.6)
        a, clip_a = render(template, rng_seed=11)
        b, clip_b = render(template, rng_seed=11)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert clip_a == clip_b

    def test_different_seed_different_waveform(self):
        template = SonotypeTemplate(family="chirp", f_start=1500.0, f_end=2500.0,
                                    duration_s=0.5)
        a, _ = render(template, rng_seed=1)
        b, _ = render(template, rng_seed=2)
        assert not np.array_equal(a.samples, b.samples)

    def test_roi_bounds_inside_axes(self):
        template = SonotypeTemplate(family="noise_band", f_start=3000.0,
                                    f_end=5000.0, duration_s=0.4)
        buffer, clip = render(template, rng_seed=5)
        assert 0.0 <= clip.begin_s < clip.end_s <= buffer.duration_s
        assert 0.0 <= clip.low_hz < clip.high_hz <= 22050.0

    @pytest.mark.parametrize("family", synth.FAMILIES)
    def test_roi_keeps_99_percent_of_energy(self, family):
        rng = np.random.default_rng(7)
        for trial in range(5):
            template = SonotypeTemplate(
                family=family,
                f_start=float(rng.uniform(800, 4000)),
                f_end=float(rng.uniform(1000, 6000)),
                duration_s=float(rng.uniform(0.3, 0.8)))
            buffer, clip = render(template, rng_seed=100 + trial)
            spec = spectrogram(buffer)
            f0 = int(np.searchsorted(spec.freq_axis_hz, clip.low_hz))
            f1 = int(np.searchsorted(spec.freq_axis_hz, clip.high_hz, side="right")) - 1
            t0 = int(np.searchsorted(spec.time_axis_s, clip.begin_s))
            t1 = int(np.searchsorted(spec.time_axis_s, clip.end_s, side="right")) - 1
            inside = spec.grid[f0:f1 + 1, t0:t1 + 1].sum()
            assert inside / spec.grid.sum() >= 0.99, (family, trial)

    def test_taxon_mapping(self):
        for family, taxon in synth.FAMILY_TAXON.items():
            template = SonotypeTemplate(family=family, f_start=2000.0,
                                        f_end=3000.0, duration_s=0.4)
            _, clip = render(template, rng_seed=0)
            assert clip.taxon == taxon


class TestMakeBenchmark:
    def test_balanced_geometry(self):
        catalog = make_benchmark(6, 8, rng_seed=1, image_size=32)
        assert len(catalog) == 6
        assert all(n == 8 for n in catalog.counts().values())
        sample = catalog.info(0).samples[0]
        assert sample.image.shape == (32, 32, 3)

    def test_minimum_viable_size(self):
        catalog = make_benchmark(6, 3, rng_seed=2, image_size=32)
        assert all(n == 3 for n in catalog.counts().values())

    def test_too_small_catalog_filters_empty(self):
        catalog = make_benchmark(2, 1, rng_seed=3, image_size=32)
        assert len(filter_min_samples(catalog, 3)) == 0

    def test_longtail_descends(self):
        catalog = make_benchmark(6, "longtail", rng_seed=4, image_size=32)
        counts = [catalog.counts()[sid] for sid in sorted(catalog.counts())]
        assert counts == sorted(counts, reverse=True)
        assert counts[0] > counts[-1]

    def test_deterministic(self):
        a = make_benchmark(3, 4, rng_seed=9, image_size=32)
        b = make_benchmark(3, 4, rng_seed=9, image_size=32)
        for sid in a.sonotype_ids():
            for s1, s2 in zip(a.info(sid).samples, b.info(sid).samples):
                np.testing.assert_array_equal(s1.image, s2.image)

    def test_nearest_centroid_separates_families_at_high_snr(self):
        catalog = make_benchmark(4, 12, rng_seed=5, image_size=32, snr_db=30.0)
        train_x, train_y, test_x, test_y = [], [], [], []
        for sid in catalog.sonotype_ids():
            members = catalog.info(sid).samples
            for i, s in enumerate(members):
                vec = s.image[:, :, 0].astype(np.float64).ravel()
                if i < 6:
                    train_x.append(vec)
                    train_y.append(sid)
                else:
                    test_x.append(vec)
                    test_y.append(sid)
        train_x = np.array(train_x)
        centroids = {sid: train_x[np.array(train_y) == sid].mean(axis=0)
                     for sid in catalog.sonotype_ids()}
        correct = 0
        for vec, sid in zip(test_x, test_y):
            pred = min(centroids, key=lambda c: np.linalg.norm(vec - centroids[c]))
            correct += pred == sid
        assert correct / len(test_y) >= 0.95


class TestNoiseBankAndPretext:
    def test_bank_has_all_names(self):
        bank = make_noise_bank(32, rng_seed=0)
        assert set(bank.names()) == set(NOISE_NAMES)
        for name in bank.names():
            img = bank.get(name)
            assert img.shape == (32, 32)
            assert img.dtype == np.uint8

    def test_pretext_corpus_shapes(self):
        images, labels = synth.make_pretext_corpus(3, 4, rng_seed=1, image_size=32)
        assert images.shape == (12, 32, 32, 3)
        assert sorted(set(labels)) == [0, 1, 2]


class TestTemplateText:
    def test_round_trip(self):
        template = SonotypeTemplate(family="pulse_train", f_start=2000.0,
                                    f_end=2400.0, duration_s=0.6,
                                    pulse_rate_hz=10.5)
        text = synth.template_to_text(template)
        assert "family = pulse_train" in text
        assert synth.template_from_text(text) == template

    def test_unknown_field_rejected(self):
        with pytest.raises(synth.SynthError, match="line 1"):
            synth.template_from_text("wingspan = 3\n")
