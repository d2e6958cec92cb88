import numpy as np
import pytest

from triseg import dataio, translate


def _corpus(rng, n, shift=0.0, scale=1.0):
    imgs = []
    for _ in range(n):
        base = rng.random((16, 16, 3)) * 0.5 + 0.25
        imgs.append(np.clip(base * scale + shift, 0, 1).astype(np.float32))
    return imgs


class TestFit:
    def test_identical_corpora_give_identity(self):
        rng = np.random.default_rng(0)
        imgs = _corpus(rng, 50)
        tr = translate.fit_translator(imgs, imgs)
        np.testing.assert_allclose(tr.scale, 1.0, atol=1e-3)
        np.testing.assert_allclose(tr.shift, 0.0, atol=1e-3)

    def test_brightness_shift_recovered(self):
        rng = np.random.default_rng(1)
        src = _corpus(rng, 80)
        tgt = [np.clip(x + 0.1, 0, 1) for x in src]
        tr = translate.fit_translator(src, tgt)
        np.testing.assert_allclose(tr.shift, 0.1, atol=5e-3)
        np.testing.assert_allclose(tr.scale, 1.0, atol=5e-2)

    def test_fit_deterministic(self):
        rng = np.random.default_rng(2)
        src = _corpus(rng, 30)
        tgt = _corpus(rng, 30, shift=0.05)
        a = translate.fit_translator(src, tgt)
        b = translate.fit_translator(src, tgt)
        assert np.array_equal(a.scale, b.scale) and np.array_equal(a.shift, b.shift)

    def test_zero_variance_channel_clamps_with_warning(self):
        flat = [np.full((8, 8, 3), 0.5, dtype=np.float32) for _ in range(5)]
        rng = np.random.default_rng(3)
        tgt = _corpus(rng, 5)
        with pytest.warns(UserWarning, match="zero-variance"):
            tr = translate.fit_translator(flat, tgt)
        np.testing.assert_allclose(tr.scale, 1.0)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            translate.fit_translator([], [np.zeros((4, 4, 3))])

    def test_translated_stats_match_target_within_5pct(self):
        rng = np.random.default_rng(4)
        src = _corpus(rng, 120)
        tgt = _corpus(rng, 120, shift=0.08, scale=0.7)
        tr = translate.fit_translator(src, tgt)
        moved = np.concatenate([tr.forward(x).reshape(-1, 3) for x in src])
        ref = np.concatenate([x.reshape(-1, 3) for x in tgt])
        np.testing.assert_allclose(moved.mean(0), ref.mean(0), rtol=0.05)
        np.testing.assert_allclose(moved.std(0), ref.std(0), rtol=0.05)


class TestTriple:
    def test_identity_translator(self):
        rng = np.random.default_rng(5)
        x = rng.random((8, 8, 3)).astype(np.float32)
        triple = translate.make_triple(x, translate.IdentityTranslator())
        assert triple.t1 is x
        np.testing.assert_array_equal(triple.t2, x)
        np.testing.assert_array_equal(triple.t3, x)

    def test_t1_is_the_input_bit_for_bit(self):
        rng = np.random.default_rng(6)
        x = rng.random((8, 8, 3)).astype(np.float32)
        tr = translate.AffineColorTranslator([1.1, 0.9, 1.0], [0.02, -0.01, 0.0])
        triple = translate.make_triple(x, tr)
        assert triple.t1 is x

    def test_brightness_shift_reconstruction(self):
        x = np.full((6, 6, 3), 0.5, dtype=np.float32)
        tr = translate.AffineColorTranslator([1.0, 1.0, 1.0], [0.2, 0.2, 0.2])
        triple = translate.make_triple(x, tr)
        np.testing.assert_allclose(triple.t3, 0.7, atol=1e-6)
        np.testing.assert_allclose(triple.t2, x, atol=1e-6)  # no clipping occurred

    def test_clipped_pixels_break_reconstruction_only_there(self):
        x = np.full((4, 4, 3), 0.5, dtype=np.float32)
        x[0, 0] = 1.0  # saturates under a positive shift
        tr = translate.AffineColorTranslator([1.0, 1.0, 1.0], [0.3, 0.3, 0.3])
        triple = translate.make_triple(x, tr)
        np.testing.assert_allclose(triple.t2[1:], x[1:], atol=1e-6)
        assert not np.allclose(triple.t2[0, 0], x[0, 0], atol=1e-3)

    def test_forward_inverse_identity_without_clipping(self):
        rng = np.random.default_rng(7)
        x = (rng.random((10, 10, 3)) * 0.4 + 0.3).astype(np.float32)
        tr = translate.AffineColorTranslator([1.05, 0.95, 1.0], [0.01, -0.02, 0.03])
        back = tr.inverse(tr.forward(x))
        np.testing.assert_allclose(back, x, atol=1e-6)

    def test_batched_images_supported(self):
        rng = np.random.default_rng(8)
        batch = rng.random((5, 8, 8, 3)).astype(np.float32)
        tr = translate.AffineColorTranslator([1.1, 1.0, 0.9], [0.0, 0.05, 0.0])
        triple = translate.make_triple(batch, tr)
        assert triple.t3.shape == batch.shape


class TestAlignmentSelection:
    def test_default_is_t3(self):
        triple = translate.TranslationTriple(t1="a", t2="b", t3="c")
        assert translate.select_alignment_rep(triple) == "c"

    def test_override_to_t1(self):
        triple = translate.TranslationTriple(t1="a", t2="b", t3="c")
        assert translate.select_alignment_rep(triple, "t1") == "a"


class TestInterface:
    def test_serialization_round_trip(self):
        tr = translate.AffineColorTranslator([1.25, 0.8, 1.0], [0.1, -0.1, 0.0])
        back = translate.translator_from_json(tr.to_json())
        assert np.array_equal(back.scale, tr.scale)
        assert np.array_equal(back.shift, tr.shift)

    def test_mock_translator_substitutes_in_training(self, tmp_path):
        """Any forward/inverse implementation must slot into the trainer."""
        from triseg import trainer

        class ChannelSwap(translate.Translator):
            def forward(self, image):
                return image[..., ::-1].copy()

            def inverse(self, image):
                return image[..., ::-1].copy()

            def to_json(self):
                return {"kind": "identity"}  # nearest serializable stand-in

        splits = dataio.generate_benchmark(
            dataio.SceneSpec(seed=5),
            counts={"source-train": 6, "target-train": 6, "target-val": 4, "wild-val": 4})
        cfg = trainer.RunConfig(seed=0, stage1_iters=3, log_every=10)
        state = trainer.train_stage1(cfg, splits, ChannelSwap())
        assert state.iteration == 3

    def test_labels_never_pass_through_translation(self):
        # translation operates on images only; label maps ride alongside untouched
        splits = dataio.generate_benchmark(
            dataio.SceneSpec(seed=6),
            counts={"source-train": 4, "target-train": 4, "target-val": 2, "wild-val": 2})
        sample = splits["source-train"].samples[0]
        labels_before = sample.labels.copy()
        tr = translate.AffineColorTranslator([1.3, 0.7, 1.0], [0.1, 0.0, -0.1])
        translate.make_triple(sample.image, tr)
        assert np.array_equal(sample.labels, labels_before)
