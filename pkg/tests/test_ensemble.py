import json

import numpy as np
import pytest

from triseg import ensemble
from triseg.ensemble import MetaWeights, PseudoLabelConfig


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_prob_maps(rng, n, h, w, k):
    raw = rng.random((n, h, w, k)) + 1e-3
    return raw / raw.sum(axis=-1, keepdims=True)


class TestMetaForward:
    def test_single_classifier_scalar_weights_preserve_argmax(self):
        rng = np.random.default_rng(0)
        p1 = random_prob_maps(rng, 1, 6, 6, 4)[0]
        p2 = random_prob_maps(rng, 1, 6, 6, 4)[0]
        p3 = random_prob_maps(rng, 1, 6, 6, 4)[0]
        w = MetaWeights(np.full(4, 2.5), np.zeros(4), np.zeros(4))
        out = ensemble.meta_forward(p1, p2, p3, w)
        assert np.array_equal(out.argmax(-1), p1.argmax(-1))

    def test_two_class_worked_example(self):
        w = MetaWeights.ones(2)
        out = ensemble.meta_forward(np.array([[[0.6, 0.4]]]), np.array([[[0.5, 0.5]]]),
                                    np.array([[[0.2, 0.8]]]), w)
        np.testing.assert_allclose(out.ravel(), softmax(np.array([1.3, 1.7])), rtol=1e-12)
        np.testing.assert_allclose(out.ravel(), [0.4013, 0.5987], atol=1e-4)

    def test_all_zero_weights_uniform(self):
        rng = np.random.default_rng(1)
        maps = [random_prob_maps(rng, 1, 3, 3, 5)[0] for _ in range(3)]
        w = MetaWeights(np.zeros(5), np.zeros(5), np.zeros(5))
        out = ensemble.meta_forward(*maps, w)
        np.testing.assert_allclose(out, 0.2, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        w = MetaWeights.ones(3)
        a = np.zeros((2, 2, 3))
        b = np.zeros((2, 3, 3))
        with pytest.raises(ValueError, match="shapes differ"):
            ensemble.meta_forward(a, b, a, w)

    def test_sparsity_structure(self):
        """The combined score at (pixel, class) depends only on the three
        classifier probabilities at that same pixel and class."""
        rng = np.random.default_rng(2)
        maps = [random_prob_maps(rng, 1, 4, 4, 3)[0] for _ in range(3)]
        w = MetaWeights(rng.random(3), rng.random(3), rng.random(3))
        wmat = w.as_matrix()

        def score(maps, pix, cls):
            return sum(wmat[j][cls] * maps[j][pix[0], pix[1], cls] for j in range(3))

        probe_pix, probe_cls = (1, 2), 1
        base = score(maps, probe_pix, probe_cls)
        for j in range(3):
            for (pi, pj, pc) in [(0, 0, 0), (1, 2, 0), (3, 3, 2), (1, 2, 2)]:
                if (pi, pj) == probe_pix and pc == probe_cls:
                    continue
                perturbed = [m.copy() for m in maps]
                perturbed[j][pi, pj, pc] += 0.37
                assert score(perturbed, probe_pix, probe_cls) == base

    def test_common_positive_scaling_preserves_argmax(self):
        rng = np.random.default_rng(3)
        maps = [random_prob_maps(rng, 1, 5, 5, 4)[0] for _ in range(3)]
        w = MetaWeights(rng.random(4), rng.random(4), rng.random(4))
        base = ensemble.meta_forward(*maps, w).argmax(-1)
        scaled = MetaWeights(3.7 * w.w1, 3.7 * w.w2, 3.7 * w.w3)
        assert np.array_equal(ensemble.meta_forward(*maps, scaled).argmax(-1), base)


class TestMetaFit:
    def _planted_case(self, rng, n=6, h=8, w=8, k=4, noise=0.0):
        """Labels from planted weights; optional label noise keeps the
        objective non-separable so a finite optimum exists."""
        maps = [random_prob_maps(rng, n, h, w, k) for _ in range(3)]
        w_true = MetaWeights(rng.random(k) * 2, rng.random(k) * 2, rng.random(k) * 2)
        probs = ensemble.meta_forward(maps[0], maps[1], maps[2], w_true)
        labels = []
        for p in probs:
            lab = p.argmax(-1)
            if noise > 0:
                flip = rng.random(lab.shape) < noise
                lab[flip] = rng.integers(0, k, int(flip.sum()))
            labels.append(lab.astype(np.uint8))
        triples = [(maps[0][i], maps[1][i], maps[2][i]) for i in range(n)]
        return triples, labels, maps, w_true

    def test_planted_solution_reached(self):
        rng = np.random.default_rng(4)
        triples, labels, maps, w_true = self._planted_case(rng)
        p_stack, y = ensemble.collect_pixels(triples, labels)
        planted_loss = ensemble._ce_loss(p_stack, y, w_true.as_matrix())
        result = ensemble.meta_fit(triples, labels)
        assert result.final_loss <= planted_loss + 1e-6

    def test_identical_classifiers_preserve_argmax(self):
        # per-class weights may reorder near-tie pixels (class-level rescaling
        # trades them for corpus-level gains), so the check applies to pixels
        # with a clear top-2 margin
        rng = np.random.default_rng(5)
        maps = random_prob_maps(rng, 4, 8, 8, 3)
        triples = [(maps[i], maps[i], maps[i]) for i in range(4)]
        labels = [m.argmax(-1).astype(np.uint8) for m in maps]
        result = ensemble.meta_fit(triples, labels)
        for i in range(4):
            out = ensemble.meta_forward(maps[i], maps[i], maps[i], result.weights)
            top2 = np.sort(maps[i], axis=-1)
            clear = (top2[..., -1] - top2[..., -2]) > 0.05
            assert np.array_equal(out.argmax(-1)[clear], maps[i].argmax(-1)[clear])

    def test_loss_sequence_non_increasing(self):
        rng = np.random.default_rng(6)
        triples, labels, _, _ = self._planted_case(rng)
        result = ensemble.meta_fit(triples, labels)
        diffs = np.diff(result.losses)
        assert (diffs <= 1e-15).all()

    def test_convexity_two_inits_agree(self):
        rng = np.random.default_rng(7)
        triples, labels, _, _ = self._planted_case(rng, n=4, noise=0.15)
        k = 4
        a = ensemble.meta_fit(triples, labels,
                              init=MetaWeights(rng.normal(size=k), rng.normal(size=k),
                                               rng.normal(size=k)))
        b = ensemble.meta_fit(triples, labels,
                              init=MetaWeights(rng.normal(size=k), rng.normal(size=k),
                                               rng.normal(size=k)))
        assert abs(a.final_loss - b.final_loss) < 1e-4

    def test_ignored_pixels_excluded(self):
        rng = np.random.default_rng(8)
        triples, labels, _, _ = self._planted_case(rng, n=2)
        labels_ign = [l.copy() for l in labels]
        for l in labels_ign:
            l[0, :] = 255
        p_all, y_all = ensemble.collect_pixels(triples, labels)
        p_ign, y_ign = ensemble.collect_pixels(triples, labels_ign)
        assert y_ign.size == y_all.size - 2 * labels[0].shape[1]

    def test_no_labeled_pixels_rejected(self):
        rng = np.random.default_rng(9)
        triples, labels, _, _ = self._planted_case(rng, n=1)
        with pytest.raises(ValueError, match="no labeled pixels"):
            ensemble.meta_fit(triples, [np.full_like(labels[0], 255)])


class TestMetaRefit:
    def test_high_confidence_argmax_preserved(self):
        rng = np.random.default_rng(10)
        maps = [random_prob_maps(rng, 4, 8, 8, 3) for _ in range(3)]
        prev = MetaWeights.ones(3)
        probs = ensemble.meta_forward(maps[0], maps[1], maps[2], prev)
        pseudo = ensemble.generate_pseudo_labels(list(probs), PseudoLabelConfig(threshold=0.5))
        triples = [(maps[0][i], maps[1][i], maps[2][i]) for i in range(4)]
        result = ensemble.meta_refit(triples, pseudo, prev)
        refit_probs = ensemble.meta_forward(maps[0], maps[1], maps[2], result.weights)
        counted = agree = 0
        for i in range(4):
            keep = pseudo[i] != 255
            counted += keep.sum()
            agree += (refit_probs[i].argmax(-1)[keep] == pseudo[i][keep]).sum()
        assert agree / counted >= 0.99

    def test_refit_idempotent_on_frozen_predictions(self):
        # label noise keeps the objective non-separable (a finite optimum
        # exists); repeat refits then sit at the same minimum
        rng = np.random.default_rng(11)
        maps = [random_prob_maps(rng, 3, 6, 6, 3) for _ in range(3)]
        triples = [(maps[0][i], maps[1][i], maps[2][i]) for i in range(3)]
        pseudo = []
        for m in ensemble.meta_forward(maps[0], maps[1], maps[2], MetaWeights.ones(3)):
            lab = m.argmax(-1)
            flip = rng.random(lab.shape) < 0.15
            lab[flip] = rng.integers(0, 3, int(flip.sum()))
            pseudo.append(lab.astype(np.uint8))
        first = ensemble.meta_refit(triples, pseudo, MetaWeights.ones(3))
        second = ensemble.meta_refit(triples, pseudo, first.weights)
        assert abs(second.final_loss - first.final_loss) < 1e-4

    def test_warm_and_cold_start_converge_together(self):
        rng = np.random.default_rng(12)
        maps = [random_prob_maps(rng, 3, 8, 8, 4) for _ in range(3)]
        triples = [(maps[0][i], maps[1][i], maps[2][i]) for i in range(3)]
        labels = []
        for m in maps[2]:
            lab = m.argmax(-1)
            flip = rng.random(lab.shape) < 0.2
            lab[flip] = rng.integers(0, 4, int(flip.sum()))
            labels.append(lab.astype(np.uint8))
        warm = ensemble.meta_refit(triples, labels,
                                   MetaWeights(np.full(4, 3.0), np.ones(4), np.zeros(4)))
        cold = ensemble.meta_fit(triples, labels)
        assert abs(warm.final_loss - cold.final_loss) < 1e-4

    def test_entirely_ignored_pseudo_rejected(self):
        rng = np.random.default_rng(13)
        maps = [random_prob_maps(rng, 1, 4, 4, 3) for _ in range(3)]
        triples = [(maps[0][0], maps[1][0], maps[2][0])]
        with pytest.raises(ValueError, match="entirely ignored"):
            ensemble.meta_refit(triples, [np.full((4, 4), 255, dtype=np.uint8)],
                                MetaWeights.ones(3))


class TestPseudoLabels:
    def test_confident_pixel_kept(self):
        maps = [np.array([[[0.95, 0.05]]])]
        out = ensemble.generate_pseudo_labels(maps, PseudoLabelConfig(threshold=0.9))
        assert out[0][0, 0] == 0

    def test_uncertain_pixel_ignored(self):
        maps = [np.array([[[0.7, 0.3]]])]
        out = ensemble.generate_pseudo_labels(maps, PseudoLabelConfig(threshold=0.9))
        assert out[0][0, 0] == 255

    def test_zero_threshold_labels_everything(self):
        rng = np.random.default_rng(14)
        maps = list(random_prob_maps(rng, 3, 8, 8, 5))
        out = ensemble.generate_pseudo_labels(maps, PseudoLabelConfig(threshold=0.0))
        assert all((l != 255).all() for l in out)

    def test_coverage_monotone_and_nested(self):
        rng = np.random.default_rng(15)
        maps = list(random_prob_maps(rng, 5, 10, 10, 4))
        prev_cov = 1.1
        prev_kept = None
        for tau in (0.0, 0.3, 0.5, 0.7, 0.9, 0.95, 1.0):
            out = ensemble.generate_pseudo_labels(maps, PseudoLabelConfig(threshold=tau))
            cov = ensemble.pseudo_label_coverage(out)
            assert cov <= prev_cov
            kept = np.concatenate([(l != 255).reshape(-1) for l in out])
            if prev_kept is not None:
                assert (kept <= prev_kept).all()  # labeled set shrinks as tau grows
            prev_cov, prev_kept = cov, kept

    def test_per_class_quantile_guards_rare_classes(self):
        rng = np.random.default_rng(16)
        # class 2 argmax pixels are rare and low-confidence
        maps = []
        for _ in range(4):
            m = random_prob_maps(rng, 1, 8, 8, 3)[0]
            m[:, :, 2] *= 0.2
            m[0, 0] = [0.3, 0.3, 0.4]
            m /= m.sum(-1, keepdims=True)
            maps.append(m)
        cfg = PseudoLabelConfig(threshold=0.9, mode="per-class-quantile", class_fraction=0.5)
        out = ensemble.generate_pseudo_labels(maps, cfg)
        kept_classes = np.unique(np.concatenate([l[l != 255] for l in out]))
        assert 2 in kept_classes

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PseudoLabelConfig(threshold=1.5)
        with pytest.raises(ValueError):
            PseudoLabelConfig(mode="magic")
        with pytest.raises(ValueError):
            PseudoLabelConfig(class_fraction=0.0)


class TestWeightReport:
    def test_uniform_weights_constant_table(self):
        rows = ensemble.weight_report(MetaWeights.ones(4))
        assert all(r["w1"] == r["w2"] == r["w3"] == 1.0 for r in rows)
        assert [r["class"] for r in rows] == [0, 1, 2, 3]

    def test_planted_dominant_classifier_wins_class(self):
        rng = np.random.default_rng(17)
        k = 3
        maps = [random_prob_maps(rng, 8, 8, 8, k) for _ in range(3)]
        # classifier 3 is made oracle-accurate on class 0
        labels = []
        for i in range(8):
            lab = maps[2][i].argmax(-1).astype(np.uint8)
            labels.append(lab)
            for c in range(k):
                mask = lab == c
                maps[2][i][mask] = np.eye(k)[c] * 0.9 + 0.1 / k
        triples = [(maps[0][i], maps[1][i], maps[2][i]) for i in range(8)]
        result = ensemble.meta_fit(triples, labels)
        rows = ensemble.weight_report(result.weights)
        for r in rows:
            assert r["w3"] == max(r["w1"], r["w2"], r["w3"])

    def test_csv_round_trip_exact(self):
        rng = np.random.default_rng(18)
        w = MetaWeights(rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5))
        text = ensemble.weight_report_csv(w)
        rows = ensemble.weight_report_from_csv(text)
        assert rows == ensemble.weight_report(w)

    def test_json_round_trip_exact(self):
        rng = np.random.default_rng(19)
        w = MetaWeights(rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3))
        back = MetaWeights.from_json(json.loads(json.dumps(w.to_json())))
        assert np.array_equal(back.w1, w.w1)
        assert np.array_equal(back.w2, w.w2)
        assert np.array_equal(back.w3, w.w3)
