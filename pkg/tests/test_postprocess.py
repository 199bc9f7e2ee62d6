"""Peak detection, greedy tag grouping, back-filling and test-time averaging."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import round_trip
from posegraph.config import DecodeConfig, SceneSpec
from posegraph.heads import HeadOutput
from posegraph.postprocess import (KeypointCandidate, decode, detect_peaks, fill_missing, flip_average,
                                   group_candidates, multi_scale_average, predict_maps, swap_pairs)
from posegraph.synth import generate_scene
from posegraph.tensor import Tensor


def bump(shape, r, c, peak, sigma=1.0):
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    return peak * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma**2))


def cand(k, tag, score=0.9, row=0, col=0):
    return KeypointCandidate(k, row, col, score, np.atleast_1d(float(tag)))


class TestDetectPeaks:
    def test_single_bump(self):
        hm = bump((8, 8), 3, 4, 0.9)[None]
        out = detect_peaks(hm, 0.1, refine=False)
        assert [(c.row, c.col, c.score) for c in out] == [(3, 4, 0.9)]
        assert (out[0].x, out[0].y) == (18.0, 14.0)

    def test_uniform_below_threshold(self):
        assert detect_peaks(np.full((2, 6, 6), 0.05), 0.1) == []

    def test_equal_peaks_tie_break(self):
        hm = np.zeros((1, 8, 8))
        hm[0, 5, 5] = hm[0, 1, 1] = 0.8
        assert [(c.row, c.col) for c in detect_peaks(hm, 0.1)] == [(1, 1), (5, 5)]

    def test_max_per_type_keeps_best(self):
        hm = np.zeros((1, 9, 9))
        for i, (r, c) in enumerate([(0, 0), (0, 4), (0, 8), (4, 0), (8, 8)]):
            hm[0, r, c] = 0.3 + 0.1 * i
        out = detect_peaks(hm, 0.1, max_per_type=2)
        assert [c.score for c in out] == [pytest.approx(0.7), pytest.approx(0.6)]

    def test_refinement_moves_toward_larger_neighbour(self):
        hm = np.zeros((1, 5, 5))
        hm[0, 2, 2], hm[0, 2, 3], hm[0, 1, 2] = 1.0, 0.5, 0.4
        c = detect_peaks(hm, 0.1, stride=4)[0]
        assert (c.x, c.y) == ((2.75) * 4, (2.25) * 4)

    def test_tags_read_at_peak(self):
        hm = np.zeros((2, 4, 4))
        hm[1, 2, 3] = 0.9
        tags = np.arange(2 * 16, dtype=float).reshape(2, 4, 4)
        c = detect_peaks(hm, 0.1, tagmaps=tags)[0]
        assert c.k == 1 and c.tag[0] == tags[1, 2, 3]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
    def test_peak_definition(self, seed, thr):
        hm = np.random.default_rng(seed).uniform(size=(2, 6, 7))
        got = {(c.k, c.row, c.col) for c in detect_peaks(hm, thr, max_per_type=100, refine=False)}
        want = set()
        for k in range(2):
            for r in range(6):
                for c in range(7):
                    nb = hm[k, max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
                    if hm[k, r, c] >= thr and hm[k, r, c] == nb.max():
                        want.add((k, r, c))
        assert got == want
        assert all(c.score >= thr for c in detect_peaks(hm, thr))


class TestGroupCandidates:
    def test_close_tags_join(self):
        inst = group_candidates([cand(0, 0.10), cand(1, 0.12)])
        assert len(inst) == 1 and inst[0].present.all()
        assert inst[0].mean_tag[0] == pytest.approx(0.11)

    def test_far_tags_split(self):
        assert len(group_candidates([cand(0, 0.1), cand(1, 5.0)])) == 2

    def test_occupied_slot_starts_new_instance(self):
        inst = group_candidates([cand(0, 0.1, 0.9), cand(0, 0.1, 0.8)])
        assert len(inst) == 2

    def test_nearest_instance_chosen(self):
        cs = [cand(0, 0.0, row=0), cand(0, 3.0, 0.8, row=1), cand(1, 2.4)]
        inst = group_candidates(cs, tag_threshold=1.0)
        assert len(inst) == 2
        assert inst[1].present[1] and not inst[0].present[1]

    def test_empty(self):
        assert group_candidates([]) == []

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.floats(-3, 3), st.floats(0.2, 1.0)), max_size=25),
           st.floats(0.2, 2.0))
    def test_partition_and_triangle_bound(self, raw, thr):
        cands = [cand(k, t, s, row=i) for i, (k, t, s) in enumerate(raw)]
        inst = group_candidates(cands, thr, num_keypoints=4)
        assert sum(int(p.present.sum()) for p in inst) == len(cands)
        for p in inst:
            tags = p.tags[p.present, 0]
            assert len(tags) >= 1
            if len(tags) > 1:
                assert tags.max() - tags.min() < 2 * thr
            assert p.mean_tag[0] == pytest.approx(tags.mean(), abs=1e-12)


class TestFillMissing:
    def test_fills_best_scored_cell(self):
        hm = np.zeros((2, 4, 4))
        hm[1, 0, 0], hm[1, 3, 3] = 0.9, 0.6
        tags = np.zeros((2, 4, 4))
        tags[1, 0, 0], tags[1, 3, 3] = 5.0, 0.0
        inst = group_candidates([cand(0, 0.0)], num_keypoints=2)
        fill_missing(inst, hm, tags)
        p = inst[0]
        assert p.present.all() and p.filled[1] and not p.filled[0]
        assert tuple(p.cells[1]) == (3, 3)
        assert p.instance_score == pytest.approx((0.9 + 0.6) / 2)  # filled slots count toward the score


class TestFlipAverage:
    pairs = ((1, 2),)

    def test_self_consistent(self):
        hm = np.random.default_rng(0).uniform(size=(3, 4, 5))
        flipped = swap_pairs(hm, self.pairs)[..., ::-1]
        np.testing.assert_allclose(flip_average(hm, flipped, self.pairs), hm, rtol=0, atol=0)

    def test_zero_flipped_branch(self):
        hm = np.random.default_rng(1).uniform(size=(3, 4, 4))
        assert np.array_equal(flip_average(hm, np.zeros_like(hm), self.pairs), hm / 2)

    def test_hand_built_asymmetric_peak(self):
        hm = np.zeros((1, 4, 4))
        hm[0, 1, 1] = 0.8
        flipped = np.zeros((1, 4, 4))
        flipped[0, 1, 2] = 0.4  # mirror of column 1 is column 2 in a width-4 map
        out = flip_average(hm, flipped, ())
        assert out[0, 1, 1] == pytest.approx(0.6)
        assert out.sum() == pytest.approx(0.6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            flip_average(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)), ())

    def test_batched_layout(self):
        hm = np.random.default_rng(2).uniform(size=(2, 3, 4, 4))
        flipped = swap_pairs(hm, self.pairs)[..., ::-1]
        np.testing.assert_allclose(flip_average(hm, flipped, self.pairs), hm)


class TestMultiScale:
    def test_identical_maps(self):
        m = np.random.default_rng(0).uniform(size=(2, 5, 6))
        assert np.array_equal(multi_scale_average([m, m, m], [0.5, 1, 2], (5, 6)), m)

    def test_single_scale_identity(self):
        m = np.random.default_rng(0).uniform(size=(2, 5, 6))
        assert np.array_equal(multi_scale_average([m], [1.0], (5, 6)), m)

    def test_constants_average(self):
        maps = [np.full((1, 4, 4), 0.3), np.full((1, 8, 8), 0.6), np.full((1, 16, 16), 0.9)]
        np.testing.assert_allclose(multi_scale_average(maps, [0.5, 1, 2], (8, 8)), 0.6, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            multi_scale_average([])

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            multi_scale_average([np.zeros((1, 2, 2))], [1.0, 2.0])


class TestPredictMaps:
    @staticmethod
    def forward(batch):
        # deterministic stand-in: heatmaps are the per-channel 4x4 average pool of the image
        n, c, h, w = batch.shape
        pooled = batch.reshape(n, c, h // 4, 4, w // 4, 4).mean(axis=(3, 5))
        return HeadOutput(Tensor(pooled), Tensor(pooled * 2))

    def test_scale_one_matches_plain(self):
        img = np.random.default_rng(0).uniform(size=(3, 32, 32))
        hm, tags = predict_maps(self.forward, img, scales=[1.0])
        np.testing.assert_array_equal(hm, self.forward(img[None]).heatmaps.data[0])
        np.testing.assert_array_equal(tags, 2 * hm)

    def test_flip_of_symmetric_input(self):
        img = np.random.default_rng(0).uniform(size=(3, 32, 32))
        img = (img + img[:, :, ::-1]) / 2
        plain, _ = predict_maps(self.forward, img)
        flipped, _ = predict_maps(self.forward, img, flip=True, flip_pairs=())
        np.testing.assert_allclose(flipped, plain, rtol=1e-14)

    def test_multi_scale_shape(self):
        img = np.random.default_rng(0).uniform(size=(3, 32, 32))
        hm, tags = predict_maps(self.forward, img, scales=[0.5, 1.0, 2.0])
        assert hm.shape == (3, 8, 8) and tags.shape == (3, 8, 8)


def test_round_trip_recovers_ground_truth():
    """Encoded ground truth with separated tags decodes back to the same people and cells."""
    spec = SceneSpec()
    grid = (spec.image_size[1] // 4, spec.image_size[0] // 4)
    cfg = DecodeConfig(detection_threshold=0.3, fill_missing=False, tag_threshold=1.0)
    checked = 0
    for index in range(60):
        out = round_trip(generate_scene(spec, index)[1], grid, cfg)
        if out is None:
            continue
        want, found, count = out
        assert found == want and count == len(want), index
        checked += 1
    assert checked >= 50
