import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from deocc.dataset import (DatasetConfig, augment_visible_subset, compose_scene,
                           corpus_content_hash, generate_sample, read_sample,
                           sample_rng, write_corpus, write_sample)
from deocc.errors import SampleFormatError, ValidationError
from deocc.scene import BinaryMask
from conftest import square_object


def test_config_validation():
    with pytest.raises(ValidationError):
        DatasetConfig(k_min=5, k_max=2)
    with pytest.raises(ValidationError):
        DatasetConfig(min_occlusion_fraction=1.0)


def test_same_seed_same_sample_bytes(tmp_path):
    cfg = DatasetConfig(seed=7, num_samples=2)
    a, b = generate_sample(cfg, 1), generate_sample(cfg, 1)
    write_sample(a, tmp_path / "a")
    write_sample(b, tmp_path / "b")
    assert corpus_content_hash(tmp_path / "a") == corpus_content_hash(tmp_path / "b")


def test_sample_rng_independent_of_order():
    cfg = DatasetConfig(seed=11)
    late = generate_sample(cfg, 5)
    # regenerating index 5 without touching 0..4 gives the same scene
    again = compose_scene(cfg, sample_rng(cfg.seed, 5))
    assert np.array_equal(late.canvas.array, again.canvas.array)


def test_forced_two_object_overlap_has_occluded_pair(small_corpus):
    # construction case: rank-2 square fully covering rank-1 square
    a = square_object(1, 1, 5, 5, 4, (1, 0, 0))
    b = square_object(2, 2, 4, 4, 7, (0, 1, 0))
    from deocc.scene import DepthMap, SceneSample, composite, derive_visible_masks
    objs = [a, b]
    depth = np.full((16, 16), 2.0)
    for o in sorted(objs, key=lambda o: o.stack_rank):
        depth[o.amodal_mask().array] = 2.0 - o.stack_rank
    s = SceneSample(canvas=composite(objs, (0, 0, 0), (16, 16)),
                    background_color=(0, 0, 0), objects=tuple(objs),
                    visible_masks=derive_visible_masks(objs),
                    depth=DepthMap(depth), occluded_pairs=((2, 1),))
    s.validate()
    assert s.occluded_pairs == ((2, 1),)


def test_k_distribution_uniform_within_5pct():
    cfg = DatasetConfig(seed=3, k_min=2, k_max=8)
    counts = np.zeros(9)
    n = 500
    for i in range(n):
        counts[len(generate_sample(cfg, i).objects)] += 1
    freqs = counts[2:9] / n
    assert np.all(np.abs(freqs - 1 / 7) <= 0.05), freqs


def test_every_sample_passes_scene_invariants():
    cfg = DatasetConfig(seed=21, k_min=2, k_max=6, canvas_size=48)
    for i in range(25):
        generate_sample(cfg, i).validate()


def test_depth_noise_option_quantized_and_nonnegative(tmp_path):
    cfg = DatasetConfig(seed=44, canvas_size=32, k_min=2, k_max=3, depth_noise_sigma=0.05)
    s = generate_sample(cfg, 0)
    d = s.depth.array
    assert d.min() >= 0.0
    # noise present: depth deviates from the clean integer levels somewhere
    assert np.abs(d - np.round(d)).max() > 0
    # still on the 1e-3 quantization grid, so the PGM round trip stays exact
    assert np.allclose(d, np.round(d / 1e-3) * 1e-3, atol=1e-12)
    write_sample(s, tmp_path / "n")
    r = read_sample(tmp_path / "n")
    assert np.array_equal(r.depth.array, d)


def test_depth_noise_small_sigma_keeps_order_recoverable():
    from deocc.occlusion import build_graph, order_accuracy
    cfg = DatasetConfig(seed=45, canvas_size=48, k_min=2, k_max=4, depth_noise_sigma=0.02)
    hits = total = 0
    for i in range(10):
        s = generate_sample(cfg, i)
        if not s.occluded_pairs:
            continue
        acc = order_accuracy(build_graph(s.visible_masks, s.depth), list(s.occluded_pairs))
        hits += acc == 1.0
        total += 1
    # rank gap is 1.0 >> 3 sigma, so ordering survives the noise
    assert hits == total


def test_depth_consistent_with_stacking(small_corpus):
    for s in small_corpus:
        for a, b in s.occluded_pairs:
            overlap = (s.object_by_id(a).amodal_mask().array
                       & s.object_by_id(b).amodal_mask().array)
            assert overlap.any()
            da = s.depth.array[overlap & s.object_by_id(a).amodal_mask().array]
            # occluder depth strictly smaller over the overlap (it owns those pixels)
            rank_b_higher = [o for o in s.objects
                             if o.stack_rank > s.object_by_id(b).stack_rank]
            covered = np.zeros_like(overlap)
            for o in rank_b_higher:
                covered |= o.amodal_mask().array
            visible_b_region = s.object_by_id(b).amodal_mask().array & ~covered
            if visible_b_region.any():
                assert s.depth.array[overlap].mean() < s.depth.array[visible_b_region].mean()


class TestRoundTrip:
    def test_lossless_round_trip(self, tmp_path, small_corpus):
        for i, s in enumerate(small_corpus[:4]):
            d = tmp_path / f"s{i}"
            write_sample(s, d)
            r = read_sample(d)
            assert np.array_equal(r.canvas.array, s.canvas.array)
            assert np.array_equal(r.depth.array, s.depth.array)
            assert r.background_color == s.background_color
            assert r.occluded_pairs == s.occluded_pairs
            assert r.seed == s.seed
            for o1, o2 in zip(s.objects, r.objects):
                assert o1.object_id == o2.object_id
                assert o1.category == o2.category
                assert o1.stack_rank == o2.stack_rank
                assert o1.placement == o2.placement
                assert np.array_equal(o1.amodal_rgba.array, o2.amodal_rgba.array)
            for oid in s.visible_masks:
                assert np.array_equal(r.visible_masks[oid].array, s.visible_masks[oid].array)

    def test_tampered_meta_raises_schema_error(self, tmp_path, small_corpus):
        d = tmp_path / "t"
        write_sample(small_corpus[0], d)
        meta = json.loads((d / "meta.json").read_text())
        meta["surprise"] = 1
        (d / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(SampleFormatError):
            read_sample(d)

    def test_tampered_payload_fails_checksum(self, tmp_path, small_corpus):
        d = tmp_path / "t2"
        write_sample(small_corpus[0], d)
        p = d / "scene.png"
        p.write_bytes(p.read_bytes()[:-1] + b"\x00")
        with pytest.raises(SampleFormatError):
            read_sample(d)

    def test_missing_file_raises(self, tmp_path, small_corpus):
        d = tmp_path / "t3"
        write_sample(small_corpus[0], d)
        (d / "depth.pgm").unlink()
        with pytest.raises(SampleFormatError):
            read_sample(d)

    def test_parallel_read_equals_serial(self, tmp_path):
        cfg = DatasetConfig(seed=9, num_samples=12, k_min=2, k_max=4, canvas_size=48)
        write_corpus(cfg, tmp_path)
        dirs = sorted(p for p in tmp_path.iterdir() if p.is_dir())
        serial = [read_sample(p) for p in dirs]
        with ThreadPoolExecutor(max_workers=4) as ex:
            parallel = list(ex.map(read_sample, dirs))
        for a, b in zip(serial, parallel):
            assert np.array_equal(a.canvas.array, b.canvas.array)
            assert a.occluded_pairs == b.occluded_pairs


class TestAugment:
    def test_single_object_scene(self):
        cfg = DatasetConfig(seed=2, k_min=1, k_max=1, min_occlusion_fraction=0.0)
        s = generate_sample(cfg, 0)
        ids, m_o, edges = augment_visible_subset(s, np.random.default_rng(0))
        assert ids == (1,)
        assert np.array_equal(m_o.array, s.visible_masks[1].array)

    def test_m_o_includes_occluders(self, small_corpus):
        s = next(x for x in small_corpus if x.occluded_pairs)
        occluder, occludee = s.occluded_pairs[0]
        ids, m_o, _ = augment_visible_subset(s, np.random.default_rng(0),
                                             subset_ids=(occludee,))
        assert (m_o.array & s.visible_masks[occluder].array).sum() == \
            s.visible_masks[occluder].area()

    def test_edge_map_matches_boundary_oracle(self, small_corpus):
        for s in small_corpus[:6]:
            rng = np.random.default_rng(1)
            ids, m_o, edges = augment_visible_subset(s, rng)
            included = set(ids) | {a for a, b in s.occluded_pairs if b in ids}
            expect = np.zeros(s.size(), dtype=bool)
            for oid in included:
                seg = s.visible_masks[oid].array
                h, w = seg.shape
                for y in range(h):
                    for x in range(w):
                        if not seg[y, x]:
                            continue
                        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                            ny, nx = y + dy, x + dx
                            if ny < 0 or ny >= h or nx < 0 or nx >= w or not seg[ny, nx]:
                                expect[y, x] = True
                                break
            assert np.array_equal(edges.array, expect)
            assert edges.area() == int(expect.sum())
