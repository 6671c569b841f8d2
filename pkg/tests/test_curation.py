import csv
import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facadefixer.curation import (
    CurationConfig,
    curate,
    dedup,
    grayscale,
    laplacian_variance,
    negative_filter,
    quality_gate,
    write_manifest,
)
from facadefixer.geometry import RasterImage


def components_oracle(items, threshold):
    # depth-first search over the explicit pairwise graph
    ids = [i for i, _ in items]
    vec = {i: np.asarray(v, float) / np.linalg.norm(v) for i, v in items}
    adj = {i: [j for j in ids if j != i and float(vec[i] @ vec[j]) >= threshold] for i in ids}
    seen, keep = set(), set()
    for i in ids:
        if i in seen:
            continue
        stack, comp = [i], []
        seen.add(i)
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        keep.add(min(comp))
    return keep


def clustered_items(seed, n=30, dim=6):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(4, dim))
    return [(f"img{i:03d}", centers[i % 4] + rng.normal(scale=0.15, size=dim)) for i in range(n)]


class TestDedup:
    def test_identical(self):
        assert dedup([("b", [1, 2]), ("a", [1, 2]), ("c", [2, 4])], 0.95) == {"a"}

    def test_orthogonal(self):
        assert dedup([("a", [1, 0]), ("b", [0, 1])], 0.95) == {"a", "b"}

    def test_chain(self):
        t = 0.9
        a = [1.0, 0.0]
        b = [np.cos(0.4), np.sin(0.4)]
        c = [np.cos(0.8), np.sin(0.8)]
        assert np.cos(0.4) >= t > np.cos(0.8)
        keep = dedup([("a", a), ("b", b), ("c", c)], t)
        assert keep == {"a"}

    def test_zero_norm_named(self):
        with pytest.raises(ValueError, match="bad"):
            dedup([("ok", [1, 0]), ("bad", [0, 0])], 0.9)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_components_oracle(self, seed):
        items = clustered_items(seed)
        for t in (0.8, 0.9, 0.95, 0.99):
            assert dedup(items, t) == components_oracle(items, t)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        items = clustered_items(seed, n=15)
        shuffled = items[:]
        random.Random(seed).shuffle(shuffled)
        assert dedup(items, 0.9) == dedup(shuffled, 0.9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.5, 0.98), st.floats(0.0, 0.5))
    def test_monotone_in_threshold(self, seed, t, bump):
        items = clustered_items(seed, n=15)
        hi = min(t + bump, 1.0)
        assert dedup(items, t) <= dedup(items, hi)


class TestNegativeFilter:
    def test_equal_to_negative(self):
        v = np.array([0.0, 1.0, 0.0])
        verdict = negative_filter(v, [("windows", v), ("pipes", np.array([1.0, 0, 0]))], [("crack", np.array([0, 0, 1.0]))])
        assert (verdict.keep, verdict.concept) == (False, "windows")

    def test_aligned_with_category(self):
        v = np.array([0.0, 0.0, 1.0])
        verdict = negative_filter(v, [("windows", np.array([0, 1.0, 0]))], [("crack", v)])
        assert verdict.keep

    def test_borderline_kept(self):
        e = np.zeros(16)
        e[0] = 1.0
        neg = np.ones(4)  # cosine with e[:4] = 1/2
        pos = np.ones(16)  # cosine with e = 1/4
        neg16 = np.concatenate([neg, np.zeros(12)])
        assert negative_filter(e, [("pipes", neg16)], [("crack", pos)], margin=0.25).keep
        assert not negative_filter(e, [("pipes", neg16)], [("crack", pos)], margin=0.2499).keep

    def test_no_concepts(self):
        assert negative_filter(np.ones(3), []).keep


def checkerboard(n):
    ys, xs = np.mgrid[0:n, 0:n]
    g = ((xs + ys) % 2 * 255).astype(np.uint8)
    return RasterImage.from_array(np.repeat(g[..., None], 3, axis=2))


def direct_laplacian_variance(img):
    g = grayscale(img)
    vals = []
    for y in range(1, g.shape[0] - 1):
        for x in range(1, g.shape[1] - 1):
            acc = 0.0
            for dy, dx, k in ((0, 0, -4), (-1, 0, 1), (1, 0, 1), (0, -1, 1), (0, 1, 1)):
                acc += k * g[y + dy, x + dx]
            vals.append(acc)
    mean = sum(vals) / len(vals)
    return sum((v - mean) ** 2 for v in vals) / len(vals)


class TestQualityGate:
    cfg = CurationConfig()

    def test_constant_fails_blur(self):
        r = quality_gate(RasterImage.filled(1024, 1024, (128, 128, 128)), self.cfg)
        assert not r.passed and r.reason == "blur"
        assert r.checks[2].value == 0.0

    def test_thin_fails_aspect(self):
        img = RasterImage.from_array(np.random.default_rng(0).integers(0, 256, (3000, 100, 3), dtype=np.uint8))
        r = quality_gate(img, CurationConfig(min_side=64))
        assert not r.passed and r.reason == "aspect"
        assert r.checks[1].value == pytest.approx(1 / 30)

    def test_check_order(self):
        r = quality_gate(RasterImage.filled(100, 3000, (1, 1, 1)), self.cfg)
        assert [c.name for c in r.checks] == ["resolution", "aspect", "blur"]
        assert r.reason == "resolution"

    def test_checkerboard_passes(self):
        r = quality_gate(checkerboard(1024), self.cfg)
        assert r.passed
        # interior pixels all sit at +-4*255 grey levels
        assert r.checks[2].value == pytest.approx(1020.0**2)

    @pytest.mark.parametrize("seed", range(3))
    def test_vectorised_matches_direct(self, seed):
        img = RasterImage.from_array(np.random.default_rng(seed).integers(0, 256, (17, 23, 3), dtype=np.uint8))
        assert laplacian_variance(img) == pytest.approx(direct_laplacian_variance(img), rel=1e-12)
        assert laplacian_variance(checkerboard(12)) == pytest.approx(direct_laplacian_variance(checkerboard(12)))

    def test_passed_iff_all_checks(self):
        r = quality_gate(checkerboard(600), self.cfg)
        assert r.passed == all(c.passed for c in r.checks)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CurationConfig(dedup_threshold=1.0)
        with pytest.raises(ValueError):
            CurationConfig(aspect_range=(3, 1))
        with pytest.raises(ValueError):
            CurationConfig.from_dict({"min_sid": 3})


def test_curate_pipeline(tmp_path):
    sharp = checkerboard(64)
    flat = RasterImage.filled(64, 64, (120, 120, 120))
    clutter = RasterImage.filled(64, 64, (10, 200, 10))
    images = [("b", sharp), ("a", sharp), ("c", flat), ("d", clutter)]
    cfg = CurationConfig(min_side=32)
    vec = {sharp.digest(): [1.0, 0, 0], flat.digest(): [0, 0, 1.0], clutter.digest(): [0, 1.0, 0]}
    text = {"windows": [0, 1.0, 0]}
    result = curate(images, cfg, lambda im: np.array(vec[im.digest()]), lambda t: np.array(text.get(t, [0.2, 0.2, 0.2])))
    assert result.kept == ["a"]
    assert result.dropped == {"b": "duplicate", "c": "quality: blur", "d": "negative concept: windows"}
    write_manifest(result, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["kept"] == ["a"]
    rows = list(csv.DictReader(open(tmp_path / "quality.csv")))
    assert [r["image_id"] for r in rows] == ["a", "b", "c", "d"]
