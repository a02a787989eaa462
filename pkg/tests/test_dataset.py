"""Patching, augmentation, and loader determinism contracts."""
import numpy as np
import pytest

from coronagan.dataset import (
    LoaderConfig,
    Patch,
    UnpairedLoader,
    augment_flip,
    extract_patches,
    flip_horizontal,
    make_loader,
)
from coronagan.phantom import Domain


def grid_image(h, w, channels=1):
    """Asymmetric image whose value encodes its own (row, col)."""
    base = (np.arange(h)[:, None] * w + np.arange(w)[None, :]).astype(np.float32)
    base = base / base.max()
    return np.repeat(base[None], channels, axis=0)


class TestExtractPatches:
    def test_exact_tiling_576(self):
        img = grid_image(576, 576)
        mask = (img[0] * 3).astype(np.uint8) % 3
        patches = extract_patches(img, mask, 288, Domain.OCT, source_id="s")
        assert [p.origin for p in patches] == [(0, 0), (0, 288), (288, 0), (288, 288)]
        assert all(p.image.shape == (1, 288, 288) for p in patches)

    def test_partial_tiles_discarded_600(self):
        img = grid_image(600, 600)
        mask = np.zeros((600, 600), np.uint8)
        patches = extract_patches(img, mask, 288, Domain.OCT)
        assert len(patches) == 4
        assert {p.origin for p in patches} == {(0, 0), (0, 288), (288, 0), (288, 288)}

    def test_reassembly_recovers_cropped_mask(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 100, 130), dtype=np.float32)
        mask = rng.integers(0, 3, (100, 130)).astype(np.uint8)
        size = 40
        patches = extract_patches(img, mask, size, Domain.HISTOLOGY)
        rebuilt = np.full((80, 120), 255, np.uint8)
        for p in patches:
            r, c = p.origin
            rebuilt[r : r + size, c : c + size] = p.mask
        np.testing.assert_array_equal(rebuilt, mask[:80, :120])

    def test_too_small_sample_rejected(self):
        img = grid_image(100, 100)
        with pytest.raises(ValueError, match="smaller than patch size"):
            extract_patches(img, np.zeros((100, 100), np.uint8), 288, Domain.OCT)


class TestFlip:
    def asym_patch(self):
        image = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32) / 4
        mask = np.array([[0, 1], [2, 0]], dtype=np.uint8)
        return Patch(image=image, mask=mask, domain=Domain.OCT, source_id="p", origin=(0, 0))

    def test_forced_flip_mirrors_both(self):
        flipped = flip_horizontal(self.asym_patch())
        np.testing.assert_allclose(flipped.image[0] * 4, [[2, 1], [4, 3]])
        np.testing.assert_array_equal(flipped.mask, [[1, 0], [0, 2]])

    def test_double_flip_is_identity(self):
        p = self.asym_patch()
        q = flip_horizontal(flip_horizontal(p))
        np.testing.assert_array_equal(q.image, p.image)
        np.testing.assert_array_equal(q.mask, p.mask)

    def test_flip_frequency_near_half(self):
        p = self.asym_patch()
        rng = np.random.default_rng(123)
        n = 10_000
        flips = sum(augment_flip(p, rng).image[0, 0, 0] != p.image[0, 0, 0] for _ in range(n))
        assert 0.47 <= flips / n <= 0.53

    def test_class_histogram_preserved_under_flip(self):
        rng = np.random.default_rng(5)
        image = rng.random((3, 8, 8), dtype=np.float32)
        mask = rng.integers(0, 3, (8, 8)).astype(np.uint8)
        p = Patch(image=image, mask=mask, domain=Domain.HISTOLOGY, source_id="", origin=(0, 0))
        q = flip_horizontal(p)
        np.testing.assert_array_equal(np.bincount(p.mask.ravel()), np.bincount(q.mask.ravel()))


class TestLoader:
    def test_batches_deterministic_given_seed(self, tiny_dataset):
        cfg = LoaderConfig(patch_size=32, batch_size=3, shuffle_seed=9)
        a = make_loader(tiny_dataset, cfg)
        b = make_loader(tiny_dataset, cfg)
        for epoch in (0, 1):
            for ba, bb in zip(a.epoch_batches(epoch), b.epoch_batches(epoch)):
                np.testing.assert_array_equal(ba.oct_images, bb.oct_images)
                np.testing.assert_array_equal(ba.hist_images, bb.hist_images)
                np.testing.assert_array_equal(ba.oct_masks, bb.oct_masks)
                np.testing.assert_array_equal(ba.hist_masks, bb.hist_masks)

    def test_different_epochs_differ(self, tiny_dataset):
        loader = make_loader(tiny_dataset, LoaderConfig(patch_size=32, batch_size=3, shuffle_seed=9))
        b0 = next(iter(loader.epoch_batches(0)))
        b1 = next(iter(loader.epoch_batches(1)))
        assert not np.array_equal(b0.oct_images, b1.oct_images)

    def test_batch_shapes_and_normalization(self, tiny_dataset):
        loader = make_loader(tiny_dataset, LoaderConfig(patch_size=32, batch_size=4, shuffle_seed=0))
        batch = next(iter(loader))
        assert batch.oct_images.shape == (4, 1, 32, 32)
        assert batch.hist_images.shape == (4, 3, 32, 32)
        assert batch.oct_masks.shape == batch.hist_masks.shape == (4, 32, 32)
        for arr in (batch.oct_images, batch.hist_images):
            assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_smaller_domain_fully_covered_each_epoch(self, tmp_path):
        # 3 OCT sources vs 6 histology sources; every OCT patch must appear
        from coronagan.phantom import PhantomDistribution, generate_dataset

        manifest = generate_dataset(3, 6, PhantomDistribution(height=16, width=16), str(tmp_path), seed=4)
        loader = UnpairedLoader(manifest, LoaderConfig(patch_size=16, batch_size=2, shuffle_seed=1))
        oct_ids = {p.image.tobytes() for p in loader.oct_patches}
        for epoch in range(3):
            seen = set()
            for batch in loader.epoch_batches(epoch):
                for img in batch.oct_images:
                    seen.add(img.tobytes())
            # flips rewrite bytes; compare against both orientations
            both = oct_ids | {p.image[:, :, ::-1].tobytes() for p in loader.oct_patches}
            assert seen <= both
            covered = sum(1 for p in loader.oct_patches if p.image.tobytes() in seen or p.image[:, :, ::-1].tobytes() in seen)
            assert covered == len(loader.oct_patches)

    def test_missing_file_named_in_error(self, tiny_dataset, tmp_path):
        import json

        records = [json.loads(line) for line in open(tiny_dataset)]
        records[0]["path"] = "missing.png"
        bad = tmp_path / "manifest.jsonl"
        with open(bad, "w") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")
        with pytest.raises(FileNotFoundError, match="missing.png"):
            UnpairedLoader(str(bad), LoaderConfig(patch_size=16, batch_size=1))
