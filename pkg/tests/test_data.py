from pathlib import Path

import numpy as np
import pytest

from fogseg.core.tensor import Tensor
from fogseg.data.labels import class_names, colorize, palette, raw_to_train_ids
from fogseg.data.manifest import DatasetManifest, ManifestEntry, SegmentationDataset
from fogseg.data.sample import (Sample, augment_hflip, decode_disparity, encode_labels, hflip, load_labels, load_rgb,
                                luminance, luminance_tensor, make_ld, save_labels, save_prediction, save_rgb,
                                validate_sample)
from fogseg.data.synth import HAZE_GRAY, synth_fog_corpus, write_corpus
from fogseg.errors import DataError, ShapeError


def test_luminance_of_white_is_1_03():
    assert luminance(np.ones((3, 2, 2))) == pytest.approx(np.full((1, 2, 2), 1.03))


def test_luminance_custom_coefficients():
    rgb = np.stack([np.full((2, 2), v) for v in (0.2, 0.4, 0.6)])
    out = luminance(rgb, (1.0, 0.0, 0.0))
    assert np.allclose(out, 0.2)


def test_luminance_tensor_matches_numpy():
    rgb = np.random.default_rng(0).random((2, 3, 4, 4)).astype(np.float32)
    batched = luminance_tensor(Tensor(rgb)).numpy()
    assert np.allclose(batched[1], luminance(rgb[1]), atol=1e-6)


def test_decode_disparity():
    raw = np.array([[0, 1, 257, 513]], dtype=np.uint16)
    assert np.allclose(decode_disparity(raw, 2.0)[0], [[0.0, 0.0, 0.5, 1.0]])
    with pytest.raises(DataError):
        decode_disparity(raw.astype(np.uint8), 2.0)
    with pytest.raises(DataError):
        decode_disparity(raw, 0.0)


def test_encode_labels():
    assert encode_labels(np.array([0, 18, 19, 255])).tolist() == [0, 18, 255, 255]


def test_raw_ids_map_to_train_ids():
    # road=7, sky=23, bicycle=33, unlabeled=0
    assert raw_to_train_ids(np.array([7, 23, 33, 0])).tolist() == [0, 10, 18, 255]
    assert len(class_names()) == 19 and class_names()[0] == 'road'
    assert palette().shape == (19, 3)


def test_colorize_blacks_out_ignored():
    img = colorize(np.array([[0, 255]]))
    assert img.shape == (1, 2, 3)
    assert img[0, 1].tolist() == [0, 0, 0]
    assert img[0, 0].tolist() == palette()[0].tolist()


def test_validate_sample():
    good = Sample(np.zeros((3, 4, 4)), np.zeros((4, 4)), np.zeros((1, 4, 4)))
    assert validate_sample(good) is good
    with pytest.raises(DataError):
        validate_sample(Sample(np.full((3, 4, 4), 1.5), np.zeros((4, 4))))
    with pytest.raises(DataError):
        validate_sample(Sample(np.zeros((3, 4, 4)), np.full((4, 4), 20)))
    with pytest.raises(ShapeError):
        validate_sample(Sample(np.zeros((3, 4, 4)), np.zeros((4, 5))))


def test_make_ld_variants():
    sample = Sample(np.ones((3, 2, 2)), np.zeros((2, 2)), np.full((1, 2, 2), 0.5))
    ld = make_ld(sample, use_depth=True)
    assert ld.shape == (2, 2, 2)
    assert np.allclose(ld[1], 0.5)
    assert make_ld(sample, use_depth=False).shape == (1, 2, 2)
    with pytest.raises(DataError):
        make_ld(Sample(np.ones((3, 2, 2)), np.zeros((2, 2))), use_depth=True)


def test_hflip_is_an_involution():
    rng = np.random.default_rng(0)
    sample = Sample(rng.random((3, 2, 4)), rng.integers(0, 19, (2, 4)), rng.random((1, 2, 4)))
    flipped = hflip(sample)
    assert np.array_equal(flipped.labels[:, 0], sample.labels[:, -1])
    twice = hflip(flipped)
    assert np.array_equal(twice.rgb, sample.rgb) and np.array_equal(twice.depth, sample.depth)


def test_augment_hflip_follows_the_rng():
    sample = Sample(np.arange(24.0).reshape(3, 2, 4), np.arange(8).reshape(2, 4))
    draws = np.random.default_rng(5).random(20) < 0.5
    rng = np.random.default_rng(5)
    for flip in draws:
        out = augment_hflip(sample, rng)
        expected = sample.labels[:, ::-1] if flip else sample.labels
        assert np.array_equal(out.labels, expected), f"flip={flip}"
    assert draws.any() and not draws.all()


def test_png_roundtrip(tmp_path):
    rgb = np.random.default_rng(1).integers(0, 256, (3, 4, 6)).astype(np.float32) / 255.0
    save_rgb(tmp_path / 'a.png', rgb)
    assert np.allclose(load_rgb(tmp_path / 'a.png'), rgb, atol=1e-6)
    labels = np.array([[0, 1, 255], [18, 2, 3]], dtype=np.uint8)
    save_labels(tmp_path / 'l.png', labels)
    assert np.array_equal(load_labels(tmp_path / 'l.png'), labels)
    assert load_labels(tmp_path / 'l.png', size=(4, 6)).shape == (4, 6)
    save_prediction(tmp_path / 'p.png', labels)
    assert (tmp_path / 'p.png').exists()


def test_synth_corpus_is_seeded():
    a, b = synth_fog_corpus(2, (16, 32), seed=5), synth_fog_corpus(2, (16, 32), seed=5)
    assert np.array_equal(a.clean[0].rgb, b.clean[0].rgb)
    assert np.array_equal(a.hazy[1].labels, b.hazy[1].labels)
    alpha = a.alphas[0]
    assert np.allclose(a.hazy[0].rgb, (1 - alpha) * a.clean[0].rgb + alpha * HAZE_GRAY, atol=1e-6)
    with pytest.raises(DataError):
        synth_fog_corpus(1, (12, 32))


def test_write_corpus_splits(corpus_dir):
    root, paths = corpus_dir
    assert sorted(paths) == ['clean_train', 'clean_val', 'hazy_train', 'hazy_val']
    train = DatasetManifest.read(paths['clean_train'])
    val = DatasetManifest.read(paths['clean_val'])
    assert (len(train), len(val)) == (6, 2)
    assert train.has_disparity and train.disparity_max > 0


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / 'missing.txt')
    bad = tmp_path / 'bad.txt'
    bad.write_text("only-one-column.png\n", encoding='utf-8')
    with pytest.raises(DataError):
        DatasetManifest.read(bad)
    dangling = tmp_path / 'dangling.txt'
    dangling.write_text("a.png\tb.png\n", encoding='utf-8')
    with pytest.raises(DataError):
        DatasetManifest.read(dangling)


def test_manifest_write_read(tmp_path):
    manifest = DatasetManifest(tmp_path, 'x', [ManifestEntry(Path('b.png'),
                                                             Path('lb.png'))])
    manifest.write(tmp_path / 'x.txt')
    again = DatasetManifest.read(tmp_path / 'x.txt', check_files=False)
    assert again.entries == manifest.entries
    assert not again.has_disparity


def test_dataset_batches_are_seeded(corpus_dir):
    _, paths = corpus_dir
    manifest = DatasetManifest.read(paths['clean_train'])
    ds = SegmentationDataset(manifest, 16, 32, use_depth=True, workers=2)
    a = [b.names for b in ds.iter_batches(4, np.random.default_rng(9), augment=True)]
    b = [b.names for b in ds.iter_batches(4, np.random.default_rng(9), augment=True)]
    assert a == b
    assert [len(n) for n in a] == [4, 2], "the last batch may be smaller"
    batch = next(ds.iter_batches(4))
    assert batch.rgb.shape == (4, 3, 16, 32)
    assert batch.ld.shape == (4, 2, 16, 32)
    assert batch.labels.shape == (4, 16, 32)
    assert ds.pixel_counts().sum() == 6 * 16 * 32


def test_dataset_needs_disparity_for_depth(tmp_path):
    manifest = DatasetManifest(tmp_path, 'x', [ManifestEntry(Path('a.png'),
                                                             Path('b.png'))])
    with pytest.raises(DataError):
        SegmentationDataset(manifest, 16, 32, use_depth=True)


def test_threaded_loading_matches_serial_and_reads_from_disk(tmp_path):
    paths = write_corpus(synth_fog_corpus(5, size=(16, 32), seed=5), tmp_path, val_fraction=0.2)
    manifest = DatasetManifest.read(paths['clean_train'])
    serial = SegmentationDataset(manifest, 16, 32, workers=1)
    threaded = SegmentationDataset(manifest, 16, 32, workers=3)
    order = [3, 0, 2, 1, 3, 0]
    for a, b in zip(serial.load_many(order), threaded.load_many(order)):
        assert a.name == b.name
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.labels, b.labels)

    # samples are decoded on every request, never kept between batches
    replacement = (tmp_path / 'clean' / '0001.png').read_bytes()
    (tmp_path / 'clean' / '0000.png').write_bytes(replacement)
    assert np.array_equal(threaded.load_sample(0).rgb, serial.load_sample(1).rgb)
