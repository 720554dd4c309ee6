import numpy as np
import pytest

from app.core.errors import ConfigurationError, ImageFormatError, MissingArtifactError
from app.db.checkpoint import CheckpointFormatError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from app.db.dataset import image_stem, list_images, write_file_list
from app.db.manifest import read_manifest, write_manifest
from app.db.pgm import encode_pgm, load_pgm, save_pgm
from app.schemas.image import EIGHT_BIT_LEVELS, Image
from app.services.dataset_service import gen_synthetic_dataset


def test_pgm_file_preserves_every_eight_bit_level(tmp_path):
    codes = np.arange(256, dtype=np.uint8).reshape(16, 16)
    image = Image.eight_bit(EIGHT_BIT_LEVELS[codes])
    loaded = load_pgm(save_pgm(tmp_path / "levels.pgm", image))
    assert np.array_equal(loaded.values, image.values)
    assert loaded.is_eight_bit


def test_pgm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "commented.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    assert load_pgm(path).values.tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize(
    "data",
    [
        b"P2\n2 1\n255\n0 255",
        b"P5\n2 1\n65535\n" + bytes(4),
        b"P5\n2 2\n255\n" + bytes(3),
        b"P5\n2",
    ],
)
def test_malformed_pgm_files_are_rejected(tmp_path, data):
    path = tmp_path / "bad.pgm"
    path.write_bytes(data)
    with pytest.raises(ImageFormatError):
        load_pgm(path)


def test_missing_pgm_names_the_path(tmp_path):
    with pytest.raises(MissingArtifactError) as excinfo:
        load_pgm(tmp_path / "absent.pgm")
    assert "absent.pgm" in excinfo.value.message


def test_continuous_images_are_written_at_the_nearest_level(tmp_path):
    encoded = encode_pgm(Image(values=np.array([[0.0, 0.3, 1.0]])))
    assert encoded.endswith(bytes([0, 76, 255]))


def test_checkpoint_keeps_names_shapes_dtypes_and_header(tmp_path):
    tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(1, 2, 3), "b": np.array([0.25, -1.5])}
    path = save_checkpoint(tmp_path / "net.ckpt", tensors, {"kind": "refiner", "step": 3})
    loaded, header = load_checkpoint(path)
    assert header == {"kind": "refiner", "step": 3}
    assert loaded["a.weight"].dtype == np.float32 and loaded["a.weight"].shape == (1, 2, 3)
    assert np.array_equal(loaded["b"], tensors["b"])
    assert not (tmp_path / "net.ckpt.tmp").exists()


def test_checkpoint_corruption_is_detected():
    data = encode_checkpoint({"w": np.ones(4)}, {"kind": "x"})
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(data[:-5])
    with pytest.raises(CheckpointFormatError):
        encode_checkpoint({"w": np.ones(2, dtype=np.int32)}, {})


def test_image_stem_strips_derived_suffixes():
    assert image_stem("img0001.pgm") == "img0001"
    assert image_stem("img0001.denoised.pgm") == "img0001"
    assert image_stem("img0001_a2.yhat.denoised.pgm") == "img0001_a2"


def test_listing_skips_derived_images(tmp_path, gray_image):
    for name in ("b.pgm", "a.pgm", "a.denoised.pgm"):
        save_pgm(tmp_path / name, gray_image)
    assert [p.name for p in list_images(tmp_path)] == ["a.pgm", "b.pgm"]
    assert [p.name for p in list_images(tmp_path, ".denoised")] == ["a.denoised.pgm"]
    with pytest.raises(MissingArtifactError):
        list_images(tmp_path, ".refined")


def test_file_list_is_relative_to_its_directory(tmp_path):
    paths = [tmp_path / "img0000.pgm", tmp_path / "img0001.pgm"]
    listing = write_file_list(tmp_path, paths)
    assert listing.read_text(encoding="utf-8") == "img0000.pgm\nimg0001.pgm\n"


def test_manifests_are_identical_for_identical_runs(tmp_path, gray_image):
    out = tmp_path / "out"
    artifact = save_pgm(out / "x.pgm", gray_image)
    first = write_manifest(out, "add-noise", "abc", 7, [artifact], notes={"b": "2", "a": "1"}).read_bytes()
    second = write_manifest(out, "add-noise", "abc", 7, [artifact], notes={"a": "1", "b": "2"}).read_bytes()
    assert first == second
    manifest = read_manifest(out)
    assert list(manifest.artifacts) == ["x.pgm"]
    assert manifest.reads_clean is False


def test_synthetic_dataset_is_deterministic_per_seed():
    first = gen_synthetic_dataset(3, 16, seed=11, workers=2)
    again = gen_synthetic_dataset(3, 16, seed=11, workers=1)
    other = gen_synthetic_dataset(3, 16, seed=12, workers=1)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(first, again))
    assert not np.array_equal(first[0].values, other[0].values)
    assert all(image.is_eight_bit and image.shape == (16, 16) for image in first)


def test_synthetic_dataset_rejects_degenerate_sizes():
    with pytest.raises(ConfigurationError):
        gen_synthetic_dataset(0, 16, seed=1)
    with pytest.raises(ConfigurationError):
        gen_synthetic_dataset(2, 4, seed=1)
