"""Tests for dataset loading, augmentation and the synthetic generator."""

import numpy as np
import pandas as pd
import pytest
from PIL import Image
from scipy.spatial.distance import pdist

from src.core.config import AugmentConfig, DataConfig, SyntheticConfig
from src.core.errors import ConfigError, DataError, OutputExistsError
from src.data.dataset import (
    ReidDataset,
    camera_domains,
    hybrid_view,
    load_dataset,
    parse_market_name,
    relabel_identities,
)
from src.data.synthetic import (
    domain_channel_means,
    generate_synthetic,
    hue_rotation,
    sample_appearances,
    smallest_domain_gap,
    write_synthetic,
)
from src.data.transforms import BatchBuilder, augment, load_rgb, to_tensor
from tests.conftest import tiny_config


def _write_image(path, colour=(10, 120, 200), size=(8, 16)) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", size, colour).save(path)


def _records(pids: list[int], domain: int = 0) -> pd.DataFrame:
    return pd.DataFrame(
        [(f"{i}.png", pid, 1 + i % 2, domain) for i, pid in enumerate(pids)],
        columns=["path", "pid", "camid", "domain"],
    )


class TestMarketLayout:
    """Test suite for Market-style directory trees."""

    def test_parse_names(self):
        """Test identity and camera parsing with and without sequence tags."""
        assert parse_market_name("0002_c1s1_000451_03.jpg") == (2, 1)
        assert parse_market_name("1500_c6_000001_00.png") == (1500, 6)
        assert parse_market_name("-1_c3s2_000100_01.jpg") == (-1, 3)
        assert parse_market_name("readme.jpg") is None

    def test_load_train_split(self, tmp_path):
        """Test junk identities are skipped and training pids are relabelled densely."""
        train = tmp_path / "market" / "bounding_box_train"
        for name in ["0007_c1s1_000001_00.jpg", "0007_c2s1_000002_00.jpg", "0042_c1s1_000003_00.jpg"]:
            _write_image(train / name)
        _write_image(train / "-1_c1s1_000004_00.jpg")
        (train / "Thumbs.db").write_text("not an image")

        dataset = load_dataset(tmp_path / "market", "market", "train", domain=2)

        assert len(dataset) == 3
        assert dataset.pids.tolist() == [0, 0, 1]
        assert dataset.records["raw_pid"].tolist() == [7, 7, 42]
        assert dataset.camids.tolist() == [1, 2, 1]
        assert dataset.domains.tolist() == [2, 2, 2]
        assert dataset.num_ids == 2

    def test_query_keeps_raw_pids(self, tmp_path):
        """Test evaluation splits are not relabelled."""
        _write_image(tmp_path / "ds" / "query" / "0042_c1s1_000001_00.jpg")

        dataset = load_dataset(tmp_path / "ds", "market", "query")

        assert dataset.pids.tolist() == [42]

    def test_unparseable_name(self, tmp_path):
        """Test an image whose name carries no labels."""
        _write_image(tmp_path / "ds" / "query" / "person.jpg")

        with pytest.raises(DataError, match="Cannot parse"):
            load_dataset(tmp_path / "ds", "market", "query")

    def test_missing_and_empty_splits(self, tmp_path):
        """Test missing roots, missing split directories and empty splits."""
        with pytest.raises(DataError, match="not found"):
            load_dataset(tmp_path / "nowhere", "market", "train")

        (tmp_path / "ds").mkdir()
        with pytest.raises(DataError, match="Missing split directory"):
            load_dataset(tmp_path / "ds", "market", "gallery")

        (tmp_path / "ds" / "bounding_box_test").mkdir()
        with pytest.raises(DataError, match="No usable images"):
            load_dataset(tmp_path / "ds", "market", "gallery")

    def test_camera_as_domain(self, tmp_path):
        """Test cameras become dense domain labels."""
        train = tmp_path / "ds" / "bounding_box_train"
        for name in ["0001_c3s1_000001_00.jpg", "0001_c5s1_000002_00.jpg", "0002_c3s1_000003_00.jpg"]:
            _write_image(train / name)

        dataset = load_dataset(tmp_path / "ds", "market", "train", camera_as_domain=True)

        assert dataset.domains.tolist() == [0, 1, 0]


class TestCsvLayout:
    """Test suite for CSV split files."""

    def test_load(self, tmp_path):
        """Test rows are read with relative paths resolved next to the file."""
        (tmp_path / "train.csv").write_text(
            "path,identity,camera,domain\nimg/a.png,5,1,0\nimg/b.png,5,2,1\nimg/c.png,9,1,1\n"
        )

        dataset = load_dataset(tmp_path, "csv", "train")

        assert dataset.pids.tolist() == [0, 0, 1]
        assert dataset.domains.tolist() == [0, 1, 1]
        assert dataset.paths[0] == str(tmp_path / "img" / "a.png")

    def test_invalid_row(self, tmp_path):
        """Test a negative identity is reported with its line number."""
        (tmp_path / "query.csv").write_text("path,identity,camera\na.png,1,1\nb.png,-3,1\n")

        with pytest.raises(DataError, match=":3: invalid record"):
            load_dataset(tmp_path, "csv", "query")

    def test_missing_file(self, tmp_path):
        """Test a split without its CSV file."""
        with pytest.raises(DataError, match="Missing split file"):
            load_dataset(tmp_path, "csv", "gallery")


class TestDatasetViews:
    """Test suite for relabelling, hybrid views and domain splits."""

    def test_relabel_is_order_preserving(self):
        """Test dense pids follow ascending raw ids."""
        records = relabel_identities(_records([30, 10, 30, 20]))

        assert records["pid"].tolist() == [2, 0, 2, 1]
        assert records["raw_pid"].tolist() == [30, 10, 30, 20]

    def test_hybrid_offsets_identities(self):
        """Test two sources with 10 and 20 identities give 30 distinct identities."""
        first = ReidDataset(relabel_identities(_records(list(range(10)) * 2, domain=0)))
        second = ReidDataset(relabel_identities(_records(list(range(20)) * 2, domain=1)))

        hybrid = hybrid_view([first, second])

        assert hybrid.num_ids == 30
        assert hybrid.pids.max() == 29
        assert hybrid.num_domains == 2
        assert sorted(hybrid.by_domain()) == [0, 1]
        assert hybrid.by_domain()[1].num_ids == 20

    def test_hybrid_rejects_mixed_storage(self):
        """Test in-memory and on-disk datasets cannot be combined."""
        records = _records([0, 0])
        in_memory = ReidDataset(records, images=np.zeros((2, 4, 4, 3), dtype=np.uint8))

        with pytest.raises(ValueError, match="in-memory"):
            hybrid_view([in_memory, ReidDataset(records)])

    def test_camera_domains_per_source(self):
        """Test every (domain, camera) pair gets its own label."""
        records = pd.concat([_records([0, 0, 1], domain=0), _records([0, 1], domain=1)])

        relabelled = camera_domains(records)

        assert relabelled["domain"].tolist() == [0, 1, 0, 2, 3]

    def test_class_indices_and_subset(self):
        """Test identity groupings and subsetting keep images aligned."""
        images = np.arange(4, dtype=np.uint8).reshape(4, 1, 1, 1).repeat(3, axis=3)
        dataset = ReidDataset(_records([1, 0, 1, 0]), images=images)

        groups = dataset.class_indices()
        part = dataset.subset([2, 0])

        assert {k: v.tolist() for k, v in groups.items()} == {0: [1, 3], 1: [0, 2]}
        assert part.images[:, 0, 0, 0].tolist() == [2, 0]
        assert part.pids.tolist() == [1, 1]

    def test_missing_columns(self):
        """Test records without the required columns."""
        with pytest.raises(ValueError, match="missing columns"):
            ReidDataset(pd.DataFrame({"path": ["a.png"]}))


class TestTransforms:
    """Test suite for decoding, augmentation and batching."""

    def test_load_rgb_resizes(self, tmp_path):
        """Test decoding converts to RGB at the requested size."""
        path = tmp_path / "grey.png"
        Image.new("L", (10, 20), 128).save(path)

        image = load_rgb(path, 16, 8)

        assert image.shape == (16, 8, 3)
        assert image.dtype == np.uint8

    def test_load_rgb_unreadable(self, tmp_path):
        """Test a corrupt file raises a data error."""
        path = tmp_path / "broken.png"
        path.write_bytes(b"not a png")

        with pytest.raises(DataError, match="Cannot read image"):
            load_rgb(path, 16, 8)

    def test_disabled_augmentation_is_identity(self, rng):
        """Test zero magnitudes leave the image untouched."""
        config = AugmentConfig(flip_prob=0, pad=0, brightness=0, contrast=0, saturation=0, hue=0)
        image = rng.integers(0, 256, size=(16, 8, 3), dtype=np.uint8)

        assert np.array_equal(augment(image, rng, config), image)

    def test_flip_only(self, rng):
        """Test a certain flip mirrors the image horizontally."""
        config = AugmentConfig(flip_prob=1, pad=0, brightness=0, contrast=0, saturation=0, hue=0)
        image = rng.integers(0, 256, size=(16, 8, 3), dtype=np.uint8)

        assert np.array_equal(augment(image, rng, config), image[:, ::-1])

    def test_augmentation_reproducible(self):
        """Test identical generators give identical augmented images."""
        image = np.random.default_rng(0).integers(0, 256, size=(16, 8, 3), dtype=np.uint8)

        first = augment(image, np.random.default_rng(5), AugmentConfig())
        second = augment(image, np.random.default_rng(5), AugmentConfig())

        assert first.shape == image.shape
        assert np.array_equal(first, second)

    def test_to_tensor_normalizes(self):
        """Test channel-wise normalization and layout."""
        images = np.full((2, 4, 2, 3), 255, dtype=np.uint8)

        batch = to_tensor(images, [0.5, 0.5, 0.5], [0.5, 0.5, 0.5])

        assert batch.shape == (2, 3, 4, 2)
        assert float(batch.min()) == pytest.approx(1.0)

    def test_batch_builder_in_memory(self):
        """Test batches come from in-memory images, resized to the model input."""
        images = np.zeros((3, 32, 16, 3), dtype=np.uint8)
        dataset = ReidDataset(_records([0, 1, 2]), images=images)
        builder = BatchBuilder(dataset, DataConfig(), 16, 8)

        assert builder.batch([2, 0]).shape == (2, 3, 16, 8)
        assert builder.all().shape == (3, 3, 16, 8)


class TestSyntheticData:
    """Test suite for the procedural multi-domain generator."""

    def test_suite_structure(self, config, suite):
        """Test split sizes, labels and the query rule."""
        synthetic = config.data.synthetic

        assert len(suite.sources) == 2
        for domain, source in enumerate(suite.sources):
            assert len(source) == synthetic.ids_per_domain * synthetic.images_per_id
            assert source.domains.tolist() == [domain] * len(source)
            assert source.pids.max() == synthetic.ids_per_domain - 1
            assert source.images.shape[1:] == (16, 8, 3)

        # One camera-1 query per held-out identity, the rest in the gallery
        assert len(suite.query) == synthetic.target_ids
        assert set(suite.query.camids.tolist()) == {1}
        assert len(suite.gallery) == synthetic.target_ids * (synthetic.images_per_id - 1)
        assert set(suite.query.domains.tolist()) == {2}

    def test_deterministic(self, config):
        """Test the same seed renders identical pixels."""
        first = generate_synthetic(config.data.synthetic)
        second = generate_synthetic(config.data.synthetic)

        assert np.array_equal(first.sources[1].images, second.sources[1].images)
        assert np.array_equal(first.gallery.images, second.gallery.images)

    def test_every_domain_pair_separated(self, config, suite):
        """Test the channel means of every pair of domains, held-out included, differ by the gap."""
        means = domain_channel_means(suite)

        assert means.shape == (3, 3)
        assert pdist(means).min() >= config.data.synthetic.min_domain_gap

    def test_default_styles_separated(self):
        """Test all four default domain styles keep their channel means apart."""
        synthetic = SyntheticConfig(
            ids_per_domain=10, images_per_id=4, target_ids=10, height=32, width=16
        )
        means = domain_channel_means(generate_synthetic(synthetic))

        assert len(means) == 4
        assert smallest_domain_gap(means) >= synthetic.min_domain_gap

    def test_close_domains_rejected(self):
        """Test a domain gap no style can reach is refused."""
        config = tiny_config(DATA__SYNTHETIC__MIN_DOMAIN_GAP="1000")

        with pytest.raises(ConfigError, match="too close"):
            generate_synthetic(config.data.synthetic)

    def test_smallest_domain_gap(self):
        """Test the gap is the nearest pair's Euclidean distance."""
        means = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [10.0, 0.0, 0.0]])

        assert smallest_domain_gap(means) == pytest.approx(5.0)
        assert smallest_domain_gap(means[:1]) == float("inf")

    def test_identity_colours_separated(self, rng):
        """Test clothing colours differ by the configured gap."""
        appearances = sample_appearances(20, rng, min_gap=5.0)

        for i, a in enumerate(appearances):
            for b in appearances[i + 1 :]:
                assert np.abs(a.signature() - b.signature()).max() >= 5.0

    def test_hue_rotation_preserves_grey(self):
        """Test the grey axis is fixed by a hue rotation."""
        grey = np.array([100.0, 100.0, 100.0])

        assert np.allclose(hue_rotation(73.0) @ grey, grey)
        assert np.allclose(hue_rotation(0.0), np.eye(3))

    def test_name_count_mismatch(self):
        """Test the source name list must match the domain count."""
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(num_domains=2), ["only_one"])

    def test_write_and_reload(self, config, suite, tmp_path):
        """Test the written tree loads back with the same labels."""
        write_synthetic(suite, tmp_path)

        train = load_dataset(tmp_path / "source_1", "market", "train", domain=1)
        query = load_dataset(tmp_path / "target", "market", "query")
        gallery = load_dataset(tmp_path / "target", "market", "gallery")

        assert train.pids.tolist() == suite.sources[1].pids.tolist()
        assert query.pids.tolist() == suite.query.pids.tolist()
        assert len(gallery) == len(suite.gallery)
        assert np.array_equal(load_rgb(query.paths[0], 16, 8), suite.query.images[0])

    def test_refuses_to_overwrite(self, suite, tmp_path):
        """Test existing output needs force."""
        write_synthetic(suite, tmp_path)

        with pytest.raises(OutputExistsError):
            write_synthetic(suite, tmp_path)
        assert len(write_synthetic(suite, tmp_path, force=True)) == 3
