import logging
import os

import numpy as np
import pytest
import torch
from PIL import Image

from protoalign.data import (
    DatasetSpec,
    IngestionError,
    SyntheticDatasetSpec,
    generate_synthetic,
    load_dataset,
    read_split,
    tree_digest,
)


def write_tree(root, layout, split_lines=None, size=(6, 5)):
    """``layout`` maps class -> list of file names; each image gets a distinct solid color."""
    lines = []
    for ci, (cls, files) in enumerate(sorted(layout.items())):
        os.makedirs(root / cls, exist_ok=True)
        for fi, fn in enumerate(files):
            arr = np.full((size[0], size[1], 3), 40 * ci + 10 * fi, dtype=np.uint8)
            Image.fromarray(arr).save(root / cls / fn)
            lines.append(f"{cls}/{fn} {'train' if fi % 2 == 0 else 'test'}")
    (root / "split.txt").write_text("\n".join(split_lines if split_lines is not None else lines) + "\n")


class TestLoadDataset:
    def test_sorted_order(self, tmp_path):
        write_tree(tmp_path, {"b": ["1.png", "0.png"], "a": ["x.png", "y.png"]},
                   ["b/1.png train", "a/y.png train", "b/0.png train", "a/x.png train"])
        ds = load_dataset(DatasetSpec(str(tmp_path), image_size=(6, 5)), "train")
        assert ds.ids == ["a/x.png", "a/y.png", "b/0.png", "b/1.png"]
        assert ds.labels.tolist() == [0, 0, 1, 1]
        assert ds.class_names == ["a", "b"]
        assert ds.images.shape == (4, 3, 6, 5)
        assert float(ds.images.min()) >= 0 and float(ds.images.max()) <= 1

    def test_resize(self, tmp_path):
        write_tree(tmp_path, {"a": ["0.png"]}, ["a/0.png test"], size=(12, 10))
        ds = load_dataset(DatasetSpec(str(tmp_path), image_size=(6, 5)), "test")
        assert ds.images.shape == (1, 3, 6, 5)

    def test_empty_split_warns(self, tmp_path, caplog):
        write_tree(tmp_path, {"a": ["0.png"]}, ["a/0.png train"])
        with caplog.at_level(logging.WARNING):
            ds = load_dataset(DatasetSpec(str(tmp_path), image_size=(6, 5)), "test")
        assert len(ds) == 0 and "empty" in caplog.text

    def test_checksum_stable(self, tmp_path):
        write_tree(tmp_path, {"a": ["0.png", "1.png"], "b": ["0.png", "1.png"]})
        spec = DatasetSpec(str(tmp_path), image_size=(6, 5))
        assert load_dataset(spec, "train").checksum() == load_dataset(spec, "train").checksum()

    def test_missing_and_corrupt_files_named(self, tmp_path):
        write_tree(tmp_path, {"a": ["0.png"]}, ["a/0.png test", "a/gone.png test"])
        with pytest.raises(IngestionError, match="gone.png"):
            load_dataset(DatasetSpec(str(tmp_path), image_size=(6, 5)), "test")
        (tmp_path / "a" / "bad.png").write_bytes(b"garbage")
        (tmp_path / "split.txt").write_text("a/bad.png test\n")
        with pytest.raises(IngestionError, match="bad.png"):
            load_dataset(DatasetSpec(str(tmp_path), image_size=(6, 5)), "test")

    def test_split_file_errors(self, tmp_path):
        (tmp_path / "s.txt").write_text("a/0.png train\na/0.png test\n")
        with pytest.raises(IngestionError, match="twice"):
            read_split(tmp_path / "s.txt")
        (tmp_path / "s.txt").write_text("a/0.png validation\n")
        with pytest.raises(IngestionError):
            read_split(tmp_path / "s.txt")
        with pytest.raises(IngestionError):
            load_dataset(DatasetSpec(str(tmp_path / "nowhere")))


class TestSynthetic:
    spec = SyntheticDatasetSpec(num_classes=3, train_per_class=4, test_per_class=2, image_size=32,
                                part_size=(8, 10), seed=5)

    def test_deterministic_tree(self, tmp_path):
        generate_synthetic(self.spec, str(tmp_path / "a"))
        generate_synthetic(self.spec, str(tmp_path / "b"))
        assert tree_digest(str(tmp_path / "a")) == tree_digest(str(tmp_path / "b"))
        other = SyntheticDatasetSpec(**{**self.spec.__dict__, "seed": 6})
        generate_synthetic(other, str(tmp_path / "c"))
        assert tree_digest(str(tmp_path / "a")) != tree_digest(str(tmp_path / "c"))

    def test_balanced_counts(self, tmp_path):
        ds_spec = generate_synthetic(self.spec, str(tmp_path))
        train, test = load_dataset(ds_spec, "train"), load_dataset(ds_spec, "test")
        assert torch.bincount(train.labels).tolist() == [4, 4, 4]
        assert torch.bincount(test.labels).tolist() == [2, 2, 2]
        assert train.images.shape[1:] == (3, 32, 32)
        assert set(read_split(ds_spec.split_path).values()) == {"train", "test"}

    def test_class_names(self):
        names = SyntheticDatasetSpec().class_names()
        assert len(names) == 8 and len(set(names)) == 8
        with pytest.raises(ValueError):
            SyntheticDatasetSpec(num_classes=13).class_names()
