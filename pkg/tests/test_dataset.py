import filecmp
import json

import numpy as np
import pytest
from PIL import Image

from wsloc.dataset import (CLASS_LIBRARY, SpatialAnnotation, SynthSpec, compute_stats, load_dataset,
                           render_scene, sample_scene, scene_rng, synth_generate)
from wsloc.errors import ConfigError, FormatError, InputError

from conftest import small_spec


def write_fixture(root, labels="image,a,b\nx.png,1,0\ny.png,0,1\nz.png,1,1\n", boxes=None, splits=None):
    (root / "images").mkdir(parents=True)
    for i, n in enumerate(("x.png", "y.png", "z.png")):
        Image.fromarray(np.full((4, 6, 3), 10 * i, np.uint8)).save(root / "images" / n)
    (root / "labels.csv").write_text(labels)
    if boxes is not None:
        (root / "boxes.csv").write_text(boxes)
    if splits is not None:
        (root / "splits.json").write_text(json.dumps(splits))
    return root


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    files = [p.relative_to(a) for p in a.rglob("*") if p.is_file()]
    return all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


class TestSynth:
    def test_same_seed_same_bytes(self, tmp_path):
        spec = small_spec(6, 2, 2)
        synth_generate(spec, 11, tmp_path / "a")
        synth_generate(spec, 11, tmp_path / "b")
        synth_generate(spec, 12, tmp_path / "c")
        assert same_tree(tmp_path / "a", tmp_path / "b")
        assert not same_tree(tmp_path / "a", tmp_path / "c")

    def test_rerender_oracle(self, small_dataset):
        spec = small_spec()
        for s_idx, (split, _) in enumerate(spec.split_sizes):
            for i, name in enumerate(small_dataset.split_names(split)):
                present, glyphs, background = sample_scene(spec, scene_rng(5, s_idx, i))
                np.testing.assert_array_equal(small_dataset.load_image(name), render_scene(spec, background, glyphs))
                np.testing.assert_array_equal(small_dataset.labels(split)[i], present)
                assert sorted(g.class_id for g in glyphs) == list(np.flatnonzero(present))
                img = small_dataset.load_image(name)
                for c in range(spec.num_classes):
                    color_seen = np.any(np.all(img == CLASS_LIBRARY[c][2], axis=-1))
                    assert color_seen == bool(present[c])

    def test_annotations_cover_heads(self, small_dataset):
        for name in small_dataset.split_names("train"):
            labels = small_dataset._labels[name]
            boxes = small_dataset.boxes(name)
            assert sorted(b.class_id for b in boxes) == list(np.flatnonzero(labels))
            img = small_dataset.load_image(name)
            for b in boxes:
                x0, y0, x1, y1 = (int(v) for v in b.bbox)
                head = np.all(img == CLASS_LIBRARY[b.class_id][2], axis=-1)
                ys, xs = np.nonzero(head)
                assert xs.min() >= x0 and xs.max() <= x1 and ys.min() >= y0 and ys.max() <= y1

    def test_presence_frequencies(self):
        spec = SynthSpec()
        n = 2000
        bits = np.array([sample_scene(spec, scene_rng(0, 0, i))[0] for i in range(n)])
        p = np.asarray(spec.presence_probs)
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(bits.mean(axis=0) - p) < 3 * se)

    def test_summary_matches_labels(self, tmp_path):
        spec = small_spec(10, 3, 4)
        summary = synth_generate(spec, 2, tmp_path)
        ds = load_dataset(tmp_path)
        for split in ("train", "val", "test"):
            np.testing.assert_array_equal(compute_stats(ds, split).counts, summary.counts[split])

    @pytest.mark.parametrize("kw", [dict(num_classes=0), dict(num_classes=8),
                                    dict(presence_probs=(0.5,) * 4), dict(presence_probs=(1.0, .5, .5, .5, .5)),
                                    dict(height=30)])
    def test_spec_validation(self, kw):
        with pytest.raises(ConfigError):
            SynthSpec(**kw)

    def test_glyphs_distinct(self):
        assert len({c[1] for c in CLASS_LIBRARY}) == len(CLASS_LIBRARY)
        assert len({c[2] for c in CLASS_LIBRARY}) == len(CLASS_LIBRARY)


class TestLoad:
    def test_round_trip(self, small_dataset_dir):
        ds = load_dataset(small_dataset_dir)
        labels = (small_dataset_dir / "labels.csv").read_text().splitlines()
        assert labels[0] == "image," + ",".join(ds.class_names)
        first = labels[1].split(",")
        np.testing.assert_array_equal(ds.labels("train")[0], [int(v) for v in first[1:]])
        assert set(ds.splits) == {"train", "val", "test"}

    def test_hand_fixture(self, tmp_path):
        ds = load_dataset(write_fixture(tmp_path))
        np.testing.assert_array_equal(ds.labels("all"), [[1, 0], [0, 1], [1, 1]])
        assert ds.class_names == ["a", "b"] and ds.annotations is None

    def test_boxes_parsed(self, tmp_path):
        boxes = "image,class,x_min,y_min,x_max,y_max,cx,cy\nx.png,a,1,1,3,3,2,2\nz.png,b,0,0,5,3,2.5,1.5\n"
        ds = load_dataset(write_fixture(tmp_path, boxes=boxes))
        assert ds.boxes("x.png") == [SpatialAnnotation(0, (1, 1, 3, 3), (2, 2))]
        assert ds.boxes("y.png") == []
        assert load_dataset(tmp_path, annotations=False).annotations is None

    def test_missing_labels(self, tmp_path):
        with pytest.raises(FormatError, match="labels.csv"):
            load_dataset(tmp_path)

    def test_missing_image_row_named(self, tmp_path):
        write_fixture(tmp_path, labels="image,a\nx.png,1\nghost.png,0\n")
        with pytest.raises(FormatError, match="row 3"):
            load_dataset(tmp_path)

    @pytest.mark.parametrize("labels", ["image,a\nx.png,2\n", "image,a\nx.png,1,0\n", "img,a\nx.png,1\n"])
    def test_bad_labels(self, tmp_path, labels):
        with pytest.raises(FormatError):
            load_dataset(write_fixture(tmp_path, labels=labels))

    def test_bad_box_row_named(self, tmp_path):
        boxes = "image,class,x_min,y_min,x_max,y_max,cx,cy\nx.png,a,3,1,1,3,2,2\n"
        with pytest.raises(FormatError, match="row 2"):
            load_dataset(write_fixture(tmp_path, boxes=boxes))

    def test_split_with_unknown_image(self, tmp_path):
        with pytest.raises(FormatError, match="nope.png"):
            load_dataset(write_fixture(tmp_path, splits={"train": ["x.png", "nope.png"]}))

    def test_unknown_split(self, small_dataset):
        with pytest.raises(InputError):
            small_dataset.split_names("holdout")


class TestStats:
    def test_black_split(self, tmp_path):
        root = tmp_path
        (root / "images").mkdir()
        for n in ("a.png", "b.png"):
            Image.fromarray(np.zeros((3, 3, 3), np.uint8)).save(root / "images" / n)
        (root / "labels.csv").write_text("image,p,q\na.png,1,0\nb.png,1,1\n")
        st = compute_stats(load_dataset(root), "all")
        np.testing.assert_array_equal(st.mean_pixel, 0)
        np.testing.assert_array_equal(st.counts, [2, 1])
        assert st.image_count == 2

    def test_mean_pixel(self, tmp_path):
        ds = load_dataset(write_fixture(tmp_path))
        np.testing.assert_allclose(compute_stats(ds, "all").mean_pixel, [10, 10, 10])

    def test_empty_split(self, tmp_path):
        ds = load_dataset(write_fixture(tmp_path, splits={"train": ["x.png"], "val": []}))
        with pytest.raises(InputError):
            compute_stats(ds, "val")
