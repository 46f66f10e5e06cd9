import csv
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from sspot.data import (
    Dataset,
    DatasetManifest,
    EventClassSpec,
    SyntheticEventSpec,
    _background,
    compute_channel_stats,
    generate_synthetic_dataset,
    read_events,
    render_event,
    sample_path,
    synthesize_day,
    write_manifest,
    write_sample,
)
from sspot.geometry import iou


def small_spec(**kw):
    return SyntheticEventSpec.default(**kw)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return generate_synthetic_dataset(small_spec(), root, 6, seed=11, test_days=2)


def manual_dataset(root: Path, samples: list[np.ndarray], **kw) -> Dataset:
    c, t, h, w = samples[0].shape
    for i, s in enumerate(samples):
        write_sample(root, i, s)
    m = DatasetManifest(
        channels=c, timesteps_per_sample=t, image_h=h, image_w=w, num_classes=1, class_names=["X"],
        channel_mean=[0.0] * c, channel_std=[1.0] * c, sample_count=len(samples), **kw,
    )
    write_manifest(root, m)
    return Dataset(root)


def dir_files(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


class TestGenerator:
    def test_deterministic(self, tmp_path):
        a = generate_synthetic_dataset(small_spec(), tmp_path / "a", 3, seed=5)
        b = generate_synthetic_dataset(small_spec(), tmp_path / "b", 3, seed=5)
        assert dir_files(a.root) == dir_files(b.root)
        for f in dir_files(a.root):
            assert filecmp.cmp(a.root / f, b.root / f, shallow=False), f

    def test_seed_matters(self, tmp_path):
        a = generate_synthetic_dataset(small_spec(), tmp_path / "a", 1, seed=5)
        b = generate_synthetic_dataset(small_spec(), tmp_path / "b", 1, seed=6)
        assert sample_path(a.root, 0).read_bytes() != sample_path(b.root, 0).read_bytes()

    def test_files_and_byte_size(self, dataset):
        m = dataset.manifest
        assert m.sample_bytes == 8 * 8 * 128 * 192 * 4
        for i in range(len(dataset)):
            assert sample_path(dataset.root, i).stat().st_size == m.sample_bytes
        header = (dataset.root / "labels.csv").read_text().splitlines()[0]
        assert header == "day,frame,class_id,x,y,w,h"

    def test_splits(self, dataset):
        assert dataset.split("train") == [0, 1, 2, 3]
        assert dataset.split("test") == [4, 5]
        with pytest.raises(KeyError, match="available"):
            dataset.split("val")

    def test_labels_only_on_labeled_frames(self, dataset):
        with open(dataset.root / "labels.csv") as fh:
            frames = {int(r["frame"]) for r in csv.DictReader(fh)}
        assert frames <= {0, 2, 4, 6}

    def test_no_drop_labels_every_event_on_every_labeled_frame(self, dataset):
        events = read_events(dataset.root)
        for day in range(len(dataset)):
            mine = [e for e in events if e["day"] == day]
            assert len(dataset.boxes(day)) == 4 * len(mine)

    def test_motion_shows_in_labels(self, tmp_path):
        band = EventClassSpec("AR", "elongated-band", (80, 90), (20, 24), {0: 3.0}, (2.0, 0.0))
        spec = SyntheticEventSpec(classes=(band,), events_per_day=(1, 1))
        ds = generate_synthetic_dataset(spec, tmp_path, 2, seed=1)
        for day in range(2):
            xs = [b.x for b in sorted(ds.boxes(day), key=lambda b: b.frame)]
            assert np.allclose(np.diff(xs), 4.0, atol=2e-6)

    def test_drop_rate_is_binomial(self, tmp_path):
        ds = generate_synthetic_dataset(small_spec(drop_rate=0.2, events_per_day=(3, 3)), tmp_path, 60, seed=3)
        events = read_events(ds.root)
        dropped = sum(1 for e in events if not e["labeled"])
        n = len(events)
        # within 3 binomial standard deviations of 20%
        assert abs(dropped - 0.2 * n) <= 3 * np.sqrt(n * 0.2 * 0.8)
        labelled = sum(1 for e in events if e["labeled"])
        assert sum(len(ds.boxes(d)) for d in range(60)) == 4 * labelled

    def test_label_centers_match_planted_signal(self, tmp_path):
        """Re-measure each symmetric event's center from the field with its background removed."""
        spec = small_spec()
        ds = generate_synthetic_dataset(spec, tmp_path, 4, seed=21)
        ch_rng = np.random.default_rng([21, 2**31 - 1])
        offset = ch_rng.uniform(-50, 300, size=spec.channels)
        scale = ch_rng.uniform(0.5, 20.0, size=spec.channels)
        checked = 0
        for day in range(4):
            bg = _background(np.random.default_rng([21, day]), spec)
            raw = ds.read_raw(day)
            signal = (raw - offset[:, None, None, None]) / scale[:, None, None, None] - bg
            boxes = ds.boxes(day)
            for b in boxes:
                cs = spec.classes[b.class_id]
                if cs.morphology == "rotating-spiral" or any(o is not b and o.frame == b.frame and iou(o, b) > 0 for o in boxes):
                    continue
                ch, amp = next(iter(cs.signature.items()))
                field = signal[ch, b.frame] / amp
                ys, xs = np.mgrid[0:128, 0:192] + 0.5
                inside = ((xs - b.x) / (b.w / 2)) ** 2 + ((ys - b.y) / (b.h / 2)) ** 2 < 1
                wgt = np.where(inside, field, 0.0)
                cx, cy = (wgt * xs).sum() / wgt.sum(), (wgt * ys).sum() / wgt.sum()
                assert abs(cx - b.x) < 0.5 and abs(cy - b.y) < 0.5
                checked += 1
        assert checked >= 4

    def test_boxes_inside_image(self, dataset):
        for d in range(len(dataset)):
            for b in dataset.boxes(d):
                x0, y0, x1, y1 = b.corners
                assert x0 >= 0 and y0 >= 0 and x1 <= 192 and y1 <= 128

    def test_render_support_inscribed(self):
        from sspot.data import PlantedEvent

        ev = PlantedEvent(0, 50.0, 40.0, 30.0, 20.0, 0.0, 0.0, 0.0)
        pat = render_event(ev, "compact-blob", 0, 128, 192)
        ys, xs = np.nonzero(pat)
        assert xs.min() + 0.5 > 35 and xs.max() + 0.5 < 65
        assert ys.min() + 0.5 > 30 and ys.max() + 0.5 < 50

    def test_temporal_spec_classes_look_alike_per_frame(self):
        t = SyntheticEventSpec.temporal()
        assert t.classes[0].signature == t.classes[1].signature
        assert t.classes[0].morphology == t.classes[1].morphology
        assert t.classes[0].motion != t.classes[1].motion

    @pytest.mark.parametrize(
        "bad",
        [
            dict(drop_rate=1.0),
            dict(drop_rate=-0.1),
            dict(events_per_day=(3, 1)),
            dict(image_h=100),
        ],
    )
    def test_invalid_spec(self, bad):
        with pytest.raises(ValueError):
            small_spec(**bad)

    def test_invalid_class(self):
        with pytest.raises(ValueError):
            EventClassSpec("X", "cube", (1, 2), None, {0: 1.0})
        with pytest.raises(ValueError):
            EventClassSpec("X", "compact-blob", (0, 2), None, {0: 1.0})

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="cannot create"):
            generate_synthetic_dataset(small_spec(), blocker / "sub", 1, seed=0)

    def test_spec_roundtrip(self):
        s = SyntheticEventSpec.temporal(drop_rate=0.1)
        assert SyntheticEventSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s

    def test_synthesize_day_shape(self):
        values, events = synthesize_day(small_spec(), 0, 0)
        assert values.shape == (8, 8, 128, 192)
        assert 1 <= len(events) <= 3


class TestLoading:
    def test_normalised_train_stats(self, dataset):
        xs = np.concatenate([dataset.load_sample(i)[0].data.reshape(8, -1) for i in dataset.split("train")], axis=1)
        assert np.abs(xs.mean(axis=1)).max() < 1e-9
        assert np.abs(xs.std(axis=1) - 1).max() < 1e-9

    def test_constant_channel_normalises_to_zero(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = [rng.normal(size=(2, 8, 4, 4)).astype(np.float32) for _ in range(3)]
        for s in samples:
            s[1] = 3.7
        ds = manual_dataset(tmp_path, samples)
        mean, std = compute_channel_stats(ds, "train")
        m = ds.manifest
        m.channel_mean, m.channel_std = mean.tolist(), std.tolist()
        write_manifest(tmp_path, m)
        x, _ = Dataset(tmp_path).load_sample(0)
        assert not x.data[1].any()

    def test_two_point_stats(self, tmp_path):
        a = np.zeros((1, 8, 2, 2), np.float32)
        b = np.full((1, 8, 2, 2), 2.0, np.float32)
        mean, std = compute_channel_stats(manual_dataset(tmp_path, [a, b]), "train")
        assert mean[0] == 1.0 and std[0] == 1.0

    def test_zero_channel_floored(self, tmp_path, caplog):
        mean, std = compute_channel_stats(manual_dataset(tmp_path, [np.zeros((1, 8, 2, 2), np.float32)]), "train")
        assert mean[0] == 0.0 and std[0] == 1e-6
        assert "zero variance" in caplog.text

    def test_stats_permutation_invariant(self, dataset):
        m1, s1 = compute_channel_stats(dataset, [0, 1, 2, 3])
        m2, s2 = compute_channel_stats(dataset, [3, 1, 0, 2])
        np.testing.assert_allclose(m1, m2, rtol=1e-14)
        np.testing.assert_allclose(s1, s2, rtol=1e-14)

    def test_empty_split_rejected(self, dataset):
        with pytest.raises(ValueError):
            compute_channel_stats(dataset, [])

    def test_float32_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        x = rng.normal(scale=50, size=(3, 8, 4, 6))
        ds = manual_dataset(tmp_path, [x])
        got = ds.read_raw(0)
        assert np.max(np.abs(got - x) / np.abs(x)) < 1e-6

    def test_truncated_sample_reports_sizes(self, tmp_path):
        ds = manual_dataset(tmp_path, [np.zeros((1, 8, 2, 2), np.float32)])
        p = sample_path(tmp_path, 0)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ValueError, match="expected 128 bytes, found 124"):
            ds.load_sample(0)

    def test_missing_sample(self, tmp_path):
        ds = manual_dataset(tmp_path, [np.zeros((1, 8, 2, 2), np.float32)])
        sample_path(tmp_path, 0).unlink()
        with pytest.raises(FileNotFoundError):
            ds.load_sample(0)

    def test_index_out_of_range(self, dataset):
        with pytest.raises(IndexError):
            dataset.load_sample(99)

    def test_manifest_validation(self):
        with pytest.raises(ValueError):
            DatasetManifest(1, 8, 64, 64, 1, ["X"], [0.0], [0.0], 1)
        with pytest.raises(ValueError):
            DatasetManifest(1, 8, 64, 64, 1, ["X"], [0.0], [1.0], 1, labeled_frames=[8])
