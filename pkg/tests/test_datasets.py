import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from conftest import random_cloud
from lidar_uda.datasets import (ClassMap, DomainSpec, FrameDataset, GapSpec, KittiLayoutAdapter,
                                MemoryDataset, NuScenesAdapter, SceneDistribution, WaymoAdapter,
                                apply_class_map, load_frame, load_manifest, make_domain, make_domain_pair,
                                merge, nuscenes_class_map, quantize_frame, semantickitti_class_map,
                                split_counts, standard_domains, waymo_class_map, write_frame)
from lidar_uda.geometry import (IGNORE_ID, SHARED_CLASSES, CameraModel, CameraView, Frame, PointCloud,
                                SensorConfig)

# ---------------------------------------------------------------------------
# Frame files


def _frame(rng, n=20, cams=1):
    cloud = PointCloud(rng.uniform(-10, 10, (n, 3)), rng.uniform(0, 1, n), rng.integers(0, 300, n))
    views = []
    for _ in range(cams):
        k = np.array([[50.0, 0, 32], [0, 50.0, 16], [0, 0, 1]])
        views.append(CameraView(CameraModel(k, np.eye(4), 64, 32), rng.integers(0, 256, (32, 64, 3), dtype=np.uint8)))
    return quantize_frame(Frame(cloud, views, "f"))


@given(st.integers(0, 10_000), st.integers(0, 50), st.integers(0, 2))
def test_write_load_roundtrip(tmp_path_factory, seed, n, cams):
    frame = _frame(np.random.default_rng(seed), n, cams)
    d = tmp_path_factory.mktemp("f")
    write_frame(frame, d)
    back = load_frame(d, name="f")
    assert back.cloud.xyz.tobytes() == frame.cloud.xyz.tobytes()
    assert back.cloud.intensity.tobytes() == frame.cloud.intensity.tobytes()
    assert np.array_equal(back.cloud.labels, frame.cloud.labels)
    assert len(back.views) == cams
    for a, b in zip(back.views, frame.views):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.camera.intrinsics, b.camera.intrinsics)
        assert np.array_equal(a.camera.extrinsics, b.camera.extrinsics)


def test_two_point_frame_bytes(tmp_path):
    cloud = PointCloud([[1.0, -2.0, 0.5], [3.25, 0.0, -1.5]], [0.25, 1.0], [40, 70])
    write_frame(Frame(cloud), tmp_path)
    expected = struct.pack("<8f", 1.0, -2.0, 0.5, 0.25, 3.25, 0.0, -1.5, 1.0)
    assert (tmp_path / "points.bin").read_bytes() == expected
    assert (tmp_path / "labels.bin").read_bytes() == bytes([40, 0, 0, 0, 70, 0, 0, 0])
    assert (tmp_path / "points.bin").read_bytes()[:4] == bytes.fromhex("0000803f")


def test_truncated_points_file(tmp_path):
    (tmp_path / "points.bin").write_bytes(b"\0" * 17)
    with pytest.raises(ValueError, match="corrupt frame"):
        load_frame(tmp_path)


def test_label_count_mismatch(tmp_path):
    (tmp_path / "points.bin").write_bytes(b"\0" * 32)
    (tmp_path / "labels.bin").write_bytes(b"\0" * 4)
    with pytest.raises(ValueError, match="label mismatch"):
        load_frame(tmp_path)


def test_upper_label_bits_ignored_on_read(tmp_path):
    (tmp_path / "points.bin").write_bytes(b"\0" * 16)
    (tmp_path / "labels.bin").write_bytes(struct.pack("<I", (7 << 16) | 44))
    assert load_frame(tmp_path).cloud.labels.tolist() == [44]


# ---------------------------------------------------------------------------
# Class maps


def _raw_id(taxonomy, name):
    from lidar_uda.datasets import TAXONOMIES

    return {v: k for k, v in TAXONOMIES[taxonomy][0].items()}[name]


def test_nuscenes_bus_is_other_vehicle():
    cmap = nuscenes_class_map("NK")
    out = apply_class_map([_raw_id("nuscenes", "bus")], cmap)
    assert cmap.shared_names[out[0]] == "oth. vehicle"
    assert nuscenes_class_map("NW").shared_names[out[0]] == "bus"


def test_kitti_riders_ignored():
    cmap = semantickitti_class_map()
    out = apply_class_map([_raw_id("semantickitti", n) for n in ("bicyclist", "motorcyclist", "moving-bicyclist")],
                          cmap)
    assert out.tolist() == [IGNORE_ID] * 3
    assert cmap.shared_names[apply_class_map([_raw_id("semantickitti", "bicycle")], cmap)[0]] == "bicycle"


def test_identity_map_and_idempotence():
    cmap = ClassMap.identity()
    labels = np.array([0, 3, 9, IGNORE_ID, 5])
    assert apply_class_map(labels, cmap).tolist() == labels.tolist()


@given(st.lists(st.integers(0, 300), max_size=60), st.sampled_from(["nk", "kitti", "waymo"]))
def test_class_map_total_and_idempotent(raw, which):
    cmap = {"nk": nuscenes_class_map(), "kitti": semantickitti_class_map(), "waymo": waymo_class_map()}[which]
    out = apply_class_map(raw, cmap)
    assert all(0 <= v < 10 or v == IGNORE_ID for v in out)
    ident = ClassMap.identity(cmap.shared_names)
    assert apply_class_map(out, ident).tolist() == out.tolist()


def test_class_map_rejects_out_of_range():
    with pytest.raises(ValueError):
        ClassMap({1: 12})


# ---------------------------------------------------------------------------
# Synthetic domains

_TINY = SensorConfig(beams=16, azimuth_steps=60, vertical_fov=(-25, 3), max_range=40)


def _domain(name, sensor=_TINY, frames=6, **kw):
    return DomainSpec(name, sensor, SceneDistribution(**kw), "shared", frames)


def test_pair_is_deterministic(tmp_path):
    gap = GapSpec(_domain("A"), _domain("B", SensorConfig(beams=32, azimuth_steps=60)))
    a = make_domain_pair(gap, 5, tmp_path / "1")
    b = make_domain_pair(gap, 5, tmp_path / "2")
    for m1, m2 in zip(a, b):
        assert m1.frames == m2.frames
        for p1, p2 in zip(m1.frame_paths(), m2.frame_paths()):
            assert (p1 / "points.bin").read_bytes() == (p2 / "points.bin").read_bytes()
            assert (p1 / "labels.bin").read_bytes() == (p2 / "labels.bin").read_bytes()


def test_pair_scenes_disjoint(tmp_path):
    src, tgt = make_domain_pair(GapSpec(_domain("A"), _domain("B")), 1, tmp_path)
    s = {(p / "scene.json").read_text() for p in src.frame_paths()}
    t = {(p / "scene.json").read_text() for p in tgt.frame_paths()}
    assert not s & t


def test_null_gap_class_histograms_match(tmp_path):
    # Points inside one frame are strongly correlated, so one point is drawn per
    # frame to keep the contingency test's independence assumption.
    gap = GapSpec(_domain("A", frames=150), _domain("B", frames=150))
    manifests = make_domain_pair(gap, 3, tmp_path)
    rng = np.random.default_rng(0)
    table = []
    for m in manifests:
        labels = []
        for split in ("train", "val"):
            ds = FrameDataset(load_manifest(m.root, split))
            labels += [int(rng.choice(f.cloud.labels)) for f in ds]
        table.append(np.bincount(np.where(np.array(labels) == IGNORE_ID, 10, labels), minlength=11))
    table = np.array(table)
    # pool sparse columns so every expected count is large enough for the χ² approximation
    common = table.sum(0) >= 20
    pooled = np.column_stack([table[:, common], table[:, ~common].sum(1)])
    pooled = pooled[:, pooled.sum(0) > 0]
    assert chi2_contingency(pooled)[1] > 0.01


def test_double_beams_doubles_points(tmp_path):
    s32 = SensorConfig(beams=32, azimuth_steps=90, vertical_fov=(-25, 3))
    s64 = SensorConfig(beams=64, azimuth_steps=90, vertical_fov=(-25, 3))
    gap = GapSpec(_domain("A", s32, frames=8), _domain("B", s64, frames=8), shared_scenes=True)
    src, tgt = make_domain_pair(gap, 2, tmp_path)
    counts = []
    for m in (src, tgt):
        counts.append(np.mean([(p / "points.bin").stat().st_size / 16 for p in m.frame_paths()]))
    assert 1.8 <= counts[1] / counts[0] <= 2.2


def test_frame_count_too_small(tmp_path):
    with pytest.raises(ValueError):
        make_domain_pair(GapSpec(_domain("A", frames=1), _domain("B")), 0, tmp_path)


def test_split_is_last_fifth():
    assert split_counts(40) == (32, 8)
    assert split_counts(2) == (1, 1)


def test_manifest_splits_and_missing_dataset(tmp_path):
    make_domain(_domain("A", frames=10), 0, tmp_path / "a")
    train, val = load_manifest(tmp_path / "a", "train"), load_manifest(tmp_path / "a", "val")
    assert train.frames == tuple(f"{i:05d}" for i in range(8))
    assert val.frames == ("00008", "00009")
    with pytest.raises(FileNotFoundError, match="generate"):
        load_manifest(tmp_path / "nothing")


def test_unlabeled_manifest_hides_labels(tmp_path):
    m = make_domain(_domain("A", frames=4), 0, tmp_path)
    assert FrameDataset(m)[0].cloud.labels is not None
    assert FrameDataset(m.unlabeled())[0].cloud.labels is None


def test_standard_domains_serialise():
    for spec in standard_domains(10, small=True).values():
        assert DomainSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# ---------------------------------------------------------------------------
# Merging


def _mem(n, name, names=SHARED_CLASSES):
    rng = np.random.default_rng(n)
    return MemoryDataset([Frame(random_cloud(rng, 5), name=f"{name}/{i}") for i in range(n)], names, name)


def test_merge_single_is_identity():
    a = _mem(7, "A")
    m = merge([a])
    assert len(m) == 7
    assert all(m[i] is a[i] for i in range(7))


def test_merge_epoch_visits_all():
    m = merge([_mem(10, "A"), _mem(30, "B")])
    order = m.epoch_order(np.random.default_rng(0))
    assert sorted(order.tolist()) == list(range(40))
    assert sum(m.provenance(int(j)) == "A" for j in order) == 10


def test_merge_provenance_proportional_over_epochs():
    sizes = {"N": 12, "K": 8, "W": 20, "P": 4}
    m = merge([_mem(n, k) for k, n in sizes.items()])
    rng = np.random.default_rng(1)
    tally = {k: 0 for k in sizes}
    for _ in range(5):
        for j in m.epoch_order(rng):
            tally[m.provenance(int(j))] += 1
    assert tally == {k: 5 * n for k, n in sizes.items()}


def test_merge_class_set_mismatch():
    other = _mem(3, "X", ("a", "b", "c"))
    with pytest.raises(ValueError, match="class-set mismatch"):
        merge([_mem(3, "A"), other], require_labels=True)
    assert len(merge([_mem(3, "A"), other])) == 6


def test_merge_empty():
    with pytest.raises(ValueError):
        merge([])


# ---------------------------------------------------------------------------
# Adapters


def test_kitti_layout_adapter(tmp_path):
    (tmp_path / "velodyne").mkdir()
    (tmp_path / "labels").mkdir()
    pts = np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.1]], dtype="<f4")
    pts.tofile(tmp_path / "velodyne" / "000000.bin")
    np.array([(3 << 16) | 10, 31], dtype="<u4").tofile(tmp_path / "labels" / "000000.label")
    ad = KittiLayoutAdapter(tmp_path)
    assert len(ad) == 1
    f = ad[0]
    assert f.cloud.labels.tolist() == [0, IGNORE_ID]
    np.testing.assert_array_equal(f.cloud.xyz, pts[:, :3])


def test_unimplemented_adapters():
    for cls in (NuScenesAdapter, WaymoAdapter):
        with pytest.raises(NotImplementedError):
            cls("x")
