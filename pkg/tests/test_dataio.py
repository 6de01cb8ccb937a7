import math

import numpy as np
import numpy.testing as npt
import pytest

from patkit.dataio import (
    ClipSpec,
    Dataset,
    EventRecord,
    array_to_events,
    augment,
    clip_count,
    clips_dataset,
    events_to_array,
    format_point_cloud,
    gen_gesture_streams,
    gen_parts,
    gen_shapes,
    load_events,
    load_events_array,
    load_manifest,
    load_point_cloud,
    parse_point_cloud,
    sample_surface,
    save_events,
    save_manifest,
    save_point_cloud,
    stream_accuracy,
    system_prediction,
    window_events,
)
from patkit.errors import ContractError, FormatError


class TestPointCloudText:
    def test_comments_and_blank_lines(self):
        cloud = parse_point_cloud("# header\n0 0 0\n\n1 2 3  # tail\n")
        npt.assert_array_equal(cloud.points, [[0, 0, 0], [1, 2, 3]])

    def test_round_trip_is_exact(self, tmp_path):
        p = np.random.default_rng(0).normal(size=(50, 5))
        save_point_cloud(tmp_path / "c.txt", p)
        npt.assert_array_equal(load_point_cloud(tmp_path / "c.txt").points, p)

    def test_ragged_row_reports_line(self):
        with pytest.raises(FormatError, match=":3:"):
            parse_point_cloud("0 0 0\n# c\n1 2\n")
        with pytest.raises(FormatError, match=":2: expected 4"):
            parse_point_cloud("0 0 0 1\n1 2 3\n")

    def test_non_numeric_and_empty(self):
        with pytest.raises(FormatError, match=":1:"):
            parse_point_cloud("a b c\n")
        with pytest.raises(FormatError):
            parse_point_cloud("# nothing\n")

    def test_format_one_row_per_point(self):
        assert format_point_cloud(np.array([[0.5, 1.0, -2.0]])) == "0.5 1.0 -2.0\n"


class TestShapes:
    def test_sphere_radius(self):
        sigma = 0.01
        p = sample_surface("sphere", 1000, np.random.default_rng(0))
        p = p + np.random.default_rng(1).normal(scale=sigma, size=p.shape)
        assert np.abs(np.linalg.norm(p, axis=1) - 1).max() <= 4 * sigma

    def test_cube_on_surface(self):
        p = sample_surface("cube", 500, np.random.default_rng(0))
        npt.assert_allclose(np.abs(p).max(axis=1), 1.0, atol=1e-12)

    def test_torus_radii(self):
        p = sample_surface("torus", 500, np.random.default_rng(0))
        ring = np.hypot(p[:, 0], p[:, 1]) - 0.7
        npt.assert_allclose(np.hypot(ring, p[:, 2]), 0.3, atol=1e-9)

    def test_unknown_shape(self):
        with pytest.raises(ContractError):
            sample_surface("cone", 10, np.random.default_rng(0))

    def test_outlier_count(self):
        d = gen_shapes(n_per_class=2, n_points=256, outlier_frac=0.02, rng=0)
        assert (d.outlier_mask.sum(axis=1) == 5).all()

    def test_balanced_and_deterministic(self):
        a = gen_shapes(n_per_class=3, n_points=32, rng=7)
        b = gen_shapes(n_per_class=3, n_points=32, rng=7)
        assert a.digest() == b.digest()
        assert a.digest() != gen_shapes(n_per_class=3, n_points=32, rng=8).digest()
        npt.assert_array_equal(np.bincount(a.labels), [3, 3, 3, 3])

    def test_parts_labels_per_point(self):
        d = gen_parts(n_samples=3, n_points=40, rng=0)
        assert d.labels.shape == (3, 40)
        npt.assert_array_equal(np.bincount(d.labels[0]), [10, 10, 10, 10])

    def test_augment_keeps_radius(self):
        p = sample_surface("sphere", 64, np.random.default_rng(0))[None]
        q = augment(p, np.random.default_rng(1), sigma=0.0)
        npt.assert_allclose(np.linalg.norm(q, axis=-1), 1.0, atol=1e-12)
        npt.assert_allclose(q[..., 2], p[..., 2])

    def test_subset(self):
        d = gen_shapes(n_per_class=2, n_points=16, rng=0)
        s = d.subset([1, 3])
        npt.assert_array_equal(s.labels, d.labels[[1, 3]])


class TestManifest:
    def test_round_trip(self, tmp_path):
        d = gen_shapes(n_per_class=2, n_points=16, rng=0)
        index = save_manifest(tmp_path, d)
        assert index.read_text().splitlines()[0] == "0\tsample_0000.txt"
        back = load_manifest(tmp_path)
        npt.assert_array_equal(back.labels, d.labels)
        npt.assert_array_equal(back.points, d.points)

    def test_bad_index_line(self, tmp_path):
        (tmp_path / "index.tsv").write_text("zero\tx.txt\n")
        with pytest.raises(FormatError, match=":1:"):
            load_manifest(tmp_path)

    def test_missing_index(self, tmp_path):
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_segmentation_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            save_manifest(tmp_path, gen_parts(n_samples=1, n_points=8))


def ramp_stream(span_ms=1050, n=2000):
    t = np.linspace(0, span_ms * 1000 - 1, n).astype(np.int64)
    return np.stack([t, t % 128, (t // 7) % 128, t % 2], axis=1)


class TestEvents:
    def test_clip_count_formula(self):
        spec = ClipSpec()
        assert clip_count(1_050_000, spec) == 4
        assert clip_count(749_999, spec) == 0
        assert clip_count(750_000, spec) == 1
        for span in range(750_000, 3_000_000, 37_123):
            assert clip_count(span, spec) == (span - 750_000) // 100_000 + 1

    def test_fixture_gives_four_clips(self):
        clips = window_events(ramp_stream(), ClipSpec(), rng=0)
        assert len(clips) == 4
        for c in clips:
            assert c.points.shape == (256, 4)
            assert 0 <= c.points[:, 2].min() and c.points[:, 2].max() < 1
            assert np.abs(c.points[:, :2]).max() <= 1

    def test_empty_windows_skipped(self):
        stream = np.array([[0, 1, 1, 0], [1_849_999, 2, 2, 1]])
        assert clip_count(1_850_000, ClipSpec()) == 12
        assert len(window_events(stream, ClipSpec())) == 2

    def test_sparse_window_resamples(self):
        stream = np.array([[0, 0, 0, 0], [500_000, 127, 127, 1], [749_999, 64, 64, 0]])
        (clip,) = window_events(stream, ClipSpec(n_sample=16))
        assert clip.points.shape == (16, 4)
        assert {tuple(r) for r in clip.points[:, :2].round(6)} <= {(-1.0, -1.0), (1.0, 1.0), (0.007874, 0.007874)}

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        t = np.sort(rng.integers(0, 10**7, size=10_000))
        arr = np.stack([t, rng.integers(0, 128, 10_000), rng.integers(0, 128, 10_000), rng.integers(0, 2, 10_000)], 1)
        save_events(tmp_path / "e.csv", arr)
        assert (tmp_path / "e.csv").read_text().startswith("t_us,x,y,polarity\n")
        npt.assert_array_equal(load_events_array(tmp_path / "e.csv"), arr)
        assert load_events(tmp_path / "e.csv")[0] == EventRecord(*arr[0].tolist())

    @pytest.mark.parametrize(
        "row, msg",
        [("5,128,0,1", "x/y"), ("5,0,0,2", "polarity"), ("1,0,0,0", "decreases"), ("5,0,0", "4 fields")],
    )
    def test_bad_rows_reported(self, tmp_path, row, msg):
        (tmp_path / "e.csv").write_text(f"t_us,x,y,polarity\n2,0,0,0\n{row}\n")
        with pytest.raises(FormatError, match=f"row 2.*{msg}"):
            load_events_array(tmp_path / "e.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "e.csv").write_text("t,x,y,p\n")
        with pytest.raises(FormatError):
            load_events_array(tmp_path / "e.csv")

    def test_record_conversion(self):
        arr = np.array([[1, 2, 3, 0], [4, 5, 6, 1]])
        npt.assert_array_equal(events_to_array(array_to_events(arr)), arr)

    def test_spec_validation(self):
        with pytest.raises(ContractError):
            ClipSpec(step_ms=800)
        with pytest.raises(ContractError):
            ClipSpec(n_sample=0)


class TestVoting:
    def test_mode(self):
        assert system_prediction([2, 1, 2, 0]) == 2

    def test_tie_to_lowest(self):
        assert system_prediction([2, 1, 1, 2]) == 1

    def test_empty(self):
        with pytest.raises(ContractError):
            system_prediction([])

    def test_stream_accuracy(self):
        preds = np.array([0, 0, 1, 2, 2, 1])
        groups = np.array([0, 0, 0, 1, 1, 1])
        assert stream_accuracy(preds, groups, [0, 1]) == 0.5


def test_gesture_clips_dataset():
    streams, labels = gen_gesture_streams(1, rng=0)
    assert len(streams) == 3 and labels.tolist() == [0, 1, 2]
    data = clips_dataset(streams, labels, ClipSpec(n_sample=64), rng=0)
    assert data.points.shape[1:] == (64, 4)
    assert set(data.groups.tolist()) == {0, 1, 2}
    npt.assert_array_equal(data.labels, labels[data.groups])
