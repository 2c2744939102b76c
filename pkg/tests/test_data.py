import numpy as np
import pytest

from gastkit import data, synthscene
from gastkit.engine import ContractError
from gastkit.synthscene import AnnotatedFrame, SceneSpec


class TestBinaryFrames:
    def test_round_trip_exact(self, tmp_path, rng):
        frames = rng.random((5, 3, 8, 12)).astype(np.float32)
        path = tmp_path / "frames.bin"
        data.save_frames_binary(path, frames)
        loaded = data.load_frames_binary(path)
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded, frames)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX" + b"\0" * 40)
        with pytest.raises(ContractError, match="not a frame archive"):
            data.load_frames_binary(path)

    def test_rejects_unknown_version(self, tmp_path, rng):
        path = tmp_path / "frames.bin"
        data.save_frames_binary(path, rng.random((1, 3, 4, 4)))
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(ContractError, match="version"):
            data.load_frames_binary(path)


class TestPngFrames:
    def test_round_trip_within_quantization(self, tmp_path, rng):
        frames = rng.random((3, 3, 8, 12)).astype(np.float32)
        data.save_frames_png(tmp_path / "frames", frames)
        loaded = data.load_frames_png(tmp_path / "frames")
        assert loaded.shape == frames.shape
        assert np.abs(loaded - frames).max() <= 0.5 / 255 + 1e-6

    def test_load_dispatches_on_directory(self, tmp_path, rng):
        frames = rng.random((2, 3, 4, 6)).astype(np.float32)
        data.save_frames_png(tmp_path / "d", frames)
        data.save_frames_binary(tmp_path / "f.bin", frames)
        assert data.load_frames(tmp_path / "d").shape == frames.shape
        np.testing.assert_array_equal(data.load_frames(tmp_path / "f.bin"),
                                      frames)


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        frames = [
            AnnotatedFrame(image=None, boxes=[(0, 1.0, 2.0, 3.5, 4.5)],
                           frame_index=0, view="v"),
            AnnotatedFrame(image=None, boxes=[], frame_index=1, view="v"),
            AnnotatedFrame(image=None, boxes=[(1, 0.0, 0.0, 2.0, 2.0),
                                              (0, 5.0, 5.0, 9.0, 8.0)],
                           frame_index=2, view="v"),
        ]
        path = tmp_path / "ann.jsonl"
        data.save_annotations(path, frames)
        loaded = data.load_annotations(path, n_frames=3)
        assert loaded[0] == [(0, 1.0, 2.0, 3.5, 4.5)]
        assert loaded[1] == []
        assert len(loaded[2]) == 2

    def test_infers_frame_count(self, tmp_path):
        frames = [AnnotatedFrame(image=None, boxes=[(0, 1, 1, 2, 2)],
                                 frame_index=4, view="v")]
        path = tmp_path / "ann.jsonl"
        data.save_annotations(path, frames)
        loaded = data.load_annotations(path)
        assert len(loaded) == 5
        assert loaded[:4] == [[], [], [], []]


class TestDataset:
    def _specs(self):
        return [
            SceneSpec(view=f"view{i}", image_hw=(48, 72), frames_per_video=3,
                      n_videos=3)
            for i in range(2)
        ]

    def test_write_and_reload(self, tmp_path):
        manifest = data.write_dataset(tmp_path, self._specs(), seed=3)
        assert manifest == data.load_manifest(tmp_path)
        assert manifest["image_size"] == [48, 72]
        assert manifest["views"] == ["view0", "view1"]
        assert len(manifest["videos"]) == 6
        for v in manifest["videos"]:
            frames = data.load_frames(tmp_path / v["frames"])
            assert frames.shape == (3, 3, 48, 72)
            anns = data.load_annotations(tmp_path / v["annotations"],
                                         v["n_frames"])
            assert len(anns) == 3

    def test_split_sizes(self, tmp_path):
        manifest = data.write_dataset(tmp_path, self._specs(), seed=3)
        for view in ("view0", "view1"):
            train = data.video_entries(manifest, split="train", view=view)
            test = data.video_entries(manifest, split="test", view=view)
            assert len(train) == 3  # ceil(0.7 * 3)
            assert len(test) == 0

    def test_split_sizes_larger(self, tmp_path):
        specs = [SceneSpec(view="v", image_hw=(48, 72), frames_per_video=2,
                           n_videos=5)]
        manifest = data.write_dataset(tmp_path, specs, seed=1)
        assert len(data.video_entries(manifest, split="train")) == 4
        assert len(data.video_entries(manifest, split="test")) == 1

    def test_png_format_option(self, tmp_path):
        specs = [SceneSpec(view="v", image_hw=(48, 72), frames_per_video=2,
                           n_videos=1)]
        manifest = data.write_dataset(tmp_path, specs, seed=1,
                                      image_format="png")
        frames = data.load_frames(tmp_path / manifest["videos"][0]["frames"])
        assert frames.shape == (2, 3, 48, 72)
