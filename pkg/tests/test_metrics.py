import numpy as np
import pytest

from facevq.dataio import ClipSpec, VideoTensor, make_synthetic_clip
from facevq.errors import DataError
from facevq.metrics import (
    codebook_report,
    evaluate_pair,
    face_cons,
    psnr,
    ssim,
    temporal_profile,
)


def const_video(value, t=3, size=32):
    return VideoTensor(np.full((t, size, size, 3), value, dtype=np.float32))


class TestPSNR:
    def test_identical_inputs_hit_cap(self, clip16):
        assert psnr(clip16, clip16) == 100.0

    def test_uniform_offset_closed_form(self):
        a = const_video(0.4)
        b = const_video(0.5)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-4)

    def test_symmetry(self):
        a = make_synthetic_clip(ClipSpec(seed=1, frames=3, size=32))
        b = make_synthetic_clip(ClipSpec(seed=2, frames=3, size=32))
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            psnr(const_video(0.1, t=2), const_video(0.1, t=3))


class TestSSIM:
    def test_self_similarity_is_one(self, clip16):
        clip = make_synthetic_clip(ClipSpec(seed=4, frames=2, size=32))
        assert ssim(clip, clip) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_high_contrast_image_is_negative(self):
        rng = np.random.default_rng(0)
        base = (rng.random((2, 48, 48, 1)) > 0.5).astype(np.float32)
        frames = np.repeat(base, 3, axis=-1)
        # soften so local variance is well-defined everywhere
        import scipy.ndimage as ndi

        frames = ndi.gaussian_filter(frames, sigma=(0, 1.5, 1.5, 0)).astype(np.float32)
        a = VideoTensor(np.clip(frames, 0, 1))
        b = VideoTensor(np.clip(1.0 - frames, 0, 1))
        assert ssim(a, b) < 0.0

    def test_matches_reference_implementation_fixture(self):
        # frozen from skimage.metrics.structural_similarity on this fixture
        # (gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        # data_range=1.0) applied to the luma planes, mean over frames
        rng = np.random.default_rng(123)
        a = VideoTensor(rng.random((2, 40, 40, 3)).astype(np.float32))
        noise = rng.normal(0, 0.08, size=a.frames.shape).astype(np.float32)
        b = VideoTensor(np.clip(a.frames + noise, 0, 1))
        frozen = 0.9614879510
        assert ssim(a, b) == pytest.approx(frozen, abs=1e-4)

        skimage = pytest.importorskip("skimage.metrics")
        luma = np.array([0.299, 0.587, 0.114])
        values = []
        for t in range(2):
            values.append(
                skimage.structural_similarity(
                    a.frames[t].astype(np.float64) @ luma,
                    b.frames[t].astype(np.float64) @ luma,
                    gaussian_weights=True,
                    sigma=1.5,
                    use_sample_covariance=False,
                    data_range=1.0,
                )
            )
        assert ssim(a, b) == pytest.approx(float(np.mean(values)), abs=1e-4)

    def test_too_small_frames_rejected(self):
        with pytest.raises(DataError, match="window"):
            ssim(const_video(0.2, size=8), const_video(0.3, size=8))


class FixedEmbedder:
    def __init__(self, table):
        self.table = [np.asarray(v, dtype=np.float64) for v in table]
        self.calls = 0

    def embed(self, frame):
        vec = self.table[self.calls % len(self.table)]
        self.calls += 1
        return vec


class TestFaceCons:
    def test_identical_frames_give_one(self):
        video = const_video(0.5, t=4)
        client = FixedEmbedder([[1.0, 2.0, 3.0]])
        assert face_cons(video, client) == pytest.approx(1.0)

    def test_orthogonal_embeddings_give_zero(self):
        video = const_video(0.5, t=3)
        client = FixedEmbedder([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        # frame 1 and 2 embeddings orthogonal to frame 0's
        assert face_cons(video, client) == pytest.approx(0.0)

    def test_known_cosines_average(self):
        video = const_video(0.5, t=3)
        c1, c2 = 0.8, 0.6
        e0 = np.array([1.0, 0.0])
        e1 = np.array([c1, np.sqrt(1 - c1**2)])
        e2 = np.array([c2, np.sqrt(1 - c2**2)])
        client = FixedEmbedder([e0, e1, e2])
        assert face_cons(video, client) == pytest.approx(0.7, abs=1e-9)

    def test_absent_client_omits_metric(self):
        assert face_cons(const_video(0.5), None) is None


class TestTemporalProfile:
    def test_static_video_has_identical_columns(self):
        clip = make_synthetic_clip(ClipSpec(seed=5, frames=1, size=16))
        static = VideoTensor(np.repeat(clip.frames, 4, axis=0))
        profile = temporal_profile(static, column=7)
        for t in range(1, 4):
            np.testing.assert_array_equal(profile[:, t, :], profile[:, 0, :])

    def test_single_bright_frame_makes_one_stripe(self):
        frames = np.zeros((5, 8, 8, 3), dtype=np.float32)
        frames[3] = 1.0
        profile = temporal_profile(VideoTensor(frames), column=2)
        assert profile[:, 3, :].min() == 1.0
        assert profile[:, [0, 1, 2, 4], :].max() == 0.0

    def test_matches_slicing_oracle_bitwise(self):
        clip = make_synthetic_clip(ClipSpec(seed=6, frames=4, size=16))
        column = 9
        profile = temporal_profile(clip, column)
        t, h, _, _ = clip.frames.shape
        for tau in range(t):
            for y in range(h):
                assert (profile[y, tau] == clip.frames[tau, y, column]).all()

    def test_out_of_range_column_rejected(self):
        with pytest.raises(DataError):
            temporal_profile(const_video(0.1, size=8), column=8)


class TestCodebookReport:
    def test_all_zero_indices(self):
        report = codebook_report(np.zeros(10, dtype=int), np.zeros(10, dtype=int), 64, 32)
        assert report.utilization_spatial == pytest.approx(1 / 64)
        assert report.utilization_temporal == pytest.approx(1 / 32)

    def test_accumulation_unions_active_sets(self):
        a = np.array([0, 1])
        b = np.array([2, 3])
        single = codebook_report(a, a, 8, 8)
        union = codebook_report(np.concatenate([a, b]), np.concatenate([a, b]), 8, 8)
        assert union.utilization_spatial >= single.utilization_spatial
        assert union.utilization_spatial == pytest.approx(4 / 8)

    def test_histogram_sums_to_cell_count(self):
        rng = np.random.default_rng(1)
        i_s = rng.integers(0, 16, size=(4, 4, 4))
        report = codebook_report(i_s, i_s, 16, 16)
        assert report.histogram_spatial.sum() == i_s.size


class TestEvaluatePair:
    def test_identical_pair_report(self, clip16):
        clip = make_synthetic_clip(ClipSpec(seed=9, frames=2, size=32))
        report = evaluate_pair(clip, clip)
        assert report.psnr == 100.0
        assert report.ssim == pytest.approx(1.0, abs=1e-9)
        assert report.face_cons is None
        assert report.to_dict() == {"psnr": 100.0, "ssim": pytest.approx(1.0)}

    def test_external_clients_feed_report(self):
        clip = make_synthetic_clip(ClipSpec(seed=9, frames=2, size=32))

        class StubMetric:
            name = "stub_distance"

            def score(self, result, reference):
                return 0.25

        report = evaluate_pair(clip, clip, external_clients=(StubMetric(),))
        assert report.to_dict()["stub_distance"] == 0.25
