# tests/test_features.py
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from services.error_handler import ArtifactIOError, FeatureError
from services.features import (
    MEL_FRAME_RATE, POSE_CHANNEL_NAMES, FeatureStats, MelExtractor, MelSpectrogram, PoseSequence,
    align_lengths, canonicalize_expmap, denormalize, fit_stats, load_mel, load_pose, normalize, read_bvh_motion,
    resample_pose, save_mel, save_pose,
)
from services.tensor_io import decode_ftz, encode_ftz, load_checkpoint, save_checkpoint


def _sine(seconds=1.0, sr=22050, freq=440.0):
    t = np.arange(int(seconds * sr)) / sr
    return (0.5 * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def _ramp_pose(frames=120, rate=120.0):
    values = np.linspace(0.0, 1.0, frames)[:, None] * np.arange(1, 46)[None, :]
    return PoseSequence(values, rate)


class TestMelExtractor:
    def test_one_second_of_audio(self):
        mel = MelExtractor().extract(_sine(), 22050)
        assert mel.frames.shape == (87, 80)
        assert mel.frames.dtype == np.float32
        assert mel.frame_rate_hz == pytest.approx(86.1328125)
        assert np.all(np.isfinite(mel.frames))

    def test_silence_hits_the_log_floor(self):
        mel = MelExtractor().extract(np.zeros(4096, dtype=np.float32), 22050)
        np.testing.assert_allclose(mel.frames, np.log(1e-5), rtol=1e-6)

    @pytest.mark.parametrize('waveform,sr', [
        (np.zeros(0, dtype=np.float32), 22050),
        (np.zeros(512, dtype=np.float32), 22050),
        (np.zeros(4096, dtype=np.float32), 16000),
        (np.zeros((2, 4096), dtype=np.float32), 22050),
    ])
    def test_rejects_bad_input(self, waveform, sr):
        with pytest.raises(FeatureError):
            MelExtractor().extract(waveform, sr)

    def test_wrong_sample_rate_message_names_the_fix(self):
        with pytest.raises(FeatureError, match='resample'):
            MelExtractor().extract(_sine(), 44100)

    def test_rejects_other_mel_counts(self):
        with pytest.raises(FeatureError):
            MelExtractor({'n_mels': 64})


class TestPoseResampling:
    def test_frame_count_and_endpoints(self):
        pose = _ramp_pose(120, 120.0)
        resampled = resample_pose(pose, MEL_FRAME_RATE)
        assert resampled.num_frames == int(np.floor(120 * MEL_FRAME_RATE / 120.0 + 0.5))
        assert resampled.frame_rate_hz == MEL_FRAME_RATE
        np.testing.assert_allclose(resampled.frames[0], pose.frames[0])

    def test_linear_signal_is_preserved(self):
        pose = _ramp_pose(120, 120.0)
        resampled = resample_pose(pose, 60.0)
        # Every 60 fps instant falls on a 120 fps frame
        np.testing.assert_allclose(resampled.frames, pose.frames[::2], rtol=1e-6, atol=1e-6)

    def test_same_rate_returns_a_copy(self):
        pose = _ramp_pose(10, 120.0)
        same = resample_pose(pose, 120.0)
        np.testing.assert_array_equal(same.frames, pose.frames)
        assert same.frames is not pose.frames

    def test_single_frame_cannot_be_resampled(self):
        with pytest.raises(FeatureError):
            resample_pose(_ramp_pose(1, 120.0), 60.0)
        with pytest.raises(FeatureError):
            resample_pose(_ramp_pose(10, 120.0), 0.0)


def test_align_lengths_truncates_to_shorter_stream():
    mel = MelSpectrogram(np.zeros((10, 80)))
    pose = PoseSequence(np.zeros((12, 45)), MEL_FRAME_RATE)
    mel_out, pose_out = align_lengths(mel, pose)
    assert mel_out.num_frames == pose_out.num_frames == 10

    with pytest.raises(FeatureError):
        align_lengths(mel, PoseSequence(np.zeros((12, 45)), 120.0))


def test_feature_containers_validate_shape_and_values():
    with pytest.raises(FeatureError):
        MelSpectrogram(np.zeros((4, 79)))
    with pytest.raises(FeatureError):
        MelSpectrogram(np.full((4, 80), np.nan))
    with pytest.raises(FeatureError):
        PoseSequence(np.zeros((4, 44)), 60.0)
    assert len(POSE_CHANNEL_NAMES) == 45


class TestStats:
    def _corpus(self):
        rng = np.random.default_rng(1)
        return [(MelSpectrogram(rng.normal(-4, 2, size=(n, 80))),
                 PoseSequence(rng.normal(0, 0.3, size=(n, 45)), MEL_FRAME_RATE)) for n in (20, 35)]

    def test_normalized_corpus_has_unit_statistics(self):
        corpus = self._corpus()
        stats = fit_stats(corpus)
        frames = np.concatenate([normalize(m, stats).frames for m, _ in corpus]).astype(np.float64)
        np.testing.assert_allclose(frames.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(frames.std(axis=0), 1.0, atol=1e-5)

    def test_denormalize_inverts_normalize(self):
        corpus = self._corpus()
        stats = fit_stats(corpus)
        pose = corpus[0][1]
        np.testing.assert_allclose(denormalize(normalize(pose, stats), stats).frames, pose.frames, atol=1e-5)

    def test_dict_round_trip(self):
        stats = fit_stats(self._corpus())
        restored = FeatureStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(restored.mel_std, stats.mel_std)
        with pytest.raises(FeatureError):
            FeatureStats.from_dict({'mel_mean': [0.0]})

    def test_zero_variance_channel_is_rejected(self):
        mel = MelSpectrogram(np.zeros((5, 80)))
        pose = PoseSequence(np.random.default_rng(0).normal(size=(5, 45)), MEL_FRAME_RATE)
        with pytest.raises(FeatureError, match='Zero-variance mel'):
            fit_stats([(mel, pose)])
        with pytest.raises(FeatureError):
            fit_stats([])


def test_canonicalize_expmap_keeps_the_rotation():
    rotvecs = np.array([[1.5 * np.pi, 0.0, 0.0], [0.0, 0.2, 0.1], [2.0, 2.0, 2.0]])
    canonical = canonicalize_expmap(rotvecs.reshape(1, -1)).reshape(3, 3)

    assert np.all(np.linalg.norm(canonical, axis=1) <= np.pi + 1e-12)
    np.testing.assert_allclose(canonical[0], [-0.5 * np.pi, 0.0, 0.0])
    np.testing.assert_array_equal(canonical[1], rotvecs[1])
    np.testing.assert_allclose(Rotation.from_rotvec(canonical).as_matrix(),
                               Rotation.from_rotvec(rotvecs).as_matrix(), atol=1e-12)


def _write_bvh(path, frames):
    joints = ('Spine', 'Spine1', 'Spine2', 'Spine3', 'Neck', 'Neck1', 'Head',
              'RightShoulder', 'RightArm', 'RightForeArm', 'LeftShoulder', 'LeftArm', 'LeftForeArm')
    lines = ['HIERARCHY', 'ROOT Hips', '{', 'OFFSET 0 0 0',
             'CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation']
    for joint in joints:
        lines += [f'JOINT {joint}', '{', 'OFFSET 0 1 0', 'CHANNELS 3 Zrotation Xrotation Yrotation']
    lines += ['End Site', '{', 'OFFSET 0 1 0', '}']
    lines += ['}'] * (len(joints) + 1)
    lines += ['MOTION', f'Frames: {len(frames)}', 'Frame Time: 0.008333333333']
    lines += [' '.join(str(v) for v in row) for row in frames]
    path.write_text('\n'.join(lines) + '\n')


def test_read_bvh_motion(tmp_path):
    row = [1.0, 2.0, 3.0, 90.0, 0.0, 0.0] + [0.0] * 39
    path = tmp_path / 'take.bvh'
    _write_bvh(path, [row, row])

    pose = read_bvh_motion(str(path))
    assert pose.frames.shape == (2, 45)
    assert pose.frame_rate_hz == pytest.approx(120.0, rel=1e-6)
    np.testing.assert_allclose(pose.frames[0, :3], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(pose.frames[0, 3:6], [0.0, 0.0, np.pi / 2], atol=1e-6)
    np.testing.assert_allclose(pose.frames[:, 6:], 0.0, atol=1e-7)


def test_read_bvh_motion_errors(tmp_path):
    with pytest.raises(ArtifactIOError):
        read_bvh_motion(str(tmp_path / 'missing.bvh'))
    path = tmp_path / 'short.bvh'
    _write_bvh(path, [[0.0] * 44])
    with pytest.raises(FeatureError):
        read_bvh_motion(str(path))


class TestTensorFiles:
    def test_ftz_layout(self):
        blob = encode_ftz(np.arange(6, dtype=np.float64).reshape(2, 3), 'param')
        header, payload = blob.split(b'\n', 1)
        assert b'"dtype": "f32"' in header
        assert payload == np.arange(6, dtype='<f4').tobytes()
        array, parsed = decode_ftz(blob)
        assert parsed['shape'] == [2, 3]
        np.testing.assert_array_equal(array, np.arange(6).reshape(2, 3))

    def test_ftz_rejects_truncated_payload_and_nan(self):
        blob = encode_ftz(np.zeros((2, 80)), 'mel', MEL_FRAME_RATE)
        with pytest.raises(FeatureError):
            decode_ftz(blob[:-4])
        with pytest.raises(FeatureError):
            encode_ftz(np.array([[np.nan]]), 'param')
        with pytest.raises(FeatureError):
            encode_ftz(np.zeros(3), 'mel')

    def test_mel_and_pose_files(self, tmp_path):
        mel = MelSpectrogram(np.random.default_rng(0).normal(size=(7, 80)))
        save_mel(str(tmp_path / 'a.mel.ftz'), mel)
        loaded = load_mel(str(tmp_path / 'a.mel.ftz'))
        np.testing.assert_array_equal(loaded.frames, mel.frames)
        assert loaded.frame_rate_hz == MEL_FRAME_RATE

        pose = _ramp_pose(4, 60.0)
        save_pose(str(tmp_path / 'a.pose.ftz'), pose)
        assert load_pose(str(tmp_path / 'a.pose.ftz')).frame_rate_hz == 60.0
        with pytest.raises(FeatureError):
            load_mel(str(tmp_path / 'a.pose.ftz'))

    def test_checkpoint_archive(self, tmp_path):
        path = str(tmp_path / 'ckpt.zip')
        save_checkpoint(path, {'layer.weight': np.ones((2, 2))}, {'step': 5})
        tensors, manifest = load_checkpoint(path)
        assert manifest == {'step': 5}
        np.testing.assert_array_equal(tensors['layer.weight'], np.ones((2, 2)))
