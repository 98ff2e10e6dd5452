# tests/test_cli.py
import json
import os

import numpy as np
import pytest
import yaml
from scipy.io import wavfile

from cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from services.evaluation import ResponseSet
from services.features import MelSpectrogram, PoseSequence, load_mel, load_pose, save_mel, save_pose
from services.tensor_io import write_ftz

TINY_OVERRIDES = {
    'encoder': {'n_channels': 16, 'filter_channels': 32, 'filter_channels_dp': 16, 'n_heads': 2, 'n_layers': 1,
                'p_dropout': 0.0},
    'acoustic_decoder': {'dim': 8, 'dim_mults': [1, 2], 'groups': 4, 'attention': False},
    'prenet': {'d_model': 16, 'n_layers': 1, 'n_heads': 2, 'ff_mult': 2, 'conv_kernel': 5, 'p_dropout': 0.0},
    'gesture_decoder': {'dim': 16, 'dim_mults': [1, 1], 'kernel_size': 3, 'groups': 4},
    'training': {'checkpoint_interval': 1000, 'validation_interval': 1000, 'log_interval': 1},
}


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    # Log files land in the test's own directory
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _json_output(capsys):
    return json.loads(capsys.readouterr().out)


def test_corpus_command(workdir, capsys):
    assert main(['corpus', '--n', '3', '--seed', '2', '--out-dir', 'corpus']) == EXIT_OK
    summary = _json_output(capsys)
    assert summary['utterances'] == 3
    assert len((workdir / 'corpus' / 'metadata.csv').read_text().splitlines()) == 3


def test_features_extract_and_resample(workdir, capsys):
    rate = 22050
    tone = 0.3 * np.sin(2 * np.pi * 220.0 * np.arange(rate) / rate)
    wavfile.write(str(workdir / 'tone.wav'), rate, tone.astype(np.float32))

    assert main(['features', 'extract', '--wav', 'tone.wav', '--out', 'tone.mel.ftz']) == EXIT_OK
    assert _json_output(capsys)['frames'] == 87
    assert load_mel('tone.mel.ftz').num_frames == 87

    save_pose('motion.pose.ftz', PoseSequence(np.zeros((120, 45)), 120.0))
    assert main(['features', 'resample', '--in', 'motion.pose.ftz', '--rate', '60', '--out', 'slow.pose.ftz']) == EXIT_OK
    assert load_pose('slow.pose.ftz').num_frames == 60


def test_align_with_oracle(capsys):
    means = np.stack([np.full(80, level) for level in (-2.0, 0.0, 2.0)])
    frames = np.concatenate([np.repeat(means[i:i + 1], count, axis=0) for i, count in enumerate([2, 3, 3])])
    write_ftz('means.ftz', means, 'param')
    save_mel('utt.mel.ftz', MelSpectrogram(frames))

    assert main(['align', '--mu', 'means.ftz', '--y', 'utt.mel.ftz', '--oracle']) == EXIT_OK
    summary = _json_output(capsys)
    assert summary['durations'] == [2, 3, 3]
    assert summary['oracle_durations'] == [2, 3, 3]
    assert summary['score'] == pytest.approx(summary['oracle_score'])


def test_train_then_synthesize(workdir, capsys):
    (workdir / 'tiny.yaml').write_text(yaml.safe_dump(TINY_OVERRIDES))
    assert main(['train', '--config', 'tiny.yaml', '--max-updates', '1', '--synthetic', '2',
                 '--checkpoint-dir', 'ckpt']) == EXIT_OK
    status = _json_output(capsys)
    assert status['update'] == 1
    assert os.path.exists(status['checkpoint'])

    assert main(['synth', '--text', 'hello there', '--ckpt', status['checkpoint'], '--speech-steps', '2',
                 '--motion-steps', '2', '--out-dir', 'out', '--num-samples', '2', '--seed', '5']) == EXIT_OK
    results = _json_output(capsys)
    assert [r['seed'] for r in results] == [5, 6]
    assert os.path.exists(workdir / 'out' / 'utterance-seed5.pose.csv')
    assert os.path.exists(workdir / 'out' / 'utterance-seed6.mel.ftz')


def test_eval_plan_and_summary(workdir, capsys):
    assert main(['eval', 'plan', '--segments', '5', '--conditions', 'NAT,SYS', '--participants', '2',
                 '--segments-per-participant', '3', '--out', 'sessions.csv']) == EXIT_OK
    plan = _json_output(capsys)
    assert plan['check_segment'] == 'seg05'
    assert plan['rows'] == 2 * (3 * 2 + 4)

    records = [dict(participant=f"p{p}", segment=f"s{s}", condition=c, label=str(score), is_check=False,
                    expected='')
               for p in range(3) for s in range(3) for c, score in (('NAT', 5), ('SYS', 2))]
    ResponseSet.from_records(records).to_csv('responses.csv')
    assert main(['eval', 'summarize', '--responses', 'responses.csv', '--study', 'speech']) == EXIT_OK
    output = capsys.readouterr().out
    assert '5.00 ± 0.00' in output
    assert '2.00 ± 0.00' in output
    assert '*' in output


def test_exit_codes(workdir):
    assert main(['synth', '--text', 'hi', '--ckpt', 'missing.zip']) == EXIT_FAILURE
    assert main(['synth', '--text', 'hi', '--ckpt', 'missing.zip', '--tau', '0']) == EXIT_USAGE
    assert main(['--config-dir', 'nowhere', 'corpus', '--out-dir', 'c']) == EXIT_FAILURE

    (workdir / 'bad.csv').write_text('participant,segment,condition,label,is_check,expected\np1,s1,A,great,0,\n')
    assert main(['eval', 'summarize', '--responses', 'bad.csv']) == EXIT_FAILURE

    with pytest.raises(SystemExit) as info:
        main(['synth', '--text', 'hi'])
    assert info.value.code == EXIT_USAGE
