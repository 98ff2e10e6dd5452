# tests/test_app.py
import os

import pytest

from app import create_app
from services.banner import display_banner
from services.synthesizer import Synthesizer


@pytest.fixture
def app(tiny_checkpoint, tmp_path, config_manager):
    app = create_app(config_manager, synthesizer=Synthesizer.from_checkpoint(tiny_checkpoint),
                     output_dir=str(tmp_path / 'outputs'))
    app.config['TESTING'] = True
    return app


@pytest.fixture
def unloaded_app(config_manager, monkeypatch, tmp_path):
    monkeypatch.setitem(config_manager.system_config['service'], 'checkpoint', '${DUETGEN_CHECKPOINT}')
    app = create_app(config_manager, output_dir=str(tmp_path / 'outputs'))
    app.config['TESTING'] = True
    return app


def _body(**values):
    body = {'text': 'wave', 'speech_steps': 2, 'motion_steps': 2, 'seed': 4}
    body.update(values)
    return body


def test_synthesize_writes_outputs(client, tmp_path):
    response = client.post('/api/synthesize', json=_body(stem='demo'))
    assert response.status_code == 200
    (result,) = response.json['results']
    assert result['seed'] == 4
    assert result['paths']['pose'] == os.path.join(str(tmp_path / 'outputs'), 'demo.pose.csv')
    assert os.path.exists(result['paths']['mel'])


def test_same_request_same_result(client):
    first = client.post('/api/synthesize', json=_body()).json['results'][0]
    second = client.post('/api/synthesize', json=_body()).json['results'][0]
    assert first['durations'] == second['durations']


def test_several_samples(client):
    response = client.post('/api/synthesize', json=_body(num_samples=2, stem='take'))
    assert [r['seed'] for r in response.json['results']] == [4, 5]
    assert response.json['results'][1]['paths']['mel'].endswith('take-seed5.mel.ftz')


@pytest.mark.parametrize('payload', [None, [1, 2], {'text': ''}, {'text': 'hi', 'temperature': -1},
                                     {'text': 'hi', 'stem': '../escape'}])
def test_bad_requests(client, payload):
    response = client.post('/api/synthesize', json=payload)
    assert response.status_code == 400
    assert 'error' in response.json


def test_unknown_characters_are_rejected(client):
    response = client.post('/api/synthesize', json=_body(text='ñandú'))
    assert response.status_code == 400
    assert client.get('/api/status').json['service_status']['error']


def test_status_and_metrics(client):
    client.post('/api/synthesize', json=_body())
    status = client.get('/api/status').json
    assert status['service_status']['requests'] == 1
    assert status['service_status']['checkpoint'] == 'preloaded'
    assert status['service_status']['last_result']['mel_frames'] > 0

    metrics = client.get('/metrics').json
    assert metrics['operation_metrics']['durations']['synthesize']['count'] == 1


def test_health_and_config(client):
    health = client.get('/health').json
    assert health['status'] == 'healthy'
    assert health['version'] == 'v0.1.0'
    config = client.get('/api/config').json
    assert config['synthesis']['motion_steps'] == 500
    assert config['service']['checkpoint'] == 'preloaded'


def test_not_found(client):
    response = client.get('/api/missing')
    assert response.status_code == 404
    assert response.json == {'error': 'Not found'}


def test_missing_checkpoint_is_unavailable(unloaded_app):
    response = unloaded_app.test_client().post('/api/synthesize', json=_body())
    assert response.status_code == 503
    assert 'DUETGEN_CHECKPOINT' in response.json['error']


def test_banner_shows_version(capsys):
    display_banner('v9.9.9')
    assert 'Version: v9.9.9' in capsys.readouterr().out
