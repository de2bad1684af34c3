"""
HTTP API tests run against the Flask test client
"""
import io

import numpy as np
import pytest

from app import create_app
from imgcore import read_image, write_image, write_mask
from models import SceneSpec
from synthbench import render_scene


def png(array, mask=False):
    buf = io.BytesIO()
    (write_mask if mask else write_image)(buf, array)
    buf.seek(0)
    return buf


def upload(array, name, mask=False):
    return (png(array, mask), name)


@pytest.fixture
def client():
    app = create_app({'TESTING': True, 'DEFENCE_MODEL_PATH': None, 'DEFENCE_THREADS': 1})
    return app.test_client()


@pytest.fixture(scope='module')
def scene():
    return render_scene(SceneSpec(width=48, height=48, seed=31))


def test_health_check(client):
    response = client.get('/api/health')
    assert response.status_code == 200
    data = response.get_json()
    assert data['status'] == 'healthy'
    assert data['model_loaded'] is False


def test_unknown_route_is_json(client):
    response = client.get('/api/nothing')
    assert response.status_code == 404
    assert 'error' in response.get_json()


def test_eval_psnr(client):
    gt = np.full((8, 8), 0.5)
    response = client.post('/api/eval/psnr', content_type='multipart/form-data', data={
        'pred': upload(gt, 'pred.png'),
        'gt': upload(gt, 'gt.png'),
    })
    assert response.status_code == 200
    assert response.get_json()['psnr'] == float('inf')


def test_eval_mask(client, scene):
    _, gt = scene
    response = client.post('/api/eval/mask', content_type='multipart/form-data', data={
        'pred': upload(gt.masks[0], 'pred.png', mask=True),
        'gt': upload(gt.masks[0], 'gt.png', mask=True),
    })
    assert response.get_json() == {'precision': 1.0, 'recall': 1.0, 'f': 1.0}


def test_missing_upload(client):
    response = client.post('/api/eval/psnr', content_type='multipart/form-data',
                           data={'pred': upload(np.zeros((4, 4)), 'pred.png')})
    assert response.status_code == 400
    assert "'gt'" in response.get_json()['error']


def test_flow_returns_flo_file(client, scene):
    frames, _ = scene
    response = client.post('/api/flow', content_type='multipart/form-data', data={
        'ref': upload(frames[1], 'ref.png'),
        'tgt': upload(frames[2], 'tgt.png'),
        'mu': '0.02',
    })
    assert response.status_code == 200
    body = response.get_data()
    assert body[:4] == b'PIEH'
    assert len(body) == 12 + 8 * 48 * 48


def test_flow_rejects_bad_override(client, scene):
    frames, _ = scene
    response = client.post('/api/flow', content_type='multipart/form-data', data={
        'ref': upload(frames[1], 'ref.png'),
        'tgt': upload(frames[2], 'tgt.png'),
        'mu': '-1',
    })
    assert response.status_code == 400
    assert 'flow.mu' in response.get_json()['error']


def test_defence_with_masks(client, scene):
    frames, gt = scene
    response = client.post('/api/defence', content_type='multipart/form-data', data={
        'frames': [upload(f, f'frame_{m}.png') for m, f in enumerate(frames)],
        'masks': [upload(mask, f'mask_{m}.png', mask=True) for m, mask in enumerate(gt.masks)],
        'max_iters': '20',
    })
    assert response.status_code == 200
    assert response.mimetype == 'image/png'
    assert response.headers['X-Defence-Empty'] == 'false'
    assert int(response.headers['X-Defence-Iterations']) <= 20
    assert read_image(io.BytesIO(response.get_data())).shape == (48, 48, 3)


def test_defence_without_frames(client):
    response = client.post('/api/defence', content_type='multipart/form-data', data={})
    assert response.status_code == 400


def test_segment_without_model(client, scene):
    frames, _ = scene
    response = client.post('/api/segment', content_type='multipart/form-data',
                           data={'image': upload(frames[0], 'frame.png')})
    assert response.status_code == 400
    assert 'DEFENCE_MODEL_PATH' in response.get_json()['error']
