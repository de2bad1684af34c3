import json
import runpy
import sys
from pathlib import Path

import numpy as np
import pytest

from cli import EXIT_EMPTY_MASK, EXIT_FAILURE, EXIT_NOT_CONVERGED, EXIT_OK, main
from fenceseg import load_classifier
from imgcore import read_image, write_image, write_mask


@pytest.fixture
def scene(tmp_path, monkeypatch):
    """Three-frame 64x64 synthetic scene written by the synth command"""
    monkeypatch.setenv('DEFENCE_THREADS', '2')
    spec = tmp_path / 'scene.json'
    spec.write_text(json.dumps({'width': 64, 'height': 64, 'seed': 21}))
    out = tmp_path / 'scene'
    assert main(['synth', '--spec', str(spec), '--out-dir', str(out)]) == EXIT_OK
    return out


def _files(scene, stem, ext):
    return [str(scene / f'{stem}_{m}.{ext}') for m in range(3)]


def _run(scene, out, *extra):
    return main(['run', '--frames', *_files(scene, 'frame', 'png'), '--masks', *_files(scene, 'mask', 'png'),
                 '--flows', *_files(scene, 'flow', 'flo'), '--out', str(out), *extra])


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as exc:
        main(['--help'])
    assert exc.value.code == 0
    assert 'segment' in capsys.readouterr().out


def test_synth_writes_scene(scene):
    manifest = json.loads((scene / 'manifest.json').read_text())
    assert manifest['ground_truth']['frames'] == 3
    for name in ('background.png', 'frame_2.png', 'mask_0.png', 'flow_1.flo', 'joints_1.csv'):
        assert (scene / name).exists()


def test_run_with_known_masks_and_flows(scene, tmp_path, capsys):
    out = tmp_path / 'clean.png'
    assert _run(scene, out) == EXIT_OK
    assert read_image(out).shape == (64, 64, 3)

    assert main(['eval', 'psnr', '--pred', str(out), '--gt', str(scene / 'background.png')]) == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert metrics['psnr'] > 25.0


def test_runs_are_reproducible(scene, tmp_path):
    a, b = tmp_path / 'a.png', tmp_path / 'b.png'
    assert _run(scene, a) == EXIT_OK
    assert _run(scene, b) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_iteration_cap_reports_partial_result(scene, tmp_path):
    out = tmp_path / 'partial.png'
    assert _run(scene, out, '--max-iters', '1') == EXIT_NOT_CONVERGED
    assert out.exists()


def test_keep_intermediates(scene, tmp_path):
    inter = tmp_path / 'inter'
    assert _run(scene, tmp_path / 'o.png', '--keep-intermediates', '--io.intermediates_dir', str(inter)) == EXIT_OK
    assert (inter / 'flow_0.flo').exists() and (inter / 'flow_2.png').exists()
    assert (inter / 'mask_1.png').exists()


def test_fence_free_frames_return_reference(tmp_path):
    rng = np.random.default_rng(22)
    frames, masks = [], []
    for m in range(3):
        frames.append(tmp_path / f'f{m}.png')
        masks.append(tmp_path / f'm{m}.png')
        write_image(frames[-1], rng.random((20, 24, 3)))
        write_mask(masks[-1], np.zeros((20, 24), dtype=bool))
    out = tmp_path / 'out.png'
    code = main(['run', '--frames', *map(str, frames), '--masks', *map(str, masks), '--out', str(out)])
    assert code == EXIT_EMPTY_MASK
    np.testing.assert_array_equal(read_image(out), read_image(frames[1]))


def test_eval_mask_to_file(scene, tmp_path):
    out = tmp_path / 'scores.json'
    mask = str(scene / 'mask_1.png')
    assert main(['eval', 'mask', '--pred', mask, '--gt', mask, '--out', str(out)]) == EXIT_OK
    assert json.loads(out.read_text()) == {'precision': 1.0, 'recall': 1.0, 'f': 1.0}


def test_eval_flow_against_itself(scene, capsys):
    flow = str(scene / 'flow_0.flo')
    assert main(['eval', 'flow', '--pred', flow, '--gt', flow]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {'epe': 0.0}


def test_invalid_config_fails(scene, tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps({'segmentation': {'tau': 1.5}}))
    code = main(['segment', '--image', str(scene / 'frame_0.png'), '--model', 'unused.json',
                 '--out-mask', str(tmp_path / 'm.png'), '--config', str(bad)])
    assert code == EXIT_FAILURE
    assert not (tmp_path / 'm.png').exists()


def test_missing_frame_fails(tmp_path):
    assert main(['run', '--frames', str(tmp_path / 'nope.png'), '--masks', str(tmp_path / 'nope_mask.png'),
                 '--out', str(tmp_path / 'o.png')]) == EXIT_FAILURE


def test_segment_needs_model(scene, tmp_path, monkeypatch):
    monkeypatch.delenv('DEFENCE_MODEL_PATH', raising=False)
    code = main(['segment', '--image', str(scene / 'frame_0.png'), '--out-mask', str(tmp_path / 'm.png')])
    assert code == EXIT_FAILURE


def test_train_and_segment(tmp_path):
    spec = tmp_path / 'train.json'
    spec.write_text(json.dumps({'width': 96, 'height': 96, 'seed': 3, 'motions': [[0, 0]]}))
    model = tmp_path / 'model.json'
    assert main(['train-classifier', '--scenes', str(spec), '--out', str(model), '--training.epochs', '5']) == EXIT_OK
    clf = load_classifier(model)
    assert clf.dim == 152 and clf.backend == 'gradhist'

    image = tmp_path / 'frame.png'
    write_image(image, np.full((64, 64, 3), 0.4))
    assert main(['segment', '--image', str(image), '--model', str(model), '--out-mask', str(tmp_path / 'm.png'),
                 '--stride', '8']) == EXIT_OK
    assert (tmp_path / 'm.png').exists()


def test_automatic_runs_are_reproducible(scene, tmp_path):
    model = tmp_path / 'model.json'
    assert main(['train-classifier', '--scenes', str(tmp_path / 'scene.json'), '--out', str(model),
                 '--training.epochs', '5']) == EXIT_OK
    runs = []
    for name in ('a', 'b'):
        out, inter = tmp_path / f'{name}.png', tmp_path / f'inter_{name}'
        code = main(['run', '--frames', *_files(scene, 'frame', 'png'), '--model', str(model), '--out', str(out),
                     '--keep-intermediates', '--io.intermediates_dir', str(inter)])
        assert code in (EXIT_OK, EXIT_NOT_CONVERGED, EXIT_EMPTY_MASK)
        runs.append((code, out.read_bytes(),
                     [(inter / f'mask_{m}.png').read_bytes() for m in range(3)],
                     [(inter / f'flow_{m}.flo').read_bytes() for m in range(3)]))
    assert runs[0] == runs[1]


def test_defence_script_dispatches_to_cli(monkeypatch, capsys):
    script = Path(__file__).resolve().parent / 'defence'
    monkeypatch.setattr(sys, 'argv', ['defence', '--help'])
    with pytest.raises(SystemExit) as exc:
        runpy.run_path(str(script), run_name='__main__')
    assert exc.value.code == 0
    assert 'train-classifier' in capsys.readouterr().out
