import io
import logging

from flask import Blueprint, current_app, jsonify, request, send_file

import config
from errors import ConfigError
from fenceseg import load_classifier, make_backend, segment_fence
from fusion import defence_pipeline
from imgcore import read_image, read_mask, write_image, write_mask
from occflow import estimate_flow, flo_bytes
from synthbench import mask_fmeasure, psnr

logger = logging.getLogger(__name__)

segment_bp = Blueprint('segment', __name__)
flow_bp = Blueprint('flow', __name__)
fusion_bp = Blueprint('defence', __name__)
eval_bp = Blueprint('eval', __name__)

# Form fields a request may use to override the pipeline defaults
FORM_OVERRIDES = ('stride', 'window', 'tau', 'mu', 'lambda', 'max_iters', 'ref')


class MissingUpload(ValueError):
    pass


def _upload(name, required=True):
    storage = request.files.get(name)
    if storage is None or not storage.filename:
        if required:
            raise MissingUpload(f"Missing upload '{name}'")
        return None
    return storage


def _image(name, required=True):
    storage = _upload(name, required)
    return None if storage is None else read_image(storage.stream)


def _mask(name, required=True):
    storage = _upload(name, required)
    return None if storage is None else read_mask(storage.stream)


def _request_config():
    values = {**request.args.to_dict(), **request.form.to_dict()}
    overrides = {key: values[key] for key in FORM_OVERRIDES if key in values}
    return config.parse_config(None, overrides)


def _classifier(cfg):
    path = current_app.config.get('DEFENCE_MODEL_PATH')
    if not path:
        raise ConfigError('DEFENCE_MODEL_PATH', 'no classifier model configured on the server')
    return load_classifier(path), make_backend(cfg.segmentation)


def _png(array, mask=False):
    buf = io.BytesIO()
    (write_mask if mask else write_image)(buf, array)
    buf.seek(0)
    return send_file(buf, mimetype='image/png')


@segment_bp.route('', methods=['POST'])
def segment():
    cfg = _request_config()
    img = _image('image')
    clf, backend = _classifier(cfg)
    result = segment_fence(img, clf, cfg.segmentation, backend, workers=current_app.config['DEFENCE_THREADS'])
    response = _png(result.mask, mask=True)
    response.headers['X-Fence-Detections'] = str(len(result.detections))
    return response


@flow_bp.route('', methods=['POST'])
def flow():
    cfg = _request_config()
    ref = _image('ref')
    tgt = _image('tgt')
    result = estimate_flow(ref, tgt, _mask('ref_mask', False), _mask('tgt_mask', False), cfg.flow)
    return send_file(io.BytesIO(flo_bytes(result)), mimetype='application/octet-stream',
                     download_name='flow.flo')


@fusion_bp.route('', methods=['POST'])
def defence():
    cfg = _request_config()
    frame_files = request.files.getlist('frames')
    if not frame_files:
        raise MissingUpload("Missing upload 'frames'")
    frames = [read_image(f.stream) for f in frame_files]
    mask_files = request.files.getlist('masks')
    workers = current_app.config['DEFENCE_THREADS']
    if mask_files:
        masks = [read_mask(f.stream) for f in mask_files]
    else:
        clf, backend = _classifier(cfg)
        masks = [segment_fence(f, clf, cfg.segmentation, backend, workers=workers).mask for f in frames]

    result = defence_pipeline(frames, masks, cfg.ref_index, cfg.flow, cfg.fista, workers=workers)
    response = _png(result.image)
    response.headers['X-Defence-Converged'] = str(result.converged).lower()
    response.headers['X-Defence-Iterations'] = str(result.iterations)
    response.headers['X-Defence-Empty'] = str(result.empty).lower()
    return response


@eval_bp.route('/psnr', methods=['POST'])
def eval_psnr():
    value = psnr(_image('pred'), _image('gt'), _mask('region', False))
    return jsonify({'psnr': value}), 200


@eval_bp.route('/mask', methods=['POST'])
def eval_mask():
    precision, recall, f = mask_fmeasure(_mask('pred'), _mask('gt'))
    return jsonify({'precision': precision, 'recall': recall, 'f': f}), 200
