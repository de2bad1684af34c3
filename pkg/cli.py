"""`defence` command-line entry point.

Exit status: 0 success, 1 I/O or configuration failure, 2 fusion stopped
before converging (partial result written), 3 no fence found (reference
frame written unchanged).
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

import config
from errors import ConfigError, DefenceError
from fenceseg import (FeatureFileBackend, load_classifier, make_backend, read_feature_file, save_classifier,
                      segment_fence, train_classifier)
from fusion import defence_pipeline
from imgcore import read_image, read_mask, write_image, write_mask
from occflow import estimate_flow, flow_to_color, read_flo, write_flo
from synthbench import (build_training_set, detection_fmeasure, endpoint_error, load_scene_spec, mask_fmeasure,
                        psnr, read_joints, render_scene, write_scene)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NOT_CONVERGED = 2
EXIT_EMPTY_MASK = 3

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(level=None):
    logging.basicConfig(stream=sys.stderr, format=LOG_FORMAT, level=(level or config.log_level()).upper(),
                        force=True)


def _add_config_flags(parser, aliases=()):
    parser.add_argument('--config', help='JSON configuration file')
    group = parser.add_argument_group('configuration overrides')
    for key in config.dotted_keys():
        group.add_argument(f'--{key}', dest=key, metavar='VALUE', default=None)
    parser.set_defaults(config_aliases=tuple(aliases))
    for alias in aliases:
        group.add_argument(f"--{alias.replace('_', '-')}", dest=alias, metavar='VALUE', default=None,
                           help=f'same as --{config.ALIASES[alias]}')


def load_config(args):
    overrides = {}
    for key in list(config.dotted_keys()) + list(args.config_aliases):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = config.parse_config(args.config, overrides)
    logger.info("Resolved configuration: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _classifier(path, cfg):
    path = path or cfg.io.model_path or config.model_path()
    if not path:
        raise ConfigError('io.model_path', 'a classifier model is required (--model or DEFENCE_MODEL_PATH)')
    clf = load_classifier(path)
    backend = make_backend(cfg.segmentation)
    if clf.backend != backend.name:
        logger.warning("Model was trained on %r features but %r is configured", clf.backend, backend.name)
    return clf, backend


def write_detections(path, detections):
    rows = np.array([(d.x, d.y, d.score) for d in detections]).reshape(-1, 3)
    np.savetxt(path, rows, fmt='%.4f', delimiter=',')


def cmd_segment(args):
    cfg = load_config(args)
    clf, backend = _classifier(args.model, cfg)
    img = read_image(args.image)
    result = segment_fence(img, clf, cfg.segmentation, backend, workers=config.threads())
    write_mask(args.out_mask, result.mask)
    if args.alpha_out:
        write_image(args.alpha_out, result.alpha)
    if args.detections_out:
        write_detections(args.detections_out, result.detections)
    logger.info("Segmentation: %s", json.dumps(result.to_dict()))
    return EXIT_OK


def cmd_flow(args):
    cfg = load_config(args)
    ref = read_image(args.ref)
    tgt = read_image(args.tgt)
    ref_mask = read_mask(args.ref_mask) if args.ref_mask else None
    tgt_mask = read_mask(args.tgt_mask) if args.tgt_mask else None
    if ref_mask is None and tgt_mask is None:
        logger.info("No fence masks given; running without occlusion handling")
    flow = estimate_flow(ref, tgt, ref_mask, tgt_mask, cfg.flow)
    write_flo(args.out, flow)
    if args.visualize:
        write_image(args.visualize, flow_to_color(flow))
    logger.info("Flow: %s", json.dumps(flow.to_dict()))
    return EXIT_OK


def run_pipeline(cfg, frame_paths, out_path, mask_paths=None, flow_paths=None, model=None, workers=1):
    """Segment, estimate flow and fuse; returns the exit status"""
    frames = [read_image(p) for p in frame_paths]
    if len({f.shape for f in frames}) != 1:
        raise ValueError(f"frames differ in size: {[f.shape for f in frames]}")
    if not 0 <= cfg.ref_index < len(frames):
        raise ConfigError('ref_index', f"must index one of the {len(frames)} frames")
    keep = cfg.io.keep_intermediates
    inter = Path(cfg.io.intermediates_dir)
    if keep:
        inter.mkdir(parents=True, exist_ok=True)

    if mask_paths:
        if len(mask_paths) != len(frames):
            raise ValueError(f"got {len(mask_paths)} masks for {len(frames)} frames")
        masks = [read_mask(p) for p in mask_paths]
    else:
        clf, backend = _classifier(model, cfg)
        masks = []
        for m, frame in enumerate(frames):
            result = segment_fence(frame, clf, cfg.segmentation, backend, workers=workers)
            masks.append(result.mask)
            if keep:
                write_image(inter / f'alpha_{m}.png', result.alpha)
    if keep:
        for m, mask in enumerate(masks):
            write_mask(inter / f'mask_{m}.png', mask)

    flows = None
    if flow_paths:
        if len(flow_paths) != len(frames):
            raise ValueError(f"got {len(flow_paths)} flows for {len(frames)} frames")
        flows = [read_flo(p) for p in flow_paths]

    result = defence_pipeline(frames, masks, cfg.ref_index, cfg.flow, cfg.fista, flows=flows, workers=workers)
    write_image(out_path, result.image)
    if keep:
        for m, flow in enumerate(result.flows):
            write_flo(inter / f'flow_{m}.flo', flow)
            write_image(inter / f'flow_{m}.png', flow_to_color(flow))
    logger.info("Fusion: %s", json.dumps(result.to_dict()))

    if result.empty:
        logger.warning("No fence pixels in any frame; wrote the reference frame to %s", out_path)
        return EXIT_EMPTY_MASK
    if not result.converged:
        logger.warning("Fusion did not converge; wrote the partial result to %s", out_path)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_run(args):
    cfg = load_config(args)
    if args.keep_intermediates:
        cfg.io.keep_intermediates = True
    return run_pipeline(cfg, args.frames, args.out, args.masks, args.flows, args.model, workers=config.threads())


def cmd_synth(args):
    spec = load_scene_spec(args.spec)
    frames, gt = render_scene(spec)
    write_scene(args.out_dir, spec, frames, gt)
    return EXIT_OK


def _emit(metrics, out):
    text = json.dumps(metrics, indent=2)
    if out:
        Path(out).write_text(text + '\n')
    else:
        print(text)


def cmd_eval(args):
    if args.metric == 'detection':
        p, r, f = detection_fmeasure(read_joints(args.pred), read_joints(args.gt), args.radius)
        metrics = {'precision': p, 'recall': r, 'f': f}
    elif args.metric == 'mask':
        p, r, f = mask_fmeasure(read_mask(args.pred), read_mask(args.gt))
        metrics = {'precision': p, 'recall': r, 'f': f}
    elif args.metric == 'flow':
        exclude = read_mask(args.exclude) if args.exclude else None
        metrics = {'epe': endpoint_error(read_flo(args.pred), read_flo(args.gt), exclude)}
    else:
        region = read_mask(args.region) if args.region else None
        metrics = {'psnr': psnr(read_image(args.pred), read_image(args.gt), region)}
    _emit(metrics, args.out)
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    if args.positives and args.negatives:
        positives = np.array(list(read_feature_file(args.positives).values()))
        negatives = np.array(list(read_feature_file(args.negatives).values()))
        backend_name = FeatureFileBackend.name
    elif args.scenes:
        specs = [load_scene_spec(p) for p in args.scenes]
        backend = make_backend(cfg.segmentation)
        positives, negatives = build_training_set(specs, cfg.training, cfg.segmentation.window, backend, cfg.seed)
        backend_name = backend.name
    else:
        raise ConfigError('train-classifier', 'give --scenes or both --positives and --negatives')

    t = cfg.training
    clf = train_classifier(positives, negatives, c=t.c, epochs=t.epochs, learning_rate=t.learning_rate,
                           seed=cfg.seed, balanced=t.balanced, backend=backend_name)
    save_classifier(args.out, clf)
    logger.info("Saved %d-dimensional classifier to %s", clf.dim, args.out)
    return EXIT_OK


def cmd_serve(args):
    from app import create_app

    create_app().run(host=args.host, port=args.port, debug=False)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='defence', description='Remove fence occlusions from video frames.')
    parser.add_argument('--log-level', help='overrides DEFENCE_LOG_LEVEL')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('segment', help='segment the fence in one image')
    p.add_argument('--image', required=True)
    p.add_argument('--model')
    p.add_argument('--out-mask', required=True)
    p.add_argument('--alpha-out', help='also write the alpha matte')
    p.add_argument('--detections-out', help='also write detected joints as x,y,score CSV')
    _add_config_flags(p, ('stride', 'window', 'tau'))
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser('flow', help='occlusion-aware optical flow between two frames')
    p.add_argument('--ref', required=True)
    p.add_argument('--tgt', required=True)
    p.add_argument('--ref-mask')
    p.add_argument('--tgt-mask')
    p.add_argument('--out', required=True)
    p.add_argument('--visualize', help='also write a colour-coded flow image')
    _add_config_flags(p, ('mu',))
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser('run', help='full de-fencing of a reference frame')
    p.add_argument('--frames', nargs='+', required=True)
    p.add_argument('--masks', nargs='+')
    p.add_argument('--flows', nargs='+')
    p.add_argument('--model')
    p.add_argument('--out', required=True)
    p.add_argument('--keep-intermediates', action='store_true')
    _add_config_flags(p, ('stride', 'window', 'tau', 'mu', 'lambda', 'max_iters', 'ref'))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('synth', help='render a synthetic fence scene with ground truth')
    p.add_argument('--spec', required=True)
    p.add_argument('--out-dir', required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('eval', help='score a result against ground truth')
    metrics = p.add_subparsers(dest='metric', required=True)
    m = metrics.add_parser('detection')
    m.add_argument('--radius', type=float, default=5.0)
    m = metrics.add_parser('mask')
    m = metrics.add_parser('flow')
    m.add_argument('--exclude', help='mask of pixels left out of the average')
    m = metrics.add_parser('psnr')
    m.add_argument('--region', help='mask of pixels to score')
    for m in metrics.choices.values():
        m.add_argument('--pred', required=True)
        m.add_argument('--gt', required=True)
        m.add_argument('--out', help='write JSON here instead of standard output')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('train-classifier', help='train the texel classifier')
    p.add_argument('--scenes', nargs='+', help='scene JSON files to render and sample')
    p.add_argument('--positives', help='FVEC file of positive windows')
    p.add_argument('--negatives', help='FVEC file of negative windows')
    p.add_argument('--out', required=True)
    _add_config_flags(p, ('window',))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('serve', help='run the HTTP service')
    p.add_argument('--host', default='0.0.0.0')
    p.add_argument('--port', type=int, default=int(os.environ.get('PORT', 5000)))
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except (DefenceError, OSError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
