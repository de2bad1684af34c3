"""Synthetic fence scenes with exact ground truth, and the metrics used to score every stage."""
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from errors import NoDataError
from fenceseg import GradientHistogramBackend
from imgcore import read_image, resize, write_image, write_mask
from models import FlowField, GroundTruth, SceneSpec, TexelDetection, TrainingParams
from occflow import write_flo

logger = logging.getLogger(__name__)

CHECKER_SIZE = 16


def _motion_matrix(motion):
    if len(motion) == 2:
        return np.eye(2), np.asarray(motion, dtype=np.float64)
    a, b, c, d, tx, ty = motion
    return np.array([[a, b], [c, d]], dtype=np.float64), np.array([tx, ty], dtype=np.float64)


def motion_field(motion, shape):
    """Displacement of every pixel under a translation (dx, dy) or affine (a, b, c, d, tx, ty)"""
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    A, t = _motion_matrix(motion)
    xs = A[0, 0] * cols + A[0, 1] * rows + t[0]
    ys = A[1, 0] * cols + A[1, 1] * rows + t[1]
    return FlowField(xs - cols, ys - rows)


def relative_flows(spec, ref_index):
    """Warp of the reference-aligned background onto each frame: frame_m(q) = x(q + w_m(q))"""
    shape = (spec.height, spec.width)
    A_ref, t_ref = _motion_matrix(spec.motions[ref_index])
    inverse = np.linalg.inv(A_ref)
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    flows = []
    for motion in spec.motions:
        A, t = _motion_matrix(motion)
        sx = A[0, 0] * cols + A[0, 1] * rows + t[0] - t_ref[0]
        sy = A[1, 0] * cols + A[1, 1] * rows + t[1] - t_ref[1]
        px = inverse[0, 0] * sx + inverse[0, 1] * sy
        py = inverse[1, 0] * sx + inverse[1, 1] * sy
        flows.append(FlowField(px - cols, py - rows))
    return flows


def _padding(spec):
    reach = 0.0
    for motion in spec.motions:
        field = motion_field(motion, (spec.height, spec.width))
        reach = max(reach, float(np.abs(field.u).max()), float(np.abs(field.v).max()))
    return int(math.ceil(reach)) + 2


def make_texture(kind, width, height, rng):
    if kind == 'noise':
        base = ndimage.gaussian_filter(rng.standard_normal((height, width, 3)), sigma=(2, 2, 0))
        lo, hi = base.min(), base.max()
        return 0.05 + 0.65 * (base - lo) / (hi - lo)
    if kind == 'checker':
        rows, cols = np.mgrid[0:height, 0:width]
        check = ((rows // CHECKER_SIZE + cols // CHECKER_SIZE) % 2).astype(np.float64)
        ramp_x = cols / max(width - 1, 1)
        ramp_y = rows / max(height - 1, 1)
        return np.dstack([
            0.15 + 0.35 * check + 0.2 * ramp_x,
            0.15 + 0.25 * check + 0.3 * ramp_y,
            0.1 + 0.3 * check + 0.15 * (ramp_x + ramp_y),
        ])
    raise ValueError(f"unknown texture {kind!r}")


def _canvas(spec, pad, rng):
    width, height = spec.width + 2 * pad, spec.height + 2 * pad
    if spec.background_path:
        img = read_image(spec.background_path)
        if img.ndim == 2:
            img = np.dstack([img] * 3)
        return resize(img, (height, width))
    return make_texture(spec.texture, width, height, rng)


def _wire_offsets(shape, spacing, angle, origin):
    """Signed offset of every pixel centre from the nearest wire of each family"""
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = math.radians(angle)
    dx, dy = cols - origin[0], rows - origin[1]
    s = dx * math.cos(theta) + dy * math.sin(theta)
    t = -dx * math.sin(theta) + dy * math.cos(theta)
    return s - spacing * np.round(s / spacing), t - spacing * np.round(t / spacing)


def lattice_mask(shape, spacing, angle, thickness, origin):
    ds, dt = _wire_offsets(shape, spacing, angle, origin)
    half = thickness / 2.0
    return ((ds >= -half) & (ds < half)) | ((dt >= -half) & (dt < half))


def lattice_alpha(shape, spacing, angle, thickness, origin):
    """Fence coverage with a one-pixel linear falloff around each wire"""
    ds, dt = _wire_offsets(shape, spacing, angle, origin)
    reach = thickness / 2.0 + 1.0
    a_s = np.clip(reach - np.abs(ds + 0.5), 0.0, 1.0)
    a_t = np.clip(reach - np.abs(dt + 0.5), 0.0, 1.0)
    return np.maximum(a_s, a_t)


def lattice_joints(shape, spacing, angle, origin):
    h, w = shape
    theta = math.radians(angle)
    along = np.array([math.cos(theta), math.sin(theta)]) * spacing
    across = np.array([-math.sin(theta), math.cos(theta)]) * spacing
    n = int(math.ceil(math.hypot(w, h) / spacing)) + 1
    joints = []
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            x, y = np.asarray(origin) + i * along + j * across
            if 0 <= x <= w - 1 and 0 <= y <= h - 1:
                joints.append((x, y))
    joints.sort(key=lambda p: (p[1], p[0]))
    return np.array(joints, dtype=np.float64).reshape(-1, 2)


def render_scene(spec):
    """Render every frame of a scene; returns (frames, ground truth)"""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    pad = _padding(spec)
    canvas = _canvas(spec, pad, rng)
    background = canvas[pad:pad + spec.height, pad:pad + spec.width].copy()
    color = np.asarray(spec.fence_color, dtype=np.float64)

    frames, masks, flows, joints = [], [], [], []
    for m, motion in enumerate(spec.motions):
        flow = motion_field(motion, shape)
        rows, cols = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
        coords = [rows + flow.v + pad, cols + flow.u + pad]
        frame = np.dstack([ndimage.map_coordinates(canvas[..., c], coords, order=1, mode='nearest')
                           for c in range(3)])

        shift = spec.fence_motions[m] if spec.fence_motions else (0.0, 0.0)
        origin = (spec.origin[0] - shift[0], spec.origin[1] - shift[1])
        if spec.soft_edges:
            alpha = lattice_alpha(shape, spec.spacing, spec.angle, spec.thickness, origin)
            mask = alpha > 0
        else:
            mask = lattice_mask(shape, spec.spacing, spec.angle, spec.thickness, origin)
            alpha = mask.astype(np.float64)
        frame = frame * (1.0 - alpha[..., None]) + color * alpha[..., None]
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, frame.shape)

        frames.append(np.clip(frame, 0.0, 1.0))
        masks.append(mask)
        flows.append(flow)
        joints.append(lattice_joints(shape, spec.spacing, spec.angle, origin))

    logger.debug("Rendered %d frames of %dx%d, %d joints in frame 0", spec.frames, spec.width, spec.height,
                 len(joints[0]))
    return frames, GroundTruth(background=background, masks=masks, flows=flows, joints=joints, seed=spec.seed)


def f_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _positions(points):
    if len(points) and isinstance(points[0], TexelDetection):
        return np.array([(p.x, p.y) for p in points], dtype=np.float64)
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def detection_fmeasure(pred, gt_joints, radius=5.0):
    """Greedy one-to-one matching by increasing distance; returns (precision, recall, f)"""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    pred = _positions(pred)
    gt = _positions(gt_joints)
    tp = 0
    if len(pred) and len(gt):
        dist = np.hypot(pred[:, None, 0] - gt[None, :, 0], pred[:, None, 1] - gt[None, :, 1])
        candidates = sorted((dist[i, j], i, j) for i, j in zip(*np.nonzero(dist <= radius)))
        used_pred, used_gt = set(), set()
        for _, i, j in candidates:
            if i in used_pred or j in used_gt:
                continue
            used_pred.add(i)
            used_gt.add(j)
            tp += 1
    precision = tp / len(pred) if len(pred) else 0.0
    recall = tp / len(gt) if len(gt) else 0.0
    return precision, recall, f_score(precision, recall)


def mask_fmeasure(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask sizes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.sum(pred & gt))
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall, f_score(precision, recall)


def endpoint_error(pred, gt, exclude=None):
    if pred.shape != gt.shape:
        raise ValueError(f"flow sizes differ: {pred.shape} vs {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    if not keep.any():
        raise NoDataError("every pixel is excluded from the endpoint error")
    epe = np.hypot(pred.u - gt.u, pred.v - gt.v)
    return float(epe[keep].mean())


def psnr(pred, gt, region=None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image sizes differ: {pred.shape} vs {gt.shape}")
    region = np.ones(gt.shape[:2], dtype=bool) if region is None else np.asarray(region, dtype=bool)
    if not region.any():
        raise NoDataError("PSNR region is empty")
    mse = float(np.mean((pred[region] - gt[region]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def sample_training_windows(frame, joints, params=None, window=32, backend=None, rng=None):
    """Feature vectors of windows centred on joints (positives) and well away from them (negatives)"""
    params = params or TrainingParams()
    backend = backend or GradientHistogramBackend()
    rng = rng or np.random.default_rng(0)
    h, w = frame.shape[:2]
    joints = _positions(joints)

    positives = []
    for x, y in joints:
        cx, cy = int(round(x)), int(round(y))
        for oy in range(-params.jitter, params.jitter + 1):
            for ox in range(-params.jitter, params.jitter + 1):
                if 0 <= cx + ox < w and 0 <= cy + oy < h:
                    positives.append(backend.extract(frame, cx + ox, cy + oy, window))

    negatives = []
    attempts = 0
    while len(negatives) < params.negatives_per_scene and attempts < 50 * params.negatives_per_scene:
        attempts += 1
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        if len(joints) and np.min(np.hypot(joints[:, 0] - cx, joints[:, 1] - cy)) < params.min_negative_distance:
            continue
        negatives.append(backend.extract(frame, cx, cy, window))

    dim = backend.dim
    return np.array(positives).reshape(-1, dim), np.array(negatives).reshape(-1, dim)


def build_training_set(specs, params=None, window=32, backend=None, seed=0):
    """Windows from every frame of every scene, plus negatives from a fence-free distractor texture per scene"""
    params = params or TrainingParams()
    rng = np.random.default_rng(seed)
    positives, negatives = [], []
    for spec in specs:
        frames, gt = render_scene(spec)
        for frame, joints in zip(frames, gt.joints):
            pos, neg = sample_training_windows(frame, joints, params, window, backend, rng)
            positives.append(pos)
            negatives.append(neg)
        if params.distractor_texture and params.distractors_per_scene > 0:
            distractor = make_texture(params.distractor_texture, spec.width, spec.height, rng)
            draw = replace(params, negatives_per_scene=params.distractors_per_scene)
            _, neg = sample_training_windows(distractor, [], draw, window, backend, rng)
            negatives.append(neg)
    logger.info("Training set: %d positive and %d negative windows from %d scenes",
                sum(len(p) for p in positives), sum(len(n) for n in negatives), len(specs))
    return np.vstack(positives), np.vstack(negatives)


def write_joints(path, joints):
    np.savetxt(path, _positions(joints), fmt='%.3f', delimiter=',')


def read_joints(path):
    """x,y per line; a third score column is ignored"""
    data = np.loadtxt(path, delimiter=',', ndmin=2)
    if data.size == 0:
        return np.zeros((0, 2))
    return data[:, :2]


def write_scene(out_dir, spec, frames, gt):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {'background': 'background.png', 'frames': [], 'masks': [], 'flows': [], 'joints': []}
    write_image(out / files['background'], gt.background)
    for m, frame in enumerate(frames):
        names = {'frames': f'frame_{m}.png', 'masks': f'mask_{m}.png', 'flows': f'flow_{m}.flo',
                 'joints': f'joints_{m}.csv'}
        write_image(out / names['frames'], frame)
        write_mask(out / names['masks'], gt.masks[m])
        write_flo(out / names['flows'], gt.flows[m])
        write_joints(out / names['joints'], gt.joints[m])
        for key, name in names.items():
            files[key].append(name)

    manifest = {'spec': spec.to_dict(), 'ground_truth': gt.to_dict(), 'files': files}
    with open(out / 'manifest.json', 'w') as f:
        json.dump(manifest, f, indent=2)
    logger.info("Wrote %d-frame scene to %s", len(frames), out)
    return manifest


def load_scene_spec(path):
    with open(path) as f:
        return SceneSpec.from_dict(json.load(f))
