"""Single-image fence segmentation.

Texel joints are found with a linear classifier run over a dense sliding
window, linked into a lattice, rasterised into a preliminary mask, turned into
foreground/background scribbles and finally refined by a scribble-constrained
alpha solve.
"""
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.sparse as sparse
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree

from errors import FileFormatError, MissingFeatureError
from imgcore import boundary_edges, dilate, erode, image_gradients, to_gray
from models import (BACKGROUND, FOREGROUND, UNKNOWN, BinaryMask, Image, Lattice, LinearClassifier,
                    SegmentationParams, TexelDetection, Trimap)

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'defence-classifier'
MODEL_VERSION = 1
FVEC_MAGIC = b'FVEC'
FVEC_HEADER = struct.Struct('<4sII')


def _window_patch(img, cx, cy, window):
    h, w = img.shape[:2]
    top = int(round(cy)) - window // 2
    left = int(round(cx)) - window // 2
    rows = np.clip(np.arange(top, top + window), 0, h - 1)
    cols = np.clip(np.arange(left, left + window), 0, w - 1)
    return img[rows[:, None], cols[None, :]]


def _rotated_patch(img, cx, cy, window, theta):
    """window x window samples on a grid turned by theta about the rounded centre, edges replicated"""
    offsets = np.arange(window, dtype=np.float64) - window // 2
    oy, ox = np.meshgrid(offsets, offsets, indexing='ij')
    c, s = math.cos(theta), math.sin(theta)
    coords = [int(round(cy)) + s * ox + c * oy, int(round(cx)) + c * ox - s * oy]
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode='nearest')
    return np.dstack([ndimage.map_coordinates(img[..., ch], coords, order=1, mode='nearest')
                      for ch in range(img.shape[2])])


def _l2_normalise(block):
    norm = np.linalg.norm(block)
    if norm == 0:
        return block
    return block / norm


class GradientHistogramBackend:
    """Orientation histograms on a cells x cells grid plus per-channel colour histograms.

    With steer=True the window is resampled along the dominant lattice
    direction first, so a joint of a rotated fence gives the same descriptor
    as an axis-aligned one.
    """

    name = 'gradhist'
    dense = True

    def __init__(self, cells=4, orientations=8, color_bins=8, steer=True, smoothing=1.0):
        self.cells = cells
        self.orientations = orientations
        self.color_bins = color_bins
        self.steer = steer
        self.smoothing = smoothing

    @property
    def dim(self):
        return self.cells * self.cells * self.orientations + 3 * self.color_bins

    def extract(self, img, cx, cy, window):
        patch = _window_patch(img, cx, cy, window)
        if self.steer:
            theta = self.orientation(patch)
            if theta != 0.0:
                patch = _rotated_patch(img, cx, cy, window, theta)
        return self.describe(patch)

    def orientation(self, patch):
        """Dominant edge direction modulo 90 degrees, in radians within (-pi/4, pi/4]"""
        gray = ndimage.gaussian_filter(to_gray(np.asarray(patch, dtype=np.float64)), self.smoothing)
        gx, gy = image_gradients(gray)
        z = gx + 1j * gy
        power = np.abs(z) ** 2
        rows = np.arange(gray.shape[0]) - gray.shape[0] // 2
        cols = np.arange(gray.shape[1]) - gray.shape[1] // 2
        sigma = max(gray.shape) / 4.0
        weight = np.exp(-(rows[:, None] ** 2 + cols[None, :] ** 2) / (2.0 * sigma ** 2))
        # z^4 / |z|^2 is |z|^2 at four times the gradient angle: both wire families add up
        quartic = np.divide(z ** 4, power, out=np.zeros_like(z), where=power > 1e-12)
        moment = np.sum(weight * quartic)
        if abs(moment) < 1e-12:
            return 0.0
        return float(np.angle(moment) / 4.0)

    def describe(self, patch):
        size = patch.shape[0]
        gray = to_gray(patch)
        gx, gy = image_gradients(gray)
        magnitude = np.hypot(gx, gy)
        angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        bins = np.rint(angle / (2 * np.pi / self.orientations)).astype(np.intp) % self.orientations

        cell = (np.arange(size) * self.cells) // size
        cell_index = cell[:, None] * self.cells + cell[None, :]
        index = cell_index * self.orientations + bins
        orientation = np.bincount(index.ravel(), weights=magnitude.ravel(),
                                  minlength=self.cells * self.cells * self.orientations)

        rgb = patch if patch.ndim == 3 else np.repeat(patch[..., None], 3, axis=2)
        color_index = np.clip(np.floor(rgb[..., :3] * self.color_bins), 0, self.color_bins - 1).astype(np.intp)
        color = np.concatenate([
            np.bincount(color_index[..., c].ravel(), minlength=self.color_bins) for c in range(3)
        ]).astype(np.float64)

        return np.concatenate([_l2_normalise(orientation), _l2_normalise(color)])


class FeatureFileBackend:
    """Per-window vectors computed elsewhere (e.g. CNN activations), keyed by window centre.

    Only the exported centres exist, so the backend is not dense and detections
    are never refined between grid points.
    """

    name = 'fvec'
    dense = False

    def __init__(self, path):
        self.path = path
        self.records = read_feature_file(path)
        dims = {vec.size for vec in self.records.values()}
        self.dim = dims.pop() if dims else 0

    def extract(self, img, cx, cy, window):
        key = (int(round(cx)), int(round(cy)))
        try:
            return self.records[key]
        except KeyError:
            raise MissingFeatureError(*key) from None


def make_backend(params):
    if params.feature_backend == 'gradhist':
        return GradientHistogramBackend()
    if params.feature_backend == 'fvec':
        if not params.feature_file:
            raise ValueError("the fvec feature backend needs segmentation.feature_file")
        return FeatureFileBackend(params.feature_file)
    raise ValueError(f"unknown feature backend {params.feature_backend!r}")


def extract_features(img, cx, cy, window, backend=None):
    backend = backend or GradientHistogramBackend()
    return backend.extract(img, cx, cy, window)


def read_feature_file(path):
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < FVEC_HEADER.size:
        raise FileFormatError(f"{path}: truncated feature file header")
    magic, dim, count = FVEC_HEADER.unpack_from(raw)
    if magic != FVEC_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {FVEC_MAGIC!r}")
    record = np.dtype([('cx', '<i4'), ('cy', '<i4'), ('values', '<f4', (dim,))])
    if len(raw) - FVEC_HEADER.size != count * record.itemsize:
        raise FileFormatError(f"{path}: expected {count} records of dimension {dim}")
    table = np.frombuffer(raw, dtype=record, count=count, offset=FVEC_HEADER.size)
    return {(int(r['cx']), int(r['cy'])): r['values'].astype(np.float64) for r in table}


def write_feature_file(path, records):
    """records maps (cx, cy) to equal-length vectors"""
    dims = {len(vec) for vec in records.values()}
    if len(dims) > 1:
        raise ValueError(f"feature vectors have mixed lengths {sorted(dims)}")
    dim = dims.pop() if dims else 0
    record = np.dtype([('cx', '<i4'), ('cy', '<i4'), ('values', '<f4', (dim,))])
    table = np.zeros(len(records), dtype=record)
    for i, ((cx, cy), vec) in enumerate(sorted(records.items())):
        table[i] = (cx, cy, vec)
    with open(path, 'wb') as f:
        f.write(FVEC_HEADER.pack(FVEC_MAGIC, dim, len(records)))
        f.write(table.tobytes())


def save_classifier(path, clf):
    payload = {'format': MODEL_FORMAT, 'version': MODEL_VERSION, **clf.to_dict()}
    with open(path, 'w') as f:
        json.dump(payload, f)


def load_classifier(path):
    try:
        with open(path) as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: not a classifier model ({e})") from e
    if payload.get('format') != MODEL_FORMAT:
        raise FileFormatError(f"{path}: not a classifier model")
    if payload.get('version') != MODEL_VERSION:
        raise FileFormatError(f"{path}: unsupported model version {payload.get('version')}")
    weights = payload.get('weights', [])
    if len(weights) != payload.get('dim'):
        raise FileFormatError(f"{path}: weight count {len(weights)} does not match dim {payload.get('dim')}")
    return LinearClassifier(
        weights=np.array(weights, dtype=np.float64),
        bias=float(payload['bias']),
        threshold=float(payload.get('threshold', 0.0)),
        backend=payload.get('backend', 'gradhist'),
    )


def train_classifier(positives, negatives, c=1.0, epochs=50, learning_rate=0.01, seed=0,
                     balanced=True, backend='gradhist'):
    """Linear max-margin classifier by hinge-loss SGD with L2 regularisation.

    Minimises 0.5 * |w|^2 + c * sum_i s_i * max(0, 1 - y_i (w.x_i + b)) with
    a step of learning_rate / sqrt(epoch). With balanced=True each class carries
    half of the total sample weight.
    """
    if len(positives) < 1 or len(negatives) < 1:
        raise ValueError("training needs at least one positive and one negative example")
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.shape[1] != neg.shape[1]:
        raise ValueError(f"positive dimension {pos.shape[1]} differs from negative dimension {neg.shape[1]}")

    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    n = len(y)
    if balanced:
        weight = np.where(y > 0, n / (2.0 * len(pos)), n / (2.0 * len(neg)))
    else:
        weight = np.ones(n)
    reg = 1.0 / (c * n)

    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    for epoch in range(1, epochs + 1):
        eta = learning_rate / math.sqrt(epoch)
        for i in rng.permutation(n):
            margin = y[i] * (X[i] @ w + b)
            w *= 1.0 - eta * reg
            if margin < 1.0:
                w += eta * weight[i] * y[i] * X[i]
                b += eta * weight[i] * y[i]

    accuracy = float(np.mean(np.where(X @ w + b > 0, 1.0, -1.0) == y))
    logger.info("Trained classifier on %d positives / %d negatives, training accuracy %.3f",
                len(pos), len(neg), accuracy)
    return LinearClassifier(weights=w, bias=b, threshold=0.0, backend=backend)


def non_max_suppression(detections, radius):
    """Greedy suppression by descending score; ties keep scan order"""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept = []
    for i in order:
        d = detections[i]
        if all(math.hypot(d.x - k.x, d.y - k.y) > radius for k in kept):
            kept.append(d)
    return kept


def _score_row(img, clf, backend, cy, xs, window):
    feats = np.array([backend.extract(img, cx, cy, window) for cx in xs])
    return clf.score(feats)


def _refine(img, clf, backend, det, reach, window):
    h, w = img.shape[:2]
    best = det
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            x, y = det.x + dx, det.y + dy
            if (dx == 0 and dy == 0) or not (0 <= x < w and 0 <= y < h):
                continue
            score = float(clf.score(backend.extract(img, x, y, window)))
            if score > best.score:
                best = TexelDetection(x=float(x), y=float(y), score=score)
    return best


def detect_texels(img, clf, stride=5, window=32, backend=None, nms_radius=None, refine=False, workers=1):
    h, w = img.shape[:2]
    if stride < 1:
        raise ValueError(f"stride must be at least 1, got {stride}")
    if window > min(h, w):
        raise ValueError(f"window {window} exceeds image size {w}x{h}")
    backend = backend or GradientHistogramBackend()
    if backend.dim != clf.dim:
        raise ValueError(f"classifier dimension {clf.dim} does not match {backend.name} features ({backend.dim})")

    ys = np.arange(0, h, stride)
    xs = np.arange(0, w, stride)
    # rows are independent; results come back in row-major order
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(lambda cy: _score_row(img, clf, backend, cy, xs, window), ys))

    candidates = []
    for cy, scores in zip(ys, rows):
        for cx, score in zip(xs, scores):
            if score > clf.threshold:
                candidates.append(TexelDetection(x=float(cx), y=float(cy), score=float(score)))

    radius = nms_radius if nms_radius is not None else window / 2
    kept = non_max_suppression(candidates, radius)
    if refine and stride > 1:
        if backend.dense:
            kept = [_refine(img, clf, backend, d, stride // 2, window) for d in kept]
            kept = non_max_suppression(kept, radius)
        else:
            logger.debug("%s features exist only on the scan grid; detections not refined", backend.name)
    logger.info("Detected %d texel joints (%d windows above threshold)", len(kept), len(candidates))
    return kept


def _quadrant(dx, dy):
    angle = math.degrees(math.atan2(dy, dx))
    return int(((angle + 45.0) % 360.0) // 90.0)


def default_link_distance(detections, factor=1.8):
    if len(detections) < 2:
        return 0.0
    points = np.array([(d.x, d.y) for d in detections])
    distances, _ = cKDTree(points).query(points, k=2)
    return factor * float(np.median(distances[:, 1]))


def link_texels(detections, max_link=None, link_factor=1.8):
    """Join each joint to its nearest neighbour in each angular quadrant within max_link"""
    if max_link is None:
        max_link = default_link_distance(detections, link_factor)
        if max_link <= 0:
            return Lattice(nodes=list(detections), edges=[])
    if max_link <= 0:
        raise ValueError(f"max_link must be positive, got {max_link}")
    if len(detections) < 2:
        return Lattice(nodes=list(detections), edges=[])

    points = np.array([(d.x, d.y) for d in detections])
    tree = cKDTree(points)
    edges = set()
    for i, p in enumerate(points):
        nearest = {}
        for j in tree.query_ball_point(p, max_link):
            if j == i:
                continue
            dx, dy = points[j] - p
            dist = math.hypot(dx, dy)
            q = _quadrant(dx, dy)
            if q not in nearest or (dist, j) < nearest[q]:
                nearest[q] = (dist, j)
        for _, j in nearest.values():
            edges.add((min(i, j), max(i, j)))
    return Lattice(nodes=list(detections), edges=sorted(edges))


def prune_lattice(lattice, min_nodes=4):
    """Drop connected pieces of the lattice with fewer than min_nodes joints"""
    n = len(lattice.nodes)
    if n == 0 or min_nodes <= 1:
        return lattice
    edges = np.array(lattice.edges, dtype=np.intp).reshape(-1, 2)
    graph = sparse.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels)
    keep = np.nonzero(sizes[labels] >= min_nodes)[0]
    if len(keep) == n:
        return lattice
    logger.info("Dropped %d isolated joints in pieces smaller than %d", n - len(keep), min_nodes)
    remap = {int(old): new for new, old in enumerate(keep)}
    kept_edges = [(remap[i], remap[j]) for i, j in lattice.edges if i in remap and j in remap]
    return Lattice(nodes=[lattice.nodes[i] for i in keep], edges=kept_edges)


def _draw_segment(mask, a, b, half_width):
    h, w = mask.shape
    x_lo = max(int(math.floor(min(a[0], b[0]) - half_width)), 0)
    x_hi = min(int(math.ceil(max(a[0], b[0]) + half_width)), w - 1)
    y_lo = max(int(math.floor(min(a[1], b[1]) - half_width)), 0)
    y_hi = min(int(math.ceil(max(a[1], b[1]) + half_width)), h - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi + 1, x_lo:x_hi + 1]
    seg = np.subtract(b, a, dtype=np.float64)
    length2 = seg @ seg
    if length2 == 0:
        t = np.zeros(xx.shape)
    else:
        t = np.clip(((xx - a[0]) * seg[0] + (yy - a[1]) * seg[1]) / length2, 0.0, 1.0)
    dist = np.hypot(xx - (a[0] + t * seg[0]), yy - (a[1] + t * seg[1]))
    mask[y_lo:y_hi + 1, x_lo:x_hi + 1] |= dist <= half_width + 1e-9


def _draw_disk(mask, centre, radius):
    _draw_segment(mask, centre, centre, radius)


def _border_rays(lattice, w, h):
    """Dangling lattice directions continued to the image border"""
    points = [(n.x, n.y) for n in lattice.nodes]
    directions = {i: [] for i in range(len(points))}
    for i, j in lattice.edges:
        d = np.subtract(points[j], points[i], dtype=np.float64)
        directions[i].append(d)
        directions[j].append(-d)
    reach = float(w + h)
    for i, dirs in directions.items():
        for d in dirs:
            back = -d
            has_opposite = any(
                np.dot(back, other) > math.cos(math.radians(45)) * np.linalg.norm(back) * np.linalg.norm(other)
                for other in dirs
            )
            if not has_opposite:
                end = np.asarray(points[i]) + back * (reach / np.linalg.norm(back))
                yield points[i], tuple(end)


def rasterize_lattice(lattice, thickness, w, h, extend=False):
    """Edges become segments of the given thickness, nodes disks of radius thickness"""
    if thickness < 1:
        raise ValueError(f"thickness must be at least 1, got {thickness}")
    mask = np.zeros((h, w), dtype=bool)
    half = thickness / 2.0
    for i, j in lattice.edges:
        a, b = lattice.nodes[i], lattice.nodes[j]
        _draw_segment(mask, (a.x, a.y), (b.x, b.y), half)
    if extend:
        for a, b in _border_rays(lattice, w, h):
            _draw_segment(mask, a, b, half)
    for node in lattice.nodes:
        _draw_disk(mask, (node.x, node.y), thickness)
    return mask


def generate_scribbles(prelim, erode_r=1, dilate_r=3):
    if erode_r < 1 or dilate_r < 1:
        raise ValueError(f"scribble radii must be at least 1, got erode_r={erode_r}, dilate_r={dilate_r}")
    prelim = np.asarray(prelim, dtype=bool)

    radius = erode_r
    fg = erode(prelim, radius)
    while not fg.any() and radius > 0:
        radius -= 1
        fg = erode(prelim, radius)
    if radius != erode_r:
        logger.info("Foreground scribbles empty at erosion radius %d, used %d", erode_r, radius)

    bg = boundary_edges(dilate(prelim, dilate_r))
    overlap = fg & bg
    labels = np.full(prelim.shape, UNKNOWN, dtype=np.int8)
    labels[fg & ~overlap] = FOREGROUND
    labels[bg & ~overlap] = BACKGROUND
    return Trimap(labels=labels, erode_radius=radius)


def dominant_color(img, region, radius=0.1, samples=2000):
    """Colour shared by the most pixels of region, within radius"""
    colors = np.asarray(img, dtype=np.float64)[np.asarray(region, dtype=bool)]
    colors = colors.reshape(len(colors), -1)
    if not len(colors):
        raise ValueError("dominant_color needs a non-empty region")
    if len(colors) > samples:
        colors = colors[np.linspace(0, len(colors) - 1, samples).astype(np.intp)]
    counts = cKDTree(colors).query_ball_point(colors, radius, return_length=True)
    return colors[int(np.argmax(counts))]


def gate_scribbles(img, trimap, color, tol):
    """Unlabel foreground scribbles unlike the fence colour and background scribbles like it"""
    img = np.asarray(img, dtype=np.float64)
    pixels = img if img.ndim == 3 else img[..., None]
    near = np.linalg.norm(pixels - np.asarray(color, dtype=np.float64).reshape(1, 1, -1), axis=2) <= tol
    labels = trimap.labels.copy()
    labels[trimap.foreground & ~near] = UNKNOWN
    labels[trimap.background & near] = UNKNOWN
    return Trimap(labels=labels, erode_radius=trimap.erode_radius)


def _affinities(img, sigma_c):
    img = img if img.ndim == 3 else img[..., None]
    horizontal = np.sum((img[:, 1:] - img[:, :-1]) ** 2, axis=2)
    vertical = np.sum((img[1:, :] - img[:-1, :]) ** 2, axis=2)
    scale = 2.0 * sigma_c ** 2
    return np.exp(-horizontal / scale), np.exp(-vertical / scale)


def matting_laplacian(img, sigma_c=0.1):
    """4-neighbour graph Laplacian D - W with colour affinities"""
    h, w = img.shape[:2]
    index = np.arange(h * w).reshape(h, w)
    a_h, a_v = _affinities(img, sigma_c)
    rows = np.concatenate([index[:, :-1].ravel(), index[:-1, :].ravel()])
    cols = np.concatenate([index[:, 1:].ravel(), index[1:, :].ravel()])
    vals = np.concatenate([a_h.ravel(), a_v.ravel()])
    W = sparse.coo_matrix((vals, (rows, cols)), shape=(h * w, h * w))
    W = (W + W.T).tocsr()
    degree = np.asarray(W.sum(axis=1)).ravel()
    return (sparse.diags(degree) - W).tocsr()


def alpha_energy(img, trimap, alpha, lambda_s=100.0, sigma_c=0.1, prior=0.0):
    a_h, a_v = _affinities(img, sigma_c)
    smooth = np.sum(a_h * (alpha[:, 1:] - alpha[:, :-1]) ** 2) + np.sum(a_v * (alpha[1:, :] - alpha[:-1, :]) ** 2)
    target = trimap.foreground.astype(np.float64)
    scribbled = ~trimap.unknown
    return float(smooth + lambda_s * np.sum((alpha - target)[scribbled] ** 2) + prior * np.sum(alpha ** 2))


def solve_alpha(img, trimap, lambda_s=100.0, sigma_c=0.1, tol=1e-6, max_iters=2000, prior=0.0):
    """Scribble-constrained alpha by conjugate gradients.

    prior adds a weak pull towards background on every pixel. Regions that the
    colour affinities cut off from all scribbles, such as the cells between
    wires, then settle at zero instead of leaking up from the fence.
    """
    fg = trimap.foreground
    bg = trimap.background
    if not fg.any() or not bg.any():
        raise ValueError("solve_alpha needs at least one foreground and one background scribble")
    if prior < 0:
        raise ValueError(f"prior must be non-negative, got {prior}")

    h, w = img.shape[:2]
    scribbled = (fg | bg).ravel().astype(np.float64)
    target = fg.ravel().astype(np.float64)
    A = matting_laplacian(img, sigma_c) + sparse.diags(lambda_s * scribbled + prior)
    b = lambda_s * scribbled * target
    diagonal = A.diagonal()
    jacobi = sparse.diags(np.divide(1.0, diagonal, out=np.ones_like(diagonal), where=diagonal > 0))

    alpha, info = cg(A, b, x0=target.copy(), rtol=tol, atol=0.0, maxiter=max_iters, M=jacobi)
    if info > 0:
        logger.warning("Alpha solve stopped after %d iterations without reaching tolerance %g", info, tol)
    return np.clip(alpha.reshape(h, w), 0.0, 1.0)


def threshold_alpha(alpha, tau=0.5):
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie strictly between 0 and 1, got {tau}")
    return np.asarray(alpha) >= tau


@dataclass
class SegmentationResult:
    mask: BinaryMask
    alpha: Image
    detections: List[TexelDetection]
    lattice: Optional[Lattice] = None
    trimap: Optional[Trimap] = None
    empty: bool = False

    def to_dict(self):
        return {
            'fence_pixels': int(self.mask.sum()),
            'detections': len(self.detections),
            'edges': len(self.lattice.edges) if self.lattice else 0,
            'trimap': self.trimap.to_dict() if self.trimap else None,
            'empty': self.empty,
        }


def segment_fence(img, clf, params=None, backend=None, workers=1):
    params = params or SegmentationParams()
    backend = backend or make_backend(params)
    if backend.dim != clf.dim:
        raise ValueError(f"classifier dimension {clf.dim} does not match {backend.name} features ({backend.dim})")
    h, w = img.shape[:2]

    detections = detect_texels(img, clf, stride=params.stride, window=params.window, backend=backend,
                               nms_radius=params.suppression_radius, refine=params.refine, workers=workers)
    if not detections:
        logger.warning("No fence texels detected; returning an empty fence mask")
        return SegmentationResult(mask=np.zeros((h, w), dtype=bool), alpha=np.zeros((h, w)),
                                  detections=[], empty=True)

    lattice = prune_lattice(link_texels(detections, link_factor=params.link_factor), params.min_lattice_nodes)
    if not lattice.nodes:
        logger.warning("No lattice of %d or more joints among %d detections; returning an empty fence mask",
                       params.min_lattice_nodes, len(detections))
        return SegmentationResult(mask=np.zeros((h, w), dtype=bool), alpha=np.zeros((h, w)),
                                  detections=detections, lattice=lattice, empty=True)

    prelim = rasterize_lattice(lattice, params.lattice_thickness, w, h, extend=params.extend_lattice)
    trimap = generate_scribbles(prelim, params.erode_radius, params.dilate_radius)
    if params.color_tol is not None and trimap.foreground.any():
        color = dominant_color(img, trimap.foreground)
        gated = gate_scribbles(img, trimap, color, params.color_tol)
        if gated.foreground.any() and gated.background.any():
            trimap = gated
        else:
            logger.debug("Colour gating would empty the scribbles; keeping the lattice scribbles")
    if not trimap.foreground.any() or not trimap.background.any():
        logger.warning("Scribbles degenerate (fg=%d, bg=%d); using the preliminary lattice mask",
                       trimap.foreground.sum(), trimap.background.sum())
        return SegmentationResult(mask=prelim, alpha=prelim.astype(np.float64), detections=detections,
                                  lattice=lattice, trimap=trimap, empty=not prelim.any())

    alpha = solve_alpha(img, trimap, params.lambda_s, params.sigma_c, params.alpha_tol, params.alpha_max_iters,
                        prior=params.alpha_prior)
    mask = threshold_alpha(alpha, params.tau)
    logger.info("Fence mask covers %.2f%% of the image", 100.0 * mask.mean())
    return SegmentationResult(mask=mask, alpha=alpha, detections=detections, lattice=lattice,
                              trimap=trimap, empty=not mask.any())
