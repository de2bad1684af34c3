"""Raster primitives shared by every stage: PNG I/O, pyramids, gradients,
bilinear warping and binary morphology."""
import logging
import math

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from skimage.morphology import disk
from skimage.transform import resize as sk_resize

from models import Pyramid

logger = logging.getLogger(__name__)

REC601 = np.array([0.299, 0.587, 0.114])
FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


def read_image(path):
    """Load an 8-bit PNG as float64 intensities in [0, 1]; gray stays 2-D, everything else becomes RGB"""
    with PILImage.open(path) as im:
        if im.mode in ('1', 'L', 'LA', 'I', 'I;16', 'F'):
            im = im.convert('L')
        else:
            im = im.convert('RGB')
        data = np.asarray(im, dtype=np.float64) / 255.0
    return data


def write_image(path, img):
    data = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data).save(path, format='PNG')


def read_mask(path):
    return read_image_gray(path) > 0.5


def read_image_gray(path):
    return to_gray(read_image(path))


def write_mask(path, mask):
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(data).save(path, format='PNG')


def to_gray(img):
    if img.ndim == 2:
        return img
    return img[..., :3] @ REC601


def pyramid_sigma(ratio):
    return 0.6 * math.sqrt(1.0 / ratio ** 2 - 1.0)


def resize(img, shape, order=1):
    out_shape = tuple(shape[:2]) + img.shape[2:]
    return sk_resize(img, out_shape, order=order, mode='edge', anti_aliasing=False, preserve_range=True)


def gaussian_pyramid(img, ratio=0.5, min_dim=16):
    if not 0.25 <= ratio <= 0.9:
        raise ValueError(f"pyramid ratio must lie in [0.25, 0.9], got {ratio}")
    if min_dim < 16:
        raise ValueError(f"min_dim must be at least 16, got {min_dim}")

    sigma = pyramid_sigma(ratio)
    levels = [np.asarray(img, dtype=np.float64)]
    while True:
        current = levels[-1]
        h, w = current.shape[:2]
        nh, nw = math.ceil(h * ratio), math.ceil(w * ratio)
        if min(nh, nw) < min_dim:
            break
        sigmas = (sigma, sigma) + (0,) * (current.ndim - 2)
        blurred = ndimage.gaussian_filter(current, sigma=sigmas, mode='nearest')
        levels.append(resize(blurred, (nh, nw)))

    return Pyramid(levels=levels, ratio=ratio)


def downsample_mask(mask, shape):
    """Any-true reduction of a fine mask onto a coarser grid"""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == tuple(shape):
        return mask.copy()
    grown = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))
    out = grown
    for axis, (fine, coarse) in enumerate(zip(mask.shape, shape)):
        if coarse >= fine:
            out = resize(out.astype(np.float64), out.shape[:axis] + (coarse,) + out.shape[axis + 1:], order=0) > 0.5
            continue
        starts = np.floor(np.arange(coarse) * fine / coarse).astype(int)
        out = np.logical_or.reduceat(out, starts, axis=axis)
    return out


class BilinearSampler:
    """Backward bilinear sampling at (x + u, y + v) and its exact transpose.

    Samples whose 2x2 footprint leaves the raster are flagged invalid and
    contribute nothing in either direction.
    """

    def __init__(self, flow):
        h, w = flow.shape
        self.shape = (h, w)
        rows, cols = np.mgrid[0:h, 0:w]
        xs = cols + flow.u
        ys = rows + flow.v
        self.valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)

        x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.intp)
        y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.intp)
        fx = np.where(self.valid, xs - x0, 0.0)
        fy = np.where(self.valid, ys - y0, 0.0)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)

        gate = self.valid.astype(np.float64)
        self.corners = (
            (y0, x0, (1 - fx) * (1 - fy) * gate),
            (y0, x1, fx * (1 - fy) * gate),
            (y1, x0, (1 - fx) * fy * gate),
            (y1, x1, fx * fy * gate),
        )

    def sample(self, img):
        if img.shape[:2] != self.shape:
            raise ValueError(f"image {img.shape[:2]} does not match flow {self.shape}")
        out = np.zeros(img.shape, dtype=np.float64)
        for yy, xx, weight in self.corners:
            if img.ndim == 3:
                out += weight[..., None] * img[yy, xx]
            else:
                out += weight * img[yy, xx]
        return out

    def scatter(self, values):
        """Transpose of sample() for a single-channel raster"""
        h, w = self.shape
        out = np.zeros(h * w, dtype=np.float64)
        for yy, xx, weight in self.corners:
            out += np.bincount((yy * w + xx).ravel(), weights=(weight * values).ravel(), minlength=h * w)
        return out.reshape(h, w)


def warp_image(img, flow):
    """Sample img at (x + u, y + v); returns the warped image and the out-of-bounds mask"""
    if img.shape[:2] != flow.shape:
        raise ValueError(f"flow {flow.shape} does not match image {img.shape[:2]}")
    sampler = BilinearSampler(flow)
    return sampler.sample(img), ~sampler.valid


def image_gradients(img):
    if img.ndim != 2:
        raise ValueError("image_gradients expects a single-channel image")
    padded = np.pad(img, 1, mode='edge')
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return gx, gy


def _footprint(radius):
    return disk(radius).astype(bool)


def erode(mask, radius):
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    # outside the raster counts as set so erosion never eats in from the border
    return ndimage.binary_erosion(mask, structure=_footprint(radius), border_value=1)


def dilate(mask, radius):
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_footprint(radius))


def boundary_edges(mask):
    """Set pixels with at least one unset 4-neighbour inside the raster"""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=FOUR_NEIGHBOURS, border_value=1)
    return mask & ~interior
