"""Occlusion-aware coarse-to-fine optical flow.

The robust data term is switched off wherever either frame is occluded by the
fence (or the warp leaves the raster), so the smoothness term fills in the
motion of the background hidden behind the fence. Each pyramid level solves
for flow increments by IRLS, with every reweighted least-squares problem
handed to conjugate gradients in operator form.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from skimage.color import hsv2rgb

from errors import FileFormatError
from imgcore import dilate, downsample_mask, gaussian_pyramid, image_gradients, resize, to_gray, warp_image
from models import FlowField, FlowParams

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25


def phi(s, eps):
    return np.sqrt(s + eps ** 2)


def phi_prime(s, eps):
    s = np.asarray(s, dtype=np.float64)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if np.any(s < 0):
        raise ValueError("phi_prime is defined for non-negative arguments only")
    out = 0.5 / np.sqrt(s + eps ** 2)
    return float(out) if out.ndim == 0 else out


def diff_x(a):
    out = np.zeros_like(a)
    out[:, :-1] = a[:, 1:] - a[:, :-1]
    return out


def diff_x_adjoint(g):
    g = g.copy()
    g[:, -1] = 0.0
    out = -g
    out[:, 1:] += g[:, :-1]
    return out


def diff_y(a):
    out = np.zeros_like(a)
    out[:-1, :] = a[1:, :] - a[:-1, :]
    return out


def diff_y_adjoint(g):
    g = g.copy()
    g[-1, :] = 0.0
    out = -g
    out[1:, :] += g[:-1, :]
    return out


def combined_mask(o_ref, o_t, w, invalid, dilation=1):
    """Pixels whose data term is disabled: reference fence, back-warped target fence, out-of-bounds warps"""
    if not (o_ref.shape == o_t.shape == w.shape == invalid.shape):
        raise ValueError("masks and flow must share one size")
    h, wd = w.shape
    rows, cols = np.mgrid[0:h, 0:wd]
    xs = np.floor(cols + w.u + 0.5).astype(np.intp)
    ys = np.floor(rows + w.v + 0.5).astype(np.intp)
    inside = (xs >= 0) & (xs < wd) & (ys >= 0) & (ys < h)
    warped = np.zeros((h, wd), dtype=bool)
    warped[inside] = o_t[ys[inside], xs[inside]]
    return o_ref | dilate(warped, dilation) | invalid


class Increment(NamedTuple):
    du: np.ndarray
    dv: np.ndarray
    converged: bool
    iterations: int


@dataclass
class LinearizedSystem:
    y_ref: np.ndarray
    warped: np.ndarray
    yx: np.ndarray
    yy: np.ndarray
    occlusion: np.ndarray
    wd: np.ndarray
    ws: np.ndarray
    u: np.ndarray
    v: np.ndarray
    mu: float
    eps: float
    rhs: np.ndarray

    @property
    def shape(self):
        return self.y_ref.shape

    @property
    def size(self):
        return 2 * self.y_ref.size

    @property
    def selection(self):
        return (~self.occlusion).astype(np.float64)

    def laplacian(self, a):
        return diff_x_adjoint(self.ws * diff_x(a)) + diff_y_adjoint(self.ws * diff_y(a))

    def apply(self, x):
        n = self.y_ref.size
        du = x[:n].reshape(self.shape)
        dv = x[n:].reshape(self.shape)
        t = self.selection * self.wd * (self.yx * du + self.yy * dv)
        out_u = self.yx * t + self.mu * self.laplacian(du)
        out_v = self.yy * t + self.mu * self.laplacian(dv)
        return np.concatenate([out_u.ravel(), out_v.ravel()])

    def operator(self):
        return LinearOperator((self.size, self.size), matvec=self.apply, dtype=np.float64)

    def to_dense(self):
        """Explicit matrix, for checking small systems only"""
        eye = np.eye(self.size)
        return np.column_stack([self.apply(eye[:, k]) for k in range(self.size)])

    def energy(self, du, dv):
        """Robust energy at w + dw with the data term linearised about w"""
        residual = self.selection * (self.warped - self.y_ref + self.yx * du + self.yy * dv)
        data = np.sum(self.selection * phi(residual ** 2, self.eps))
        uu, vv = self.u + du, self.v + dv
        grad2 = diff_x(uu) ** 2 + diff_y(uu) ** 2 + diff_x(vv) ** 2 + diff_y(vv) ** 2
        return float(data + self.mu * np.sum(phi(grad2, self.eps)))


def build_system(y_ref, y_t, w, O, params, dw=None):
    if y_ref.ndim != 2 or y_ref.shape != y_t.shape:
        raise ValueError("build_system expects two grayscale images of one size")
    if w.shape != y_ref.shape or O.shape != y_ref.shape:
        raise ValueError("flow and occlusion mask must match the images")

    warped, _ = warp_image(y_t, w)
    gx, gy = image_gradients(y_t)
    yx, _ = warp_image(gx, w)
    yy, _ = warp_image(gy, w)

    select = (~O).astype(np.float64)
    du = dw.u if dw is not None else np.zeros_like(y_ref)
    dv = dw.v if dw is not None else np.zeros_like(y_ref)
    temporal = warped - y_ref

    residual = select * (temporal + yx * du + yy * dv)
    wd = phi_prime(residual ** 2, params.epsilon_phi)
    uu, vv = w.u + du, w.v + dv
    ws = phi_prime(diff_x(uu) ** 2 + diff_y(uu) ** 2 + diff_x(vv) ** 2 + diff_y(vv) ** 2, params.epsilon_phi)

    system = LinearizedSystem(y_ref=y_ref, warped=warped, yx=yx, yy=yy, occlusion=O, wd=wd, ws=ws,
                              u=w.u, v=w.v, mu=params.mu, eps=params.epsilon_phi, rhs=np.empty(0))
    data = select * wd * temporal
    rhs_u = -params.mu * system.laplacian(w.u) - yx * data
    rhs_v = -params.mu * system.laplacian(w.v) - yy * data
    system.rhs = np.concatenate([rhs_u.ravel(), rhs_v.ravel()])
    return system


def solve_increment(system, params):
    zeros = np.zeros(system.shape)
    if not np.any(system.rhs):
        return Increment(zeros, zeros.copy(), True, 0)

    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    x, info = cg(system.operator(), system.rhs, x0=np.zeros(system.size), rtol=params.cg_tol, atol=0.0,
                 maxiter=params.cg_iters, callback=count)
    if info > 0:
        logger.debug("CG stopped at %d iterations above tolerance %g", iterations, params.cg_tol)
    n = system.size // 2
    return Increment(x[:n].reshape(system.shape), x[n:].reshape(system.shape), info == 0, iterations)


def _upscale(flow, shape):
    h, w = flow.shape
    sy, sx = shape[0] / h, shape[1] / w
    return FlowField(resize(flow.u, shape) * sx, resize(flow.v, shape) * sy)


def estimate_flow(y_ref, y_t, o_ref=None, o_t=None, params=None):
    """Flow w with y_t(p + w(p)) matching y_ref(p) outside the occlusion masks"""
    params = params or FlowParams()
    y_ref = to_gray(np.asarray(y_ref, dtype=np.float64))
    y_t = to_gray(np.asarray(y_t, dtype=np.float64))
    if y_ref.shape != y_t.shape:
        raise ValueError(f"image sizes differ: {y_ref.shape} vs {y_t.shape}")
    o_ref = np.zeros(y_ref.shape, dtype=bool) if o_ref is None else np.asarray(o_ref, dtype=bool)
    o_t = np.zeros(y_ref.shape, dtype=bool) if o_t is None else np.asarray(o_t, dtype=bool)
    if o_ref.shape != y_ref.shape or o_t.shape != y_ref.shape:
        raise ValueError("occlusion masks must match the image size")

    if np.ptp(y_ref) < 1e-8 or np.ptp(y_t) < 1e-8:
        logger.warning("Constant input image; returning zero flow")
        flow = FlowField.zeros(y_ref.shape)
        flow.low_confidence = True
        return flow

    pyr_ref = gaussian_pyramid(y_ref, params.pyramid_ratio, params.min_dim)
    pyr_t = gaussian_pyramid(y_t, params.pyramid_ratio, params.min_dim)

    flow = FlowField.zeros(pyr_ref[-1].shape)
    for level in range(len(pyr_ref) - 1, -1, -1):
        ref_l, tgt_l = pyr_ref[level], pyr_t[level]
        if flow.shape != ref_l.shape:
            flow = _upscale(flow, ref_l.shape)
        occ_ref = downsample_mask(o_ref, ref_l.shape)
        occ_t = downsample_mask(o_t, ref_l.shape)

        for _ in range(params.warp_updates):
            _, invalid = warp_image(tgt_l, flow)
            O = combined_mask(occ_ref, occ_t, flow, invalid, params.mask_dilation)
            dw = FlowField.zeros(ref_l.shape)
            for _ in range(params.outer_iters):
                system = build_system(ref_l, tgt_l, flow, O, params, dw)
                step = solve_increment(system, params)
                dw = FlowField(step.du, step.dv)
            flow = flow + dw
        logger.debug("Level %d (%dx%d): mean flow (%.3f, %.3f), %.1f%% occluded", level, ref_l.shape[1],
                     ref_l.shape[0], flow.u.mean(), flow.v.mean(), 100.0 * O.mean())
    return flow


def flo_bytes(flow):
    header = np.array([FLO_MAGIC], dtype='<f4').tobytes() + np.array([flow.width, flow.height], dtype='<i4').tobytes()
    return header + np.dstack([flow.u, flow.v]).astype('<f4').tobytes()


def write_flo(path, flow):
    with open(path, 'wb') as f:
        f.write(flo_bytes(flow))


def read_flo(path):
    with open(path, 'rb') as f:
        magic = np.fromfile(f, '<f4', count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise FileFormatError(f"{path}: bad magic number, not a .flo file")
        dims = np.fromfile(f, '<i4', count=2)
        if dims.size != 2 or np.any(dims <= 0):
            raise FileFormatError(f"{path}: bad flow dimensions")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, '<f4', count=2 * w * h)
    if data.size != 2 * w * h:
        raise FileFormatError(f"{path}: expected {2 * w * h} values, found {data.size}")
    data = data.reshape(h, w, 2).astype(np.float64)
    return FlowField(data[..., 0], data[..., 1])


def flow_to_color(flow, max_magnitude=None):
    """Hue encodes direction, saturation encodes magnitude"""
    magnitude = np.hypot(flow.u, flow.v)
    scale = max_magnitude or (magnitude.max() if magnitude.size else 0.0)
    hue = np.mod(np.arctan2(flow.v, flow.u), 2 * np.pi) / (2 * np.pi)
    saturation = np.clip(magnitude / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(magnitude)
    hsv = np.dstack([hue, saturation, np.ones_like(hue)])
    return hsv2rgb(hsv)
