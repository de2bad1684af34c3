"""Multi-frame fusion: recover the background behind the fence with FISTA.

Every frame is modelled as a masked, warped copy of the latent image x::

    y_m = O_m F_m x + n_m

and x minimises  sum_m ||O_m F_m x - y_m||^2 + lambda * ||x||_1  by
accelerated proximal gradient steps. Colour images are solved channel by
channel with the same masks and warps.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import ndimage

from errors import NoDataError
from imgcore import BilinearSampler
from models import FistaParams, FlowField, FlowParams
from occflow import estimate_flow

logger = logging.getLogger(__name__)


class DegradationOperator:
    """y = O F x: bilinear backward warp by ``warp``, then zero the fence and out-of-bounds pixels"""

    def __init__(self, warp, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != warp.shape:
            raise ValueError(f"mask {mask.shape} does not match warp {warp.shape}")
        self.warp = warp
        self.mask = mask
        self._sampler = BilinearSampler(warp)
        self.valid = self._sampler.valid
        self.keep = (~mask & self.valid).astype(np.float64)

    @classmethod
    def identity(cls, mask):
        return cls(FlowField.zeros(np.shape(mask)), mask)

    @property
    def shape(self):
        return self.warp.shape

    def apply(self, x):
        if x.shape[:2] != self.shape:
            raise ValueError(f"image {x.shape[:2]} does not match operator {self.shape}")
        keep = self.keep if x.ndim == 2 else self.keep[..., None]
        return self._sampler.sample(x) * keep

    def adjoint(self, r):
        if r.shape[:2] != self.shape:
            raise ValueError(f"residual {r.shape[:2]} does not match operator {self.shape}")
        if r.ndim == 3:
            return np.dstack([self.adjoint(r[..., c]) for c in range(r.shape[2])])
        return self._sampler.scatter(r * self.keep)


def apply_degradation(op, x):
    return op.apply(x)


def adjoint_degradation(op, r):
    return op.adjoint(r)


@dataclass
class FistaProblem:
    observations: List[np.ndarray]
    ops: List[DegradationOperator]
    lam: float = 0.0005
    alpha: Optional[float] = None
    eps_stop: Optional[float] = None
    max_iters: int = 500
    gradient_scale: float = 2.0

    def __post_init__(self):
        if not self.observations:
            raise ValueError("a fusion problem needs at least one observation")
        if len(self.observations) != len(self.ops):
            raise ValueError(f"{len(self.observations)} observations but {len(self.ops)} operators")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")
        shape = self.ops[0].shape
        for y, op in zip(self.observations, self.ops):
            if y.shape != shape or op.shape != shape:
                raise ValueError("observations and operators must share one size")

    @property
    def shape(self):
        return self.ops[0].shape

    @property
    def tolerance(self):
        if self.eps_stop is not None:
            return self.eps_stop
        return 1e-4 * math.sqrt(self.shape[0] * self.shape[1])


@dataclass
class FistaState:
    x_prev: np.ndarray
    x_curr: np.ndarray
    z: np.ndarray
    t: float = 1.0
    k: int = 0

    @classmethod
    def start(cls, x0):
        return cls(x_prev=x0.copy(), x_curr=x0.copy(), z=x0.copy())

    @staticmethod
    def next_momentum(t):
        return (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0

    def advance(self, x_new):
        t_next = self.next_momentum(self.t)
        self.z = x_new + ((self.t - 1.0) / t_next) * (x_new - self.x_curr)
        self.x_prev, self.x_curr = self.x_curr, x_new
        self.t = t_next
        self.k += 1


@dataclass
class FistaResult:
    image: np.ndarray
    iterations: int
    converged: bool
    alpha: float
    step_norm: float
    objectives: List[float] = field(default_factory=list)

    def to_dict(self):
        return {
            'iterations': self.iterations,
            'converged': self.converged,
            'alpha': self.alpha,
            'step_norm': self.step_norm,
            'objective': min(self.objectives) if self.objectives else None,
        }


def data_gradient(z, prob):
    grad = np.zeros_like(z, dtype=np.float64)
    for y, op in zip(prob.observations, prob.ops):
        grad += op.adjoint(op.apply(z) - y)
    return prob.gradient_scale * grad


def data_term(x, prob):
    total = sum(float(np.sum((op.apply(x) - y) ** 2)) for y, op in zip(prob.observations, prob.ops))
    return 0.5 * prob.gradient_scale * total


def objective(x, prob):
    return data_term(x, prob) + prob.lam * float(np.abs(x).sum())


def prox_l1(x, threshold):
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def _normal_operator(v, prob):
    out = np.zeros_like(v)
    for op in prob.ops:
        out += op.adjoint(op.apply(v))
    return prob.gradient_scale * out


def estimate_step(prob, iters=30):
    """0.95 over a power-iteration estimate of the data-gradient Lipschitz constant"""
    if iters < 5:
        raise ValueError(f"power iteration needs at least 5 rounds, got {iters}")
    rng = np.random.default_rng(0)
    v = rng.standard_normal(prob.shape)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = _normal_operator(v, prob)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise NoDataError("fusion problem has no data: every observation is fully masked")
        v = w / norm
    lipschitz = float(np.sum(v * _normal_operator(v, prob)))
    if lipschitz <= 0.0:
        raise NoDataError("fusion problem has no data: every observation is fully masked")
    logger.debug("Lipschitz estimate %.6f after %d power iterations", lipschitz, iters)
    return 0.95 / lipschitz


def fista_defence(prob, x0, power_iters=30):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != prob.shape:
        raise ValueError(f"x0 {x0.shape} does not match problem {prob.shape}")
    alpha = prob.alpha if prob.alpha is not None else estimate_step(prob, power_iters)
    threshold = prob.lam * alpha
    tolerance = prob.tolerance

    state = FistaState.start(x0)
    objectives = [objective(x0, prob)]
    best, best_objective = state.x_curr, objectives[0]
    step_norm = math.inf
    converged = False
    while state.k < prob.max_iters:
        x_new = prox_l1(state.z - alpha * data_gradient(state.z, prob), threshold)
        step_norm = float(np.linalg.norm(x_new - state.x_curr))
        state.advance(x_new)
        objectives.append(objective(x_new, prob))
        # momentum makes the objective non-monotone; keep the lowest iterate seen
        if objectives[-1] <= best_objective:
            best, best_objective = x_new, objectives[-1]
        if step_norm <= tolerance:
            converged = True
            break

    if converged:
        logger.debug("FISTA converged in %d iterations, objective %.6g", state.k, best_objective)
    else:
        logger.warning("FISTA stopped at max_iters=%d with step %.3g above tolerance %.3g",
                       prob.max_iters, step_norm, tolerance)
    return FistaResult(image=best, iterations=state.k, converged=converged, alpha=alpha,
                       step_norm=step_norm, objectives=objectives)


def nearest_fill(img, mask):
    """Replace masked pixels by the value of the nearest unmasked pixel"""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        return np.array(img, dtype=np.float64)
    iy, ix = ndimage.distance_transform_edt(mask, return_distances=False, return_indices=True)
    return np.asarray(img, dtype=np.float64)[iy, ix]


@dataclass
class DefenceResult:
    image: np.ndarray
    flows: List[FlowField]
    channels: List[FistaResult] = field(default_factory=list)
    empty: bool = False

    @property
    def converged(self):
        return all(result.converged for result in self.channels)

    @property
    def iterations(self):
        return max((result.iterations for result in self.channels), default=0)

    def to_dict(self):
        return {
            'empty': self.empty,
            'converged': self.converged,
            'iterations': self.iterations,
            'channels': [result.to_dict() for result in self.channels],
            'flows': [flow.to_dict() for flow in self.flows],
        }


def estimate_frame_flows(frames, masks, ref_index, flow_params=None, workers=1):
    """Warp of the reference onto each frame; the reference itself gets the identity"""
    flow_params = flow_params or FlowParams()
    shape = frames[ref_index].shape[:2]

    def one(m):
        if m == ref_index:
            return FlowField.zeros(shape)
        flow = estimate_flow(frames[m], frames[ref_index], masks[m], masks[ref_index], flow_params)
        logger.info("Frame %d flow: mean (%.2f, %.2f)", m, flow.u.mean(), flow.v.mean())
        return flow

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, range(len(frames))))


def defence_pipeline(frames, masks, ref_index=1, flow_params=None, fista_params=None, flows=None, workers=1):
    fista_params = fista_params or FistaParams()
    if len(frames) != len(masks) or not frames:
        raise ValueError(f"need one mask per frame, got {len(frames)} frames and {len(masks)} masks")
    if not 0 <= ref_index < len(frames):
        raise ValueError(f"ref_index {ref_index} outside 0..{len(frames) - 1}")
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    masks = [np.asarray(m, dtype=bool) for m in masks]
    shape = frames[ref_index].shape
    for f, m in zip(frames, masks):
        if f.shape != shape or m.shape != shape[:2]:
            raise ValueError("frames and masks must share one size")

    reference = frames[ref_index]
    if not any(m.any() for m in masks):
        logger.warning("All fence masks are empty; returning the reference frame")
        return DefenceResult(image=reference.copy(), flows=[FlowField.zeros(shape) for _ in frames], empty=True)

    if flows is None:
        flows = estimate_frame_flows(frames, masks, ref_index, flow_params, workers)
    else:
        if len(flows) != len(frames):
            raise ValueError(f"need one flow per frame, got {len(flows)}")
        flows = [FlowField.zeros(shape) if flow is None else flow for flow in flows]

    ops = [DegradationOperator(flow, mask) for flow, mask in zip(flows, masks)]
    x0 = nearest_fill(reference, masks[ref_index])

    channels = [None] if reference.ndim == 2 else list(range(reference.shape[2]))

    def problem(c, alpha=None):
        obs = [f if c is None else f[..., c] for f in frames]
        obs = [y * op.keep for y, op in zip(obs, ops)]
        return FistaProblem(observations=obs, ops=ops, lam=fista_params.lam, alpha=alpha,
                            eps_stop=fista_params.eps_stop, max_iters=fista_params.max_iters,
                            gradient_scale=fista_params.gradient_scale)

    # masks and warps are shared, so one step size serves every channel
    alpha = fista_params.step or estimate_step(problem(channels[0]), fista_params.power_iters)

    def solve(c):
        start = x0 if c is None else x0[..., c]
        return fista_defence(problem(c, alpha), start)

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(channels)))) as pool:
        results = list(pool.map(solve, channels))

    image = results[0].image if reference.ndim == 2 else np.dstack([r.image for r in results])
    logger.info("Fusion finished: %d iterations, converged=%s", max(r.iterations for r in results),
                all(r.converged for r in results))
    return DefenceResult(image=np.clip(image, 0.0, 1.0), flows=flows, channels=results)
