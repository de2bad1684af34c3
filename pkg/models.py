"""Value types shared by the segmentation, flow, fusion and benchmark modules.

Images are numpy arrays of float64 intensities, shape (H, W) or (H, W, 3).
Binary masks are bool arrays of shape (H, W), True marking fence/occluded
pixels. Everything else lives in the dataclasses below.
"""
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

Image = NDArray[np.float64]
BinaryMask = NDArray[np.bool_]

# Trimap labels
UNKNOWN = 0
FOREGROUND = 1
BACKGROUND = 2


@dataclass
class FlowField:
    u: NDArray[np.float64]
    v: NDArray[np.float64]
    low_confidence: bool = False

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError(f"flow components must be equal 2-D arrays, got {self.u.shape} and {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow components must be finite")

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape[:2]), np.zeros(shape[:2]))

    @classmethod
    def uniform(cls, shape, du, dv):
        return cls(np.full(shape[:2], float(du)), np.full(shape[:2], float(dv)))

    @property
    def shape(self):
        return self.u.shape

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    def __add__(self, other):
        return FlowField(self.u + other.u, self.v + other.v, self.low_confidence or other.low_confidence)

    def to_dict(self):
        magnitude = np.hypot(self.u, self.v)
        return {
            'width': self.width,
            'height': self.height,
            'mean_u': float(self.u.mean()),
            'mean_v': float(self.v.mean()),
            'max_magnitude': float(magnitude.max()) if magnitude.size else 0.0,
            'low_confidence': self.low_confidence,
        }


@dataclass
class Pyramid:
    levels: List[Image]
    ratio: float

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, index):
        return self.levels[index]

    def to_dict(self):
        return {
            'ratio': self.ratio,
            'levels': [list(level.shape[:2]) for level in self.levels],
        }


@dataclass(frozen=True)
class TexelDetection:
    x: float
    y: float
    score: float

    def to_dict(self):
        return {'x': self.x, 'y': self.y, 'score': self.score}


@dataclass
class Lattice:
    nodes: List[TexelDetection]
    edges: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < len(self.nodes) and 0 <= j < len(self.nodes)):
                raise ValueError(f"edge ({i}, {j}) references a missing node")
            if i == j:
                raise ValueError(f"self edge on node {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)

    def to_dict(self):
        return {
            'nodes': [node.to_dict() for node in self.nodes],
            'edges': [list(edge) for edge in self.edges],
        }


@dataclass
class Trimap:
    labels: NDArray[np.int8]
    erode_radius: int = 0

    @property
    def foreground(self):
        return self.labels == FOREGROUND

    @property
    def background(self):
        return self.labels == BACKGROUND

    @property
    def unknown(self):
        return self.labels == UNKNOWN

    def to_dict(self):
        return {
            'foreground': int(self.foreground.sum()),
            'background': int(self.background.sum()),
            'unknown': int(self.unknown.sum()),
            'erode_radius': self.erode_radius,
        }


@dataclass
class LinearClassifier:
    weights: NDArray[np.float64]
    bias: float
    threshold: float = 0.0
    backend: str = 'gradhist'

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()

    @property
    def dim(self):
        return self.weights.size

    def score(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.dim:
            raise ValueError(f"feature length {features.shape[-1]} does not match classifier dimension {self.dim}")
        return features @ self.weights + self.bias

    def to_dict(self):
        return {
            'dim': self.dim,
            'weights': self.weights.tolist(),
            'bias': float(self.bias),
            'threshold': float(self.threshold),
            'backend': self.backend,
        }


@dataclass
class SegmentationParams:
    stride: int = 5
    window: int = 32
    nms_radius: Optional[float] = None
    tau: float = 0.5
    erode_radius: int = 1
    dilate_radius: int = 3
    lambda_s: float = 100.0
    sigma_c: float = 0.1
    lattice_thickness: int = 2
    link_factor: float = 1.8
    extend_lattice: bool = True
    refine: bool = True
    feature_backend: str = 'gradhist'
    feature_file: Optional[str] = None
    alpha_tol: float = 1e-6
    alpha_max_iters: int = 2000
    alpha_prior: float = 1e-4
    color_tol: Optional[float] = 0.25
    min_lattice_nodes: int = 4

    @property
    def suppression_radius(self):
        return self.nms_radius if self.nms_radius is not None else self.window / 2


@dataclass
class TrainingParams:
    c: float = 1.0
    epochs: int = 50
    learning_rate: float = 0.01
    balanced: bool = True
    jitter: int = 1
    negatives_per_scene: int = 300
    min_negative_distance: float = 8.0
    distractor_texture: Optional[str] = 'checker'
    distractors_per_scene: int = 100


@dataclass
class FlowParams:
    mu: float = 0.01
    epsilon_phi: float = 0.001
    pyramid_ratio: float = 0.5
    min_dim: int = 16
    outer_iters: int = 3
    cg_iters: int = 100
    cg_tol: float = 1e-4
    warp_updates: int = 3
    mask_dilation: int = 1


@dataclass
class FistaParams:
    lam: float = field(default=0.0005, metadata={'key': 'lambda'})
    eps_stop: Optional[float] = None
    max_iters: int = 500
    step: Optional[float] = None
    power_iters: int = 30
    gradient_scale: float = 2.0


def params_to_dict(params):
    return {f.metadata.get('key', f.name): getattr(params, f.name) for f in fields(params)}


@dataclass
class SceneSpec:
    width: int = 320
    height: int = 240
    texture: str = 'noise'
    seed: int = 0
    background_path: Optional[str] = None
    spacing: float = 40.0
    angle: float = 0.0
    thickness: float = 2.0
    fence_color: Tuple[float, float, float] = (0.95, 0.95, 0.95)
    origin: Optional[Tuple[float, float]] = None
    motions: List[Sequence[float]] = field(default_factory=lambda: [(-3.0, 2.0), (0.0, 0.0), (3.0, -2.0)])
    fence_motions: Optional[List[Sequence[float]]] = None
    noise_sigma: float = 0.01
    soft_edges: bool = False

    def __post_init__(self):
        if self.spacing <= 2 * self.thickness:
            raise ValueError(f"spacing {self.spacing} must exceed twice the wire thickness {self.thickness}")
        if len(self.motions) < 1:
            raise ValueError("a scene needs at least one frame")
        for motion in self.motions:
            if len(motion) not in (2, 6):
                raise ValueError(f"motion {motion!r} must be a translation (dx, dy) or affine (a, b, c, d, tx, ty)")
        if self.fence_motions is not None and len(self.fence_motions) != len(self.motions):
            raise ValueError("fence_motions must list one translation per frame")
        if self.texture not in ('noise', 'checker') and self.background_path is None:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.origin is None:
            self.origin = (self.spacing / 2, self.spacing / 2)

    @property
    def frames(self):
        return len(self.motions)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown scene keys: {', '.join(unknown)}")
        data = dict(data)
        for key in ('fence_color', 'origin'):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self):
        return {
            'width': self.width,
            'height': self.height,
            'texture': self.texture,
            'seed': self.seed,
            'background_path': self.background_path,
            'spacing': self.spacing,
            'angle': self.angle,
            'thickness': self.thickness,
            'fence_color': list(self.fence_color),
            'origin': list(self.origin),
            'motions': [list(m) for m in self.motions],
            'fence_motions': [list(m) for m in self.fence_motions] if self.fence_motions else None,
            'noise_sigma': self.noise_sigma,
            'soft_edges': self.soft_edges,
        }


@dataclass
class GroundTruth:
    background: Image
    masks: List[BinaryMask]
    flows: List[FlowField]
    joints: List[NDArray[np.float64]]
    seed: int = 0

    def __post_init__(self):
        shape = self.background.shape[:2]
        for mask, flow in zip(self.masks, self.flows):
            if mask.shape != shape or flow.shape != shape:
                raise ValueError("ground-truth masks and flows must match the background size")

    def to_dict(self):
        return {
            'height': self.background.shape[0],
            'width': self.background.shape[1],
            'frames': len(self.masks),
            'seed': self.seed,
            'fence_pixels': [int(mask.sum()) for mask in self.masks],
            'joints': [len(j) for j in self.joints],
            'flows': [flow.to_dict() for flow in self.flows],
        }
