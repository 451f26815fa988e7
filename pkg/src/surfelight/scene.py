"""Scene data model: surfels, cameras and the per-image light MLP."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from . import sh
from .errors import ContractViolation

EMBEDDING_DIM = 24
HIDDEN_WIDTH = 64
LIGHT_OUTPUT = 3 * sh.NUM_COEFFS


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices ``(K, 3, 3)`` from (w, x, y, z) quaternions; normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, grad_R) -> np.ndarray:
    """Pull a gradient on the rotation matrices back to the raw quaternions."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = grad_R
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    gy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    gz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0] - 2 * z * g[..., 1, 1]
        + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gqn - qn * np.sum(qn * gqn, axis=-1, keepdims=True)) / norm


def rotmat_to_quat(R) -> np.ndarray:
    """(w, x, y, z) quaternions for rotation matrices ``(K, 3, 3)``."""
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


# ---------------------------------------------------------------------------
# Surfels
# ---------------------------------------------------------------------------


@dataclass
class Surfels:
    """Structure-of-arrays storage for K surfels.

    ``rotation`` holds (w, x, y, z) quaternions, ``log_scale`` the two in-plane
    log scales, and ``transfer`` the single-channel transfer SH ``d_k``.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    albedo_param: np.ndarray
    transfer: np.ndarray

    FIELD_WIDTHS = {
        "position": 3,
        "rotation": 4,
        "log_scale": 2,
        "opacity_logit": 1,
        "albedo_param": 3,
        "transfer": sh.NUM_COEFFS,
    }

    def __post_init__(self):
        for f in fields(self):
            arr = np.ascontiguousarray(getattr(self, f.name), dtype=np.float64)
            width = self.FIELD_WIDTHS[f.name]
            arr = arr.reshape(-1) if width == 1 else arr.reshape(-1, width)
            setattr(self, f.name, arr)
        k = len(self.position)
        for f in fields(self):
            if len(getattr(self, f.name)) != k:
                raise ContractViolation(f"surfel field {f.name} has inconsistent length")

    def __len__(self) -> int:
        return len(self.position)

    @classmethod
    def empty(cls) -> "Surfels":
        return cls(*(np.zeros((0, w)) for w in cls.FIELD_WIDTHS.values()))

    def copy(self) -> "Surfels":
        return Surfels(**{name: arr.copy() for name, arr in self.arrays().items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def subset(self, idx) -> "Surfels":
        return Surfels(**{name: arr[idx] for name, arr in self.arrays().items()})

    def concat(self, other: "Surfels") -> "Surfels":
        return Surfels(**{name: np.concatenate([arr, getattr(other, name)]) for name, arr in self.arrays().items()})

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def albedo(self) -> np.ndarray:
        return sigmoid(self.albedo_param)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def normals(self) -> np.ndarray:
        return surfel_normal(self)

    def normalize_rotations(self) -> None:
        self.rotation /= np.linalg.norm(self.rotation, axis=-1, keepdims=True)


def surfel_normal(s: Surfels) -> np.ndarray:
    """World normals: the collapsed third axis of each surfel's rotation."""
    n = s.rotation_matrices()[..., :, 2]
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def surfel_geometry(s: Surfels) -> tuple[np.ndarray, np.ndarray]:
    """Local-to-world transforms ``(K, 4, 4)`` and covariances ``(K, 3, 3)``.

    The transform maps local (u, v, w, 1) to R diag(s_u, s_v, 0) (u, v, w) + t,
    so the third local axis is collapsed.
    """
    R = s.rotation_matrices()
    scale3 = np.concatenate([s.scale, np.zeros((len(s), 1))], axis=-1)
    RS = R * scale3[:, None, :]
    transform = np.zeros((len(s), 4, 4))
    transform[:, :3, :3] = RS
    transform[:, :3, 3] = s.position
    transform[:, 3, 3] = 1.0
    cov = RS @ np.swapaxes(RS, -1, -2)
    return transform, cov


def oriented_normal(s: Surfels, cam: "Camera") -> tuple[np.ndarray, np.ndarray]:
    """Normals facing the camera plus the per-surfel ``flipped`` mask.

    Downstream, a flipped surfel uses the point-reflected transfer
    ``sh.reflect(d_k)``.
    """
    n = surfel_normal(s)
    view = s.position - cam.center
    flipped = np.sum(n * view, axis=-1) > 0.0
    return np.where(flipped[:, None], -n, n), flipped


def oriented_transfer(s: Surfels, flipped: np.ndarray) -> np.ndarray:
    return np.where(flipped[:, None], s.transfer * sh.REFLECTION_SIGNS, s.transfer)


def init_surfels(
    points: np.ndarray | None = None,
    count: int = 1000,
    bbox: tuple[np.ndarray, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    opacity: float = 0.1,
    estimate_normals: bool = True,
) -> Surfels:
    """Create surfels from a point cloud, or uniformly inside ``bbox``.

    Scales start at the mean nearest-neighbour distance. With a point cloud,
    the initial normal is the smallest principal axis of the 8 nearest
    neighbours; otherwise rotations are random.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if points is None:
        if bbox is None:
            raise ContractViolation("init_surfels needs either points or a bounding box")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
        points = lo + rng.random((count, 3)) * (hi - lo)
        estimate_normals = False
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = len(points)
    if k < 2:
        raise ContractViolation("need at least two points to initialize surfels")
    tree = cKDTree(points)
    nn = min(9, k)
    dist, idx = tree.query(points, k=nn)
    mean_nn = float(np.mean(dist[:, 1]))
    if estimate_normals and k >= 4:
        nbrs = points[idx] - points[idx].mean(axis=1, keepdims=True)
        cov = np.einsum("kni,knj->kij", nbrs, nbrs)
        _, vecs = np.linalg.eigh(cov)
        frames = vecs[:, :, ::-1].copy()  # largest, middle, smallest
        frames[np.linalg.det(frames) < 0, :, 1] *= -1.0
        quats = rotmat_to_quat(frames)
    else:
        quats = rng.normal(size=(k, 4))
        quats /= np.linalg.norm(quats, axis=-1, keepdims=True)
    surfels = Surfels(
        position=points.copy(),
        rotation=quats,
        log_scale=np.full((k, 2), np.log(max(mean_nn, 1e-6))),
        opacity_logit=np.full(k, logit(opacity)),
        albedo_param=np.zeros((k, 3)),
        transfer=np.zeros((k, sh.NUM_COEFFS)),
    )
    surfels.transfer = sh.clamped_cosine_coeffs(surfel_normal(surfels))
    return surfels


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera; camera space looks down +z with x right and y down.

    Pixel (row i, column j) has its center at image coordinates (x=j, y=i).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    image_path: str | None = None
    mask_path: str | None = None

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation(f"camera focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation("camera image size must be positive")
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ContractViolation("world_to_camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_cam_points(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def pixel_rays(self, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """World-space ray directions (unnormalized, camera-z = 1) through pixel centers."""
        dirs_cam = np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(cols, dtype=np.float64)], axis=-1
        )
        return dirs_cam @ self.rotation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg: float = 50.0, width: int = 64, height: int = 64):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, w2c)

    def to_json(self) -> dict:
        out = {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
        }
        if self.image_path is not None:
            out["image_path"] = self.image_path
        if self.mask_path is not None:
            out["mask_path"] = self.mask_path
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
            image_path=d.get("image_path"), mask_path=d.get("mask_path"),
        )


# ---------------------------------------------------------------------------
# Light model
# ---------------------------------------------------------------------------


@dataclass
class LightModel:
    """Per-image latent codes and the MLP that decodes them into RGB SH light.

    Layers: 24 -> 64 (ReLU) -> 64 (ReLU) -> 27 (linear), reshaped to (3, 9).
    """

    embeddings: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    PARAM_NAMES = ("embeddings", "w0", "b0", "w1", "b1", "w2", "b2")

    @classmethod
    def create(cls, num_images: int, rng: np.random.Generator, dc_init: float = 0.0) -> "LightModel":
        dims = [EMBEDDING_DIM, HIDDEN_WIDTH, HIDDEN_WIDTH, LIGHT_OUTPUT]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        weights[-1] *= 0.1
        biases[-1] = np.zeros(LIGHT_OUTPUT)
        biases[-1].reshape(3, sh.NUM_COEFFS)[:, 0] = dc_init
        emb = rng.normal(scale=1.0, size=(num_images, EMBEDDING_DIM))
        return cls(emb, weights, biases)

    @property
    def num_images(self) -> int:
        return len(self.embeddings)

    def params(self) -> dict[str, np.ndarray]:
        out = {"embeddings": self.embeddings}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.embeddings = params["embeddings"]
        self.weights = [params[f"w{i}"] for i in range(3)]
        self.biases = [params[f"b{i}"] for i in range(3)]

    def copy(self) -> "LightModel":
        return LightModel(self.embeddings.copy(), [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_forward(model: LightModel, image_index: int, return_cache: bool = False):
    """EnvLight ``(3, 9)`` for one training image."""
    idx = int(image_index)
    if not 0 <= idx < model.num_images:
        raise IndexError(f"image index {idx} outside embedding table of size {model.num_images}")
    h = model.embeddings[idx]
    acts = [h]
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if layer < len(model.weights) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    light = h.reshape(3, sh.NUM_COEFFS)
    if return_cache:
        return light, (idx, acts)
    return light


def mlp_backward(model: LightModel, cache, grad_light) -> dict[str, np.ndarray]:
    """Gradients of all light-model parameters given dL/d(light)."""
    idx, acts = cache
    grads = {name: np.zeros_like(arr) for name, arr in model.params().items()}
    g = np.asarray(grad_light, dtype=np.float64).reshape(-1)
    for layer in reversed(range(len(model.weights))):
        if layer < len(model.weights) - 1:
            g = g * (acts[layer + 1] > 0.0)
        grads[f"w{layer}"] += np.outer(acts[layer], g)
        grads[f"b{layer}"] += g
        g = model.weights[layer] @ g
    grads["embeddings"][idx] += g
    return grads


@dataclass
class Scene:
    """Everything that is optimized: surfels plus the light model."""

    surfels: Surfels
    lights: LightModel
    extent: float = 1.0
    bbox_min: np.ndarray = field(default_factory=lambda: np.full(3, -1.0))
    bbox_max: np.ndarray = field(default_factory=lambda: np.full(3, 1.0))

    def copy(self) -> "Scene":
        return Scene(self.surfels.copy(), self.lights.copy(), self.extent, self.bbox_min.copy(), self.bbox_max.copy())

    def light_for(self, image_index: int) -> np.ndarray:
        return mlp_forward(self.lights, image_index)
