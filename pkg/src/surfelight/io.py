"""File formats: PFM, PNG, cameras, scenes, checkpoints and datasets.

Every JSON document carries ``format_version``. Binary blobs are raw
little-endian float64 arrays laid out back to back; the JSON header lists
each array's name, shape and byte offset. Layouts are described in
``docs/formats.md``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputDataError
from .optim import Adam
from .scene import Camera, LightModel, Scene, Surfels

FORMAT_VERSION = 1


def _check_version(doc: dict, what: str) -> None:
    v = doc.get("format_version")
    if v != FORMAT_VERSION:
        raise InputDataError(f"{what}: unsupported format_version {v!r} (expected {FORMAT_VERSION})")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputDataError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputDataError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def write_pfm(path, image) -> None:
    """Little-endian PFM. Row 0 of ``image`` is the top row."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        header = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    # PFM stores scanlines bottom to top.
    data = np.ascontiguousarray(img[::-1], dtype="<f4")
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Float image with row 0 at the top; ``(H, W, 3)`` or ``(H, W)``."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise InputDataError(f"missing file: {path}") from None
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if m is None:
        raise InputDataError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise InputDataError(f"{path}: truncated PFM data")
    data = np.frombuffer(body, dtype=dtype, count=count).astype(np.float64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


def to_uint8(image) -> np.ndarray:
    """Tone-mapping contract: clamp to [0, 1], scale by 255, round. No gamma."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def read_png(path) -> np.ndarray:
    """Linear float in [0, 1]; the inverse of :func:`write_png` up to rounding."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError:
        raise InputDataError(f"missing file: {path}") from None
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr.astype(np.float64) / (65535.0 if arr.dtype == np.uint16 else 255.0)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path)
    elif path.suffix.lower() == ".png":
        img = read_png(path)
    else:
        raise InputDataError(f"{path}: unsupported image extension")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img


def write_image(path, image) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, image)
    elif path.suffix.lower() == ".png":
        write_png(path, image)
    else:
        raise ValueError(f"{path}: unsupported image extension")


def read_mask(path, invert: bool = False) -> np.ndarray:
    """Boolean mask: nonzero pixels are marked (``invert`` flips that)."""
    img = read_pfm(path) if Path(path).suffix.lower() == ".pfm" else read_png(path)
    if img.ndim == 3:
        img = img.max(axis=2)
    marked = img != 0
    return ~marked if invert else marked


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Array blobs
# ---------------------------------------------------------------------------


def write_arrays(json_path, blob_path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Header JSON plus a raw little-endian float64 blob of ``arrays``."""
    json_path, blob_path = Path(json_path), Path(blob_path)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    doc = dict(meta)
    doc["format_version"] = FORMAT_VERSION
    doc["blob"] = blob_path.name
    doc["arrays"] = entries
    doc["blob_bytes"] = offset
    blob_path.write_bytes(b"".join(chunks))
    _write_json(json_path, doc)


def read_arrays(json_path) -> tuple[dict[str, np.ndarray], dict]:
    json_path = Path(json_path)
    doc = _read_json(json_path)
    _check_version(doc, str(json_path))
    blob_path = json_path.parent / doc["blob"]
    try:
        raw = blob_path.read_bytes()
    except FileNotFoundError:
        raise InputDataError(f"missing blob: {blob_path}") from None
    if len(raw) != doc["blob_bytes"]:
        raise InputDataError(f"{blob_path}: expected {doc['blob_bytes']} bytes, found {len(raw)}")
    arrays = {}
    for e in doc["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64).reshape(e["shape"])
    return arrays, doc


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


def scene_arrays(scene: Scene) -> dict[str, np.ndarray]:
    out = {f"surfels/{k}": v for k, v in scene.surfels.arrays().items()}
    out.update({f"light/{k}": v for k, v in scene.lights.params().items()})
    out["bbox_min"] = scene.bbox_min
    out["bbox_max"] = scene.bbox_max
    return out


def scene_from_arrays(arrays: dict[str, np.ndarray], doc: dict) -> Scene:
    try:
        surfels = Surfels(**{k: arrays[f"surfels/{k}"] for k in Surfels.FIELD_WIDTHS})
        lights = LightModel(np.zeros((0, 0)), [], [])
        lights.set_params({k: arrays[f"light/{k}"] for k in LightModel.PARAM_NAMES})
    except KeyError as exc:
        raise InputDataError(f"scene file lacks array {exc}") from None
    return Scene(surfels, lights, float(doc["extent"]), arrays["bbox_min"].copy(), arrays["bbox_max"].copy())


def save_scene(scene: Scene, directory) -> Path:
    """Write ``scene.json`` + ``scene.bin`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "scene", "num_surfels": len(scene.surfels), "num_images": scene.lights.num_images, "extent": scene.extent}
    write_arrays(d / "scene.json", d / "scene.bin", scene_arrays(scene), meta)
    return d


def load_scene(path) -> Scene:
    """Accepts a scene directory, a ``scene.json``, or a checkpoint directory."""
    p = Path(path)
    if p.is_dir():
        p = p / "scene.json"
    arrays, doc = read_arrays(p)
    return scene_from_arrays(arrays, doc)


def save_camera(cam: Camera, path) -> None:
    doc = cam.to_json()
    doc["format_version"] = FORMAT_VERSION
    _write_json(Path(path), doc)


def load_camera(path) -> Camera:
    doc = _read_json(Path(path))
    _check_version(doc, str(path))
    doc = {k: v for k, v in doc.items() if k != "format_version"}
    try:
        return Camera.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputDataError(f"{path}: bad camera ({exc})") from None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state, directory) -> Path:
    """Scene, optimizer moments, accumulators, iteration and config."""
    d = Path(directory)
    save_scene(state.scene, d)
    opt_arrays = dict(state.optimizer.state_arrays())
    opt_arrays["accum/grad"] = state.grad_accum
    opt_arrays["accum/count"] = state.grad_count
    meta = {
        "kind": "optimizer",
        "iteration": state.iteration,
        "config": state.config.to_json(),
        "adam": {"beta1": state.optimizer.beta1, "beta2": state.optimizer.beta2, "eps": state.optimizer.eps},
    }
    write_arrays(d / "optimizer.json", d / "optimizer.bin", opt_arrays, meta)
    return d


def load_checkpoint(directory):
    from .trainer import TrainConfig, TrainState

    d = Path(directory)
    scene = load_scene(d)
    arrays, doc = read_arrays(d / "optimizer.json")
    accum = arrays.pop("accum/grad")
    count = arrays.pop("accum/count")
    opt = Adam(**doc["adam"])
    opt.load_state_arrays(arrays)
    config = TrainConfig.from_json(doc["config"])
    return TrainState(scene, config, opt, int(doc["iteration"]), accum.copy(), count.copy())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetEntry:
    name: str
    split: str
    camera: Camera
    image: np.ndarray
    occluder_mask: np.ndarray | None = None  # True = excluded from training loss
    seg_mask: np.ndarray | None = None  # True = included in metrics
    image_index: int | None = None  # embedding row for training images
    light_index: int | None = None  # optional ground-truth light id


@dataclass
class Dataset:
    root: Path
    entries: list[DatasetEntry]
    points: np.ndarray | None = None
    lights: dict[int, np.ndarray] = field(default_factory=dict)  # ground-truth lights, if shipped

    @property
    def train(self) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == "train"]

    @property
    def test(self) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == "test"]

    def by_name(self, name: str) -> DatasetEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def load_dataset(root, invert_masks: bool = False) -> Dataset:
    """Load ``manifest.json``; any inconsistency raises naming the entry."""
    root = Path(root)
    doc = _read_json(root / "manifest.json")
    _check_version(doc, "manifest.json")
    invert = bool(doc.get("invert_masks", False)) ^ invert_masks
    raw_entries = doc.get("images")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise InputDataError("manifest.json: 'images' must be a non-empty list")
    entries = []
    names = set()
    train_count = 0
    for i, e in enumerate(raw_entries):
        name = e.get("name", f"#{i}")
        where = f"manifest entry '{name}'"
        if name in names:
            raise InputDataError(f"{where}: duplicate name")
        names.add(name)
        split = e.get("split")
        if split not in ("train", "test"):
            raise InputDataError(f"{where}: split must be 'train' or 'test', got {split!r}")
        if not e.get("camera"):
            raise InputDataError(f"{where}: no camera")
        if not e.get("image"):
            raise InputDataError(f"{where}: no image")
        try:
            cam = load_camera(root / e["camera"])
            img = read_image(root / e["image"])
        except InputDataError as exc:
            raise InputDataError(f"{where}: {exc}") from None
        if img.shape[:2] != (cam.height, cam.width):
            raise InputDataError(f"{where}: image is {img.shape[1]}x{img.shape[0]} but camera is {cam.width}x{cam.height}")
        occ = seg = None
        for key in ("occluder_mask", "seg_mask"):
            if e.get(key):
                try:
                    m = read_mask(root / e[key], invert)
                except InputDataError as exc:
                    raise InputDataError(f"{where}: {exc}") from None
                if m.shape != img.shape[:2]:
                    raise InputDataError(f"{where}: {key} shape {m.shape} does not match image {img.shape[:2]}")
                if key == "occluder_mask":
                    occ = m
                else:
                    seg = m
        if split == "test" and seg is None:
            raise InputDataError(f"{where}: test image has no seg_mask")
        idx = None
        if split == "train":
            idx = train_count
            train_count += 1
        li = e.get("light_index")
        entries.append(DatasetEntry(name, split, cam, img, occ, seg, idx, None if li is None else int(li)))
    if train_count == 0:
        raise InputDataError("manifest.json: no training images")
    points = None
    if doc.get("points"):
        try:
            points = np.load(root / doc["points"])
        except FileNotFoundError:
            raise InputDataError(f"manifest.json: missing point cloud {doc['points']}") from None
        if points.ndim != 2 or points.shape[1] != 3:
            raise InputDataError(f"manifest.json: point cloud must be (N, 3), got {points.shape}")
    lights = {}
    if doc.get("lights"):
        gt = _read_json(root / doc["lights"])
        lights = {int(k): np.asarray(v, dtype=np.float64).reshape(3, 9) for k, v in gt["lights"].items()}
    return Dataset(root, entries, points, lights)
