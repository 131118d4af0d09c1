"""Synthetic paired t0/tn scenes with full ground truth, evaluation and the experiment matrix.

Objects are clusters of Gaussians sampled on primitive surfaces, so the reference
renderer draws them directly. Every object draws its samples from its own seeded
stream, which keeps untouched objects bit-identical between t0 and tn.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import TrainConfig
from .geometry import (
    Camera,
    Match2D3D,
    PointCloud,
    SimilarityTransform,
    apply_similarity_to_camera,
    axis_angle_to_rotmat,
    look_at,
    project_points,
)
from .optimizer import baseline_optimize, camera_extent, finetune_optimize, init_model_from_cloud, progressive_optimize
from .registration import AlignSettings, align
from .splat import GaussianModel, render, render_backward
from .ssim import ssim as ssim_metric
from .training import Trainer

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 1
LAYOUTS = ("uniform", "concentrated")
EDIT_OPS = ("add", "remove", "recolor", "move")
KINDS = ("box-blob", "sphere-blob", "plane-blob", "room-blob")


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------


@dataclass
class ObjectSpec:
    name: str
    kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # box/room edge lengths, sphere radius in size[0], plane extents in size[:2]
    color: tuple[float, float, float]
    density: float = 2000.0  # Gaussians per unit area
    pattern: str = "checker"  # "checker" | "stripes" | "plain"
    cell: float = 0.06


@dataclass
class EditSpec:
    op: str
    target: str
    color: Optional[tuple[float, float, float]] = None
    offset: Optional[tuple[float, float, float]] = None
    object: Optional[ObjectSpec] = None  # for "add"


def _default_objects() -> list[ObjectSpec]:
    return [
        ObjectSpec("floor", "plane-blob", (0.0, 0.0, 0.0), (1.3, 1.3, 0.0), (0.75, 0.7, 0.6), density=450.0, cell=0.13),
        ObjectSpec("crate", "box-blob", (-0.28, -0.2, 0.11), (0.22, 0.22, 0.22), (0.85, 0.25, 0.2), pattern="stripes"),
        ObjectSpec("ball", "sphere-blob", (0.27, 0.17, 0.13), (0.13, 0.0, 0.0), (0.2, 0.35, 0.85)),
        ObjectSpec("block", "box-blob", (0.22, -0.27, 0.07), (0.26, 0.12, 0.14), (0.25, 0.7, 0.3)),
        ObjectSpec("tower", "box-blob", (-0.12, 0.3, 0.15), (0.1, 0.1, 0.3), (0.9, 0.8, 0.25), pattern="stripes"),
        # the room around the desk: unchanged context that each sparse tn view sees from one side only
        ObjectSpec("walls", "room-blob", (0.0, 0.0, 0.25), (4.4, 4.4, 1.3), (0.55, 0.6, 0.75), density=40.0, cell=0.25),
        ObjectSpec("room_floor", "plane-blob", (0.0, 0.0, -0.4), (4.4, 4.4, 0.0), (0.5, 0.38, 0.3), density=40.0, cell=0.3),
    ]


def _default_edits() -> list[EditSpec]:
    return [
        EditSpec("remove", "crate"),
        EditSpec("move", "ball", offset=(0.0, 0.22, 0.0)),
        EditSpec("add", "cup", object=ObjectSpec("cup", "sphere-blob", (0.02, -0.02, 0.1), (0.1, 0.0, 0.0),
                                                    (0.8, 0.2, 0.75), pattern="stripes")),
    ]


@dataclass
class SceneSpec:
    seed: int = 0
    extent: float = 1.0
    objects: list[ObjectSpec] = field(default_factory=_default_objects)
    edits: list[EditSpec] = field(default_factory=_default_edits)
    t0_views: int = 40
    tn_train_views: int = 8
    tn_test_views: int = 4
    layout: str = "uniform"
    width: int = 128
    height: int = 96
    focal: float = 110.0
    camera_radius: float = 1.55
    camera_heights: tuple[float, ...] = (0.75, 1.05)
    tn_camera_height: float = 0.9
    # handheld tn capture: per-view jitter of camera height and ring radius (fractions of extent)
    tn_height_jitter: float = 0.3
    tn_radius_jitter: float = 0.15
    # tn frame = (frame_transform)^-1 applied to the world; None draws one from the seed
    frame_rotation_deg: Optional[float] = None
    frame_scale: Optional[float] = None
    frame_translation: Optional[tuple[float, float, float]] = None
    pose_noise_deg: float = 0.0
    cloud_noise: float = 0.004
    # the dense tn cloud stands in for a learned multi-view reconstruction: noisier, and limited
    # to surfaces the tn training views see
    dense_cloud_noise: float = 0.012
    match_pixel_noise: float = 0.5
    t0_cloud_fraction: float = 0.5
    dense_factor: float = 2.0
    n_matches: int = 300
    n_seed_correspondences: int = 24
    pretrain_iterations: int = 7000
    gaussian_opacity: float = 0.95

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        edits = []
        for e in self.edits:
            if not isinstance(e, EditSpec):
                e = dict(e)
                if e.get("object") is not None and not isinstance(e["object"], ObjectSpec):
                    e["object"] = ObjectSpec(**e["object"])
                e = EditSpec(**e)
            edits.append(e)
        self.edits = edits
        self.camera_heights = tuple(self.camera_heights)
        self.validate()

    def validate(self) -> None:
        if min(self.t0_views, self.tn_train_views, self.tn_test_views, self.width, self.height) < 1:
            raise ValueError("view counts and image size must be >= 1")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError("object names must be unique")
        for o in self.objects:
            if o.kind not in KINDS:
                raise ValueError(f"unknown object kind {o.kind!r}")
        known = set(names)
        for e in self.edits:
            if e.op not in EDIT_OPS:
                raise ValueError(f"unknown edit {e.op!r}")
            if e.op == "add":
                if e.object is None or e.object.name in known:
                    raise ValueError("add edits need a new, uniquely named object")
                known.add(e.object.name)
            elif e.target not in known:
                raise ValueError(f"edit references unknown object {e.target!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(**data)

    def replace(self, **changes) -> "SceneSpec":
        d = self.to_dict()
        d.update(changes)
        return SceneSpec.from_dict(d)

    def t0_key(self) -> str:
        """Hash of everything the t0 capture and its pretrained model depend on."""
        d = self.to_dict()
        for k in ("edits", "tn_train_views", "tn_test_views", "layout", "tn_camera_height", "frame_rotation_deg",
                  "frame_scale", "frame_translation", "pose_noise_deg", "dense_factor", "n_matches",
                  "n_seed_correspondences", "match_pixel_noise"):
            d.pop(k)
        d["version"] = GENERATOR_VERSION
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# ground-truth Gaussians
# ---------------------------------------------------------------------------


def _texture(points: np.ndarray, obj: ObjectSpec) -> np.ndarray:
    base = np.asarray(obj.color, dtype=np.float64)
    rel = (points - np.asarray(obj.center)) / obj.cell
    if obj.pattern == "checker":
        k = (np.floor(rel[:, 0]) + np.floor(rel[:, 1]) + np.floor(rel[:, 2])) % 2
        shade = 0.55 + 0.45 * k
    elif obj.pattern == "stripes":
        shade = 0.5 + 0.5 * (np.floor(rel[:, 2] * 1.5 + rel[:, 0] * 0.5) % 2)
    else:
        shade = np.ones(len(points))
    return np.clip(base[None, :] * shade[:, None], 0.0, 1.0)


def _sample_surface(obj: ObjectSpec, rng: np.random.Generator, density: float) -> tuple[np.ndarray, float]:
    """Surface samples and the mean sample spacing."""
    c = np.asarray(obj.center, dtype=np.float64)
    if obj.kind == "plane-blob":
        sx, sy = obj.size[0], obj.size[1]
        n = max(1, int(round(density * sx * sy)))
        pts = np.column_stack([rng.uniform(-sx / 2, sx / 2, n), rng.uniform(-sy / 2, sy / 2, n), np.zeros(n)]) + c
        return pts, math.sqrt(sx * sy / n)
    if obj.kind == "sphere-blob":
        r = obj.size[0]
        area = 4 * math.pi * r * r
        n = max(1, int(round(density * area)))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return c + r * d, math.sqrt(area / n)
    # box without its bottom face; a room keeps only the four side walls
    sx, sy, sz = obj.size
    faces = [  # (axis fixed, sign, area)
        (0, 1.0, sy * sz), (0, -1.0, sy * sz), (1, 1.0, sx * sz), (1, -1.0, sx * sz),
    ]
    if obj.kind == "box-blob":
        faces.insert(0, (2, 1.0, sx * sy))
    area = sum(f[2] for f in faces)
    n = max(1, int(round(density * area)))
    probs = np.array([f[2] for f in faces]) / area
    which = rng.choice(len(faces), size=n, p=probs)
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([sx, sy, sz])
    half = np.array([sx, sy, sz]) / 2
    for fi, (axis, sign, _) in enumerate(faces):
        sel = which == fi
        u[sel, axis] = sign * half[axis]
    return c + u, math.sqrt(area / n)


@dataclass
class GroundTruthScene:
    means: np.ndarray
    colors: np.ndarray
    scales: np.ndarray
    labels: np.ndarray  # object name per Gaussian
    local: np.ndarray  # index within its object

    def model(self, opacity: float) -> GaussianModel:
        return GaussianModel.isotropic(self.means, self.scales, opacity, self.colors)

    def __len__(self) -> int:
        return len(self.means)


def _object_stream(seed: int, name: str, salt: int = 0) -> np.random.Generator:
    tag = int(hashlib.sha256(name.encode()).hexdigest()[:8], 16)
    return np.random.default_rng([seed, tag, salt])


def build_scene(objects: Sequence[ObjectSpec], seed: int, density_factor: float = 1.0, salt: int = 0) -> GroundTruthScene:
    means, colors, scales, labels, local = [], [], [], [], []
    for obj in objects:
        pts, spacing = _sample_surface(obj, _object_stream(seed, obj.name, salt), obj.density * density_factor)
        means.append(pts)
        colors.append(_texture(pts, obj))
        scales.append(np.full(len(pts), 0.7 * spacing))
        labels.append(np.full(len(pts), obj.name, dtype=object))
        local.append(np.arange(len(pts)))
    return GroundTruthScene(np.concatenate(means), np.concatenate(colors), np.concatenate(scales),
                            np.concatenate(labels), np.concatenate(local))


def edited_objects(spec: SceneSpec) -> list[ObjectSpec]:
    objs = {o.name: copy.deepcopy(o) for o in spec.objects}
    for e in spec.edits:
        if e.op == "remove":
            objs.pop(e.target)
        elif e.op == "add":
            objs[e.object.name] = copy.deepcopy(e.object)
        elif e.op == "recolor":
            objs[e.target].color = tuple(e.color)
        elif e.op == "move":
            o = objs[e.target]
            o.center = tuple(np.asarray(o.center) + np.asarray(e.offset))
    return list(objs.values())


def unchanged_objects(spec: SceneSpec) -> set[str]:
    touched = {e.target for e in spec.edits} | {e.object.name for e in spec.edits if e.op == "add" and e.object}
    return {o.name for o in spec.objects} - touched


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def _camera(cid: int, spec: SceneSpec, azimuth: float, height: float, image: str, radius: Optional[float] = None) -> Camera:
    r = (spec.camera_radius if radius is None else radius) * spec.extent
    eye = (r * math.cos(azimuth), r * math.sin(azimuth), height * spec.extent)
    rot, t = look_at(eye, (0.0, 0.0, 0.08 * spec.extent))
    return Camera(cid, spec.width, spec.height, spec.focal, spec.focal, spec.width / 2 - 0.5, spec.height / 2 - 0.5,
                  rot, t, image)


def t0_cameras(spec: SceneSpec) -> list[Camera]:
    cams = []
    for i in range(spec.t0_views):
        az = 2 * math.pi * i / spec.t0_views
        h = spec.camera_heights[i % len(spec.camera_heights)]
        cams.append(_camera(i, spec, az, h, f"t0/images/view_{i:04d}.png"))
    return cams


def tn_azimuths(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Training and test azimuths (radians). Test views are spread evenly regardless of layout."""
    test = 2 * math.pi * (np.arange(spec.tn_test_views) + 0.5) / spec.tn_test_views + 0.3
    n = spec.tn_train_views
    if spec.layout == "uniform":
        train = 2 * math.pi * np.arange(n) / n + 0.1
    else:
        # a 120 degree arc
        train = np.linspace(-math.pi / 3, math.pi / 3, n) if n > 1 else np.zeros(1)
    return train, test


def tn_cameras_true(spec: SceneSpec) -> tuple[list[Camera], list[int], list[int]]:
    train, test = tn_azimuths(spec)
    azimuths = np.concatenate([train, test])
    # jitter depends on the view's slot only, so layouts and view counts share test poses
    cams = []
    for k, az in enumerate(azimuths):
        slot = ("train", k) if k < len(train) else ("test", k - len(train))
        rng = np.random.default_rng([spec.seed, 41, 0 if slot[0] == "train" else 1, slot[1]])
        height = spec.tn_camera_height + spec.tn_height_jitter * rng.uniform(-1.0, 1.0)
        radius = spec.camera_radius * (1.0 + spec.tn_radius_jitter * rng.uniform(-1.0, 1.0))
        cams.append(_camera(k, spec, float(az), height, f"tn/images/view_{k:04d}.png", radius))
    return cams, list(range(len(train))), list(range(len(train), len(train) + len(test)))


def frame_transform(spec: SceneSpec) -> SimilarityTransform:
    """Ground-truth tn-frame -> t0-frame similarity."""
    rng = np.random.default_rng([spec.seed, 31337])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    deg = spec.frame_rotation_deg if spec.frame_rotation_deg is not None else rng.uniform(5.0, 20.0)
    scale = spec.frame_scale if spec.frame_scale is not None else float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
    if spec.frame_translation is not None:
        trans = np.asarray(spec.frame_translation, dtype=np.float64)
    else:
        d = rng.normal(size=3)
        trans = d / np.linalg.norm(d) * rng.uniform(0.05, 0.3) * spec.extent
    return SimilarityTransform(scale, axis_angle_to_rotmat(axis, math.radians(deg)), trans)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def visible_in(model: GaussianModel, cameras: Sequence[Camera], min_weight: float = 0.5) -> np.ndarray:
    """Gaussians whose compositing weight (alpha times transmittance, summed over pixels) reaches
    ``min_weight`` in at least one camera."""
    seen = np.zeros(len(model), dtype=bool)
    for cam in cameras:
        # d(sum of one channel)/d(color) is exactly the per-Gaussian compositing weight
        dl = np.zeros((cam.height, cam.width, 3))
        dl[..., 0] = 1.0
        seen |= render_backward(model, cam, (0.0, 0.0, 0.0), dl).colors[:, 0] >= min_weight
    return seen


def quantize(image: np.ndarray) -> np.ndarray:
    """What an 8-bit PNG round trip does to an image in [0, 1]."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _cache_dir() -> Path:
    return Path(os.environ.get("TEMPOGS_CACHE", Path.home() / ".cache" / "tempogs"))


def pretrain_t0_model(p_c: PointCloud, views: Sequence[tuple[Camera, np.ndarray]], iterations: int,
                      seed: int, config: Optional[TrainConfig] = None) -> GaussianModel:
    """Standard training on all t0 views from the t0 cloud (full confidence, densification on)."""
    config = (config or TrainConfig()).replace(max_iterations=iterations, seed=seed)
    model = init_model_from_cloud(p_c, config)
    trainer = Trainer(model, config, extent=camera_extent([c for c, _ in views]))
    rng = np.random.default_rng([seed, 5])
    while not trainer.done:
        for i in rng.permutation(len(views)):
            if trainer.done:
                break
            trainer.step(*views[i])
    logger.info("pretrained t0 model: %d Gaussians, final loss %.4f", len(model), np.mean(trainer.losses[-50:]))
    return model


def cached_t0_model(spec: SceneSpec, p_c: PointCloud, views, use_cache: bool = True) -> GaussianModel:
    # the pretraining recipe is part of the key, so changed defaults never reuse a stale model
    recipe = hashlib.sha256(json.dumps(TrainConfig().to_dict(), sort_keys=True, default=list).encode()).hexdigest()[:8]
    path = _cache_dir() / f"model_t0_{spec.t0_key()}_{spec.pretrain_iterations}_{recipe}.ply"
    if use_cache and path.exists():
        return GaussianModel.load_ply(path)
    model = pretrain_t0_model(p_c, views, spec.pretrain_iterations, spec.seed)
    if use_cache:
        model.save_ply(path)
        model = GaussianModel.load_ply(path)  # identical to what later cache hits return
    return model


def generate_dataset(spec: SceneSpec, out_dir, use_cache: bool = True) -> Path:
    """Write a complete paired dataset (see README for the layout) and return its root."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed, 11])

    gt0 = build_scene(spec.objects, spec.seed)
    gtn = build_scene(edited_objects(spec), spec.seed)
    model0, modeln = gt0.model(spec.gaussian_opacity), gtn.model(spec.gaussian_opacity)
    bg = (0.0, 0.0, 0.0)

    cams0 = t0_cameras(spec)
    t0_views = []
    for cam in cams0:
        img = quantize(render(model0, cam, bg))
        io.save_image(out / cam.image, img)
        t0_views.append((cam, img))
    io.write_cameras(out / "t0" / "cameras.json", cams0)

    # t0 cloud: noisy subset of the t0 Gaussian centers
    n_c = max(3, int(round(spec.t0_cloud_fraction * len(gt0))))
    c_idx = np.sort(rng.choice(len(gt0), size=n_c, replace=False))
    noise = spec.cloud_noise * spec.extent
    p_c = PointCloud(gt0.means[c_idx] + rng.normal(0, noise, (n_c, 3)), gt0.colors[c_idx])
    io.write_point_cloud(out / "t0" / "points.ply", p_c)

    # tn capture, rendered at the true poses and stored in the perturbed frame
    truth = frame_transform(spec)
    to_tn = truth.inverse()
    cams_true, train_ids, test_ids = tn_cameras_true(spec)
    cams_est = []
    masks_dir = out / "ground_truth" / "masks"
    for cam in cams_true:
        img = quantize(render(modeln, cam, bg))
        io.save_image(out / cam.image, img)
        before = quantize(render(model0, cam, bg))
        mask = (np.abs(img - before).max(axis=2) > 0).astype(np.float64)
        io.save_image(masks_dir / f"view_{cam.id:04d}.png", np.repeat(mask[..., None], 3, axis=2))
        est = apply_similarity_to_camera(to_tn, cam)
        if spec.pose_noise_deg:
            jitter = axis_angle_to_rotmat(rng.normal(size=3), math.radians(rng.normal(0, spec.pose_noise_deg)))
            est = est.replace(rotation=jitter @ est.rotation)
        cams_est.append(est)
    io.write_cameras(out / "tn" / "cameras_est.json", cams_est)

    # dense tn cloud: the tn Gaussian centers plus extra surface samples, all noisy
    extra = build_scene(edited_objects(spec), spec.seed, density_factor=max(spec.dense_factor - 1.0, 1e-6), salt=1)
    dense_world = np.concatenate([gtn.means, extra.means])
    dense_colors = np.concatenate([gtn.colors, extra.colors])
    dense_labels = np.concatenate([gtn.labels, extra.labels])
    seen = visible_in(GaussianModel.isotropic(dense_world, np.concatenate([gtn.scales, extra.scales]),
                                              spec.gaussian_opacity, dense_colors),
                      [cams_true[i] for i in train_ids])
    dense_world, dense_colors, dense_labels = dense_world[seen], dense_colors[seen], dense_labels[seen]
    dense_noisy = dense_world + rng.normal(0, spec.dense_cloud_noise * spec.extent, dense_world.shape)
    p_n = PointCloud(to_tn.apply(dense_noisy), dense_colors)
    io.write_point_cloud(out / "tn" / "points_dense.ply", p_n)

    # 2D-3D matches on unchanged geometry
    keep = unchanged_objects(spec)
    candidates = np.flatnonzero(np.isin(dense_labels, sorted(keep)))
    matches: list[Match2D3D] = []
    attempts = 0
    while len(matches) < spec.n_matches and attempts < 50 * spec.n_matches and len(candidates):
        attempts += 1
        i = int(rng.choice(candidates))
        cam = cams0[int(rng.integers(len(cams0)))]
        uv, front = project_points(cam, dense_world[i:i + 1])
        if not front[0]:
            continue
        u, v = uv[0] + rng.normal(0, spec.match_pixel_noise, 2)
        if 0 <= u < cam.width and 0 <= v < cam.height:
            matches.append(Match2D3D(cam.id, (float(u), float(v)), i))
    io.write_matches(out / "matches.json", matches)

    # 3D-3D seeds: the same unchanged Gaussian in both clouds
    pos_in_c = {int(g): k for k, g in enumerate(c_idx)}
    # position of each surviving tn Gaussian inside the filtered dense cloud
    dense_pos = np.cumsum(seen) - 1
    key_n = {(gtn.labels[i], int(gtn.local[i])): int(dense_pos[i]) for i in range(len(gtn)) if seen[i]}
    pairs = []
    for g, k in pos_in_c.items():
        if gt0.labels[g] in keep:
            j = key_n.get((gt0.labels[g], int(gt0.local[g])))
            if j is not None:
                pairs.append((j, k))
    pick = rng.choice(len(pairs), size=min(spec.n_seed_correspondences, len(pairs)), replace=False)
    seeds = [{"source_index": int(pairs[p][0]), "target_index": int(pairs[p][1])} for p in sorted(pick)]
    io.write_json(out / "seed_correspondences.json", seeds)

    io.write_json(out / "ground_truth" / "transform.json",
                  {"tn_to_t0": truth.to_list(), "train_ids": train_ids, "test_ids": test_ids})
    io.write_json(out / "spec.json", spec.to_dict())

    g0 = cached_t0_model(spec, p_c, t0_views, use_cache)
    g0.save_ply(out / "t0" / "model_t0.ply")
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    spec: SceneSpec
    t0_views: list
    tn_views: list  # estimated cameras (tn frame) with images
    train_ids: list[int]
    test_ids: list[int]
    p_c: PointCloud
    p_n: PointCloud
    matches: list[Match2D3D]
    seeds: list[tuple[int, int]]
    truth: SimilarityTransform
    g0: Optional[GaussianModel]

    @property
    def t0_cameras(self) -> list[Camera]:
        return [c for c, _ in self.t0_views]

    @property
    def tn_cameras(self) -> list[Camera]:
        return [c for c, _ in self.tn_views]


def load_dataset(root, load_model: bool = True) -> Dataset:
    root = Path(root)
    spec = SceneSpec.from_dict(io.read_json(root / "spec.json"))
    t0 = io.load_views(io.read_cameras(root / "t0" / "cameras.json"), root)
    tn = io.load_views(io.read_cameras(root / "tn" / "cameras_est.json"), root)
    gt = io.read_json(root / "ground_truth" / "transform.json")
    seeds = [(int(r["source_index"]), int(r["target_index"])) for r in io.read_json(root / "seed_correspondences.json")]
    g0 = None
    if load_model:
        path = root / "t0" / "model_t0.ply"
        if not path.exists():
            raise FileNotFoundError(f"missing file: {path}")
        g0 = GaussianModel.load_ply(path)
    return Dataset(root, spec, t0, tn, gt["train_ids"], gt["test_ids"],
                   io.read_point_cloud(root / "t0" / "points.ply"), io.read_point_cloud(root / "tn" / "points_dense.ply"),
                   io.read_matches(root / "matches.json"), seeds, SimilarityTransform.from_list(gt["tn_to_t0"]), g0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) on [0, 1] RGB; ``inf`` for identical images."""
    mse = float(np.mean((np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalResult:
    psnr: list[float]
    ssim: list[float]
    seconds: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def psnr_infinite(self) -> bool:
        return any(math.isinf(p) for p in self.psnr)

    def to_record(self) -> dict:
        fmt = lambda v: "inf" if math.isinf(v) else v  # noqa: E731
        return {"psnr": [fmt(p) for p in self.psnr], "ssim": self.ssim, "mean_psnr": fmt(self.mean_psnr),
                "mean_ssim": self.mean_ssim, "psnr_infinite": self.psnr_infinite, "seconds": self.seconds}


def evaluate(model: GaussianModel, views: Sequence[tuple[Camera, np.ndarray]], background=(0.0, 0.0, 0.0)) -> EvalResult:
    if not views:
        raise ValueError("evaluation needs at least one view")
    start = time.perf_counter()
    ps, ss = [], []
    for cam, gt in views:
        out = quantize(render(model, cam, background))
        ps.append(psnr(out, gt))
        ss.append(ssim_metric(out, gt)[0])
    return EvalResult(ps, ss, {"eval": time.perf_counter() - start})


# ---------------------------------------------------------------------------
# variants and the experiment matrix
# ---------------------------------------------------------------------------

METHOD_VARIANTS = ("full", "baseline", "no-align", "no-icp", "no-confidence-finetune", "fixed-confidence")


def parse_variant(name: str) -> tuple[str, dict]:
    """Method name and spec overrides; ``views-N-layout`` runs the full method on a modified capture."""
    if name in METHOD_VARIANTS:
        return name, {}
    parts = name.split("-")
    if len(parts) == 3 and parts[0] == "views" and parts[1].isdigit() and parts[2] in LAYOUTS:
        return "full", {"tn_train_views": int(parts[1]), "layout": parts[2]}
    raise ValueError(f"unknown variant {name!r}")


@dataclass
class VariantResult:
    variant: str
    model: GaussianModel
    report: Optional[dict]
    alignment: Optional[dict]
    evaluation: EvalResult


def run_variant(ds: Dataset, variant: str, config: Optional[TrainConfig] = None,
                align_settings: Optional[AlignSettings] = None) -> VariantResult:
    """Alignment, confidence and training for one method on a loaded dataset, evaluated on the test views."""
    method, _ = parse_variant(variant)
    config = config or TrainConfig(seed=ds.spec.seed)
    settings = align_settings or AlignSettings(seed=config.seed)
    if method == "no-align":
        settings = dataclasses.replace(settings, use_lm=False, use_icp=False)
    elif method == "no-icp":
        settings = dataclasses.replace(settings, use_icp=False)
    timings = {}
    t = time.perf_counter()
    result = align(ds.p_n, ds.p_c, ds.tn_cameras, ds.t0_cameras, ds.matches, ds.seeds, settings)
    timings["align"] = time.perf_counter() - t
    cams = result.aligned_cameras
    train = [(cams[i], ds.tn_views[i][1]) for i in ds.train_ids]
    test = [(cams[i], ds.tn_views[i][1]) for i in ds.test_ids]

    t = time.perf_counter()
    if method == "baseline":
        model, report = baseline_optimize(result.fused_cloud, train, config)
    elif method == "no-confidence-finetune":
        model, report = finetune_optimize(ds.g0, train, config)
    else:
        model, report, _ = progressive_optimize(ds.g0, result.fused_cloud, ds.t0_views, train, config,
                                                refine=(method != "fixed-confidence"))
    timings["optimize"] = time.perf_counter() - t
    ev = evaluate(model, test, config.background)
    ev.seconds.update(timings)
    rec = report.to_record()
    rec["metrics"] = ev.to_record()
    return VariantResult(variant, model, rec, result.to_record(), ev)


def run_experiment_matrix(specs: Sequence[SceneSpec], variants: Sequence[str], out,
                          config: Optional[TrainConfig] = None,
                          align_settings: Optional[AlignSettings] = None) -> list[dict]:
    """Run every (spec, variant) cell; failures are recorded and the matrix continues.

    Writes ``results.csv``, ``results.json`` and ``summary.txt`` into ``out``.
    """
    out = Path(out)
    rows: list[dict] = []
    for s_idx, spec in enumerate(specs):
        for variant in variants:
            row = {"scene": s_idx, "seed": spec.seed, "variant": variant}
            try:
                _, overrides = parse_variant(variant)
                cell_spec = spec.replace(**overrides) if overrides else spec
                name = f"scene{s_idx}_seed{spec.seed}" + ("_" + variant if overrides else "")
                root = out / "datasets" / name
                if not (root / "spec.json").exists():
                    generate_dataset(cell_spec, root)
                ds = load_dataset(root)
                cfg = (config or TrainConfig()).replace(seed=spec.seed)
                res = run_variant(ds, variant, cfg, align_settings)
                row.update(psnr=res.evaluation.mean_psnr, ssim=res.evaluation.mean_ssim,
                           seconds=sum(res.evaluation.seconds.values()), iterations=res.report["iterations"],
                           termination=res.report["termination"], status="ok", error="")
            except Exception as exc:  # a failed cell must not stop the matrix
                logger.exception("cell %s/%s failed", s_idx, variant)
                row.update(psnr=float("nan"), ssim=float("nan"), seconds=0.0, iterations=0, termination="",
                           status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    write_tables(rows, out)
    return rows


def write_tables(rows: list[dict], out) -> None:
    out = Path(out)
    cols = ["scene", "seed", "variant", "psnr", "ssim", "seconds", "iterations", "termination", "status", "error"]
    with io.atomic_path(out / "results.csv") as tmp:
        with open(tmp, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: r.get(k, "") for k in cols})
    io.write_json(out / "results.json", rows)
    lines = [f"{'variant':<26}{'PSNR':>9}{'SSIM':>8}{'time(s)':>10}  status"]
    for r in rows:
        lines.append(f"{r['variant']:<26}{r['psnr']:>9.2f}{r['ssim']:>8.3f}{r['seconds']:>10.1f}  {r['status']}")
    with io.atomic_path(out / "summary.txt") as tmp:
        tmp.write_text("\n".join(lines) + "\n")
