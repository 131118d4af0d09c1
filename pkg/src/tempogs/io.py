"""File formats: PLY vertex tables, cameras.json, PNG images, atomic writes."""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

from .geometry import Camera, Match2D3D, PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@contextlib.contextmanager
def atomic_path(path: str | os.PathLike, suffix: str = "") -> Iterator[Path]:
    """Yield a temp path next to ``path``; it is renamed over ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=suffix or path.suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def write_ply(path, columns: dict[str, np.ndarray], binary: bool = True) -> None:
    """Write a vertex-only PLY. Float columns are stored as doubles, integer columns as int32."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    dtype = []
    for name in names:
        arr = np.asarray(columns[name])
        if len(arr) != n:
            raise ValueError(f"column {name} has {len(arr)} rows, expected {n}")
        dtype.append((name, "<i4" if np.issubdtype(arr.dtype, np.integer) else "<f8"))
    table = np.empty(n, dtype=dtype)
    for name in names:
        table[name] = columns[name]
    ply_type = {"<i4": "int", "<f8": "double"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {ply_type[t]} {name}" for name, t in dtype]
    header.append("end_header")
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                f.write(table.tobytes())
            else:
                for row in table:
                    # repr round-trips doubles exactly
                    f.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


def read_ply(path) -> dict[str, np.ndarray]:
    """Read the vertex element of an ASCII or binary little-endian PLY."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements: list[tuple[str, int, list[tuple[str, str]]]] = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tokens = line.decode("ascii").split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    raise ValueError(f"{path}: list properties are not supported")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if not elements or elements[0][0] != "vertex":
            raise ValueError(f"{path}: first element must be 'vertex'")
        _, n, props = elements[0]
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, "<" + t) for name, t in props])
            data = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype, count=n)
            return {name: data[name].copy() for name, _ in props}
        if fmt == "ascii":
            rows = [f.readline().split() for _ in range(n)]
            out = {}
            for j, (name, t) in enumerate(props):
                out[name] = np.array([r[j] for r in rows], dtype=np.float64 if t[0] == "f" else np.int64).astype(t)
            return out
        raise ValueError(f"{path}: unsupported PLY format {fmt}")


def write_point_cloud(path, cloud: PointCloud, binary: bool = True) -> None:
    cols = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2]}
    if cloud.colors is not None:
        cols.update(red=cloud.colors[:, 0], green=cloud.colors[:, 1], blue=cloud.colors[:, 2])
    write_ply(path, cols, binary=binary)


def read_point_cloud(path) -> PointCloud:
    data = read_ply(path)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    colors = None
    if all(k in data for k in ("red", "green", "blue")):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1)
        if np.issubdtype(colors.dtype, np.integer):
            colors = colors / 255.0
        colors = colors.astype(np.float64)
    return PointCloud(points, colors)


# ---------------------------------------------------------------------------
# cameras, matches, images
# ---------------------------------------------------------------------------


def camera_to_record(cam: Camera) -> dict:
    return {
        "id": cam.id, "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.ravel().tolist(),
        "translation": cam.translation.tolist(),
        "image": cam.image,
    }


def camera_from_record(rec: dict) -> Camera:
    return Camera(
        id=int(rec["id"]), width=int(rec["width"]), height=int(rec["height"]),
        fx=float(rec["fx"]), fy=float(rec["fy"]), cx=float(rec["cx"]), cy=float(rec["cy"]),
        rotation=np.array(rec["rotation"], dtype=np.float64).reshape(3, 3),
        translation=np.array(rec["translation"], dtype=np.float64),
        image=rec.get("image"),
    )


def write_cameras(path, cameras: Sequence[Camera]) -> None:
    write_json(path, [camera_to_record(c) for c in cameras])


def read_cameras(path) -> list[Camera]:
    return [camera_from_record(r) for r in read_json(path)]


def write_matches(path, matches: Sequence[Match2D3D]) -> None:
    write_json(path, [{"view_id": m.view_id, "pixel": [m.pixel[0], m.pixel[1]], "point_index": m.point_index} for m in matches])


def read_matches(path) -> list[Match2D3D]:
    return [Match2D3D(int(r["view_id"]), (float(r["pixel"][0]), float(r["pixel"][1])), int(r["point_index"])) for r in read_json(path)]


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    with atomic_path(path) as tmp:
        PILImage.fromarray(arr).save(tmp, format="PNG")


def load_image(path) -> np.ndarray:
    """(H, W, 3) float64 image in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_views(cameras: Sequence[Camera], root: Path) -> list[tuple[Camera, np.ndarray]]:
    """Pair cameras with their images; ``image`` paths are relative to ``root``."""
    views = []
    for cam in cameras:
        if cam.image is None:
            raise ValueError(f"camera {cam.id} has no image path")
        views.append((cam, load_image(Path(root) / cam.image)))
    return views
