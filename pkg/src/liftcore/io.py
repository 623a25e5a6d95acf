"""On-disk formats: PFM maps, PNG frames, Gaussian/point PLY, pose JSON."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from liftcore.core import GaussianCloud, Image, Pose

# -- PFM ---------------------------------------------------------------------


def write_pfm(path, data) -> None:
    """Little-endian PFM (negative scale), rows stored bottom-up."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds HxW or HxWx3 data, got {a.shape}")
    h, w = a.shape[:2]
    body = np.ascontiguousarray(np.flipud(a)).astype("<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 3 if tag == b"PF" else 1
    dt = "<f4" if scale < 0 else ">f4"
    n = w * h * ch
    a = np.frombuffer(raw, dtype=dt, count=n, offset=m.end())
    a = a.reshape((h, w, ch) if ch == 3 else (h, w))
    return np.flipud(a).astype(np.float32)


# -- PNG ---------------------------------------------------------------------


def write_png(path, image) -> None:
    from PIL import Image as PILImage

    data = image.data if isinstance(image, Image) else np.asarray(image)
    data = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    u8 = np.round(data * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(u8).save(path)


def read_png(path) -> Image:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        mode = "L" if im.mode in ("L", "I", "I;16") else "RGB"
        a = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return Image(a)


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "ushort": "<u2",
    "uint16": "<u2",
    "short": "<i2",
    "int16": "<i2",
    "uint": "<u4",
    "uint32": "<u4",
    "int": "<i4",
    "int32": "<i4",
}
_PLY_NAMES = {"<f4": "float", "<f8": "double", "u1": "uchar", "i1": "char", "<u2": "ushort", "<i2": "short", "<u4": "uint", "<i4": "int"}


def write_ply_table(path, table: np.ndarray) -> None:
    """Binary little-endian PLY with one vertex element from a structured array."""
    dt = table.dtype
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(table)}"]
    for name in dt.names:
        lines.append(f"property {_PLY_NAMES[dt[name].str.replace('|', '')]} {name}")
    lines.append("end_header")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(table).tobytes())


def read_ply_table(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    count, fields, in_vertex = 0, [], False
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif fields:
                break
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported on vertices")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    dt = np.dtype(fields)
    return np.frombuffer(raw, dtype=dt, count=count, offset=end + len(b"end_header\n")).copy()


def _gaussian_dtype() -> np.dtype:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    names += [f"scale_{k}" for k in range(3)] + [f"rot_{k}" for k in range(4)]
    return np.dtype([(n, "<f4") for n in names])


def gaussians_to_table(g: GaussianCloud) -> np.ndarray:
    t = np.zeros(len(g), dtype=_gaussian_dtype())
    for k, ax in enumerate("xyz"):
        t[ax] = g.centers[:, k]
    for k in range(3):
        t[f"f_dc_{k}"] = g.colors[:, k]
        t[f"scale_{k}"] = np.log(g.scales[:, k])
    for k in range(4):
        t[f"rot_{k}"] = g.rotations[:, k]
    o = np.clip(g.opacities, 1e-12, 1 - 1e-12)
    t["opacity"] = np.log(o / (1 - o))
    return t


def table_to_gaussians(t: np.ndarray) -> GaussianCloud:
    f = lambda n: np.asarray(t[n], dtype=np.float64)  # noqa: E731
    centers = np.stack([f("x"), f("y"), f("z")], axis=1)
    colors = np.stack([f(f"f_dc_{k}") for k in range(3)], axis=1)
    scales = np.exp(np.stack([f(f"scale_{k}") for k in range(3)], axis=1))
    rot = np.stack([f(f"rot_{k}") for k in range(4)], axis=1)
    if len(rot):
        rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
    opac = 1.0 / (1.0 + np.exp(-f("opacity")))
    # float32 logits can saturate to exactly 0 or 1
    opac = np.clip(opac, 1e-7, 1 - 1e-7)
    return GaussianCloud(centers, scales, rot, opac, colors)


def write_gaussians_ply(path, g: GaussianCloud) -> None:
    write_ply_table(path, gaussians_to_table(g))


def read_gaussians_ply(path) -> GaussianCloud:
    return table_to_gaussians(read_ply_table(path))


def write_points_ply(path, points, colors, confidence, frame_index) -> None:
    dt = np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("confidence", "<f4"), ("frame", "<i4")]
    )
    t = np.zeros(len(points), dtype=dt)
    for k, ax in enumerate("xyz"):
        t[ax] = points[:, k]
    rgb = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    t["red"], t["green"], t["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    t["confidence"] = confidence
    t["frame"] = frame_index
    write_ply_table(path, t)


# -- JSON --------------------------------------------------------------------


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=False)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def poses_to_json(poses: dict[str, Pose], focal: float, width: int | None = None, height: int | None = None) -> dict:
    out = {"focal": float(focal), "poses": {k: p.matrix().tolist() for k, p in poses.items()}}
    if width is not None:
        out["width"], out["height"] = int(width), int(height)
    return out


def poses_from_json(d: dict) -> tuple[dict[str, Pose], float]:
    return {k: Pose.from_matrix(m) for k, m in d["poses"].items()}, float(d["focal"])
