"""File formats: FMAT binary matrices, ASCII/binary PLY, scene and model JSON.

FMAT is the one binary container used for descriptors, model features, and
attention weights: magic "FMAT", u32 version, u32 section count, then per
section a u32 name length, the UTF-8 name, a u8 dtype code (0=f32, 1=f64),
u64 rows, u64 cols, and the row-major little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose
from .scene import NoiseModel, SyntheticScene

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
_DTYPE_CODES = {0: "<f4", 1: "<f8"}
_CODE_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_fmat(path, sections: dict[str, np.ndarray]) -> None:
    """Write named 2D float arrays; insertion order is preserved on disk."""
    with open(path, "wb") as fh:
        fh.write(FMAT_MAGIC)
        fh.write(struct.pack("<II", FMAT_VERSION, len(sections)))
        for name, array in sections.items():
            a = np.asarray(array)
            if a.ndim != 2:
                raise ValueError(f"section {name!r} must be 2D, got shape {a.shape}")
            if a.dtype not in _CODE_OF_DTYPE:
                a = a.astype(np.float64)
            code = _CODE_OF_DTYPE[a.dtype]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BQQ", code, a.shape[0], a.shape[1]))
            fh.write(np.ascontiguousarray(a, dtype=_DTYPE_CODES[code]).tobytes())


def read_fmat(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FMAT_MAGIC:
            raise ValueError(f"not an FMAT file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FMAT_VERSION:
            raise ValueError(f"unsupported FMAT version {version}")
        sections: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            code, rows, cols = struct.unpack("<BQQ", fh.read(17))
            dtype = np.dtype(_DTYPE_CODES[code])
            payload = fh.read(rows * cols * dtype.itemsize)
            sections[name] = np.frombuffer(payload, dtype=dtype).reshape(rows, cols).copy()
    return sections


def write_ply(path, points: np.ndarray, binary: bool = False) -> None:
    """Point-cloud PLY; ASCII by default for diff-ability."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        else:
            for x, y, z in pts:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n".encode("ascii"))


def read_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ValueError("not a PLY file")
        fmt = None
        n = None
        while True:
            line = fh.readline().strip()
            if line.startswith(b"format"):
                fmt = line.split()[1].decode()
            elif line.startswith(b"element vertex"):
                n = int(line.split()[-1])
            elif line == b"end_header":
                break
            elif not line:
                raise ValueError("unexpected end of PLY header")
        if fmt == "ascii":
            rows = [fh.readline().split() for _ in range(n)]
            return np.array(rows, dtype=np.float64)
        return np.frombuffer(fh.read(n * 24), dtype="<f8").reshape(n, 3).copy()


def _dump_json(payload, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def save_scene(scene: SyntheticScene, json_path) -> None:
    """Scene JSON plus FMAT sidecar (points, coarse/fine descriptors)."""
    json_path = Path(json_path)
    sidecar = json_path.with_suffix(".fmat")
    write_fmat(
        sidecar,
        {
            "points": scene.points,
            "desc_coarse": scene.desc_coarse,
            "desc_fine": scene.desc_fine,
        },
    )
    payload = {
        "format": "semidense-scene",
        "version": 1,
        "seed": scene.seed,
        "diameter": scene.diameter,
        "noise": scene.noise.to_dict(),
        "n_points": scene.n_points,
        "sidecar": sidecar.name,
        "views": [
            {
                "pose": [[float(x) for x in row] for row in pose.matrix],
                "intrinsics": intr.to_dict(),
            }
            for pose, intr in scene.views
        ],
    }
    _dump_json(payload, json_path)


def load_scene(json_path) -> SyntheticScene:
    json_path = Path(json_path)
    with open(json_path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "semidense-scene":
        raise ValueError(f"{json_path} is not a scene file")
    sections = read_fmat(json_path.parent / payload["sidecar"])
    views = [
        (
            SE3Pose.from_matrix(np.array(v["pose"], dtype=float)),
            CameraIntrinsics.from_dict(v["intrinsics"]),
        )
        for v in payload["views"]
    ]
    return SyntheticScene(
        points=sections["points"],
        desc_coarse=sections["desc_coarse"],
        desc_fine=sections["desc_fine"],
        views=views,
        noise=NoiseModel.from_dict(payload["noise"]),
        seed=int(payload["seed"]),
        diameter=float(payload["diameter"]),
    )


def save_model(model_dir, model, coarse_points: np.ndarray, recon_views: list[int]) -> None:
    """Refined model directory: PLY clouds, FMAT features, JSON manifest."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    write_ply(model_dir / "coarse.ply", coarse_points)
    write_ply(model_dir / "refined.ply", model.points)
    write_fmat(
        model_dir / "features.fmat",
        {
            "points": model.points,
            "coarse_features": model.coarse_features,
            "fine_features": model.fine_features,
        },
    )
    _dump_json(
        {
            "format": "semidense-model",
            "version": 1,
            "n_points": model.n_points,
            "track_ids": [int(t) for t in model.track_ids],
            "recon_views": [int(v) for v in recon_views],
            "files": {
                "coarse_ply": "coarse.ply",
                "refined_ply": "refined.ply",
                "features": "features.fmat",
            },
        },
        model_dir / "model.json",
    )


def load_model(model_dir):
    from .refine import PointCloudModel

    model_dir = Path(model_dir)
    with open(model_dir / "model.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "semidense-model":
        raise ValueError(f"{model_dir} is not a model directory")
    sections = read_fmat(model_dir / manifest["files"]["features"])
    model = PointCloudModel(
        points=sections["points"],
        coarse_features=sections["coarse_features"],
        fine_features=sections["fine_features"],
        track_ids=np.array(manifest["track_ids"], dtype=int),
    )
    return model, manifest
