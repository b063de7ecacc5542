"""On-disk artifacts: grid binaries, case directories, model/prior containers.

All writes go through a temp-file-plus-rename so interrupted runs never leave
truncated artifacts. Grid files use the WINDGRID layout: 8-byte magic, u32
rank, u32 extents, then little-endian float32 data in row-major order.
Checkpoints and priors use a self-describing container: magic, u32 format
version, u64 JSON header length, JSON header (metadata plus array shapes and
offsets), then raw little-endian float64 arrays.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .synth import Case, LRGrid, TerrainGrid, WindCaseParams, GRAD_SCALE, Z_TOP_M, DOMAIN_M

GRID_MAGIC = b"WINDGRID"
CONTAINER_VERSION = 1


class DataError(ValueError):
    """Malformed or incompatible on-disk artifact."""


class MissingArtifactError(FileNotFoundError):
    """A required input file or directory does not exist."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# WINDGRID binaries


def write_grid(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = GRID_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, head + arr.tobytes())


def read_grid(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    raw = path.read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:8]!r}")
    (rank,) = struct.unpack_from("<I", raw, 8)
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    off = 12 + 4 * rank
    n = int(np.prod(shape))
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
    if data.size != n:
        raise DataError(f"{path}: truncated data")
    return data.reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# generic float64 container (checkpoints, priors)


def write_container(path: str | Path, magic: bytes, meta: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    assert len(magic) == 8
    order = sorted(arrays)
    offset = 0
    index = {}
    blobs = []
    for name in order:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": CONTAINER_VERSION, "meta": meta, "arrays": index},
                        sort_keys=True).encode("utf-8")
    payload = magic + struct.pack("<IQ", CONTAINER_VERSION, len(header)) + header
    atomic_write_bytes(path, payload + b"".join(blobs))


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    raw = path.read_bytes()
    if raw[:8] != magic:
        raise DataError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for name, spec in header["arrays"].items():
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=base + spec["offset"])
        if data.size != n:
            raise DataError(f"{path}: truncated array {name}")
        arrays[name] = data.reshape(spec["shape"]).copy()
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# case directories


def save_case(directory: str | Path, case: Case) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    t = case.terrain
    write_grid(d / "terrain.wgrid", np.stack([t.elevation, t.grad_x, t.grad_y]))
    write_grid(d / "lr.wgrid", np.stack([case.lr.u, case.lr.v, case.lr.mask]))
    header = "rx,ry,h,u,v,w"
    rows = "\n".join(",".join(repr(float(v)) for v in row) for row in case.hr_points)
    atomic_write_text(d / "hr_points.csv", header + "\n" + rows + "\n")
    params = {
        "name": case.name,
        "direction_index": case.params.direction_index,
        "speed": case.params.speed,
        "shear": case.params.shear,
        "seed": case.params.seed,
        "terrain_seed": t.seed,
        "terrain_amplitude_m": t.amplitude_m,
        "resolution": t.resolution,
        "grad_scale": GRAD_SCALE,
        "z_top_m": Z_TOP_M,
        "domain_m": DOMAIN_M,
    }
    atomic_write_text(d / "params.json", json.dumps(params, indent=2, sort_keys=True) + "\n")


def load_case(directory: str | Path) -> Case:
    d = Path(directory)
    if not d.is_dir():
        raise MissingArtifactError(str(d))
    params = json.loads((d / "params.json").read_text())
    tgrid = read_grid(d / "terrain.wgrid")
    lrgrid = read_grid(d / "lr.wgrid")
    hr = np.loadtxt(d / "hr_points.csv", delimiter=",", skiprows=1, dtype=np.float64)
    hr = np.atleast_2d(hr)
    terrain = TerrainGrid(
        resolution=int(params["resolution"]),
        elevation=tgrid[0],
        grad_x=tgrid[1],
        grad_y=tgrid[2],
        seed=int(params["terrain_seed"]),
        amplitude_m=float(params["terrain_amplitude_m"]),
        field=None,
    )
    lr = LRGrid(lrgrid[0], lrgrid[1], lrgrid[2])
    wp = WindCaseParams(int(params["direction_index"]), float(params["speed"]),
                        float(params["shear"]), int(params["seed"]))
    return Case(params["name"], terrain, lr, hr, wp)


def list_case_dirs(data_dir: str | Path) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise MissingArtifactError(str(d))
    return sorted(p for p in d.iterdir() if p.is_dir() and (p / "params.json").exists())


# ---------------------------------------------------------------------------
# run manifests


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a string (case-seed derivation)."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def write_manifest(directory: str | Path, manifest: dict) -> None:
    atomic_write_text(Path(directory) / "manifest.json",
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(directory: str | Path) -> dict:
    p = Path(directory) / "manifest.json"
    if not p.exists():
        raise MissingArtifactError(str(p))
    return json.loads(p.read_text())
