"""Datasets on disk and the synthetic deforming-sphere generator.

Layout of a dataset directory::

    scene.json            metadata (units, frame rate, generator settings)
    cameras.json          {"frames": [{"K", "R", "t", "width", "height"}, ...]}
    frames/0000.png       RGB images
    masks/0000.png        subject masks (0 / 255)
    surface/0000.ply      per-frame vertices with normals, fixed vertex order
    canonical.ply         the frame-0 template

Matrices in ``cameras.json`` are row-major nested lists; ``R``/``t`` map world
to camera coordinates.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from selfnerf.errors import (
    CameraError,
    ConfigError,
    DatasetError,
    MaskError,
    MissingFileError,
    SizeMismatchError,
    VertexCountMismatchError,
)
from selfnerf.surface_relative import CanonicalSurface, SurfaceFrame
from selfnerf.volume_renderer import Camera, generate_rays, pixel_grid

log = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5


# --------------------------------------------------------------------------
# PLY


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, points, normals, binary: bool = True):
    """Vertex-only PLY with ``x y z nx ny nz`` as doubles."""
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(points)}\n"
        + "".join(f"property double {name}\n" for name in ("x", "y", "z", "nx", "ny", "nz"))
        + "end_header\n"
    )
    data = np.concatenate([points, normals], axis=1)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(data.astype("<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_ply(path):
    """Read vertex positions and normals from an ASCII or binary PLY.

    Returns ``(points, normals)``; ``normals`` is None when absent.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements = []  # [name, count, [(prop, dtype)]]
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], None))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise DatasetError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if any(dt is None for _, dt in props):
        raise DatasetError(f"{path}: list properties on vertices are not supported")
    names = [name for name, _ in props]
    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii").split("\n")[:count]
        table = np.array([[float(v) for v in ln.split()[: len(names)]] for ln in lines], dtype=np.float64)
        cols = {name: table[:, i] for i, name in enumerate(names)}
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(name, order + dt) for name, dt in props])
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        cols = {name: rec[name].astype(np.float64) for name in names}
    else:
        raise DatasetError(f"{path}: unsupported PLY format {fmt!r}")
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(n in cols for n in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return points, normals


# --------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask_values(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    Image.fromarray(image).save(path)


def write_raw_float(path, image):
    """Header of three little-endian uint32 (width, height, channels), then float32 LE pixels row-major."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(np.array([w, h, c], dtype="<u4").tobytes())
        fh.write(image.astype("<f4").tobytes())


def read_raw_float(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, c = np.frombuffer(raw, dtype="<u4", count=3)
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, c).astype(np.float64)


# --------------------------------------------------------------------------
# dataset


class BBox(NamedTuple):
    """Inclusive pixel rectangle; x is the column, y the row."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self):
        return self.x1 - self.x0 + 1

    @property
    def height(self):
        return self.y1 - self.y0 + 1

    def crop(self, image):
        return image[self.y0:self.y1 + 1, self.x0:self.x1 + 1]


def mask_bbox(mask) -> BBox:
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise MaskError("mask is empty")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    camera: Camera
    surface: SurfaceFrame


@dataclass
class Dataset:
    frames: list[Frame]
    canonical: CanonicalSurface
    metadata: dict = field(default_factory=dict)
    path: Path | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def surfaces(self):
        return [f.surface for f in self.frames]

    @property
    def image_size(self):
        h, w = self.frames[0].mask.shape
        return w, h


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    return path


def _unit_normals(normals, where):
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(lengths == 0):
        raise DatasetError(f"{where}: zero-length normal")
    if np.max(np.abs(lengths - 1.0)) > 1e-6:
        warnings.warn(f"{where}: renormalizing non-unit normals", stacklevel=3)
    return normals / lengths


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory (see module docstring)."""
    root = Path(path)
    if not root.is_dir():
        raise MissingFileError(f"dataset directory not found: {root}")
    metadata = {}
    if (root / "scene.json").is_file():
        metadata = json.loads((root / "scene.json").read_text())
    cams = json.loads(_require(root / "cameras.json").read_text())["frames"]
    if not cams:
        raise DatasetError("cameras.json lists no frames")
    cpts, cnrm = read_ply(_require(root / "canonical.ply"))
    canonical = CanonicalSurface(cpts)
    n_vert = len(cpts)
    frames = []
    size = None
    for t, cam_dict in enumerate(cams):
        try:
            camera = Camera.from_dict(cam_dict)
        except CameraError as exc:
            raise CameraError(f"{exc} at frame {t}") from None
        image = read_image(_require(root / "frames" / f"{t:04d}.png"))
        values = read_mask_values(_require(root / "masks" / f"{t:04d}.png"))
        if size is None:
            size = image.shape[:2]
        if image.shape[:2] != size:
            raise SizeMismatchError(f"image size mismatch at frame {t}: {image.shape[:2]} vs {size}")
        if values.shape != size:
            raise SizeMismatchError(f"mask size mismatch at frame {t}")
        if (camera.height, camera.width) != size:
            raise SizeMismatchError(f"camera image size mismatch at frame {t}")
        if not np.all((values == 0.0) | (values == 1.0)):
            warnings.warn(f"frame {t}: non-binary mask binarized at {MASK_THRESHOLD}", stacklevel=2)
        mask = values >= MASK_THRESHOLD
        if not mask.any():
            raise MaskError(f"empty mask at frame {t}")
        pts, nrm = read_ply(_require(root / "surface" / f"{t:04d}.ply"))
        if len(pts) != n_vert:
            raise VertexCountMismatchError(f"vertex-count mismatch at frame {t}: {len(pts)} vs {n_vert}")
        if nrm is None:
            raise DatasetError(f"surface at frame {t} has no normals")
        surface = SurfaceFrame(pts, _unit_normals(nrm, f"frame {t}"), t)
        frames.append(Frame(image, mask, camera, surface))
    return Dataset(frames, canonical, metadata, root)


# --------------------------------------------------------------------------
# synthetic scene


def icosphere(subdivisions: int = 4):
    """Unit icosphere vertices; ``10 * 4**s + 2`` of them, deterministic order."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    width: int = 96
    height: int = 96
    n_frames: int = 10
    radius: float = 0.35
    amplitude: float = 0.15
    texture: str = "checker"  # or "gradient"
    checker_cells: tuple[int, int] = (8, 4)
    orbit_radius: float = 3.0
    orbit_elevation_deg: float = 15.0
    orbit_span_deg: float = 324.0  # 360 * (n - 1) / n for 10 frames
    focal_scale: float = 1.8  # focal length in units of image width
    noise: float = 0.0
    subdivisions: int = 4
    frame_rate: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1 or self.width < 1 or self.height < 1:
            raise ConfigError("synthetic scene needs positive sizes")
        if self.radius <= 0.0:
            raise ConfigError("radius must be positive")
        if not 0.0 <= self.amplitude < 1.0:
            raise ConfigError("deformation amplitude must be in [0, 1) to stay star-shaped")
        if self.radius * (1.0 + self.amplitude) >= 0.5:
            raise ConfigError("deformed sphere must fit in the unit box")
        if self.texture not in ("checker", "gradient"):
            raise ConfigError(f"unknown texture {self.texture!r}")


class SyntheticOracle:
    """Analytic renderer of a textured sphere under per-frame linear deformation.

    Frame ``t`` maps the unit sphere by ``A_t = radius * diag(s_t)`` with
    ``s_t`` oscillating per axis; the surface stays an ellipsoid, so ray
    intersections are exact roots of a quadratic. Texture is attached to the
    undeformed sphere direction, so it moves with the surface.
    """

    def __init__(self, config: SyntheticSceneConfig):
        self.config = config
        self.unit_vertices, self.faces = icosphere(config.subdivisions)

    def scales(self, t: int) -> np.ndarray:
        c = self.config
        phase = 2.0 * math.pi * t / max(c.n_frames, 1)
        offsets = np.array([0.0, 2.0, 4.0]) * math.pi / 3.0
        return 1.0 + c.amplitude * np.sin(phase + offsets)

    def matrix(self, t: int) -> np.ndarray:
        return self.config.radius * np.diag(self.scales(t))

    def surface(self, t: int) -> SurfaceFrame:
        a = self.matrix(t)
        pts = self.unit_vertices @ a.T
        nrm = self.unit_vertices @ np.linalg.inv(a)  # A^{-T} n for row vectors
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return SurfaceFrame(pts, nrm, t)

    def deform(self, canonical_points, t: int) -> np.ndarray:
        """Position at frame ``t`` of the surface-attached points given at frame 0."""
        m = self.matrix(t) @ np.linalg.inv(self.matrix(0))
        return np.asarray(canonical_points, dtype=np.float64) @ m.T

    def camera(self, angle_deg: float) -> Camera:
        c = self.config
        az, el = math.radians(angle_deg), math.radians(c.orbit_elevation_deg)
        eye = c.orbit_radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        f = c.focal_scale * c.width
        K = np.array([[f, 0.0, c.width / 2.0], [0.0, f, c.height / 2.0], [0.0, 0.0, 1.0]])
        return Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), K, c.width, c.height)

    def frame_angle(self, t: float) -> float:
        c = self.config
        return c.orbit_span_deg * t / max(c.n_frames - 1, 1)

    def training_camera(self, t: int) -> Camera:
        return self.camera(self.frame_angle(t))

    def heldout_camera(self, t: int) -> Camera:
        """Orbit pose halfway between frame ``t``'s camera and the next one."""
        return self.camera(self.frame_angle(t + 0.5))

    def albedo(self, dirs) -> np.ndarray:
        """Texture color of unit directions on the undeformed sphere."""
        c = self.config
        base = 0.5 + 0.35 * dirs
        if c.texture == "gradient":
            return np.clip(base, 0.0, 1.0)
        u = np.arctan2(dirs[:, 0], dirs[:, 2]) / (2.0 * math.pi) + 0.5
        v = np.arccos(np.clip(dirs[:, 1], -1.0, 1.0)) / math.pi
        cu, cv = c.checker_cells
        check = (np.floor(u * cu).astype(int) + np.floor(v * cv).astype(int)) % 2
        return np.clip(base * np.where(check == 1, 1.0, 0.45)[:, None], 0.0, 1.0)

    def render(self, camera: Camera, t: int):
        """Exact render at pixel centers: ``(image (H, W, 3), mask (H, W))``, black background."""
        pix = pixel_grid(camera.width, camera.height)
        o, v = generate_rays(camera, pix)
        inv = np.linalg.inv(self.matrix(t))
        oc, vc = o @ inv.T, v @ inv.T
        a = np.sum(vc * vc, axis=1)
        b = 2.0 * np.sum(oc * vc, axis=1)
        cc = np.sum(oc * oc, axis=1) - 1.0
        disc = b * b - 4.0 * a * cc
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        u = (-b - sq) / (2.0 * a)
        hit &= u > 0.0
        image = np.zeros((len(pix), 3))
        y = oc[hit] + u[hit, None] * vc[hit]
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        image[hit] = self.albedo(y)
        return image.reshape(camera.height, camera.width, 3), hit.reshape(camera.height, camera.width)

    def training_image(self, t: int) -> np.ndarray:
        """The 8-bit image stored for frame ``t``, noise included."""
        image, _ = self.render(self.training_camera(t), t)
        if self.config.noise > 0.0:
            rng = np.random.default_rng([self.config.seed, t])
            image = image + rng.normal(0.0, self.config.noise, size=image.shape)
        return to_uint8(image)


def synthesize_scene(config: SyntheticSceneConfig, out_path) -> SyntheticOracle:
    """Write a synthetic dataset to ``out_path`` and return its oracle."""
    oracle = SyntheticOracle(config)
    root = Path(out_path)
    for sub in ("frames", "masks", "surface"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cams = []
    for t in range(config.n_frames):
        camera = oracle.training_camera(t)
        _, mask = oracle.render(camera, t)
        write_png(root / "frames" / f"{t:04d}.png", oracle.training_image(t))
        write_png(root / "masks" / f"{t:04d}.png", mask.astype(np.uint8) * 255)
        surf = oracle.surface(t)
        write_ply(root / "surface" / f"{t:04d}.ply", surf.points, surf.normals)
        cams.append(camera.to_dict())
    canon = oracle.surface(0)
    write_ply(root / "canonical.ply", canon.points, canon.normals)
    (root / "cameras.json").write_text(json.dumps({"frames": cams}, indent=1))
    meta = {"units": "scene units (unit box at origin)", "frame_rate": config.frame_rate,
            "synthetic": asdict(config)}
    (root / "scene.json").write_text(json.dumps(meta, indent=1))
    return oracle


def oracle_from_dataset(dataset: Dataset) -> SyntheticOracle:
    """Rebuild the oracle of a generated dataset from its stored settings."""
    settings = dict(dataset.metadata.get("synthetic") or {})
    if not settings:
        raise DatasetError("dataset was not produced by the synthetic generator")
    settings["checker_cells"] = tuple(settings["checker_cells"])
    return SyntheticOracle(SyntheticSceneConfig(**settings))
