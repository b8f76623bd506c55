"""Scene input/output: point clouds, images, cameras, canonical frames.

File formats
------------
* Point clouds: ASCII PLY with a ``vertex`` element carrying x, y, z.
  Coordinates are written with ``repr`` so a save/load round trip is
  bit-exact for float64.
* Images: binary PPM (P6, 8-bit) for previews, plus an ``.f32img``
  sidecar for exact metric computation. The sidecar is little-endian:
  u32 width, u32 height, then row-major RGB float32.
* Cameras: one pinhole camera per line in ``cameras.txt``
  (see `save_cameras`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PlyParseError(ValueError):
    """Malformed PLY content; message names the offending line number."""


class ImageFormatError(ValueError):
    """Malformed PPM / f32img content."""


# ----------------------------------------------------------------------
# point clouds


@dataclass
class PointCloud:
    positions: np.ndarray  # (n, 3) float64

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point cloud contains non-finite coordinates")

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def load_point_cloud(path) -> PointCloud:
    """Read an ASCII PLY, returning vertices in file order."""
    path = Path(path)
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()

    if not lines or lines[0].strip() != "ply":
        raise PlyParseError(f"{path}:1: expected 'ply' magic")

    elements: list[tuple[str, int]] = []  # (name, count) in header order
    props_by_element: dict[str, list[str]] = {}
    current = None
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise PlyParseError(f"{path}:{lineno}: only ascii PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyParseError(f"{path}:{lineno}: malformed element line")
            current = tok[1]
            try:
                elements.append((current, int(tok[2])))
            except ValueError:
                raise PlyParseError(f"{path}:{lineno}: bad element count") from None
            props_by_element[current] = []
        elif tok[0] == "property":
            if current is None:
                raise PlyParseError(f"{path}:{lineno}: property before element")
            props_by_element[current].append(tok[-1])
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise PlyParseError(f"{path}:{lineno}: unknown header keyword {tok[0]!r}")
    if header_end is None:
        raise PlyParseError(f"{path}: missing end_header")

    names = [name for name, _ in elements]
    if "vertex" not in names:
        raise PlyParseError(f"{path}: no vertex element in header")
    vprops = props_by_element["vertex"]
    try:
        xyz_cols = [vprops.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise PlyParseError(f"{path}: vertex element lacks x/y/z properties") from None

    # body lines appear in element order; skip the elements before vertex
    offset = header_end
    for name, count in elements:
        if name == "vertex":
            break
        offset += count
    _, vcount = elements[names.index("vertex")]

    out = np.empty((vcount, 3), dtype=np.float64)
    for i in range(vcount):
        lineno = offset + 1 + i
        if lineno - 1 >= len(lines):
            raise PlyParseError(f"{path}:{lineno}: unexpected end of file")
        tok = lines[lineno - 1].split()
        if len(tok) < len(vprops):
            raise PlyParseError(f"{path}:{lineno}: expected {len(vprops)} values")
        try:
            vals = [float(tok[c]) for c in xyz_cols]
        except ValueError:
            raise PlyParseError(f"{path}:{lineno}: non-numeric coordinate") from None
        if not all(np.isfinite(v) for v in vals):
            raise PlyParseError(f"{path}:{lineno}: non-finite coordinate")
        out[i] = vals
    return PointCloud(out)


def save_point_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    rows = []
    for x, y, z in cloud.positions:
        rows.append(f"{float(x)!r} {float(y)!r} {float(z)!r}")
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"element vertex {cloud.count}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "end_header\n"
    )
    path.write_text(header + "".join(r + "\n" for r in rows), encoding="ascii")


# ----------------------------------------------------------------------
# canonical frame


@dataclass
class CanonicalFrame:
    """Rigid-plus-scale map taking world points into [-1, 1]^3.

    canonical = rotation.T @ (world + translation) / scale, applied per axis.
    """

    rotation: np.ndarray  # (3, 3) orthonormal, columns = principal axes
    translation: np.ndarray  # (3,)
    scale: np.ndarray  # (3,) positive
    degenerate_axes: tuple = ()

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return ((p + self.translation) @ self.rotation) / self.scale

    def to_world(self, canon: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(np.asarray(canon, dtype=np.float64))
        return (c * self.scale) @ self.rotation.T - self.translation


def compute_canonical_frame(
    cloud: PointCloud, margin: float = 0.01, mode: str = "pca"
) -> CanonicalFrame:
    """Principal-axes frame of a cloud, scaled to [-1, 1]^3 with a margin.

    mode="pca" uses the covariance eigenbasis (columns ordered by
    descending eigenvalue, right-handed, first nonzero component of each
    axis positive). mode="scale" keeps the world axes and only centers
    and rescales. Axes with no extent get unit scale and are reported in
    `degenerate_axes`.
    """
    if cloud.count < 4:
        raise ValueError("canonical frame needs at least 4 points")
    pts = cloud.positions
    centroid = pts.mean(axis=0)
    centered = pts - centroid

    if mode == "scale":
        rot = np.eye(3)
    elif mode == "pca":
        cov = centered.T @ centered / cloud.count
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        rot = evecs[:, order]
        for a in range(3):
            col = rot[:, a]
            nz = np.flatnonzero(np.abs(col) > 1e-12)
            if nz.size and col[nz[0]] < 0:
                rot[:, a] = -col
        if np.linalg.det(rot) < 0:
            rot[:, 2] = -rot[:, 2]
    else:
        raise ValueError(f"unknown canonicalization mode {mode!r}")

    local = centered @ rot
    extent = np.max(np.abs(local), axis=0)
    largest = float(np.max(extent))
    if largest <= 1e-12:
        raise ValueError("degenerate cloud: all points coincident")
    degenerate = tuple(int(a) for a in range(3) if extent[a] <= 1e-12 * largest)
    scale = extent * (1.0 + margin)
    for a in degenerate:
        scale[a] = 1.0
    return CanonicalFrame(rot, -centroid, scale, degenerate)


def save_canonical_frame(path, frame: CanonicalFrame) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("rotation " + " ".join(repr(float(v)) for v in frame.rotation.ravel()) + "\n")
        fh.write("translation " + " ".join(repr(float(v)) for v in frame.translation) + "\n")
        fh.write("scale " + " ".join(repr(float(v)) for v in frame.scale) + "\n")
        fh.write("degenerate_axes " + " ".join(str(a) for a in frame.degenerate_axes) + "\n")


def load_canonical_frame(path) -> CanonicalFrame:
    kv = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tok = line.split()
        if tok:
            kv[tok[0]] = tok[1:]
    return CanonicalFrame(
        np.array([float(v) for v in kv["rotation"]]).reshape(3, 3),
        np.array([float(v) for v in kv["translation"]]),
        np.array([float(v) for v in kv["scale"]]),
        tuple(int(a) for a in kv.get("degenerate_axes", [])),
    )


# ----------------------------------------------------------------------
# cameras and rays


@dataclass
class Camera:
    """Ideal pinhole camera. Pose is world-to-camera; looks down -z."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    rotation: np.ndarray  # (3, 3) world->camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass
class RayBatch:
    """Per-pixel rays with unit directions plus optional target colors."""

    origins: np.ndarray  # (r, 3)
    directions: np.ndarray  # (r, 3) unit norm
    near: np.ndarray  # (r,)
    far: np.ndarray  # (r,)
    gt_colors: np.ndarray | None = None  # (r, 3) in [0, 1]

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.near = np.asarray(self.near, dtype=np.float64).reshape(-1)
        self.far = np.asarray(self.far, dtype=np.float64).reshape(-1)
        if self.gt_colors is not None:
            self.gt_colors = np.asarray(self.gt_colors, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.directions, axis=1)
        if self.count and np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("ray directions must be unit norm")
        if np.any(self.near >= self.far):
            raise ValueError("need near < far per ray")

    @property
    def count(self) -> int:
        return self.origins.shape[0]


def look_at_camera(
    eye, target, up, fov_deg: float, width: int, height: int, near: float, far: float
) -> Camera:
    """Camera at `eye` looking at `target`, vertical field of view fov_deg."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    xc = np.cross(fwd, np.asarray(up, dtype=np.float64))
    xc = xc / np.linalg.norm(xc)
    zc = -fwd
    yc = np.cross(zc, xc)
    r_c2w = np.stack([xc, yc, zc], axis=1)
    rot = r_c2w.T
    fy = 0.5 * height / np.tan(0.5 * np.deg2rad(fov_deg))
    return Camera(
        fx=fy,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        near=near,
        far=far,
        rotation=rot,
        translation=-rot @ eye,
    )


def generate_rays(camera: Camera, pixel_indices, gt_image: np.ndarray | None = None) -> RayBatch:
    """One ray per flat pixel index (row-major y*width + x), through pixel centers."""
    idx = np.asarray(pixel_indices, dtype=np.int64).reshape(-1)
    npix = camera.width * camera.height
    if idx.size and (idx.min() < 0 or idx.max() >= npix):
        raise IndexError(f"pixel index out of range [0, {npix})")
    px = (idx % camera.width).astype(np.float64) + 0.5
    py = (idx // camera.width).astype(np.float64) + 0.5
    d_cam = np.stack(
        [
            (px - camera.cx) / camera.fx,
            -(py - camera.cy) / camera.fy,
            -np.ones_like(px),
        ],
        axis=1,
    )
    d_world = d_cam @ camera.rotation  # rows: R^T @ d
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    gt = None
    if gt_image is not None:
        gt = gt_image.reshape(-1, 3)[idx]
    return RayBatch(
        origins=origins,
        directions=d_world,
        near=np.full(idx.shape, camera.near),
        far=np.full(idx.shape, camera.far),
        gt_colors=gt,
    )


def save_cameras(path, cameras: list[Camera]) -> None:
    """One camera per line: fx fy cx cy w h near far r00..r22 t0 t1 t2."""
    with open(path, "w", encoding="ascii") as fh:
        for cam in cameras:
            vals = [cam.fx, cam.fy, cam.cx, cam.cy, float(cam.width), float(cam.height),
                    cam.near, cam.far]
            vals += list(cam.rotation.ravel()) + list(cam.translation)
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_cameras(path) -> list[Camera]:
    cams = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tok = line.split()
        if not tok:
            continue
        v = [float(t) for t in tok]
        cams.append(
            Camera(
                fx=v[0], fy=v[1], cx=v[2], cy=v[3],
                width=int(v[4]), height=int(v[5]), near=v[6], far=v[7],
                rotation=np.array(v[8:17]).reshape(3, 3),
                translation=np.array(v[17:20]),
            )
        )
    return cams


# ----------------------------------------------------------------------
# images


@dataclass
class Image:
    pixels: np.ndarray  # (h, w, 3) float64 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) pixels, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel components must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """Round-half-up quantization of [0, 1] floats to 8-bit."""
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(path, image: Image) -> None:
    """Write .ppm (P6 8-bit) or .f32img (exact float sidecar) by extension."""
    path = Path(path)
    if path.suffix == ".ppm":
        payload = quantize_u8(image.pixels).tobytes()
        with open(path, "wb") as fh:
            fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
            fh.write(payload)
    elif path.suffix == ".f32img":
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", image.width, image.height))
            fh.write(image.pixels.astype("<f4").tobytes())
    else:
        raise ImageFormatError(f"unsupported image extension {path.suffix!r}")


def load_image(path) -> Image:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".ppm":
        parts = data.split(maxsplit=4)
        if len(parts) < 5 or parts[0] != b"P6":
            raise ImageFormatError(f"{path}: not a binary P6 PPM")
        try:
            w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError:
            raise ImageFormatError(f"{path}: malformed PPM header") from None
        if maxval != 255:
            raise ImageFormatError(f"{path}: only maxval 255 supported")
        raw = parts[4][: w * h * 3]
        if len(raw) != w * h * 3:
            raise ImageFormatError(f"{path}: truncated PPM payload")
        px = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) / 255.0
        return Image(px)
    if path.suffix == ".f32img":
        if len(data) < 8:
            raise ImageFormatError(f"{path}: truncated f32img header")
        w, h = struct.unpack("<II", data[:8])
        need = 8 + w * h * 3 * 4
        if len(data) != need:
            raise ImageFormatError(f"{path}: expected {need} bytes, got {len(data)}")
        px = np.frombuffer(data[8:], dtype="<f4").astype(np.float64).reshape(h, w, 3)
        return Image(px)
    raise ImageFormatError(f"unsupported image extension {path.suffix!r}")
