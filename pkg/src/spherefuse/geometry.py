"""Spherical / equirectangular / perspective coordinate math.

All pipelines operate on equirectangular (ERP) canvases and gnomonic
perspective views of the unit sphere. This module is the single owner of
the coordinate conventions; everything else builds on it.

COORDINATE CONVENTIONS
======================
ERP canvas (width W = 2 * height H):
  - continuous pixel coords (u, v) with u in [0, W], v in [0, H]
  - u = 0 maps to lon = -pi, u = W maps to lon = +pi (same meridian)
  - v = 0 maps to lat = +pi/2 (north pole), v = H to lat = -pi/2
  - integer pixel (i, j) covers [i, i+1) x [j, j+1), center (i+0.5, j+0.5)

Sphere:
  - lon in [-pi, pi), lat in [-pi/2, pi/2]
  - unit vector: x = cos(lat) cos(lon), y = cos(lat) sin(lon), z = sin(lat)

Perspective view (square, gnomonic projection):
  - continuous pixel coords (x, y) in [0, S] x [0, S], optical center at
    (S/2, S/2)
  - +x is the direction of increasing lon at the camera axis, +y is DOWN
    in the image (decreasing lat at roll = 0), matching the ERP row order
  - focal length f = (S/2) / tan(fov/2), so the horizontal field of view
    spans exactly [0, S] at the equator of the view

All functions are pure; arrays are never modified in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class ErpGrid:
    """Equirectangular canvas dimensions (width must be twice the height)."""

    width: int = 1024
    height: int = 512

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        if self.width != 2 * self.height:
            raise ValueError(f"ERP grid requires width == 2*height, got {self.width}x{self.height}")


@dataclass(frozen=True)
class CameraPose:
    """Perspective camera on the unit sphere: axis direction, roll and FoV."""

    lon: float
    lat: float
    roll: float
    fov: float
    image_size: int

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise ValueError(f"fov must be in (0, pi), got {self.fov}")
        if self.image_size <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")

    @property
    def focal(self) -> float:
        return (self.image_size / 2.0) / math.tan(self.fov / 2.0)


def pose_to_json(pose: CameraPose) -> dict:
    """Serialize a pose to the degree-based JSON record format."""
    return {
        "lon_deg": math.degrees(pose.lon),
        "lat_deg": math.degrees(pose.lat),
        "roll_deg": math.degrees(pose.roll),
        "fov_deg": math.degrees(pose.fov),
        "size": pose.image_size,
    }


def pose_from_json(record: dict) -> CameraPose:
    return CameraPose(
        lon=math.radians(record["lon_deg"]),
        lat=math.radians(record["lat_deg"]),
        roll=math.radians(record["roll_deg"]),
        fov=math.radians(record["fov_deg"]),
        image_size=int(record["size"]),
    )


# ---------------------------------------------------------------------------
# ERP <-> spherical


def erp_to_spherical(u, v, grid: ErpGrid):
    """Map continuous ERP pixel coords to (lon, lat).

    lon = 2*pi*u/W - pi, lat = pi/2 - pi*v/H. Inputs may be scalars or
    arrays; out-of-range inputs raise ValueError.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u > grid.width) or np.any(v < 0) or np.any(v > grid.height):
        raise ValueError("ERP pixel coordinates out of range")
    lon = 2.0 * np.pi * u / grid.width - np.pi
    lat = np.pi / 2.0 - np.pi * v / grid.height
    return lon, lat


def spherical_to_erp(lon, lat, grid: ErpGrid):
    """Inverse of erp_to_spherical: (lon, lat) to continuous (u, v)."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    u = (lon + np.pi) * grid.width / (2.0 * np.pi)
    v = (np.pi / 2.0 - lat) * grid.height / np.pi
    return u, v


def _unit_vector(lon, lat):
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def _camera_basis(cam: CameraPose):
    """Orthonormal (axis, east, north) triad of the camera axis point."""
    cl0, sl0 = math.cos(cam.lat), math.sin(cam.lat)
    co0, so0 = math.cos(cam.lon), math.sin(cam.lon)
    axis = np.array([cl0 * co0, cl0 * so0, sl0])
    east = np.array([-so0, co0, 0.0])
    north = np.array([-sl0 * co0, -sl0 * so0, cl0])
    return axis, east, north


# ---------------------------------------------------------------------------
# Gnomonic projection


def gnomonic_project(lon, lat, cam: CameraPose):
    """Project spherical coords into the camera's pixel plane.

    Returns (x, y, visible). For a point at angular distance >= 90 deg
    from the camera axis (k <= 0) the projection does not exist; such
    points are flagged visible == False and their coords are NaN.

    The tangent-plane coords are X = cos(lat) sin(lon-lon0) / k and
    Y = (cos(lat0) sin(lat) - sin(lat0) cos(lat) cos(lon-lon0)) / k with
    k = sin(lat0) sin(lat) + cos(lat0) cos(lat) cos(lon-lon0), expressed
    below as dot products with the camera triad (identical algebra).
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    axis, east, north = _camera_basis(cam)
    p = _unit_vector(lon, lat)
    k = p @ axis
    visible = k > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(visible, (p @ east) / k, np.nan)
        ty = np.where(visible, (p @ north) / k, np.nan)
    cr, sr = math.cos(cam.roll), math.sin(cam.roll)
    xr = tx * cr + ty * sr
    yr = -tx * sr + ty * cr
    half = cam.image_size / 2.0
    x = half + cam.focal * xr
    y = half - cam.focal * yr
    return x, y, visible


def gnomonic_unproject(x, y, cam: CameraPose):
    """Inverse of gnomonic_project on the visible hemisphere.

    Accepts continuous perspective pixel coords, returns (lon, lat) with
    lon wrapped to [-pi, pi).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    half = cam.image_size / 2.0
    xr = (x - half) / cam.focal
    yr = (half - y) / cam.focal
    cr, sr = math.cos(cam.roll), math.sin(cam.roll)
    tx = xr * cr - yr * sr
    ty = xr * sr + yr * cr
    axis, east, north = _camera_basis(cam)
    p = axis + tx[..., None] * east + ty[..., None] * north
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    lon = np.arctan2(p[..., 1], p[..., 0])
    lat = np.arcsin(np.clip(p[..., 2], -1.0, 1.0))
    lon = np.where(lon >= np.pi, lon - 2.0 * np.pi, lon)
    return lon, lat


# ---------------------------------------------------------------------------
# Resampling between ERP and perspective grids


def _persp_pixel_centers(cam: CameraPose):
    s = cam.image_size
    xs = np.arange(s, dtype=np.float64) + 0.5
    ys = np.arange(s, dtype=np.float64) + 0.5
    return np.meshgrid(xs, ys)


def _erp_nn_index(lon, lat, grid: ErpGrid):
    """Nearest-neighbor ERP pixel index for spherical coords (wraps in u)."""
    u, v = spherical_to_erp(lon, lat, grid)
    iu = np.floor(u).astype(np.int64) % grid.width
    iv = np.clip(np.floor(v).astype(np.int64), 0, grid.height - 1)
    return iu, iv


def sample_erp_to_persp(values: np.ndarray, cam: CameraPose, grid: ErpGrid | None = None) -> np.ndarray:
    """Resample an ERP array into a perspective view (nearest neighbor).

    `values` is (H, W) or (C, H, W); returns the same leading channels at
    (S, S) / (C, S, S). Every perspective pixel is covered (a camera sees
    at most a hemisphere, and its own axis always projects).
    """
    if grid is None:
        h, w = values.shape[-2], values.shape[-1]
        grid = ErpGrid(width=w, height=h)
    px, py = _persp_pixel_centers(cam)
    lon, lat = gnomonic_unproject(px, py, cam)
    iu, iv = _erp_nn_index(lon, lat, grid)
    return values[..., iv, iu]


def project_mask_erp_to_persp(mask: np.ndarray, cam: CameraPose) -> np.ndarray:
    """Project a binary ERP mask into a perspective view (nearest neighbor)."""
    out = sample_erp_to_persp(mask.astype(np.uint8), cam)
    return (out > 0).astype(np.uint8)


def erp_projection_lookup(cam: CameraPose, grid: ErpGrid):
    """Project every ERP pixel center into the view.

    Returns (x, y, inside) arrays of shape (H, W); `inside` is True where
    the projection exists and lands within [0, S] x [0, S].
    """
    us = np.arange(grid.width, dtype=np.float64) + 0.5
    vs = np.arange(grid.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(us, vs)
    lon, lat = erp_to_spherical(uu, vv, grid)
    x, y, visible = gnomonic_project(lon, lat, cam)
    s = cam.image_size
    inside = visible & (x >= 0) & (x <= s) & (y >= 0) & (y <= s)
    return x, y, inside


def camera_footprint(cam: CameraPose, grid: ErpGrid) -> np.ndarray:
    """Binary ERP mask of the pixels whose centers fall inside the view."""
    _, _, inside = erp_projection_lookup(cam, grid)
    return inside.astype(np.uint8)


def warp_persp_to_erp(values: np.ndarray, cam: CameraPose, grid: ErpGrid):
    """Resample a perspective array onto the ERP grid (nearest neighbor).

    Returns (warped, inside): `warped` holds view samples where `inside`
    is True and zeros elsewhere.
    """
    x, y, inside = erp_projection_lookup(cam, grid)
    s = cam.image_size
    ix = np.clip(np.floor(np.where(inside, x, 0.0)).astype(np.int64), 0, s - 1)
    iy = np.clip(np.floor(np.where(inside, y, 0.0)).astype(np.int64), 0, s - 1)
    warped = np.where(inside, values[..., iy, ix], 0.0)
    return warped, inside


def mask_bbox(mask: np.ndarray):
    """Tight (x0, y0, x1, y1) index bbox of a nonempty binary mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask is empty, no bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def reproject_bbox_to_erp(persp_mask: np.ndarray, cam: CameraPose, grid: ErpGrid) -> np.ndarray:
    """Rasterize the bbox of a perspective mask back onto the ERP grid.

    Every ERP pixel center is projected into the view and tested against
    the box; the box spans the full extent of its boundary pixels, i.e.
    continuous [x0, x1+1) x [y0, y1+1).
    """
    x0, y0, x1, y1 = mask_bbox(persp_mask)
    x, y, visible = gnomonic_project(*_erp_center_sphericals(grid), cam)
    inside = visible & (x >= x0) & (x < x1 + 1) & (y >= y0) & (y < y1 + 1)
    return inside.astype(np.uint8)


def _erp_center_sphericals(grid: ErpGrid):
    us = np.arange(grid.width, dtype=np.float64) + 0.5
    vs = np.arange(grid.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(us, vs)
    return erp_to_spherical(uu, vv, grid)


# ---------------------------------------------------------------------------
# Icosahedron camera tessellation

# Latitude of the upper vertex ring of a vertex-at-pole icosahedron.
_ICO_RING_LAT = math.atan(0.5)


def icosahedron_face_centers() -> np.ndarray:
    """Unit axis vectors of the 20 face centers, poles at two vertices.

    Vertices: north pole, an upper ring of 5 at lat = atan(1/2)
    (lon = 0, 72, ...), a lower ring of 5 at -atan(1/2) (lon = 36, 108,
    ...), south pole. Face centers are the normalized vertex means.
    """
    north = np.array([0.0, 0.0, 1.0])
    south = -north
    upper = _unit_vector(
        np.deg2rad(np.arange(5) * 72.0), np.full(5, _ICO_RING_LAT)
    )
    lower = _unit_vector(
        np.deg2rad(np.arange(5) * 72.0 + 36.0), np.full(5, -_ICO_RING_LAT)
    )
    faces = []
    for i in range(5):
        j = (i + 1) % 5
        faces.append(north + upper[i] + upper[j])
        faces.append(upper[i] + upper[j] + lower[i])
        faces.append(upper[j] + lower[i] + lower[j])
        faces.append(south + lower[i] + lower[j])
    centers = np.array(faces)
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def icosahedron_cameras(fov: float, image_size: int = 512) -> list[CameraPose]:
    """20 cameras at the face centers of a regular icosahedron, roll 0.

    Ordered by descending latitude, then longitude, for a stable view
    indexing across runs.
    """
    centers = icosahedron_face_centers()
    lon = np.arctan2(centers[:, 1], centers[:, 0])
    lat = np.arcsin(np.clip(centers[:, 2], -1.0, 1.0))
    order = np.lexsort((np.round(lon, 12), -np.round(lat, 12)))
    return [
        CameraPose(lon=float(lon[i]), lat=float(lat[i]), roll=0.0, fov=fov, image_size=image_size)
        for i in order
    ]


# ---------------------------------------------------------------------------
# Cyclic column operations


def yaw_to_columns(yaw: float, width: int) -> int:
    """Quantize a yaw angle to whole ERP columns."""
    return int(round(yaw / (2.0 * math.pi) * width))


def columns_to_yaw(cols: int, width: int) -> float:
    return 2.0 * math.pi * cols / width


def roll_erp(array: np.ndarray, yaw: float) -> np.ndarray:
    """Horizontal circular shift by round(yaw / 2pi * width) columns.

    Content at longitude L moves to L + yaw. Works for (H, W) and
    (C, H, W) arrays; exact inverse is roll_erp(-, -yaw).
    """
    width = array.shape[-1]
    return np.roll(array, yaw_to_columns(yaw, width), axis=-1)


def extend_cyclic(array: np.ndarray, pad: int) -> np.ndarray:
    """Widen an ERP-periodic array by copying `pad` columns from each side."""
    width = array.shape[-1]
    if pad < 0 or pad > width:
        raise ValueError(f"pad must be in [0, width], got {pad} for width {width}")
    if pad == 0:
        return array.copy()
    return np.concatenate([array[..., width - pad :], array, array[..., :pad]], axis=-1)


def fold_cyclic(values: np.ndarray, pad: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Fold a padded accumulation back onto the cyclic canvas.

    Column u of the padded array contributes to column (u - pad) mod W of
    the output; values (and weights, default 1 per column) are summed and
    the sum divided by the folded weight.
    """
    padded_w = values.shape[-1]
    width = padded_w - 2 * pad
    if width <= 0:
        raise ValueError(f"pad {pad} too large for padded width {padded_w}")
    if weights is None:
        weights = np.ones(values.shape, dtype=values.dtype)
    vsum = np.zeros(values.shape[:-1] + (width,), dtype=np.float64)
    wsum = np.zeros(weights.shape[:-1] + (width,), dtype=np.float64)
    for u in range(padded_w):
        dst = (u - pad) % width
        vsum[..., dst] += values[..., u]
        wsum[..., dst] += weights[..., u]
    if np.any(wsum == 0):
        raise ValueError("folded column has zero accumulated weight")
    return (vsum / wsum).astype(values.dtype)


# ---------------------------------------------------------------------------
# Mask PNG I/O (8-bit grayscale, 0 = background, 255 = foreground)


def load_mask_png(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    arr = np.asarray(img)
    return (arr > 127).astype(np.uint8)


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path)
