"""Depth rasters: denoising, clipping, boundary corruption, back-projection, PGM I/O.

Depth is stored as 16-bit millimetres with 0 marking an invalid pixel.
Rows index ``v`` (image y, downward) and columns index ``u``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import BundleError
from .geometry import PointCloud, Pose
from .serialize import read_json, write_json

DEFAULT_INTRINSICS = (570.0, 570.0, 319.5, 239.5)
DEFAULT_DIMS = (640, 480)  # width, height
COMMON_INTERVAL = (1, 65535)


@dataclass(frozen=True, eq=False)
class DepthImage:
    data: np.ndarray
    intrinsics: tuple = DEFAULT_INTRINSICS

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError("depth data must be a 2D raster")
        if arr.dtype != np.uint16:
            if np.any(arr < 0) or np.any(arr > 65535):
                raise ValueError("depth values must fit in 16 bits")
            arr = np.rint(arr).astype(np.uint16)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        intr = tuple(float(v) for v in self.intrinsics)
        if len(intr) != 4:
            raise ValueError("intrinsics are (fx, fy, cx, cy)")
        object.__setattr__(self, "intrinsics", intr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0

    def __eq__(self, other):
        return (isinstance(other, DepthImage) and self.intrinsics == other.intrinsics
                and np.array_equal(self.data, other.data))

    def replace(self, data) -> DepthImage:
        return DepthImage(data, self.intrinsics)


def _median_valid(values: np.ndarray, k: int) -> np.ndarray:
    """Median over the finite entries of each k x k window (NaN = invalid)."""
    r = k // 2
    padded = np.pad(values, r, constant_values=np.nan)
    out = np.full(values.shape, np.nan)
    windows = sliding_window_view(padded, (k, k))
    for row in range(values.shape[0]):
        win = windows[row].reshape(values.shape[1], k * k)
        win = np.where(np.isnan(win), np.inf, win)
        win.sort(axis=1)
        count = np.isfinite(win).sum(axis=1)
        ok = count > 0
        lo = np.clip((count - 1) // 2, 0, k * k - 1)
        hi = np.clip(count // 2, 0, k * k - 1)
        idx = np.arange(win.shape[0])
        med = 0.5 * (win[idx, lo] + win[idx, hi])
        out[row] = np.where(ok, med, np.nan)
    return out


def denoise(frames, crop_margin: int = 4, median_kernel: int = 5) -> DepthImage:
    """Temporal averaging, then boundary cropping, then median filtering."""
    frames = list(frames)
    if not frames:
        raise ValueError("denoise needs at least one frame")
    shape, intr = frames[0].data.shape, frames[0].intrinsics
    if any(f.data.shape != shape or f.intrinsics != intr for f in frames):
        raise ValueError("frames differ in dimensions or intrinsics")
    if median_kernel < 1 or median_kernel % 2 == 0:
        raise ValueError("median kernel must be odd and >= 1")
    if crop_margin < 0:
        raise ValueError("crop margin must be >= 0")
    stack = np.stack([f.data.astype(float) for f in frames])
    valid = stack > 0
    count = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, (stack * valid).sum(axis=0) / np.maximum(count, 1), np.nan)
    keep = np.ones(shape, dtype=bool)
    if crop_margin:
        keep[:crop_margin] = keep[-crop_margin:] = False
        keep[:, :crop_margin] = keep[:, -crop_margin:] = False
    mean = np.where(keep, mean, np.nan)
    if median_kernel > 1:
        mean = _median_valid(mean, median_kernel)
    out = np.where(keep & np.isfinite(mean), np.rint(np.nan_to_num(mean)), 0)
    return DepthImage(np.clip(out, 0, 65535).astype(np.uint16), intr)


def clip(img: DepthImage, near: float, far: float) -> DepthImage:
    """Invalidate depths outside ``[near, far]`` millimetres."""
    if not 0 < near < far:
        raise ValueError("clip interval needs 0 < near < far")
    d = img.data
    return img.replace(np.where((d >= near) & (d <= far), d, 0).astype(np.uint16))


def clip_and_scale(img: DepthImage, near: float, far: float,
                   interval=COMMON_INTERVAL) -> DepthImage:
    """Clip to ``[near, far]`` and map that range affinely onto ``interval``."""
    if not 0 < near < far:
        raise ValueError("clip interval needs 0 < near < far")
    lo, hi = interval
    if not 0 < lo < hi <= 65535:
        raise ValueError("common interval must lie in (0, 65535]")
    d = img.data.astype(float)
    inside = (d >= near) & (d <= far)
    scaled = lo + (d - near) * (hi - lo) / (far - near)
    return img.replace(np.where(inside, np.rint(scaled), 0).astype(np.uint16))


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return (x * x + y * y) <= r * r


def boundary_mask(labels) -> np.ndarray:
    """Pixels whose 4-neighbourhood contains a different label."""
    lab = np.asarray(labels)
    b = np.zeros(lab.shape, dtype=bool)
    dv = lab[1:] != lab[:-1]
    dh = lab[:, 1:] != lab[:, :-1]
    b[1:] |= dv
    b[:-1] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def boundary_band(labels, dilate_radius: int = 3) -> np.ndarray:
    b = boundary_mask(labels)
    if dilate_radius > 0 and b.any():
        b = ndimage.binary_dilation(b, structure=_disk(dilate_radius))
    return b


def corrupt(img: DepthImage, labels, dilate_radius: int = 3, brush_radius: int = 4,
            bins: int = 16) -> DepthImage:
    """Oil-paint the dilated instance-boundary band of a depth image.

    Bins split the image's valid depth range into ``bins`` equal intervals.
    Each band pixel takes the mean depth of the most populated bin among the
    valid pixels of its disk neighbourhood (lowest bin wins ties).
    """
    labels = np.asarray(labels)
    if labels.shape != img.data.shape:
        raise ValueError("label raster and depth image differ in size")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    band = boundary_band(labels, dilate_radius)
    d = img.data.astype(float)
    valid = d > 0
    if not band.any() or not valid.any():
        return img
    lo, hi = d[valid].min(), d[valid].max()
    width = (hi - lo) / bins if hi > lo else 1.0
    idx = np.where(valid, np.minimum(((d - lo) / width).astype(int), bins - 1), -1)
    fp = _disk(brush_radius).astype(float)
    # only the band is painted, so work on its bounding box plus the brush reach
    rows, cols = np.nonzero(band)
    r0, r1 = max(rows.min() - brush_radius, 0), min(rows.max() + brush_radius + 1, d.shape[0])
    c0, c1 = max(cols.min() - brush_radius, 0), min(cols.max() + brush_radius + 1, d.shape[1])
    sd, sidx = d[r0:r1, c0:c1], idx[r0:r1, c0:c1]
    best_count = np.zeros(sd.shape)
    best_sum = np.zeros(sd.shape)
    for k in range(bins):
        ind = (sidx == k).astype(float)
        if not ind.any():
            continue
        cnt = ndimage.correlate(ind, fp, mode="constant", cval=0.0)
        tot = ndimage.correlate(ind * sd, fp, mode="constant", cval=0.0)
        cnt = np.rint(cnt)
        better = cnt > best_count
        best_count = np.where(better, cnt, best_count)
        best_sum = np.where(better, tot, best_sum)
    paint = band[r0:r1, c0:c1] & (best_count > 0)
    out = d.copy()
    sub = out[r0:r1, c0:c1]
    sub[paint] = np.rint(best_sum[paint] / best_count[paint])
    return img.replace(out.astype(np.uint16))


def backproject(img: DepthImage, camera_pose: Pose, mask=None, labels=None) -> PointCloud:
    """Pinhole back-projection of valid (and masked) pixels into the pose's frame.

    ``labels`` is an optional per-pixel raster copied onto the points.
    """
    fx, fy, cx, cy = img.intrinsics
    if fx <= 0 or fy <= 0:
        raise ValueError("focal lengths must be positive")
    sel = img.valid
    if mask is not None:
        sel = sel & np.asarray(mask, dtype=bool)
    v, u = np.nonzero(sel)
    z = img.data[v, u].astype(float) / 1000.0
    cam = np.column_stack([(u - cx) * z / fx, (v - cy) * z / fy, z])
    pts = camera_pose.apply(cam)
    lab = None if labels is None else np.asarray(labels)[v, u]
    return PointCloud(pts, camera_pose.frame, lab, camera_pose.t)


def write_pgm(path, raster, maxval: int) -> None:
    arr = np.asarray(raster)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise BundleError(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BundleError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise BundleError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos < need:
        raise BundleError(f"{path}: truncated PGM data")
    arr = np.frombuffer(raw[pos:pos + need], dtype=dtype).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8)


def save_depth(path, img: DepthImage) -> None:
    """Write ``path`` as 16-bit PGM plus ``<stem>.json`` with the intrinsics."""
    path = Path(path)
    write_pgm(path, img.data, 65535)
    fx, fy, cx, cy = img.intrinsics
    write_json(path.with_suffix(".json"), {"width": img.width, "height": img.height,
                                           "fx": fx, "fy": fy, "cx": cx, "cy": cy})


def load_depth(path) -> DepthImage:
    path = Path(path)
    data = read_pgm(path)
    side = path.with_suffix(".json")
    if side.exists():
        meta = read_json(side)
        intr = (meta["fx"], meta["fy"], meta["cx"], meta["cy"])
    else:
        intr = DEFAULT_INTRINSICS
    return DepthImage(data.astype(np.uint16), intr)


def save_labels(path, labels) -> None:
    arr = np.asarray(labels)
    if arr.max(initial=0) > 255:
        raise ValueError("label ids must fit in 8 bits")
    write_pgm(path, arr, 255)


def load_labels(path) -> np.ndarray:
    return read_pgm(path).astype(np.int64)
