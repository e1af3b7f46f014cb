"""Depth-frame cleaning, moving-content extraction and core-component ground truth."""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass
class DepthPrepConfig:
    max_range: float = 6000.0       # mm
    buffer_frames: int = 90
    motion_threshold: float = 100.0  # mm
    deflicker: int = 3
    crop: int = 48
    fill_radius: float = 5.0

    def validate(self):
        for name in ("max_range", "buffer_frames", "motion_threshold", "deflicker", "crop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.deflicker % 2 == 0:
            raise ValueError("deflicker window must be odd")


@dataclass
class DepthFrame:
    values: np.ndarray              # (H, W) millimetres, 0 = hole
    timestamp: float = 0.0

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class MovingDepthFrame:
    values: np.ndarray              # (H, W) in [0, 1]
    timestamp: float = 0.0


@dataclass
class CoreComponents:
    mask: np.ndarray                # (M, M) uint8
    center: tuple = (0.0, 0.0)      # (x, y) normalized by width, height
    avg_depth: float = 0.0
    has_object: bool = False
    bbox: tuple = field(default=None, repr=False)   # (row0, col0, row1, col1) inclusive

    def target_vector(self):
        """``(x_c, y_c, d)`` as float32, the regression target of the center-depth head."""
        return np.array([self.center[0], self.center[1], self.avg_depth], np.float32)


def clean_frame(frame, cfg=None):
    """Drop out-of-range readings, then fill holes from the nearest valid pixel.

    A connected hole region (8-connected) is filled only if every pixel in it
    lies within ``fill_radius`` of the region's outside; larger regions stay
    0. The decision depends on the region alone, so cleaning is idempotent.
    """
    cfg = cfg or DepthPrepConfig()
    v = np.asarray(frame.values, np.float64).copy()
    v[v > cfg.max_range] = 0
    holes = v <= 0
    v[holes] = 0
    if not holes.any() or holes.all():
        return DepthFrame(v, frame.timestamp)
    dist, (ri, ci) = ndimage.distance_transform_edt(holes, return_indices=True)
    fill = holes.copy()
    if dist.max() > cfg.fill_radius:
        labels, _ = ndimage.label(holes, structure=np.ones((3, 3)))
        for i, sl in enumerate(ndimage.find_objects(labels), 1):
            if dist[sl][labels[sl] == i].max() <= cfg.fill_radius:
                continue
            region = np.pad(labels[sl] == i, 1)
            if ndimage.distance_transform_edt(region).max() > cfg.fill_radius:
                fill[labels == i] = False
    v[fill] = v[ri[fill], ci[fill]]
    return DepthFrame(v, frame.timestamp)


def _stack(frames):
    return np.stack([np.asarray(f.values, np.float64) for f in frames])


def background(frames, cfg=None):
    """Per-pixel temporal median over ``buffer_frames`` evenly spaced frames."""
    cfg = cfg or DepthPrepConfig()
    stack = frames if isinstance(frames, np.ndarray) else _stack(frames)
    idx = np.unique(np.linspace(0, len(stack) - 1, cfg.buffer_frames).round().astype(int))
    return np.median(stack[idx], axis=0)


def extract_moving(frames, cfg=None, bg=None):
    """Normalized moving content of a frame sequence.

    A pixel is kept when it differs from the background by more than the
    motion threshold; a short temporal median then suppresses single-frame
    flicker. ``bg`` may supply a precomputed background in millimetres.
    """
    cfg = cfg or DepthPrepConfig()
    cfg.validate()
    frames = list(frames)
    if len(frames) < cfg.buffer_frames:
        raise ValueError(f"need at least {cfg.buffer_frames} frames for the background, got {len(frames)}")
    stack = _stack(frames)
    if bg is None:
        bg = background(stack, cfg)
    kept = np.where((np.abs(stack - bg) > cfg.motion_threshold) & (stack > 0), stack, 0.0)
    if cfg.deflicker > 1:
        kept = ndimage.median_filter(kept, size=(cfg.deflicker, 1, 1), mode="nearest")
    kept = np.clip(kept / cfg.max_range, 0.0, 1.0)
    return [MovingDepthFrame(k, f.timestamp) for k, f in zip(kept, frames)]


def largest_component(binary):
    """Boolean mask of the largest 4-connected component (lowest label on ties)."""
    labels, n = ndimage.label(binary)
    if n == 0:
        return None
    areas = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(areas)) + 1)


def crop_centered(img, cx, cy, side):
    """``side`` x ``side`` crop whose center is the pixel coordinate (cx, cy); zero-padded."""
    r0 = int(np.floor(cy - side / 2 + 0.5))
    c0 = int(np.floor(cx - side / 2 + 0.5))
    out = np.zeros((side, side), img.dtype)
    h, w = img.shape
    sr0, sc0 = max(r0, 0), max(c0, 0)
    sr1, sc1 = min(r0 + side, h), min(c0 + side, w)
    if sr1 > sr0 and sc1 > sc0:
        out[sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = img[sr0:sr1, sc0:sc1]
    return out


def core_components(frame, cfg=None, threshold=0.0):
    """Shape mask, normalized center and average depth of the largest moving blob."""
    cfg = cfg or DepthPrepConfig()
    v = np.asarray(frame.values if hasattr(frame, "values") else frame, np.float64)
    comp = largest_component(v > threshold)
    if comp is None:
        return CoreComponents(np.zeros((cfg.crop, cfg.crop), np.uint8))
    rows = np.flatnonzero(comp.any(axis=1))
    cols = np.flatnonzero(comp.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
    cx, cy = (c0 + c1 + 1) / 2, (r0 + r1 + 1) / 2
    box = v[r0:r1 + 1, c0:c1 + 1]
    avg = float(box[box > threshold].mean())
    h, w = v.shape
    mask = crop_centered(comp.astype(np.uint8), cx, cy, cfg.crop)
    return CoreComponents(mask, (cx / w, cy / h), avg, True, (int(r0), int(c0), int(r1), int(c1)))


# file formats ---------------------------------------------------------------
def write_pgm(path, img, maxval=65535):
    """Binary P5 PGM; 16-bit samples are big-endian."""
    img = np.asarray(img)
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.clip(np.rint(img), 0, maxval).astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(blob, dtype, count=w * h, offset=pos + 1).reshape(h, w).astype(np.uint16)


def write_depth_frame(path, frame):
    write_pgm(path, frame.values, 65535)


def read_depth_frame(path, timestamp=0.0):
    return DepthFrame(read_pgm(path).astype(np.float64), timestamp)


def write_normalized(path, img):
    """8-bit PGM preview of a [0, 1] image."""
    write_pgm(path, np.clip(np.asarray(img), 0, 1) * 255, 255)


CSV_FIELDS = ["frame_id", "center_x", "center_y", "avg_depth", "has_object"]


def write_components_csv(path, items):
    """One row per frame; ``items`` yields ``(frame_id, CoreComponents)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_FIELDS)
        for fid, cc in items:
            wr.writerow([fid, f"{cc.center[0]:.6f}", f"{cc.center[1]:.6f}", f"{cc.avg_depth:.6f}",
                         int(cc.has_object)])
