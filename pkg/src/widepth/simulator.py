"""Synthetic moving-object scenes: a pinhole depth camera and a multipath OFDM channel.

Geometry is a floor plan seen from above. The camera sits at the origin and
looks along +y; the sensing zone spans ``x`` in ``[-zone_width/2,
zone_width/2]`` and ``y`` in ``[camera_to_far - zone_depth, camera_to_far]``.
The Wi-Fi transmitter and receiver stand beside the camera. The object is a
flat (optionally bulging) ellipse or rectangle facing the camera, and it acts
on the channel as a single specular reflector at its centroid.
"""
import csv
import dataclasses
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import config as kv
from .csi import RawCsiWindow, write_raw
from .depth import DepthFrame, write_depth_frame
from .nn.rng import Rng

C = 299_792_458.0


@dataclass
class SceneConfig:
    zone_width: float = 4.0
    zone_depth: float = 2.0
    camera_to_far: float = 3.0
    object_kind: str = "ellipse"
    object_width: float = 0.4
    object_height: float = 0.8
    object_bulge: float = 0.1
    object_z: float = 0.0               # vertical offset of the object center from the optical axis
    waypoints_x: list[float] = field(default_factory=lambda: [-0.8, 0.6, 0.0])
    waypoints_y: list[float] = field(default_factory=lambda: [2.6, 1.6, 2.4])
    speed: float = 1.2
    background_depth: float = 4.5
    image_width: int = 96
    image_height: int = 64
    hfov_deg: float = 70.0
    fps: float = 30.0
    max_range_mm: float = 6000.0

    @property
    def focal(self):
        return self.image_width / 2 / np.tan(np.radians(self.hfov_deg) / 2)

    @property
    def y_near(self):
        return self.camera_to_far - self.zone_depth

    @property
    def waypoints(self):
        return np.stack([np.asarray(self.waypoints_x, float), np.asarray(self.waypoints_y, float)], 1)

    def validate(self):
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.object_kind not in ("ellipse", "rectangle"):
            raise ValueError(f"unknown object kind {self.object_kind!r}")
        if len(self.waypoints_x) != len(self.waypoints_y) or len(self.waypoints_x) < 1:
            raise ValueError("waypoints_x and waypoints_y must be non-empty and of equal length")
        wp = self.waypoints
        tol = 1e-9
        if (np.any(np.abs(wp[:, 0]) > self.zone_width / 2 + tol)
                or np.any(wp[:, 1] < self.y_near - tol) or np.any(wp[:, 1] > self.camera_to_far + tol)):
            raise ValueError("trajectory leaves the sensing zone")

    # trajectory ------------------------------------------------------------
    def _segments(self):
        wp = self.waypoints
        seg = np.diff(wp, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        return wp, seg, np.concatenate([[0.0], np.cumsum(lengths)])

    @property
    def duration(self):
        return self._segments()[2][-1] / self.speed

    def position(self, t):
        """Object centroid ``(x, y)`` at time(s) ``t``; holds the last waypoint afterwards."""
        wp, seg, cum = self._segments()
        t = np.asarray(t, float)
        s = np.clip(t * self.speed, 0.0, cum[-1])
        if len(seg) == 0:
            return np.broadcast_to(wp[0], t.shape + (2,)).copy()
        i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        frac = (s - cum[i]) / np.where(cum[i + 1] > cum[i], cum[i + 1] - cum[i], 1.0)
        return wp[i] + frac[..., None] * seg[i]

    def velocity(self, t):
        wp, seg, cum = self._segments()
        t = np.asarray(t, float)
        s = t * self.speed
        if len(seg) == 0:
            return np.zeros(t.shape + (2,))
        i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        unit = seg[i] / np.maximum(np.linalg.norm(seg[i], axis=-1, keepdims=True), 1e-12)
        moving = (s < cum[-1])[..., None]
        return np.where(moving, unit * self.speed, 0.0)

    @property
    def object_area(self):
        a = self.object_width * self.object_height
        return a * np.pi / 4 if self.object_kind == "ellipse" else a


@dataclass
class ChannelConfig:
    carrier: float = 5.32e9
    bandwidth: float = 20e6
    n_sub: int = 30
    packet_rate: float = 1000.0
    n_tx: int = 3
    n_rx: int = 3
    n_packet: int = 300
    antenna_spacing: float | None = None        # default half a carrier wavelength
    tx_x: float = -0.15
    tx_y: float = 0.0
    tx_array_deg: float = 90.0                  # transmit array axis, degrees from +x
    rx_x: float = 0.15
    rx_y: float = 0.0
    static_gain_re: list[float] = field(default_factory=lambda: [1.0, 0.3, -0.12])
    static_gain_im: list[float] = field(default_factory=lambda: [0.0, 0.25, -0.2])
    static_delay_ns: list[float] = field(default_factory=lambda: [1.0, 25.0, 38.0])
    reflectivity: float = 0.5
    noise_std: float = 1e-3
    offsets: bool = True

    @property
    def wavelength(self):
        return C / self.carrier

    @property
    def spacing(self):
        return self.wavelength / 2 if self.antenna_spacing is None else self.antenna_spacing

    @property
    def subcarrier_spacing(self):
        return self.bandwidth / self.n_sub

    @property
    def frequencies(self):
        k = np.arange(self.n_sub)
        return self.carrier + (k - (self.n_sub - 1) / 2) * self.subcarrier_spacing

    @property
    def window_seconds(self):
        return self.n_packet / self.packet_rate

    def tx_positions(self):
        a = np.radians(self.tx_array_deg)
        i = np.arange(self.n_tx)[:, None]
        return np.array([self.tx_x, self.tx_y]) + i * self.spacing * np.array([np.cos(a), np.sin(a)])

    def validate(self):
        if self.noise_std < 0:
            raise ValueError("noise std must be non-negative")
        if not (len(self.static_gain_re) == len(self.static_gain_im) == len(self.static_delay_ns)):
            raise ValueError("static path lists must have equal length")
        if min(self.n_sub, self.n_tx, self.n_rx, self.n_packet) < 1:
            raise ValueError("channel dimensions must be positive")


# depth camera ----------------------------------------------------------------
@dataclass
class RenderTruth:
    mask: np.ndarray        # (H, W) bool silhouette
    center: tuple | None    # (x, y) normalized bounding-box center, None when out of view
    avg_depth: float        # mean object depth in mm (0 when out of view)
    position: np.ndarray    # floor-plan centroid (x, y)

    @property
    def has_object(self):
        return self.center is not None


def _pixel_rays(scene):
    f = scene.focal
    u = (np.arange(scene.image_width) + 0.5 - scene.image_width / 2) / f
    v = -(np.arange(scene.image_height) + 0.5 - scene.image_height / 2) / f
    return np.meshgrid(u, v)


def render_depth(scene, t, pos=None):
    """Noise-free depth frame and silhouette of the object at time ``t``.

    Pixel values are z-depth in millimetres. The static background plane sits
    at ``background_depth``.
    """
    if pos is None:
        pos = scene.position(t)
    x0, y0 = float(pos[0]), float(pos[1])
    rx_, rz_ = _pixel_rays(scene)
    hx, hz = (rx_ * y0 - x0) / (scene.object_width / 2), (rz_ * y0 - scene.object_z) / (scene.object_height / 2)
    if scene.object_kind == "ellipse":
        r2 = hx ** 2 + hz ** 2
        inside = r2 <= 1.0
        bulge = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    else:
        inside = (np.abs(hx) <= 1.0) & (np.abs(hz) <= 1.0)
        bulge = np.sqrt(np.clip(1.0 - hx ** 2, 0.0, 1.0))
    depth = np.full(inside.shape, scene.background_depth * 1000.0)
    obj = (y0 - scene.object_bulge * bulge) * 1000.0
    depth[inside] = obj[inside]
    if not inside.any():
        return DepthFrame(depth, float(t)), RenderTruth(inside, None, 0.0, np.array([x0, y0]))
    rows = np.flatnonzero(inside.any(axis=1))
    cols = np.flatnonzero(inside.any(axis=0))
    center = ((cols[0] + cols[-1] + 1) / 2 / scene.image_width, (rows[0] + rows[-1] + 1) / 2 / scene.image_height)
    return DepthFrame(depth, float(t)), RenderTruth(inside, center, float(obj[inside].mean()), np.array([x0, y0]))


def add_sensor_noise(frame, rng, std_mm=8.0, hole_prob=0.004, flicker_prob=5e-4, max_range_mm=6000.0):
    """Gaussian range noise, random dropouts and single-frame out-of-range speckles."""
    v = frame.values + rng.normal(frame.values.shape, np.float64) * std_mm
    v[rng.uniform(shape=frame.values.shape) < hole_prob] = 0.0
    v[rng.uniform(shape=frame.values.shape) < flicker_prob] = max_range_mm * 1.5
    return DepthFrame(np.clip(v, 0.0, 65535.0), frame.timestamp)


# channel -------------------------------------------------------------------
def object_paths(scene, channel, times):
    """Per-packet object path parameters.

    Returns ``(amp (P,), tau (tx, P), sin_theta (P,))``: amplitude, transmit-element
    bistatic delay and the arrival angle at the receive array (broadside +y).
    """
    pos = scene.position(times)                               # (P, 2)
    tx = channel.tx_positions()                               # (tx, 2)
    rx = np.array([channel.rx_x, channel.rx_y])
    d_tx = np.linalg.norm(pos[None] - tx[:, None], axis=-1)   # (tx, P)
    to_obj = pos - rx
    d_rx = np.linalg.norm(to_obj, axis=-1)
    amp = channel.reflectivity * scene.object_area / (d_tx[0] * d_rx)
    tau = (d_tx + d_rx[None]) / C
    return amp, tau, to_obj[:, 0] / d_rx


def simulate_csi(scene, channel, window_start, rng=None):
    """One raw CSI window of ``n_packet`` packets starting at ``window_start``.

    ``rng`` drives the noise and the per-packet phase offsets; pass ``None``
    for a noise-free, offset-free channel.
    """
    times = window_start + np.arange(channel.n_packet) / channel.packet_rate
    f = channel.frequencies                                   # (K,)
    gains = np.asarray(channel.static_gain_re) + 1j * np.asarray(channel.static_gain_im)
    delays = np.asarray(channel.static_delay_ns) * 1e-9
    static = (gains[:, None] * np.exp(-2j * np.pi * f[None] * delays[:, None])).sum(0)   # (K,)
    amp, tau, sin_t = object_paths(scene, channel, times)
    lam = C / f
    r = np.arange(channel.n_rx)
    # (tx, rx, K, P)
    tof = np.exp(-2j * np.pi * f[None, :, None] * tau[:, None, :])[:, None]
    aoa = np.exp(2j * np.pi * r[:, None, None] * channel.spacing * sin_t[None, None, :] / lam[None, :, None])
    h = static[None, None, :, None] + amp[None, None, None, :] * tof * aoa[None]
    if rng is not None:
        if channel.noise_std > 0:
            s = channel.noise_std / np.sqrt(2)
            h = h + s * (rng.normal(h.shape, np.float64) + 1j * rng.normal(h.shape, np.float64))
        if channel.offsets:
            psi = rng.uniform(0.0, 2 * np.pi, (channel.n_sub, channel.n_packet))
            h = h * np.exp(1j * psi)[None, None]
    return RawCsiWindow(h, channel.packet_rate, channel.carrier, float(window_start))


# datasets -------------------------------------------------------------------
@dataclass
class DatasetConfig:
    n_subjects: int = 6
    windows_per_subject: int = 333
    window_stride: float = 0.1
    n_waypoints: int = 12
    margin: float = 0.05
    y_min_visible: float = 1.4
    size_jitter: float = 0.15
    speed_jitter: float = 0.15
    depth_noise_mm: float = 8.0
    hole_prob: float = 0.004
    flicker_prob: float = 5e-4

    def validate(self):
        if self.n_subjects < 2:
            raise ValueError("need at least 2 subjects for leave-one-subject-out splits")
        if self.windows_per_subject < 1 or self.window_stride <= 0:
            raise ValueError("windows_per_subject and window_stride must be positive")


def subject_scene(base, subject, dcfg, rng, duration):
    """A subject's scene: jittered size and speed and a random visible trajectory."""
    r = rng.child("subject", subject)
    scale = 1 + dcfg.size_jitter * (2 * r.uniform() - 1)
    speed = base.speed * (1 + dcfg.speed_jitter * (2 * r.uniform() - 1))
    w, h = base.object_width * scale, base.object_height * scale
    tan_half = np.tan(np.radians(base.hfov_deg) / 2)
    y_lo = max(base.y_near, dcfg.y_min_visible)
    y_hi = base.camera_to_far
    need = speed * duration
    xs, ys = [], []
    length = 0.0
    prev = None
    while prev is None or length < need or len(xs) < dcfg.n_waypoints:
        y = y_lo + (y_hi - y_lo) * r.uniform()
        x_lim = min(base.zone_width / 2, y * tan_half - w / 2 - dcfg.margin)
        x = x_lim * (2 * r.uniform() - 1)
        if prev is not None:
            length += float(np.hypot(x - prev[0], y - prev[1]))
        xs.append(float(x))
        ys.append(float(y))
        prev = (x, y)
    return dataclasses.replace(base, object_width=float(w), object_height=float(h), speed=float(speed),
                               waypoints_x=xs, waypoints_y=ys)


@dataclass
class SubjectData:
    subject: int
    scene: SceneConfig
    frames: list                    # noisy DepthFrame per camera frame
    truths: list                    # RenderTruth per camera frame
    windows: list                   # RawCsiWindow
    window_starts: np.ndarray
    frame_index: np.ndarray         # depth frame aligned with each window


def aligned_frame(window_end, fps):
    """Index of the last depth frame captured no later than the window end."""
    return int(np.floor(window_end * fps + 1e-9))


def simulate_subject(base, channel, dcfg, subject, seed):
    rng = Rng(seed)
    win_s = channel.window_seconds
    duration = (dcfg.windows_per_subject - 1) * dcfg.window_stride + win_s
    scene = subject_scene(base, subject, dcfg, rng, duration)
    scene.validate()
    n_frames = aligned_frame(duration, scene.fps) + 1
    frng = rng.child("frames", subject)
    frames, truths = [], []
    for i in range(n_frames):
        clean, truth = render_depth(scene, i / scene.fps)
        frames.append(add_sensor_noise(clean, frng, dcfg.depth_noise_mm, dcfg.hole_prob,
                                       dcfg.flicker_prob, scene.max_range_mm))
        truths.append(truth)
    starts = np.arange(dcfg.windows_per_subject) * dcfg.window_stride
    windows = [simulate_csi(scene, channel, float(t0), rng.child("csi", subject, i))
               for i, t0 in enumerate(starts)]
    idx = np.array([aligned_frame(t0 + win_s, scene.fps) for t0 in starts])
    return SubjectData(subject, scene, frames, truths, windows, starts, idx)


def simulate_all(base, channel, dcfg, seed):
    dcfg.validate()
    channel.validate()
    return [simulate_subject(base, channel, dcfg, s, seed) for s in range(dcfg.n_subjects)]


MANIFEST_FIELDS = ["id", "subject", "window_start_s", "csi_path", "depth_dir"]


def expected_floats(channel, n_windows, n_frames, height, width):
    """Float count of a generated dataset: complex CSI as two floats plus depth pixels."""
    return n_windows * 2 * channel.n_tx * channel.n_rx * channel.n_sub * channel.n_packet \
        + n_frames * height * width


def generate_dataset(out_dir, base, channel, dcfg, seed):
    """Write CSI records, depth PGM sequences, configs and ``manifest.csv``.

    Any failure removes the partially written directory before re-raising.
    """
    base.validate()
    subjects = simulate_all(base, channel, dcfg, seed)
    created = not os.path.exists(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        kv.write_kv(os.path.join(out_dir, "scene.cfg"), kv.to_kv(base))
        kv.write_kv(os.path.join(out_dir, "channel.cfg"), kv.to_kv(channel))
        kv.write_kv(os.path.join(out_dir, "dataset.cfg"), {**kv.to_kv(dcfg), "seed": str(seed)})
        rows, n_frames = [], 0
        for sd in subjects:
            sdir = f"subject_{sd.subject}"
            os.makedirs(os.path.join(out_dir, sdir, "depth"), exist_ok=True)
            os.makedirs(os.path.join(out_dir, sdir, "csi"), exist_ok=True)
            kv.write_kv(os.path.join(out_dir, sdir, "scene.cfg"), kv.to_kv(sd.scene))
            for i, fr in enumerate(sd.frames):
                write_depth_frame(os.path.join(out_dir, sdir, "depth", f"{i:06d}.pgm"), fr)
            n_frames += len(sd.frames)
            for i, (w, t0) in enumerate(zip(sd.windows, sd.window_starts)):
                rel = f"{sdir}/csi/{i:06d}.wcsi"
                write_raw(os.path.join(out_dir, rel), w)
                rows.append([f"s{sd.subject}_{i:06d}", sd.subject, f"{t0:.6f}", rel, f"{sdir}/depth"])
        with open(os.path.join(out_dir, "manifest.csv"), "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(MANIFEST_FIELDS)
            wr.writerows(rows)
        h, w = base.image_height, base.image_width
        n_csi = sum(1 for r in rows if os.path.exists(os.path.join(out_dir, r[3])))
        if n_csi != len(rows):
            raise OSError(f"manifest lists {len(rows)} windows but {n_csi} records exist")
        return {"windows": len(rows), "frames": n_frames,
                "floats": expected_floats(channel, len(rows), n_frames, h, w)}
    except BaseException:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for name in ["manifest.csv"] + [f"subject_{s}" for s in range(dcfg.n_subjects)]:
                p = os.path.join(out_dir, name)
                if os.path.isdir(p):
                    shutil.rmtree(p, ignore_errors=True)
                elif os.path.exists(p):
                    os.remove(p)
        raise


def read_manifest(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"{path}: unexpected manifest header {rd.fieldnames}")
        return [dict(r, subject=int(r["subject"]), window_start_s=float(r["window_start_s"])) for r in rd]


def loso_splits(subject_ids):
    """Leave-one-subject-out splits as ``(held_out, train_idx, test_idx)``."""
    subject_ids = np.asarray(subject_ids)
    for s in np.unique(subject_ids):
        yield int(s), np.flatnonzero(subject_ids != s), np.flatnonzero(subject_ids == s)
