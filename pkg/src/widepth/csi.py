"""CSI preprocessing: reference-antenna division, dynamic-component extraction,
and SVD phase-difference features.

Array conventions
-----------------
* ``RawCsiWindow.values``: complex, indexed ``(tx, rx, sub, packet)``.
* ``CsiWindow.values``: complex, indexed ``(packet, sub, rx)``.
* Model-facing CSI tensor: float32 ``(2, packet, sub, rx)`` holding real and
  imaginary parts.
"""
import struct
from dataclasses import dataclass

import numpy as np
from scipy import signal

RAW = "raw-divided"
DYNAMIC = "dynamic"
SMOOTHED = "smoothed"


class CorruptWindowError(ValueError):
    """A CSI window that cannot be processed (zero divisor, empty, SVD failure)."""


@dataclass
class RawCsiWindow:
    values: np.ndarray          # complex (tx, rx, sub, packet)
    sample_rate: float = 1000.0
    carrier: float = 5.32e9
    t_start: float = 0.0

    @property
    def dims(self):
        return self.values.shape


@dataclass
class CsiWindow:
    values: np.ndarray          # complex (packet, sub, rx)
    provenance: str = RAW
    sample_rate: float = 1000.0


@dataclass
class PhaseDifferenceFeature:
    antenna: np.ndarray         # complex (n_rx - 1,)
    subcarrier: np.ndarray      # complex (n_sub - 1,)

    def as_real(self):
        """Flat float32 vector ``[re(ant), im(ant), re(sub), im(sub)]``."""
        return np.concatenate([self.antenna.real, self.antenna.imag,
                               self.subcarrier.real, self.subcarrier.imag]).astype(np.float32)

    @classmethod
    def from_real(cls, vec, n_rx=3, n_sub=30):
        a, s = n_rx - 1, n_sub - 1
        vec = np.asarray(vec, np.float64)
        return cls(vec[:a] + 1j * vec[a:2 * a], vec[2 * a:2 * a + s] + 1j * vec[2 * a + s:2 * a + 2 * s])


@dataclass
class PreprocessConfig:
    cutoff_hz: float = 2.0
    sg_window: int = 11
    sg_order: int = 3
    ref_tx: int = 0
    keep_tx: int = 1
    segment_packets: int = 50

    def validate(self, sample_rate=1000.0):
        if self.sg_window % 2 == 0 or self.sg_window <= self.sg_order:
            raise ValueError("smoothing window must be odd and longer than the polynomial order")
        if not 0 < self.cutoff_hz < sample_rate / 2:
            raise ValueError("high-pass cutoff must lie below Nyquist")
        if self.ref_tx == self.keep_tx:
            raise ValueError("kept transmit antenna must differ from the reference")


def reference_divide(raw, ref_tx=0, keep_tx=1):
    """Divide one transmit antenna's links by the reference antenna's.

    Any multiplicative offset shared by all transmit antennas at a given
    (rx, subcarrier, packet) cancels exactly.
    """
    h = raw.values
    den = h[ref_tx]
    if np.any(np.abs(den) == 0):
        raise CorruptWindowError(f"zero CSI on reference antenna {ref_tx}")
    ratio = h[keep_tx] / den                       # (rx, sub, packet)
    return CsiWindow(np.ascontiguousarray(ratio.transpose(2, 1, 0)), RAW, raw.sample_rate)


def highpass(x, cutoff_hz, fs):
    """Remove the per-link mean, then a zero-phase first-order Butterworth high-pass along axis 0."""
    x = x - x.mean(axis=0, keepdims=True)
    b, a = signal.butter(1, cutoff_hz, btype="highpass", fs=fs)
    # Gustafsson initial conditions: the 80 ms time constant outlasts any short edge padding
    y = signal.filtfilt(b, a, x, axis=0, method="gust")
    return y - y.mean(axis=0, keepdims=True)


def smooth(x, window=11, order=3):
    """Savitzky-Golay smoothing along axis 0, real and imaginary parts separately."""
    if x.shape[0] < window:
        raise CorruptWindowError(f"window of {x.shape[0]} packets is shorter than the smoothing window {window}")
    if np.iscomplexobj(x):
        return (signal.savgol_filter(x.real, window, order, axis=0)
                + 1j * signal.savgol_filter(x.imag, window, order, axis=0))
    return signal.savgol_filter(x, window, order, axis=0)


def extract_dynamic(csi, cfg=None):
    """High-pass then smooth a reference-divided window along the packet axis."""
    cfg = cfg or PreprocessConfig()
    if csi.provenance != RAW:
        raise ValueError(f"expected a reference-divided window, got {csi.provenance!r}")
    if csi.values.shape[0] < cfg.sg_window:
        raise CorruptWindowError(f"window of {csi.values.shape[0]} packets is shorter than the "
                                 f"smoothing window {cfg.sg_window}")
    dyn = highpass(csi.values, cfg.cutoff_hz, csi.sample_rate)
    out = smooth(dyn, cfg.sg_window, cfg.sg_order)
    out -= out.mean(axis=0, keepdims=True)
    return CsiWindow(out, SMOOTHED, csi.sample_rate)


def principal_vector(mat):
    """Principal left singular vector of a complex matrix."""
    try:
        u, _, _ = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise CorruptWindowError(f"SVD did not converge on a {mat.shape} matrix "
                                 f"(finite={np.all(np.isfinite(mat))}, norm={np.linalg.norm(mat):.3g})") from e
    return u[:, 0]


def conj_products(u):
    """Neighbour-wise ``u[r] * conj(u[r + 1])``."""
    return u[:-1] * np.conj(u[1:])


def _segment_phase(seg):
    n_p, n_s, n_r = seg.shape
    ant = conj_products(principal_vector(seg.transpose(2, 1, 0).reshape(n_r, -1)))
    sub = conj_products(principal_vector(seg.transpose(1, 2, 0).reshape(n_s, -1)))
    return ant, sub


def phase_differences(csi, segment_packets=50):
    """Antenna and subcarrier phase-difference features of a window.

    Each ``segment_packets`` slice of the window gives one estimate; the
    window feature is the median over slices, taken separately on the real
    and imaginary parts.
    """
    v = csi.values
    if not np.any(v):
        raise CorruptWindowError("phase differences of an all-zero window")
    n_seg = max(v.shape[0] // segment_packets, 1)
    seg_len = v.shape[0] if n_seg == 1 else segment_packets
    ants, subs = [], []
    for i in range(n_seg):
        seg = v[i * seg_len:(i + 1) * seg_len]
        if not np.any(seg):
            continue
        a, s = _segment_phase(seg)
        ants.append(a)
        subs.append(s)
    ants, subs = np.array(ants), np.array(subs)
    med = lambda z: np.median(z.real, axis=0) + 1j * np.median(z.imag, axis=0)
    return PhaseDifferenceFeature(med(ants), med(subs))


def to_tensor(csi):
    """Real/imaginary float32 tensor ``(2, packet, sub, rx)``."""
    return np.stack([csi.values.real, csi.values.imag]).astype(np.float32)


def preprocess_window(raw, cfg=None):
    """Full CSI path: returns the model tensor and the phase-difference feature."""
    cfg = cfg or PreprocessConfig()
    cfg.validate(raw.sample_rate)
    divided = reference_divide(raw, cfg.ref_tx, cfg.keep_tx)
    dyn = extract_dynamic(divided, cfg)
    return to_tensor(dyn), phase_differences(dyn, cfg.segment_packets)


# binary record --------------------------------------------------------------
_MAGIC = b"WCSI"
_HEADER = struct.Struct("<4sIIIIIddd")


def write_raw(path, raw):
    """Little-endian record: header with dims, then interleaved re/im float32."""
    n_tx, n_rx, n_sub, n_p = raw.values.shape
    inter = np.empty(raw.values.shape + (2,), "<f4")
    inter[..., 0] = raw.values.real
    inter[..., 1] = raw.values.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, n_tx, n_rx, n_sub, n_p, raw.sample_rate, raw.carrier, raw.t_start))
        fh.write(inter.tobytes())


def read_raw(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, n_tx, n_rx, n_sub, n_p, fs, fc, t0 = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != 1:
        raise CorruptWindowError(f"{path}: not a CSI record")
    data = np.frombuffer(blob, "<f4", offset=_HEADER.size)
    expected = n_tx * n_rx * n_sub * n_p * 2
    if data.size != expected:
        raise CorruptWindowError(f"{path}: expected {expected} floats, found {data.size}")
    data = data.reshape(n_tx, n_rx, n_sub, n_p, 2)
    return RawCsiWindow(data[..., 0].astype(np.float64) + 1j * data[..., 1], fs, fc, t0)


def record_size(n_tx, n_rx, n_sub, n_packet):
    return _HEADER.size + 8 * n_tx * n_rx * n_sub * n_packet
