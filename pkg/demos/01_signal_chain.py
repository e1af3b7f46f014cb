"""Walk one simulated CSI window through the preprocessing chain.

Run with ``python demos/01_signal_chain.py``. Prints what each step does to
the window; nothing is written to disk.
"""
import dataclasses

import numpy as np

from widepth import csi, simulator as sim
from widepth.nn import Rng

scene = sim.SceneConfig()
channel = sim.ChannelConfig()
raw = sim.simulate_csi(scene, channel, 1.0, Rng(0))
print("raw window (tx, rx, sub, packet):", raw.values.shape)

# The per-packet phase offsets are shared by all transmit chains, so the
# ratio of two chains cancels them.
clean = sim.simulate_csi(scene, dataclasses.replace(channel, offsets=False), 1.0, Rng(0))
a, b = csi.reference_divide(raw).values, csi.reference_divide(clean).values
print("offset residue after division:", np.max(np.abs(a - b)) / np.max(np.abs(b)))

divided = csi.reference_divide(raw)
dynamic = csi.extract_dynamic(divided)
print("static energy before / after high-pass:",
      round(float(np.abs(divided.values.mean(0)).mean()), 4),
      round(float(np.abs(dynamic.values.mean(0)).mean()), 6))

# Doppler of the moving object shows up as the DFT peak of one subcarrier.
mag = np.abs(np.fft.fft(dynamic.values[:, 15, 0]))
freqs = np.fft.fftfreq(len(mag), 1 / channel.packet_rate)
v = scene.velocity(np.array([1.15]))[0]
print("dominant Doppler", freqs[np.argmax(mag)], "Hz; object speed", np.round(v, 2), "m/s")

feat = csi.phase_differences(dynamic)
print("antenna phase differences (rad):", np.round(np.angle(feat.antenna), 3))
tensor, pdf = csi.preprocess_window(raw)
print("network inputs:", tensor.shape, pdf.as_real().shape)
