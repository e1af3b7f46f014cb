"""Paired training samples: preprocessed CSI, phase features, moving-depth targets."""
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import config as kv
from . import csi as csi_mod
from . import depth as depth_mod
from . import simulator as sim
from .nn import Rng


@dataclass
class Dataset:
    csi: np.ndarray          # (N, packet, sub*rx, 2) float32, model layout
    phase: np.ndarray        # (N, 2*(rx-1) + 2*(sub-1)) float32
    image: np.ndarray        # (N, H, W, 1) float32 moving depth in [0, 1]
    mask: np.ndarray         # (N, M, M, 1) float32 binary
    center_depth: np.ndarray  # (N, 3) float32 (x_c, y_c, d)
    has_object: np.ndarray   # (N,) bool
    subject: np.ndarray      # (N,) int
    ids: list

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.csi[idx], self.phase[idx], self.image[idx], self.mask[idx],
                       self.center_depth[idx], self.has_object[idx], self.subject[idx],
                       [self.ids[i] for i in idx])

    @property
    def image_shape(self):
        return self.image.shape[1:]

    def save(self, path):
        np.savez(path, csi=self.csi, phase=self.phase, image=self.image, mask=self.mask,
                 center_depth=self.center_depth, has_object=self.has_object, subject=self.subject,
                 ids=np.array(self.ids))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["csi"], z["phase"], z["image"], z["mask"], z["center_depth"],
                       z["has_object"], z["subject"], [str(s) for s in z["ids"]])


def csi_layout(tensor):
    """``(2, packet, sub, rx)`` to the conv layout ``(packet, sub*rx, 2)``."""
    two, p, s, r = tensor.shape
    return np.ascontiguousarray(tensor.transpose(1, 2, 3, 0).reshape(p, s * r, two))


def depth_targets(frames, dcfg):
    """Moving-depth images and core components for every frame of one sequence."""
    cleaned = [depth_mod.clean_frame(f, dcfg) for f in frames]
    return depth_mod.extract_moving(cleaned, dcfg)


def build_subject(sd, pcfg=None, dcfg=None):
    pcfg = pcfg or csi_mod.PreprocessConfig()
    dcfg = dcfg or depth_mod.DepthPrepConfig()
    moving = depth_targets(sd.frames, dcfg)
    rows = {k: [] for k in ("csi", "phase", "image", "mask", "cd", "has")}
    ids = []
    for i, (w, fi) in enumerate(zip(sd.windows, sd.frame_index)):
        tensor, pdf = csi_mod.preprocess_window(w, pcfg)
        img = moving[fi].values
        cc = depth_mod.core_components(img, dcfg)
        rows["csi"].append(csi_layout(tensor))
        rows["phase"].append(pdf.as_real())
        rows["image"].append(img[..., None].astype(np.float32))
        rows["mask"].append(cc.mask[..., None].astype(np.float32))
        rows["cd"].append(cc.target_vector())
        rows["has"].append(cc.has_object)
        ids.append(f"s{sd.subject}_{i:06d}")
    return Dataset(np.stack(rows["csi"]), np.stack(rows["phase"]), np.stack(rows["image"]),
                   np.stack(rows["mask"]), np.stack(rows["cd"]), np.array(rows["has"]),
                   np.full(len(ids), sd.subject), ids)


def concat(parts):
    return Dataset(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("csi", "phase", "image", "mask", "center_depth", "has_object", "subject")),
                   [i for p in parts for i in p.ids])


def build_dataset(scene=None, channel=None, dcfg=None, seed=0, pcfg=None, depth_cfg=None):
    """Simulate and preprocess a full dataset in memory."""
    scene = scene or sim.SceneConfig()
    channel = channel or sim.ChannelConfig()
    dcfg = dcfg or sim.DatasetConfig()
    dcfg.validate()
    channel.validate()
    parts = []
    for s in range(dcfg.n_subjects):
        sd = sim.simulate_subject(scene, channel, dcfg, s, seed)
        parts.append(build_subject(sd, pcfg, depth_cfg))
    return concat(parts)


def load_generated(root, pcfg=None, dcfg=None):
    """Preprocess a dataset directory written by ``simulator.generate_dataset``."""
    rows = sim.read_manifest(os.path.join(root, "manifest.csv"))
    missing = [r["csi_path"] for r in rows if not os.path.exists(os.path.join(root, r["csi_path"]))]
    if missing:
        raise FileNotFoundError(f"{len(missing)} CSI records missing, first: {missing[0]}")
    parts = []
    for subject in sorted({r["subject"] for r in rows}):
        srows = [r for r in rows if r["subject"] == subject]
        scene = kv.from_kv(sim.SceneConfig, kv.read_kv(os.path.join(root, f"subject_{subject}", "scene.cfg")))
        ddir = os.path.join(root, srows[0]["depth_dir"])
        names = sorted(n for n in os.listdir(ddir) if n.endswith(".pgm"))
        frames = [depth_mod.read_depth_frame(os.path.join(ddir, n), i / scene.fps) for i, n in enumerate(names)]
        windows = [csi_mod.read_raw(os.path.join(root, r["csi_path"])) for r in srows]
        starts = np.array([r["window_start_s"] for r in srows])
        idx = np.array([sim.aligned_frame(w.t_start + w.values.shape[-1] / w.sample_rate, scene.fps)
                        for w in windows])
        if idx.max() >= len(frames):
            raise ValueError(f"subject {subject}: depth frames end before the last CSI window")
        sd = sim.SubjectData(subject, scene, frames, None, windows, starts, idx)
        part = build_subject(sd, pcfg, dcfg)
        part.ids = [r["id"] for r in srows]
        parts.append(part)
    return concat(parts)


def split_hash(ids):
    """Short digest of an ordered list of sample ids."""
    return hashlib.sha256("\n".join(map(str, ids)).encode()).hexdigest()[:16]


def epoch_subsets(n, epochs, fraction, seed):
    """Per-epoch index subsets, sampled without replacement from one seeded stream.

    The sequence depends only on ``(n, epochs, fraction, seed)``, so every
    method trained on the same split sees the same samples.
    """
    rng = Rng(seed).child("epoch-subsets", n)
    k = max(1, int(round(fraction * n)))
    return [np.sort(rng.child(e).choice(n, k, replace=False)) for e in range(epochs)]


@dataclass
class Normalizer:
    """Fixed input scaling for the CSI-side encoders, fitted on training data."""
    csi_scale: float = 1.0
    phase_mean: np.ndarray = None
    phase_std: np.ndarray = None

    @classmethod
    def fit(cls, ds):
        std = float(np.sqrt(np.mean(ds.csi.astype(np.float64) ** 2)))
        pm = ds.phase.mean(0)
        ps = ds.phase.std(0)
        return cls(1.0 / max(std, 1e-12), pm.astype(np.float32), np.maximum(ps, 1e-6).astype(np.float32))

    def apply(self, csi, phase):
        pm = 0.0 if self.phase_mean is None else self.phase_mean
        ps = 1.0 if self.phase_std is None else self.phase_std
        return (csi * np.float32(self.csi_scale)).astype(np.float32), ((phase - pm) / ps).astype(np.float32)

    def to_meta(self):
        return {"csi_scale": repr(self.csi_scale),
                "phase_mean": ",".join(repr(float(v)) for v in self.phase_mean),
                "phase_std": ",".join(repr(float(v)) for v in self.phase_std)}

    @classmethod
    def from_meta(cls, meta):
        f = lambda s: np.array([float(v) for v in s.split(",")], np.float32)
        return cls(float(meta["csi_scale"]), f(meta["phase_mean"]), f(meta["phase_std"]))
