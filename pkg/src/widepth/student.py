"""The CSI-side student, its three-level distillation loss, and the end-to-end baseline.

The student maps a CSI window and its phase-difference feature to a feature
vector shaped like the teacher's ``f_t`` and to a latent distribution in the
teacher's latent space. At inference the teacher's decoders read the
student's mean latent.
"""
from dataclasses import dataclass, field

import numpy as np

from . import training
from .data import Normalizer
from .nn import (Adam, Concat, Conv2d, Dense, LatentDistribution, LSTM, Module, ReLU, Reshape, Rng,
                 Sequential, ShapeError, bce, head_grad, kl_gaussian, mse, reparameterize)
from .teacher import TeacherConfig, TeacherLossWeights, image_decoder, latent_head
from .training import TrainingConfig


@dataclass
class StudentConfig:
    packets: int = 300
    n_sub: int = 30
    n_rx: int = 3
    channels: tuple[int, ...] = (8, 16, 16, 32, 32)
    lstm_hidden: int = 64
    lstm_layers: int = 2
    phase_hidden: int = 64
    fusion_hidden: int = 192
    head_hidden: int = 128
    feature_dim: int = 192
    latent: int = 32

    @property
    def phase_dim(self):
        return 2 * (self.n_rx - 1) + 2 * (self.n_sub - 1)

    @property
    def csi_shape(self):
        return (self.packets, self.n_sub * self.n_rx, 2)


@dataclass
class StudentLossWeights:
    w5: float = 1.0
    w6: float = 1.0
    w7: float = 1.0
    alpha: float = 0.5
    w2: float = 1.0         # mask term of the ground-truth level
    w3: float = 1.0         # average-depth term
    w4: float = 1.0         # center term

    def validate(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")
        if self.alpha > 1:
            raise ValueError("alpha must lie in [0, 1]")


def csi_branch(cfg, rng, name="csi_branch"):
    """Strided convs over (time, sub x rx) with re/im channels, then a stacked LSTM over time."""
    layers, cin = [], 2
    h, w = cfg.packets, cfg.n_sub * cfg.n_rx
    for i, c in enumerate(cfg.channels):
        layers += [Conv2d(cin, c, rng=rng.child(name, i)), ReLU()]
        cin = c
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    layers += [Reshape((h, w * cin)),
               LSTM(w * cin, cfg.lstm_hidden, cfg.lstm_layers, rng=rng.child(name, "lstm"))]
    return Sequential(layers, cfg.csi_shape, name)


def phase_branch(cfg, rng, name="phase_branch"):
    return Sequential([Dense(cfg.phase_dim, cfg.phase_hidden, rng.child(name, 0)), ReLU(),
                       Dense(cfg.phase_hidden, cfg.phase_hidden, rng.child(name, 1)), ReLU()],
                      (cfg.phase_dim,), name)


def fusion(cfg, rng, name="fusion"):
    n_in = cfg.lstm_hidden + cfg.phase_hidden
    return Sequential([Dense(n_in, cfg.fusion_hidden, rng.child(name, 0)), ReLU(),
                       Dense(cfg.fusion_hidden, cfg.feature_dim, rng.child(name, 1))], (n_in,), name)


class CsiEncoder(Module):
    """CSI branch + phase branch, late fusion to ``f_s``, then the latent head (``P_SF``, ``R_SZ``)."""

    def __init__(self, cfg=None, seed=0, label="student"):
        self.cfg = cfg or StudentConfig()
        rng = Rng(seed).child(label)
        self.csi_branch = csi_branch(self.cfg, rng)
        self.phase_branch = phase_branch(self.cfg, rng)
        self.concat = Concat()
        self.fusion = fusion(self.cfg, rng)
        self.head = latent_head(self.cfg.feature_dim, self.cfg.head_hidden, self.cfg.latent, rng, "head")
        self.graphs = {g.name: g for g in (self.csi_branch, self.phase_branch, self.fusion, self.head)}
        self.normalizer = Normalizer()

    def prepare(self, csi, phase):
        """Accept ``(N, 2, packet, sub, rx)`` or model-layout CSI; apply the input scaling."""
        csi = np.asarray(csi, np.float32)
        phase = np.asarray(phase, np.float32)
        c = self.cfg
        if csi.ndim == 5 and csi.shape[1:] == (2, c.packets, c.n_sub, c.n_rx):
            n = csi.shape[0]
            csi = csi.transpose(0, 2, 3, 4, 1).reshape(n, c.packets, c.n_sub * c.n_rx, 2)
        if csi.shape[1:] != c.csi_shape:
            raise ShapeError(f"csi tensor shape {csi.shape[1:]} matches neither "
                             f"{(2, c.packets, c.n_sub, c.n_rx)} nor {c.csi_shape}")
        if phase.shape[1:] != (c.phase_dim,):
            raise ShapeError(f"phase feature shape {phase.shape[1:]} != {(c.phase_dim,)}")
        if len(csi) != len(phase):
            raise ShapeError(f"batch mismatch: {len(csi)} CSI windows, {len(phase)} phase features")
        return self.normalizer.apply(csi, phase)

    def encode(self, csi, phase):
        """``(f_s, LatentDistribution)`` without caches."""
        x, p = self.prepare(csi, phase)
        f = self.fusion(self.concat.forward([self.csi_branch(x), self.phase_branch(p)])[0])
        return f, LatentDistribution.from_head(self.head(f))

    def meta(self):
        c = self.cfg
        out = {k: str(getattr(c, k)) for k in ("packets", "n_sub", "n_rx", "lstm_hidden", "lstm_layers",
                                                "phase_hidden", "fusion_hidden", "head_hidden",
                                                "feature_dim", "latent")}
        out["channels"] = ",".join(map(str, c.channels))
        if self.normalizer.phase_mean is not None:
            out.update(self.normalizer.to_meta())
        return out

    @staticmethod
    def cfg_from_meta(meta):
        kw = {k: int(meta[k]) for k in ("packets", "n_sub", "n_rx", "lstm_hidden", "lstm_layers",
                                        "phase_hidden", "fusion_hidden", "head_hidden", "feature_dim",
                                        "latent")}
        return StudentConfig(channels=tuple(int(v) for v in meta["channels"].split(",")), **kw)


class StudentModel(CsiEncoder):
    def meta(self):
        return {"kind": "student", **super().meta()}

    @classmethod
    def from_meta(cls, meta):
        m = cls(cls.cfg_from_meta(meta))
        if "csi_scale" in meta:
            m.normalizer = Normalizer.from_meta(meta)
        return m


def student_for(teacher_cfg, ds=None, **overrides):
    """Student configuration matching a teacher's feature/latent sizes and a dataset's CSI dims."""
    kw = dict(feature_dim=teacher_cfg.feature_dim, latent=teacher_cfg.latent)
    if ds is not None:
        packets, prod, _ = ds.csi.shape[1:]
        # phase length is 2(rx - 1) + 2(sub - 1), and sub * rx = prod
        total = (ds.phase.shape[1] + 4) // 2
        disc = np.sqrt(max(total * total - 4 * prod, 0))
        n_sub = int(round((total + disc) / 2))
        kw.update(packets=packets, n_sub=n_sub, n_rx=prod // n_sub)
    kw.update(overrides)
    return StudentConfig(**kw)


@dataclass
class StudentOutputs:
    feature: np.ndarray
    dist: LatentDistribution
    head: np.ndarray = field(repr=False, default=None)
    caches: dict = field(repr=False, default=None)


def student_forward(model, csi, phase):
    x, p = model.prepare(csi, phase)
    a, c_csi = model.csi_branch.forward(x)
    b, c_ph = model.phase_branch.forward(p)
    cat, sizes = model.concat.forward([a, b])
    f, c_fu = model.fusion.forward(cat)
    head, c_head = model.head.forward(f)
    caches = {"csi_branch": c_csi, "phase_branch": c_ph, "concat": sizes, "fusion": c_fu, "head": c_head}
    return StudentOutputs(f, LatentDistribution.from_head(head), head, caches)


def student_backward(model, out, d_feature, d_mu, d_sigma):
    c = out.caches
    dt = out.feature.dtype
    d_head = head_grad(out.head, d_mu, d_sigma).astype(dt, copy=False)
    d_f = model.head.backward(c["head"], d_head) + d_feature.astype(dt, copy=False)
    d_cat = model.fusion.backward(c["fusion"], d_f)
    d_a, d_b = model.concat.backward(c["concat"], d_cat)
    model.csi_branch.backward(c["csi_branch"], d_a, input_grad=False)
    model.phase_branch.backward(c["phase_branch"], d_b, input_grad=False)


class FreezeViolation(RuntimeError):
    pass


STUDENT_TERMS = ("feature", "latent", "gt")


@dataclass
class StudentLoss:
    total: float
    terms: dict         # feature, latent, gt and their parts
    weighted: dict      # w5*feature, w6*latent, w7*gt
    grads: dict = field(repr=False, default=None)


def student_loss(out, f_t, mu_t, sigma_t, mask, center_depth, teacher, weights=None, grad=False):
    """``w5*L_feature + w6*L_latent + w7*L_gt`` with the teacher's decoders frozen.

    ``L_gt`` decodes the student's mean latent with the teacher's mask and
    center-depth decoders. With ``grad=True`` the returned gradients are with
    respect to ``f_s``, ``mu_s`` and ``sigma_s``.
    """
    w = weights or StudentLossWeights()
    w.validate()
    mu_s, sigma_s = out.dist.mu, out.dist.sigma
    lf, g_f = mse(out.feature, f_t, grad=True)
    lmu, g_mu = mse(mu_s, mu_t, grad=True)
    lsig, g_sig = mse(sigma_s, sigma_t, grad=True)
    ll = w.alpha * lmu + (1 - w.alpha) * lsig
    m_pred, c_mask = teacher.mask_decoder.forward(mu_s)
    cd_pred, c_cd = teacher.cd_decoder.forward(mu_s)
    lm, g_m = bce(m_pred, mask, grad=True)
    ld, g_d = mse(cd_pred[:, 2:], center_depth[:, 2:], grad=True)
    lc, g_c = mse(cd_pred[:, :2], center_depth[:, :2], grad=True)
    lgt = w.w2 * lm + w.w3 * ld + w.w4 * lc
    terms = {"feature": lf, "latent": ll, "gt": lgt, "latent_mu": lmu, "latent_sigma": lsig,
             "gt_mask": lm, "gt_depth": ld, "gt_center": lc}
    weighted = {"feature": w.w5 * lf, "latent": w.w6 * ll, "gt": w.w7 * lgt}
    total = float(sum(weighted.values()))
    grads = None
    if grad:
        dt = mu_s.dtype
        d_mu_gt = teacher.mask_decoder.backward(c_mask, (w.w7 * w.w2 * g_m).astype(dt, copy=False))
        g_cd = np.concatenate([w.w4 * g_c, w.w3 * g_d], axis=1) * w.w7
        d_mu_gt = d_mu_gt + teacher.cd_decoder.backward(c_cd, g_cd.astype(dt, copy=False))
        grads = {"feature": w.w5 * g_f,
                 "mu": w.w6 * w.alpha * g_mu + d_mu_gt,
                 "sigma": w.w6 * (1 - w.alpha) * g_sig}
    else:
        c_mask.used = c_cd.used = True
    return StudentLoss(total, terms, weighted, grads)


def check_frozen(teacher):
    for name, g in teacher.named_grads().items():
        if np.any(g):
            raise FreezeViolation(f"teacher parameter {name} received a gradient")


def teacher_targets(teacher, images, batch=64):
    """Deterministic teacher encodings ``(f_t, mu_t, sigma_t)`` of a stack of images."""
    fs, mus, sigmas = [], [], []
    for i in range(0, len(images), batch):
        f, dist = teacher.encode(images[i:i + batch])
        fs.append(f)
        mus.append(dist.mu)
        sigmas.append(dist.sigma)
    return np.concatenate(fs), np.concatenate(mus), np.concatenate(sigmas)


STUDENT_HISTORY = ("total", "feature", "latent", "gt")
STUDENT_EPOCHS = 40


def train_student(ds, teacher, cfg=None, weights=None, model=None, on_epoch=None):
    """Distil ``teacher`` into a CSI student on ``ds``; the teacher is left untouched."""
    cfg = cfg or TrainingConfig(epochs=STUDENT_EPOCHS)
    weights = weights or StudentLossWeights()
    weights.validate()
    model = model or StudentModel(student_for(teacher.cfg, ds), seed=cfg.seed)
    model.normalizer = Normalizer.fit(ds)
    f_t, mu_t, sig_t = teacher_targets(teacher, ds.image)
    opt = Adam(model, lr=cfg.lr)
    teacher.freeze(True)
    teacher.zero_grad()
    try:
        def step(idx, e, b):
            out = student_forward(model, ds.csi[idx], ds.phase[idx])
            loss = student_loss(out, f_t[idx], mu_t[idx], sig_t[idx], ds.mask[idx], ds.center_depth[idx],
                                teacher, weights, grad=True)
            model.zero_grad()
            student_backward(model, out, loss.grads["feature"], loss.grads["mu"], loss.grads["sigma"])
            check_frozen(teacher)
            opt.step()
            return {"total": loss.total, **{k: loss.terms[k] for k in STUDENT_TERMS}}

        history = training.run(model, len(ds), cfg, step, on_epoch)
    finally:
        teacher.freeze(False)
    return model, history


def student_predict(model, ds, batch=64):
    fs, mus, sigmas = [], [], []
    for i in range(0, len(ds), batch):
        f, dist = model.encode(ds.csi[i:i + batch], ds.phase[i:i + batch])
        fs.append(f)
        mus.append(dist.mu)
        sigmas.append(dist.sigma)
    return np.concatenate(fs), np.concatenate(mus), np.concatenate(sigmas)


def latent_loss(model, teacher, ds, alpha=0.5, per_sample=False):
    """Held-out ``L_latent`` between student and teacher latents."""
    _, mu_s, sig_s = student_predict(model, ds)
    _, mu_t, sig_t = teacher_targets(teacher, ds.image)
    per = alpha * np.mean((mu_s - mu_t) ** 2, 1) + (1 - alpha) * np.mean((sig_s - sig_t) ** 2, 1)
    return per if per_sample else float(per.mean())


@dataclass
class Inference:
    image: np.ndarray       # (N, H, W, 1)
    mask: np.ndarray        # (N, M, M, 1)
    center: np.ndarray      # (N, 2)
    avg_depth: np.ndarray   # (N,)


def infer_depth(student, teacher, csi, phase, batch=64):
    """End-to-end CSI to depth: student mean latent through the teacher's decoders."""
    imgs, masks, cds = [], [], []
    for i in range(0, len(csi), batch):
        _, dist = student.encode(csi[i:i + batch], phase[i:i + batch])
        img, m, cd = teacher.decode(dist.mu)
        imgs.append(img)
        masks.append(m)
        cds.append(cd)
    cd = np.concatenate(cds)
    return Inference(np.concatenate(imgs), np.concatenate(masks), cd[:, :2], cd[:, 2])


# end-to-end baseline ---------------------------------------------------------
class BaselineModel(CsiEncoder):
    """Student-shaped CSI encoder feeding a teacher-shaped image decoder, trained jointly."""

    def __init__(self, cfg=None, teacher_cfg=None, seed=0):
        super().__init__(cfg, seed, label="baseline")
        self.teacher_cfg = teacher_cfg or TeacherConfig(latent=self.cfg.latent)
        self.image_decoder = image_decoder(self.teacher_cfg, Rng(seed).child("baseline"))
        self.graphs["image_decoder"] = self.image_decoder

    def meta(self):
        t = self.teacher_cfg
        return {"kind": "baseline", **super().meta(), "image_height": t.image_height,
                "image_width": t.image_width, "teacher_channels": ",".join(map(str, t.channels)),
                "teacher_hidden": t.hidden}

    @classmethod
    def from_meta(cls, meta):
        cfg = cls.cfg_from_meta(meta)
        tcfg = TeacherConfig(image_height=int(meta["image_height"]), image_width=int(meta["image_width"]),
                             latent=cfg.latent, hidden=int(meta["teacher_hidden"]),
                             channels=tuple(int(v) for v in meta["teacher_channels"].split(",")))
        m = cls(cfg, tcfg)
        if "csi_scale" in meta:
            m.normalizer = Normalizer.from_meta(meta)
        return m

    def predict(self, csi, phase, batch=64):
        out = []
        for i in range(0, len(csi), batch):
            _, dist = self.encode(csi[i:i + batch], phase[i:i + batch])
            out.append(self.image_decoder(dist.mu))
        return np.concatenate(out)


BASELINE_HISTORY = ("total", "kl", "rimg")


def baseline_loss(out, recon, image, weights, grad=False):
    """``beta*KL/kl_norm + MSE(image)``: the plain VAE objective on CSI input."""
    kl_norm = weights.kl_norm or float(np.prod(image.shape[1:3]))
    kl, d_mu, d_sigma = kl_gaussian(out.dist, grad=True)
    rimg, g_img = mse(recon, image, grad=True)
    coef = weights.beta / kl_norm
    total = coef * kl + weights.w1 * rimg
    grads = {"recon": weights.w1 * g_img, "mu": coef * d_mu, "sigma": coef * d_sigma} if grad else None
    return total, {"kl": kl, "rimg": rimg}, grads


def train_baseline(ds, cfg=None, weights=None, model=None, teacher_cfg=None, on_epoch=None):
    """Train the end-to-end baseline. Returns ``(model, history, diverged)``.

    Divergence is a legitimate outcome for this baseline: the model keeps its
    last good parameters and ``diverged`` is set.
    """
    cfg = cfg or TrainingConfig(epochs=STUDENT_EPOCHS)
    weights = weights or TeacherLossWeights()
    weights.validate()
    if model is None:
        h, w = ds.image.shape[1:3]
        tcfg = teacher_cfg or TeacherConfig(image_height=h, image_width=w, crop=ds.mask.shape[1])
        model = BaselineModel(student_for(tcfg, ds), tcfg, seed=cfg.seed)
    model.normalizer = Normalizer.fit(ds)
    opt = Adam(model, lr=cfg.lr)
    noise_rng = Rng(cfg.seed).child("baseline-noise")
    latent = model.cfg.latent

    def step(idx, e, b):
        out = student_forward(model, ds.csi[idx], ds.phase[idx])
        noise = noise_rng.child(e, b).normal((len(idx), latent), np.float32)
        z = reparameterize(out.dist, noise).astype(np.float32, copy=False)
        recon, c_img = model.image_decoder.forward(z)
        total, terms, g = baseline_loss(out, recon, ds.image[idx], weights, grad=True)
        model.zero_grad()
        dz = model.image_decoder.backward(c_img, g["recon"].astype(np.float32, copy=False))
        student_backward(model, out, np.zeros_like(out.feature), dz + g["mu"], dz * noise + g["sigma"])
        opt.step()
        return {"total": total, **terms}

    try:
        history = training.run(model, len(ds), cfg, step, on_epoch)
        return model, history, False
    except training.TrainingDiverged as e:
        return model, e.history, True
