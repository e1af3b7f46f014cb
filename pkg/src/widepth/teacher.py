"""The image-side VAE teacher and its extended loss.

The encoder compresses a moving-depth image into a feature vector ``f_t``
and a diagonal-Gaussian latent. Three decoders read a latent sample: the
image decoder, the shape-mask decoder and the center-depth decoder.

Loss scale
----------
Every reconstruction term is a mean over elements. The KL term is divided
by the number of image pixels before weighting by ``beta``. This matches the
classic summed-over-pixels VAE objective up to one global factor, so
``beta`` keeps its usual meaning relative to the reconstruction error.
"""
from dataclasses import dataclass, field

import numpy as np

from . import training
from .nn import (Adam, Conv2d, ConvTranspose2d, Dense, Flatten, LatentDistribution, Module, ReLU, Reshape,
                 Rng, Sequential, Sigmoid, bce, head_grad, kl_gaussian, mse, reparameterize)
from .training import TrainingConfig


@dataclass
class TeacherConfig:
    image_height: int = 64
    image_width: int = 96
    crop: int = 48
    latent: int = 32
    channels: tuple[int, ...] = (8, 16, 32, 32, 32)
    hidden: int = 128
    mask_channels: tuple[int, ...] = (32, 16, 8)
    image_bias: float = -4.0        # initial logit of the image decoder; moving-depth images are mostly 0

    def validate(self):
        f = 2 ** len(self.channels)
        if self.image_height % f or self.image_width % f:
            raise ValueError(f"image sides must be divisible by {f}")
        if self.crop % 2 ** (len(self.mask_channels) + 1):
            raise ValueError(f"crop must be divisible by {2 ** (len(self.mask_channels) + 1)}")

    @property
    def feature_grid(self):
        f = 2 ** len(self.channels)
        return (self.image_height // f, self.image_width // f, self.channels[-1])

    @property
    def feature_dim(self):
        h, w, c = self.feature_grid
        return h * w * c

    @property
    def pixels(self):
        return self.image_height * self.image_width


@dataclass
class TeacherLossWeights:
    beta: float = 0.5
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    kl_norm: float | None = None    # divisor of the KL sum; None means the image pixel count

    def validate(self):
        for k, v in vars(self).items():
            if v is not None and v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def conv_encoder(in_shape, channels, rng, name):
    layers, cin = [], in_shape[-1]
    for i, c in enumerate(channels):
        layers += [Conv2d(cin, c, rng=rng.child(name, i)), ReLU()]
        cin = c
    return Sequential(layers + [Flatten()], in_shape, name)


def latent_head(in_dim, hidden, latent, rng, name):
    return Sequential([Dense(in_dim, hidden, rng.child(name, 0)), ReLU(),
                       Dense(hidden, 2 * latent, rng.child(name, 1))], (in_dim,), name)


def image_decoder(cfg, rng, name="image_decoder"):
    """Dense to the encoder's feature grid, then one transposed conv per encoder conv."""
    grid = cfg.feature_grid
    layers = [Dense(cfg.latent, cfg.hidden, rng.child(name, "d0")), ReLU(),
              Dense(cfg.hidden, cfg.feature_dim, rng.child(name, "d1")), ReLU(), Reshape(grid)]
    chans = list(cfg.channels[::-1]) + [1]
    for i in range(len(cfg.channels)):
        layers.append(ConvTranspose2d(chans[i], chans[i + 1], rng=rng.child(name, i)))
        if i < len(cfg.channels) - 1:
            layers.append(ReLU())
    layers[-1].params["b"][:] = cfg.image_bias
    return Sequential(layers + [Sigmoid()], (cfg.latent,), name)


def mask_decoder(cfg, rng, name="mask_decoder"):
    n_up = len(cfg.mask_channels) + 1
    side = cfg.crop // 2 ** n_up
    c0 = cfg.mask_channels[0]
    layers = [Dense(cfg.latent, cfg.hidden, rng.child(name, "d0")), ReLU(),
              Dense(cfg.hidden, side * side * c0, rng.child(name, "d1")), ReLU(), Reshape((side, side, c0))]
    chans = list(cfg.mask_channels) + [cfg.mask_channels[-1]]
    for i in range(n_up - 1):
        layers += [ConvTranspose2d(chans[i], chans[i + 1], rng=rng.child(name, i)), ReLU()]
    layers += [ConvTranspose2d(chans[-1], 1, rng=rng.child(name, "out")), Sigmoid()]
    return Sequential(layers, (cfg.latent,), name)


def center_depth_decoder(cfg, rng, name="cd_decoder"):
    return Sequential([Dense(cfg.latent, 64, rng.child(name, 0)), ReLU(),
                       Dense(64, 32, rng.child(name, 1)), ReLU(),
                       Dense(32, 3, rng.child(name, 2)), Sigmoid()], (cfg.latent,), name)


class TeacherModel(Module):
    """Encoder (``P_TF``), latent head (``R_TZ``) and the three decoders."""

    DECODERS = ("image_decoder", "mask_decoder", "cd_decoder")

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or TeacherConfig()
        self.cfg.validate()
        rng = Rng(seed).child("teacher")
        shape = (self.cfg.image_height, self.cfg.image_width, 1)
        self.encoder = conv_encoder(shape, self.cfg.channels, rng, "encoder")
        self.head = latent_head(self.cfg.feature_dim, self.cfg.hidden, self.cfg.latent, rng, "head")
        self.image_decoder = image_decoder(self.cfg, rng)
        self.mask_decoder = mask_decoder(self.cfg, rng)
        self.cd_decoder = center_depth_decoder(self.cfg, rng)
        self.graphs = {g.name: g for g in (self.encoder, self.head, self.image_decoder,
                                           self.mask_decoder, self.cd_decoder)}

    def freeze(self, frozen=True):
        for g in self.graphs.values():
            g.frozen = frozen

    def decode(self, z):
        """``(image, mask, center_depth)`` from latent codes, without caches."""
        return self.image_decoder(z), self.mask_decoder(z), self.cd_decoder(z)

    def encode(self, image):
        """``(f_t, LatentDistribution)`` without caches."""
        f = self.encoder(image)
        return f, LatentDistribution.from_head(self.head(f))

    def meta(self):
        c = self.cfg
        return {"kind": "teacher", "image_height": c.image_height, "image_width": c.image_width,
                "crop": c.crop, "latent": c.latent, "channels": ",".join(map(str, c.channels)),
                "hidden": c.hidden, "mask_channels": ",".join(map(str, c.mask_channels))}

    @classmethod
    def from_meta(cls, meta):
        ints = lambda s: tuple(int(v) for v in s.split(","))
        cfg = TeacherConfig(int(meta["image_height"]), int(meta["image_width"]), int(meta["crop"]),
                            int(meta["latent"]), ints(meta["channels"]), int(meta["hidden"]),
                            ints(meta["mask_channels"]))
        return cls(cfg)


@dataclass
class TeacherOutputs:
    recon: np.ndarray
    mask: np.ndarray
    center_depth: np.ndarray
    dist: LatentDistribution
    feature: np.ndarray
    z: np.ndarray
    noise: np.ndarray
    head: np.ndarray = field(repr=False, default=None)
    caches: dict = field(repr=False, default=None)


def teacher_forward(model, image, noise=None):
    """Full forward pass; ``noise=None`` decodes the mean (same as zero noise)."""
    f, c_enc = model.encoder.forward(image)
    head, c_head = model.head.forward(f)
    dist = LatentDistribution.from_head(head)
    if noise is None:
        noise = np.zeros_like(dist.mu)
    z = reparameterize(dist, noise).astype(dist.mu.dtype, copy=False)
    recon, c_img = model.image_decoder.forward(z)
    mask, c_mask = model.mask_decoder.forward(z)
    cd, c_cd = model.cd_decoder.forward(z)
    caches = {"encoder": c_enc, "head": c_head, "image_decoder": c_img, "mask_decoder": c_mask,
              "cd_decoder": c_cd}
    return TeacherOutputs(recon, mask, cd, dist, f, z, noise, head, caches)


@dataclass
class LossResult:
    total: float
    terms: dict         # unweighted values
    weighted: dict      # contributions summing to total
    grads: dict = field(repr=False, default=None)


TEACHER_TERMS = ("kl", "rimg", "cimg", "depth", "center")
TEACHER_HISTORY = ("total",) + TEACHER_TERMS
TEACHER_EPOCHS = 100


def teacher_loss(out, image, mask, center_depth, weights=None, grad=False):
    """Extended VAE loss ``beta*KL + w1*MSE(img) + w2*BCE(mask) + w3*MSE(d) + w4*MSE(c)``.

    The KL sum is divided by ``weights.kl_norm`` (default: image pixel count).
    """
    w = weights or TeacherLossWeights()
    w.validate()
    kl_norm = w.kl_norm
    if kl_norm is None:
        kl_norm = float(np.prod(image.shape[1:3]))
    kl, d_mu, d_sigma = kl_gaussian(out.dist, grad=True)
    rimg, g_img = mse(out.recon, image, grad=True)
    cimg, g_mask = bce(out.mask, mask, grad=True)
    dep, g_d = mse(out.center_depth[:, 2:], center_depth[:, 2:], grad=True)
    cen, g_c = mse(out.center_depth[:, :2], center_depth[:, :2], grad=True)
    terms = {"kl": kl, "rimg": rimg, "cimg": cimg, "depth": dep, "center": cen}
    coef = {"kl": w.beta / kl_norm, "rimg": w.w1, "cimg": w.w2, "depth": w.w3, "center": w.w4}
    weighted = {k: coef[k] * terms[k] for k in TEACHER_TERMS}
    total = float(sum(weighted.values()))
    grads = None
    if grad:
        g_cd = np.concatenate([w.w4 * g_c, w.w3 * g_d], axis=1)
        grads = {"recon": w.w1 * g_img, "mask": w.w2 * g_mask, "center_depth": g_cd,
                 "mu": coef["kl"] * d_mu, "sigma": coef["kl"] * d_sigma}
    return LossResult(total, terms, weighted, grads)


def teacher_backward(model, out, loss):
    """Accumulate parameter gradients for one loss evaluation."""
    g, c = loss.grads, out.caches
    dt = out.z.dtype
    dz = model.image_decoder.backward(c["image_decoder"], g["recon"].astype(dt, copy=False))
    dz = dz + model.mask_decoder.backward(c["mask_decoder"], g["mask"].astype(dt, copy=False))
    dz = dz + model.cd_decoder.backward(c["cd_decoder"], g["center_depth"].astype(dt, copy=False))
    d_mu = dz + g["mu"]
    d_sigma = dz * out.noise + g["sigma"]
    d_head = head_grad(out.head, d_mu, d_sigma).astype(dt, copy=False)
    d_f = model.head.backward(c["head"], d_head)
    return model.encoder.backward(c["encoder"], d_f, input_grad=False)


def standardize_latent(model, images, batch=64):
    """Re-express the latent so its aggregate over ``images`` has zero mean and unit second moment.

    Per dimension, ``z' = s * (z - c)`` with ``c`` the mean of ``mu`` and
    ``s = 1 / sqrt(var(mu) + mean(sigma^2))``. The head absorbs the affine map
    and every decoder's first dense layer absorbs its inverse, so decoded
    outputs are unchanged while the KL term can only drop (the map is the
    KL-optimal affine change of coordinates). Returns ``(c, s)``.
    """
    p = teacher_predict(model, images, batch)
    mu, sigma = p["mu"].astype(np.float64), p["sigma"].astype(np.float64)
    c = mu.mean(0)
    s = 1.0 / np.sqrt(mu.var(0) + np.mean(sigma ** 2, 0))
    lat = model.cfg.latent
    last = model.head.layers[-1]
    W, b = last.params["W"].astype(np.float64), last.params["b"].astype(np.float64)
    W[:lat] *= s[:, None]
    b[:lat] = s * (b[:lat] - c)
    b[lat:] += np.log(s)
    last.params["W"][...] = W
    last.params["b"][...] = b
    for name in model.DECODERS:
        first = model.graphs[name].layers[0]
        Wd = first.params["W"].astype(np.float64)
        first.params["b"][...] = first.params["b"] + Wd @ c
        first.params["W"][...] = Wd / s[None, :]
    model.touch()
    return c, s


def teacher_for(ds, **overrides):
    """Teacher configuration matching a dataset's image and crop sizes."""
    h, w = ds.image.shape[1:3]
    return TeacherConfig(image_height=h, image_width=w, crop=ds.mask.shape[1], **overrides)


def train_teacher(ds, cfg=None, weights=None, model=None, on_epoch=None, standardize=True):
    """Train a teacher on ``ds``; returns ``(model, history)``.

    With ``standardize`` the latent is re-centered and re-scaled on the
    training images afterwards (see ``standardize_latent``).
    """
    cfg = cfg or TrainingConfig(epochs=TEACHER_EPOCHS)
    weights = weights or TeacherLossWeights()
    weights.validate()
    model = model or TeacherModel(teacher_for(ds), seed=cfg.seed)
    opt = Adam(model, lr=cfg.lr)
    noise_rng = Rng(cfg.seed).child("teacher-noise")
    latent = model.cfg.latent

    def step(idx, e, b):
        noise = noise_rng.child(e, b).normal((len(idx), latent), np.float32)
        out = teacher_forward(model, ds.image[idx], noise)
        loss = teacher_loss(out, ds.image[idx], ds.mask[idx], ds.center_depth[idx], weights, grad=True)
        model.zero_grad()
        teacher_backward(model, out, loss)
        opt.step()
        return {"total": loss.total, **loss.terms}

    history = training.run(model, len(ds), cfg, step, on_epoch)
    if standardize:
        standardize_latent(model, ds.image)
    return model, history


def teacher_predict(model, images, batch=64):
    """Deterministic (mean-latent) outputs over a stack of images, in batches."""
    keys = ("recon", "mask", "center_depth", "mu", "sigma", "feature")
    acc = {k: [] for k in keys}
    for i in range(0, len(images), batch):
        f, dist = model.encode(images[i:i + batch])
        rec, m, cd = model.decode(dist.mu)
        for k, v in zip(keys, (rec, m, cd, dist.mu, dist.sigma, f)):
            acc[k].append(v)
    return {k: np.concatenate(v) for k, v in acc.items()}
