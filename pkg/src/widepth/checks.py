"""Finite-difference checks of the two composite losses on miniature 64-bit models."""
import numpy as np

from . import student as S, teacher as T
from .nn import Rng, gradcheck

TINY_TEACHER = dict(image_height=32, image_width=32, crop=8, latent=3, channels=(2, 2, 2, 2, 2), hidden=6,
                    mask_channels=(2,))
TINY_STUDENT = dict(packets=32, n_sub=4, n_rx=2, channels=(2, 2, 2, 2, 2), lstm_hidden=3, lstm_layers=2,
                    phase_hidden=4, fusion_hidden=5, head_hidden=4, latent=3)


def _jitter_biases(model, rng):
    # zero biases leave ReLUs on their kink wherever the input is blank
    for k, v in model.named_params().items():
        if k.endswith(".b"):
            v += 0.1 * rng.normal(v.shape)


def _targets(rng, n):
    img = np.zeros((n, 32, 32, 1))
    img[:, 10:16, 12:18] = rng.uniform(0.2, 0.8, (n, 6, 6, 1))
    mask = np.zeros((n, 8, 8, 1))
    mask[:, 2:6, 2:6] = 1.0
    return img, mask, rng.uniform(0.1, 0.9, (n, 3))


def teacher_loss_check(seed=0, max_entries=12):
    """Max relative error of the extended VAE loss gradient over every teacher parameter."""
    rng = Rng(seed).child("teacher-check")
    m = T.TeacherModel(T.TeacherConfig(**TINY_TEACHER), seed=seed).astype(np.float64)
    _jitter_biases(m, rng)
    img, mask, cd = _targets(rng, 2)
    noise = rng.normal((2, 3))
    w = T.TeacherLossWeights(kl_norm=8.0)

    out = T.teacher_forward(m, img, noise)
    loss = T.teacher_loss(out, img, mask, cd, w, grad=True)
    m.zero_grad()
    T.teacher_backward(m, out, loss)
    errs = gradcheck.check_tensors(
        lambda: T.teacher_loss(T.teacher_forward(m, img, noise), img, mask, cd, w).total,
        m.named_grads(), m.named_params(), max_entries, rng.child("entries"))
    return max(errs.values())


def student_loss_check(seed=0, max_entries=10):
    """Max relative error of the three-level student loss gradient through a frozen teacher."""
    rng = Rng(seed).child("student-check")
    t = T.TeacherModel(T.TeacherConfig(**TINY_TEACHER), seed=seed).astype(np.float64)
    s = S.StudentModel(S.StudentConfig(feature_dim=t.cfg.feature_dim, **TINY_STUDENT), seed=seed)
    s.astype(np.float64)
    _jitter_biases(t, rng)
    _jitter_biases(s, rng)
    t.freeze(True)
    img, mask, cd = _targets(rng, 2)
    csi = rng.normal((2, 32, 8, 2))
    phase = rng.uniform(-1, 1, (2, 8))
    f_t, mu_t, sig_t = S.teacher_targets(t, img)
    args = (f_t + 0.3, mu_t, sig_t, mask, cd, t, S.StudentLossWeights())

    out = S.student_forward(s, csi, phase)
    loss = S.student_loss(out, *args, grad=True)
    s.zero_grad()
    t.zero_grad()
    S.student_backward(s, out, loss.grads["feature"], loss.grads["mu"], loss.grads["sigma"])
    S.check_frozen(t)
    t.freeze(False)
    errs = gradcheck.check_tensors(
        lambda: S.student_loss(S.student_forward(s, csi, phase), *args).total,
        s.named_grads(), s.named_params(), max_entries, rng.child("entries"))
    return max(errs.values())


def full_suite(seed=0):
    """``{check name: max relative error}`` for every layer kind and both composite losses."""
    out = dict(gradcheck.run_layer_suite(seed))
    out["teacher-loss"] = teacher_loss_check(seed)
    out["student-loss"] = student_loss_check(seed)
    return out
