import dataclasses

import numpy as np
import pytest

from widepth import data, student as S, teacher as T
from widepth.nn import Rng, ShapeError, checkpoint, gradcheck
from widepth.training import TrainingConfig

T_CFG = T.TeacherConfig(image_height=32, image_width=32, crop=8, latent=3, channels=(2, 2, 2, 2, 2),
                        hidden=6, mask_channels=(2,))
S_CFG = S.StudentConfig(packets=32, n_sub=4, n_rx=2, channels=(2, 2, 2, 2, 2), lstm_hidden=3, lstm_layers=2,
                        phase_hidden=4, fusion_hidden=5, head_hidden=4, feature_dim=T_CFG.feature_dim, latent=3)


def _dataset(n, seed=0):
    r = Rng(seed)
    img = np.zeros((n, 32, 32, 1))
    img[:, 10:16, 12:18] = r.uniform(0.2, 0.8, (n, 6, 6, 1))
    mask = np.zeros((n, 8, 8, 1))
    mask[:, 2:6, 2:6] = 1.0
    f32 = lambda a: np.asarray(a, np.float32)
    return data.Dataset(csi=f32(r.normal((n, 32, 8, 2))), phase=f32(r.uniform(-1, 1, (n, 8))), image=f32(img),
                        mask=f32(mask), center_depth=f32(r.uniform(0.1, 0.9, (n, 3))),
                        has_object=np.ones(n, bool), subject=np.zeros(n, int), ids=np.arange(n))


def _pair(seed=0, dtype=np.float64):
    t = T.TeacherModel(dataclasses.replace(T_CFG), seed=seed).astype(dtype)
    s = S.StudentModel(dataclasses.replace(S_CFG), seed=seed).astype(dtype)
    r = Rng(seed).child("bias")
    for m in (t, s):
        for k, v in m.named_params().items():
            if k.endswith(".b"):
                v += (0.1 * r.normal(v.shape)).astype(v.dtype)
    return t, s


def test_default_student_matches_teacher_feature():
    tc = T.TeacherConfig()
    sc = S.student_for(tc)
    assert sc.feature_dim == tc.feature_dim and sc.latent == tc.latent
    m = S.StudentModel(sc)
    csi = Rng(0).normal((2, 2, 300, 30, 3), np.float32)
    out = S.student_forward(m, csi, np.zeros((2, 62), np.float32))
    assert out.feature.shape == (2, tc.feature_dim)
    assert out.dist.mu.shape == out.dist.sigma.shape == (2, 32)
    assert np.all(np.isfinite(out.feature)) and np.all(out.dist.sigma > 0)


def test_student_config_inferred_from_dataset():
    ds = _dataset(2)
    sc = S.student_for(T_CFG, ds)
    assert (sc.packets, sc.n_sub, sc.n_rx) == (32, 4, 2)


def test_input_shape_mismatch_rejected():
    _, s = _pair()
    with pytest.raises(ShapeError):
        s.encode(np.zeros((1, 31, 8, 2)), np.zeros((1, 8)))
    with pytest.raises(ShapeError):
        s.encode(np.zeros((1, 32, 8, 2)), np.zeros((1, 9)))
    with pytest.raises(ShapeError):
        s.encode(np.zeros((2, 32, 8, 2)), np.zeros((1, 8)))


def test_zero_input_gives_bias_path_value():
    _, s = _pair()
    a = s.encode(np.zeros((3, 32, 8, 2)), np.zeros((3, 8)))
    b = s.encode(np.zeros((1, 32, 8, 2)), np.zeros((1, 8)))
    np.testing.assert_array_equal(a[0][0], a[0][2])
    np.testing.assert_allclose(a[0][:1], b[0], rtol=1e-12)


# loss ----------------------------------------------------------------------------
def _loss_inputs(t, s, ds):
    out = S.student_forward(s, ds.csi, ds.phase)
    return out


def test_identical_outputs_give_zero_feature_and_latent_loss():
    t, s = _pair()
    ds = _dataset(3)
    out = S.student_forward(s, ds.csi, ds.phase)
    mask, cd = t.mask_decoder(out.dist.mu), t.cd_decoder(out.dist.mu)
    loss = S.student_loss(out, out.feature, out.dist.mu, out.dist.sigma, mask, cd, t)
    assert loss.terms["feature"] == 0 and loss.terms["latent"] == 0
    assert loss.terms["gt_depth"] == 0 and loss.terms["gt_center"] == 0
    p = np.clip(mask, 1e-7, 1 - 1e-7)
    floor = np.mean(-p * np.log(p) - (1 - p) * np.log(1 - p))
    assert loss.terms["gt_mask"] == pytest.approx(floor, rel=1e-9)


def test_alpha_one_ignores_sigma():
    t, s = _pair()
    ds = _dataset(3)
    out = S.student_forward(s, ds.csi, ds.phase)
    w = S.StudentLossWeights(alpha=1.0)
    a = S.student_loss(out, out.feature, out.dist.mu, out.dist.sigma, ds.mask, ds.center_depth, t, w)
    b = S.student_loss(out, out.feature, out.dist.mu, out.dist.sigma + 3.0, ds.mask, ds.center_depth, t, w)
    assert a.terms["latent"] == b.terms["latent"] == 0
    assert b.terms["latent_sigma"] > 0


def test_loss_decomposition():
    t, s = _pair()
    ds = _dataset(4)
    out = S.student_forward(s, ds.csi, ds.phase)
    f_t, mu_t, sig_t = S.teacher_targets(t, ds.image)
    w = S.StudentLossWeights(w5=0.7, w6=1.3, w7=2.0, alpha=0.25, w2=0.5, w3=2.0, w4=3.0)
    loss = S.student_loss(out, f_t, mu_t, sig_t, ds.mask, ds.center_depth, t, w)
    assert loss.total == pytest.approx(0.7 * loss.terms["feature"] + 1.3 * loss.terms["latent"]
                                       + 2.0 * loss.terms["gt"], abs=1e-6)
    assert loss.terms["latent"] == pytest.approx(0.25 * loss.terms["latent_mu"] + 0.75 * loss.terms["latent_sigma"])
    assert loss.terms["gt"] == pytest.approx(0.5 * loss.terms["gt_mask"] + 2.0 * loss.terms["gt_depth"]
                                             + 3.0 * loss.terms["gt_center"])
    with pytest.raises(ValueError):
        S.StudentLossWeights(alpha=1.5).validate()


@pytest.mark.parametrize("w7", [0.0, 1.0])
def test_composite_loss_gradients_match_finite_differences(w7):
    t, s = _pair(seed=3)
    t.freeze(True)
    ds = _dataset(2, seed=4)
    f_t, mu_t, sig_t = S.teacher_targets(t, ds.image.astype(np.float64))
    f_t = f_t + 0.3     # keep targets away from the student's outputs
    w = S.StudentLossWeights(w7=w7)
    args = (f_t, mu_t, sig_t, ds.mask.astype(np.float64), ds.center_depth.astype(np.float64), t, w)

    def loss_fn():
        return S.student_loss(S.student_forward(s, ds.csi, ds.phase), *args).total

    out = S.student_forward(s, ds.csi, ds.phase)
    loss = S.student_loss(out, *args, grad=True)
    s.zero_grad()
    t.zero_grad()
    S.student_backward(s, out, loss.grads["feature"], loss.grads["mu"], loss.grads["sigma"])
    S.check_frozen(t)
    errs = gradcheck.check_tensors(loss_fn, s.named_grads(), s.named_params(), max_entries=10)
    assert max(errs.values()) < 1e-4, max(errs, key=errs.get)


def test_unfrozen_teacher_is_a_freeze_violation():
    t, s = _pair()
    ds = _dataset(2)
    out = S.student_forward(s, ds.csi, ds.phase)
    f_t, mu_t, sig_t = S.teacher_targets(t, ds.image)
    t.zero_grad()
    S.student_loss(out, f_t, mu_t, sig_t, ds.mask, ds.center_depth, t, grad=True)
    with pytest.raises(S.FreezeViolation):
        S.check_frozen(t)


# training and inference ------------------------------------------------------------
def _trained(seed=0, epochs=3):
    ds = _dataset(24)
    t = T.TeacherModel(dataclasses.replace(T_CFG), seed=0)
    before = checkpoint.dumps(t.named_params(), t.meta())
    s = S.StudentModel(dataclasses.replace(S_CFG), seed=seed)
    s, hist = S.train_student(ds, t, TrainingConfig(batch_size=4, epochs=epochs, seed=seed), model=s)
    return ds, t, s, hist, before


def test_student_training_leaves_teacher_untouched_and_is_deterministic():
    ds, t, s, hist, before = _trained()
    assert checkpoint.dumps(t.named_params(), t.meta()) == before
    assert not any(g.frozen for g in t.graphs.values())
    _, _, s2, hist2, _ = _trained()
    assert s.param_hash() == s2.param_hash() and hist == hist2
    assert set(hist[0]) == {"epoch", "total", "feature", "latent", "gt"}


def test_inference_is_deterministic():
    ds, t, s, _, _ = _trained(epochs=1)
    a = S.infer_depth(s, t, ds.csi, ds.phase)
    b = S.infer_depth(s, t, ds.csi, ds.phase)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.image.shape == (24, 32, 32, 1) and a.mask.shape == (24, 8, 8, 1)
    assert a.center.shape == (24, 2) and a.avg_depth.shape == (24,)
    _, dist = s.encode(ds.csi, ds.phase)
    np.testing.assert_array_equal(a.image, t.image_decoder(dist.mu))


def test_student_checkpoint_keeps_normalizer(tmp_path):
    _, _, s, _, _ = _trained(epochs=1)
    checkpoint.save(tmp_path / "s.widp", s.named_params(), s.meta())
    params, meta = checkpoint.load(tmp_path / "s.widp")
    s2 = S.StudentModel.from_meta(meta)
    s2.load_params(params)
    assert s2.param_hash() == s.param_hash()
    assert s2.normalizer.csi_scale == pytest.approx(s.normalizer.csi_scale)
    np.testing.assert_allclose(s2.normalizer.phase_mean, s.normalizer.phase_mean)


def test_baseline_trains_and_round_trips(tmp_path):
    ds = _dataset(16)
    m = S.BaselineModel(dataclasses.replace(S_CFG), dataclasses.replace(T_CFG), seed=1)
    m, hist, diverged = S.train_baseline(ds, TrainingConfig(batch_size=4, epochs=2), model=m)
    assert not diverged and set(hist[0]) == {"epoch", "total", "kl", "rimg"}
    pred = m.predict(ds.csi, ds.phase)
    assert pred.shape == ds.image.shape and pred.min() >= 0 and pred.max() <= 1
    checkpoint.save(tmp_path / "b.widp", m.named_params(), m.meta())
    params, meta = checkpoint.load(tmp_path / "b.widp")
    m2 = S.BaselineModel.from_meta(meta)
    m2.load_params(params)
    np.testing.assert_array_equal(m2.predict(ds.csi, ds.phase), pred)


def test_autoencoder_baseline_has_no_kl_pressure():
    ds = _dataset(8)
    m = S.BaselineModel(dataclasses.replace(S_CFG), dataclasses.replace(T_CFG), seed=1)
    out = S.student_forward(m, ds.csi, ds.phase)
    recon = m.image_decoder(out.dist.mu)
    total, terms, _ = S.baseline_loss(out, recon, ds.image, T.TeacherLossWeights(beta=0.0))
    assert total == pytest.approx(terms["rimg"])


def test_baseline_divergence_is_an_outcome(monkeypatch):
    ds = _dataset(16)
    calls = {"n": 0}
    real = S.baseline_loss

    def exploding(*a, **k):
        calls["n"] += 1
        total, terms, g = real(*a, **k)
        return (float("nan") if calls["n"] > 5 else total), terms, g

    monkeypatch.setattr(S, "baseline_loss", exploding)
    m = S.BaselineModel(dataclasses.replace(S_CFG), dataclasses.replace(T_CFG), seed=1)
    m, hist, diverged = S.train_baseline(ds, TrainingConfig(batch_size=4, epochs=10, fraction=1.0), model=m)
    assert diverged
    assert all(np.all(np.isfinite(v)) for v in m.named_params().values())
