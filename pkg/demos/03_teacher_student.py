"""Teacher, student and baseline on a three-subject dataset, one subject held out.

Smaller than the acceptance setup (six subjects), so expect rougher numbers.
Takes about a minute on one core.
"""
import numpy as np

from widepth import data, metrics as M, simulator as sim, student as S, teacher as T
from widepth.training import TrainingConfig

ds = data.build_dataset(dcfg=sim.DatasetConfig(n_subjects=3, windows_per_subject=250), seed=0)
train = ds.subset(np.flatnonzero(ds.subject != 2))
test = ds.subset(np.flatnonzero(ds.subject == 2))
print(f"{len(train)} training windows, {len(test)} held out; image {ds.image_shape}")

teacher, hist = T.train_teacher(train, TrainingConfig(epochs=T.TEACHER_EPOCHS, seed=0))
print("teacher loss", round(hist[0]["total"], 1), "->", round(hist[-1]["total"], 1))

cfg = TrainingConfig(epochs=S.STUDENT_EPOCHS, seed=0)
student, hist = S.train_student(train, teacher, cfg)
print("held-out latent loss:", round(S.latent_loss(student, teacher, test), 4))
est = S.infer_depth(student, teacher, test.csi, test.phase)

baseline, _, diverged = S.train_baseline(train, cfg)
base = baseline.predict(test.csi, test.phase)

for name, images in (("wi-depth", est.image), ("baseline", base)):
    rep = M.evaluate(test.ids, list(images), list(test.image), "subject-2", mask_threshold=0.05)
    print(name, {k: round(v, 4) for k, v in rep.means.items()})
print("baseline diverged:", diverged)
