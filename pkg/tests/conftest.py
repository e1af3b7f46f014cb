import time

import numpy as np
import pytest

ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """``log(criterion, passed, detail)`` records one line for the terminal summary."""
    def log(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


class Lab:
    """Session cache of the six-subject dataset and of models trained on its folds."""

    def __init__(self):
        from widepth import data
        t = time.perf_counter()
        self.ds = data.build_dataset(seed=0)
        self.build_seconds = time.perf_counter() - t
        self.teachers = {}
        self.students = {}
        self.baselines = {}
        self.seconds = {}

    def fold(self, holdout):
        s = self.ds.subject
        return self.ds.subset(np.flatnonzero(s != holdout)), self.ds.subset(np.flatnonzero(s == holdout))

    def teacher(self, holdout, seed, ablate=False):
        from widepth import teacher as T
        from widepth.training import TrainingConfig
        key = (holdout, seed, ablate)
        if key not in self.teachers:
            train, _ = self.fold(holdout)
            w = T.TeacherLossWeights(w2=0.0, w3=0.0, w4=0.0) if ablate else T.TeacherLossWeights()
            t = time.perf_counter()
            self.teachers[key] = T.train_teacher(train, TrainingConfig(epochs=T.TEACHER_EPOCHS, seed=seed), w)
            self.seconds["teacher", key] = time.perf_counter() - t
        return self.teachers[key]

    def student(self, holdout, seed, ablate=False):
        from widepth import student as S
        from widepth.nn import checkpoint
        from widepth.training import TrainingConfig
        key = (holdout, seed, ablate)
        if key not in self.students:
            train, test = self.fold(holdout)
            teacher, _ = self.teacher(holdout, seed, ablate)
            model = S.StudentModel(S.student_for(teacher.cfg, train), seed=seed)
            model.normalizer = data_normalizer(train)
            before_latent = S.latent_loss(model, teacher, test)
            before_mu = S.latent_loss(model, teacher, test, alpha=1.0)
            before_blob = checkpoint.dumps(teacher.named_params(), teacher.meta())
            w = S.StudentLossWeights(w2=0.0, w3=0.0, w4=0.0) if ablate else S.StudentLossWeights()
            t = time.perf_counter()
            model, hist = S.train_student(train, teacher, TrainingConfig(epochs=S.STUDENT_EPOCHS, seed=seed), w,
                                          model=model)
            self.seconds["student", key] = time.perf_counter() - t
            after_blob = checkpoint.dumps(teacher.named_params(), teacher.meta())
            self.students[key] = dict(model=model, history=hist, latent_before=before_latent,
                                      latent_after=S.latent_loss(model, teacher, test),
                                      mu_before=before_mu, mu_after=S.latent_loss(model, teacher, test, alpha=1.0),
                                      teacher_unchanged=before_blob == after_blob)
        return self.students[key]

    def baseline(self, holdout, seed):
        from widepth import student as S
        from widepth.training import TrainingConfig
        key = (holdout, seed)
        if key not in self.baselines:
            train, _ = self.fold(holdout)
            t = time.perf_counter()
            self.baselines[key] = S.train_baseline(train, TrainingConfig(epochs=S.STUDENT_EPOCHS, seed=seed))
            self.seconds["baseline", key] = time.perf_counter() - t
        return self.baselines[key]


def data_normalizer(ds):
    from widepth.data import Normalizer
    return Normalizer.fit(ds)


@pytest.fixture(scope="session")
def lab():
    return Lab()
