"""Command-line pipeline: ``python -m widepth <command> [--config F] [--seed N] [--out DIR] [--set k=v ...]``.

Every command writes into ``--out``: its outputs, the fully resolved
configuration (``config.cfg``) and the seed (``seed``). Work happens in a
sibling ``.partial`` directory that is renamed on success and removed on
failure, so a failed run leaves nothing behind. Errors print one line,
``error: <kind>: <message>``, and exit with status 2.
"""
import argparse
import csv
import dataclasses
import os
import shutil
import sys
from dataclasses import dataclass

import numpy as np

from . import checks, config as kv, csi, data, depth, metrics, simulator as sim, student as S, teacher as T
from .nn import checkpoint, gradcheck
from .training import TrainingConfig, write_history

COMMANDS = ("simulate", "preprocess", "train-teacher", "train-student", "train-baseline", "evaluate", "infer",
            "gradcheck")


@dataclass
class Paths:
    data: str = ""          # dataset directory (from simulate) or .npz (from preprocess)
    teacher: str = ""       # teacher checkpoint
    model: str = ""         # student or baseline checkpoint
    holdout: int = 0        # held-out subject; -1 trains and evaluates on everything


@dataclass
class EvalConfig:
    mask_threshold: float = 0.05
    max_shift: int = -1     # -1: half the smaller image side


@dataclass
class TeacherArch:
    latent: int = 32
    channels: tuple[int, ...] = (8, 16, 32, 32, 32)
    hidden: int = 128
    mask_channels: tuple[int, ...] = (32, 16, 8)


def _sections():
    return {"run": Paths(), "scene": sim.SceneConfig(), "channel": sim.ChannelConfig(),
            "dataset": sim.DatasetConfig(), "preprocess": csi.PreprocessConfig(),
            "depth": depth.DepthPrepConfig(), "teacher_arch": TeacherArch(),
            "teacher_train": TrainingConfig(epochs=T.TEACHER_EPOCHS),
            "teacher_loss": T.TeacherLossWeights(),
            "student_train": TrainingConfig(epochs=S.STUDENT_EPOCHS),
            "student_loss": S.StudentLossWeights(), "eval": EvalConfig()}


@dataclass
class RunConfig:
    seed: int
    sections: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    def items(self):
        out = {"seed": str(self.seed)}
        for name, obj in self.sections.items():
            out.update({f"{name}.{k}": v for k, v in kv.to_kv(obj).items()})
        return out


def resolve(config_path=None, seed=None, overrides=()):
    """Merge defaults, a ``key = value`` file and ``section.key=value`` overrides."""
    items = kv.read_kv(config_path) if config_path else {}
    for o in overrides:
        if "=" not in o:
            raise kv.ConfigError(f"--set expects key=value, got {o!r}")
        k, _, v = o.partition("=")
        items[k.strip()] = v.strip()
    sections = _sections()
    grouped = {name: {} for name in sections}
    run_seed = 0
    for key, value in items.items():
        if key == "seed":
            run_seed = int(value)
            continue
        name, dot, field = key.partition(".")
        if not dot or name not in sections:
            raise kv.ConfigError(f"unknown key {key!r}")
        grouped[name][field] = value
    for name, obj in sections.items():
        if grouped[name]:
            sections[name] = kv.from_kv(type(obj), {**kv.to_kv(obj), **grouped[name]})
            sections[name] = dataclasses.replace(sections[name])
    if seed is not None:
        run_seed = int(seed)
    if not 0 <= run_seed < 2 ** 64:
        raise kv.ConfigError(f"seed must be an unsigned 64-bit integer, got {run_seed}")
    for name in ("teacher_train", "student_train"):
        sections[name] = dataclasses.replace(sections[name], seed=run_seed)
    return RunConfig(run_seed, sections)


# helpers ------------------------------------------------------------------------
def load_dataset(rc):
    path = rc.run.data
    if not path:
        raise FileNotFoundError("run.data is not set")
    if os.path.isdir(path):
        return data.load_generated(path, rc.preprocess, rc.depth)
    return data.Dataset.load(path)


def split(rc, ds):
    """``(train, test)`` datasets for the configured held-out subject."""
    h = rc.run.holdout
    if h < 0:
        return ds, ds
    if h not in set(ds.subject.tolist()):
        raise ValueError(f"held-out subject {h} not in dataset (subjects {sorted(set(ds.subject.tolist()))})")
    return ds.subset(np.flatnonzero(ds.subject != h)), ds.subset(np.flatnonzero(ds.subject == h))


def load_teacher(path):
    params, meta = checkpoint.load(path)
    if meta.get("kind") != "teacher":
        raise checkpoint.CheckpointError(f"{path}: not a teacher checkpoint")
    m = T.TeacherModel.from_meta(meta)
    m.load_params(params)
    return m


def load_encoder(path):
    params, meta = checkpoint.load(path)
    cls = {"student": S.StudentModel, "baseline": S.BaselineModel}.get(meta.get("kind"))
    if cls is None:
        raise checkpoint.CheckpointError(f"{path}: not a student or baseline checkpoint")
    m = cls.from_meta(meta)
    m.load_params(params)
    return m


def _write_split(out, train, test):
    with open(os.path.join(out, "split.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"train {len(train)} {data.split_hash(train.ids)}\n")
        fh.write(f"test {len(test)} {data.split_hash(test.ids)}\n")


# commands -----------------------------------------------------------------------
def cmd_simulate(rc, out):
    dest = os.path.join(out, "dataset")
    info = sim.generate_dataset(dest, rc.scene, rc.channel, rc.dataset, rc.seed)
    return f"{info['windows']} windows, {info['frames']} frames"


def cmd_preprocess(rc, out):
    ds = load_dataset(rc)
    ds.save(os.path.join(out, "dataset.npz"))
    return f"{len(ds)} samples"


def cmd_train_teacher(rc, out):
    train, test = split(rc, load_dataset(rc))
    a = rc.teacher_arch
    model = T.TeacherModel(T.teacher_for(train, latent=a.latent, channels=a.channels, hidden=a.hidden,
                                         mask_channels=a.mask_channels), seed=rc.seed)
    model, hist = T.train_teacher(train, rc.teacher_train, rc.teacher_loss, model=model)
    checkpoint.save(os.path.join(out, "teacher.widp"), model.named_params(), model.meta())
    write_history(os.path.join(out, "history.csv"), hist, T.TEACHER_HISTORY)
    _write_split(out, train, test)
    return f"final loss {hist[-1]['total']:.6g}"


def cmd_train_student(rc, out):
    train, test = split(rc, load_dataset(rc))
    teacher = load_teacher(rc.run.teacher)
    model = S.StudentModel(S.student_for(teacher.cfg, train), seed=rc.seed)
    model, hist = S.train_student(train, teacher, rc.student_train, rc.student_loss, model=model)
    checkpoint.save(os.path.join(out, "student.widp"), model.named_params(), model.meta())
    write_history(os.path.join(out, "history.csv"), hist, S.STUDENT_HISTORY)
    _write_split(out, train, test)
    return f"final loss {hist[-1]['total']:.6g}"


def cmd_train_baseline(rc, out):
    train, test = split(rc, load_dataset(rc))
    a = rc.teacher_arch
    tcfg = T.teacher_for(train, latent=a.latent, channels=a.channels, hidden=a.hidden,
                         mask_channels=a.mask_channels)
    model = S.BaselineModel(S.student_for(tcfg, train), tcfg, seed=rc.seed)
    model, hist, diverged = S.train_baseline(train, rc.student_train, rc.teacher_loss, model=model)
    checkpoint.save(os.path.join(out, "baseline.widp"), model.named_params(), model.meta())
    write_history(os.path.join(out, "history.csv"), hist, S.BASELINE_HISTORY)
    with open(os.path.join(out, "status.txt"), "w", encoding="utf-8") as fh:
        fh.write("diverged\n" if diverged else "ok\n")
    _write_split(out, train, test)
    return "diverged (kept last good parameters)" if diverged else f"final loss {hist[-1]['total']:.6g}"


def predict_images(rc, test):
    enc = load_encoder(rc.run.model)
    if isinstance(enc, S.BaselineModel):
        return enc.predict(test.csi, test.phase), None
    teacher = load_teacher(rc.run.teacher)
    inf = S.infer_depth(enc, teacher, test.csi, test.phase)
    return inf.image, inf


def cmd_evaluate(rc, out):
    _, test = split(rc, load_dataset(rc))
    images, _ = predict_images(rc, test)
    max_shift = None if rc.eval.max_shift < 0 else rc.eval.max_shift
    name = "all" if rc.run.holdout < 0 else f"subject-{rc.run.holdout}"
    rep = metrics.evaluate(test.ids, list(images), list(test.image), name, rc.eval.mask_threshold, max_shift)
    rep.write_csv(os.path.join(out, "report.csv"))
    m = rep.means
    return " ".join(f"{k}={m[k]:.4f}" for k in metrics.METRICS)


def cmd_infer(rc, out):
    _, test = split(rc, load_dataset(rc))
    images, inf = predict_images(rc, test)
    img_dir = os.path.join(out, "images")
    os.makedirs(img_dir)
    for sid, img in zip(test.ids, images):
        depth.write_normalized(os.path.join(img_dir, f"{sid}.pgm"), img[..., 0])
    with open(os.path.join(out, "components.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id", "center_x", "center_y", "avg_depth"])
        for i, sid in enumerate(test.ids):
            if inf is None:
                cc = depth.core_components(images[i][..., 0], threshold=rc.eval.mask_threshold)
                vals = (*cc.center, cc.avg_depth)
            else:
                vals = (inf.center[i, 0], inf.center[i, 1], inf.avg_depth[i])
            wr.writerow([sid] + [f"{float(v):.6f}" for v in vals])
    return f"{len(test)} images"


def cmd_gradcheck(rc, out):
    errs = checks.full_suite(rc.seed)
    with open(os.path.join(out, "gradcheck.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["check", "max_rel_error", "status"])
        for k, v in errs.items():
            wr.writerow([k, f"{v:.3e}", "pass" if v < gradcheck.TOL else "fail"])
    for k, v in errs.items():
        print(f"{k:20s} {v:.3e} {'pass' if v < gradcheck.TOL else 'FAIL'}")
    bad = [k for k, v in errs.items() if not v < gradcheck.TOL]
    if bad:
        raise GradcheckFailed(f"{', '.join(bad)} above {gradcheck.TOL:g}")
    return f"{len(errs)} checks passed"


class GradcheckFailed(RuntimeError):
    pass


HANDLERS = {"simulate": cmd_simulate, "preprocess": cmd_preprocess, "train-teacher": cmd_train_teacher,
            "train-student": cmd_train_student, "train-baseline": cmd_train_baseline, "evaluate": cmd_evaluate,
            "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def parser():
    p = argparse.ArgumentParser(prog="widepth", description="Wi-Fi CSI to depth image pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value file; keys are section.field")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory (must not exist)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    return p


def run(argv=None):
    """Run one command; returns the process exit status."""
    args = parser().parse_args(argv)
    out = os.path.abspath(args.out)
    partial = out + ".partial"
    try:
        if os.path.exists(out):
            raise FileExistsError(f"output directory {out} already exists")
        rc = resolve(args.config, args.seed, args.set)
        shutil.rmtree(partial, ignore_errors=True)
        os.makedirs(partial)
        kv.write_kv(os.path.join(partial, "config.cfg"), rc.items())
        with open(os.path.join(partial, "seed"), "w", encoding="utf-8") as fh:
            fh.write(f"{rc.seed}\n")
        summary = HANDLERS[args.command](rc, partial)
        os.rename(partial, out)
    except Exception as e:      # noqa: BLE001 - every failure becomes one line
        shutil.rmtree(partial, ignore_errors=True)
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 2
    print(f"{args.command}: {summary}")
    return 0


def main():
    sys.exit(run())
