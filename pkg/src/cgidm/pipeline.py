"""Experiment stages on disk: data, pretrain, finetune, mask, invert, baseline, evaluate, mia, sweep.

Layout of a run directory::

    data/manifest.csv, data/<class>/<id>.pgm, data/corpus/<n>.pgm
    checkpoints/pretrain/theta.ckpt, checkpoints/finetune/theta_prime_<class>.ckpt (+ latent variants)
    masked/<class>/<id>.pgm, masked/<class>/<id>_mask.pgm
    inverted/<method>/<class>/<id>.pgm, traces/<method>/<class>.csv
    baseline/<pipeline>/<class>/<id>_<k>.pgm
    reports/*.csv
    stamps/<stage>.txt

Each stage writes a stamp holding its lineage key, a hash of its own config
sections chained with the keys of the stages it reads. Downstream stages
refuse stale or missing inputs (``force`` skips the check for mismatches), and
sweeps reuse any upstream stage whose key is unchanged.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen, diffusion, inversion, masking, metrics, mia
from .config import ExperimentConfig
from .files import read_csv, read_pgm, write_csv, write_pgm, atomic_write_text
from .neural_net import load_checkpoint, save_checkpoint, train_autoencoder
from .tensor_core import Rng, split_seed

log = logging.getLogger(__name__)

UPSTREAM = {
    "data": [],
    "pretrain": ["data"],
    "finetune": ["pretrain"],
    "mask": ["data"],
    "invert": ["finetune", "mask"],
    "baseline": ["finetune"],
    "evaluate": ["invert", "baseline"],
    "mia": ["finetune"],
}
OWN_SECTIONS = {
    "data": ["experiment", "data"],
    "pretrain": ["schedule", "pretrain", "latent"],
    "finetune": ["finetune"],
    "mask": ["mask"],
    "invert": ["inversion"],
    "baseline": ["baseline"],
    "evaluate": ["evaluate"],
    "mia": ["mia"],
}
STAGE_DIRS = {
    "data": ["data"],
    "pretrain": ["checkpoints/pretrain", "reports/pretrain"],
    "finetune": ["checkpoints/finetune", "reports/finetune"],
    "mask": ["masked", "reports/mask"],
    "invert": ["inverted", "traces"],
    "baseline": ["baseline"],
}
INVERSION_SOURCES = ("cgi", "direct", "latent")
BASELINE_SOURCES = ("text2img", "img2img", "inpaint")


class MissingArtifact(RuntimeError):
    pass


def stream(seed: int, name: str) -> Rng:
    """Independent named stream for one stage; workers split it further by XOR."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return Rng(int(ss.generate_state(1, np.uint64)[0]))


def stage_key(cfg: ExperimentConfig, stage: str) -> str:
    h = hashlib.sha256(cfg.canonical(OWN_SECTIONS[stage]).encode())
    if stage == "pretrain":
        # the latent models are trained only when the latent method is requested
        h.update(b"latent" if "latent" in cfg["inversion"]["methods"] else b"pixel")
    for up in UPSTREAM[stage]:
        h.update(stage_key(cfg, up).encode())
    return h.hexdigest()[:16]


class Run:
    """A run directory bound to one config."""

    def __init__(self, out, cfg: ExperimentConfig, jobs: int = 1, force: bool = False):
        self.out = Path(out)
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.force = force
        self.seed = cfg["experiment"]["seed"]
        s = cfg["schedule"]
        self.sched = diffusion.build_schedule(s["T"], s["beta_min"], s["beta_max"])

    # bookkeeping ----------------------------------------------------------

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def comment(self, stage: str) -> str:
        return f"config_hash={self.cfg.hash()} stage={stage} key={stage_key(self.cfg, stage)}"

    def csv(self, rel, header, rows, stage: str) -> None:
        write_csv(self.path(rel), header, rows, self.comment(stage))

    def stamp(self, stage: str, suffix: str = "") -> None:
        atomic_write_text(self.path("stamps", f"{stage}{suffix}.txt"), stage_key(self.cfg, stage) + "\n")

    def stamp_ok(self, stage: str, suffix: str = "") -> bool:
        p = self.path("stamps", f"{stage}{suffix}.txt")
        return p.exists() and p.read_text().strip() == stage_key(self.cfg, stage)

    def require(self, stage: str, suffix: str = "") -> None:
        p = self.path("stamps", f"{stage}{suffix}.txt")
        if not p.exists():
            raise MissingArtifact(f"missing artifact: {stage}{suffix} output in {self.out} "
                                  f"(run the '{_cmd(stage)}' stage first)")
        if not self.stamp_ok(stage, suffix) and not self.force:
            raise MissingArtifact(f"{stage}{suffix} artifacts in {self.out} were made with a different "
                                  f"config (stage key mismatch); rerun '{_cmd(stage)}' or pass --force")

    def load(self, *parts):
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifact(f"missing artifact: {p}")
        return load_checkpoint(p)

    # data -----------------------------------------------------------------

    def gen_data(self) -> None:
        cfg, d = self.cfg, self.cfg["data"]
        size = cfg["experiment"]["size"]
        rng = stream(self.seed, "data")
        shutil.rmtree(self.path("data"), ignore_errors=True)
        rows = []
        corpus = [datagen.gen_style(datagen.random_style(rng.split(100 + i)), d["pretrain_per_style"],
                                    size, rng.split(200 + i)) for i in range(d["pretrain_styles"])]
        classes = self._eval_classes(rng, size)
        for si, (name, imgs, spec) in enumerate(classes):
            _, _, mem_idx, _ = datagen.split_membership(imgs, rng.split(400 + si))
            mem = set(int(i) for i in mem_idx)
            for j, img in enumerate(imgs):
                rel = f"data/{name}/{j:03d}.pgm"
                write_pgm(self.path(rel), img)
                rows.append((name, j, int(j in mem), "member" if j in mem else "holdout", rel))
            if d["public_per_style"] and spec is not None:
                # extra images of the style that never enter the member/holdout split
                pub = datagen.gen_style(spec, d["public_per_style"], size, rng.split(700 + si))
                keep = _drop_near(pub, imgs, d["dedup_tau"])
                corpus.append(pub[keep])
        n = 0
        for block in corpus:
            for img in block:
                rel = f"data/corpus/{n:05d}.pgm"
                write_pgm(self.path(rel), img)
                rows.append(("corpus", n, 0, "corpus", rel))
                n += 1
        self.csv("data/manifest.csv", ["class", "image", "is_member", "split", "path"], rows, "data")
        self.stamp("data")

    def _eval_classes(self, rng: Rng, size: int):
        d = self.cfg["data"]
        if d["import_dir"] is not None:
            root = Path(d["import_dir"])
            if not root.is_dir():
                raise MissingArtifact(f"import directory not found: {root}")
            out = []
            for sub in sorted(p for p in root.iterdir() if p.is_dir()):
                imgs = np.stack([read_pgm(f) for f in sorted(sub.glob("*.pgm"))])
                if imgs.shape[1:] != (size, size):
                    raise ValueError(f"{sub}: images must be {size}x{size}")
                kept, _ = metrics.dedup_filter(imgs, d["dedup_tau"])
                out.append((sub.name, np.stack(kept), None))
            return out
        return [(f"s{si}_{spec.kind}", datagen.gen_style(spec, d["per_style"], size, rng.split(300 + si)), spec)
                for si, spec in enumerate(datagen.default_styles(d["n_styles"]))]

    def manifest(self):
        self.require("data")
        _, rows, _ = read_csv(self.path("data/manifest.csv"))
        return rows

    def corpus(self):
        """Pretraining images: the random-style corpus plus each class's public images."""
        return np.stack([read_pgm(self.path(r["path"])) for r in self.manifest() if r["split"] == "corpus"])

    def classes(self):
        """``{class: (images, is_member)}`` for the member/holdout sets."""
        out = {}
        for r in self.manifest():
            if r["split"] in ("member", "holdout"):
                out.setdefault(r["class"], ([], []))
                out[r["class"]][0].append(read_pgm(self.path(r["path"])))
                out[r["class"]][1].append(r["is_member"] == "1")
        return {c: (np.stack(i), np.array(m)) for c, (i, m) in out.items()}

    # models ---------------------------------------------------------------

    def pretrain(self) -> None:
        p = self.cfg["pretrain"]
        corpus = self.corpus()
        log_rows = []
        conf = diffusion.PretrainConfig(p["steps"], p["batch_size"], p["lr"], p["hidden"], p["time_embed_dim"])
        theta = diffusion.pretrain(corpus, self.sched, stream(self.seed, "pretrain"), conf, log_rows)
        save_checkpoint(self.path("checkpoints/pretrain/theta.ckpt"), theta)
        self.csv("reports/pretrain/loss.csv", ["step", "loss"], log_rows, "pretrain")
        if "latent" in self.cfg["inversion"]["methods"]:
            ls = self.cfg["latent"]["size"]
            ae = train_autoencoder(corpus, (ls, ls), stream(self.seed, "autoencoder"),
                                   steps=self.cfg["latent"]["ae_steps"])
            save_checkpoint(self.path("checkpoints/pretrain/autoencoder.ckpt"), ae)
            theta_l = diffusion.pretrain(ae.encode(corpus), self.sched, stream(self.seed, "pretrain_latent"),
                                         conf, latent=True)
            save_checkpoint(self.path("checkpoints/pretrain/theta_latent.ckpt"), theta_l)
        self.stamp("pretrain")

    def finetune_spec(self) -> diffusion.FinetuneSpec:
        f = self.cfg["finetune"]
        return diffusion.FinetuneSpec(f["mode"], f["steps_per_image"], f["lr"], f["prior_weight"],
                                      f["prior_set_size"], list(f["defenses"]), f["lora_rank"],
                                      f["lora_scale"], f["batch_size"])

    def finetune(self) -> None:
        self.require("pretrain")
        spec = self.finetune_spec()
        theta = self.load("checkpoints/pretrain/theta.ckpt")
        latent = "latent" in self.cfg["inversion"]["methods"]
        if latent:
            ae = self.load("checkpoints/pretrain/autoencoder.ckpt")
            theta_l = self.load("checkpoints/pretrain/theta_latent.ckpt")
        k = self.cfg["finetune"]["num_images"]
        rows = []
        for name, (imgs, is_mem) in self.classes().items():
            mem_idx = np.flatnonzero(is_mem)
            used = mem_idx if k is None else mem_idx[:k]
            if len(used) == 0:
                raise ValueError(f"class {name} has no member images to fine-tune on")
            rows += [(name, int(j), int(j in used)) for j in mem_idx]
            tp = diffusion.finetune(theta, imgs[used], spec, stream(self.seed, f"finetune/{name}"),
                                    self.sched, sampler=_prior_sampler)
            save_checkpoint(self.path(f"checkpoints/finetune/theta_prime_{name}.ckpt"), tp)
            if latent:
                tpl = diffusion.finetune(theta_l, ae.encode(imgs[used]), spec,
                                         stream(self.seed, f"finetune_latent/{name}"), self.sched,
                                         sampler=_prior_sampler)
                save_checkpoint(self.path(f"checkpoints/finetune/theta_prime_latent_{name}.ckpt"), tpl)
        self.csv("reports/finetune/members.csv", ["class", "image", "used"], rows, "finetune")
        self.stamp("finetune")

    def eval_sets(self):
        """``{class: (images, image ids, is_member)}`` restricted to members actually trained on."""
        self.require("finetune")
        _, rows, _ = read_csv(self.path("reports/finetune/members.csv"))
        unused = {(r["class"], int(r["image"])) for r in rows if r["used"] == "0"}
        out = {}
        for name, (imgs, is_mem) in self.classes().items():
            ids = np.array([j for j in range(len(imgs)) if (name, j) not in unused])
            out[name] = (imgs[ids], ids, is_mem[ids])
        return out

    # masking --------------------------------------------------------------

    def mask_spec(self, all_images) -> masking.MaskSpec:
        m = self.cfg["mask"]
        fill = float(np.mean(all_images)) if m["fill"] == "mean" else float(m["fill"])
        seed = int(stream(self.seed, "mask").integers(0, 2 ** 62))
        return masking.MaskSpec(m["kind"], m["block"], m["fraction"], fill, m["kernel"], m["sigma"], seed)

    def mask(self) -> None:
        classes = self.classes()
        spec = self.mask_spec(np.concatenate([c[0] for c in classes.values()]))
        shutil.rmtree(self.path("masked"), ignore_errors=True)
        dists = []
        for ci, (name, (imgs, _)) in enumerate(classes.items()):
            xb, removed = masking.remove_partial_batch(imgs, spec, _gids(ci, range(len(imgs))))
            for j in range(len(imgs)):
                write_pgm(self.path(f"masked/{name}/{j:03d}.pgm"), xb[j])
                write_pgm(self.path(f"masked/{name}/{j:03d}_mask.pgm"), removed[j])
            # distances on the stored (quantized) grids, as the inversion will see them
            xq = np.stack([read_pgm(self.path(f"masked/{name}/{j:03d}.pgm")) for j in range(len(imgs))])
            dists += list(np.sqrt(np.sum((xq - imgs) ** 2, axis=(1, 2))))
        self.csv("reports/mask/budget.csv", ["fill", "budget"], [(spec.fill, float(np.mean(dists)))], "mask")
        self.stamp("mask")

    def budget(self) -> float:
        self.require("mask")
        _, rows, _ = read_csv(self.path("reports/mask/budget.csv"))
        return float(rows[0]["budget"])

    def masked(self, name, ids):
        return np.stack([read_pgm(self.path(f"masked/{name}/{j:03d}.pgm")) for j in ids])

    # inversion ------------------------------------------------------------

    def inversion_config(self, budget: float) -> inversion.InversionConfig:
        c = self.cfg["inversion"]
        return inversion.InversionConfig(c["N"], budget * c["step_ratio"], budget, c["t_lo"], c["t_hi"],
                                         int(stream(self.seed, "invert").integers(0, 2 ** 62)), c["keep_ct"])

    def invert(self, methods=None) -> None:
        self.require("finetune")
        self.require("mask")
        methods = methods or self.cfg["inversion"]["methods"]
        c = self.cfg["inversion"]
        budget = c["budget"] if c["budget"] is not None else self.budget()
        sets = self.eval_sets()
        for method in methods:
            shutil.rmtree(self.path("inverted", method), ignore_errors=True)
            b = budget
            if method == "latent":
                b = c["budget"] if c["budget"] is not None else self._latent_budget(sets)
            cfg_inv = self.inversion_config(b)
            tasks = [(str(self.out), self.cfg.to_text(), method, name, ci, cfg_inv, self.force)
                     for ci, name in enumerate(sets)]
            for name, rec, rows in _pmap(_invert_class, tasks, self.jobs):
                ids = sets[name][1]
                for j, img in zip(ids, rec):
                    write_pgm(self.path(f"inverted/{method}/{name}/{j:03d}.pgm"), img)
                self.csv(f"traces/{method}/{name}.csv", ["image", "step", "t", "l_tar", "drift_norm"],
                         rows, "invert")
            self.stamp("invert", f"_{method}")

    def _latent_budget(self, sets) -> float:
        ae = self.load("checkpoints/pretrain/autoencoder.ckpt")
        d = [inversion.default_budget(ae.encode(imgs), ae.encode(self.masked(n, ids)))
             for n, (imgs, ids, _) in sets.items()]
        return float(np.mean(d))

    # baselines ------------------------------------------------------------

    def baseline(self, pipelines=None) -> None:
        self.require("finetune")
        pipelines = pipelines or self.cfg["baseline"]["pipelines"]
        sets = self.eval_sets()
        for pipe in pipelines:
            shutil.rmtree(self.path("baseline", pipe), ignore_errors=True)
            tasks = [(str(self.out), self.cfg.to_text(), pipe, name, ci, self.force) for ci, name in enumerate(sets)]
            for name, cands in _pmap(_baseline_class, tasks, self.jobs):
                for j, block in zip(sets[name][1], cands):
                    for k, img in enumerate(block):
                        write_pgm(self.path(f"baseline/{pipe}/{name}/{j:03d}_{k:03d}.pgm"), img)
            self.stamp("baseline", f"_{pipe}")

    # evaluation -----------------------------------------------------------

    def available_sources(self):
        found = []
        for s in INVERSION_SOURCES:
            if self.path("stamps", f"invert_{s}.txt").exists():
                found.append(s)
        for s in BASELINE_SOURCES:
            if self.path("stamps", f"baseline_{s}.txt").exists():
                found.append(s)
        return found

    def evaluate(self, sources=None):
        """Score every source on every metric channel; returns summary rows."""
        sources = list(sources or self.cfg["evaluate"]["sources"] or self.available_sources())
        if not sources:
            raise MissingArtifact(f"nothing to evaluate in {self.out}: run invert or baseline first")
        sets = self.eval_sets()
        K = self.cfg["baseline"]["K"]
        summary = []
        for src in sources:
            kind = "invert" if src in INVERSION_SOURCES else "baseline"
            self.require(kind, f"_{src}")
            for metric in self.cfg["evaluate"]["metrics"]:
                fn = metrics.get_metric(metric)
                table = metrics.ScoreTable(metric)
                for name, (imgs, ids, is_mem) in sets.items():
                    for x0, j, m in zip(imgs, ids, is_mem):
                        if kind == "invert":
                            s = fn(x0, read_pgm(self.path(f"inverted/{src}/{name}/{j:03d}.pgm")))
                        else:
                            cands = [read_pgm(self.path(f"baseline/{src}/{name}/{j:03d}_{k:03d}.pgm"))
                                     for k in range(K)]
                            s = metrics.best_of_k(x0, cands, metric)
                        table.add(name, int(j), bool(m), s)
                self.csv(f"reports/scores_{src}_{metric}.csv", ["class", "image", "is_member", "score"],
                         table.to_rows(), "evaluate")
                acc_u, _ = metrics.best_threshold_acc(table, "universal")
                acc_c, _ = metrics.best_threshold_acc(table, "per_class")
                summary.append((src, metric, acc_u, acc_c, table.auc()))
        self.csv("reports/summary.csv", ["source", "metric", "acc_universal", "acc_per_class", "auc"],
                 summary, "evaluate")
        return summary

    def mia(self):
        self.require("finetune")
        theta = self.load("checkpoints/pretrain/theta.ckpt")
        groups = []
        for name, (imgs, ids, is_mem) in self.eval_sets().items():
            tp = self.load(f"checkpoints/finetune/theta_prime_{name}.ckpt")
            groups.append((tp, imgs[is_mem], imgs[~is_mem]))
        m = self.cfg["mia"]
        rows = mia.mia_sweep(theta, groups, m["t_list"], self.sched, m["n_noise"],
                             int(stream(self.seed, "mia").integers(0, 2 ** 30)))
        self.csv("reports/mia.csv", ["method", "t", "auc"], rows, "mia")
        self.stamp("mia")
        return rows

    # orchestration -------------------------------------------------------

    def run_all(self, with_mia: bool = False):
        """Run every stage whose stamp is missing or stale, then evaluate."""
        for stage, fn in (("data", self.gen_data), ("pretrain", self.pretrain),
                          ("finetune", self.finetune), ("mask", self.mask)):
            if not self.stamp_ok(stage):
                log.info("stage %s", stage)
                fn()
        todo = [m for m in self.cfg["inversion"]["methods"] if not self.stamp_ok("invert", f"_{m}")]
        if todo:
            self.invert(todo)
        todo = [p for p in self.cfg["baseline"]["pipelines"] if not self.stamp_ok("baseline", f"_{p}")]
        if todo:
            self.baseline(todo)
        if with_mia and not self.stamp_ok("mia"):
            self.mia()
        return self.evaluate()


def _cmd(stage: str) -> str:
    return {"data": "gen-data", "invert": "invert", "baseline": "baseline"}.get(stage, stage)


def _gids(ci: int, js):
    return [ci * 1000 + int(j) for j in js]


def _drop_near(candidates, reference, tau: float):
    ref = np.stack([metrics.feature_embed(x) for x in reference])
    return np.array([i for i, c in enumerate(candidates)
                     if np.max(ref @ metrics.feature_embed(c)) <= tau], dtype=int)


def _prior_sampler(model, sched, rng, n):
    return diffusion.ddpm_sample(model, sched, rng, n)


def _pmap(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
        return list(ex.map(fn, tasks))


def _worker_run(out, cfg_text, force) -> Run:
    from .config import parse_config
    return Run(out, parse_config(cfg_text), force=force)


def _invert_class(task):
    out, cfg_text, method, name, ci, cfg_inv, force = task
    run = _worker_run(out, cfg_text, force)
    imgs, ids, _ = run.eval_sets()[name]
    xb = run.masked(name, ids)
    gids = _gids(ci, ids)
    if method == "latent":
        ae = run.load("checkpoints/pretrain/autoencoder.ckpt")
        theta = run.load("checkpoints/pretrain/theta_latent.ckpt")
        tp = run.load(f"checkpoints/finetune/theta_prime_latent_{name}.ckpt")
        rec, trace = inversion.cgi_dm_latent(theta, tp, ae, xb, cfg_inv, run.sched, gids)
    else:
        theta = run.load("checkpoints/pretrain/theta.ckpt")
        tp = run.load(f"checkpoints/finetune/theta_prime_{name}.ckpt")
        if method == "cgi":
            rec, trace = inversion.cgi_dm(theta, tp, xb, cfg_inv, run.sched, gids)
        else:
            rec, trace = inversion.direct_gi(tp, xb, cfg_inv, run.sched, gids)
    rows = [(int(j),) + r for b, j in enumerate(ids) for r in trace.rows(b)]
    return name, rec, rows


def _baseline_class(task):
    out, cfg_text, pipe, name, ci, force = task
    run = _worker_run(out, cfg_text, force)
    b = run.cfg["baseline"]
    imgs, ids, _ = run.eval_sets()[name]
    tp = run.load(f"checkpoints/finetune/theta_prime_{name}.ckpt")
    base = int(stream(run.seed, f"baseline/{pipe}").integers(0, 2 ** 62))
    size = imgs.shape[-1]
    known = np.ones((size, size))
    known[:, size - size // 2:] = 0.0  # right half is regenerated
    cands = []
    for x0, g in zip(imgs, _gids(ci, ids)):
        rng = Rng(split_seed(base, g))
        if pipe == "img2img":
            cands.append(diffusion.img2img(tp, x0, b["strength"], run.sched, rng, k=b["K"]))
        elif pipe == "inpaint":
            cands.append(diffusion.inpaint(tp, x0, known, run.sched, rng, k=b["K"]))
        else:
            cands.append(diffusion.ddpm_sample(tp, run.sched, rng, b["K"]))
    return name, cands


# sweeps -----------------------------------------------------------------

SWEEP_KEYS = {
    "train_steps": ("finetune__steps_per_image", int),
    "num_images": ("finetune__num_images", int),
    "mask_kind": ("mask__kind", str),
    "extraction_steps": ("inversion__N", int),
}


def _link_tree(src: Path, dst: Path) -> None:
    if not src.exists():
        return
    shutil.rmtree(dst, ignore_errors=True)
    shutil.copytree(src, dst, copy_function=_link_or_copy)


def _link_or_copy(s, d):
    try:
        os.link(s, d)
    except OSError:
        shutil.copy2(s, d)


def derive(base: Run, out, **overrides) -> Run:
    """Run at ``out`` with config overrides, hard-linking every base stage whose lineage key matches."""
    cfg = base.cfg.with_overrides(**overrides)
    sub = Run(out, cfg, base.jobs, base.force)
    for stage, dirs in STAGE_DIRS.items():
        if stage in ("invert", "baseline"):
            continue
        if base.stamp_ok(stage) and stage_key(cfg, stage) == stage_key(base.cfg, stage) \
                and not sub.stamp_ok(stage):
            for d in dirs:
                _link_tree(base.path(d), sub.path(d))
            sub.stamp(stage)
    for stage, names, dirs in (("baseline", cfg["baseline"]["pipelines"], ("baseline",)),
                               ("invert", cfg["inversion"]["methods"], ("inverted", "traces"))):
        if stage_key(cfg, stage) != stage_key(base.cfg, stage):
            continue
        for p in names:
            if base.stamp_ok(stage, f"_{p}") and not sub.stamp_ok(stage, f"_{p}"):
                for d in dirs:
                    _link_tree(base.path(d, p), sub.path(d, p))
                sub.stamp(stage, f"_{p}")
    return sub


def sweep(base: Run, axis: str | None = None, values=None):
    """Evaluate the base run with one config knob varied; returns aggregated rows.

    Sub-runs live in ``<out>/sweep/<axis>/<value>`` and reuse every stage
    whose lineage key matches the base run.
    """
    axis = axis or base.cfg["sweep"]["axis"]
    values = values or base.cfg["sweep"]["values"]
    key, conv = SWEEP_KEYS[axis]
    rows = []
    for v in values:
        sub = derive(base, base.out / "sweep" / axis / str(v), **{key: conv(v)})
        for src, metric, acc_u, acc_c, a in sub.run_all():
            rows.append((axis, str(v), src, metric, acc_u, acc_c, a))
    base.csv(f"reports/sweep_{axis}.csv", ["axis", "value", "source", "metric", "acc_universal",
                                           "acc_per_class", "auc"], rows, "evaluate")
    return rows
