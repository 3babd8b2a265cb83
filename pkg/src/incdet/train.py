"""Teacher training, dual-teacher student distillation and the sequential incremental protocol."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_checkpoint, params_digest, save_checkpoint  # noqa: F401  (re-exported)
from .core import ClassPartition, Detection
from .data import Dataset, SyntheticConfig, build_incremental_splits, generate_synthetic
from .detector import (
    Detector,
    DetectorConfig,
    _proposal_arrays,
    detect,
    expand_detector,
    losses_from_targets,
    sample_targets,
)
from .distill import (
    DistillHyper,
    EmptyRoIError,
    NumericalError,
    build_roi_mask,
    image_distill_loss,
    instance_distill_loss,
    rcnn_distill_loss,
    select_shared_rois,
    total_loss,
)
from .metrics import evaluate_detections
from .sampler import SampleResult, SamplerConfig, blind_sample, dataset_images

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 5
    batch_size: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("batch_size and decay_every must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0 when set")

    @classmethod
    def full_scale(cls, seed: int = 0) -> "TrainConfig":
        """Full-scale schedule: 20 epochs, lr 1e-3, x0.1 every 5."""
        return cls(epochs=20, lr=1e-3, lr_decay=0.1, decay_every=5, batch_size=1, momentum=0.9, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _optimizer(det: Detector, cfg: TrainConfig):
    opt = torch.optim.SGD(
        det.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.momentum > 0, weight_decay=cfg.weight_decay
    )
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.lr_decay)
    return opt, sched


def _check_finite(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value.detach()).all():
        raise NumericalError(f"non-finite loss at {where}")


def _step(opt, det: Detector, cfg: TrainConfig) -> None:
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(det.parameters(), cfg.grad_clip)
    opt.step()


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def train_detector(
    dataset: Dataset,
    class_ids,
    cfg: TrainConfig,
    det_cfg: dict | None = None,
    init: Detector | None = None,
) -> Detector:
    """Supervised two-stage training on ``dataset``.

    Every label must belong to ``class_ids``; a label outside raises before
    any step is taken. ``init`` continues from an existing detector with the
    same class list. Per-epoch mean losses are left in ``det.train_history``.
    """
    class_ids = tuple(int(c) for c in class_ids)
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    allowed = set(class_ids)
    for im in dataset.images:
        stray = im.class_ids - allowed
        if stray:
            raise ValueError(f"image {im.image_id} carries labels {sorted(stray)} outside {class_ids}")
    if init is not None:
        if init.class_ids != class_ids:
            raise ValueError("init detector class list differs from class_ids")
        det = init
    else:
        det = Detector(DetectorConfig(class_ids, **{"seed": cfg.seed, **(det_cfg or {})}))
    images = [dataset.load_image(im) for im in dataset.images]
    gts = [im.gt for im in dataset.images]
    opt, sched = _optimizer(det, cfg)
    rng = np.random.default_rng([cfg.seed, 17])
    history = []
    det.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total, steps = 0.0, 0
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grad()
            loss_sum = 0.0
            for i in batch:
                x = det.image_tensor(images[i])
                feat = det.features(x)
                t = sample_targets(det, feat, tuple(x.shape[-2:]), gts[i], rng)
                l_rcnn, l_rpn = losses_from_targets(det, feat, t)
                loss = (l_rcnn + l_rpn) / len(batch)
                _check_finite(loss, f"epoch {epoch} image {dataset.images[i].image_id}")
                loss.backward()
                loss_sum += loss.item()
            _step(opt, det, cfg)
            total += loss_sum
            steps += 1
        sched.step()
        history.append(total / steps)
        log.info("train %s epoch %d loss %.4f", class_ids, epoch, history[-1])
    det.eval()
    det.train_history = history
    return det


def naive_finetune(m_base: Detector, d_novel: Dataset, novel_ids, cfg: TrainConfig) -> Detector:
    """Catastrophic-forgetting baseline: extend the base model and train on novel labels only."""
    student = expand_detector(m_base, novel_ids, seed=cfg.seed)
    return train_detector(d_novel, student.class_ids, cfg, init=student)


# --------------------------------------------------------------------------
# distillation
# --------------------------------------------------------------------------


@dataclass
class _TeacherCache:
    image: np.ndarray
    gts: list[Detection]
    f_base: torch.Tensor | None = None
    f_novel: torch.Tensor | None = None
    mask_base: np.ndarray | None = None
    mask_novel: np.ndarray | None = None
    rois: np.ndarray | None = None
    is_base: np.ndarray | None = None
    base_probs: torch.Tensor | None = None
    base_regs: torch.Tensor | None = None
    novel_probs: torch.Tensor | None = None
    novel_regs: torch.Tensor | None = None
    pooled_base: torch.Tensor | None = None
    pooled_novel: torch.Tensor | None = None


def _teacher_pass(teacher: Detector, x: torch.Tensor, n_candidates: int):
    feat = teacher.features(x.to(teacher.dtype))
    props, obj = _proposal_arrays(teacher, feat, tuple(x.shape[-2:]), n_candidates)
    logits, _ = teacher.head(teacher.pool(feat, props))
    fg = logits.argmax(dim=1).numpy() != 0
    return feat, props, obj, fg


def _head_on(teacher: Detector, feat: torch.Tensor, rois: np.ndarray):
    pooled = teacher.pool(feat, rois)
    logits, regs = teacher.head(pooled)
    return pooled, torch.softmax(logits.double(), dim=1), regs.double()


def build_teacher_cache(
    m_base: Detector,
    m_novel: Detector,
    image: np.ndarray,
    pseudo,
    dtype,
    k_per_teacher: int = 16,
    n_candidates: int = 256,
) -> _TeacherCache:
    """Everything the frozen teachers contribute for one sampled image."""
    cache = _TeacherCache(image, pseudo.as_detections())
    x = torch.as_tensor(image, dtype=torch.float64)[None]
    with torch.no_grad():
        fb, pb, ob, gb = _teacher_pass(m_base, x, n_candidates)
        fn, pn, on, gn = _teacher_pass(m_novel, x, n_candidates)
        cache.f_base = fb[0].to(dtype)
        cache.f_novel = fn[0].to(dtype)
        hw = tuple(fb.shape[-2:])
        cache.mask_base = build_roi_mask(pseudo, hw, m_base.config.stride, "base")
        cache.mask_novel = build_roi_mask(pseudo, hw, m_novel.config.stride, "novel")
        try:
            shared = select_shared_rois(pb, ob, gb, pn, on, gn, k_per_teacher)
        except EmptyRoIError:
            return cache
        cache.rois = shared.rois
        cache.is_base = shared.is_base
        pooled_b, probs_b, regs_b = _head_on(m_base, fb, shared.rois)
        pooled_n, probs_n, regs_n = _head_on(m_novel, fn, shared.rois)
        cache.base_probs, cache.base_regs = probs_b[cache.is_base].to(dtype), regs_b[cache.is_base].to(dtype)
        cache.novel_probs, cache.novel_regs = probs_n[~cache.is_base].to(dtype), regs_n[~cache.is_base].to(dtype)
        cache.pooled_base, cache.pooled_novel = pooled_b.to(dtype), pooled_n.to(dtype)
    return cache


def distill_terms(
    student: Detector, cache: _TeacherCache, partition: ClassPartition, hyper: DistillHyper, rng, targets=None
):
    """``(L_RCNN, L_RPN)`` on pseudo ground truth and the three distillation losses for one image.

    ``targets`` freezes the supervised sampling (anchors, RoIs); otherwise it
    is drawn from ``rng``.
    """
    x = student.image_tensor(cache.image)
    feat = student.features(x)
    t = targets if targets is not None else sample_targets(student, feat, tuple(x.shape[-2:]), cache.gts, rng)
    supervised = losses_from_targets(student, feat, t)
    zero = feat.new_zeros(())
    l_rcnn = l_im = l_in = zero
    if hyper.alpha2:
        l_im = image_distill_loss(feat[0], cache.f_base, cache.f_novel, cache.mask_base, cache.mask_novel)
    if cache.rois is not None and (hyper.alpha1 or hyper.alpha3):
        pooled = student.pool(feat, cache.rois)
        if hyper.alpha1:
            logits, regs = student.head(pooled)
            l_rcnn = rcnn_distill_loss(
                torch.softmax(logits, dim=1),
                regs,
                cache.is_base,
                cache.base_probs,
                cache.base_regs,
                cache.novel_probs,
                cache.novel_regs,
                partition,
                hyper.lam,
            )
        if hyper.alpha3:
            l_in = instance_distill_loss(cache.pooled_base, cache.pooled_novel, pooled)
    return supervised, (l_rcnn, l_im, l_in)


def distill_student(
    m_base: Detector,
    m_novel: Detector,
    unlabel: Dataset,
    sampled: SampleResult,
    cfg: TrainConfig,
    hyper: DistillHyper,
    k_per_teacher: int = 16,
    caches: list[_TeacherCache] | None = None,
) -> Detector:
    """Train a student over both teachers' classes on the sampled wild images.

    The student starts as the base teacher extended with fresh novel-class
    rows. Teachers are only read; their parameter digests are verified
    unchanged afterwards.
    """
    if set(m_base.class_ids) & set(m_novel.class_ids):
        raise ValueError("teacher class lists overlap")
    if not sampled.selected:
        raise ValueError("sampling manifest is empty")
    partition = ClassPartition(m_base.class_ids, (m_novel.class_ids,))
    digests = (params_digest(m_base), params_digest(m_novel))
    student = expand_detector(m_base, m_novel.class_ids, seed=cfg.seed)
    if caches is None:
        caches = teacher_caches(m_base, m_novel, unlabel, sampled, student.dtype, k_per_teacher)
    opt, sched = _optimizer(student, cfg)
    rng = np.random.default_rng([cfg.seed, 29])
    history = []
    student.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(caches))
        total, steps = 0.0, 0
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grad()
            loss_sum = 0.0
            for i in batch:
                supervised, dist = distill_terms(student, caches[i], partition, hyper, rng)
                loss = total_loss(supervised, dist, hyper) / len(batch)
                _check_finite(loss, f"distill epoch {epoch}")
                loss.backward()
                loss_sum += loss.item()
            _step(opt, student, cfg)
            total += loss_sum
            steps += 1
        sched.step()
        history.append(total / steps)
        log.info("distill epoch %d loss %.4f", epoch, history[-1])
    student.eval()
    student.train_history = history
    if (params_digest(m_base), params_digest(m_novel)) != digests:
        raise RuntimeError("teacher parameters changed during distillation")
    return student


def teacher_caches(m_base, m_novel, unlabel: Dataset, sampled: SampleResult, dtype, k_per_teacher: int = 16):
    by_id = unlabel.by_id()
    return [
        build_teacher_cache(m_base, m_novel, unlabel.load_image(by_id[i]), sampled.pseudo[i], dtype, k_per_teacher)
        for i in sampled.selected
    ]


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate_model(
    det: Detector, test: Dataset, partition: ClassPartition, style: str = "voc", score_threshold: float = 0.05
) -> dict:
    """Report over ``partition``; classes the model cannot output are reported absent."""
    wanted = set(partition.all_ids)
    dets, gts = {}, {}
    for im in test.images:
        dets[im.image_id] = detect(test.load_image(im), det, score_threshold)
        gts[im.image_id] = [g for g in im.gt if g.class_id in wanted]
    report = evaluate_detections(dets, gts, partition, style)
    if not set(det.class_ids) >= wanted:
        from .metrics import report_base_novel_all

        per_class = {int(c): (v if int(c) in det.class_ids else None) for c, v in report["per_class_ap"].items()}
        report["per_class_ap"] = {str(c): v for c, v in per_class.items()}
        present = [v for v in per_class.values() if v is not None]
        report["mAP"] = float(np.mean(present)) if present else None
        report["base_novel_all"] = report_base_novel_all(per_class, partition).to_dict()
    return report


# --------------------------------------------------------------------------
# incremental protocol
# --------------------------------------------------------------------------

ABLATION_TERMS = {
    "supervised_only": (),
    "rcnn_dist_only": ("alpha1",),
    "im_dist_only": ("alpha2",),
    "in_dist_only": ("alpha3",),
}


def ablations(hyper: DistillHyper) -> dict[str, DistillHyper]:
    """Single-term variants of ``hyper``: the kept term retains its weight, the others are zeroed."""
    out = {}
    for name, keep in ABLATION_TERMS.items():
        out[name] = replace(hyper, **{a: 0.0 for a in ("alpha1", "alpha2", "alpha3") if a not in keep})
    return out


@dataclass
class ExperimentPlan:
    partition: ClassPartition
    strict: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    hyper: DistillHyper = field(default_factory=DistillHyper)
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)
    detector: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    n_labeled: int = 1200
    n_wild: int = 2000
    n_test: int = 300
    k_per_teacher: int = 16
    baselines: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "partition": self.partition.to_dict(),
            "strict": self.strict,
            "sampler": self.sampler.to_dict(),
            "hyper": self.hyper.to_dict(),
            "teacher_train": self.teacher_train.to_dict(),
            "student_train": self.student_train.to_dict(),
            "detector": self.detector,
            "synthetic": self.synthetic,
            "n_labeled": self.n_labeled,
            "n_wild": self.n_wild,
            "n_test": self.n_test,
            "k_per_teacher": self.k_per_teacher,
            "baselines": self.baselines,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan fields {sorted(unknown)}")
        if "partition" not in d:
            raise ValueError("plan needs a partition")
        kw = dict(d)
        kw["partition"] = ClassPartition.from_dict(d["partition"])
        for key, typ in (("sampler", SamplerConfig), ("hyper", DistillHyper)):
            if key in d:
                kw[key] = typ.from_dict(d[key])
        for key in ("teacher_train", "student_train"):
            if key in d:
                kw[key] = TrainConfig.from_dict(d[key])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class PlanData:
    labeled: Dataset
    wild: Dataset
    test: Dataset


def plan_data(plan: ExperimentPlan) -> PlanData:
    """Synthetic labelled pool (strict sides), unlabelled wild pool (all categories) and test set."""
    base = {**plan.synthetic}
    sides = plan.partition.sides
    labeled = generate_synthetic(
        SyntheticConfig(**{**base, "allow_cooccurrence": not plan.strict, "sides": sides, "seed": plan.seed * 1000 + 1,
                           **({"category_subset": plan.partition.all_ids} if not plan.strict else {})}),
        plan.n_labeled,
    )
    wild = generate_synthetic(SyntheticConfig(**{**base, "allow_cooccurrence": True, "seed": plan.seed * 1000 + 2}), plan.n_wild)
    test = generate_synthetic(
        SyntheticConfig(
            **{**base, "allow_cooccurrence": True, "category_subset": plan.partition.all_ids, "seed": plan.seed * 1000 + 3}
        ),
        plan.n_test,
    )
    return PlanData(labeled, wild, test)


@dataclass
class StepResult:
    step: int
    student: Detector
    report: dict


def render_report(report: dict) -> str:
    lines = [f"step {report['step']}  setting {report['setting']}  seed {report['seed']}"]
    s = report["sampling"]
    lines.append(
        f"sampled {s['n_selected']}/{s['n_wild']} wild images, pseudo-GT entries base={s['entries_base']} novel={s['entries_novel']}"
    )
    lines.append(f"{'model':<22} base | novel | all")
    for name, r in report["results"].items():
        lines.append(f"{name:<22} {r['base_novel_all']['text']}")
    return "\n".join(lines)


def run_plan(
    plan: ExperimentPlan,
    data: PlanData | None = None,
    out_dir=None,
    progress: Callable[[str], None] | None = None,
) -> list[StepResult]:
    """Execute every increment of ``plan`` in order.

    Step ``k``: the accumulated student (the base teacher at step 1) plays the
    base teacher, a fresh teacher is trained on group ``k``, wild images are
    blind-sampled and a new student is distilled. With ``out_dir`` each
    finished step's checkpoint and report are written before the next starts.
    """
    say = progress or (lambda msg: log.info(msg))
    data = data or plan_data(plan)
    base_split, novel_splits = build_incremental_splits(data.labeled, plan.partition, plan.strict)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    teacher_cfg = replace(plan.teacher_train, seed=plan.teacher_train.seed + plan.seed * 100)
    student_cfg = replace(plan.student_train, seed=plan.student_train.seed + plan.seed * 100)
    m_base = train_detector(base_split, plan.partition.base_ids, teacher_cfg, plan.detector)
    say(f"base teacher trained ({time.perf_counter() - t0:.0f}s)")
    results = []
    wild_images = [(im.image_id, data.wild.load_image(im)) for im in data.wild.images]
    for k, d_novel in enumerate(novel_splits):
        view = plan.partition.step(k)
        group = plan.partition.novel_groups[k]
        m_novel = train_detector(d_novel, group, replace(teacher_cfg, seed=teacher_cfg.seed + k + 1), plan.detector)
        say(f"step {k + 1}: novel teacher trained ({time.perf_counter() - t0:.0f}s)")
        sampled = blind_sample(m_base, m_novel, wild_images, plan.sampler)
        say(f"step {k + 1}: sampled {len(sampled.selected)} images ({time.perf_counter() - t0:.0f}s)")
        caches = teacher_caches(m_base, m_novel, data.wild, sampled, m_base.dtype, plan.k_per_teacher)
        student = distill_student(m_base, m_novel, data.wild, sampled, student_cfg, plan.hyper, plan.k_per_teacher, caches)
        say(f"step {k + 1}: student distilled ({time.perf_counter() - t0:.0f}s)")
        test = data.test.subset(
            [replace(im, gt=[g for g in im.gt if g.class_id in view.all_ids]) for im in data.test.images]
        )
        results_k = {
            "base_teacher": evaluate_model(m_base, test, view),
            "novel_teacher": evaluate_model(m_novel, test, view),
            "student": evaluate_model(student, test, view),
        }
        if plan.baselines:
            naive = naive_finetune(m_base, d_novel, group, student_cfg)
            results_k["naive_finetune"] = evaluate_model(naive, test, view)
            for name, h in ablations(plan.hyper).items():
                abl = distill_student(m_base, m_novel, data.wild, sampled, student_cfg, h, plan.k_per_teacher, caches)
                results_k[name] = evaluate_model(abl, test, view)
            say(f"step {k + 1}: baselines done ({time.perf_counter() - t0:.0f}s)")
        report = {
            "step": k + 1,
            "setting": view.describe(),
            "classes": {"base": list(view.base_ids), "novel": list(view.novel_ids)},
            "seed": plan.seed,
            "sampling": {
                "n_wild": sampled.n_wild,
                "n_selected": len(sampled.selected),
                "entries_base": sampled.count("base"),
                "entries_novel": sampled.count("novel"),
            },
            "results": results_k,
        }
        results.append(StepResult(k + 1, student, report))
        if out is not None:
            save_checkpoint(student, out / f"student_step{k + 1}.ckpt", {"seed": plan.seed, "step": k + 1})
            (out / f"report_step{k + 1}.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
            (out / f"report_step{k + 1}.txt").write_text(render_report(report) + "\n", encoding="utf-8")
        m_base = student
    return results
