"""Training loops: teacher pretraining, distillation, ensembles,
cross-modal transfer, and linear probing.

Objectives compose as `cross_entropy + beta * distill_term` (the
soft-label objective carries its own alpha/rho weighting). Teachers are
always frozen; with augmentation off their per-sample outputs are
constant, so logits/features/attention maps are cached once per
(teacher, dataset) and the distillation loop never runs the teacher.

Contrastive runs keep one pair of projection heads and one pair of
memory banks per teacher. Negative indices are drawn once per step and
shared across teachers and both anchoring directions, which makes a
duplicate-teacher ensemble contribute exactly twice the single-teacher
term and a single-teacher ensemble coincide with plain distillation.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .. import analysis
from ..baselines import (AttentionMapSet, Regressor, at_distill_term,
                         compose_distill_loss, compute_attention_map,
                         fitnet_distill_term)
from ..core import (EmbeddingBatch, FeatureBatch, ProjectionHead, cross_entropy,
                    project_and_normalize, softmax_with_temperature)
from ..crd import (CriticConfig, SamplingPolicy, estimate_z0, infonce_loss,
                   sample_negative_matrix, symmetric_crd_parts)
from ..errors import ConfigError, DataError, DistillkitError, NumericalError
from ..membank import MemoryBank, init_bank, update as bank_update
from .config import (CRD_FAMILY, DistillRunConfig, EpochStats, Objective,
                     RunRecord, stream_seed)
from .data import PairedViews, get_dataset
from .models import build_model, load_checkpoint, param_checksum

TeacherLike = Union[str, nn.Module, Tuple[nn.Module, object]]

_TEACHER_CACHE: Dict[tuple, dict] = {}


def _resolve_teacher(teacher: TeacherLike) -> nn.Module:
    if isinstance(teacher, (str,)) or hasattr(teacher, "__fspath__"):
        net, _ = load_checkpoint(teacher)
    elif isinstance(teacher, tuple):
        net = teacher[0]
    else:
        net = teacher
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _batched_forward(net: nn.Module, x: torch.Tensor, batch: int = 512):
    logits, feats, acts = [], [], None
    with torch.no_grad():
        for s in range(0, x.shape[0], batch):
            lo, fe, ac = net.forward_full(x[s:s + batch])
            logits.append(lo)
            feats.append(fe)
            if acts is None:
                acts = [[] for _ in ac]
            for i, a in enumerate(ac):
                acts[i].append(a)
    return (torch.cat(logits), torch.cat(feats),
            [torch.cat(a) for a in acts] if acts else [])


def _teacher_outputs(net: nn.Module, x: torch.Tensor, cache_tag: str,
                     want_maps: bool = False) -> dict:
    key = (param_checksum(net), cache_tag, want_maps)
    if key in _TEACHER_CACHE:
        return _TEACHER_CACHE[key]
    logits, feats, acts = _batched_forward(net, x)
    out = {"logits": logits, "feats": feats}
    if want_maps:
        out["maps"] = [compute_attention_map(a) for a in acts]
    _TEACHER_CACHE[key] = out
    return out


def evaluate_accuracy(net: nn.Module, x: torch.Tensor, y: torch.Tensor,
                      batch: int = 512) -> float:
    """Top-1 accuracy in percent."""
    net.eval()
    correct = 0
    with torch.no_grad():
        for s in range(0, x.shape[0], batch):
            pred = net(x[s:s + batch]).argmax(dim=1)
            correct += int((pred == y[s:s + batch]).sum())
    return 100.0 * correct / x.shape[0]


def _augment(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Pad-4 random crop plus horizontal flip."""
    b, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (4, 4, 4, 4), mode="reflect")
    out = torch.empty_like(x)
    offs = rng.integers(0, 9, size=(b, 2))
    flips = rng.uniform(size=b) < 0.5
    for i in range(b):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = torch.flip(crop, dims=(2,)) if flips[i] else crop
    return out


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def _make_optimizer(params, cfg: DistillRunConfig):
    return torch.optim.SGD(params, lr=cfg.optimizer.lr,
                           momentum=cfg.optimizer.momentum,
                           weight_decay=cfg.optimizer.weight_decay)


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def train_teacher(config: DistillRunConfig):
    """Cross-entropy pretraining of the teacher on its (larger) pool."""
    t0 = time.time()
    data = get_dataset(config.dataset)
    x, y = data.teacher_x, data.teacher_y
    spec = config.teacher_spec
    net = build_model(spec, stream_seed(config.seed, "teacher_init"))
    opt = _make_optimizer(net.parameters(), config)
    data_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(stream_seed(config.seed, "data_order"))))
    aug_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(stream_seed(config.seed, "augment"))))

    per_epoch: List[EpochStats] = []
    for epoch in range(config.schedule.total_epochs):
        lr = config.schedule.lr_at(config.optimizer.lr, epoch)
        _set_lr(opt, lr)
        net.train()
        tot, seen = 0.0, 0
        for idx in _epoch_batches(x.shape[0], config.batch_size, data_rng):
            xb = x[idx]
            if config.augment:
                xb = _augment(xb, aug_rng)
            loss = cross_entropy(net(xb), y[idx], from_logits=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(idx)
            seen += len(idx)
        mean = tot / seen
        if not math.isfinite(mean):
            raise NumericalError(f"teacher loss diverged at epoch {epoch}")
        per_epoch.append(EpochStats(epoch=epoch, train_loss=mean, ce_term=mean,
                                    distill_term=0.0, weak_bound=float("nan"), lr=lr))
    acc = evaluate_accuracy(net, data.test_x, data.test_y)
    record = RunRecord(
        per_epoch=per_epoch,
        final={"student_test_acc": acc, "teacher_test_acc": acc,
               "wallclock_s": time.time() - t0},
        config_hash=config.config_hash(), seed=config.seed,
        objective="TEACHER", name=config.name,
        teacher=spec.descriptor, student=spec.descriptor,
        tau=config.tau, config=config.to_dict())
    net.eval()
    return net, record


class _ContrastivePair:
    """Projection heads and banks tying one teacher to the student."""

    def __init__(self, teacher_dim: int, student_dim: int, cfg: DistillRunConfig,
                 bank_size: int, labels):
        gen = torch.Generator().manual_seed(stream_seed(cfg.seed, "heads"))
        wt = ProjectionHead.create(teacher_dim, cfg.embed_dim, gen).weight
        ws = ProjectionHead.create(student_dim, cfg.embed_dim, gen).weight
        self.head_t = ProjectionHead(weight=nn.Parameter(wt), embed_dim=cfg.embed_dim)
        self.head_s = ProjectionHead(weight=nn.Parameter(ws), embed_dim=cfg.embed_dim)
        self.bank_t = init_bank(bank_size, cfg.embed_dim, labels=labels,
                                seed=stream_seed(cfg.seed, "bank_t"))
        self.bank_s = init_bank(bank_size, cfg.embed_dim, labels=labels,
                                seed=stream_seed(cfg.seed, "bank_s"))

    def parameters(self):
        return [self.head_t.weight, self.head_s.weight]


def _infonce_parts(e_t: EmbeddingBatch, e_s: EmbeddingBatch, bank_t: MemoryBank,
                   bank_s: MemoryBank, tau: float, neg_idx: np.ndarray):
    flat = torch.from_numpy(neg_idx.reshape(-1))
    b, count = neg_idx.shape
    neg_s = bank_s.store[flat].reshape(b, count, bank_s.dim)
    neg_t = bank_t.store[flat].reshape(b, count, bank_t.dim)
    return (infonce_loss(e_t, e_s, neg_s, tau), infonce_loss(e_s, e_t, neg_t, tau))


def _step_seed(base: int, step: int) -> int:
    ss = np.random.SeedSequence(base, spawn_key=(step,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def distill(config: DistillRunConfig, teacher: TeacherLike):
    """Train a student against one teacher with the configured objective."""
    return _distill_multi(config, [teacher])


def ensemble_distill(config: DistillRunConfig, teacher_checkpoints: Sequence[TeacherLike]):
    """Sum of pairwise contrastive terms against several teachers."""
    if not teacher_checkpoints:
        raise ConfigError("teachers", "ensemble needs at least one teacher")
    if config.objective not in CRD_FAMILY:
        raise ConfigError("objective",
                          "ensemble distillation requires a contrastive objective")
    return _distill_multi(config, list(teacher_checkpoints))


def _distill_multi(config: DistillRunConfig, teacher_list: Sequence[TeacherLike]):
    t0 = time.time()
    obj = config.objective
    if len(teacher_list) > 1 and obj not in CRD_FAMILY:
        raise ConfigError("objective", f"{obj.value} supports a single teacher")
    data = get_dataset(config.dataset)
    x_tr, y_tr = data.train_x, data.train_y
    n = x_tr.shape[0]
    cache_tag = f"{config.dataset.generation_seed():08x}:train"

    teachers = [_resolve_teacher(t) for t in teacher_list]
    student = build_model(config.student_spec, stream_seed(config.seed, "student_init"))
    critic_cfg = config.make_critic()
    beta = config.effective_beta
    policy = config.sampling_policy

    params = list(student.parameters())
    caches: List[dict] = []
    pairs: List[_ContrastivePair] = []
    regressor_w: Optional[nn.Parameter] = None

    want_logits = obj in (Objective.KD, Objective.CRD_KD)
    want_feats = obj in (Objective.FITNET,) or obj in CRD_FAMILY
    want_maps = obj is Objective.AT
    for t_net in teachers:
        if want_logits or want_feats or want_maps:
            out = _teacher_outputs(t_net, x_tr, cache_tag, want_maps=want_maps)
            caches.append(out)
            if want_logits and out["logits"].shape[1] != config.student_spec.classes:
                raise ConfigError("teacher_spec", "teacher/student class counts differ")
        else:
            caches.append({})

    if obj in CRD_FAMILY:
        bank_labels = y_tr if policy == SamplingPolicy.SUPERVISED else None
        for t_net, cache in zip(teachers, caches):
            pair = _ContrastivePair(cache["feats"].shape[1], student.penultimate_dim,
                                    config, bank_size=n, labels=bank_labels)
            pairs.append(pair)
            params.extend(pair.parameters())
    elif obj is Objective.FITNET:
        gen = torch.Generator().manual_seed(stream_seed(config.seed, "regressor"))
        t_dim = caches[0]["feats"].shape[1]
        w = torch.empty(student.penultimate_dim, t_dim)
        nn.init.normal_(w, std=1.0 / math.sqrt(student.penultimate_dim), generator=gen)
        regressor_w = nn.Parameter(w)
        params.append(regressor_w)
    elif obj is Objective.AT:
        s_blocks = len(config.student_spec.widths)
        t_maps = caches[0]["maps"]
        if len(t_maps) != s_blocks:
            raise ConfigError("student_spec",
                              "attention transfer needs matching block counts")

    opt = _make_optimizer(params, config)
    data_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(stream_seed(config.seed, "data_order"))))
    aug_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(stream_seed(config.seed, "augment"))))
    neg_base = stream_seed(config.seed, "negatives")
    n_eff = critic_cfg.n_negatives
    # Z0 (a constant approximate softmax divisor) calibrates the critic's
    # unnormalized scores; estimated once from the first batch when enabled.
    z0_pending = (config.z0 is None and config.auto_z0 and obj in
                  (Objective.CRD, Objective.CRD_KD))

    per_epoch: List[EpochStats] = []
    global_step = 0
    for epoch in range(config.schedule.total_epochs):
        lr = config.schedule.lr_at(config.optimizer.lr, epoch)
        _set_lr(opt, lr)
        student.train()
        acc_loss = acc_ce = acc_dist = acc_bound = 0.0
        seen = 0
        for idx in _epoch_batches(n, config.batch_size, data_rng):
            xb = x_tr[idx]
            yb = y_tr[idx]
            if config.augment:
                xb = _augment(xb, aug_rng)
            logits, feats, acts = student.forward_full(xb)
            ce = cross_entropy(logits, yb, from_logits=True)
            sidx = torch.from_numpy(idx.astype(np.int64))

            distill_term = logits.new_zeros(())
            bound_val = float("nan")
            bank_writes = []
            if obj in CRD_FAMILY:
                step_seed = _step_seed(neg_base, global_step)
                blab = yb if policy == SamplingPolicy.SUPERVISED else None
                neg_idx = None
                for pair, cache in zip(pairs, caches):
                    e_t = project_and_normalize(
                        FeatureBatch(cache["feats"][idx], sidx, blab), pair.head_t)
                    e_s = project_and_normalize(
                        FeatureBatch(feats, sidx, blab), pair.head_s)
                    if neg_idx is None:
                        neg_idx = sample_negative_matrix(e_t, pair.bank_s, policy,
                                                         n_eff, step_seed)
                    if z0_pending:
                        with torch.no_grad():
                            flat = torch.from_numpy(neg_idx.reshape(-1))
                            bank_rows = pair.bank_s.store[flat].reshape(
                                len(idx), n_eff, -1)
                            inner = torch.einsum("bd,bnd->bn",
                                                 e_t.values.detach(), bank_rows)
                            scores = torch.exp(inner / critic_cfg.tau).reshape(-1)
                        critic_cfg = replace(critic_cfg, z0=estimate_z0(
                            scores.numpy(), critic_cfg.dataset_size))
                        z0_pending = False
                    if obj is Objective.INFONCE_CRD:
                        dir_t, dir_s = _infonce_parts(e_t, e_s, pair.bank_t,
                                                      pair.bank_s, critic_cfg.tau,
                                                      neg_idx)
                    else:
                        dir_t, dir_s = symmetric_crd_parts(
                            e_t, e_s, pair.bank_t, pair.bank_s, policy,
                            critic_cfg, step_seed, neg_indices=neg_idx)
                    distill_term = distill_term + dir_t + dir_s
                    if pair is pairs[0] and obj is not Objective.INFONCE_CRD:
                        bound_val = math.log(n_eff) - float(dir_t.detach())
                    bank_writes.append((pair.bank_t, idx, e_t))
                    bank_writes.append((pair.bank_s, idx, e_s))
            elif obj is Objective.AT:
                s_maps = AttentionMapSet(
                    maps=[compute_attention_map(a) for a in acts],
                    layer_ids=list(range(len(acts))))
                t_maps = AttentionMapSet(
                    maps=[m[idx] for m in caches[0]["maps"]],
                    layer_ids=list(range(len(acts))))
                distill_term = at_distill_term(s_maps, t_maps)
            elif obj is Objective.FITNET:
                distill_term = fitnet_distill_term(
                    FeatureBatch(caches[0]["feats"][idx], sidx),
                    FeatureBatch(feats, sidx),
                    Regressor(weight=regressor_w),
                    squared=config.fitnet_squared)

            if obj is Objective.KD:
                t_log = caches[0]["logits"][idx]
                soft_t = softmax_with_temperature(t_log, config.rho)
                soft = config.rho ** 2 * cross_entropy(logits / config.rho, soft_t,
                                                       from_logits=True)
                loss = (1.0 - config.alpha) * ce + config.alpha * soft
                distill_term = soft.detach()
            else:
                loss = compose_distill_loss(ce, distill_term, beta)
                if obj is Objective.CRD_KD:
                    t_log = caches[0]["logits"][idx]
                    soft_t = softmax_with_temperature(t_log, config.rho)
                    soft = config.rho ** 2 * cross_entropy(logits / config.rho,
                                                           soft_t, from_logits=True)
                    loss = loss + config.alpha * soft

            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                for bank, widx, emb in bank_writes:
                    bank_update(bank, widx,
                                EmbeddingBatch(emb.values.detach(), emb.sample_index))
            b = len(idx)
            acc_loss += float(loss.detach()) * b
            acc_ce += float(ce.detach()) * b
            acc_dist += float(distill_term.detach()) * b
            if not math.isnan(bound_val):
                acc_bound += bound_val * b
            seen += b
            global_step += 1

        stats = EpochStats(
            epoch=epoch,
            train_loss=acc_loss / seen,
            ce_term=acc_ce / seen,
            distill_term=acc_dist / seen,
            weak_bound=(acc_bound / seen) if obj in (Objective.CRD, Objective.CRD_KD)
            else float("nan"),
            lr=lr)
        if not math.isfinite(stats.train_loss):
            raise NumericalError(f"training loss diverged at epoch {epoch}")
        per_epoch.append(stats)

    student.eval()
    student_acc = evaluate_accuracy(student, data.test_x, data.test_y)
    test_tag = f"{config.dataset.generation_seed():08x}:test"
    t_test = _teacher_outputs(teachers[0], data.test_x, test_tag)["logits"]
    teacher_acc = 100.0 * float((t_test.argmax(dim=1) == data.test_y).float().mean())
    with torch.no_grad():
        s_logits, _, _ = _batched_forward(student, data.test_x)
    corr = analysis.correlation_diff(
        analysis.logit_correlation(t_test.numpy()),
        analysis.logit_correlation(s_logits.numpy()))

    final = {
        "student_test_acc": student_acc,
        "teacher_test_acc": teacher_acc,
        "wallclock_s": time.time() - t0,
        "corr_frobenius": corr.frobenius,
        "corr_diff": corr.matrix.tolist(),
        "weak_bound_final": (per_epoch[-1].weak_bound if per_epoch else float("nan")),
    }
    record = RunRecord(
        per_epoch=per_epoch, final=final, config_hash=config.config_hash(),
        seed=config.seed, objective=obj.value, name=config.name,
        teacher=config.teacher_spec.descriptor,
        student=config.student_spec.descriptor,
        tau=config.tau, config=config.to_dict())
    return student, record


def crossmodal_distill(config: DistillRunConfig, teacher: TeacherLike,
                       paired: PairedViews):
    """Label-free transfer across modalities with the pure contrastive term."""
    t0 = time.time()
    if config.objective not in CRD_FAMILY:
        raise ConfigError("objective", "cross-modal transfer is contrastive-only")
    teacher_net = _resolve_teacher(teacher)
    n = len(paired)
    x_t, x_s = paired.view_teacher, paired.view_student
    if x_s.shape[1] != config.student_spec.in_channels:
        raise ConfigError("student_spec.in_channels",
                          f"student expects {config.student_spec.in_channels} channels, "
                          f"view has {x_s.shape[1]}")
    t_spec = getattr(teacher_net, "spec", None)
    if t_spec is not None and t_spec.kind == "conv" and x_t.shape[1] != t_spec.in_channels:
        raise DataError(f"teacher expects {t_spec.in_channels} channels, "
                        f"view has {x_t.shape[1]}")
    student = build_model(config.student_spec, stream_seed(config.seed, "student_init"))
    critic_cfg = CriticConfig(dataset_size=n, tau=config.tau,
                              n_negatives=config.n_negatives, z0=config.z0)
    cache_tag = f"crossmodal:{n}:{float(x_t.sum()):.6e}"
    t_feats = _teacher_outputs(teacher_net, x_t, cache_tag)["feats"]

    pair = _ContrastivePair(t_feats.shape[1], student.penultimate_dim, config,
                            bank_size=n, labels=None)
    params = list(student.parameters()) + pair.parameters()
    opt = _make_optimizer(params, config)
    data_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(stream_seed(config.seed, "data_order"))))
    neg_base = stream_seed(config.seed, "negatives")
    beta = config.effective_beta
    n_eff = critic_cfg.n_negatives

    per_epoch: List[EpochStats] = []
    global_step = 0
    for epoch in range(config.schedule.total_epochs):
        lr = config.schedule.lr_at(config.optimizer.lr, epoch)
        _set_lr(opt, lr)
        student.train()
        acc_loss = acc_bound = 0.0
        seen = 0
        for idx in _epoch_batches(n, config.batch_size, data_rng):
            sidx = torch.from_numpy(idx.astype(np.int64))
            _, feats, _ = student.forward_full(x_s[idx])
            e_t = project_and_normalize(FeatureBatch(t_feats[idx], sidx), pair.head_t)
            e_s = project_and_normalize(FeatureBatch(feats, sidx), pair.head_s)
            step_seed = _step_seed(neg_base, global_step)
            dir_t, dir_s = symmetric_crd_parts(
                e_t, e_s, pair.bank_t, pair.bank_s,
                SamplingPolicy.UNSUPERVISED, critic_cfg, step_seed)
            loss = beta * (dir_t + dir_s)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                bank_update(pair.bank_t, idx,
                            EmbeddingBatch(e_t.values.detach(), sidx))
                bank_update(pair.bank_s, idx,
                            EmbeddingBatch(e_s.values.detach(), sidx))
            b = len(idx)
            acc_loss += float(loss.detach()) * b
            acc_bound += (math.log(n_eff) - float(dir_t.detach())) * b
            seen += b
            global_step += 1
        stats = EpochStats(epoch=epoch, train_loss=acc_loss / seen, ce_term=0.0,
                           distill_term=acc_loss / seen / max(beta, 1e-12),
                           weak_bound=acc_bound / seen, lr=lr)
        if not math.isfinite(stats.train_loss):
            raise NumericalError(f"cross-modal loss diverged at epoch {epoch}")
        per_epoch.append(stats)

    student.eval()
    final = {"student_test_acc": float("nan"), "teacher_test_acc": float("nan"),
             "wallclock_s": time.time() - t0,
             "weak_bound_final": per_epoch[-1].weak_bound if per_epoch else float("nan")}
    record = RunRecord(per_epoch=per_epoch, final=final,
                       config_hash=config.config_hash(), seed=config.seed,
                       objective="CROSSMODAL_" + config.objective.value,
                       name=config.name, teacher=config.teacher_spec.descriptor,
                       student=config.student_spec.descriptor, tau=config.tau,
                       config=config.to_dict())
    return student, record


def linear_probe(frozen_feature_extractor: nn.Module, labeled_dataset,
                 classes: int) -> float:
    """Fit a linear classifier on frozen features; returns test accuracy %.

    `labeled_dataset` is (train_x, train_y, test_x, test_y). The extractor
    is verified to be byte-identical before and after the probe.
    """
    from sklearn.linear_model import LogisticRegression

    train_x, train_y, test_x, test_y = labeled_dataset
    before = param_checksum(frozen_feature_extractor)
    frozen_feature_extractor.eval()

    def embed(x):
        outs = []
        with torch.no_grad():
            for s in range(0, x.shape[0], 512):
                outs.append(frozen_feature_extractor.features(x[s:s + 512]))
        return torch.cat(outs).double().numpy()

    ftr, fte = embed(train_x), embed(test_x)
    ytr = np.asarray(train_y).reshape(-1)
    yte = np.asarray(test_y).reshape(-1)
    if ytr.min() < 0 or ytr.max() >= classes:
        raise DataError(f"labels must lie in [0, {classes})")
    clf = LogisticRegression(max_iter=500)
    clf.fit(ftr, ytr)
    acc = 100.0 * float((clf.predict(fte) == yte).mean())
    if param_checksum(frozen_feature_extractor) != before:
        raise DistillkitError("feature extractor was mutated during the probe")
    return acc
