"""Optimization loop for the saliency model.

The trainer is deliberately plain: per-element SGD with momentum, a
geometric learning-rate decay, an encoder freeze for the first epochs,
and a composite distribution loss.  Everything that varies from run to
run is driven by one integer seed, so two runs with the same seed write
the same report byte for byte.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import metrics as M
from .model import save_checkpoint
from .tensor import Tensor, no_grad

_LOG_EPS = 1e-7    # inside log(pred + eps)
_VAR_EPS = 1e-7    # inside sqrt(var + eps)


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the composite loss

        L = KLD(gt || pred) - beta_cc * CC - beta_nss * NSS

    averaged over the frames of a batch.
    """
    beta_cc: float = 0.1
    beta_nss: float = 0.1

    def __post_init__(self):
        if self.beta_cc < 0 or self.beta_nss < 0:
            raise ValueError("loss weights must be nonnegative")


def saliency_loss(pred, gt, fix, weights=LossWeights()):
    """Differentiable composite loss for one batch of frames.

    pred is a (n, 1, h, w) Tensor of per-image probability maps.  gt is
    a (n, h, w) array of nonnegative ground-truth maps (any scale; each
    is normalized here) and fix a (n, h, w) boolean fixation raster.
    Rows without fixations simply contribute no NSS term.

    Returns (loss, parts) where loss is a scalar Tensor and parts holds
    the detached per-batch means of the three components.
    """
    n, _, h, w = pred.data.shape
    gt = np.asarray(gt, dtype=np.float64)
    fix = np.asarray(fix, dtype=bool)
    if gt.shape != (n, h, w) or fix.shape != (n, h, w):
        raise ValueError("pred, gt and fix shapes disagree")
    m = h * w

    p = pred.reshape((n, m))
    q = gt.reshape(n, m)
    sums = q.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        bad = int(np.argmin(sums))
        raise ValueError(f"ground truth {bad} in batch is all zero")
    q = q / sums

    # KLD(q || p): the q log q part carries no gradient so it stays in
    # plain numpy.  Row shapes are kept (n, 1) throughout.
    q_ent = np.where(q > 0, q * np.log(np.maximum(q, 1e-300)), 0.0)
    kld_rows = (p + _LOG_EPS).log() * q * (-1.0)
    kld_rows = kld_rows.sum(axis=1, keepdims=True) \
        + q_ent.sum(axis=1, keepdims=True)

    # Pearson correlation with population statistics, variance guarded.
    pc = p - p.mean(axis=1, keepdims=True)
    qc = q - q.mean(axis=1, keepdims=True)
    cov = (pc * qc).mean(axis=1, keepdims=True)
    var_p = (pc * pc).mean(axis=1, keepdims=True)
    var_q = (qc * qc).mean(axis=1, keepdims=True)
    cc_rows = cov / ((var_p + _VAR_EPS).sqrt() * np.sqrt(var_q + _VAR_EPS))

    # NSS: mean of the z-scored prediction over fixated cells.  The
    # fixation raster becomes a constant weight matrix with rows summing
    # to one (or all zero when a frame has no fixations).
    counts = fix.reshape(n, m).sum(axis=1, keepdims=True)
    fw = fix.reshape(n, m) / np.maximum(counts, 1)
    z = pc / (var_p + _VAR_EPS).sqrt()
    nss_rows = (z * fw).sum(axis=1, keepdims=True)

    loss = (kld_rows - cc_rows * weights.beta_cc
            - nss_rows * weights.beta_nss).mean()
    parts = {"kld": float(kld_rows.data.mean()),
             "cc": float(cc_rows.data.mean()),
             "nss": float(nss_rows.data.mean())}
    return loss, parts


def clip_loss(preds, gts, fixes, weights=LossWeights()):
    """Average of per-frame composite losses over a clip.

    preds is a list of (n, 1, h, w) Tensors, gts / fixes lists of the
    matching arrays.  Returns (loss, parts) like saliency_loss with
    parts averaged over frames.
    """
    if not preds:
        raise ValueError("empty clip")
    total = None
    acc = {"kld": 0.0, "cc": 0.0, "nss": 0.0}
    for pr, gt, fx in zip(preds, gts, fixes):
        one, parts = saliency_loss(pr, gt, fx, weights)
        total = one if total is None else total + one
        for k in acc:
            acc[k] += parts[k]
    t = len(preds)
    return total * (1.0 / t), {k: v / t for k, v in acc.items()}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """SGD with momentum, weight decay and gradient clipping.

    The per-parameter velocities are keyed by (path, tag) so shared and
    domain-private copies of the same layer never mix."""
    base_lr: float = 0.04
    decay: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_bound: float = 2.0
    epoch: int = 0
    velocities: dict = field(default_factory=dict)

    def lr(self):
        """Schedule value for the current epoch: base_lr * decay**epoch."""
        return self.base_lr * self.decay ** self.epoch


def param_group(path):
    """Every parameter belongs to either the encoder group or the rest."""
    return "encoder" if path.startswith("encoder.") else "rest"


def sgd_step(named_params, state, group_scales, batch_scale=1.0):
    """Apply one update to every parameter that has a gradient.

    The per-element order is fixed: clip the raw gradient to
    [-clip_bound, clip_bound], add the weight-decay term, fold into the
    velocity, then subtract lr_eff * velocity where

        lr_eff = state.lr() * group_scales[group] * batch_scale.

    Parameters whose group scale is zero are skipped entirely, so a
    frozen encoder accumulates no velocity.  Parameters with grad None
    (an unused domain slot, say) are skipped too.
    """
    lr0 = state.lr() * batch_scale
    for path, tag, t in named_params:
        if t.grad is None:
            continue
        scale = group_scales[param_group(path)]
        if scale == 0.0:
            continue
        if not np.all(np.isfinite(t.grad)):
            raise TrainingDiverged(f"non-finite gradient in {path} [{tag}]")
        g = np.clip(t.grad, -state.clip_bound, state.clip_bound)
        g = g + state.weight_decay * t.data
        key = (path, tag)
        v = state.velocities.get(key)
        v = g if v is None else state.momentum * v + g
        state.velocities[key] = v
        t.data = t.data - (lr0 * scale) * v


# ---------------------------------------------------------------------------
# schedule policy


@dataclass(frozen=True)
class TrainPolicy:
    """Everything about a run that is not the optimizer arithmetic."""
    total_epochs: int = 16
    encoder_freeze_epochs: int = 2
    encoder_lr_divisor: float = 10.0
    static_domain_lr_factor: float = 0.5
    early_stop_domain: str = ""
    patience: int = 3
    steps_per_epoch: int = 0        # 0 means one pass over the schedule
    clip_length: int = 12
    target_fps: int = 6
    static_batch: int = 32
    dynamic_batch: int = 4
    freeze_encoder_bn: bool = False  # keep encoder stats frozen even after

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


def apply_freeze_policy(policy, epoch):
    """Group learning-rate scales plus the encoder-stats flag for an epoch.

    During the first encoder_freeze_epochs epochs the encoder group gets
    scale 0 and its normalization statistics stay put; afterwards it
    trains at 1/encoder_lr_divisor of the base rate.
    """
    if epoch < policy.encoder_freeze_epochs:
        scales = {"encoder": 0.0, "rest": 1.0}
        bn_frozen = True
    else:
        scales = {"encoder": 1.0 / policy.encoder_lr_divisor, "rest": 1.0}
        bn_frozen = bool(policy.freeze_encoder_bn)
    return scales, bn_frozen


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainReport:
    lines: list
    history: list
    step_records: list
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False

    def text(self):
        return "\n".join(self.lines) + "\n"


def _fmt(x):
    return format(float(x), ".17g")


def _batch_sizes(policy, datasets):
    return {name: policy.static_batch if not ds.domain.dynamic
            else policy.dynamic_batch
            for name, ds in datasets.items()}


def _one_clip(sample, policy, seed_parts):
    """Pick one training clip from a dynamic sample, or None if the
    sample is too short to yield any.  seed_parts is a flat list of
    ints naming the (run, epoch, batch, slot) the pick belongs to."""
    clips = D.make_clips(sample, clip_length=policy.clip_length,
                         rng_seed=seed_parts, target_fps=policy.target_fps)
    if not clips:
        return None
    rng = np.random.default_rng(seed_parts + [1])
    return clips[int(rng.integers(len(clips)))]


def _val_loss(model, datasets, policy, weights, rng_seed):
    """Per-domain validation loss with a fixed protocol.

    Static domains run in evaluation mode over all samples; dynamic
    domains run one offset-zero clip per sample so the number stays
    comparable across epochs.
    """
    out = {}
    with no_grad():
        for name in sorted(datasets):
            ds = datasets[name]
            samples = [ds[i] for i in range(len(ds))]
            losses = []
            if ds.domain.dynamic:
                for s in samples:
                    stride = D.assimilation_stride(ds.domain.native_fps,
                                                   policy.target_fps)
                    idx = list(range(0, len(s.frames), stride))
                    idx = idx[:policy.clip_length]
                    if len(idx) < policy.clip_length:
                        continue
                    x, gt, fx = D.stack_clip_batch([s], [tuple(idx)])
                    preds = model.forward_clip([Tensor(f) for f in x],
                                               ds.domain, clip_tag=0,
                                               rng_seed=rng_seed)
                    loss, _ = clip_loss(preds, gt, fx, weights)
                    losses.append(float(loss.data))
            else:
                bs = policy.static_batch
                for lo in range(0, len(samples), bs):
                    chunk = samples[lo:lo + bs]
                    x, gt, fx = D.stack_static_batch(chunk)
                    pred = model.forward_image(Tensor(x), ds.domain,
                                               rng_seed=rng_seed)
                    loss, _ = saliency_loss(pred, gt, fx, weights)
                    losses.extend([float(loss.data)] * len(chunk))
            out[name] = float(np.mean(losses)) if losses else math.nan
    return out


def train(model, datasets, policy=TrainPolicy(), opt=None,
          weights=LossWeights(), *, val_datasets=None, rng_seed=0,
          checkpoint_path=None, log=None):
    """Run the full schedule and return a TrainReport.

    datasets maps domain names to Dataset objects; every name must be
    registered on the model.  val_datasets defaults to the training
    sets.  When checkpoint_path is given the best model (by validation
    loss on policy.early_stop_domain, or on the mean when unset) is
    saved there each time it improves.
    """
    if opt is None:
        opt = OptimizerState()
    if val_datasets is None:
        val_datasets = datasets
    for name in datasets:
        model.registry[name]   # raises on an unknown domain
    stop_dom = policy.early_stop_domain
    if stop_dom and stop_dom not in val_datasets:
        raise ValueError(f"early_stop_domain {stop_dom!r} has no dataset")

    sizes = _batch_sizes(policy, datasets)
    report = TrainReport(lines=[], history=[], step_records=[])
    since_best = 0
    gstep = 0

    for epoch in range(policy.total_epochs):
        opt.epoch = epoch
        scales, bn_frozen = apply_freeze_policy(policy, epoch)
        batches = D.schedule_epoch(datasets, sizes, rng_seed=[rng_seed, epoch])
        if policy.steps_per_epoch:
            reps = -(-policy.steps_per_epoch // len(batches))
            batches = (batches * reps)[:policy.steps_per_epoch]

        sums = {name: [0.0, 0.0, 0] for name in datasets}  # loss, kld, count
        for bi, batch in enumerate(batches):
            ds = datasets[batch.domain_name]
            dom = ds.domain
            bscale = (policy.static_domain_lr_factor
                      if not dom.dynamic else 1.0)
            samples = [ds[i] for i in batch.sample_indices]
            if dom.dynamic:
                picked, clips = [], []
                for j, s in enumerate(samples):
                    c = _one_clip(s, policy, [rng_seed, epoch, bi, j])
                    if c is not None:
                        picked.append(s)
                        clips.append(c)
                if not picked:
                    continue
                x, gt, fx = D.stack_clip_batch(picked, clips)
                preds = model.forward_clip(
                    [Tensor(f) for f in x], dom, training=True, step=gstep,
                    clip_tag=gstep, rng_seed=rng_seed,
                    encoder_bn_frozen=bn_frozen)
                loss, parts = clip_loss(preds, gt, fx, weights)
            else:
                x, gt, fx = D.stack_static_batch(samples)
                pred = model.forward_image(
                    Tensor(x), dom, training=True, step=gstep,
                    rng_seed=rng_seed, encoder_bn_frozen=bn_frozen)
                loss, parts = saliency_loss(pred, gt, fx, weights)

            lval = float(loss.data)
            if not math.isfinite(lval):
                raise TrainingDiverged(
                    f"loss became {lval} at step {gstep} "
                    f"(epoch {epoch}, domain {dom.name})")
            model.zero_grad()
            loss.backward()
            sgd_step(model.named_parameters(), opt, scales, bscale)

            s = sums[dom.name]
            s[0] += lval
            s[1] += parts["kld"]
            s[2] += 1
            report.step_records.append(
                {"step": gstep, "epoch": epoch, "domain": dom.name,
                 "loss": lval, "kld": parts["kld"]})
            gstep += 1

        val = _val_loss(model, val_datasets, policy, weights, rng_seed)
        for name in sorted(datasets):
            dom = datasets[name].domain
            bscale = policy.static_domain_lr_factor if not dom.dynamic else 1.0
            lr_rest = opt.lr() * scales["rest"] * bscale
            lr_enc = opt.lr() * scales["encoder"] * bscale
            tl, tk, tc = sums[name]
            rec = {"epoch": epoch, "domain": name,
                   "loss": tl / tc if tc else math.nan,
                   "kld": tk / tc if tc else math.nan,
                   "val_loss": val.get(name, math.nan),
                   "lr": lr_rest, "lr_encoder": lr_enc, "batches": tc}
            report.history.append(rec)
            line = (f"epoch={epoch} domain={name} "
                    f"loss={_fmt(rec['loss'])} kld={_fmt(rec['kld'])} "
                    f"val_loss={_fmt(rec['val_loss'])} "
                    f"lr={_fmt(lr_rest)} lr_encoder={_fmt(lr_enc)} "
                    f"batches={tc}")
            report.lines.append(line)
            if log:
                log(line)

        crit = (val[stop_dom] if stop_dom
                else float(np.mean(list(val.values()))))
        if crit < report.best_val:
            report.best_val = crit
            report.best_epoch = epoch
            since_best = 0
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path)
        else:
            since_best += 1
            if since_best >= policy.patience:
                report.stopped_early = True
                line = (f"early_stop=1 epoch={epoch} "
                        f"best_epoch={report.best_epoch} "
                        f"best_val={_fmt(report.best_val)}")
                report.lines.append(line)
                if log:
                    log(line)
                break

    return report


# ---------------------------------------------------------------------------
# evaluation

METRIC_NAMES = ("auc_judd", "s_auc", "nss", "cc", "sim", "kld", "info_gain")


def _worker_count(max_threads=None):
    env = os.environ.get("UNISAL_NUM_THREADS", "").strip()
    n = int(env) if env else 0
    if max_threads:
        n = min(n, max_threads) if n else max_threads
    return max(n, 1)


def _predict_maps(model, ds, sample, target_fps):
    """Per-frame probability maps for one sample, evaluation mode."""
    with no_grad():
        if ds.domain.dynamic:
            stride = D.assimilation_stride(ds.domain.native_fps, target_fps)
            idx = tuple(range(0, len(sample.frames), stride))
            x, gt, fx = D.stack_clip_batch([sample], [idx])
            preds = model.forward_clip([Tensor(f) for f in x], ds.domain)
            maps = [p.data[0, 0] for p in preds]
            gts = [g[0] for g in gt]
            fixes = [f[0] for f in fx]
        else:
            x, gt, fx = D.stack_static_batch([sample])
            pred = model.forward_image(Tensor(x), ds.domain)
            maps, gts, fixes = [pred.data[0, 0]], [gt[0]], [fx[0]]
    return maps, gts, fixes


def evaluate(model, dataset, metric_names=("kld", "cc", "nss", "sim",
                                           "auc_judd"), *,
             seed=0, target_fps=6, max_threads=None):
    """Frozen-model metrics over a dataset.

    Returns {"per_sample": [...], "aggregate": {...}, "failures": {...},
    "n_samples": N}.  A metric that cannot be computed for a sample
    (no fixations for AUC, a constant map for CC) is excluded from the
    aggregate and counted under failures instead of aborting the run.
    """
    for n in metric_names:
        if n not in METRIC_NAMES:
            raise ValueError(f"unknown metric {n!r}; valid names: "
                             + ", ".join(METRIC_NAMES))
    samples = [dataset[i] for i in range(len(dataset))]
    if not samples:
        raise ValueError("empty dataset")

    fix_pool = [s.fixations[0] for s in samples]
    base = None
    if "info_gain" in metric_names:
        base = np.zeros(dataset.domain.input_resolution)
        for s in samples:
            g = s.saliency[0]
            base = base + g / max(g.sum(), 1e-12)
        base = base / base.sum()

    def score(i):
        s = samples[i]
        maps, gts, fixes = _predict_maps(model, dataset, s, target_fps)
        row = {"sample_id": s.sample_id}
        for name in metric_names:
            vals = []
            for t, (pm, gm, fm) in enumerate(zip(maps, gts, fixes)):
                try:
                    if name == "auc_judd":
                        vals.append(M.auc_judd(pm, fm))
                    elif name == "s_auc":
                        others = fix_pool[:i] + fix_pool[i + 1:]
                        vals.append(M.s_auc(pm, fm, others,
                                            seed=[seed, i, t]))
                    elif name == "nss":
                        vals.append(M.nss(pm, fm))
                    elif name == "cc":
                        vals.append(M.cc(pm, gm))
                    elif name == "sim":
                        vals.append(M.sim(pm, gm))
                    elif name == "kld":
                        vals.append(M.kld(pm, gm))
                    elif name == "info_gain":
                        vals.append(M.info_gain(pm, base, fm))
                except ValueError:
                    pass
            row[name] = float(np.mean(vals)) if vals else None
        return row

    workers = _worker_count(max_threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, range(len(samples))))
    else:
        rows = [score(i) for i in range(len(samples))]

    aggregate, failures = {}, {}
    for name in metric_names:
        vals = [r[name] for r in rows if r[name] is not None]
        failures[name] = len(rows) - len(vals)
        aggregate[name] = float(np.mean(vals)) if vals else math.nan
    return {"per_sample": rows, "aggregate": aggregate,
            "failures": failures, "n_samples": len(rows)}
