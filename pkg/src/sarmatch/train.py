"""Semi-supervised training loop and inference."""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_model_tensors, model_tensors, save_checkpoint
from .data import Batch, ImagePair, batch_iterator, parse_ratio
from .fftncc import Heatmap
from .losses import (DEEP_LABEL_RULES, DEFAULT_LOGIT_SCALE, LossBundle, cmi_loss, deep_positions, heatmap_ce,
                     make_pseudo_label, pseudo_ce)
from .metrics import compute_metrics, distances
from .model import Matcher, ModelConfig, build_matcher

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 5e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    labeled_ratio: str = "1:15"
    logit_scale: float = DEFAULT_LOGIT_SCALE
    pseudo_mode: str = "hard"
    deep_label: str = "floor"
    seed: int = 0
    checkpoint_every: int = 0
    joint_step: bool = False
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    static_crops: bool = False
    template_size: int = 192
    ce_weight: float = 1.0
    pce_weight: float = 1.0
    cmi_weight: float = 1.0
    mi_bins: int = 16

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.pseudo_mode not in ("hard", "soft"):
            raise ValueError(f"pseudo_mode must be hard or soft, got {self.pseudo_mode!r}")
        if self.deep_label not in DEEP_LABEL_RULES:
            raise ValueError(f"deep_label must be one of {DEEP_LABEL_RULES}, got {self.deep_label!r}")
        parse_ratio(self.labeled_ratio)

    def to_kv(self) -> dict[str, str]:
        return {f"train.{k}": str(v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str], prefix: str = "train.") -> "TrainConfig":
        defaults = cls()
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = prefix + f.name
            if key in kv:
                like = getattr(defaults, f.name)
                text = kv[key]
                if isinstance(like, bool):
                    kwargs[f.name] = text in ("True", "true", "1")
                elif isinstance(like, int):
                    kwargs[f.name] = int(text)
                elif isinstance(like, float):
                    kwargs[f.name] = float(text)
                else:
                    kwargs[f.name] = text
        return cls(**kwargs)


@dataclass
class MatchResult:
    predicted_offset: tuple[int, int]
    peak_score: float
    heatmaps: dict[str, torch.Tensor]
    elapsed_ms: float
    feature_ms: float = 0.0
    correlation_ms: float = 0.0


@dataclass
class FitResult:
    model: Matcher
    steps: list[dict] = field(default_factory=list)
    cycles: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final_semi_total(self) -> float:
        return self.cycles[-1]["semi_total"] if self.cycles else float("nan")


class Trainer:
    def __init__(self, model: Matcher, config: TrainConfig, dump_dir=None):
        self.model = model
        self.config = config
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
            eps=config.adam_eps, weight_decay=config.weight_decay)
        self.step_count = 0

    # -- loss assembly ------------------------------------------------------

    def _cmi(self, out, bundle: LossBundle) -> torch.Tensor:
        total = torch.zeros(())
        for level, enh in (("deep", out.enhanced_deep), ("shallow", out.enhanced_shallow)):
            if enh is None:
                continue
            mi_sar, mi_opt = cmi_loss(enh, bins=self.config.mi_bins)
            bundle.cmi_sar += mi_sar.item()
            bundle.cmi_opt += mi_opt.item()
            setattr(bundle, f"cmi_{level}", mi_sar.item() + mi_opt.item())
            total = total + mi_sar + mi_opt
        return total

    def supervised_loss(self, optical, sar, gt) -> tuple[torch.Tensor, LossBundle]:
        cfg = self.config
        out = self.model(optical, sar)
        b = LossBundle()
        ce_s = heatmap_ce(out.shallow, gt, cfg.logit_scale)
        ce = ce_s
        b.ce_shallow = ce_s.item()
        if out.deep is not None:
            ce_d = heatmap_ce(out.deep, deep_positions(gt, out.deep.shape, cfg.deep_label), cfg.logit_scale)
            ce = ce + ce_d
            b.ce_deep = ce_d.item()
        cmi = self._cmi(out, b)
        b.sup_total = cfg.ce_weight * (b.ce_deep + b.ce_shallow) + cfg.cmi_weight * b.cmi
        b.semi_total = b.sup_total + b.unsup_total
        return cfg.ce_weight * ce + cfg.cmi_weight * cmi, b

    def unsupervised_loss(self, optical, sar) -> tuple[torch.Tensor, LossBundle]:
        cfg = self.config
        out = self.model(optical, sar)
        b = LossBundle()
        deep = out.deep
        if deep is None:
            deep = Heatmap(torch.ones(*out.shallow.values.shape[:-2], 1, 1), "deep")
        target = make_pseudo_label(deep, out.shallow, cfg.pseudo_mode, cfg.logit_scale,
                                   self.model.config.upscale_mode)
        pce = pseudo_ce(out.shallow, target, cfg.logit_scale)
        b.pce = pce.item()
        cmi = self._cmi(out, b)
        b.unsup_total = cfg.pce_weight * b.pce + cfg.cmi_weight * b.cmi
        b.semi_total = b.sup_total + b.unsup_total
        return cfg.pce_weight * pce + cfg.cmi_weight * cmi, b

    # -- optimizer steps ----------------------------------------------------

    def _apply(self, total: torch.Tensor, bundle: LossBundle, batches) -> LossBundle:
        if not torch.isfinite(total):
            path = self._dump(batches)
            raise TrainingError(f"non-finite loss at step {self.step_count}: {bundle}; batch dumped to {path}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return bundle

    def _dump(self, batches) -> Path | None:
        if self.dump_dir is None:
            return None
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        path = self.dump_dir / f"nonfinite_step{self.step_count}.npz"
        arrays = {}
        for i, batch in enumerate(batches):
            opt, sar, _ = batch.tensors()
            arrays[f"optical_{i}"] = opt.numpy()
            arrays[f"sar_{i}"] = sar.numpy()
        np.savez(path, **arrays)
        return path

    def train_step_labeled(self, batch: Batch) -> LossBundle:
        opt, sar, gt = batch.tensors()
        if gt is None:
            raise ValueError("labeled step needs ground truth for every pair")
        total, bundle = self.supervised_loss(opt, sar, gt)
        return self._apply(total, bundle, [batch])

    def train_step_unlabeled(self, batch: Batch) -> LossBundle:
        opt, sar, _ = batch.tensors()
        total, bundle = self.unsupervised_loss(opt, sar)
        return self._apply(total, bundle, [batch])

    def train_step_joint(self, labeled: Batch | None, unlabeled: list[Batch]) -> LossBundle:
        """One optimizer step on L_sup(labeled) + L_unsup(every batch, labeled included)."""
        total = torch.zeros(())
        b = LossBundle()
        batches = ([labeled] if labeled is not None else []) + list(unlabeled)
        if labeled is not None:
            opt, sar, gt = labeled.tensors()
            t, sb = self.supervised_loss(opt, sar, gt)
            total = total + t
            b.ce_deep, b.ce_shallow, b.sup_total = sb.ce_deep, sb.ce_shallow, sb.sup_total
            _add_cmi(b, sb)
        for batch in batches:
            opt, sar, _ = batch.tensors()
            t, ub = self.unsupervised_loss(opt, sar)
            total = total + t
            b.pce += ub.pce
            b.unsup_total += ub.unsup_total
            _add_cmi(b, ub)
        b.semi_total = b.sup_total + b.unsup_total
        return self._apply(total, b, batches)

    # -- checkpoint state ---------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = model_tensors(self.model)
        params = list(self.model.parameters())
        for i, p in enumerate(params):
            st = self.optimizer.state.get(p)
            if not st:
                continue
            tensors[f"optim.{i}.exp_avg"] = st["exp_avg"]
            tensors[f"optim.{i}.exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"optim.{i}.step"] = torch.as_tensor(float(st["step"])).reshape(1)
        return tensors

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        load_model_tensors(self.model, tensors)
        for i, p in enumerate(self.model.parameters()):
            if f"optim.{i}.exp_avg" in tensors:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(tensors[f"optim.{i}.step"][0])),
                    "exp_avg": tensors[f"optim.{i}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"optim.{i}.exp_avg_sq"].clone(),
                }


def _add_cmi(dst: LossBundle, src: LossBundle) -> None:
    for name in ("cmi_sar", "cmi_opt", "cmi_deep", "cmi_shallow"):
        setattr(dst, name, getattr(dst, name) + getattr(src, name))


def _record(step: int, epoch: int, kind: str, b: LossBundle) -> dict:
    return {"step": step, "epoch": epoch, "kind": kind, "ce_d": b.ce_deep, "ce_s": b.ce_shallow,
            "pce": b.pce, "cmi": b.cmi, "sup_total": b.sup_total, "unsup_total": b.unsup_total,
            "semi_total": b.semi_total}


# ---------------------------------------------------------------------------
# fitting

def save_run_checkpoint(path, trainer: Trainer, train_config: TrainConfig, epoch: int) -> None:
    kv = {**trainer.model.config.to_kv(), **train_config.to_kv(), "epoch": str(epoch),
          "step": str(trainer.step_count)}
    save_checkpoint(path, trainer.state_tensors(), kv)


@contextlib.contextmanager
def flush_denormals():
    """Flush subnormal floats to zero; the soft-histogram exponentials otherwise
    produce them and slow CPU arithmetic severalfold."""
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def fit(labeled: list, unlabeled: list, config: TrainConfig | None = None,
        model_config: ModelConfig | None = None, val: list[ImagePair] | None = None,
        run_dir=None, resume=None) -> FitResult:
    """Train on interleaved labeled/unlabeled batches.

    ``labeled`` and ``unlabeled`` hold :class:`ImagePair` or
    :class:`AlignedPair` items. Each cycle is ``n_l`` supervised steps then
    ``n_u`` unsupervised steps (or one joint step with ``joint_step``); the
    cycle's summed loss is logged as ``semi_total``. ``val`` pairs (with
    ground truth) are scored after every epoch, comparing pseudo-label
    (fused) and shallow-only predictions.
    """
    with flush_denormals():
        return _fit(labeled, unlabeled, config, model_config, val, run_dir, resume)


def _fit(labeled, unlabeled, config, model_config, val, run_dir, resume) -> FitResult:
    config = config or TrainConfig()
    run_dir = Path(run_dir) if run_dir else None
    torch.manual_seed(config.seed)
    start_epoch = 0
    if resume is not None:
        tensors, kv = load_checkpoint(resume)
        model_config = ModelConfig.from_kv(kv)
        model = Matcher(model_config)
        trainer = Trainer(model, config, run_dir)
        trainer.load_state_tensors(tensors)
        trainer.step_count = int(kv.get("step", 0))
        start_epoch = int(kv.get("epoch", -1)) + 1
    else:
        model = build_matcher(model_config, config.seed)
        trainer = Trainer(model, config, run_dir)

    result = FitResult(model)
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(
            "\n".join(f"{k}={v}" for k, v in {**model.config.to_kv(), **config.to_kv()}.items()) + "\n")
        log_fh = open(run_dir / "train_log.jsonl", "a" if resume else "w")

    def emit(record):
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()

    if val and start_epoch == 0:
        record = {"epoch": 0, **validate(model, val, config.batch_size)}
        result.validation.append(record)
        emit({"validation": record})

    ckpt_path = run_dir / "checkpoint.ckpt" if run_dir else None
    try:
        for epoch in range(start_epoch, config.epochs):
            batches = batch_iterator(labeled, unlabeled, config.batch_size, config.labeled_ratio,
                                     config.seed, epoch, config.template_size, config.static_crops)
            model.train()
            if config.joint_step:
                for lab, unl in _group_cycles(batches):
                    b = trainer.train_step_joint(lab, unl)
                    rec = _record(trainer.step_count, epoch, "joint", b)
                    result.steps.append(rec)
                    emit(rec)
                    _close_cycle(result, emit, epoch, {"semi_total": b.semi_total, "steps": [trainer.step_count]})
                    _maybe_checkpoint(ckpt_path, trainer, config, epoch)
            else:
                # a cycle opens at the first labeled batch after unlabeled ones
                cycle, seen_unlabeled = None, False
                for batch in batches:
                    if cycle is None or (batch.labeled and seen_unlabeled):
                        _close_cycle(result, emit, epoch, cycle)
                        cycle, seen_unlabeled = {"semi_total": 0.0, "steps": []}, False
                    if batch.labeled:
                        b = trainer.train_step_labeled(batch)
                    else:
                        seen_unlabeled = True
                        b = trainer.train_step_unlabeled(batch)
                    cycle["semi_total"] += b.semi_total
                    cycle["steps"].append(trainer.step_count)
                    rec = _record(trainer.step_count, epoch, batch.kind, b)
                    result.steps.append(rec)
                    emit(rec)
                    _maybe_checkpoint(ckpt_path, trainer, config, epoch)
                _close_cycle(result, emit, epoch, cycle)
            if val:
                record = {"epoch": epoch + 1, **validate(model, val, config.batch_size)}
                result.validation.append(record)
                emit({"validation": record})
                log.info("epoch %d validation %s", epoch + 1, record)
            if ckpt_path is not None:
                save_run_checkpoint(ckpt_path, trainer, config, epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    result.checkpoint = ckpt_path
    model.eval()
    return result


def _close_cycle(result: FitResult, emit, epoch: int, cycle: dict | None) -> None:
    if cycle is None or not cycle["steps"]:
        return
    result.cycles.append(cycle)
    emit({"cycle": len(result.cycles) - 1, "epoch": epoch, "semi_total": cycle["semi_total"],
          "steps": cycle["steps"]})


def _maybe_checkpoint(path, trainer, config, epoch):
    if path is not None and config.checkpoint_every > 0 and trainer.step_count % config.checkpoint_every == 0:
        # mid-epoch snapshots resume from the start of this epoch
        save_run_checkpoint(path, trainer, config, epoch - 1)


def _group_cycles(batches):
    lab, unl = None, []
    for batch in batches:
        if batch.labeled:
            if lab is not None or unl:
                yield lab, unl
            lab, unl = batch, []
        else:
            unl.append(batch)
    if lab is not None or unl:
        yield lab, unl


# ---------------------------------------------------------------------------
# inference and validation

def load_matcher(path) -> Matcher:
    tensors, kv = load_checkpoint(path)
    model = Matcher(ModelConfig.from_kv(kv))
    load_model_tensors(model, tensors)
    model.eval()
    return model


def save_matcher(path, model: Matcher, extra: dict[str, str] | None = None) -> None:
    save_checkpoint(path, model_tensors(model), {**model.config.to_kv(), **(extra or {})})


def _argmax2d(values: torch.Tensor) -> list[tuple[int, int]]:
    W = values.shape[-1]
    idx = values.reshape(values.shape[0], -1).argmax(dim=-1).tolist()
    return [divmod(i, W) for i in idx]


def infer(pair: ImagePair, model: Matcher | str | Path, shallow_only: bool = False) -> MatchResult:
    """Predict the template offset from the softmax of the fused heatmap."""
    if not isinstance(model, Matcher):
        model = load_matcher(model)
    model.eval()
    opt = torch.from_numpy(np.asarray(pair.optical, dtype=np.float32))[None, None]
    sar = torch.from_numpy(np.asarray(pair.sar, dtype=np.float32))[None, None]
    H, W = opt.shape[-2:]
    h, w = sar.shape[-2:]
    if h > H or w > W:
        raise ValueError(f"template {h}x{w} larger than reference {H}x{W}")
    t0 = time.perf_counter()
    with torch.no_grad():
        out = model(opt, sar)
        if shallow_only or out.deep is None:
            fused = out.shallow.values
        else:
            fused = out.fused(model.config.upscale_mode).values
        probs = torch.softmax(fused.reshape(1, -1), dim=-1).reshape(fused.shape)
        (r, c), = _argmax2d(probs)
    elapsed = (time.perf_counter() - t0) * 1e3
    heatmaps = {"shallow": out.shallow.values[0], "fused": fused[0]}
    if out.deep is not None:
        heatmaps["deep"] = out.deep.values[0]
    return MatchResult((r, c), float(fused[0, r, c]), heatmaps, elapsed, out.feature_ms, out.correlation_ms)


def predict(model: Matcher, pairs: list[ImagePair], batch_size: int = 16,
            shallow_only: bool = False) -> tuple[list[tuple[int, int]], list[tuple[int, int]], list[float]]:
    """Batched inference; returns fused predictions, shallow predictions and ms per pair."""
    model.eval()
    fused_pred, shallow_pred, times = [], [], []
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            opt = torch.from_numpy(np.stack([p.optical for p in chunk])[:, None]).float()
            sar = torch.from_numpy(np.stack([p.sar for p in chunk])[:, None]).float()
            t0 = time.perf_counter()
            out = model(opt, sar)
            s = _argmax2d(out.shallow.values)
            f = s if (shallow_only or out.deep is None) else _argmax2d(out.fused(model.config.upscale_mode).values)
            dt = (time.perf_counter() - t0) * 1e3 / len(chunk)
            fused_pred += f
            shallow_pred += s
            times += [dt] * len(chunk)
    return fused_pred, shallow_pred, times


def validate(model: Matcher, pairs: list[ImagePair], batch_size: int = 16) -> dict:
    """Pseudo-label (fused) vs shallow-only accuracy on held-out pairs."""
    was_training = model.training
    fused, shallow, _ = predict(model, pairs, batch_size)
    model.train(was_training)
    gts = [p.gt_offset for p in pairs]
    d_f = distances(list(zip(fused, gts)))
    d_s = distances(list(zip(shallow, gts)))
    return {"pseudo_rmse": float(d_f.mean()), "shallow_rmse": float(d_s.mean()),
            "pseudo_fmr5": float((d_f > 5).mean()), "shallow_fmr5": float((d_s > 5).mean())}


def evaluate(model: Matcher, pairs: list[ImagePair], batch_size: int = 16, shallow_only: bool = False,
             metric_mode: str = "mean"):
    fused, shallow, times = predict(model, pairs, batch_size, shallow_only)
    preds = shallow if shallow_only else fused
    return compute_metrics(list(zip(preds, [p.gt_offset for p in pairs])), times, metric_mode)
