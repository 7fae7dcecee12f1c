"""Relation-driven collaborative training with per-encoder gradient routing.

Each step computes three relation matrices (general encoder on auxiliary and
target inputs, target encoder on target inputs), the segmentation loss on
labeled target rows and the two consistency losses, then updates

* the general encoder with the gradient of the general consistency loss only,
* the target encoder with the gradient of segmentation + target consistency,
* the decoder with the gradient of the segmentation loss only.

Each parameter group has its own SGD optimizer so momentum never mixes
gradient sources.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ConfigError, DomainTag, PreprocessConfig, Sample, fit_to_patch, preprocess, sample_batch_pair
from .losses import LossBundle, RampSchedule, ramp_lambda, rc_general_loss, rc_target_loss, seg_loss
from .metrics import MetricReport, MissingSpacingError, case_metrics
from .network import PRESETS, ArchitectureSpec, DualEncoderNet, build_network
from .relation import compute_relation, save_relation

log = logging.getLogger(__name__)

MODES = {
    # mode: (general consistency, target consistency, semi-supervised)
    "baseline": (False, False, False),
    "rcg": (True, False, False),
    "rct": (False, True, False),
    "full": (True, True, False),
    "semi": (True, True, True),
}
GROUPS = ("general_encoder", "target_encoder", "decoder")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite {term} loss at step {step}")
        self.step = step
        self.term = term


@dataclass
class TrainConfig:
    max_steps: int = 200
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    lr_schedule: str = "poly"  # or "constant"
    poly_power: float = 0.9
    mode: str = "full"
    lambda_g: float = 0.1
    lambda_t: float = 0.1
    ramp_gaussian: bool = True
    rc_target_clamp: Optional[float] = None
    per_sample_relation: bool = False
    labeled_fraction: float = 0.5
    arch: str = "tiny"
    patch: Optional[list[int]] = None
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 0
    early_stop_patience: Optional[int] = None
    checkpoint_every: int = 0
    relation_every: int = 0
    window: Optional[list[float]] = field(default_factory=lambda: [-1000.0, 400.0])
    norm_mode: str = "minmax"
    tau: float = 3.0
    overlap: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigError("lr_schedule must be 'poly' or 'constant'")
        if self.arch not in PRESETS:
            raise ConfigError(f"arch must be one of {sorted(PRESETS)}")
        if not 0 <= self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def use_rc_general(self) -> bool:
        return MODES[self.mode][0]

    @property
    def use_rc_target(self) -> bool:
        return MODES[self.mode][1]

    @property
    def semi_supervised(self) -> bool:
        return MODES[self.mode][2]

    def ramps(self) -> tuple[RampSchedule, RampSchedule]:
        # the last step (max_steps - 1) reaches the base value
        t_max = max(self.max_steps - 1, 1)
        return (RampSchedule(self.lambda_g, t_max, self.ramp_gaussian),
                RampSchedule(self.lambda_t, t_max, self.ramp_gaussian))

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(window=tuple(self.window) if self.window else None, mode=self.norm_mode)

    def architecture(self) -> ArchitectureSpec:
        if self.arch == "tiny" and self.patch:
            return PRESETS["tiny"](patch=tuple(self.patch))
        spec = PRESETS[self.arch]()
        if self.patch:
            spec.patch = tuple(self.patch)
            spec.check_patch()
        return spec


@dataclass
class TrainState:
    net: DualEncoderNet
    optimizers: dict[str, torch.optim.Optimizer]
    config: TrainConfig
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig, spec: Optional[ArchitectureSpec] = None) -> TrainState:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    spec = spec or cfg.architecture()
    net = build_network(spec, seed=cfg.seed)
    opts = {
        name: torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov and cfg.momentum > 0)
        for name, params in net.param_groups().items()
    }
    return TrainState(net=net, optimizers=opts, config=cfg, rng=np.random.default_rng(cfg.seed))


def current_lr(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * (1.0 - step / cfg.max_steps) ** cfg.poly_power


@dataclass
class StepTerms:
    """Loss tensors and relation matrices of one forward pass."""

    seg: Optional[torch.Tensor]
    rc_general: torch.Tensor
    rc_target: torch.Tensor
    relations: dict[str, torch.Tensor]


def compute_terms(net: DualEncoderNet, pair, lambda_g: float, lambda_t: float,
                  per_sample_relation: bool = False, rc_target_clamp=None) -> StepTerms:
    preds, f_t, f_g = net.forward_target(pair.target_images)
    f_g_aux = net.forward_general(pair.auxiliary_images)
    r_g_aux = compute_relation(f_g_aux, per_sample_relation)
    r_g_tgt = compute_relation(f_g, per_sample_relation)
    r_t_tgt = compute_relation(f_t, per_sample_relation)
    seg = None
    if pair.n_labeled:
        idx = pair.labeled_index
        seg = seg_loss([p[idx] for p in preds], pair.target_labels)
    return StepTerms(
        seg=seg,
        rc_general=rc_general_loss(r_g_aux, r_g_tgt, lambda_g),
        rc_target=rc_target_loss(r_g_tgt, r_t_tgt, lambda_t, clamp=rc_target_clamp),
        relations={"rg_aux": r_g_aux, "rg_tgt": r_g_tgt, "rt_tgt": r_t_tgt},
    )


def _grads(loss: Optional[torch.Tensor], params: list[torch.nn.Parameter]):
    if loss is None:
        return None
    gs = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


def routed_gradients(net: DualEncoderNet, terms: StepTerms, lambda_g: float, lambda_t: float) -> dict:
    """Per-group gradients under the update rules; ``None`` marks a group with no active loss."""
    groups = net.param_groups()
    t_loss = None
    if terms.seg is not None:
        t_loss = terms.seg
    if lambda_t > 0:
        t_loss = terms.rc_target if t_loss is None else t_loss + terms.rc_target
    return {
        "general_encoder": _grads(terms.rc_general if lambda_g > 0 else None, groups["general_encoder"]),
        "target_encoder": _grads(t_loss, groups["target_encoder"]),
        "decoder": _grads(terms.seg, groups["decoder"]),
    }


def _apply(state: TrainState, grads: dict) -> None:
    lr = current_lr(state.config, state.step)
    groups = state.net.param_groups()
    for name in GROUPS:
        if grads[name] is None:
            continue
        for p, g in zip(groups[name], grads[name]):
            p.grad = g.detach()
        opt = state.optimizers[name]
        for pg in opt.param_groups:
            pg["lr"] = lr
        opt.step()
        opt.zero_grad(set_to_none=True)


def _lambdas(state: TrainState) -> tuple[float, float]:
    cfg = state.config
    ramp_g, ramp_t = state.config.ramps()
    # a single-step run sits at the end of the ramp
    t = state.step if cfg.max_steps > 1 else ramp_g.t_max
    lam_g = ramp_lambda(t, ramp_g) if cfg.use_rc_general else 0.0
    lam_t = ramp_lambda(t, ramp_t) if cfg.use_rc_target else 0.0
    return lam_g, lam_t


def _step(state: TrainState, pair, allow_unlabeled: bool):
    cfg = state.config
    if state.step >= cfg.max_steps:
        raise RuntimeError(f"step budget exhausted ({cfg.max_steps})")
    if pair.n_labeled == 0 and not allow_unlabeled:
        raise ValueError("batch has no labeled target samples and semi-supervised mode is off")
    lam_g, lam_t = _lambdas(state)
    state.net.train()
    terms = compute_terms(state.net, pair, lam_g, lam_t, cfg.per_sample_relation, cfg.rc_target_clamp)
    values = {
        "seg": terms.seg.detach() if terms.seg is not None else torch.zeros(()),
        "rc_general": terms.rc_general.detach(),
        "rc_target": terms.rc_target.detach(),
    }
    for name, v in values.items():
        if not torch.isfinite(v):
            raise NonFiniteLossError(state.step, name)
    _apply(state, routed_gradients(state.net, terms, lam_g, lam_t))
    bundle = LossBundle(float(values["seg"]), float(values["rc_general"]), float(values["rc_target"]), lam_g, lam_t)
    state.history.append(bundle.as_record(state.step))
    state.step += 1
    return bundle, terms


def train_step(state: TrainState, pair) -> LossBundle:
    """One supervised update; every target row must be labeled unless in semi mode."""
    return _step(state, pair, allow_unlabeled=state.config.semi_supervised)[0]


def semi_step(state: TrainState, pair) -> LossBundle:
    """Update where unlabeled target rows feed only the relation losses."""
    if not state.config.semi_supervised:
        raise ConfigError("semi_step requires mode='semi'")
    return _step(state, pair, allow_unlabeled=True)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``checkpoint.pt`` holding the three parameter groups under separate keys."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    net = state.net
    blob = {
        "general_encoder": net.general_encoder.state_dict(),
        "target_encoder": net.target_encoder.state_dict(),
        "decoder": net.decoder.state_dict(),
        "arch": net.spec.to_json(),
        "step": state.step,
        "config": state.config.to_dict(),
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "rng": state.rng.bit_generator.state,
        "history": state.history,
    }
    target = path / "checkpoint.pt"
    torch.save(blob, target)
    return target


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.pt"
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(blob["config"])
    state = init_state(cfg, ArchitectureSpec.from_json(blob["arch"]))
    for name in GROUPS:
        getattr(state.net, name).load_state_dict(blob[name])
        state.optimizers[name].load_state_dict(blob["optimizers"][name])
    state.rng.bit_generator.state = blob["rng"]
    state.step = blob["step"]
    state.history = list(blob["history"])
    return state


# ---------------------------------------------------------------------------
# inference and evaluation


def _tile_starts(n: int, p: int, overlap: float) -> list[int]:
    if n <= p:
        return [0]
    step = max(1, int(p * (1.0 - overlap)))
    count = math.ceil((n - p) / step) + 1
    return sorted({int(round(x)) for x in np.linspace(0, n - p, count)})


@torch.no_grad()
def sliding_window_predict(net: DualEncoderNet, image: np.ndarray, patch: Sequence[int],
                           overlap: float = 0.5) -> np.ndarray:
    """Full-resolution foreground probability for one preprocessed image.

    Images smaller than the patch are centre-padded; overlapping tiles are
    averaged.
    """
    net.eval()
    patch = tuple(patch)
    padded, off = fit_to_patch(image, tuple(max(n, p) for n, p in zip(image.shape, patch)), None)
    pad_before = [(max(p - n, 0)) // 2 for n, p in zip(image.shape, patch)]
    acc = np.zeros(padded.shape, dtype=np.float64)
    cnt = np.zeros(padded.shape, dtype=np.float64)
    starts = [_tile_starts(n, p, overlap) for n, p in zip(padded.shape, patch)]
    for corner in np.array(np.meshgrid(*starts, indexing="ij")).reshape(len(patch), -1).T:
        window = tuple(slice(int(c), int(c) + p) for c, p in zip(corner, patch))
        x = torch.from_numpy(np.array(padded[window], dtype=np.float32))[None, None]
        prob = net.forward_target(x)[0][0][0, 0].numpy()
        acc[window] += prob
        cnt[window] += 1
    prob = acc / cnt
    crop = tuple(slice(b, b + n) for b, n in zip(pad_before, image.shape))
    return prob[crop]


def evaluate(net: DualEncoderNet, samples: Sequence[Sample], pre: Optional[PreprocessConfig] = None,
             patch=None, tau: float = 3.0, with_nsd: bool = True, overlap: float = 0.5) -> MetricReport:
    """Sliding-window inference, 0.5 threshold, per-case DSC/NSD/Sen/Spec/MAE."""
    patch = patch or net.spec.patch
    report = MetricReport()
    for s in samples:
        if s.label is None:
            raise ValueError(f"{s.id}: evaluation needs labeled samples")
        if with_nsd and s.spacing is None:
            raise MissingSpacingError(f"{s.id}: NSD requested but the sample has no spacing")
        img = preprocess(s, pre).image if pre is not None else s.image
        prob = sliding_window_predict(net, img, patch, overlap)
        report.cases.append(case_metrics(s.id, s.label, prob, s.spacing, tau, with_nsd))
    return report


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    state: TrainState
    report: Optional[MetricReport]
    eval_curve: list[tuple[int, float]]


def _write_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _save_relations(run_dir: Path, step: int, relations: dict) -> None:
    for key, mat in relations.items():
        save_relation(run_dir / "relations" / f"step_{step}" / key, mat, stage="bottleneck", step=step, pair=key)


def train(cfg: TrainConfig, target: Sequence[Sample], auxiliary: Sequence[Sample],
          eval_set: Sequence[Sample] = (), run_dir=None, state: Optional[TrainState] = None) -> TrainResult:
    """Run ``cfg.max_steps`` paired-batch steps and evaluate on ``eval_set``.

    ``target`` may mix labeled and unlabeled target samples; unlabeled ones
    are used only in semi mode. With ``run_dir`` the loop writes
    ``config.json``, ``losses.jsonl``, ``checkpoints/step_N/``,
    ``relations/step_N/`` and ``eval/``.
    """
    pre = cfg.preprocess_config()
    target = [preprocess(s, pre) for s in target]
    if not cfg.semi_supervised:
        target = [s for s in target if s.is_labeled]
    if not any(s.is_labeled for s in target):
        raise ValueError("training needs at least one labeled target sample")
    auxiliary = [preprocess(s, pre) for s in auxiliary]
    if not auxiliary:
        raise ValueError("training needs at least one auxiliary sample")
    for s in auxiliary:
        if s.domain_tag is not DomainTag.AUXILIARY:
            raise ValueError(f"{s.id} is not tagged auxiliary")

    state = state or init_state(cfg)
    patch = state.net.spec.patch
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        (out / "losses.jsonl").write_text("")

    best, stale, curve = -1.0, 0, []
    while state.step < cfg.max_steps:
        pair = sample_batch_pair(target, auxiliary, cfg.batch_size, state.rng, patch,
                                 labeled_fraction=cfg.labeled_fraction if cfg.semi_supervised else 1.0)
        t = state.step
        bundle, terms = _step(state, pair, allow_unlabeled=cfg.semi_supervised)
        last = state.step == cfg.max_steps
        if out is not None:
            _write_jsonl(out / "losses.jsonl", bundle.as_record(t))
            if cfg.relation_every and (t % cfg.relation_every == 0 or last):
                _save_relations(out, t, terms.relations)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and not last:
                save_checkpoint(state, out / "checkpoints" / f"step_{state.step}")
        if cfg.eval_every and eval_set and state.step % cfg.eval_every == 0 and not last:
            score = evaluate(state.net, eval_set, pre, patch, cfg.tau, with_nsd=False, overlap=cfg.overlap).mean("dsc")
            curve.append((state.step, score))
            log.info("step %d eval dsc %.4f", state.step, score)
            if score > best:
                best, stale = score, 0
            else:
                stale += 1
                if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                    log.info("early stop at step %d", state.step)
                    break

    report = None
    if eval_set:
        report = evaluate(state.net, eval_set, pre, patch, cfg.tau,
                          with_nsd=all(s.spacing is not None for s in eval_set), overlap=cfg.overlap)
    if out is not None:
        save_checkpoint(state, out / "checkpoints" / f"step_{state.step}")
        if report is not None:
            report.write(out / "eval")
    return TrainResult(state=state, report=report, eval_curve=curve)
