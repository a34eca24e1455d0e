"""Deterministic desk-scale training loop.

Adam with bias correction, cosine-annealed learning rate, joint horizontal
flips for augmentation, periodic UDPC checkpoints, and the ablation harness
that retrains architecture variants on identical data and seeds.

Reproducibility is the ruling constraint: every shuffle and flip decision
comes from an RNG keyed on (seed, epoch, batch), so a rerun with the same
config produces byte-identical logs and checkpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NonFiniteError, ParameterError
from .haze import ScenePair, load_dataset
from .network import (ModelWeights, NetConfig, build_variant, config_to_text,
                      count_parameters, forward)
from .objectives import LossWeights, psnr, ssim, total_loss
from .tensor import Tensor, no_grad

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_psnr", "val_ssim")
ABLATION_COLUMNS = ("variant", "params", "psnr", "ssim")
ABLATION_SUITES = ("table4", "table5_depth_source", "heads")
FINAL_CHECKPOINT = "ckpt_final.udpc"

_OPT_PREFIX = "opt."


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 4
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    flip_prob: float = 0.5
    checkpoint_every: int = 0          # epochs; 0 keeps only the final one
    loss_weights: LossWeights = field(default_factory=LossWeights)
    val_fraction: float = 0.1
    val_every: int = 1                 # validate every k-th epoch + the last
    clip_norm: float = 1.0             # global-norm cap; 0 disables

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.lr_final <= self.lr_init):
            raise ConfigError(
                f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if self.adam_eps <= 0.0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        for name in ("flip_prob", "val_fraction"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.checkpoint_every < 0:
            raise ConfigError(
                f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.val_every < 1:
            raise ConfigError(f"val_every must be >= 1, got {self.val_every}")
        if self.clip_norm < 0.0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


@dataclass
class TrainResult:
    weights: ModelWeights
    state: OptimizerState
    log_path: Path
    checkpoint_path: Path
    epochs_run: int
    train_loss: float
    val_psnr: float
    val_ssim: float


def init_optimizer(params: dict) -> OptimizerState:
    return OptimizerState(m={k: np.zeros_like(t.data) for k, t in params.items()},
                          v={k: np.zeros_like(t.data) for k, t in params.items()},
                          step=0)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptimizerState:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    """Half-cosine decay from lr_init at step 0 to lr_final at total_steps."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    if total_steps <= 0 or step >= total_steps:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (
        1.0 + math.cos(math.pi * step / total_steps))


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    norm = math.sqrt(sq)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def augment_flip(pair: ScenePair, rng, flip_prob: float = 0.5) -> ScenePair:
    """Mirror hazy, clear, and depth jointly about the vertical axis with
    probability flip_prob.  Always draws exactly once from rng."""
    if rng.random() >= flip_prob:
        return pair
    flip = lambda a: np.ascontiguousarray(a[..., ::-1])
    return ScenePair(clear=flip(pair.clear), depth=flip(pair.depth),
                     hazy=flip(pair.hazy), params=pair.params, seed=pair.seed)


def split_dataset(pairs: list, val_fraction: float) -> tuple:
    """Hold out the last round(val_fraction * n) pairs by index.  A split
    that would leave either side empty falls back to validating on the
    training set itself."""
    n = len(pairs)
    val_n = min(int(round(val_fraction * n)), n - 1)
    if val_n <= 0:
        return list(pairs), list(pairs)
    return list(pairs[:n - val_n]), list(pairs[n - val_n:])


def _batch_tensors(batch: list) -> tuple:
    hazy = Tensor(np.stack([p.hazy for p in batch]))
    depth = np.stack([p.depth for p in batch])
    clear = Tensor(np.stack([p.clear for p in batch]))
    return hazy, depth, clear


def _val_metrics(pairs: list, net_cfg: NetConfig, weights: ModelWeights) -> tuple:
    scores_p, scores_s = [], []
    with no_grad():
        for p in pairs:
            out = forward(Tensor(p.hazy[None]), p.depth[None], net_cfg, weights)
            pred = out.restored[0].data[0]
            scores_p.append(psnr(pred, p.clear))
            scores_s.append(ssim(pred, p.clear))
    return float(np.mean(scores_p)), float(np.mean(scores_s))


def evaluate_pairs(pairs: list, net_cfg: NetConfig, weights: ModelWeights,
                   loss_weights: LossWeights | None = None) -> list:
    """Per-pair metric rows (index, psnr, ssim, loss_spatial, loss_freq)."""
    lw = loss_weights or LossWeights()
    rows = []
    with no_grad():
        for i, p in enumerate(pairs):
            out = forward(Tensor(p.hazy[None]), p.depth[None], net_cfg, weights)
            pred = out.restored[0].data[0]
            rep = total_loss(out, Tensor(p.clear[None]), lw)
            rows.append((i, psnr(pred, p.clear), ssim(pred, p.clear),
                         rep.spatial, rep.frequency))
    return rows


def _optimizer_extras(state: OptimizerState, epochs_done: int) -> dict:
    extras = {f"{_OPT_PREFIX}m.{k}": v for k, v in state.m.items()}
    extras.update({f"{_OPT_PREFIX}v.{k}": v for k, v in state.v.items()})
    extras[f"{_OPT_PREFIX}step"] = np.array([float(state.step)])
    extras[f"{_OPT_PREFIX}epoch"] = np.array([float(epochs_done)])
    return extras


def _restore_optimizer(extra: dict, params: dict) -> tuple:
    state = init_optimizer(params)
    for name in params:
        for store, key in ((state.m, f"{_OPT_PREFIX}m.{name}"),
                           (state.v, f"{_OPT_PREFIX}v.{name}")):
            if key not in extra:
                raise IOError(f"checkpoint misses optimizer entry {key!r}")
            store[name] = np.asarray(extra[key], dtype=np.float64).reshape(
                params[name].shape)
    state.step = int(extra[f"{_OPT_PREFIX}step"][0])
    epochs_done = int(extra[f"{_OPT_PREFIX}epoch"][0])
    return state, epochs_done


def train(cfg: TrainConfig, net_cfg: NetConfig, data_dir, out_dir,
          resume=None) -> TrainResult:
    """Run the full loop; writes train_log.csv and UDPC checkpoints under
    out_dir and returns the final weights with their metrics."""
    pairs = load_dataset(data_dir)
    if not pairs:
        raise IOError(f"empty dataset in {data_dir}")
    train_pairs, val_pairs = split_dataset(pairs, cfg.val_fraction)

    if resume is not None:
        weights, extra = load_checkpoint(resume)
        if config_to_text(weights.cfg) != config_to_text(net_cfg):
            raise ConfigError("checkpoint architecture differs from net_cfg")
        params = dict(weights.named())
        state, start_epoch = _restore_optimizer(extra, params)
    else:
        weights = build_variant(net_cfg)
        params = dict(weights.named())
        state = init_optimizer(params)
        start_epoch = 0

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    steps_per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    mode = "a" if resume is not None and log_path.exists() else "w"
    log = open(log_path, mode, newline="")
    wr = csv.writer(log)
    if mode == "w":
        wr.writerow(LOG_COLUMNS)
        log.flush()

    last_loss = math.nan
    val_p = val_s = math.nan
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng(
                [cfg.seed, epoch, 101]).permutation(len(train_pairs))
            epoch_lr = cosine_lr(epoch * steps_per_epoch, total_steps,
                                 cfg.lr_init, cfg.lr_final)
            losses = []
            for b in range(steps_per_epoch):
                chunk = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                rng = np.random.default_rng([cfg.seed, epoch, b, 202])
                batch = [augment_flip(train_pairs[i], rng, cfg.flip_prob)
                         for i in chunk]
                hazy, depth, clear = _batch_tensors(batch)
                report = total_loss(forward(hazy, depth, net_cfg, weights),
                                    clear, cfg.loss_weights)
                if not math.isfinite(report.total):
                    raise NonFiniteError(
                        f"non-finite loss at epoch {epoch + 1} step {b + 1}")
                report.graph.backward()
                grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                         for k, t in params.items()}
                clip_gradients(grads, cfg.clip_norm)
                lr = cosine_lr(epoch * steps_per_epoch + b, total_steps,
                               cfg.lr_init, cfg.lr_final)
                adam_step(params, grads, state, lr, cfg.adam_beta1,
                          cfg.adam_beta2, cfg.adam_eps)
                for t in params.values():
                    t.zero_grad()
                losses.append(report.total)
            last_loss = float(np.mean(losses))
            if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
                val_p, val_s = _val_metrics(val_pairs, net_cfg, weights)
                wr.writerow([epoch + 1, repr(epoch_lr), repr(last_loss),
                             repr(val_p), repr(val_s)])
            else:
                wr.writerow([epoch + 1, repr(epoch_lr), repr(last_loss), "", ""])
            log.flush()
            if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_epoch_{epoch + 1:04d}.udpc", weights,
                                _optimizer_extras(state, epoch + 1))
    finally:
        log.close()

    final = out / FINAL_CHECKPOINT
    save_checkpoint(final, weights, _optimizer_extras(state, cfg.epochs))
    if math.isnan(val_p):
        val_p, val_s = _val_metrics(val_pairs, net_cfg, weights)
    return TrainResult(weights=weights, state=state, log_path=log_path,
                       checkpoint_path=final, epochs_run=cfg.epochs - start_epoch,
                       train_loss=last_loss, val_psnr=val_p, val_ssim=val_s)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def _table4_variants(base: NetConfig) -> list:
    """Head / fusion-stage / attention-kind breakdown, single-head blocks.

    Rows: no depth at all; plain concat stem; gated stem; then one fusion
    placement and attention flavor at a time; finally the dual-query model.
    """
    one = replace(base, heads=1)
    off = dict(use_dpfm=False, dpfm_in_decoder=False)

    def enc(kind, side):
        return dict(use_dgam=True, use_dpfm=True, dpfm_in_decoder=False,
                    attention_kind=kind, query_side=side)

    def dec(kind, side):
        return dict(use_dgam=True, use_dpfm=True, dpfm_in_decoder=True,
                    attention_kind=kind, query_side=side)

    rows = [
        ("a_baseline", dict(use_dgam=False, **off)),
        ("b_concat", dict(use_dgam=True, dgam_gate=False, **off)),
        ("c_dgam", dict(use_dgam=True, **off)),
        ("d_enc_cca_depth", enc("CCA", "depth")),
        ("e_enc_cca_rgb", enc("CCA", "rgb")),
        ("f_enc_sca_depth", enc("SCA", "depth")),
        ("g_enc_sca_rgb", enc("SCA", "rgb")),
        ("h_dec_cca_depth", dec("CCA", "depth")),
        ("i_dec_cca_rgb", dec("CCA", "rgb")),
        ("j_dec_sca_depth", dec("SCA", "depth")),
        ("k_dec_sca_rgb", dec("SCA", "rgb")),
        ("l_enc_sca_dual", enc("SCA", "dual")),
    ]
    return [(name, replace(one, **delta)) for name, delta in rows]


def _table5_variants(base: NetConfig) -> list:
    full = dict(use_dgam=True, use_dpfm=True)
    return [
        ("baseline", replace(base, use_dgam=False, use_dpfm=False,
                             dpfm_in_decoder=False)),
        ("gray", replace(base, depth_source="constant_gray", **full)),
        ("depth", replace(base, depth_source="file", **full)),
    ]


def _heads_variants(base: NetConfig) -> list:
    return [(f"heads{h}", replace(base, heads=h)) for h in (1, 2, 4)]


def ablation_variants(suite: str, base: NetConfig) -> list:
    if suite == "table4":
        return _table4_variants(base)
    if suite == "table5_depth_source":
        return _table5_variants(base)
    if suite == "heads":
        return _heads_variants(base)
    raise ConfigError(f"unknown ablation suite {suite!r}; "
                      f"expected one of {ABLATION_SUITES}")


def run_ablation(suite: str, cfg: TrainConfig, base_net: NetConfig, data_dir,
                 out_dir, out_csv=None) -> list:
    """Train every variant of a suite on identical data and seed; returns
    and writes rows (variant, params, psnr, ssim)."""
    variants = ablation_variants(suite, base_net)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, net_cfg in variants:
        res = train(cfg, net_cfg, data_dir, out / name)
        rows.append((name, count_parameters(res.weights), res.val_psnr,
                     res.val_ssim))
    if suite == "table5_depth_source":
        sizes = {name: n for name, n, _, _ in rows}
        if sizes["gray"] != sizes["depth"]:
            raise ConfigError(
                f"depth-source variants must match in size, got "
                f"gray={sizes['gray']} depth={sizes['depth']}")
    path = Path(out_csv) if out_csv is not None else out / f"{suite}.csv"
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(ABLATION_COLUMNS)
        for name, n, p, s in rows:
            wr.writerow([name, n, repr(p), repr(s)])
    return rows
