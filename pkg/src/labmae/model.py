"""Masked autoencoder over slot-structured lab sequences.

Each admission is a length-L sequence of scalar slots (value, time,
follow-up value, follow-up time per feature).  Observed slots embed through
a per-slot learned affine; artificially-hidden (MASKED) slots contribute a
learnable mask token; truly-MISSING slots contribute a fixed zero sentinel
and are excluded as attention keys, so their stored numeric content can
never influence any output.  Learned positional encodings are added once at
the input.  The encoder and decoder are pre-norm transformer stacks of equal
width; a per-slot affine head reconstructs every slot.

The reconstruction loss averages squared error over contributing cells
(observed and masked alike) and ignores missing cells entirely.

All forward/backward passes are hand-written over the kernels module and
operate on whole batches: arrays are (batch, L) for scalars and
(batch, L, d) for token activations.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from .data import (
    MASKED,
    MISSING,
    OBSERVED,
    Cohort,
    LabSchema,
    denormalize_feature,
    draw_mask_states,
    normalize_slot_matrix,
)
from .kernels import (
    DivergenceError,
    LrSchedule,
    derive_seed,
    lr_at,
    make_rng,
)

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "CheckpointError",
    "Checkpoint",
    "init_params",
    "encode_input",
    "build_attention_mask",
    "forward",
    "masked_loss",
    "loss_and_grads",
    "train",
    "impute",
    "ImputeResult",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"LMAE"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, truncated, or shape-incompatible."""


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int
    embed_dim: int = 64
    n_layers_enc: int = 8
    n_layers_dec: int = 8
    n_heads: int = 8
    ff_hidden_mult: int = 4
    mask_ratio: float = 0.25
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 500
    base_lr: float | None = None  # None: 1.5e-3 scaled by batch_size/256
    min_lr: float = 0.0
    warmup_epochs: int = 20
    weight_decay: float = 0.01
    checkpoint_every: int = 100
    validate_every: int = 30
    val_fraction: float = 0.1
    mask_times: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in [0, 1)")

    def effective_base_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return 1.5e-3 * self.batch_size / 256.0

    def schedule(self) -> LrSchedule:
        total = max(self.epochs, 1)
        warmup = min(self.warmup_epochs, total - 1)
        return LrSchedule(
            base_lr=self.effective_base_lr(),
            min_lr=min(self.min_lr, self.effective_base_lr()),
            warmup_epochs=warmup,
            total_epochs=total,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _block_param_shapes(prefix: str, d: int, h: int) -> list:
    return [
        (f"{prefix}.ln1.g", (d,)),
        (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.wq", (d, d)),
        (f"{prefix}.attn.bq", (d,)),
        (f"{prefix}.attn.wk", (d, d)),
        (f"{prefix}.attn.bk", (d,)),
        (f"{prefix}.attn.wv", (d, d)),
        (f"{prefix}.attn.bv", (d,)),
        (f"{prefix}.attn.wo", (d, d)),
        (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.g", (d,)),
        (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.w1", (d, h)),
        (f"{prefix}.mlp.b1", (h,)),
        (f"{prefix}.mlp.w2", (h, d)),
        (f"{prefix}.mlp.b2", (d,)),
    ]


def param_shapes(config: ModelConfig) -> list:
    """Declared parameter (name, shape) pairs in serialization order."""
    L, d = config.seq_len, config.embed_dim
    hidden = config.ff_hidden_mult * d
    shapes = [
        ("embed_w", (L, d)),
        ("embed_b", (L, d)),
        ("pos", (L, d)),
        ("mask_token", (d,)),
    ]
    for i in range(config.n_layers_enc):
        shapes.extend(_block_param_shapes(f"enc{i}", d, hidden))
    for i in range(config.n_layers_dec):
        shapes.extend(_block_param_shapes(f"dec{i}", d, hidden))
    shapes.extend(
        [
            ("final_ln.g", (d,)),
            ("final_ln.b", (d,)),
            ("head_w", (L, d)),
            ("head_b", (L,)),
        ]
    )
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Seeded initialization: N(0, 0.02) weights, zero biases, unit LN gains."""
    rng = make_rng(derive_seed(seed, "init"))
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith((".g",)):
            params[name] = np.ones(shape)
        elif name.endswith((".b", "_b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or name == "head_b":
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(scale=0.02, size=shape)
    return params


def _block_names(config: ModelConfig) -> list:
    return [f"enc{i}" for i in range(config.n_layers_enc)] + [
        f"dec{i}" for i in range(config.n_layers_dec)
    ]


# ---------------------------------------------------------------------------
# input encoding and attention mask
# ---------------------------------------------------------------------------

def encode_input(values: np.ndarray, states: np.ndarray, params: dict) -> np.ndarray:
    """Token matrix z0 = per-state embedding + positional encodings.

    ``values`` and ``states`` are (batch, L); the result is (batch, L, d).
    Observed slots use their slot affine, masked slots the learnable mask
    token, missing slots the fixed zero sentinel.  Stored values at
    non-observed slots are never read.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    states = np.atleast_2d(np.asarray(states))
    if values.shape != states.shape or values.shape[1] != params["pos"].shape[0]:
        raise K.ShapeError(
            f"values {values.shape} / states {states.shape} do not match layout "
            f"of length {params['pos'].shape[0]}"
        )
    with np.errstate(invalid="ignore"):
        value_term = values[:, :, None] * params["embed_w"][None, :, :] + params["embed_b"][None, :, :]
    observed = (states == OBSERVED)[:, :, None]
    masked = (states == MASKED)[:, :, None]
    token = np.where(observed, value_term, np.where(masked, params["mask_token"], 0.0))
    return token + params["pos"][None, :, :]


def _encode_backward(d_z0, values, states, grads):
    observed = states == OBSERVED
    masked = states == MASKED
    vals = np.where(observed, values, 0.0)
    grads["embed_w"] += np.einsum("bl,bld->ld", vals, np.where(observed[:, :, None], d_z0, 0.0))
    grads["embed_b"] += np.where(observed[:, :, None], d_z0, 0.0).sum(axis=0)
    grads["mask_token"] += d_z0[masked].sum(axis=0) if masked.any() else 0.0
    grads["pos"] += d_z0.sum(axis=0)


def build_attention_mask(states: np.ndarray) -> np.ndarray:
    """Key-visibility mask, (batch, L, L) boolean.

    Column j is False for every query when slot j is MISSING: absent cells
    must not influence attention.  MASKED slots stay attendable (they carry
    the mask token and must be reconstructable).  The diagonal is always
    True so no row is left without an admissible key.
    """
    states = np.atleast_2d(np.asarray(states))
    n, L = states.shape
    visible = states != MISSING  # (n, L) keys
    mask = np.broadcast_to(visible[:, None, :], (n, L, L)).copy()
    idx = np.arange(L)
    mask[:, idx, idx] = True
    return mask


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

def _split_heads(x, n_heads):
    b, L, d = x.shape
    return x.reshape(b, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, L, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, L, h * dk)


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _block_forward(x, params, prefix, attn_mask, n_heads, dropout_rate=0.0, rng=None):
    """Pre-norm block: x + MHA(LN(x)); then x + MLP(LN(x))."""
    p = params
    h1, ln1_cache = K.layer_norm_forward(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q, q_cache = K.linear_forward(h1, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"])
    k, k_cache = K.linear_forward(h1, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"])
    v, v_cache = K.linear_forward(h1, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"])
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    mask_h = attn_mask[:, None, :, :] if attn_mask is not None else None
    attn_out, attn_cache = K.attention_forward(qh, kh, vh, mask=mask_h)
    merged = _merge_heads(attn_out)
    proj, proj_cache = K.linear_forward(merged, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
    drop1 = None
    if dropout_rate > 0.0 and rng is not None:
        drop1 = _dropout_mask(rng, proj.shape, dropout_rate)
        proj = proj * drop1
    x = x + proj

    h2, ln2_cache = K.layer_norm_forward(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m1, m1_cache = K.linear_forward(h2, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])
    act, act_cache = K.gelu_forward(m1)
    m2, m2_cache = K.linear_forward(act, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    drop2 = None
    if dropout_rate > 0.0 and rng is not None:
        drop2 = _dropout_mask(rng, m2.shape, dropout_rate)
        m2 = m2 * drop2
    x = x + m2
    cache = (
        ln1_cache, q_cache, k_cache, v_cache, attn_cache, proj_cache, drop1,
        ln2_cache, m1_cache, act_cache, m2_cache, drop2, n_heads,
    )
    return x, cache


def _block_backward(d_x, cache, grads, prefix):
    (
        ln1_cache, q_cache, k_cache, v_cache, attn_cache, proj_cache, drop1,
        ln2_cache, m1_cache, act_cache, m2_cache, drop2, n_heads,
    ) = cache

    # MLP sublayer
    d_m2 = d_x * drop2 if drop2 is not None else d_x
    d_act, dw2, db2 = K.linear_backward(d_m2, m2_cache)
    grads[f"{prefix}.mlp.w2"] += dw2
    grads[f"{prefix}.mlp.b2"] += db2
    d_m1 = K.gelu_backward(d_act, act_cache)
    d_h2, dw1, db1 = K.linear_backward(d_m1, m1_cache)
    grads[f"{prefix}.mlp.w1"] += dw1
    grads[f"{prefix}.mlp.b1"] += db1
    d_x2, dg2, db_ln2 = K.layer_norm_backward(d_h2, ln2_cache)
    grads[f"{prefix}.ln2.g"] += dg2
    grads[f"{prefix}.ln2.b"] += db_ln2
    d_x = d_x + d_x2  # residual

    # attention sublayer
    d_proj = d_x * drop1 if drop1 is not None else d_x
    d_merged, dwo, dbo = K.linear_backward(d_proj, proj_cache)
    grads[f"{prefix}.attn.wo"] += dwo
    grads[f"{prefix}.attn.bo"] += dbo
    b, L, d = d_merged.shape
    dk = d // n_heads
    d_attn_out = d_merged.reshape(b, L, n_heads, dk).transpose(0, 2, 1, 3)
    d_qh, d_kh, d_vh = K.attention_backward(d_attn_out, attn_cache)
    d_q, d_k, d_v = (_merge_heads(t) for t in (d_qh, d_kh, d_vh))
    d_h1_q, dwq, dbq = K.linear_backward(d_q, q_cache)
    d_h1_k, dwk, dbk = K.linear_backward(d_k, k_cache)
    d_h1_v, dwv, dbv = K.linear_backward(d_v, v_cache)
    grads[f"{prefix}.attn.wq"] += dwq
    grads[f"{prefix}.attn.bq"] += dbq
    grads[f"{prefix}.attn.wk"] += dwk
    grads[f"{prefix}.attn.bk"] += dbk
    grads[f"{prefix}.attn.wv"] += dwv
    grads[f"{prefix}.attn.bv"] += dbv
    d_x1, dg1, db_ln1 = K.layer_norm_backward(d_h1_q + d_h1_k + d_h1_v, ln1_cache)
    grads[f"{prefix}.ln1.g"] += dg1
    grads[f"{prefix}.ln1.b"] += db_ln1
    return d_x + d_x1  # residual


# ---------------------------------------------------------------------------
# full model forward/backward
# ---------------------------------------------------------------------------

def forward(
    values: np.ndarray,
    states: np.ndarray,
    params: dict,
    config: ModelConfig,
    use_attention_mask: bool = True,
    return_cache: bool = False,
    dropout_rng=None,
):
    """Predict a scalar for every slot; returns (batch, L) reconstructions.

    ``use_attention_mask=False`` runs the plain unmasked transformer; with no
    MISSING cells the masked forward is bit-identical to it.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    states = np.atleast_2d(np.asarray(states))
    z = encode_input(values, states, params)
    attn_mask = build_attention_mask(states) if use_attention_mask else None
    rate = config.dropout_rate if dropout_rng is not None else 0.0
    caches = []
    for name in _block_names(config):
        z, cache = _block_forward(
            z, params, name, attn_mask, config.n_heads, dropout_rate=rate, rng=dropout_rng
        )
        caches.append(cache)
    h, ln_f_cache = K.layer_norm_forward(z, params["final_ln.g"], params["final_ln.b"])
    preds = np.einsum("bld,ld->bl", h, params["head_w"]) + params["head_b"][None, :]
    if not return_cache:
        return preds
    return preds, (caches, ln_f_cache, h, values, states)


def backward(d_preds: np.ndarray, cache, params: dict, config: ModelConfig) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss/d preds."""
    caches, ln_f_cache, h, values, states = cache
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    grads["head_w"] += np.einsum("bl,bld->ld", d_preds, h)
    grads["head_b"] += d_preds.sum(axis=0)
    d_h = d_preds[:, :, None] * params["head_w"][None, :, :]
    d_z, dg, db = K.layer_norm_backward(d_h, ln_f_cache)
    grads["final_ln.g"] += dg
    grads["final_ln.b"] += db
    for name, blk_cache in zip(reversed(_block_names(config)), reversed(caches)):
        d_z = _block_backward(d_z, blk_cache, grads, name)
    _encode_backward(d_z, values, states, grads)
    return grads


# ---------------------------------------------------------------------------
# masked reconstruction loss
# ---------------------------------------------------------------------------

def masked_loss(pred: np.ndarray, target: np.ndarray, states: np.ndarray) -> float:
    """Mean squared error over contributing cells, per row, averaged over rows.

    Contributing cells are those not MISSING (observed and artificially
    masked alike); missing cells are excluded exactly, so their stored
    target content cannot change the result.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    states = np.atleast_2d(np.asarray(states))
    if pred.shape != target.shape or pred.shape != states.shape:
        raise K.ShapeError(f"shape mismatch: {pred.shape}, {target.shape}, {states.shape}")
    contrib = states != MISSING
    counts = contrib.sum(axis=1)
    if np.any(counts == 0):
        raise ZeroDivisionError("row with every cell missing has no loss denominator")
    sq = np.where(contrib, (pred - target) ** 2, 0.0)
    return float(np.mean(sq.sum(axis=1) / counts))


def _masked_loss_grad(pred, target, states):
    contrib = states != MISSING
    counts = contrib.sum(axis=1)
    n_rows = pred.shape[0]
    d = np.where(contrib, 2.0 * (pred - target), 0.0)
    return d / counts[:, None] / n_rows


def loss_and_grads(values, targets, states, params, config, dropout_rng=None):
    """Masked-loss forward plus full parameter gradients for one batch."""
    preds, cache = forward(
        values, states, params, config, return_cache=True, dropout_rng=dropout_rng
    )
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    states2 = np.atleast_2d(np.asarray(states))
    loss = masked_loss(preds, targets, states2)
    d_preds = _masked_loss_grad(preds, targets, states2)
    grads = backward(d_preds, cache, params, config)
    return loss, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _prepare_arrays(cohort: Cohort):
    slot_values = cohort.slot_values()
    norm = normalize_slot_matrix(slot_values, cohort.schema)
    states = cohort.slot_states()
    # stored content at missing cells is irrelevant; zero-fill for clean math
    norm = np.where(np.isnan(norm), 0.0, norm)
    return norm, states


def _masked_cell_metrics(preds, targets, train_states, base_states):
    """(loss-style MSE, RMSE, R^2) over artificially masked cells."""
    cells = (train_states == MASKED) & (base_states == OBSERVED)
    if not cells.any():
        return math.nan, math.nan, math.nan
    err = preds[cells] - targets[cells]
    mse = float(np.mean(err**2))
    y = targets[cells]
    denom = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err**2)) / denom if denom > 0 else math.nan
    return mse, math.sqrt(mse), r2


def train(
    cohort: Cohort,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_dir=None,
    resume_from: "Checkpoint | None" = None,
):
    """Self-supervised training loop; returns (params, log).

    The cohort must already be row-filtered; its schema must carry fitted
    normalizer stats.  Per epoch: a seeded shuffle, fresh mask draws at the
    model's mask ratio, and AdamW steps at the scheduled rate.  A held-out
    slice of the rows is scored every ``validate_every`` epochs on both the
    masked loss and masked-cell RMSE/R^2.  Checkpoints capture parameters,
    optimizer state, and the epoch counter, so training resumes on the same
    schedule.  Same seeds give bit-identical parameters.
    """
    if model_cfg.seq_len != cohort.schema.seq_len:
        raise K.ShapeError(
            f"model seq_len {model_cfg.seq_len} != schema layout {cohort.schema.seq_len}"
        )
    norm, base_states = _prepare_arrays(cohort)
    n = norm.shape[0]
    schedule = train_cfg.schedule()

    split_rng = make_rng(derive_seed(train_cfg.seed, "valsplit"))
    perm = split_rng.permutation(n)
    n_val = int(round(train_cfg.val_fraction * n))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    if fit_idx.size == 0:
        raise ValueError("no training rows left after validation split")

    if resume_from is not None:
        params = {k: v.copy() for k, v in resume_from.params.items()}
        opt = resume_from.optim_state
        start_epoch = resume_from.epoch
    else:
        params = init_params(model_cfg, seed=train_cfg.seed)
        opt = K.init_optim_state(params, weight_decay=train_cfg.weight_decay)
        start_epoch = 0

    val_states = None
    if val_idx.size:
        val_states = draw_mask_states(
            base_states[val_idx],
            cohort.schema,
            model_cfg.mask_ratio,
            seed=derive_seed(train_cfg.seed, "valmask"),
            mask_times=train_cfg.mask_times,
        )

    log = []
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at(schedule, epoch)
        order = make_rng(derive_seed(train_cfg.seed, "shuffle", epoch)).permutation(fit_idx)
        epoch_states = draw_mask_states(
            base_states[order],
            cohort.schema,
            model_cfg.mask_ratio,
            seed=derive_seed(train_cfg.seed, "mask", epoch),
            mask_times=train_cfg.mask_times,
        )
        dropout_rng = (
            make_rng(derive_seed(train_cfg.seed, "dropout", epoch))
            if model_cfg.dropout_rate > 0.0
            else None
        )
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, order.size, train_cfg.batch_size):
            sel = slice(lo, lo + train_cfg.batch_size)
            rows = order[sel]
            loss, grads = loss_and_grads(
                norm[rows], norm[rows], epoch_states[sel], params, model_cfg,
                dropout_rng=dropout_rng,
            )
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            params, opt = K.adamw_step(params, grads, opt, lr)
            epoch_loss += loss
            n_batches += 1
        record = {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / max(n_batches, 1)}

        if val_idx.size and (epoch + 1) % train_cfg.validate_every == 0:
            preds = forward(norm[val_idx], val_states, params, model_cfg)
            record["val_loss"] = masked_loss(preds, norm[val_idx], val_states)
            _, record["val_rmse"], record["val_r2"] = _masked_cell_metrics(
                preds, norm[val_idx], val_states, base_states[val_idx]
            )
        log.append(record)

        if checkpoint_dir is not None and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch + 1:05d}.lmae",
                params, model_cfg, opt, epoch + 1, train_cfg=train_cfg,
            )
    return params, log


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class ImputeResult:
    feature_id: str
    row_indices: np.ndarray  # indices into the cohort's row list
    y_pred: np.ndarray       # denormalized predictions
    y_true: np.ndarray       # raw observed values (or ground truth)


def impute(
    cohort: Cohort,
    params: dict,
    model_cfg: ModelConfig,
    feature_id: str,
    include_missing: bool = False,
    batch_size: int = 256,
) -> ImputeResult:
    """Predict one feature across rows by masking its value cell.

    Per row the target feature's value slot is forced to MASKED (everything
    else untouched, no random masking), and the model reconstructs it from
    the remaining context.  By default only rows where the target is
    observed are scored; ``include_missing`` additionally predicts
    truly-missing cells and scores them against the synthetic ground truth.
    """
    schema = cohort.schema
    fi = schema.feature_index(feature_id)
    slot = schema.value_slot(fi)
    norm, base_states = _prepare_arrays(cohort)
    observed = base_states[:, slot] == OBSERVED
    if include_missing:
        if cohort.truth is None:
            raise ValueError("include_missing requires a cohort with ground truth")
        rows = np.arange(len(cohort.rows))
    else:
        rows = np.where(observed)[0]

    states = base_states[rows].copy()
    states[:, slot] = MASKED
    values = norm[rows]
    preds_norm = np.empty(rows.size)
    for lo in range(0, rows.size, batch_size):
        sel = slice(lo, lo + batch_size)
        preds_norm[sel] = forward(values[sel], states[sel], params, model_cfg)[:, slot]
    y_pred = np.asarray(denormalize_feature(preds_norm, schema, feature_id), dtype=np.float64)

    if include_missing:
        y_true = cohort.truth[rows, fi]
    else:
        y_true = np.array([cohort.rows[i].values[fi] for i in rows])
    return ImputeResult(feature_id=feature_id, row_indices=rows, y_pred=y_pred, y_true=y_true)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    optim_state: K.OptimState
    epoch: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig | None = None


def save_checkpoint(path, params, model_cfg, optim_state, epoch, train_cfg=None) -> None:
    """Versioned binary container; 64-bit lossless including optimizer state.

    Layout: magic, format version, JSON header (configs, epoch, optimizer
    scalars, array manifest), then raw little-endian float64 arrays in
    declaration order (parameters, then first and second moments).
    """
    shapes = param_shapes(model_cfg)
    names = [n for n, _ in shapes]
    if set(names) != set(params):
        raise CheckpointError("parameter names do not match the model configuration")
    header = {
        "format": CHECKPOINT_VERSION,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "epoch": int(epoch),
        "optim": {
            "step": optim_state.step,
            "beta1": optim_state.beta1,
            "beta2": optim_state.beta2,
            "eps": optim_state.eps,
            "weight_decay": optim_state.weight_decay,
        },
        "arrays": [[n, list(s)] for n, s in shapes],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for name, shape in shapes:
        arr = params[name]
        if arr.shape != shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, declared {shape}")
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for moments in (optim_state.m, optim_state.v):
        for name, _ in shapes:
            buf.write(np.ascontiguousarray(moments[name], dtype="<f8").tobytes())
    data = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    model_cfg = ModelConfig.from_dict(header["model_config"])
    train_cfg = (
        TrainConfig.from_dict(header["train_config"]) if header["train_config"] else None
    )
    shapes = [(n, tuple(s)) for n, s in header["arrays"]]
    declared = param_shapes(model_cfg)
    if shapes != declared:
        raise CheckpointError(f"{path}: array manifest does not match model configuration")
    total = sum(int(np.prod(s)) for _, s in shapes)
    expected = 16 + header_len + 3 * total * 8
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    offset = 16 + header_len

    def read_group():
        nonlocal offset
        out = {}
        for name, shape in shapes:
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            out[name] = arr.astype(np.float64)  # decouple from the raw buffer
            offset += count * 8
        return out

    params = read_group()
    m = read_group()
    v = read_group()
    opt = header["optim"]
    optim_state = K.OptimState(
        step=opt["step"], beta1=opt["beta1"], beta2=opt["beta2"],
        eps=opt["eps"], weight_decay=opt["weight_decay"], m=m, v=v,
    )
    return Checkpoint(
        params=params, optim_state=optim_state, epoch=header["epoch"],
        model_cfg=model_cfg, train_cfg=train_cfg,
    )
