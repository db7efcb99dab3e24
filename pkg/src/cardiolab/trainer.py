"""Training loop, record-level inference and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import fusion
from .layers import sigmoid
from .cohort import LoadedDataset
from .errors import EmptyFold, ManifestMismatch, NonFiniteLoss, RecordTooShort
from .evaluator import macro_auroc
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)

N_TEST_SEGMENTS = 4


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive, weight_decay non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: fusion.ModelConfig
    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_ids: list[str]
    manifest_hash: str
    meta: dict

    def digest(self) -> str:
        return params_digest(self.params)


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        a = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
# A .npz archive: one array per parameter (training precision) under its dotted name, the
# feature scaler under "__feature_mean__"/"__feature_std__", and a UTF-8 JSON
# document under "__meta__" (uint8 array) holding the config echo, label order,
# manifest hash and the parameter name -> shape table.

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "format": "cardiolab-checkpoint/1",
        "model_config": ckpt.model_config.to_dict(),
        "label_ids": list(ckpt.label_ids),
        "manifest_hash": ckpt.manifest_hash,
        "params": {k: list(np.shape(v)) for k, v in sorted(ckpt.params.items())},
        "params_sha256": ckpt.digest(),
        **ckpt.meta,
    }
    arrays = {k: np.asarray(v) for k, v in ckpt.params.items()}
    arrays["__feature_mean__"] = ckpt.feature_mean
    arrays["__feature_std__"] = ckpt.feature_std
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, manifest_hash: str | None = None) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        params = {k: z[k].copy() for k in meta["params"]}
        mean, std = z["__feature_mean__"].copy(), z["__feature_std__"].copy()
    for k, shape in meta["params"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint parameter {k} has shape {params[k].shape}, header says {shape}")
    if manifest_hash is not None and meta["manifest_hash"] != manifest_hash:
        raise ManifestMismatch(
            f"checkpoint was trained against manifest {meta['manifest_hash'][:12]}, dataset is {manifest_hash[:12]}"
        )
    extra = {k: v for k, v in meta.items() if k not in ("format", "model_config", "label_ids", "manifest_hash", "params", "params_sha256")}
    return Checkpoint(
        params=params,
        model_config=fusion.ModelConfig.from_dict(meta["model_config"]),
        feature_mean=mean,
        feature_std=std,
        label_ids=meta["label_ids"],
        manifest_hash=meta["manifest_hash"],
        meta=extra,
    )


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _standardize(features, mean, std):
    return (np.asarray(features, dtype=np.float64) - mean) / std


def inference_segments(waveform: np.ndarray, segment_len: int) -> np.ndarray:
    """The first 4 * segment_len samples cut into four consecutive segments: (4, 12, segment_len)."""
    need = N_TEST_SEGMENTS * segment_len
    if waveform.shape[-1] < need:
        raise RecordTooShort(f"record has {waveform.shape[-1]} samples, need {need}")
    w = np.asarray(waveform[:, :need], dtype=np.float64)
    return w.reshape(w.shape[0], N_TEST_SEGMENTS, segment_len).transpose(1, 0, 2)


def predict_records(ckpt: Checkpoint, waveforms, features, batch_records: int = 64) -> np.ndarray:
    """Probabilities (n, K): sigmoid per segment, averaged over the four test segments."""
    cfg = ckpt.model_config
    L = cfg.encoder.segment_len
    feats = _standardize(features, ckpt.feature_mean, ckpt.feature_std)
    out = np.empty((len(feats), cfg.fusion.n_labels))
    for s in range(0, len(feats), batch_records):
        segs = np.concatenate([inference_segments(w, L) for w in waveforms[s : s + batch_records]])
        f = np.repeat(feats[s : s + batch_records], N_TEST_SEGMENTS, axis=0)
        logits, _ = fusion.forward_logits(ckpt.params, segs, f, cfg, train=False)
        probs = sigmoid(logits)
        out[s : s + batch_records] = probs.reshape(-1, N_TEST_SEGMENTS, probs.shape[-1]).mean(axis=1)
    return out


def predict_record(waveform: np.ndarray, features: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    return predict_records(ckpt, waveform[None], np.asarray(features)[None])[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    best_score: float


def random_crops(waveforms, idx, segment_len, rng) -> np.ndarray:
    total = waveforms.shape[-1]
    starts = rng.integers(0, total - segment_len + 1, size=len(idx))
    return np.stack([np.asarray(waveforms[i, :, s : s + segment_len], dtype=np.float64) for i, s in zip(idx, starts)])


def train(
    data: LoadedDataset,
    model_cfg: fusion.ModelConfig,
    cfg: TrainerConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    train_idx = data.fold_indices("train")
    valid_idx = data.fold_indices("valid")
    if len(train_idx) == 0:
        raise EmptyFold("train fold is empty")
    if len(valid_idx) == 0:
        raise EmptyFold("validation fold is empty")
    K = data.targets.shape[1]
    if K == 0:
        raise EmptyFold("no retained labels to train on")
    if model_cfg.fusion.n_labels != K:
        raise ValueError(f"model has {model_cfg.fusion.n_labels} outputs, dataset has {K} labels")
    if data.waveforms.shape[-1] < N_TEST_SEGMENTS * model_cfg.encoder.segment_len:
        raise RecordTooShort("dataset waveforms shorter than four segments")

    feats = np.asarray(data.features, dtype=np.float64)
    mean = feats[train_idx].mean(axis=0)
    std = feats[train_idx].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    feats_std = _standardize(feats, mean, std)

    rng = np.random.default_rng(cfg.seed)
    params = fusion.init_model(model_cfg, cfg.seed, np.dtype(cfg.precision))
    state = AdamWState()
    label_ids = [l["label_id"] for l in data.labels]
    seg_len = model_cfg.encoder.segment_len

    best: tuple[float, int, dict] | None = None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        total, observed = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x = random_crops(data.waveforms, idx, seg_len, rng)
            logits, cache = fusion.forward_logits(params, x, feats_std[idx], model_cfg, train=True, rng=rng)
            loss, dlogits, m = fusion.masked_bce(logits, data.targets[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: loss is {loss}")
            if m == 0:
                continue  # nothing observed in this batch: no gradient, no decay
            grads = fusion.model_backward(params, cache, dlogits, model_cfg)
            adamw_step(params, grads, state, cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)
            total += loss * m
            observed += m
        ckpt = Checkpoint(params, model_cfg, mean, std, label_ids, data.manifest_hash, {})
        probs = predict_records(ckpt, data.waveforms[valid_idx], feats[valid_idx])
        score = macro_auroc(probs, data.targets[valid_idx], label_ids)
        entry = {
            "epoch": epoch,
            "train_loss": total / observed if observed else 0.0,
            "valid_macro_auroc": score,
            "wall_s": round(time.perf_counter() - t0, 3),
        }
        history.append(entry)
        log.info("epoch %d loss %.4f valid macro AUROC %.4f", epoch, entry["train_loss"], score)
        if on_epoch:
            on_epoch(entry)
        if best is None or score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in params.items()})

    score, epoch, best_params = best
    ckpt = Checkpoint(
        best_params,
        model_cfg,
        mean,
        std,
        label_ids,
        data.manifest_hash,
        {"best_epoch": epoch, "valid_macro_auroc": score, "trainer_config": cfg.to_dict()},
    )
    return TrainResult(ckpt, history, epoch, score)


def log_record(entry: dict, deterministic: bool = True) -> str:
    """One JSON line for the training log; wall time is dropped in deterministic mode."""
    e = dict(entry)
    if deterministic:
        e["wall_s"] = None
    return json.dumps(e, sort_keys=True)
