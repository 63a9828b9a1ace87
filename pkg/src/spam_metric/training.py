"""Loss stack, multi-positive batch sampling, optimization and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import datagen, dsp
from .domain import Manifest, StyleKey, UtteranceRecord
from .encoders import PromptTokenizer
from .model import ModelConfig, SpamModel, SpeechInput, speech_input

logger = logging.getLogger(__name__)

AUX_NAMES = ("pitch", "speed", "energy")


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_p: float = 0.1
    lambda_v: float = 0.1
    lambda_e: float = 0.1
    temperature: float = 0.07
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.lambda_c <= 0:
            raise ValueError("lambda_c must be positive")
        if min(self.lambda_p, self.lambda_v, self.lambda_e) < 0:
            raise ValueError("auxiliary weights must be nonnegative")
        if self.temperature <= 0 or self.huber_delta <= 0:
            raise ValueError("temperature and huber_delta must be positive")


def key_labels(keys: Sequence[StyleKey]) -> torch.Tensor:
    """Integer labels such that equal style keys share a label."""
    index: dict[StyleKey, int] = {}
    return torch.tensor([index.setdefault(k, len(index)) for k in keys], dtype=torch.long)


def positive_mask(keys: Sequence[StyleKey] | torch.Tensor) -> torch.Tensor:
    labels = keys if isinstance(keys, torch.Tensor) else key_labels(keys)
    return labels[:, None] == labels[None, :]


def supcon_directional(
    anchors: torch.Tensor,
    candidates: torch.Tensor,
    keys: Sequence[StyleKey] | torch.Tensor,
    temperature: float = 0.07,
) -> torch.Tensor:
    """Supervised contrastive loss with anchors from one modality and
    candidates from the other.

    For every anchor, the mean over its positives of the negative log
    softmax probability, where the softmax runs over all candidates.
    Averaged over anchors.
    """
    n = anchors.shape[0]
    if candidates.shape[0] != n:
        raise ValueError("anchors and candidates must have equal length")
    pos = positive_mask(keys)
    if pos.shape != (n, n):
        raise ValueError("need one style key per batch element")
    n_pos = pos.sum(1)
    if torch.any(n_pos == 0):
        raise ValueError("an anchor has no positive candidate")
    logits = anchors @ candidates.T / temperature
    log_prob = F.log_softmax(logits, dim=1)
    per_anchor = -(log_prob * pos.to(log_prob.dtype)).sum(1) / n_pos.to(log_prob.dtype)
    return per_anchor.mean()


def contrastive_loss(
    a: torch.Tensor, b: torch.Tensor, keys: Sequence[StyleKey] | torch.Tensor, temperature: float = 0.07
) -> torch.Tensor:
    labels = keys if isinstance(keys, torch.Tensor) else key_labels(keys)
    return 0.5 * (supcon_directional(a, b, labels, temperature) + supcon_directional(b, a, labels, temperature))


def huber(pred, target, delta: float = 1.0):
    """Quadratic within ``delta`` of the target, linear beyond it."""
    r = abs(pred - target)
    if isinstance(r, torch.Tensor):
        return torch.where(r <= delta, 0.5 * r**2, delta * (r - 0.5 * delta))
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


@dataclass
class Batch:
    """Column order for ``aux_targets``/``aux_predictions``: pitch, speed,
    energy. A NaN pitch target marks an all-unvoiced utterance."""

    speech_embeddings: torch.Tensor
    prompt_embeddings: torch.Tensor
    style_keys: Sequence[StyleKey]
    aux_targets: torch.Tensor
    aux_predictions: torch.Tensor

    def __post_init__(self):
        n = self.speech_embeddings.shape[0]
        if n < 2:
            raise ValueError("a batch needs at least 2 items")
        for t in (self.prompt_embeddings, self.aux_targets, self.aux_predictions):
            if t.shape[0] != n:
                raise ValueError("batch fields must have equal length")
        if len(self.style_keys) != n:
            raise ValueError("batch fields must have equal length")
        tol = 1e-6 if self.speech_embeddings.dtype == torch.float64 else 1e-5
        for v in (self.speech_embeddings, self.prompt_embeddings):
            norms = torch.linalg.vector_norm(v.detach().double(), dim=-1)
            if torch.any((norms - 1).abs() > tol):
                raise ValueError("batch embeddings must be unit-norm")


def aux_losses(batch: Batch, delta: float) -> torch.Tensor:
    """Batch-mean Huber loss per auxiliary column (pitch, speed, energy)."""
    pred, target = batch.aux_predictions, batch.aux_targets
    valid = ~torch.isnan(target)
    safe_target = torch.where(valid, target, pred.detach())
    per_item = huber(pred, safe_target, delta) * valid.to(pred.dtype)
    counts = valid.sum(0)
    return per_item.sum(0) / counts.clamp_min(1).to(pred.dtype)


def total_loss(batch: Batch, weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    l_con = contrastive_loss(
        batch.speech_embeddings, batch.prompt_embeddings, batch.style_keys, weights.temperature
    )
    l_p, l_v, l_e = aux_losses(batch, weights.huber_delta)
    total = weights.lambda_c * l_con + weights.lambda_p * l_p + weights.lambda_v * l_v + weights.lambda_e * l_e
    parts = {"L": total.item(), "L_con": l_con.item(), "L_p": l_p.item(), "L_v": l_v.item(), "L_e": l_e.item()}
    return total, parts


# ---------------------------------------------------------------------------
# batch sampling


def sample_batch(
    records: Manifest | Sequence[UtteranceRecord],
    batch_size: int,
    seed: int | np.random.SeedSequence,
) -> list[UtteranceRecord]:
    """Draw ``batch_size / 2`` keys (frequency-weighted, with replacement)
    and two records per key, so every record has an in-batch positive.

    A key with a single record contributes that record twice, the second
    copy with a freshly rendered prompt.
    """
    if batch_size < 4 or batch_size % 2:
        raise ValueError("batch_size must be an even number >= 4")
    records = list(records)
    if not records:
        raise ValueError("cannot sample from an empty record list")
    rng = np.random.default_rng(seed)
    by_key: dict[StyleKey, list[UtteranceRecord]] = {}
    for rec in records:
        by_key.setdefault(rec.style_key, []).append(rec)
    batch: list[UtteranceRecord] = []
    for _ in range(batch_size // 2):
        key = records[rng.integers(len(records))].style_key
        group = by_key[key]
        if len(group) >= 2:
            i, j = rng.choice(len(group), size=2, replace=False)
            batch.extend([group[i], group[j]])
        else:
            rec = group[0]
            prompt = rec.prompt
            while prompt == rec.prompt:
                prompt = datagen.render_prompt(key, rng)
            batch.extend([rec, dataclasses.replace(rec, prompt=prompt)])
    return batch


# ---------------------------------------------------------------------------
# features and target scaling


@dataclass(frozen=True)
class ItemFeatures:
    speech: SpeechInput
    # raw targets: mean voiced log-F0 (NaN if unvoiced), rate (pps), mean log-RMS
    targets: np.ndarray


def item_features(manifest: Manifest, record: UtteranceRecord) -> ItemFeatures:
    waveform = manifest.load_audio(record)
    feats = dsp.extract_features(waveform, record.transcript)
    pitch = feats.mean_voiced_log_f0
    targets = np.array(
        [np.nan if pitch is None else pitch, feats.speaking_rate_pps, feats.mean_energy]
    )
    return ItemFeatures(speech_input(waveform, record.transcript), targets)


@dataclass(frozen=True)
class AuxScaler:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @classmethod
    def fit(cls, targets: np.ndarray) -> "AuxScaler":
        mean = np.nanmean(targets, axis=0)
        std = np.nanstd(targets, axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        return cls(tuple(map(float, mean)), tuple(map(float, std)))

    def transform(self, targets: np.ndarray) -> np.ndarray:
        return (targets - np.asarray(self.mean)) / np.asarray(self.std)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * np.asarray(self.std) + np.asarray(self.mean)


def model_batch(
    model: SpamModel,
    records: Sequence[UtteranceRecord],
    features: dict[str, ItemFeatures],
    scaler: AuxScaler,
) -> Batch:
    speech = [features[r.item_id].speech for r in records]
    out = model.forward_speech(model.collate_speech(speech))
    b = model.encode_prompts([r.prompt for r in records])
    targets = scaler.transform(np.stack([features[r.item_id].targets for r in records]))
    preds = torch.stack([out.aux.p_hat, out.aux.v_hat, out.aux.e_hat], dim=1)
    return Batch(
        speech_embeddings=out.a,
        prompt_embeddings=b,
        style_keys=[r.style_key for r in records],
        aux_targets=torch.as_tensor(targets, dtype=out.a.dtype),
        aux_predictions=preds,
    )


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SPAMCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    parameters: dict[str, np.ndarray]
    vocabulary: list[str]
    rng_state: dict | None = None
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Layout (little-endian)::

        magic "SPAMCKPT" | u32 version | u32 header_len | header (UTF-8 JSON:
        config, vocabulary, rng_state) | u32 n_params | per parameter:
        u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data | u32 crc32
    """
    header = json.dumps(
        {"config": ckpt.config, "vocabulary": ckpt.vocabulary, "rng_state": ckpt.rng_state},
        sort_keys=True,
        ensure_ascii=False,
    ).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.format_version, len(header)), header]
    parts.append(struct.pack("<I", len(ckpt.parameters)))
    for name, value in ckpt.parameters.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 12 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version = struct.unpack_from("<I", data, len(CHECKPOINT_MAGIC))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch)")
    try:
        pos = len(CHECKPOINT_MAGIC) + 4
        (header_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        header = json.loads(body[pos : pos + header_len].decode("utf-8"))
        pos += header_len
        (n_params,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(body):
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")
    return Checkpoint(header["config"], params, header["vocabulary"], header.get("rng_state"), version)


def checkpoint_from_model(model: SpamModel, config: dict) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
    return Checkpoint(config=copy.deepcopy(config), parameters=params, vocabulary=list(model.tokenizer.itos))


def model_from_checkpoint(ckpt: Checkpoint) -> SpamModel:
    tokenizer = PromptTokenizer(ckpt.vocabulary)
    if tokenizer.itos != list(ckpt.vocabulary):
        raise CheckpointError("vocabulary is not in canonical order")
    model = SpamModel(ModelConfig.from_dict(ckpt.config["model"]), tokenizer)
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.parameters.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def aux_scaler_from_config(config: dict) -> AuxScaler:
    s = config["aux_scaler"]
    return AuxScaler(tuple(s["mean"]), tuple(s["std"]))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    max_steps: int = 20000
    warmup_steps: int = 100
    eval_every: int = 100
    patience: int = 10
    clip_norm: float = 1.0
    seed: int = 0
    deterministic: bool = True
    augment_prompts: bool = True
    dev_batches: int = 8

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SpamModel
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    best_step: int = 0


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def compute_features(manifest: Manifest, records: Sequence[UtteranceRecord]) -> dict[str, ItemFeatures]:
    return {r.item_id: item_features(manifest, r) for r in records}


def build_tokenizer(records: Sequence[UtteranceRecord]) -> PromptTokenizer:
    return PromptTokenizer.build([r.prompt for r in records], datagen.prompt_vocabulary_words())


@torch.no_grad()
def evaluate_contrastive(
    model: SpamModel,
    batches: Sequence[Sequence[UtteranceRecord]],
    features: dict[str, ItemFeatures],
    scaler: AuxScaler,
    temperature: float,
) -> float:
    was_training = model.training
    model.eval()
    losses = []
    for records in batches:
        batch = model_batch(model, records, features, scaler)
        losses.append(
            contrastive_loss(batch.speech_embeddings, batch.prompt_embeddings, batch.style_keys, temperature).item()
        )
    model.train(was_training)
    return float(np.mean(losses))


def train(
    manifest: Manifest,
    config: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
    weights: LossWeights | None = None,
    features: dict[str, ItemFeatures] | None = None,
    on_metrics: Callable[[dict], None] | None = None,
) -> TrainResult:
    config = config or TrainConfig()
    model_config = model_config or ModelConfig()
    weights = weights or LossWeights()
    train_records = manifest.split("train")
    dev_records = manifest.split("dev")
    if not train_records or not dev_records:
        raise ValueError("training needs non-empty train and dev splits")
    if config.deterministic:
        set_deterministic(config.seed)
    else:
        torch.manual_seed(config.seed)

    if features is None:
        features = compute_features(manifest, train_records + dev_records)
    scaler = AuxScaler.fit(np.stack([features[r.item_id].targets for r in train_records]))
    tokenizer = build_tokenizer(train_records)
    model = SpamModel(model_config, tokenizer)
    frozen_before = [p.detach().clone() for p in model.frozen_parameters()]

    run_config = {
        "model": model_config.to_dict(),
        "loss": asdict(weights),
        "train": asdict(config),
        "aux_scaler": {"mean": list(scaler.mean), "std": list(scaler.std)},
    }

    params = [p for _, p in model.trainable_named_parameters()]
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    warmup = max(config.warmup_steps, 1)
    schedule = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / warmup))

    dev_batches = [
        sample_batch(dev_records, config.batch_size, datagen.derive_seed(config.seed, "dev", i))
        for i in range(config.dev_batches)
    ]
    metrics: list[dict] = []

    def emit(record: dict) -> None:
        metrics.append(record)
        if on_metrics is not None:
            on_metrics(record)

    best_loss = evaluate_contrastive(model, dev_batches, features, scaler, weights.temperature)
    best_state = copy.deepcopy(model.state_dict())
    best_step, stale = 0, 0
    emit({"step": 0, "dev_L_con": best_loss})

    model.train()
    for step in range(1, config.max_steps + 1):
        rng = np.random.default_rng(datagen.derive_seed(config.seed, "train", step))
        records = sample_batch(train_records, config.batch_size, rng)
        if config.augment_prompts:
            records = [dataclasses.replace(r, prompt=datagen.render_prompt(r.style_key, rng)) for r in records]
        batch = model_batch(model, records, features, scaler)
        loss, parts = total_loss(batch, weights)
        if not math.isfinite(parts["L"]):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
        optimizer.step()
        schedule.step()
        emit({"step": step, **parts})

        if step % config.eval_every == 0 or step == config.max_steps:
            dev_loss = evaluate_contrastive(model, dev_batches, features, scaler, weights.temperature)
            emit({"step": step, "dev_L_con": dev_loss})
            logger.info("step %d loss %.4f dev %.4f", step, parts["L"], dev_loss)
            if not math.isfinite(dev_loss):
                raise TrainingDiverged(f"non-finite dev loss at step {step}")
            if dev_loss < best_loss:
                best_loss, best_step, stale = dev_loss, step, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info("early stop at step %d (best %d)", step, best_step)
                    break

    model.load_state_dict(best_state)
    model.eval()
    for before, after in zip(frozen_before, model.frozen_parameters()):
        if not torch.equal(before, after):
            raise RuntimeError("frozen speaker projection changed during training")
    run_config["best_step"] = best_step
    run_config["best_dev_L_con"] = best_loss
    return TrainResult(model, checkpoint_from_model(model, run_config), metrics, best_step)


def write_metrics(metrics: Sequence[dict], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(m) + "\n" for m in metrics), encoding="utf-8")
