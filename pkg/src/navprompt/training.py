"""Training drivers for both stages, checkpointing, and retrieval evaluation.

Stage 1 fits the prompt bank and classification head with cross-entropy on a
frozen backbone.  Stage 2 keeps the backbone (and by default the prompts)
frozen and aligns prompt text features with cross-modal sub-path features
under the weighted contrastive objective.  Both drivers are bitwise
deterministic for a fixed RunConfig: all randomness flows from the seed, and
logs never contain wall-clock values.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .alignment import LossReport, pairwise_alignment_loss, similarity_matrix, total_loss
from .data import (
    IndoorSample,
    TrajectorySample,
    gen_indoor_dataset,
    gen_trajectory_dataset,
    split_indices,
)
from .encoders import (
    EncoderConfig,
    apply_stage_freeze,
    classify_logits,
    cross_modal_encode_batch,
    init_cross_params,
    init_text_params,
    init_visual_params,
    param_shapes,
    text_encode,
    visual_encode,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetError,
    FreezeViolationError,
    ParameterError,
)
from .optim import FiniteDifferenceReport, OptimConfig, Optimizer, ParamStore, backward, finite_difference_check
from .prompts import PAD_ID, ContextPromptSet, Vocabulary, build_prompt_set, count_prompt, tokenize
from .segmenter import SubInstruction
from .tensor import Tensor, concat, gather_index, linear, log_softmax, take_rows

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class RunConfig:
    """Flat run configuration; CLI flags and config-file keys mirror the fields."""

    seed: int = 0
    out_dir: str = "runs"
    # stage schedules
    stage1_epochs: int = 20
    stage1_batch_size: int = 10
    stage1_lr: float = 1e-3
    stage2_epochs: int = 20
    stage2_batch_size: int = 20
    stage2_lr: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # objective
    lambda1: float = 0.5
    lambda2: float = 0.1
    temperature: float = 0.1
    smoothing: float = 0.05
    ablation: str = "full"
    kl_reverse: bool = False
    joint_prompt_tuning: bool = False
    # encoder
    d: int = 64
    heads: int = 4
    ff_mult: int = 4
    visual_layers: int = 4
    text_layers: int = 2
    cross_layers: int = 2
    prompt_count: int = 10
    prompt_layers: int = 4
    num_patches: int = 4
    feature_dim: int = 16
    num_classes: int = 10
    max_text_len: int = 48
    max_viewpoints: int = 16
    max_subpaths: int = 12
    deep_prompt_mode: str = "replace"
    # datasets
    indoor_samples_per_class: int = 100
    indoor_noise: float = 0.1
    trajectory_count: int = 500
    subpaths_min: int = 2
    subpaths_max: int = 4
    viewpoints_min: int = 4
    viewpoints_max: int = 8
    viewpoint_noise: float = 0.1
    duplicate_prob: float = 0.3
    val_fraction: float = 0.1

    def encoder(self) -> EncoderConfig:
        enc = EncoderConfig(
            d=self.d, heads=self.heads, ff_mult=self.ff_mult,
            visual_layers=self.visual_layers, text_layers=self.text_layers,
            cross_layers=self.cross_layers, prompt_count=self.prompt_count,
            prompt_layers=self.prompt_layers, num_patches=self.num_patches,
            feature_dim=self.feature_dim, num_classes=self.num_classes,
            max_text_len=self.max_text_len, max_viewpoints=self.max_viewpoints,
            max_subpaths=self.max_subpaths, deep_prompt_mode=self.deep_prompt_mode,
        )
        enc.validate()
        return enc

    def optim(self, lr: float) -> OptimConfig:
        return OptimConfig(
            algorithm=self.optimizer, learning_rate=lr,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps, weight_decay=self.weight_decay,
        )

    def validate(self) -> None:
        self.encoder()
        self.optim(self.stage1_lr).validate()
        self.optim(self.stage2_lr).validate()
        if not (0 <= self.val_fraction < 1):
            raise ParameterError("val_fraction must lie in [0, 1)")
        if self.ablation not in ("full", "cnt_ind_ove", "cnt_ind", "cnt", "sub_only"):
            raise ParameterError(f"unknown ablation {self.ablation!r}")
        if self.subpaths_max > self.max_subpaths or self.viewpoints_max > self.max_viewpoints:
            raise ParameterError("dataset ranges exceed encoder sequence capacity")


def parse_config_file(path: str) -> dict:
    """Read `key = value` lines; keys must be RunConfig field names."""
    known = {f.name: f.type for f in fields(RunConfig)}
    out: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ParameterError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = coerce_field(key, value)
    return out


def coerce_field(key: str, value: str):
    current = getattr(RunConfig(), key)
    if isinstance(current, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ParameterError(f"{key} expects a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


# -- checkpointing -----------------------------------------------------------------


def save_checkpoint(store: ParamStore, config: dict, path: str) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "tensors": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in store.entries.items()
        },
        "frozen": sorted(store.frozen),
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ParamStore, dict]:
    """Load and validate a checkpoint; nothing is returned on failure."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: truncated or invalid checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {payload.get('format_version')!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    config = payload.get("config", {})
    tensors = payload.get("tensors", {})
    frozen = set(payload.get("frozen", []))

    expected = None
    if "encoder" in config:
        enc = EncoderConfig(**config["encoder"])
        expected = param_shapes(enc, config.get("vocab_size"))
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise CheckpointError(f"{path}: tensor set mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")

    store = ParamStore()
    for name in sorted(tensors):
        entry = tensors[name]
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor {name!r} data length {data.size} does not match shape {shape}")
        if expected is not None and shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, config implies {expected[name]}")
        store.add(name, data.reshape(shape))
    store.set_frozen(frozen & set(store.names()))
    return store, config


def _assert_frozen_unchanged(store: ParamStore, baseline: dict[str, np.ndarray], where: str) -> None:
    for name, ref in baseline.items():
        if not np.array_equal(store[name].data, ref):
            raise FreezeViolationError(f"frozen parameter {name!r} changed during {where}")


def _float_cell(value) -> str:
    return "" if value is None else repr(float(value))


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _batches(indices: Sequence[int], size: int):
    for i in range(0, len(indices), size):
        yield list(indices[i:i + size])


@dataclass
class StageResult:
    metrics: dict
    store: ParamStore
    checkpoint_path: str | None = None
    csv_path: str | None = None
    summary_path: str | None = None
    vocab_path: str | None = None


# -- stage 1 ------------------------------------------------------------------------


def stage1_loss(features: np.ndarray, labels: np.ndarray, store: ParamStore, enc: EncoderConfig) -> Tensor:
    """Mean cross-entropy of the head on prompted CLS features."""
    state = visual_encode(features, store, enc)
    cls = state.cls.reshape(features.shape[0], enc.d)
    logp = log_softmax(classify_logits(cls, store), axis=-1)
    return -gather_index(logp, labels).mean()


def _stage1_accuracy(samples: list[IndoorSample], indices: Sequence[int], store: ParamStore,
                     enc: EncoderConfig, batch_size: int = 64) -> float:
    if not indices:
        return float("nan")
    hits = 0
    for batch in _batches(indices, batch_size):
        feats = np.stack([samples[i].features for i in batch])
        labels = np.array([samples[i].label for i in batch])
        state = visual_encode(feats, store, enc)
        logits = classify_logits(state.cls.reshape(len(batch), enc.d), store)
        hits += int((logits.data.argmax(axis=1) == labels).sum())
    return hits / len(indices)


def run_stage1(cfg: RunConfig, dataset: list[IndoorSample] | None = None,
               write_outputs: bool = True) -> StageResult:
    cfg.validate()
    enc = cfg.encoder()
    if dataset is None:
        dataset = gen_indoor_dataset(
            num_classes=cfg.num_classes,
            samples_per_class=cfg.indoor_samples_per_class,
            noise=cfg.indoor_noise,
            seed=cfg.seed,
            num_patches=cfg.num_patches,
            feature_dim=cfg.feature_dim,
        )
    train_idx, val_idx = split_indices(len(dataset), cfg.seed, cfg.val_fraction)
    if not train_idx:
        raise DatasetError("stage 1 training split is empty")

    store = ParamStore()
    init_visual_params(store, enc, np.random.default_rng([cfg.seed, 11]))
    trainable = apply_stage_freeze(store, "stage1")
    baseline = {name: store[name].data.copy() for name in store.frozen}

    optimizer = Optimizer(cfg.optim(cfg.stage1_lr))
    shuffle_rng = np.random.default_rng([cfg.seed, 12])
    rows = []
    for epoch in range(cfg.stage1_epochs):
        order = [train_idx[i] for i in shuffle_rng.permutation(len(train_idx))]
        losses = []
        for batch in _batches(order, cfg.stage1_batch_size):
            feats = np.stack([dataset[i].features for i in batch])
            labels = np.array([dataset[i].label for i in batch])
            loss = stage1_loss(feats, labels, store, enc)
            grads = backward(loss, store)
            optimizer.step(store, grads)
            _assert_frozen_unchanged(store, baseline, f"stage1 epoch {epoch}")
            losses.append(loss.item())
        train_acc = _stage1_accuracy(dataset, train_idx, store, enc)
        val_acc = _stage1_accuracy(dataset, val_idx, store, enc)
        rows.append([epoch, repr(float(np.mean(losses))), repr(train_acc), repr(val_acc)])

    prompt_params = enc.prompt_layers * enc.prompt_count * enc.d if enc.prompt_count else 0
    metrics = {
        "train_accuracy": _stage1_accuracy(dataset, train_idx, store, enc),
        "val_accuracy": _stage1_accuracy(dataset, val_idx, store, enc),
        "trainable_parameters": int(sum(store[n].size for n in trainable)),
        "prompt_parameters": int(prompt_params),
        "epochs": cfg.stage1_epochs,
        "train_size": len(train_idx),
        "val_size": len(val_idx),
    }
    result = StageResult(metrics=metrics, store=store)
    if write_outputs:
        os.makedirs(cfg.out_dir, exist_ok=True)
        result.checkpoint_path = os.path.join(cfg.out_dir, "stage1_checkpoint.json")
        save_checkpoint(store, _checkpoint_config(cfg, enc, stage="stage1"), result.checkpoint_path)
        result.csv_path = os.path.join(cfg.out_dir, "stage1_log.csv")
        _write_csv(result.csv_path, ["epoch", "train_loss", "train_acc", "val_acc"], rows)
        result.summary_path = os.path.join(cfg.out_dir, "stage1_summary.json")
        with open(result.summary_path, "w", encoding="utf-8") as fh:
            json.dump({"metrics": metrics, "config": asdict(cfg)}, fh, sort_keys=True, indent=2)
    return result


def _checkpoint_config(cfg: RunConfig, enc: EncoderConfig, stage: str, vocab_size: int | None = None) -> dict:
    out = {"encoder": asdict(enc), "stage": stage, "seed": cfg.seed}
    if vocab_size is not None:
        out["vocab_size"] = vocab_size
    return out


# -- stage 2 ------------------------------------------------------------------------


@dataclass
class _Prepared:
    sample: TrajectorySample
    m: int
    prompt_set: ContextPromptSet
    ind_ids: np.ndarray
    seq_ids: np.ndarray
    cnt_ids: np.ndarray
    ove_ids: np.ndarray
    sub_ids: np.ndarray


def build_vocabulary(dataset: list[TrajectorySample], max_subpaths: int) -> Vocabulary:
    texts = []
    for sample in dataset:
        ps = _prompt_set_for(sample)
        texts.extend(ps.individual_prompts)
        texts.extend(ps.sequential_prompts)
        texts.append(ps.count_prompt)
        texts.append(ps.overall_prompt)
        texts.extend(sample.sub_instructions)
        texts.append(sample.instruction.text)
    # count prompts for every candidate size keep the count metric in-vocabulary
    texts.extend(count_prompt(k) for k in range(1, max_subpaths + 1))
    return Vocabulary.build(texts)


def _prompt_set_for(sample: TrajectorySample) -> ContextPromptSet:
    subs = [
        SubInstruction(index=i + 1, text=text, tokens=text.split())
        for i, text in enumerate(sample.sub_instructions)
    ]
    return build_prompt_set(subs)


def prepare_trajectories(dataset: list[TrajectorySample], vocab: Vocabulary, enc: EncoderConfig) -> list[_Prepared]:
    from .errors import AlignmentError

    prepared = []
    for sample in dataset:
        if len(sample.sub_instructions) != len(sample.chunks):
            raise AlignmentError(
                f"{len(sample.sub_instructions)} sub-instructions but {len(sample.chunks)} sub-path chunks"
            )
        ps = _prompt_set_for(sample)
        prepared.append(
            _Prepared(
                sample=sample,
                m=ps.m,
                prompt_set=ps,
                ind_ids=np.array([tokenize(t, vocab, enc.max_text_len) for t in ps.individual_prompts]),
                seq_ids=np.array([tokenize(t, vocab, enc.max_text_len) for t in ps.sequential_prompts]),
                cnt_ids=np.array(tokenize(ps.count_prompt, vocab, enc.max_text_len)),
                ove_ids=np.array(tokenize(ps.overall_prompt, vocab, enc.max_text_len)),
                sub_ids=np.array([tokenize(t, vocab, enc.max_text_len) for t in sample.sub_instructions]),
            )
        )
    return prepared


def precompute_viewpoint_features(dataset: list[TrajectorySample], store: ParamStore,
                                  enc: EncoderConfig, chunk: int = 256) -> list[np.ndarray]:
    """Frozen-backbone viewpoint encodings, reusable across every step.

    Each viewpoint is encoded as a single-patch image; its embedding is the
    patch position's final-layer output, whose residual stream keeps the
    viewpoint's own content (the CLS position is reserved for the stage-1
    classification contract and is nearly input-independent at small init).
    """
    all_rows = np.concatenate([s.viewpoints for s in dataset], axis=0)
    outputs = []
    for i in range(0, all_rows.shape[0], chunk):
        block = all_rows[i:i + chunk][:, None, :]  # each viewpoint is one patch
        state = visual_encode(block, store, enc)
        outputs.append(state.patch_block.data.reshape(block.shape[0], enc.d))
    flat = np.concatenate(outputs, axis=0)
    features = []
    offset = 0
    for s in dataset:
        t_len = s.viewpoints.shape[0]
        features.append(flat[offset:offset + t_len].copy())
        offset += t_len
    return features


def _live_viewpoint_features(batch: list[_Prepared], store: ParamStore, enc: EncoderConfig) -> list[Tensor]:
    rows = np.concatenate([p.sample.viewpoints for p in batch], axis=0)[:, None, :]
    state = visual_encode(rows, store, enc)
    flat = state.patch_block.reshape(rows.shape[0], enc.d)
    feats = []
    offset = 0
    for p in batch:
        t_len = p.sample.viewpoints.shape[0]
        feats.append(flat[offset:offset + t_len])
        offset += t_len
    return feats


def pooled_text_features(ids: np.ndarray, store: ParamStore, enc: EncoderConfig) -> Tensor:
    """Pooled text features for id rows, deduplicated and pad-trimmed.

    Trailing all-pad columns are masked out of attention and never pooled, so
    dropping them is exact; identical rows are encoded once and fanned back
    out with a scatter-add gradient, which is also an exact rewrite.
    """
    lengths = (ids != PAD_ID).sum(axis=1)
    trimmed = ids[:, : max(3, int(lengths.max()))]
    unique, inverse = np.unique(trimmed, axis=0, return_inverse=True)
    _, pooled = text_encode(unique, store, enc)
    return take_rows(pooled, inverse.reshape(-1))


def stage2_losses(
    batch: list[_Prepared],
    store: ParamStore,
    enc: EncoderConfig,
    cfg: RunConfig,
    cached_features: list[np.ndarray] | None = None,
    cache_indices: list[int] | None = None,
) -> tuple[Tensor, LossReport]:
    """The weighted alignment loss of one mini-batch under cfg.ablation."""
    mode = "full" if cfg.ablation == "cnt_ind_ove" else cfg.ablation
    b = len(batch)
    inv_b = 1.0 / b

    if cached_features is not None:
        assert cache_indices is not None
        vp_feats: list[Tensor] = [Tensor(cached_features[i]) for i in cache_indices]
    else:
        vp_feats = _live_viewpoint_features(batch, store, enc)

    if mode == "sub_only":
        sub_ids = np.concatenate([p.sub_ids for p in batch], axis=0)
        pooled = pooled_text_features(sub_ids, store, enc)
        text_proj = linear(pooled, store["proj.text.w"], store["proj.text.b"])
        outputs = cross_modal_encode_batch(
            vp_feats, None, [p.sample.chunks for p in batch], store, enc, include_count=False,
        )
        term = None
        offset = 0
        for p, out in zip(batch, outputs):
            tfeat = text_proj[offset:offset + p.m]
            offset += p.m
            vfeat = linear(concat([f.reshape(1, enc.d) for f in out.subpath_features], axis=0),
                           store["proj.visual.w"], store["proj.visual.b"])
            loss, _ = pairwise_alignment_loss(tfeat, vfeat, cfg.temperature, cfg.smoothing, cfg.kl_reverse)
            scaled = loss * inv_b
            term = scaled if term is None else term + scaled
        return total_loss(l_sub=term, lambda1=cfg.lambda1, lambda2=cfg.lambda2, mode="sub_only")

    # overall prompts are much longer than the rest; encoding them separately
    # keeps the short-prompt batch trimmed to its own length
    need_ind = mode in ("full", "cnt_ind")
    blocks = [np.concatenate([p.seq_ids for p in batch], axis=0), np.stack([p.cnt_ids for p in batch])]
    if need_ind:
        blocks.insert(0, np.concatenate([p.ind_ids for p in batch], axis=0))
    pooled = pooled_text_features(np.concatenate(blocks, axis=0), store, enc)

    m_total = sum(p.m for p in batch)
    cursor = 0
    ind_pool = None
    if need_ind:
        ind_pool = pooled[cursor:cursor + m_total]
        cursor += m_total
    seq_pool = pooled[cursor:cursor + m_total]
    cursor += m_total
    cnt_pool = pooled[cursor:cursor + b]
    ove_pool = pooled_text_features(np.stack([p.ove_ids for p in batch]), store, enc) if mode == "full" else None

    seq_feats = []
    offset = 0
    for p in batch:
        seq_feats.append(seq_pool[offset:offset + p.m])
        offset += p.m
    outputs = cross_modal_encode_batch(
        vp_feats, seq_feats, [p.sample.chunks for p in batch], store, enc, include_count=True,
    )

    w_t, b_t = store["proj.text.w"], store["proj.text.b"]
    w_v, b_v = store["proj.visual.w"], store["proj.visual.b"]

    ind_term = None
    if need_ind:
        ind_proj = linear(ind_pool, w_t, b_t)
        offset = 0
        for p, out in zip(batch, outputs):
            tfeat = ind_proj[offset:offset + p.m]
            offset += p.m
            vfeat = linear(concat([f.reshape(1, enc.d) for f in out.subpath_features], axis=0), w_v, b_v)
            loss, _ = pairwise_alignment_loss(tfeat, vfeat, cfg.temperature, cfg.smoothing, cfg.kl_reverse)
            scaled = loss * inv_b
            ind_term = scaled if ind_term is None else ind_term + scaled

    cnt_visual = linear(concat([out.count_feature.reshape(1, enc.d) for out in outputs], axis=0), w_v, b_v)
    l_cnt, _ = pairwise_alignment_loss(linear(cnt_pool, w_t, b_t), cnt_visual,
                                       cfg.temperature, cfg.smoothing, cfg.kl_reverse)
    l_ove = None
    if mode == "full":
        ove_visual = linear(concat([out.overall_visual.reshape(1, enc.d) for out in outputs], axis=0), w_v, b_v)
        l_ove, _ = pairwise_alignment_loss(linear(ove_pool, w_t, b_t), ove_visual,
                                           cfg.temperature, cfg.smoothing, cfg.kl_reverse)

    return total_loss(
        l_ind=[ind_term] if ind_term is not None else None,
        l_ove=l_ove,
        l_cnt=l_cnt,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        mode=mode,
    )


def run_stage2(cfg: RunConfig, stage1_checkpoint, dataset: list[TrajectorySample] | None = None,
               write_outputs: bool = True) -> StageResult:
    cfg.validate()
    enc = cfg.encoder()
    if isinstance(stage1_checkpoint, str):
        store, ckpt_config = load_checkpoint(stage1_checkpoint)
        if "encoder" in ckpt_config and EncoderConfig(**ckpt_config["encoder"]) != enc:
            raise ConfigurationError("stage-1 checkpoint was built with a different encoder config")
    else:
        store = stage1_checkpoint.copy()

    if dataset is None:
        dataset = gen_trajectory_dataset(
            count=cfg.trajectory_count,
            subpaths_range=(cfg.subpaths_min, cfg.subpaths_max),
            viewpoints_range=(cfg.viewpoints_min, cfg.viewpoints_max),
            seed=cfg.seed,
            feature_dim=cfg.feature_dim,
            noise=cfg.viewpoint_noise,
            duplicate_prob=cfg.duplicate_prob,
        )
    vocab = build_vocabulary(dataset, enc.max_subpaths)
    rng = np.random.default_rng([cfg.seed, 21])
    init_text_params(store, enc, len(vocab), rng)
    init_cross_params(store, enc, rng)
    trainable = apply_stage_freeze(store, "stage2", cfg.joint_prompt_tuning)
    baseline = {name: store[name].data.copy() for name in store.frozen}

    prepared = prepare_trajectories(dataset, vocab, enc)
    train_idx, val_idx = split_indices(len(prepared), cfg.seed, cfg.val_fraction)
    if not train_idx:
        raise DatasetError("stage 2 training split is empty")

    cache = None
    if not cfg.joint_prompt_tuning:
        cache = precompute_viewpoint_features(dataset, store, enc)

    optimizer = Optimizer(cfg.optim(cfg.stage2_lr))
    shuffle_rng = np.random.default_rng([cfg.seed, 22])
    rows = []
    step = 0
    epoch_totals = []
    for epoch in range(cfg.stage2_epochs):
        order = [train_idx[i] for i in shuffle_rng.permutation(len(train_idx))]
        epoch_losses = []
        for batch_idx in _batches(order, cfg.stage2_batch_size):
            batch = [prepared[i] for i in batch_idx]
            total, report = stage2_losses(batch, store, enc, cfg, cache, batch_idx)
            grads = backward(total, store)
            optimizer.step(store, grads)
            _assert_frozen_unchanged(store, baseline, f"stage2 step {step}")
            ind_sum = report.l_sub if report.mode == "sub_only" else (sum(report.l_ind) if report.l_ind else None)
            rows.append([
                step,
                _float_cell(ind_sum),
                _float_cell(report.l_ove),
                _float_cell(report.l_cnt),
                _float_cell(report.total),
            ])
            epoch_losses.append(report.total)
            step += 1
        epoch_totals.append(float(np.mean(epoch_losses)))

    metrics = {
        "epoch_total_loss": epoch_totals,
        "trainable_parameters": int(sum(store[n].size for n in trainable)),
        "train_size": len(train_idx),
        "val_size": len(val_idx),
        "vocab_size": len(vocab),
        "ablation": cfg.ablation,
    }
    eval_idx = val_idx if val_idx else train_idx
    metrics["retrieval"] = evaluate_retrieval(
        store, enc, [dataset[i] for i in eval_idx], vocab,
        mode=cfg.ablation, cached_features=[cache[i] for i in eval_idx] if cache else None,
    )

    result = StageResult(metrics=metrics, store=store)
    if write_outputs:
        os.makedirs(cfg.out_dir, exist_ok=True)
        result.vocab_path = os.path.join(cfg.out_dir, "vocab.json")
        vocab.save(result.vocab_path)
        result.checkpoint_path = os.path.join(cfg.out_dir, "stage2_checkpoint.json")
        save_checkpoint(store, _checkpoint_config(cfg, enc, stage="stage2", vocab_size=len(vocab)), result.checkpoint_path)
        result.csv_path = os.path.join(cfg.out_dir, "stage2_log.csv")
        _write_csv(result.csv_path, ["step", "l_ind_sum", "l_ove", "l_cnt", "total"], rows)
        result.summary_path = os.path.join(cfg.out_dir, "stage2_summary.json")
        with open(result.summary_path, "w", encoding="utf-8") as fh:
            json.dump({"metrics": metrics, "config": asdict(cfg)}, fh, sort_keys=True, indent=2)
    return result


# -- evaluation -------------------------------------------------------------------


@dataclass
class TrajectoryFeatures:
    """Projected features for one trajectory, ready for argmax retrieval."""

    text_feats: np.ndarray            # (M, d) per-sub-instruction
    visual_feats: np.ndarray          # (M, d) per-sub-path
    overall_text: np.ndarray          # (d,)
    overall_visual: np.ndarray        # (d,)
    count_feature: np.ndarray | None  # (d,)
    m: int


def retrieval_metrics(features: list[TrajectoryFeatures],
                      count_candidates: np.ndarray | None = None) -> dict:
    """Pure metric computation over extracted features.

    subpair: within each trajectory, the argmax sub-path of each
    sub-instruction row must be its own; trajectory: global argmax of each
    overall text feature over all trajectories' overall visual features;
    count: argmax over the candidate count-prompt features must pick the
    trajectory's true sub-path count.
    """
    if not features:
        raise DatasetError("evaluation dataset is empty")
    sub_hits = 0
    sub_total = 0
    count_hits = 0
    have_counts = count_candidates is not None and all(f.count_feature is not None for f in features)
    cand = _unit_rows(count_candidates) if have_counts else None
    for f in features:
        sim = _unit_rows(f.text_feats) @ _unit_rows(f.visual_feats).T
        sub_hits += int((sim.argmax(axis=1) == np.arange(f.m)).sum())
        sub_total += f.m
        if have_counts:
            count_hits += int((cand @ _unit_rows(f.count_feature[None, :])[0]).argmax() + 1 == f.m)
    text_mat = _unit_rows(np.stack([f.overall_text for f in features]))
    vis_mat = _unit_rows(np.stack([f.overall_visual for f in features]))
    traj_sim = text_mat @ vis_mat.T
    return {
        "subpair_accuracy": sub_hits / sub_total,
        "trajectory_accuracy": float((traj_sim.argmax(axis=1) == np.arange(len(features))).mean()),
        "count_accuracy": (count_hits / len(features)) if have_counts else None,
    }


def evaluate_retrieval(
    store: ParamStore,
    enc: EncoderConfig,
    dataset: list[TrajectorySample],
    vocab: Vocabulary,
    mode: str = "full",
    batch_size: int = 16,
    cached_features: list[np.ndarray] | None = None,
) -> dict:
    """Argmax retrieval metrics over sub-pairs, whole trajectories, and counts."""
    if not dataset:
        raise DatasetError("evaluation dataset is empty")
    mode = "full" if mode in ("cnt_ind_ove", "cnt", "cnt_ind") else mode
    prepared = prepare_trajectories(dataset, vocab, enc)
    if cached_features is None:
        cached_features = precompute_viewpoint_features(dataset, store, enc)

    w_t, b_t = store["proj.text.w"].data, store["proj.text.b"].data
    w_v, b_v = store["proj.visual.w"].data, store["proj.visual.b"].data

    count_candidates = None
    if mode == "full":
        cnt_ids = np.array([
            tokenize(count_prompt(k), vocab, enc.max_text_len)
            for k in range(1, enc.max_subpaths + 1)
        ])
        count_candidates = pooled_text_features(cnt_ids, store, enc).data @ w_t + b_t

    features: list[TrajectoryFeatures] = []
    for start in range(0, len(prepared), batch_size):
        batch = prepared[start:start + batch_size]
        feats = [Tensor(cached_features[start + j]) for j in range(len(batch))]
        if mode == "sub_only":
            ids = np.concatenate([p.sub_ids for p in batch], axis=0)
            text_pool = pooled_text_features(ids, store, enc).data
            ove_ids = np.array([tokenize(p.sample.instruction.text, vocab, enc.max_text_len) for p in batch])
            ove_pool = pooled_text_features(ove_ids, store, enc).data
            outputs = cross_modal_encode_batch(
                feats, None, [p.sample.chunks for p in batch], store, enc, include_count=False,
            )
        else:
            ind_ids = np.concatenate([p.ind_ids for p in batch], axis=0)
            seq_ids = np.concatenate([p.seq_ids for p in batch], axis=0)
            cnt_ids = np.stack([p.cnt_ids for p in batch])
            pooled = pooled_text_features(np.concatenate([ind_ids, seq_ids, cnt_ids], axis=0), store, enc)
            m_total = ind_ids.shape[0]
            text_pool = pooled.data[:m_total]
            seq_pool = pooled[m_total:2 * m_total]
            ove_pool = pooled_text_features(np.stack([p.ove_ids for p in batch]), store, enc).data
            seq_feats = []
            offset = 0
            for p in batch:
                seq_feats.append(seq_pool[offset:offset + p.m])
                offset += p.m
            outputs = cross_modal_encode_batch(
                feats, seq_feats, [p.sample.chunks for p in batch], store, enc, include_count=True,
            )

        offset = 0
        for j, (p, out) in enumerate(zip(batch, outputs)):
            features.append(
                TrajectoryFeatures(
                    text_feats=text_pool[offset:offset + p.m] @ w_t + b_t,
                    visual_feats=np.stack([f.data for f in out.subpath_features]) @ w_v + b_v,
                    overall_text=ove_pool[j] @ w_t + b_t,
                    overall_visual=out.overall_visual.data @ w_v + b_v,
                    count_feature=(out.count_feature.data @ w_v + b_v) if out.count_feature is not None else None,
                    m=p.m,
                )
            )
            offset += p.m
    return retrieval_metrics(features, count_candidates)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    return x / norms


# -- gradient fidelity -----------------------------------------------------------


def gradcheck_config() -> RunConfig:
    """Small widths so an exhaustive central-difference sweep stays fast."""
    return RunConfig(
        seed=7,
        d=8, heads=2, ff_mult=2,
        visual_layers=2, text_layers=1, cross_layers=1,
        prompt_count=2, prompt_layers=2,
        num_patches=2, feature_dim=4, num_classes=3,
        max_text_len=24, max_viewpoints=8, max_subpaths=4,
        subpaths_min=3, subpaths_max=3, viewpoints_min=6, viewpoints_max=6,
        trajectory_count=2, indoor_samples_per_class=2,
    )


def stage1_gradient_report(cfg: RunConfig | None = None, eps: float = 1e-5) -> FiniteDifferenceReport:
    cfg = cfg or gradcheck_config()
    enc = cfg.encoder()
    dataset = gen_indoor_dataset(
        num_classes=cfg.num_classes, samples_per_class=cfg.indoor_samples_per_class,
        noise=cfg.indoor_noise, seed=cfg.seed,
        num_patches=cfg.num_patches, feature_dim=cfg.feature_dim,
    )
    feats = np.stack([s.features for s in dataset[:4]])
    labels = np.array([s.label for s in dataset[:4]])
    store = ParamStore()
    init_visual_params(store, enc, np.random.default_rng([cfg.seed, 11]))
    apply_stage_freeze(store, "stage1")
    return finite_difference_check(lambda s: stage1_loss(feats, labels, s, enc), store, eps=eps)


def stage2_gradient_report(cfg: RunConfig | None = None, eps: float = 1e-5) -> FiniteDifferenceReport:
    cfg = cfg or gradcheck_config()
    enc = cfg.encoder()
    dataset = gen_trajectory_dataset(
        count=cfg.trajectory_count,
        subpaths_range=(cfg.subpaths_min, cfg.subpaths_max),
        viewpoints_range=(cfg.viewpoints_min, cfg.viewpoints_max),
        seed=cfg.seed, feature_dim=cfg.feature_dim, noise=cfg.viewpoint_noise,
        duplicate_prob=cfg.duplicate_prob,
    )
    vocab = build_vocabulary(dataset, enc.max_subpaths)
    store = ParamStore()
    rng = np.random.default_rng([cfg.seed, 11])
    init_visual_params(store, enc, rng)
    init_text_params(store, enc, len(vocab), rng)
    init_cross_params(store, enc, rng)
    apply_stage_freeze(store, "stage2", cfg.joint_prompt_tuning)
    prepared = prepare_trajectories(dataset, vocab, enc)
    cache = precompute_viewpoint_features(dataset, store, enc)
    indices = list(range(len(prepared)))

    def loss_fn(s):
        total, _ = stage2_losses(prepared, s, enc, cfg, cache, indices)
        return total

    return finite_difference_check(loss_fn, store, eps=eps)
