"""Loss functions, the two-stage training procedure, and checkpoints.

Stage 0 pre-trains the structural encoder (with its query decoder) on the
link-prediction objective alone, then freezes every encoder parameter.
Stage 1 trains the adapters, both decoders, the event-aware gates, and
the prediction expert on the combined loss: the major prediction loss
plus omega times the two event-type expert losses. Because the encoder
is frozen, its per-timestamp output is cached and reused across stage-1
epochs (numerically identical to re-encoding, just cheaper).

Two loss modes exist. `literal` scores each event by its sigmoid
probability and sums: L = -sum p[o] (and the expert terms gated by the
historical indicator). It is exact but saturates easily, so the default
`cross_entropy` mode applies the usual log-softmax objective to the same
logits. Both share every other moving part.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import NumericError, Tensor
from .config import RunConfig
from .decoder import decode
from .encoders import (
    SemanticEmbeddingTable,
    encode_structural,
    snapshot_edges,
)
from .evaluation import build_filter_sets, compute_metrics, ranked_queries
from .history import FrequencyIndex, build_index
from .model import AblationConfig, MeshModel, forward_queries, init_model, score_logits
from .tkg import TemporalKG, Vocabulary, add_inverse_relations, merge


def major_loss(pred: Tensor, targets, mode: str) -> Tensor:
    """Eventwise prediction loss over a batch.

    literal: pred holds probabilities, loss = -sum_b pred[b, o_b].
    cross_entropy: pred holds logits, loss = -sum_b log_softmax(pred)[b, o_b].
    """
    targets = np.asarray(targets, dtype=np.int64)
    if mode == "literal":
        return ad.neg(ad.tensor_sum(ad.pick_last(pred, targets)))
    if mode == "cross_entropy":
        return ad.neg(ad.tensor_sum(ad.pick_last(ad.log_softmax(pred), targets)))
    raise ValueError(f"unknown loss mode {mode!r}")


def expert_losses(pred_his: Tensor, pred_nhis: Tensor, targets, indicators,
                  mode: str) -> tuple[Tensor, Tensor]:
    """Auxiliary specialization losses; each event feeds exactly one term.

    Historical events (indicator 1) contribute only to the historical
    expert's loss, the rest only to the non-historical one.
    """
    targets = np.asarray(targets, dtype=np.int64)
    ind = np.asarray(indicators, dtype=pred_his.dtype)

    def picked(pred):
        if mode == "literal":
            return ad.pick_last(pred, targets)
        if mode == "cross_entropy":
            return ad.pick_last(ad.log_softmax(pred), targets)
        raise ValueError(f"unknown loss mode {mode!r}")

    l_his = ad.neg(ad.tensor_sum(ad.mul(picked(pred_his), Tensor(ind))))
    l_nhis = ad.neg(ad.tensor_sum(ad.mul(picked(pred_nhis), Tensor(1.0 - ind))))
    return l_his, l_nhis


def total_loss(l_major: Tensor, l_his: Tensor, l_nhis: Tensor, omega: float) -> Tensor:
    """Weighted sum: major + omega * (historical + non-historical)."""
    if omega < 0:
        raise ValueError("omega must be >= 0")
    return ad.add(l_major, ad.scale(ad.add(l_his, l_nhis), omega))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: MeshModel
    vocab: Vocabulary                  # inverse-augmented
    log_lines: list
    frozen_names: list
    frozen_values: dict                # name -> array copied at freeze time
    stage0_losses: list
    best_valid_mrr: float | None
    best_epoch: int | None
    encode_cache: dict = field(default_factory=dict)


def _ablation_from(config: RunConfig) -> AblationConfig:
    return AblationConfig(
        disable_semantic=config.disable_semantic,
        disable_structural=config.disable_structural,
        disable_event_aware=config.disable_event_aware,
        disable_prediction_expert=config.disable_prediction_expert,
        gate_input=config.gate_input,
    )


def _snapshot_batches(tkg: TemporalKG):
    """Per-timestamp query batches: (t, s_idx, r_idx, o_idx)."""
    batches = []
    for t in tkg.timestamps():
        snap = tkg.snapshots[t]
        arr = np.array([(q.s, q.r, q.o) for q in snap], dtype=np.int64)
        batches.append((t, arr[:, 0], arr[:, 1], arr[:, 2]))
    return batches


def _check_finite(loss: Tensor, stage: str, epoch: int, t: int) -> None:
    if not np.isfinite(loss.values):
        raise NumericError(f"non-finite loss in {stage}, epoch {epoch}, timestamp {t}")


def train_model(config: RunConfig, vocab: Vocabulary, train_tkg: TemporalKG,
                valid_tkg: TemporalKG, sem: SemanticEmbeddingTable,
                verbose=None) -> TrainResult:
    """Run both training stages and keep the best-validation parameters."""
    config.validate()
    dtype = np.float32 if config.dtype == "float32" else np.float64
    ablation = _ablation_from(config)

    train_aug, vocab_aug = add_inverse_relations(train_tkg, vocab)
    valid_aug, _ = add_inverse_relations(valid_tkg, vocab)
    edges_train = snapshot_edges(train_aug)
    edges_cond_valid = snapshot_edges(merge(train_aug, valid_aug))
    batches = _snapshot_batches(train_aug)
    index_train = build_index(train_aug.facts())
    valid_filters = build_filter_sets(train_aug, valid_aug)

    model = init_model(
        num_entities=vocab.num_entities,
        num_relations=vocab.num_relations,
        dim=config.dim,
        llm_dim=sem.dim,
        adapter_hidden=config.adapter_hidden,
        channels=config.channels,
        kernel_width=config.kernel_width,
        layers=config.layers,
        window=config.window,
        dropout=config.dropout,
        num_historical=config.num_historical,
        num_nonhistorical=config.num_nonhistorical,
        gate_input=config.gate_input,
        gen=rng.stream(config.seed, rng.INIT),
        dtype=dtype,
    )

    named = model.named_parameters()
    stage0_losses: list[float] = []

    # stage 0: structural encoder (plus its decoder) on link prediction
    if not ablation.disable_structural and config.epochs_stage0 > 0:
        names0 = [n for n in named if n.startswith(("encoder.", "decoder_g."))]
        params0 = [named[n] for n in names0]
        adam0 = ad.init_adam(params0, lr=config.learning_rate)
        gen0 = rng.stream(config.seed, rng.DROPOUT, 0)
        for epoch in range(1, config.epochs_stage0 + 1):
            total, count = 0.0, 0
            for t, s_idx, r_idx, o_idx in batches:
                with ad.Tape() as tape:
                    H, R = encode_structural(model.encoder, edges_train, t, train=True, gen=gen0)
                    q_g = decode(model.decoder_g, ad.gather_rows(H, s_idx),
                                 ad.gather_rows(R, r_idx), train=True, gen=gen0)
                    logits = score_logits(q_g, H)
                    loss = major_loss(logits, o_idx, "cross_entropy")
                    _check_finite(loss, "stage 0", epoch, t)
                    ad.zero_grads(params0)
                    ad.backward(loss, tape)
                ad.adam_step(params0, adam0)
                total += loss.item()
                count += len(o_idx)
            stage0_losses.append(total / max(count, 1))
            if verbose:
                verbose(f"stage0 epoch {epoch}: loss {stage0_losses[-1]:.6f}")

    # freeze the structural encoder
    frozen_names = model.structural_parameter_names()
    frozen_values = {n: named[n].values.copy() for n in frozen_names}

    # stage 1: adapters, both decoders, gates, prediction expert
    names1 = [n for n in named if n not in frozen_names]
    params1 = [named[n] for n in names1]
    adam1 = ad.init_adam(params1, lr=config.learning_rate)
    gen1 = rng.stream(config.seed, rng.DROPOUT, 1)
    omega = 0.0 if ablation.disable_event_aware else config.omega
    use_experts = not (ablation.disable_semantic or ablation.disable_structural)

    # the frozen encoder makes per-timestamp output a constant: cache it
    train_cache: dict[int, tuple] = {}
    valid_cache: dict[int, tuple] = {}

    def encoded(t):
        if ablation.disable_structural:
            return None, None
        if t not in train_cache:
            H, R = encode_structural(model.encoder, edges_train, t)
            train_cache[t] = (H.values, R.values)
        H_v, R_v = train_cache[t]
        return Tensor(H_v), Tensor(R_v)

    log_lines: list[str] = []
    best_mrr: float | None = None
    best_epoch: int | None = None
    best_state: dict | None = None

    for epoch in range(1, config.epochs_stage1 + 1):
        total, count = 0.0, 0
        for t, s_idx, r_idx, o_idx in batches:
            H, R = encoded(t)
            with ad.Tape() as tape:
                bundle = forward_queries(
                    model, H, R, sem, s_idx, r_idx,
                    train=True, gen=gen1, ablation=ablation,
                )
                if config.loss_mode == "literal":
                    pred = ad.sigmoid(bundle.logits)
                else:
                    pred = bundle.logits
                loss = major_loss(pred, o_idx, config.loss_mode)
                if use_experts and omega > 0.0:
                    lh_raw, ln_raw = bundle.partial_logits()
                    if config.loss_mode == "literal":
                        lh_raw, ln_raw = ad.sigmoid(lh_raw), ad.sigmoid(ln_raw)
                    indicators = [
                        index_train.indicator(int(s), int(r), int(o), t)
                        for s, r, o in zip(s_idx, r_idx, o_idx)
                    ]
                    l_his, l_nhis = expert_losses(lh_raw, ln_raw, o_idx, indicators,
                                                  config.loss_mode)
                    loss = total_loss(loss, l_his, l_nhis, omega)
                _check_finite(loss, "stage 1", epoch, t)
                ad.zero_grads(params1)
                ad.backward(loss, tape)
            ad.adam_step(params1, adam1)
            total += loss.item()
            count += len(o_idx)
        train_loss = total / max(count, 1)

        results, _, _ = ranked_queries(
            model, sem, edges_cond_valid, valid_aug, valid_filters,
            ablation=ablation, encode_cache=valid_cache,
        )
        valid_mrr = compute_metrics([r.filtered_rank for r in results]).mrr if results else 0.0
        log_lines.append(f"{epoch}\t{train_loss:.6f}\t{valid_mrr:.6f}")
        if verbose:
            verbose(f"stage1 epoch {epoch}: loss {train_loss:.6f} valid MRR {valid_mrr:.6f}")
        if best_mrr is None or valid_mrr > best_mrr:
            best_mrr = valid_mrr
            best_epoch = epoch
            best_state = {n: named[n].values.copy() for n in names1}

    if best_state is not None:
        for n, values in best_state.items():
            named[n].values = values

    for n in frozen_names:
        if not np.array_equal(named[n].values, frozen_values[n]):
            raise AssertionError(f"frozen parameter {n} changed during stage 1")

    return TrainResult(
        model=model,
        vocab=vocab_aug,
        log_lines=log_lines,
        frozen_names=frozen_names,
        frozen_values=frozen_values,
        stage0_losses=stage0_losses,
        best_valid_mrr=best_mrr,
        best_epoch=best_epoch,
        encode_cache=train_cache,
    )


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = "meshckpt"
CHECKPOINT_VERSION = 1

ARCH_KEYS = (
    "dim", "llm_dim", "adapter_hidden", "channels", "kernel_width", "layers",
    "window", "dropout", "num_historical", "num_nonhistorical", "gate_input",
)


def save_checkpoint(path: str, model: MeshModel, config: RunConfig,
                    frozen_names: list, seed: int) -> None:
    """Versioned container: JSON header line, then float32 little-endian
    parameter blobs in manifest order."""
    named = model.named_parameters()
    manifest = [{"name": n, "shape": list(t.values.shape)} for n, t in named.items()]
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "vocab": {
            "num_entities": model.num_entities,
            "num_relations": model.num_relations,
        },
        "seed": seed,
        "frozen": list(frozen_names),
        "params": manifest,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for n, _ in ((m["name"], m) for m in manifest):
            fh.write(np.ascontiguousarray(named[n].values, dtype="<f4").tobytes())


def load_checkpoint(path: str):
    """Rebuild the model from a checkpoint; returns (model, header)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        blob = fh.read()
    cfg = header["config"]
    dtype = np.float32 if cfg.get("dtype", "float32") == "float32" else np.float64
    model = init_model(
        num_entities=header["vocab"]["num_entities"],
        num_relations=header["vocab"]["num_relations"],
        dim=cfg["dim"],
        llm_dim=cfg["llm_dim"],
        adapter_hidden=cfg["adapter_hidden"],
        channels=cfg["channels"],
        kernel_width=cfg["kernel_width"],
        layers=cfg["layers"],
        window=cfg["window"],
        dropout=cfg["dropout"],
        num_historical=cfg["num_historical"],
        num_nonhistorical=cfg["num_nonhistorical"],
        gate_input=cfg["gate_input"],
        gen=rng.stream(0, rng.INIT),
        dtype=dtype,
    )
    named = model.named_parameters()
    offset = 0
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in named:
            raise ValueError(f"checkpoint parameter {name} does not fit this architecture")
        size = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += size * 4
        if named[name].values.shape != shape:
            raise ValueError(f"checkpoint shape {shape} for {name} does not match model")
        named[name].values = raw.reshape(shape).astype(dtype)
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after the declared parameters")
    return model, header
