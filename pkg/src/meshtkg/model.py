"""Event-aware experts, prediction expert, and entity scoring.

Each of the M+N event-aware experts blends the structural query q_g and
the semantic query q_s through its own sigmoid gate; the first M experts
are trained toward recurring events, the next N toward novel ones. The
prediction expert assigns every expert an independent sigmoid weight
(driven by q_g, which carries the evolving graph context) and sums the
expert outputs into the final query vector. Scores against the entity
table go through a per-entity sigmoid, so rankings are identical on
logits and probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoders as enc
from .autodiff import Tensor

GATE_INPUTS = ("structural", "semantic", "concatenated")


@dataclass
class AblationConfig:
    """Forward-pass and training switches for the ablation grid."""

    disable_semantic: bool = False
    disable_structural: bool = False
    disable_event_aware: bool = False      # training-only: drops the expert losses
    disable_prediction_expert: bool = False  # final query = plain mean of expert outputs
    gate_input: str = "structural"         # consumed at model build time

    def validate(self) -> None:
        if self.disable_semantic and self.disable_structural:
            raise ValueError("cannot disable both the semantic and the structural path")
        if self.gate_input not in GATE_INPUTS:
            raise ValueError(f"gate_input must be one of {GATE_INPUTS}")


@dataclass
class ExpertGateParams:
    """One gate per expert: a weight vector and a scalar bias."""

    weights: list  # (M+N) x Tensor (gate_dim, 1)
    biases: list   # (M+N) x Tensor (1,)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"gates.expert{i}.w"] = w
            out[f"gates.expert{i}.b"] = b
        return out


@dataclass
class PredictionExpertParams:
    w: Tensor  # (gate_dim, M+N)
    b: Tensor  # (M+N,)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"prediction.w": self.w, "prediction.b": self.b}


def init_expert_gates(gate_dim: int, num_experts: int, dtype=np.float32) -> ExpertGateParams:
    # zero init puts every gate at 0.5: both information sources and all
    # experts start symmetric, so nothing collapses before training speaks
    return ExpertGateParams(
        weights=[ad.param(np.zeros((gate_dim, 1), dtype=dtype)) for _ in range(num_experts)],
        biases=[ad.param(np.zeros(1, dtype=dtype)) for _ in range(num_experts)],
    )


def init_prediction_expert(gate_dim: int, num_experts: int, dtype=np.float32) -> PredictionExpertParams:
    return PredictionExpertParams(
        w=ad.param(np.zeros((gate_dim, num_experts), dtype=dtype)),
        b=ad.param(np.zeros(num_experts, dtype=dtype)),
    )


def expert_mix(w: Tensor, b: Tensor, q_g: Tensor, q_s: Tensor, gate: Tensor | None = None):
    """One event-aware expert: alpha = sigmoid(gate . w + b),
    output = alpha * q_g + (1 - alpha) * q_s.

    Returns (alpha, output); alpha has shape (batch, 1).
    """
    gate = q_g if gate is None else gate
    alpha = ad.sigmoid(ad.add(ad.matmul(gate, w), b))
    blend = ad.add(ad.mul(alpha, q_g), ad.mul(ad.shift(ad.neg(alpha), 1.0), q_s))
    return alpha, blend


def prediction_weights(params: PredictionExpertParams, gate: Tensor) -> Tensor:
    """Per-expert weights in (0,1), one independent sigmoid per expert
    (deliberately not softmax-normalized)."""
    return ad.sigmoid(ad.add(ad.matmul(gate, params.w), params.b))


def fuse(alphas: Tensor, expert_outputs: list, num_historical: int) -> Tensor:
    """Weighted sum over all experts: sum_i alpha_i * q_i.

    Summed block-wise (historical block, then non-historical block) so the
    result is bit-identical to partial_fuse(his) + partial_fuse(nhis) for
    every expert count; float addition is not associative, so a flat fold
    would break that identity.
    """
    his = _weighted_sum(alphas, expert_outputs, 0, num_historical)
    nhis = _weighted_sum(alphas, expert_outputs, num_historical, len(expert_outputs))
    return ad.add(his, nhis)


def partial_fuse(alphas: Tensor, expert_outputs: list, kind: str, num_historical: int) -> Tensor:
    """Sum over the historical (i <= M) or non-historical (i > M) block only.

    The two partial sums add up to `fuse` exactly.
    """
    if kind == "his":
        return _weighted_sum(alphas, expert_outputs, 0, num_historical)
    if kind == "nhis":
        return _weighted_sum(alphas, expert_outputs, num_historical, len(expert_outputs))
    raise ValueError(f"kind must be 'his' or 'nhis', got {kind!r}")


def _weighted_sum(alphas: Tensor, outputs: list, start: int, stop: int) -> Tensor:
    if alphas.shape[-1] != len(outputs):
        raise ValueError(f"{alphas.shape[-1]} weights for {len(outputs)} expert outputs")
    total = None
    for i in range(start, stop):
        term = ad.mul(ad.slice_last(alphas, i, i + 1), outputs[i])
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("empty expert block")
    return total


def score_logits(q: Tensor, entity_table: Tensor) -> Tensor:
    """Pre-sigmoid scores of every entity: q . H^T, shape (batch, |E|)."""
    if q.shape[-1] != entity_table.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} vs entity table dim {entity_table.shape[-1]}")
    single = q.values.ndim == 1
    if single:
        q = ad.reshape(q, (1, q.shape[0]))
    logits = ad.matmul(q, ad.transpose(entity_table))
    return ad.reshape(logits, (logits.shape[1],)) if single else logits


def score(q: Tensor, entity_table: Tensor) -> Tensor:
    """Per-entity probabilities sigmoid(q . H^T); also serves the partial
    historical / non-historical predictions."""
    return ad.sigmoid(score_logits(q, entity_table))


# ---------------------------------------------------------------------------
# the full model

@dataclass
class MeshModel:
    num_entities: int
    num_relations: int  # before inverse augmentation
    dim: int
    llm_dim: int
    num_historical: int      # M
    num_nonhistorical: int   # N
    gate_input: str
    encoder: enc.StructuralEncoderParams
    adapters: enc.AdapterParams
    decoder_g: dec.ConvTransEParams
    decoder_l: dec.ConvTransEParams
    gates: ExpertGateParams
    prediction: PredictionExpertParams

    @property
    def num_experts(self) -> int:
        return self.num_historical + self.num_nonhistorical

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named_parameters()
        out.update(self.adapters.named_parameters())
        out.update(self.decoder_g.named_parameters("decoder_g"))
        out.update(self.decoder_l.named_parameters("decoder_l"))
        out.update(self.gates.named_parameters())
        out.update(self.prediction.named_parameters())
        return out

    def structural_parameter_names(self) -> list[str]:
        return sorted(self.encoder.named_parameters().keys())


def init_model(*, num_entities: int, num_relations: int, dim: int, llm_dim: int,
               adapter_hidden: int, channels: int, kernel_width: int, layers: int,
               window: int, dropout: float, num_historical: int, num_nonhistorical: int,
               gate_input: str, gen: np.random.Generator, dtype=np.float32) -> MeshModel:
    if num_historical < 1 or num_nonhistorical < 1:
        raise ValueError("need at least one historical and one non-historical expert")
    if gate_input not in GATE_INPUTS:
        raise ValueError(f"gate_input must be one of {GATE_INPUTS}")
    gate_dim = 2 * dim if gate_input == "concatenated" else dim
    num_experts = num_historical + num_nonhistorical
    return MeshModel(
        num_entities=num_entities,
        num_relations=num_relations,
        dim=dim,
        llm_dim=llm_dim,
        num_historical=num_historical,
        num_nonhistorical=num_nonhistorical,
        gate_input=gate_input,
        encoder=enc.init_structural_encoder(
            num_entities, 2 * num_relations, dim, layers, window, dropout, gen, dtype
        ),
        adapters=enc.init_adapters(llm_dim, adapter_hidden, dim, gen, dtype),
        decoder_g=dec.init_conv_transe(dim, channels, kernel_width, dropout, gen, dtype),
        decoder_l=dec.init_conv_transe(dim, channels, kernel_width, dropout, gen, dtype),
        gates=init_expert_gates(gate_dim, num_experts, dtype),
        prediction=init_prediction_expert(gate_dim, num_experts, dtype),
    )


@dataclass
class QueryBundle:
    """Everything the losses and the evaluator need for one query batch."""

    q_g: Tensor | None
    q_s: Tensor | None
    q: Tensor
    q_his: Tensor | None
    q_nhis: Tensor | None
    alphas: Tensor | None          # prediction-expert weights (batch, M+N)
    expert_alphas: list            # per event-aware expert, each (batch, 1)
    score_table: Tensor            # entity table the queries are scored against
    logits: Tensor = field(init=False)

    def __post_init__(self):
        self.logits = score_logits(self.q, self.score_table)

    def partial_logits(self):
        return (
            score_logits(self.q_his, self.score_table),
            score_logits(self.q_nhis, self.score_table),
        )


def forward_queries(model: MeshModel, H_g, R_g, sem: enc.SemanticEmbeddingTable,
                    s_idx: np.ndarray, r_idx: np.ndarray, *,
                    train: bool = False, gen: np.random.Generator | None = None,
                    ablation: AblationConfig | None = None,
                    semantic_entity_table: Tensor | None = None) -> QueryBundle:
    """Run a batch of (s, r, ?) queries through the configured pipeline.

    r_idx may contain inverse relation ids (>= |R|); the semantic path maps
    them onto their base relation rows, since prompts exist only for the
    original relations. When the structural path is disabled the scores are
    taken against the adapted semantic entity table (pass it precomputed via
    `semantic_entity_table` to share work across batches).
    """
    ablation = ablation or AblationConfig()
    ablation.validate()
    dtype = model.encoder.entity_emb.dtype

    q_g = None
    if not ablation.disable_structural:
        h_g = ad.gather_rows(H_g, s_idx)
        r_g = ad.gather_rows(R_g, r_idx)
        q_g = dec.decode(model.decoder_g, h_g, r_g, train=train, gen=gen)

    if ablation.disable_semantic:
        return QueryBundle(
            q_g=q_g, q_s=None, q=q_g, q_his=None, q_nhis=None,
            alphas=None, expert_alphas=[], score_table=H_g,
        )

    base_rel = np.asarray(r_idx) % model.num_relations
    h_l = enc.adapt_rows(model.adapters, "entity", sem.entity[np.asarray(s_idx)], dtype)
    r_l = enc.adapt_rows(model.adapters, "relation", sem.relation[base_rel], dtype)
    q_s = dec.decode(model.decoder_l, h_l, r_l, train=train, gen=gen)

    if ablation.disable_structural:
        table = semantic_entity_table
        if table is None:
            table, _ = enc.adapt(sem, model.adapters, dtype)
        return QueryBundle(
            q_g=None, q_s=q_s, q=q_s, q_his=None, q_nhis=None,
            alphas=None, expert_alphas=[], score_table=table,
        )

    # gate_input is an architecture property baked in at model build time;
    # the ablation flag of the same name only selects it there
    if model.gate_input == "structural":
        gate = q_g
    elif model.gate_input == "semantic":
        gate = q_s
    else:
        gate = ad.concat([q_g, q_s], axis=-1)

    expert_alphas = []
    expert_outputs = []
    for w, b in zip(model.gates.weights, model.gates.biases):
        alpha_i, q_i = expert_mix(w, b, q_g, q_s, gate)
        expert_alphas.append(alpha_i)
        expert_outputs.append(q_i)

    if ablation.disable_prediction_expert:
        batch = q_g.shape[0] if q_g.values.ndim == 2 else 1
        flat = np.full((batch, model.num_experts), 1.0 / model.num_experts, dtype=dtype)
        alphas = Tensor(flat)  # fixed uniform weights; the sum is the plain mean
    else:
        alphas = prediction_weights(model.prediction, gate)

    q = fuse(alphas, expert_outputs, model.num_historical)
    q_his = partial_fuse(alphas, expert_outputs, "his", model.num_historical)
    q_nhis = partial_fuse(alphas, expert_outputs, "nhis", model.num_historical)
    return QueryBundle(
        q_g=q_g, q_s=q_s, q=q, q_his=q_his, q_nhis=q_nhis,
        alphas=alphas, expert_alphas=expert_alphas, score_table=H_g,
    )
