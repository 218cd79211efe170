"""Feature encoders: the structural path and the semantic path.

Structural path: a recurrent relational graph encoder. For each snapshot
in a sliding history window, entity rows aggregate incoming-edge messages
(neighbor plus relation embedding, mean over in-edges, learned transform
plus self-loop transform) through L layers, then entity and relation
tables evolve via gated recurrent cells. Encoding at time t reads only
snapshots strictly before t.

Semantic path: prompts rendered per entity/relation name are handed to an
external text encoder offline; its output embeddings come back through a
small file format ingested here (or a deterministic synthetic stand-in
for tests), then two adapter perceptrons compress the wide rows down to
the working dimension.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .tkg import DatasetError, TemporalKG, Vocabulary


# ---------------------------------------------------------------------------
# gated recurrent cell

@dataclass
class GruParams:
    """Packed cell weights; gate order along the last axis: update, reset, candidate.

    Candidate uses the reset gate on the hidden contribution:
    n = tanh(x W_n + z_r * (h U_n) + b_n).
    """

    wx: Tensor  # (in_dim, 3*hidden)
    wh: Tensor  # (hidden, 3*hidden)
    b: Tensor   # (3*hidden,)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}


def init_gru(in_dim: int, hidden: int, gen: np.random.Generator, dtype=np.float32) -> GruParams:
    bx = (6.0 / (in_dim + 3 * hidden)) ** 0.5
    bh = (6.0 / (hidden + 3 * hidden)) ** 0.5
    return GruParams(
        wx=ad.param(gen.uniform(-bx, bx, (in_dim, 3 * hidden)), dtype=dtype),
        wh=ad.param(gen.uniform(-bh, bh, (hidden, 3 * hidden)), dtype=dtype),
        b=ad.param(np.zeros(3 * hidden, dtype=dtype)),
    )


def gru_cell(params: GruParams, x: Tensor, h: Tensor) -> Tensor:
    d = params.hidden
    xa = ad.matmul(x, params.wx)
    ha = ad.matmul(h, params.wh)
    z = ad.sigmoid(ad.add(ad.add(ad.slice_last(xa, 0, d), ad.slice_last(ha, 0, d)),
                          ad.slice_last(params.b, 0, d)))
    r = ad.sigmoid(ad.add(ad.add(ad.slice_last(xa, d, 2 * d), ad.slice_last(ha, d, 2 * d)),
                          ad.slice_last(params.b, d, 2 * d)))
    n = ad.tanh(ad.add(ad.add(ad.slice_last(xa, 2 * d, 3 * d),
                              ad.mul(r, ad.slice_last(ha, 2 * d, 3 * d))),
                       ad.slice_last(params.b, 2 * d, 3 * d)))
    one_minus_z = ad.shift(ad.neg(z), 1.0)
    return ad.add(ad.mul(one_minus_z, n), ad.mul(z, h))


# ---------------------------------------------------------------------------
# structural encoder

@dataclass
class StructuralEncoderParams:
    entity_emb: Tensor    # (|E|, d)
    relation_emb: Tensor  # (2|R|, d)
    layer_agg: list       # L x Tensor (d, d)
    layer_self: list      # L x Tensor (d, d)
    ent_cell: GruParams   # input d, hidden d
    rel_cell: GruParams   # input 2d, hidden d
    window: int = 3
    dropout: float = 0.2

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "encoder.entity_emb": self.entity_emb,
            "encoder.relation_emb": self.relation_emb,
        }
        for i, (wa, ws) in enumerate(zip(self.layer_agg, self.layer_self)):
            out[f"encoder.layer{i}.agg"] = wa
            out[f"encoder.layer{i}.self"] = ws
        out.update(self.ent_cell.named_parameters("encoder.ent_cell"))
        out.update(self.rel_cell.named_parameters("encoder.rel_cell"))
        return out


def init_structural_encoder(num_entities: int, num_relations_aug: int, dim: int,
                            layers: int, window: int, dropout: float,
                            gen: np.random.Generator, dtype=np.float32) -> StructuralEncoderParams:
    emb_bound = (1.0 / dim) ** 0.5
    w_bound = (6.0 / (2 * dim)) ** 0.5
    return StructuralEncoderParams(
        entity_emb=ad.param(gen.uniform(-emb_bound, emb_bound, (num_entities, dim)), dtype=dtype),
        relation_emb=ad.param(gen.uniform(-emb_bound, emb_bound, (num_relations_aug, dim)), dtype=dtype),
        layer_agg=[ad.param(gen.uniform(-w_bound, w_bound, (dim, dim)), dtype=dtype) for _ in range(layers)],
        layer_self=[ad.param(gen.uniform(-w_bound, w_bound, (dim, dim)), dtype=dtype) for _ in range(layers)],
        ent_cell=init_gru(dim, dim, gen, dtype),
        rel_cell=init_gru(2 * dim, dim, gen, dtype),
        window=window,
        dropout=dropout,
    )


def snapshot_edges(tkg: TemporalKG) -> list:
    """Per-timestamp (subject, relation, object) index arrays."""
    out = []
    for snap in tkg.snapshots:
        if snap:
            arr = np.array([(q.s, q.r, q.o) for q in snap], dtype=np.int64)
            out.append((arr[:, 0], arr[:, 1], arr[:, 2]))
        else:
            out.append(None)
    return out


def encode_structural(params: StructuralEncoderParams, edges: list, t: int,
                      window: int | None = None, *, train: bool = False,
                      gen: np.random.Generator | None = None):
    """Entity and relation tables conditioned on the last `window` snapshots
    strictly before t.

    With no history (t = 0 or window 0) the initial embedding tables are
    returned as-is.
    """
    if t < 0 or t > len(edges):
        raise ValueError(f"timestamp {t} outside the available history (0..{len(edges)})")
    m = params.window if window is None else window
    num_entities = params.entity_emb.shape[0]
    num_relations = params.relation_emb.shape[0]
    dtype = params.entity_emb.dtype

    H = params.entity_emb
    R = params.relation_emb
    for k in range(max(0, t - m), t):
        snap = edges[k]
        if snap is None:
            s_idx = r_idx = o_idx = np.empty(0, dtype=np.int64)
        else:
            s_idx, r_idx, o_idx = snap

        # relation evolution: previous rows joined with the mean embedding of
        # entities adjacent to each relation in this snapshot (zero if unused)
        both_ends = ad.concat([ad.gather_rows(H, s_idx), ad.gather_rows(H, o_idx)], axis=0)
        rel_idx2 = np.concatenate([r_idx, r_idx])
        pooled_sum = ad.scatter_add_rows(both_ends, rel_idx2, num_relations)
        rel_deg = np.bincount(rel_idx2, minlength=num_relations).astype(dtype)
        rel_inv = np.divide(1.0, rel_deg, out=np.zeros_like(rel_deg), where=rel_deg > 0)
        pooled = ad.mul(pooled_sum, Tensor(rel_inv[:, None]))
        R_new = gru_cell(params.rel_cell, ad.concat([R, pooled], axis=1), R)

        # L aggregation layers over the snapshot, messages use the tables as
        # they stood at the start of this step
        in_deg = np.bincount(o_idx, minlength=num_entities).astype(dtype)
        inv_deg = np.divide(1.0, in_deg, out=np.zeros_like(in_deg), where=in_deg > 0)
        inv_deg_t = Tensor(inv_deg[:, None])
        X = H
        for wa, ws in zip(params.layer_agg, params.layer_self):
            msg = ad.add(ad.gather_rows(X, s_idx), ad.gather_rows(R, r_idx))
            agg = ad.mul(ad.scatter_add_rows(msg, o_idx, num_entities), inv_deg_t)
            out = ad.add(ad.matmul(agg, wa), ad.matmul(X, ws))
            X = ad.dropout(ad.rrelu(out), params.dropout, gen, train)

        H = gru_cell(params.ent_cell, X, H)
        R = R_new
    return H, R


def l2_normalize_rows(values: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Unit-length rows, for inspection and similarity probes (not autodiff)."""
    norms = np.sqrt((values * values).sum(axis=-1, keepdims=True))
    return values / np.maximum(norms, eps)


# ---------------------------------------------------------------------------
# prompt emission

ENTITY_TEMPLATE = (
    "In the context of <DATA DOMAIN>, please provide <DATA TYPE> background about <ENTITY>."
)
RELATION_TEMPLATE = (
    "In the context of <DATA DOMAIN>, what are the <DATA TYPE> perspectives "
    "through which we can understand the <RELATION>?"
)


@dataclass
class PromptTemplate:
    domain: str
    datatype: str
    entity_template: str = ENTITY_TEMPLATE
    relation_template: str = RELATION_TEMPLATE

    def validate(self) -> None:
        for tpl, hole in ((self.entity_template, "<ENTITY>"), (self.relation_template, "<RELATION>")):
            for needed in ("<DATA DOMAIN>", "<DATA TYPE>", hole):
                if needed not in tpl:
                    raise ValueError(f"template is missing the {needed} placeholder")

    def render_entity(self, name: str) -> str:
        return (self.entity_template
                .replace("<DATA DOMAIN>", self.domain)
                .replace("<DATA TYPE>", self.datatype)
                .replace("<ENTITY>", name))

    def render_relation(self, name: str) -> str:
        return (self.relation_template
                .replace("<DATA DOMAIN>", self.domain)
                .replace("<DATA TYPE>", self.datatype)
                .replace("<RELATION>", name))


def emit_prompts(vocab: Vocabulary, template: PromptTemplate, path: str) -> int:
    """Write `kind<TAB>id<TAB>prompt` lines, entities first. Returns line count."""
    template.validate()
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(vocab.entity_names):
            fh.write(f"E\t{i}\t{template.render_entity(name)}\n")
            n += 1
        for i, name in enumerate(vocab.relation_names):
            fh.write(f"R\t{i}\t{template.render_relation(name)}\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# semantic embedding tables

class EmbeddingFormatError(DatasetError):
    """Embedding file violates its declared header or row format."""


class EmbeddingCoverageError(DatasetError):
    """Embedding file does not cover the vocabulary."""


MAGIC = "tkg-emb"
FORMAT_VERSION = 1


@dataclass
class SemanticEmbeddingTable:
    entity: np.ndarray    # (|E|, dim) float32
    relation: np.ndarray  # (|R|, dim) float32
    dim: int
    source: str

    def __post_init__(self):
        if not (np.all(np.isfinite(self.entity)) and np.all(np.isfinite(self.relation))):
            raise EmbeddingFormatError(f"non-finite embedding values from {self.source}")


def synthetic_embeddings(vocab: Vocabulary, dim: int, seed: int) -> SemanticEmbeddingTable:
    """Unit-variance pseudo-normal rows, each determined solely by
    (seed, kind, id); a stand-in for text-encoder hidden states."""
    if dim < 1:
        raise ValueError("embedding dimension must be >= 1")

    def rows(kind_domain, count):
        return np.stack(
            [rng.stream(seed, kind_domain, i).standard_normal(dim) for i in range(count)]
        ).astype(np.float32) if count else np.zeros((0, dim), dtype=np.float32)

    return SemanticEmbeddingTable(
        entity=rows(rng.SYNTH_ENTITY, vocab.num_entities),
        relation=rows(rng.SYNTH_RELATION, vocab.num_relations),
        dim=dim,
        source=f"synthetic:{seed}",
    )


def save_semantic_embeddings(path: str, table: SemanticEmbeddingTable, binary: bool = False) -> None:
    rows = table.entity.shape[0] + table.relation.shape[0]
    header = f"{MAGIC} {FORMAT_VERSION} {rows} {table.dim}\n"
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(table.entity, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(table.relation, dtype="<f4").tobytes())
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header)
        for kind, block in (("E", table.entity), ("R", table.relation)):
            for i, row in enumerate(block):
                # 9 significant digits round-trip binary32 exactly
                fh.write(f"{kind}\t{i}\t" + " ".join(f"{v:.9g}" for v in row) + "\n")


def load_semantic_embeddings(path: str, vocab: Vocabulary) -> SemanticEmbeddingTable:
    """Read a table in the text or binary layout; every id must be covered."""
    if not os.path.isfile(path):
        raise EmbeddingFormatError(f"missing embedding file: {path}")
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 4 or parts[0] != MAGIC:
            raise EmbeddingFormatError(f"{path}: bad header {header!r}")
        version, rows, dim = int(parts[1]), int(parts[2]), int(parts[3])
        if version != FORMAT_VERSION:
            raise EmbeddingFormatError(f"{path}: unsupported format version {version}")
        body = fh.read()

    expected_rows = vocab.num_entities + vocab.num_relations
    if rows != expected_rows:
        raise EmbeddingCoverageError(
            f"{path}: header declares {rows} rows, vocabulary needs {expected_rows}"
        )
    if len(body) == rows * dim * 4 and not body.startswith((b"E\t", b"R\t")):
        flat = np.frombuffer(body, dtype="<f4").reshape(rows, dim)
        entity = flat[: vocab.num_entities].copy()
        relation = flat[vocab.num_entities:].copy()
        return SemanticEmbeddingTable(entity, relation, dim, source=path)

    entity = np.full((vocab.num_entities, dim), np.nan, dtype=np.float32)
    relation = np.full((vocab.num_relations, dim), np.nan, dtype=np.float32)
    seen = {"E": set(), "R": set()}
    text = io.StringIO(body.decode("utf-8"))
    for lineno, line in enumerate(text, start=2):
        line = line.rstrip("\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[0] not in ("E", "R"):
            raise EmbeddingFormatError(f"{path}:{lineno}: expected `E|R<TAB>id<TAB>values`")
        kind, idx_s, vals = fields
        idx = int(idx_s)
        try:
            row = np.array(vals.split(), dtype=np.float32)
        except ValueError:
            raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric embedding value")
        if row.shape[0] != dim:
            raise EmbeddingFormatError(
                f"{path}:{lineno}: row has {row.shape[0]} values, header declares {dim}"
            )
        target = entity if kind == "E" else relation
        if idx < 0 or idx >= target.shape[0]:
            raise EmbeddingCoverageError(f"{path}:{lineno}: {kind} id {idx} outside vocabulary")
        target[idx] = row
        seen[kind].add(idx)
    missing_e = sorted(set(range(vocab.num_entities)) - seen["E"])
    missing_r = sorted(set(range(vocab.num_relations)) - seen["R"])
    if missing_e or missing_r:
        raise EmbeddingCoverageError(
            f"{path}: missing entity ids {missing_e[:10]} and relation ids {missing_r[:10]}"
        )
    return SemanticEmbeddingTable(entity, relation, dim, source=path)


# ---------------------------------------------------------------------------
# adapters

@dataclass
class MlpParams:
    w1: Tensor  # (in_dim, mid)
    b1: Tensor  # (mid,)
    w2: Tensor  # (mid, out_dim)
    b2: Tensor  # (out_dim,)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class AdapterParams:
    f_h: MlpParams
    f_r: MlpParams

    @property
    def in_dim(self) -> int:
        return self.f_h.w1.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.f_h.named_parameters("adapter.f_h")
        out.update(self.f_r.named_parameters("adapter.f_r"))
        return out


def _init_mlp(in_dim, mid, out_dim, gen, dtype) -> MlpParams:
    b1 = (6.0 / (in_dim + mid)) ** 0.5
    b2 = (6.0 / (mid + out_dim)) ** 0.5
    return MlpParams(
        w1=ad.param(gen.uniform(-b1, b1, (in_dim, mid)), dtype=dtype),
        b1=ad.param(np.zeros(mid, dtype=dtype)),
        w2=ad.param(gen.uniform(-b2, b2, (mid, out_dim)), dtype=dtype),
        b2=ad.param(np.zeros(out_dim, dtype=dtype)),
    )


def init_adapters(llm_dim: int, mid: int, dim: int, gen: np.random.Generator,
                  dtype=np.float32) -> AdapterParams:
    return AdapterParams(
        f_h=_init_mlp(llm_dim, mid, dim, gen, dtype),
        f_r=_init_mlp(llm_dim, mid, dim, gen, dtype),
    )


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, params.w1), params.b1))
    return ad.add(ad.matmul(hidden, params.w2), params.b2)


def adapt(table: SemanticEmbeddingTable, params: AdapterParams, dtype=np.float32):
    """Compress the full wide tables to the working dimension; differentiable."""
    if table.dim != params.in_dim:
        raise ValueError(f"adapter expects input dim {params.in_dim}, table has {table.dim}")
    h_l = mlp_forward(params.f_h, Tensor(table.entity.astype(dtype)))
    r_l = mlp_forward(params.f_r, Tensor(table.relation.astype(dtype)))
    return h_l, r_l


def adapt_rows(params: AdapterParams, which: str, rows: np.ndarray, dtype=np.float32) -> Tensor:
    """Compress only the rows a batch needs (same math as `adapt`)."""
    mlp = params.f_h if which == "entity" else params.f_r
    if rows.shape[-1] != params.in_dim:
        raise ValueError(f"adapter expects input dim {params.in_dim}, rows have {rows.shape[-1]}")
    return mlp_forward(mlp, Tensor(rows.astype(dtype)))
