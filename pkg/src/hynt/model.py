"""The HyNT network: embeddings, encoders, context and prediction transformers, heads.

Every array follows the column layout of :mod:`hynt.autograd`: a batch of
sequences is ``(B, d, n)``. Parameters live in one flat, ordered
``name -> Tensor`` mapping so optimizers and checkpoints can treat them
uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .batching import ENTITY, NUMERIC, REL, Batch, MaskSpec, build_batch
from .kg import Discrete, EntityRef, HyperFact, Numeric

ENCODINGS = ("projection", "hadamard")
PREDICTION_HEADS = ("transformer", "linear")


@dataclass
class HyntConfig:
    dim: int = 256
    context_layers: int = 2
    context_heads: int = 4
    context_ffn: int = 512
    prediction_layers: int = 2
    prediction_heads: int = 4
    prediction_ffn: int = 512
    dropout: float = 0.1
    label_smoothing: float = 0.1
    lambda_rel: float = 1.0
    lambda_num: float = 1.0
    encoding: str = "projection"
    prediction_head: str = "transformer"
    init_std: float = 0.02
    mask_num_init: float = 0.5
    dtype: str = "float64"

    def validate(self) -> None:
        for name in ("dim", "context_heads", "context_ffn", "prediction_heads", "prediction_ffn"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("context_layers", "prediction_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.dim % self.context_heads or self.dim % self.prediction_heads:
            raise ValueError("dim must be divisible by both head counts")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.encoding not in ENCODINGS:
            raise ValueError(f"encoding must be one of {ENCODINGS}")
        if self.prediction_head not in PREDICTION_HEADS:
            raise ValueError(f"prediction_head must be one of {PREDICTION_HEADS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def scaled(cls, dim: int, **overrides) -> "HyntConfig":
        """Defaults with feed-forward widths tied to ``2 * dim``."""
        values = dict(dim=dim, context_ffn=2 * dim, prediction_ffn=2 * dim)
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "HyntConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown model keys: {sorted(unknown)}")
        defaults = cls()
        out = {}
        for k, v in values.items():
            out[k] = type(getattr(defaults, k))(v)
        return cls(**out)


def parameter_shapes(config: HyntConfig, num_entities: int, num_relations: int) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape for every learnable array."""
    d = config.dim
    shapes: dict[str, tuple[int, ...]] = {
        # last row of each table is the mask (m_ent / m_rel)
        "entity_table": (num_entities + 1, d),
        "relation_table": (num_relations + 1, d),
        "num_weight": (num_relations + 1, d),
        "num_bias": (num_relations + 1, d),
        "mask_num": (1,),
    }
    if config.encoding == "projection":
        shapes["W_tri"] = (d, 3 * d)
        shapes["W_qual"] = (d, 2 * d)
    shapes["ctx.pos_tri"] = (d, 1)
    shapes["ctx.pos_qual"] = (d, 1)
    shapes.update(_transformer_shapes("ctx", config.context_layers, d, config.context_ffn))
    if config.prediction_head == "transformer":
        for name in ("tri", "h", "r", "t", "qual", "q", "v"):
            shapes[f"pred.pos_{name}"] = (d, 1)
        shapes.update(_transformer_shapes("pred", config.prediction_layers, d, config.prediction_ffn))
    else:
        shapes["pred.W_lin_tri"] = (d, 4 * d)
        shapes["pred.b_lin_tri"] = (d, 1)
        shapes["pred.W_lin_qual"] = (d, 3 * d)
        shapes["pred.b_lin_qual"] = (d, 1)
    shapes["head.W_ent"] = (num_entities, d)
    shapes["head.b_ent"] = (num_entities,)
    shapes["head.W_rel"] = (num_relations, d)
    shapes["head.b_rel"] = (num_relations,)
    shapes["head.w_num"] = (num_relations, d)
    shapes["head.b_num"] = (num_relations,)
    return shapes


def _transformer_shapes(prefix: str, layers: int, d: int, ffn: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for l in range(layers):
        p = f"{prefix}.{l}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            out[p + name] = (d, d)
        out[p + "ln1_gain"] = (d, 1)
        out[p + "ln1_bias"] = (d, 1)
        out[p + "W1"] = (ffn, d)
        out[p + "b1"] = (ffn, 1)
        out[p + "W2"] = (d, ffn)
        out[p + "b2"] = (d, 1)
        out[p + "ln2_gain"] = (d, 1)
        out[p + "ln2_bias"] = (d, 1)
    return out


def _initial_value(name: str, shape, config: HyntConfig, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name == "mask_num":
        return np.full(shape, config.mask_num_init)
    if leaf.endswith("_gain"):
        return np.ones(shape)
    if leaf.endswith("_bias") or leaf in ("b1", "b2", "b_ent", "b_rel", "b_num", "b_lin_tri", "b_lin_qual"):
        return np.zeros(shape)
    return rng.normal(0.0, config.init_std, size=shape)


@dataclass
class Output:
    """Head outputs for one batch, each routed by the kind of its masked slot.

    ``*_rows`` are positions within the batch.
    """

    entity_rows: np.ndarray
    entity_logits: Tensor | None
    relation_rows: np.ndarray
    relation_logits: Tensor | None
    numeric_rows: np.ndarray
    numeric_pred: Tensor | None


class HyNT:
    def __init__(self, config: HyntConfig, num_entities: int, num_relations: int, seed: int = 0):
        config.validate()
        if num_entities <= 0 or num_relations <= 0:
            raise ValueError("need at least one entity and one relation")
        self.config = config
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config, num_entities, num_relations).items():
            value = _initial_value(name, shape, config, rng).astype(self.dtype)
            self.params[name] = Tensor(value, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------------
    # state
    # ------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=self.dtype)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # ------------------------------------------------------------------
    # embeddings and encodings
    # ------------------------------------------------------------------

    def embed_entities(self, ids, is_num, values, masked_num, governing) -> Tensor:
        """Embed entity slots of any index shape ``S``; returns ``S + (d,)``.

        Discrete slots read the entity table; numeric slots compute
        ``v * w_r + b_r`` for their governing relation ``r``, with ``v``
        replaced by the learnable ``m_num`` where ``masked_num`` is set.
        """
        ids = np.asarray(ids)
        is_num = np.asarray(is_num, bool)
        disc = ag.row_select(self.params["entity_table"], np.where(is_num, 0, ids))
        if not is_num.any():
            return disc
        masked_num = np.asarray(masked_num, bool)
        value = ag.add(
            np.where(masked_num, 0.0, np.asarray(values, dtype=self.dtype)).astype(self.dtype),
            ag.mul(self.params["mask_num"], masked_num.astype(self.dtype)),
        )
        value = ag.reshape(value, value.shape + (1,))
        gov = np.asarray(governing)
        num = ag.add(
            ag.mul(value, ag.row_select(self.params["num_weight"], gov)),
            ag.row_select(self.params["num_bias"], gov),
        )
        flag = is_num.astype(self.dtype)[..., None]
        if is_num.all():
            return num
        return ag.add(ag.mul(disc, 1.0 - flag), ag.mul(num, flag))

    def embed_entity(self, ref: EntityRef | None, governing_relation: int | None = None, masked: bool = False) -> Tensor:
        """Embed one entity as a length-``d`` vector.

        ``ref=None`` with ``masked=True`` yields the discrete mask ``m_ent``;
        a Numeric ref with ``masked=True`` yields ``m_num * w_r + b_r``.
        """
        if isinstance(ref, Numeric):
            if governing_relation is None:
                raise ValueError("numeric entity needs its governing relation")
            return self.embed_entities([0], [True], [ref.value], [masked], [governing_relation])[0]
        if ref is None:
            if not masked:
                raise ValueError("no entity given")
            return ag.row_select(self.params["entity_table"], [self.num_entities])[0]
        if not isinstance(ref, Discrete):
            raise TypeError(f"not an entity reference: {ref!r}")
        idx = self.num_entities if masked else ref.entity_id
        return ag.row_select(self.params["entity_table"], [idx])[0]

    def embed_relations(self, ids) -> Tensor:
        return ag.row_select(self.params["relation_table"], ids)

    def encode_triplet(self, h: Tensor, r: Tensor, t: Tensor) -> Tensor:
        """Combine column vectors ``(..., d, n)`` of head, relation and tail."""
        if self.config.encoding == "hadamard":
            return ag.mul(ag.mul(h, r), t)
        return ag.matmul(self.params["W_tri"], ag.concat_rows([h, r, t]))

    def encode_qualifier(self, q: Tensor, v: Tensor) -> Tensor:
        if self.config.encoding == "hadamard":
            return ag.mul(q, v)
        return ag.matmul(self.params["W_qual"], ag.concat_rows([q, v]))

    # ------------------------------------------------------------------
    # transformers
    # ------------------------------------------------------------------

    def _attention(self, x: Tensor, prefix: str, heads: int, key_mask: np.ndarray | None) -> Tensor:
        p = self.params
        b, d, n = x.shape
        dh = d // heads
        q = ag.reshape(ag.matmul(p[prefix + "Wq"], x), (b, heads, dh, n))
        k = ag.reshape(ag.matmul(p[prefix + "Wk"], x), (b, heads, dh, n))
        v = ag.reshape(ag.matmul(p[prefix + "Wv"], x), (b, heads, dh, n))
        # scores[i, j] = key_i . query_j; each column j is a distribution over keys i
        scores = ag.mul(ag.matmul(ag.swapaxes(k, -1, -2), q), 1.0 / math.sqrt(dh))
        mask = None if key_mask is None else key_mask[:, None, :, None]
        weights = ag.softmax_cols(scores, mask)
        out = ag.reshape(ag.matmul(v, weights), (b, d, n))
        return ag.matmul(p[prefix + "Wo"], out)

    def _block(self, x, prefix, heads, key_mask, train, rng) -> Tensor:
        p = self.params
        rate = self.config.dropout
        attn = ag.dropout(self._attention(x, prefix, heads, key_mask), rate, train, rng)
        x = ag.layer_norm(ag.add(x, attn), p[prefix + "ln1_gain"], p[prefix + "ln1_bias"])
        hidden = ag.relu(ag.add(ag.matmul(p[prefix + "W1"], x), p[prefix + "b1"]))
        ffn = ag.add(ag.matmul(p[prefix + "W2"], hidden), p[prefix + "b2"])
        ffn = ag.dropout(ffn, rate, train, rng)
        return ag.layer_norm(ag.add(x, ffn), p[prefix + "ln2_gain"], p[prefix + "ln2_bias"])

    def context_forward(
        self,
        x_tri: Tensor,
        x_qual: Tensor | None,
        qual_valid: np.ndarray | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Run the context transformer.

        ``x_tri`` is ``(B, d, 1)`` and ``x_qual`` is ``(B, d, K)`` (or None);
        ``qual_valid`` marks real qualifier columns, padding gets no attention.
        Returns ``(B, d, 1 + K)`` with the triplet in column 0.
        """
        p = self.params
        cols = [ag.add(x_tri, p["ctx.pos_tri"])]
        key_mask = None
        if x_qual is not None and x_qual.shape[-1] > 0:
            cols.append(ag.add(x_qual, p["ctx.pos_qual"]))
            if qual_valid is not None and not qual_valid.all():
                key_mask = np.concatenate([np.ones((x_tri.shape[0], 1), bool), qual_valid], axis=1)
        x = ag.concat_cols(cols) if len(cols) > 1 else cols[0]
        for l in range(self.config.context_layers):
            x = self._block(x, f"ctx.{l}.", self.config.context_heads, key_mask, train, rng)
        return x

    def prediction_forward(
        self,
        ctx: Tensor,
        components: Sequence[Tensor],
        qualifier_mode: bool,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Run the prediction transformer on ``[ctx || components]``.

        Triplet mode takes ``(h, r, t)`` and returns 4 columns; qualifier mode
        takes ``(q, v)`` and returns 3. All inputs are ``(B, d, 1)``. In the
        linear ablation the result is a single ``(B, d, 1)`` column.
        """
        expected = 2 if qualifier_mode else 3
        if len(components) != expected:
            raise ValueError(f"{'qualifier' if qualifier_mode else 'triplet'} mode takes {expected} components, got {len(components)}")
        p = self.params
        if self.config.prediction_head == "linear":
            suffix = "qual" if qualifier_mode else "tri"
            stacked = ag.concat_rows([ctx, *components])
            return ag.add(ag.matmul(p[f"pred.W_lin_{suffix}"], stacked), p[f"pred.b_lin_{suffix}"])
        names = ("qual", "q", "v") if qualifier_mode else ("tri", "h", "r", "t")
        z = ag.concat_cols([ag.add(c, p[f"pred.pos_{n}"]) for c, n in zip([ctx, *components], names)])
        for l in range(self.config.prediction_layers):
            z = self._block(z, f"pred.{l}.", self.config.prediction_heads, None, train, rng)
        return z

    # ------------------------------------------------------------------
    # heads
    # ------------------------------------------------------------------

    def entity_logits(self, m: Tensor) -> Tensor:
        return ag.add(ag.matmul(m, ag.swapaxes(self.params["head.W_ent"], 0, 1)), self.params["head.b_ent"])

    def relation_logits(self, m: Tensor) -> Tensor:
        return ag.add(ag.matmul(m, ag.swapaxes(self.params["head.W_rel"], 0, 1)), self.params["head.b_rel"])

    def numeric_value(self, m: Tensor, relations) -> Tensor:
        """``w_r . m + b_r`` per row of ``m`` (``(N, d)``), in normalized value space."""
        relations = np.asarray(relations, np.int64)
        w = ag.row_select(self.params["head.w_num"], relations)
        b = ag.getitem(self.params["head.b_num"], relations)
        return ag.add(ag.sum_axis(ag.mul(m, w), axis=-1), b)

    def entity_distribution(self, m: Tensor) -> np.ndarray:
        return ag.softmax(self.entity_logits(m), axis=-1).data

    def relation_distribution(self, m: Tensor) -> np.ndarray:
        return ag.softmax(self.relation_logits(m), axis=-1).data

    # ------------------------------------------------------------------
    # full forward
    # ------------------------------------------------------------------

    def encode_batch(self, batch: Batch):
        """Embed every slot of a batch; returns column tensors ``(B, d, 1)`` and ``(B, d, K)``."""
        b = len(batch)
        d = self.config.dim
        h = self.embed_entities(batch.head, np.zeros(b, bool), None, None, None)
        r = self.embed_relations(batch.relation)
        t = self.embed_entities(batch.tail_id, batch.tail_is_num, batch.tail_value, batch.tail_masked_num, batch.relation)
        h, r, t = (ag.reshape(x, (b, d, 1)) for x in (h, r, t))
        if batch.max_qualifiers == 0:
            return h, r, t, None, None
        q = self.embed_relations(batch.qual_relation)
        v = self.embed_entities(batch.qual_id, batch.qual_is_num, batch.qual_value, batch.qual_masked_num, batch.qual_relation)
        q, v = ag.swapaxes(q, 1, 2), ag.swapaxes(v, 1, 2)
        return h, r, t, q, v

    def forward_batch(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None) -> Output:
        h, r, t, q, v = self.encode_batch(batch)
        b = len(batch)
        x_tri = self.encode_triplet(h, r, t)
        x_qual = None if q is None else self.encode_qualifier(q, v)
        x = self.context_forward(x_tri, x_qual, batch.qual_valid, train, rng)

        if batch.qualifier_mode:
            ctx_col = batch.qual_index + 1
            ctx = ag.reshape(ag.take_cols(x, ctx_col), (b, -1, 1))
            comps = [ag.reshape(ag.take_cols(q, batch.qual_index), (b, -1, 1)),
                     ag.reshape(ag.take_cols(v, batch.qual_index), (b, -1, 1))]
        else:
            ctx = ag.getitem(x, (slice(None), slice(None), slice(0, 1)))
            comps = [h, r, t]
        z = self.prediction_forward(ctx, comps, batch.qualifier_mode, train, rng)
        if z.shape[-1] == 1:
            m = ag.reshape(z, (b, -1))
        else:
            m = ag.take_cols(z, batch.read_column)
        return self.apply_heads(m, batch)

    def apply_heads(self, m: Tensor, batch: Batch) -> Output:
        rows = {kd: np.flatnonzero(batch.kind == kd) for kd in (ENTITY, REL, NUMERIC)}

        def pick(kd):
            idx = rows[kd]
            return None if idx.size == 0 else ag.getitem(m, idx)

        me, mr, mn = pick(ENTITY), pick(REL), pick(NUMERIC)
        return Output(
            entity_rows=rows[ENTITY],
            entity_logits=None if me is None else self.entity_logits(me),
            relation_rows=rows[REL],
            relation_logits=None if mr is None else self.relation_logits(mr),
            numeric_rows=rows[NUMERIC],
            numeric_pred=None if mn is None else self.numeric_value(mn, batch.numeric_relation[rows[NUMERIC]]),
        )

    def forward_fact(self, fact: HyperFact, mask: MaskSpec, train: bool = False, rng: np.random.Generator | None = None):
        """Predict the masked slot of one fact.

        Returns a probability vector over entities or relations, or a
        normalized-space numeric value.
        """
        batch = build_batch([fact], [mask], self.num_entities, self.num_relations)
        out = self.forward_batch(batch, train, rng)
        if out.entity_logits is not None:
            return ag.softmax(out.entity_logits, axis=-1).data[0]
        if out.relation_logits is not None:
            return ag.softmax(out.relation_logits, axis=-1).data[0]
        return float(out.numeric_pred.data[0])
