import numpy as np
import pytest

from hynt import autograd as ag
from hynt.autograd import Tensor
from hynt.batching import HEAD, QUAL_RELATION, QUAL_VALUE, RELATION, TAIL, MaskSpec, build_batch
from hynt.kg import Discrete, Numeric, make_fact
from hynt.model import HyNT, HyntConfig, parameter_shapes

N_ENT, N_REL = 6, 4


def small_config(**kw):
    values = dict(dim=8, context_layers=1, prediction_layers=1, context_heads=2, prediction_heads=2,
                  context_ffn=16, prediction_ffn=16, init_std=0.3)
    values.update(kw)
    return HyntConfig(**values)


@pytest.fixture
def model():
    return HyNT(small_config(), N_ENT, N_REL, seed=0)


FACT = make_fact(0, 1, 2, [(2, Discrete(3)), (3, Numeric(0.4)), (0, Discrete(5))])


class TestConfig:
    def test_bad_heads(self):
        with pytest.raises(ValueError):
            HyntConfig(dim=10, context_heads=4).validate()

    def test_round_trip(self):
        cfg = small_config(encoding="hadamard")
        assert HyntConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            HyntConfig.from_dict({"width": 3})

    def test_linear_head_has_no_prediction_transformer(self):
        shapes = parameter_shapes(small_config(prediction_head="linear"), N_ENT, N_REL)
        assert not any(k.startswith("pred.0.") for k in shapes)
        assert shapes["pred.W_lin_tri"] == (8, 32)

    def test_hadamard_has_no_projections(self):
        shapes = parameter_shapes(small_config(encoding="hadamard"), N_ENT, N_REL)
        assert "W_tri" not in shapes and "W_qual" not in shapes


class TestEmbedding:
    def test_affine_numeric_embedding(self, model):
        w = model["num_weight"].data[2]
        b = model["num_bias"].data[2]
        got = model.embed_entity(Numeric(0.25), governing_relation=2).data
        np.testing.assert_allclose(got, 0.25 * w + b, rtol=0, atol=1e-15)

    def test_affine_combination_law(self, model):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r = int(rng.integers(N_REL))
            v1, v2, a = rng.normal(size=3)
            lhs = model.embed_entity(Numeric(a * v1 + (1 - a) * v2), r).data
            rhs = a * model.embed_entity(Numeric(v1), r).data + (1 - a) * model.embed_entity(Numeric(v2), r).data
            np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_masked_numeric_uses_mask_value(self, model):
        got = model.embed_entity(Numeric(123.0), governing_relation=1, masked=True).data
        expected = model["mask_num"].data[0] * model["num_weight"].data[1] + model["num_bias"].data[1]
        np.testing.assert_allclose(got, expected, atol=1e-15)

    def test_discrete_mask_row(self, model):
        got = model.embed_entity(None, masked=True).data
        np.testing.assert_array_equal(got, model["entity_table"].data[N_ENT])

    def test_numeric_without_relation(self, model):
        with pytest.raises(ValueError):
            model.embed_entity(Numeric(1.0))

    def test_encodings(self):
        rng = np.random.default_rng(2)
        h, r, t = (Tensor(rng.normal(size=(1, 8, 1))) for _ in range(3))
        had = HyNT(small_config(encoding="hadamard"), N_ENT, N_REL)
        np.testing.assert_allclose(had.encode_triplet(h, r, t).data, h.data * r.data * t.data, atol=1e-15)
        proj = HyNT(small_config(), N_ENT, N_REL)
        stacked = np.concatenate([h.data, r.data, t.data], axis=1)[0]
        np.testing.assert_allclose(proj.encode_triplet(h, r, t).data[0], proj["W_tri"].data @ stacked, atol=1e-14)


class TestContextTransformer:
    def test_permutation_equivariance(self, model):
        rng = np.random.default_rng(3)
        x_tri = Tensor(rng.normal(size=(1, 8, 1)))
        x_qual = rng.normal(size=(1, 8, 4))
        perm = np.array([2, 0, 3, 1])
        a = model.context_forward(x_tri, Tensor(x_qual)).data
        b = model.context_forward(x_tri, Tensor(x_qual[:, :, perm])).data
        np.testing.assert_allclose(b[:, :, 0], a[:, :, 0], atol=1e-12)
        np.testing.assert_allclose(b[:, :, 1:], a[:, :, 1:][:, :, perm], atol=1e-12)

    def test_padding_is_neutral(self, model):
        rng = np.random.default_rng(4)
        x_tri = Tensor(rng.normal(size=(1, 8, 1)))
        x_qual = rng.normal(size=(1, 8, 2))
        padded = np.concatenate([x_qual, rng.normal(size=(1, 8, 3))], axis=2)
        valid = np.array([[True, True, False, False, False]])
        a = model.context_forward(x_tri, Tensor(x_qual)).data
        b = model.context_forward(x_tri, Tensor(padded), valid).data
        np.testing.assert_allclose(b[:, :, :3], a, atol=1e-12)

    def test_output_shape(self, model):
        out = model.context_forward(Tensor(np.zeros((3, 8, 1))), Tensor(np.zeros((3, 8, 2))))
        assert out.shape == (3, 8, 3)

    def test_zero_weights_degenerate_to_layer_norm_bias(self):
        m = HyNT(small_config(), N_ENT, N_REL)
        for name, p in m.params.items():
            if name.startswith("ctx.0.") and not name.endswith("_gain"):
                p.data[...] = 0.0
        m["ctx.0.ln2_bias"].data[...] = 0.7
        out = m.context_forward(Tensor(np.random.default_rng(0).normal(size=(1, 8, 1))), None).data
        # attention and FFN contribute nothing; the normalized input is
        # scaled by gain 1 and shifted by bias, so the output is not constant,
        # but its column mean equals the bias
        np.testing.assert_allclose(out.mean(axis=1), 0.7, atol=1e-12)


class TestPredictionTransformer:
    def test_column_counts(self, model):
        ctx = Tensor(np.zeros((2, 8, 1)))
        c = Tensor(np.zeros((2, 8, 1)))
        assert model.prediction_forward(ctx, [c, c, c], False).shape == (2, 8, 4)
        assert model.prediction_forward(ctx, [c, c], True).shape == (2, 8, 3)

    def test_wrong_component_count(self, model):
        ctx = Tensor(np.zeros((1, 8, 1)))
        with pytest.raises(ValueError):
            model.prediction_forward(ctx, [ctx, ctx], False)

    def test_linear_variant_single_column(self):
        m = HyNT(small_config(prediction_head="linear"), N_ENT, N_REL)
        ctx = Tensor(np.ones((2, 8, 1)))
        assert m.prediction_forward(ctx, [ctx, ctx, ctx], False).shape == (2, 8, 1)


class TestHeads:
    @pytest.mark.parametrize(
        "mask,expected",
        [
            (MaskSpec(HEAD), N_ENT),
            (MaskSpec(RELATION), N_REL),
            (MaskSpec(TAIL), N_ENT),
            (MaskSpec(QUAL_RELATION, 0), N_REL),
            (MaskSpec(QUAL_VALUE, 0), N_ENT),
        ],
    )
    def test_distributions(self, model, mask, expected):
        probs = model.forward_fact(FACT, mask)
        assert probs.shape == (expected,)
        assert abs(probs.sum() - 1.0) < 1e-12 and (probs > 0).all()

    def test_numeric_slot_returns_scalar(self, model):
        assert isinstance(model.forward_fact(FACT, MaskSpec(QUAL_VALUE, 1)), float)

    def test_numeric_head_formula(self, model):
        m = Tensor(np.random.default_rng(5).normal(size=(1, 8)))
        got = model.numeric_value(m, [3]).data[0]
        expected = model["head.w_num"].data[3] @ m.data[0] + model["head.b_num"].data[3]
        assert abs(got - expected) < 1e-14

    def test_eval_is_deterministic(self, model):
        a = model.forward_fact(FACT, MaskSpec(TAIL))
        b = model.forward_fact(FACT, MaskSpec(TAIL))
        np.testing.assert_array_equal(a, b)

    def test_masked_value_does_not_leak(self, model):
        other = make_fact(0, 1, 2, [(2, Discrete(3)), (3, Numeric(99.0)), (0, Discrete(5))])
        assert model.forward_fact(FACT, MaskSpec(QUAL_VALUE, 1)) == model.forward_fact(other, MaskSpec(QUAL_VALUE, 1))

    def test_masked_entity_does_not_leak(self, model):
        other = make_fact(4, 1, 2, list((q.relation_id, q.value) for q in FACT.qualifiers))
        np.testing.assert_array_equal(model.forward_fact(FACT, MaskSpec(HEAD)), model.forward_fact(other, MaskSpec(HEAD)))

    def test_batch_matches_single(self, model):
        facts = [FACT, make_fact(1, 0, 3), make_fact(2, 2, Numeric(0.1), [(1, Discrete(1))])]
        masks = [MaskSpec(TAIL), MaskSpec(HEAD), MaskSpec(TAIL)]
        out = model.forward_batch(build_batch(facts, masks, N_ENT, N_REL))
        single = [model.forward_fact(f, m) for f, m in zip(facts, masks)]
        probs = ag.softmax(out.entity_logits, axis=-1).data
        np.testing.assert_allclose(probs[0], single[0], atol=1e-12)
        np.testing.assert_allclose(probs[1], single[1], atol=1e-12)
        assert abs(out.numeric_pred.data[0] - single[2]) < 1e-12


class TestState:
    def test_state_round_trip(self, model):
        other = HyNT(small_config(), N_ENT, N_REL, seed=9)
        other.load_state_dict(model.state_dict())
        np.testing.assert_array_equal(other.forward_fact(FACT, MaskSpec(TAIL)), model.forward_fact(FACT, MaskSpec(TAIL)))

    def test_state_mismatch(self, model):
        state = model.state_dict()
        del state["mask_num"]
        with pytest.raises(KeyError):
            model.load_state_dict(state)

    def test_seeded_init(self):
        a = HyNT(small_config(), N_ENT, N_REL, seed=4).state_dict()
        b = HyNT(small_config(), N_ENT, N_REL, seed=4).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_float32(self):
        m = HyNT(small_config(dtype="float32"), N_ENT, N_REL)
        assert m.forward_fact(FACT, MaskSpec(TAIL)).dtype == np.float32
