import numpy as np
import pytest

from csrs import tensor as T
from csrs.corpus import PAD, LengthConfig
from csrs.encoder import embed_field, encode_field, ngram_encode
from csrs.model import (
    VARIANTS, Batch, CsrsModel, ModelConfig, load_checkpoint, read_manifest, variant_config,
)

SMALL = LengthConfig(description=4, name=2, api=3, tokens=4)


def small_config(**kw):
    base = dict(code_vocab_size=20, desc_vocab_size=15, dim=4, hidden=6, lengths=SMALL,
                dtype="float64", dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_ids(rng, n, length, vocab, distinct=True):
    out = np.zeros((n, length), dtype=np.int64)
    for row in out:
        k = rng.integers(1, length + 1)
        row[:k] = rng.choice(np.arange(2, vocab), size=k, replace=not distinct)
    return out


def random_batch(rng, n=3, lengths=SMALL, code_vocab=20, desc_vocab=15):
    return Batch(random_ids(rng, n, lengths.description, desc_vocab),
                 random_ids(rng, n, lengths.name, code_vocab),
                 random_ids(rng, n, lengths.api, code_vocab),
                 random_ids(rng, n, lengths.tokens, code_vocab),
                 rng.integers(0, 2, size=n))


class TestEncoder:
    def test_all_pad_embeds_to_pad_rows(self):
        table = T.Tensor(np.random.default_rng(0).normal(size=(5, 3)))
        E = embed_field(table, np.zeros(4, dtype=np.int64))
        np.testing.assert_array_equal(E.data, np.repeat(table.data[:1], 4, axis=0))

    def test_lookup_equals_gather_and_changes_one_row(self):
        rng = np.random.default_rng(1)
        table = T.Tensor(rng.normal(size=(9, 3)))
        ids = np.array([3, 5, 2, 8])
        np.testing.assert_array_equal(embed_field(table, ids).data, table.data[ids])
        ids2 = ids.copy()
        ids2[2] = 7
        diff = np.any(embed_field(table, ids).data != embed_field(table, ids2).data, axis=1)
        assert diff.tolist() == [False, False, True, False]

    def test_out_of_range_rejected(self):
        with pytest.raises(IndexError):
            embed_field(T.Tensor(np.zeros((3, 2))), np.array([4]))

    def test_ngram_shapes_and_zero_filters(self):
        E = T.Tensor(np.random.default_rng(2).normal(size=(1, 3)))
        convs = {h: (np.zeros((h, 3, 3)), np.zeros(3)) for h in (1, 2, 3)}
        out, mask = ngram_encode(E, np.array([True]), convs)
        assert out.shape == (3, 3) and mask.tolist() == [True] * 3
        assert np.all(out.data == 0)

    def test_width_one_block_equals_standalone_conv(self):
        rng = np.random.default_rng(3)
        model = CsrsModel(small_config(), seed=0)
        ids = np.array([4, 2, 9, 0])
        out, mask = encode_field(model.params, "tokens", ids)
        E = embed_field(model.params["emb_code"], ids, ids != PAD)
        alone = T.conv1d_same(E, model.params["conv_tokens_1_w"], model.params["conv_tokens_1_b"])
        np.testing.assert_array_equal(out.data[:4][mask[:4]], alone.data[mask[:4]])
        assert mask.tolist() == [True, True, True, False] * 3
        del rng

    def test_default_shape_law(self):
        config = ModelConfig(code_vocab_size=50, desc_vocab_size=40, dtype="float32")
        assert config.code_length == 258
        assert config.desc_length == 90
        model = CsrsModel(config, seed=0)
        rng = np.random.default_rng(4)
        L = config.lengths
        batch = random_batch(rng, 2, L, 50, 40)
        D, mD = model.encode_description(batch.desc)
        C, mC = model.encode_code({f: batch.code(f) for f in config.fields})
        assert D.shape == (2, 90, 100) and C.shape == (2, 258, 100)
        assert mD.shape == (2, 90) and mC.shape == (2, 258)
        assert np.all(np.isfinite(C.data))

    def test_filter_bank_count(self):
        shapes = small_config().parameter_shapes()
        assert sum(1 for k in shapes if k.startswith("conv_") and k.endswith("_w")) == 12

    def test_width_one_block_permutation_locality(self):
        model = CsrsModel(small_config(), seed=1)
        ids = np.array([3, 7, 5, 9])
        swapped = np.array([7, 3, 5, 9])
        a, _ = encode_field(model.params, "tokens", ids)
        b, _ = encode_field(model.params, "tokens", swapped)
        np.testing.assert_array_equal(a.data[[1, 0, 2, 3]], b.data[:4])

    def test_all_pad_description_rejected(self):
        model = CsrsModel(small_config(), seed=0)
        with pytest.raises(ValueError, match="padding"):
            model.encode_description(np.zeros((1, 4), dtype=np.int64))

    def test_description_gradient_wrt_embeddings(self):
        rng = np.random.default_rng(5)
        model = CsrsModel(small_config(), seed=2)
        table = model.params["emb_desc"]
        table.data[...] = rng.normal(size=table.shape)
        ids = np.array([[3, 4, 7, 0]])
        probe = rng.normal(size=(12, 4))

        def f():
            D, _ = model.encode_description(ids)
            return T.cross_entropy(T.matmul(T.reshape(D, (1, 48)), np.tile(probe.reshape(48, 1), (1, 2)) *
                                            np.array([1.0, -0.5])), np.array([1]))

        table.grad = None
        f().backward()
        rows = [3, 4, 7]
        fd = T.numerical_grad(lambda: f().data, table.data).reshape(table.shape)
        np.testing.assert_allclose(table.grad[rows], fd[rows], rtol=1e-5, atol=1e-9)
        assert np.all(table.grad[0] == 0)


class TestModel:
    def test_probability_range_and_determinism(self):
        rng = np.random.default_rng(6)
        model = CsrsModel(small_config(dtype="float32", dropout=0.25), seed=3)
        batch = random_batch(rng, 5)
        p1, l1 = model.score(batch)
        p2, l2 = model.score(batch)
        assert np.all((p1 > 0) & (p1 < 1))
        np.testing.assert_array_equal(l1, l2)

    def test_score_pair_matches_batch(self):
        rng = np.random.default_rng(7)
        model = CsrsModel(small_config(), seed=4)
        batch = random_batch(rng, 1)
        from csrs.corpus import EncodedPair
        pair = EncodedPair(batch.desc[0], batch.name[0], batch.api[0], batch.tokens[0], 1)
        p, logits = model.score_pair(pair)
        np.testing.assert_allclose(logits, model.score(batch)[1][0])
        assert 0 < p < 1

    def test_pad_perturbation_invariance(self):
        rng = np.random.default_rng(8)
        config = small_config(dtype="float32")
        model = CsrsModel(config, seed=5)
        batch = random_batch(rng, 4)
        masks = {"description": batch.desc != PAD, "name": batch.name != PAD,
                 "api": batch.api != PAD, "tokens": batch.tokens != PAD}
        with T.no_grad():
            base = model.forward(batch, masks=masks).data
            noisy = Batch(*(np.where(getattr(batch, k) == PAD, rng.integers(2, v, getattr(batch, k).shape),
                                     getattr(batch, k))
                            for k, v in (("desc", 15), ("name", 20), ("api", 20), ("tokens", 20))),
                          labels=batch.labels)
            perturbed = model.forward(noisy, masks=masks).data
        assert np.array_equal(base, perturbed)
        # the PAD embedding row itself never matters either
        model.params["emb_code"].data[PAD] += 10.0
        model.params["emb_desc"].data[PAD] -= 3.0
        with T.no_grad():
            assert np.array_equal(base, model.forward(batch).data)

    def test_every_parameter_gets_gradient(self):
        rng = np.random.default_rng(9)
        model = CsrsModel(small_config(), seed=6)
        for p in model.params.values():
            p.data[...] = rng.normal(0, 0.7, p.shape)
        batch = random_batch(rng, 4)
        batch.labels[:] = [1, 0, 1, 0]
        model.loss(batch, train=False).backward()
        for name, p in model.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_scorer_width_arithmetic(self):
        c = small_config()
        n = 3 * (4 + 2 + 3)
        assert c.scorer_input == 2 * n + 2 * 4
        assert variant_config(c, "RM").scorer_input == 2 * n
        assert variant_config(c, "SM").scorer_input == 2 * 4
        assert variant_config(c, "Conv1").scorer_input == 2 * (4 + 2 + 3) + 2 * 4
        assert variant_config(c, "M").scorer_input == 2 * 3 * 2 + 2 * 4
        assert variant_config(c, "T").scorer_input == 2 * 3 * 4 + 2 * 4
        desc_axis = small_config(relevance_pool_axis="description_row")
        assert desc_axis.scorer_input == 2 * 12 + 2 * 4

    def test_variant_parameter_sets(self):
        c = small_config()
        assert "coattn_W" not in variant_config(c, "RM").parameter_shapes()
        assert not any("conv_api" in k or "conv_tokens" in k for k in variant_config(c, "M").parameter_shapes())
        assert not any(k.endswith(("_2_w", "_3_w")) for k in variant_config(c, "Conv1").parameter_shapes())
        with pytest.raises(ValueError, match="unknown variant"):
            variant_config(c, "XL")
        assert len(VARIANTS) == 9

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_variants_forward(self, variant):
        rng = np.random.default_rng(10)
        model = CsrsModel(variant_config(small_config(), variant), seed=0)
        probs, logits = model.score(random_batch(rng, 3))
        assert logits.shape == (3, 2)

    def test_checkpoint_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(11)
        model = CsrsModel(small_config(dtype="float32"), seed=7)
        batch = random_batch(rng, 4)
        model.save(tmp_path / "m.ckpt", {"epoch": 3})
        loaded = load_checkpoint(tmp_path / "m.ckpt", expect=model.config)
        assert loaded.config == model.config
        np.testing.assert_array_equal(model.score(batch)[1], loaded.score(batch)[1])
        manifest = read_manifest(tmp_path / "m.ckpt")
        assert manifest["param.coattn_W"] == "4x4" and manifest["extra.epoch"] == "3"

    def test_checkpoint_shape_validation(self, tmp_path):
        model = CsrsModel(small_config(dtype="float32"), seed=7)
        model.save(tmp_path / "m.ckpt")
        with pytest.raises(ValueError, match="dim"):
            load_checkpoint(tmp_path / "m.ckpt", expect=small_config(dtype="float32", dim=5))
        text = (tmp_path / "m.ckpt.manifest").read_text().replace("hidden=6", "hidden=7")
        (tmp_path / "m.ckpt.manifest").write_text(text)
        with pytest.raises(ValueError, match="mlp_w1"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_checkpoint_header_is_little_endian(self, tmp_path):
        model = CsrsModel(small_config(dtype="float32"), seed=0)
        model.save(tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:8] == b"CSRSCKPT"
        assert int.from_bytes(raw[8:12], "little") == 1
        assert int.from_bytes(raw[12:16], "little") == len(model.params)

    def test_same_seed_same_parameters(self):
        a = CsrsModel(small_config(), seed=42)
        b = CsrsModel(small_config(), seed=42)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)
