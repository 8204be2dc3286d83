import math

import numpy as np
import pytest

from connpred import da, nn
from connpred.corpus import LabeledExample
from connpred.text import sentence_from_tokens
from synth import make_copy_dataset, make_pair_dataset, synth_labels

SMALL = dict(
    embed_dim=8, hidden=6, max_len=5, dropout_attend=0.0, dropout_compare=0.0,
    dropout_classify=0.0, layer_norm=True, min_count=1,
)


def small_model(dtype=np.float64, **over):
    cfg = da.DaConfig(**{**SMALL, **over})
    vocab = da.Vocab(
        ["<null>", "<unk>", "the", "city", "grew", "fast", "but", "tax", "rose",
         "slowly", "again", "south"]
    )
    labels = ["x", "y", "z"]
    model = da.build_model(cfg, vocab, labels, np.random.default_rng(5), dtype=dtype)
    return model


def enc_pair(model, a_tokens, b_tokens, max_len=None):
    L = max_len or model.config.max_len
    a, ma = da.encode_ids(model.vocab, a_tokens, L)
    b, mb = da.encode_ids(model.vocab, b_tokens, L)
    return da.EncodedPair(a, b, ma.astype(np.float64), mb.astype(np.float64))


class TestVocab:
    def test_build_order_and_specials(self):
        v = da.Vocab.build([["b", "a", "b"], ["a", "c", "B"]], min_count=2)
        # counts: b=3 (case-folded), a=2, c=1 dropped
        assert v.tokens == ["<null>", "<unk>", "b", "a"]
        assert v.id_of["b"] == 2

    def test_tie_broken_by_token(self):
        v = da.Vocab.build([["m", "k", "m", "k"]], min_count=1)
        assert v.tokens[2:] == ["k", "m"]

    def test_oov_maps_to_unk(self):
        v = da.Vocab(["<null>", "<unk>", "the"])
        assert v.encode_tokens(["THE", "zzz"]) == [2, 1]

    def test_bad_specials_rejected(self):
        with pytest.raises(da.DaError, match="null"):
            da.Vocab(["<unk>", "<null>", "a"])
        with pytest.raises(da.DaError, match="duplicate"):
            da.Vocab(["<null>", "<unk>", "a", "a"])


class TestEncode:
    def test_pad_and_mask(self):
        v = da.Vocab(["<null>", "<unk>", "the", "city", "grew"])
        ids, mask = da.encode_ids(v, ["The", "city", "grew"], 6)
        assert ids.tolist() == [2, 3, 4, 0, 0, 0]
        assert mask.tolist() == [1, 1, 1, 0, 0, 0]

    def test_truncation(self):
        v = da.Vocab(["<null>", "<unk>", "a"])
        ids, mask = da.encode_ids(v, ["a"] * 10, 4)
        assert ids.tolist() == [2, 2, 2, 2]
        assert mask.tolist() == [1, 1, 1, 1]

    def test_golden_tiny_vocab(self):
        v = da.Vocab(["<null>", "<unk>", "the", "city", "grew"])
        ex = LabeledExample(
            arg1=sentence_from_tokens(["The", "city", "grew", "."]),
            arg2=sentence_from_tokens(["Taxes", "rose"]),
            label_id=0,
            article_id="a",
        )
        enc = da.encode(ex, v, max_len=5)
        assert enc.a.tolist() == [2, 3, 4, 1, 0]  # "." is out of vocab
        assert enc.b.tolist() == [1, 1, 0, 0, 0]
        assert enc.mask_b.tolist() == [1, 1, 0, 0, 0]


class TestAttend:
    def test_scores_symmetric_for_identical_sentences(self):
        m = small_model()
        enc = enc_pair(m, ["the", "city", "grew"], ["the", "city", "grew"])
        scores, _, _ = m.attend(enc)
        assert np.array_equal(scores, scores.T)

    def test_rows_stochastic_over_real_tokens(self):
        m = small_model()
        enc = enc_pair(m, ["the", "city", "grew", "fast"], ["tax", "rose"])
        _, wab, wba = m.attend(enc)
        assert (wab >= 0).all() and (wba >= 0).all()
        for i in range(4):
            assert abs(wab[i].sum() - 1.0) < 1e-6
        for j in range(2):
            assert abs(wba[:, j].sum() - 1.0) < 1e-6

    def test_padding_gets_exact_zero_weight(self):
        m = small_model()
        enc = enc_pair(m, ["the", "city"], ["tax", "rose", "again"])
        _, wab, wba = m.attend(enc)
        assert np.array_equal(wab[2:], np.zeros_like(wab[2:]))  # padded a rows
        assert np.array_equal(wab[:, 3:], np.zeros_like(wab[:, 3:]))  # padded b cols
        assert np.array_equal(wba[2:], np.zeros_like(wba[2:]))
        assert np.array_equal(wba[:, 3:], np.zeros_like(wba[:, 3:]))

    def test_single_real_token_gives_one_hot_rows(self):
        m = small_model()
        enc = enc_pair(m, ["the", "city", "grew"], ["tax"])
        _, wab, _ = m.attend(enc)
        for i in range(3):
            assert wab[i].tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


class TestCompareAggregate:
    def test_one_hot_weights_select_embedding(self):
        m = small_model()
        enc = enc_pair(m, ["the", "city"], ["tax", "rose", "again"])
        L = m.config.max_len
        sel = 1  # align every a token to b token "rose"
        wab = np.zeros((L, L))
        wab[:2, sel] = 1.0
        wba = np.zeros((L, L))
        v1, _ = m.compare(enc, wab, wba)
        ea = m.params["emb/E"][enc.a]
        eb = m.params["emb/E"][enc.b]
        beta = np.zeros_like(ea)
        beta[:2] = eb[sel]
        direct, _ = m.compare_net.forward(
            m.params, np.concatenate([ea, beta], axis=1)
        )
        assert np.array_equal(v1, direct)

    def test_uniform_weights_over_identical_embeddings(self):
        m = small_model()
        enc = enc_pair(m, ["the"], ["tax", "tax"])
        L = m.config.max_len
        wab = np.zeros((L, L))
        wab[0, 0] = wab[0, 1] = 0.5
        v1, _ = m.compare(enc, wab, np.zeros((L, L)))
        ea = m.params["emb/E"][enc.a]
        beta = np.zeros_like(ea)
        beta[0] = m.params["emb/E"][enc.b[0]]  # = the shared embedding
        direct, _ = m.compare_net.forward(m.params, np.concatenate([ea, beta], axis=1))
        assert np.array_equal(v1[0], direct[0])

    def test_all_masked_aggregate_hits_bias_path(self):
        m = small_model()
        L, h = m.config.max_len, m.config.hidden
        rng = np.random.default_rng(0)
        v1 = rng.normal(size=(L, h))
        v2 = rng.normal(size=(L, h))
        logits = m.aggregate(v1, v2, np.zeros(L), np.zeros(L))
        direct, _ = m.classify_net.forward(m.params, np.zeros((1, 2 * h)))
        assert np.array_equal(logits, direct[0])


class TestForwardInvariants:
    def test_initial_loss_is_ln_k(self):
        m = small_model()
        ids_a, mask_a = da.encode_matrix(m.vocab, [["the", "city"], ["tax"]], 5)
        ids_b, mask_b = da.encode_matrix(m.vocab, [["grew"], ["rose", "again"]], 5)
        logits, _ = m.forward_batch(ids_a, mask_a, ids_b, mask_b)
        assert np.array_equal(logits, np.zeros_like(logits))
        loss, _ = nn.softmax_xent(logits, np.array([0, 2]))
        assert abs(loss - math.log(3)) < 1e-12

    def test_padding_invariance(self):
        # padded positions carry exactly zero weight; the padded length can
        # still flip numpy's reduction kernel in the softmax denominator,
        # which reassociates the real summands at ulp level
        m = small_model(max_len=12)
        a_tokens = ["the", "city", "grew", "fast"]
        b_tokens = ["but", "tax", "rose"]
        logits = {}
        for L in (5, 6, 9, 12):
            ids_a, mask_a = da.encode_matrix(m.vocab, [a_tokens], L)
            ids_b, mask_b = da.encode_matrix(m.vocab, [b_tokens], L)
            logits[L], _ = m.forward_batch(ids_a, mask_a, ids_b, mask_b)
        for L in (6, 9, 12):
            assert np.allclose(logits[5], logits[L], rtol=0, atol=1e-12)

    def test_token_permutation_invariance(self):
        m = small_model(max_len=6)
        rng = np.random.default_rng(2)
        a_tokens = ["the", "city", "grew", "fast", "again"]
        b_tokens = ["but", "tax", "rose", "slowly"]
        base = None
        for _ in range(3):
            pa = [a_tokens[i] for i in rng.permutation(len(a_tokens))]
            pb = [b_tokens[i] for i in rng.permutation(len(b_tokens))]
            ids_a, mask_a = da.encode_matrix(m.vocab, [pa], 6)
            ids_b, mask_b = da.encode_matrix(m.vocab, [pb], 6)
            out, _ = m.forward_batch(ids_a, mask_a, ids_b, mask_b)
            if base is None:
                base = out
            else:
                assert np.allclose(out, base, atol=1e-10)

    def test_null_embedding_gets_zero_gradient(self):
        m = small_model()
        # the classifier head starts at zero and would block all upstream
        # gradient; give it values so gradient reaches the embeddings
        last = m.classify_net.n_layers - 1
        rng = np.random.default_rng(6)
        key = m.classify_net.key("W", last)
        m.params[key] = rng.normal(size=m.params[key].shape)
        ids_a, mask_a = da.encode_matrix(m.vocab, [["the", "city"], ["tax"]], 5)
        ids_b, mask_b = da.encode_matrix(m.vocab, [["grew"], ["rose", "again"]], 5)
        _, grads = m.loss_and_grads(
            ids_a, mask_a, ids_b, mask_b, np.array([0, 1]), train=False
        )
        assert np.array_equal(grads["emb/E"][0], np.zeros(m.config.embed_dim))
        # real rows do receive gradient
        assert np.abs(grads["emb/E"][2:]).sum() > 0


class TestEndToEndGradients:
    def _check(self, train_mode):
        m = small_model()
        ids_a, mask_a = da.encode_matrix(
            m.vocab, [["the", "city", "grew"], ["tax", "rose"], ["fast"]], 5
        )
        ids_b, mask_b = da.encode_matrix(
            m.vocab, [["but", "tax"], ["again", "south", "slowly"], ["the"]], 5
        )
        y = np.array([0, 2, 1])
        # fill the zero-initialized head so gradient reaches every parameter
        rng0 = np.random.default_rng(17)
        last = m.classify_net.n_layers - 1
        for kind in ("W", "b"):
            key = m.classify_net.key(kind, last)
            m.params[key] = 0.3 * rng0.normal(size=m.params[key].shape)
        if train_mode:
            m.attend_net.dropout = 0.3
            m.compare_net.dropout = 0.1
            m.classify_net.dropout = 0.2

        def fn(params):
            rng = np.random.default_rng(99) if train_mode else None
            return m.loss_and_grads(
                ids_a, mask_a, ids_b, mask_b, y, rng=rng, train=train_mode
            )

        report = nn.gradient_check(fn, m.params)
        assert report.passed, sorted(
            report.per_param.items(), key=lambda kv: -kv[1]
        )[:3]

    def test_eval_mode(self):
        self._check(train_mode=False)

    def test_train_mode_frozen_dropout(self):
        self._check(train_mode=True)


class TestTraining:
    CFG = dict(
        embed_dim=16, hidden=32, max_len=12, dropout_attend=0.1,
        dropout_compare=0.05, dropout_classify=0.1, layer_norm=True,
        learning_rate=0.003, batch_size=32, optimizer="adam", min_count=1,
    )

    def test_synthetic_separable_20_classes(self):
        data = make_pair_dataset(n_per_class=10, seed=0)
        cfg = da.DaConfig(**{**self.CFG, "max_steps": 2500, "eval_every": 500, "seed": 3})
        result = da.train(data, synth_labels(), cfg)
        assert abs(result.history[0].loss - math.log(20)) < 0.01 * math.log(20)
        pred, _ = result.final.predict_examples(data)
        gold = np.array([e.label_id for e in data])
        acc = float((pred == gold).mean())
        assert acc >= 0.99, acc

    def test_same_seed_identical_logs(self):
        data = make_pair_dataset(n_per_class=4, seed=1)
        cfg = da.DaConfig(**{**self.CFG, "max_steps": 40, "eval_every": 20, "seed": 7})
        dev = make_pair_dataset(n_per_class=2, seed=2)
        r1 = da.train(data, synth_labels(), cfg, dev_examples=dev)
        r2 = da.train(data, synth_labels(), cfg, dev_examples=dev)
        assert [e.loss for e in r1.history] == [e.loss for e in r2.history]
        assert [e.dev_macro_f1 for e in r1.history] == [e.dev_macro_f1 for e in r2.history]

    def test_best_dev_snapshot(self):
        data = make_pair_dataset(n_per_class=4, seed=4)
        dev = make_pair_dataset(n_per_class=2, seed=5)
        cfg = da.DaConfig(**{**self.CFG, "max_steps": 60, "eval_every": 20, "seed": 0})
        r = da.train(data, synth_labels(), cfg, dev_examples=dev)
        assert r.best_dev_f1 is not None
        evals = [e.dev_macro_f1 for e in r.history if e.dev_macro_f1 is not None]
        assert r.best_dev_f1 == max(evals)
        assert r.best_step in [e.step for e in r.history if e.dev_macro_f1 is not None]

    def test_threaded_gradient_accumulation(self):
        data = make_pair_dataset(n_per_class=3, seed=6)
        cfg = da.DaConfig(**{**self.CFG, "max_steps": 12, "eval_every": 1000, "seed": 1})
        r1 = da.train(data, synth_labels(), cfg, threads=2)
        r2 = da.train(data, synth_labels(), cfg, threads=2)
        assert all(np.isfinite(e.loss) for e in r1.history)
        assert [e.loss for e in r1.history] == [e.loss for e in r2.history]

    def test_divergence_aborts(self):
        data = make_pair_dataset(n_per_class=2, seed=8)
        cfg = da.DaConfig(
            **{**self.CFG, "max_steps": 20, "eval_every": 1000, "seed": 0,
               "optimizer": "sgd", "learning_rate": 1e30}
        )
        with np.errstate(all="ignore"), pytest.raises(da.TrainingDiverged):
            da.train(data, synth_labels(), cfg)

    def test_empty_training_set_rejected(self):
        with pytest.raises(da.DaError, match="no training"):
            da.train([], synth_labels(), da.DaConfig(**{**self.CFG, "max_steps": 1}))


class TestPredictExplain:
    def test_untrained_scores_uniform_and_id_ordered(self):
        m = small_model(dtype=np.float32)
        ranked = m.predict(["the", "city"], ["tax", "rose"])
        assert [r[0] for r in ranked] == ["x", "y", "z"]  # tie broken by id
        assert abs(sum(p for _, p in ranked) - 1.0) < 1e-6
        assert all(abs(p - 1 / 3) < 1e-6 for _, p in ranked)

    def test_explain_schema_and_stochasticity(self):
        m = small_model(dtype=np.float32)
        doc = m.explain(["the", "city", "zzz"], ["tax", "rose"])
        assert set(doc) == {
            "arg1_tokens", "arg2_tokens", "ab_weights", "ba_weights",
            "predicted", "scores",
        }
        assert doc["arg1_tokens"] == ["the", "city", "zzz"]
        assert doc["arg2_tokens"] == ["tax", "rose"]
        assert len(doc["ab_weights"]) == 3 and len(doc["ab_weights"][0]) == 2
        for row in doc["ab_weights"]:
            assert abs(sum(row) - 1.0) < 1e-6
            assert all(w >= 0 for w in row)
        cols = list(zip(*doc["ba_weights"]))
        for col in cols:
            assert abs(sum(col) - 1.0) < 1e-6
        assert doc["predicted"] in m.labels
        assert set(doc["scores"]) == set(m.labels)

    def test_explain_truncates_to_max_len(self):
        m = small_model(dtype=np.float32, max_len=4)
        doc = m.explain(["the"] * 9, ["city"] * 2)
        assert len(doc["arg1_tokens"]) == 4
        assert len(doc["ab_weights"]) == 4


class TestCopyTaskAlignment:
    def test_identical_pairs_align_diagonally_after_training(self):
        data = make_copy_dataset(n_per_class=12, seed=1, classes=6)
        cfg = da.DaConfig(
            embed_dim=16, hidden=24, max_len=8, dropout_attend=0.0,
            dropout_compare=0.0, dropout_classify=0.0, layer_norm=True,
            learning_rate=0.003, batch_size=24, max_steps=600, eval_every=10_000,
            optimizer="adam", min_count=1, seed=2,
        )
        result = da.train(data, ["k%d" % i for i in range(6)], cfg)
        m = result.final
        masses = []
        keyword_self_aligned = []
        for ex in data[:12]:
            doc = m.explain(ex.arg1.tokens, ex.arg2.tokens)
            w = np.array(doc["ab_weights"])
            masses.append(float(np.diag(w).mean()))
            kw = next(i for i, t in enumerate(ex.arg1.tokens) if t.startswith("kw"))
            keyword_self_aligned.append(w[kw].argmax() == kw)
        # diagonal mass far above the 1/len uniform baseline of 0.2
        assert np.mean(masses) > 0.5, masses
        # the class-bearing token always aligns to its own copy
        assert all(keyword_self_aligned)


class TestCheckpoint:
    def _trained_small(self):
        data = make_pair_dataset(n_per_class=3, seed=9)
        cfg = da.DaConfig(
            embed_dim=8, hidden=12, max_len=8, dropout_attend=0.1,
            dropout_compare=0.05, dropout_classify=0.1, learning_rate=0.005,
            batch_size=16, max_steps=30, eval_every=1000, min_count=1, seed=4,
        )
        return da.train(data, synth_labels(), cfg).final

    def test_round_trip_identical_predictions(self, tmp_path):
        m = self._trained_small()
        path = tmp_path / "model.dann"
        m.save(path)
        m2 = da.DaModel.load(path)
        assert m2.labels == m.labels
        assert m2.vocab.tokens == m.vocab.tokens
        assert m2.config == m.config
        for k in m.params:
            assert np.array_equal(m.params[k], m2.params[k]), k
        a, b = ["the", "ax1", "city"], ["by2", "rose"]
        assert m.predict(a, b) == m2.predict(a, b)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "other.dann"
        nn.save_checkpoint(path, {"kind": "something-else"}, [])
        with pytest.raises(da.DaError, match="checkpoint"):
            da.DaModel.load(path)

    def test_vocab_size_mismatch_rejected(self, tmp_path):
        m = self._trained_small()
        path = tmp_path / "model.dann"
        m.save(path)
        header, arrays, extra = nn.load_checkpoint(path)
        header["vocab_size"] = 3
        del header["arrays"]
        nn.save_checkpoint(path, header, sorted(arrays.items()), extra=extra)
        with pytest.raises(da.DaError, match="vocab size"):
            da.DaModel.load(path)


class TestEmbeddingsFile:
    def test_load_and_apply(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("city 1 2 3 4 5 6 7 8\nzzz 9 9 9 9 9 9 9 9\n", encoding="utf-8")
        vecs = da.load_embeddings_text(path, 8)
        assert set(vecs) == {"city", "zzz"}
        cfg = da.DaConfig(**SMALL)
        vocab = da.Vocab(["<null>", "<unk>", "the", "city"])
        m = da.build_model(cfg, vocab, ["x", "y", "z"], np.random.default_rng(0),
                           pretrained=vecs)
        assert m.params["emb/E"][3].tolist() == [1, 2, 3, 4, 5, 6, 7, 8]

    def test_dim_mismatch(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("city 1 2 3\n", encoding="utf-8")
        with pytest.raises(da.DaError, match="expected token"):
            da.load_embeddings_text(path, 8)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("city a b c d e f g h\n", encoding="utf-8")
        with pytest.raises(da.DaError, match="non-numeric"):
            da.load_embeddings_text(path, 8)

    def test_wrong_pretrained_dim_at_build(self):
        cfg = da.DaConfig(**SMALL)
        vocab = da.Vocab(["<null>", "<unk>", "city"])
        with pytest.raises(da.DaError, match="dim"):
            da.build_model(cfg, vocab, ["x"], np.random.default_rng(0),
                           pretrained={"city": np.ones(3, dtype=np.float32)})
