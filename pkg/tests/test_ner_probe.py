"""NER probe: forward/backward, decoding, alternative-span F1, training."""

import numpy as np
import pytest

from probekit import ner_probe
from probekit.corpus import GoldEntity, Span
from probekit.crf import CrfParams
from probekit.embedstore import EmbeddingRecord, MixWeights
from probekit.errors import ValidationError
from probekit.ner_probe import (
    EvalReport,
    FfnParams,
    NerProbeModel,
    TagVocabulary,
    bio_constraint_masks,
    decode,
    evaluate,
    forward_emissions,
    loss_and_grad,
    model_params,
    train,
)
from probekit.trainer import TrainConfig

from conftest import make_ner_corpus


def identity_model(num_tags=3, num_layers=1):
    """D_e = T, single linear identity layer: emissions equal the mixed embeddings."""
    labels = ["O", "B", "I"][:num_tags]
    return NerProbeModel(
        mix=MixWeights.zeros(num_layers),
        ffn=FfnParams([(np.eye(num_tags), np.zeros(num_tags))]),
        crf=CrfParams.zeros(num_tags),
        tags=TagVocabulary(labels),
    )


def record_from(matrix, num_layers=1, rec_id="r"):
    matrix = np.asarray(matrix, dtype=np.float32)
    return EmbeddingRecord(rec_id, np.stack([matrix] * num_layers))


class TestTagVocabulary:
    def test_exactly_one_o_required(self):
        with pytest.raises(ValidationError):
            TagVocabulary(["B", "I"])
        with pytest.raises(ValidationError):
            TagVocabulary(["O", "O", "B"])

    def test_encode_decode(self):
        tags = TagVocabulary(["O", "B-GENE", "I-GENE"])
        assert tags.encode(["B-GENE", "O"]) == [1, 0]
        assert tags.decode([2, 0]) == ["I-GENE", "O"]

    def test_bio_masks(self):
        tags = TagVocabulary(["O", "B-A", "I-A", "B-B", "I-B"])
        allowed_start, allowed = bio_constraint_masks(tags)
        assert list(allowed_start) == [True, True, False, True, False]
        o, ba, ia, bb, ib = range(5)
        assert not allowed[o, ia]  # O -> I-A forbidden
        assert allowed[ba, ia]
        assert allowed[ia, ia]
        assert not allowed[bb, ia]  # type mismatch
        assert allowed[ia, bb]


class TestForwardEmissions:
    def test_zero_ffn_gives_zero_emissions(self):
        model = identity_model()
        model.ffn.layers[0] = (np.zeros((3, 3)), np.zeros(3))
        record = record_from(np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(forward_emissions(model, record), np.zeros((4, 3)))

    def test_identity_ffn_passes_embeddings_through(self):
        rng = np.random.default_rng(1)
        matrix = rng.normal(size=(5, 3)).astype(np.float32)
        out = forward_emissions(identity_model(), record_from(matrix))
        np.testing.assert_allclose(out, matrix, atol=1e-7)

    def test_position_independence(self):
        rng = np.random.default_rng(2)
        model = ner_probe.init_model(["O", "B", "I"], 1, 4, hidden_sizes=(6,), seed=3)
        matrix = rng.normal(size=(5, 4)).astype(np.float32)
        perm = rng.permutation(5)
        out = forward_emissions(model, record_from(matrix))
        out_permuted = forward_emissions(model, record_from(matrix[perm]))
        np.testing.assert_allclose(out_permuted, out[perm], atol=1e-12)

    def test_shape_mismatch(self):
        model = identity_model()
        with pytest.raises(ValidationError):
            forward_emissions(model, record_from(np.zeros((2, 7))))


class TestLossAndGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        h = 1e-5
        for _ in range(5):
            model = ner_probe.init_model(
                ["O", "B", "I"], num_layers=2, dim=4, hidden_sizes=(5,), seed=int(rng.integers(1e6))
            )
            params = model_params(model)
            for p in params.values():
                p[...] = rng.normal(scale=0.5, size=p.shape)
            record = EmbeddingRecord("x", rng.normal(size=(2, 3, 4)).astype(np.float32))
            gold = [int(g) for g in rng.integers(0, 3, size=3)]
            _, grads = loss_and_grad(model, record, gold)
            for name, p in params.items():
                analytic = np.asarray(grads[name], dtype=np.float64)
                numeric = np.zeros_like(analytic)
                it = np.nditer(p, flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    orig = p[idx]
                    p[idx] = orig + h
                    up, _ = loss_and_grad(model, record, gold)
                    p[idx] = orig - h
                    down, _ = loss_and_grad(model, record, gold)
                    p[idx] = orig
                    numeric[idx] = (up - down) / (2 * h)
                    it.iternext()
                denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
                assert np.linalg.norm(analytic - numeric) / denom <= 1e-5, name

    def test_duplicated_sentence_doubles_gradient(self):
        rng = np.random.default_rng(4)
        model = ner_probe.init_model(["O", "B", "I"], 1, 3, hidden_sizes=(4,), seed=9)
        record = EmbeddingRecord("x", rng.normal(size=(1, 3, 3)).astype(np.float32))
        gold = [0, 1, 2]
        loss, grads = loss_and_grad(model, record, gold)
        total = {k: g + g for k, g in grads.items()}
        again_loss, again = loss_and_grad(model, record, gold)
        assert again_loss == loss
        for k in grads:
            np.testing.assert_allclose(total[k], np.asarray(again[k]) * 2, atol=1e-15)

    def test_zero_ffn_annihilates_mix_gradient(self):
        rng = np.random.default_rng(5)
        model = identity_model(num_layers=2)
        model.ffn.layers[0] = (np.zeros((3, 3)), np.zeros(3))
        record = EmbeddingRecord("x", rng.normal(size=(2, 4, 3)).astype(np.float32))
        _, grads = loss_and_grad(model, record, [0, 1, 2, 0])
        np.testing.assert_allclose(grads["mix.raw"], 0.0, atol=1e-15)
        np.testing.assert_allclose(grads["mix.log_gamma"], 0.0, atol=1e-15)


class TestDecode:
    def test_all_o_emissions_decode_to_no_spans(self):
        model = identity_model()
        matrix = np.zeros((4, 3), dtype=np.float32)
        matrix[:, 0] = 5.0  # O everywhere
        assert decode(model, record_from(matrix)) == []

    def test_forced_entity(self):
        model = identity_model()
        matrix = np.zeros((3, 3), dtype=np.float32)
        matrix[0, 1] = 5.0  # B
        matrix[1, 2] = 5.0  # I
        matrix[2, 0] = 5.0  # O
        assert decode(model, record_from(matrix)) == [Span(0, 2, None)]

    def test_constrained_decode_never_emits_invalid_bio(self):
        # strong I-score at position 0 must be overridden by the constraint
        model = identity_model()
        matrix = np.zeros((2, 3), dtype=np.float32)
        matrix[0, 2] = 50.0
        matrix[1, 2] = 50.0
        spans = decode(model, record_from(matrix))
        for span in spans:
            assert 0 <= span.start < span.end

    def test_decode_score_matches_viterbi(self):
        from probekit import crf as crf_mod

        rng = np.random.default_rng(6)
        for _ in range(10):
            model = ner_probe.init_model(["O", "B", "I"], 1, 3, hidden_sizes=(4,), seed=11)
            for p in model_params(model).values():
                p[...] = rng.normal(size=p.shape)
            model.constrain_decoding = False
            record = EmbeddingRecord("x", rng.normal(size=(1, 5, 3)).astype(np.float32))
            spans = decode(model, record)
            emissions = forward_emissions(model, record)
            tags, score = crf_mod.viterbi(model.crf, emissions)
            from probekit.corpus import bio_from_entities, repair_bio

            relabeled = repair_bio(model.tags.decode(tags))
            assert bio_from_entities(spans, 5) == relabeled
            assert score == pytest.approx(
                crf_mod.score_sequence(model.crf, emissions, tags), abs=1e-12
            )


class TestEvaluate:
    def test_alternative_span_counts_as_hit(self):
        gold = [GoldEntity("s0", (0, 2), frozenset({(0, 1)}))]
        report = evaluate({"s0": [Span(0, 1)]}, gold)
        assert (report.tp, report.fp, report.fn) == (1, 0, 0)
        assert report.precision == report.recall == report.f1 == 1.0

    def test_no_predictions_convention(self):
        gold = [GoldEntity("s0", (0, 2))]
        report = evaluate({"s0": []}, gold)
        assert (report.tp, report.fp, report.fn) == (0, 0, 1)
        assert report.precision == 0.0 and report.recall == 0.0 and report.f1 == 0.0

    def test_two_predictions_one_gold(self):
        gold = [GoldEntity("s0", (0, 2), frozenset({(0, 1)}))]
        report = evaluate({"s0": [Span(0, 1), Span(0, 2)]}, gold)
        assert (report.tp, report.fp, report.fn) == (1, 1, 0)

    def test_primary_match_preferred_over_alternative(self):
        # prediction (0,2) must claim the entity whose primary span is (0,2),
        # leaving the other entity's alternative (0,2) unused
        gold = [
            GoldEntity("s0", (3, 5), frozenset({(0, 2)})),
            GoldEntity("s0", (0, 2)),
        ]
        report = evaluate({"s0": [Span(0, 2), Span(3, 5)]}, gold)
        assert (report.tp, report.fp, report.fn) == (2, 0, 0)

    def test_label_must_match(self):
        gold = [GoldEntity("s0", (0, 2), label="GENE")]
        report = evaluate({"s0": [Span(0, 2, "CHEM")]}, gold)
        assert (report.tp, report.fp, report.fn) == (0, 1, 1)

    def test_order_invariance(self):
        gold = [
            GoldEntity("s0", (0, 1)),
            GoldEntity("s0", (2, 4), frozenset({(2, 3)})),
            GoldEntity("s1", (1, 2)),
        ]
        preds_a = {"s0": [Span(2, 3), Span(0, 1)], "s1": [Span(1, 2)]}
        preds_b = {"s1": [Span(1, 2)], "s0": [Span(0, 1), Span(2, 3)]}
        assert evaluate(preds_a, gold) == evaluate(preds_b, list(reversed(gold)))

    def test_removing_a_correct_prediction_never_helps(self):
        gold = [GoldEntity("s0", (0, 1)), GoldEntity("s0", (2, 4))]
        full = evaluate({"s0": [Span(0, 1), Span(2, 4)]}, gold)
        fewer = evaluate({"s0": [Span(0, 1)]}, gold)
        assert fewer.f1 <= full.f1
        assert full.f1 == 1.0

    def test_unknown_sentence_id(self):
        with pytest.raises(ValidationError, match="s9"):
            evaluate({"s9": [Span(0, 1)]}, [], sentence_ids=["s0"])

    def test_f1_identity(self):
        report = EvalReport.from_counts(3, 1, 2)
        p, r = 3 / 4, 3 / 5
        assert report.f1 == pytest.approx(2 * p * r / (p + r))


class TestTrain:
    def test_zero_epochs_returns_initialized_model(self, small_ner_data):
        train_s, train_store, dev_s, dev_store = small_ner_data
        model = ner_probe.init_model(["O", "B", "I"], 2, 3, hidden_sizes=(8,), seed=1)
        before = {k: v.copy() for k, v in model_params(model).items()}
        model, history = train(
            model, train_s, train_store, dev_s, dev_store, TrainConfig(max_epochs=0), seed=1
        )
        assert history == []
        for k, v in model_params(model).items():
            assert np.array_equal(v, before[k])

    def test_same_seed_bit_identical_params(self, small_ner_data):
        train_s, train_store, dev_s, dev_store = small_ner_data
        config = TrainConfig(learning_rate=5e-3, max_epochs=3, patience=3)
        results = []
        for _ in range(2):
            model = ner_probe.init_model(["O", "B", "I"], 2, 3, hidden_sizes=(8,), seed=42)
            model, _ = train(model, train_s, train_store, dev_s, dev_store, config, seed=42)
            results.append({k: v.copy() for k, v in model_params(model).items()})
        for k in results[0]:
            assert np.array_equal(results[0][k], results[1][k]), k

    def test_separable_data_reaches_high_f1(self):
        train_s, train_store = make_ner_corpus(150, seed=600, noise=0.02)
        dev_s, dev_store = make_ner_corpus(40, seed=601, noise=0.02)
        model = ner_probe.init_model(["O", "B", "I"], 2, 3, hidden_sizes=(16,), seed=13)
        config = TrainConfig(learning_rate=1e-2, max_epochs=20, patience=20)
        model, history = train(model, train_s, train_store, dev_s, dev_store, config, seed=13)
        assert max(h["dev_metric"] for h in history) >= 0.99
        assert len(history) <= 20

    def test_missing_record_raises(self, small_ner_data):
        train_s, train_store, dev_s, dev_store = small_ner_data
        from probekit.embedstore import EmbeddingStore

        model = ner_probe.init_model(["O", "B", "I"], 2, 3, hidden_sizes=(4,), seed=1)
        with pytest.raises(KeyError):
            train(model, train_s, EmbeddingStore([]), dev_s, dev_store, TrainConfig(), seed=1)


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path, small_ner_data):
        train_s, train_store, dev_s, dev_store = small_ner_data
        model = ner_probe.init_model(["O", "B", "I"], 2, 3, hidden_sizes=(8, 4), seed=5)
        config = TrainConfig(max_epochs=1, patience=1)
        model, _ = train(model, train_s, train_store, dev_s, dev_store, config, seed=5)
        path = tmp_path / "model.ckpt"
        ner_probe.save(model, path, {"seed": 5})
        loaded, meta = ner_probe.load(path)
        assert meta["seed"] == 5
        assert loaded.tags.labels == model.tags.labels
        for k, v in model_params(model).items():
            assert np.array_equal(v, model_params(loaded)[k]), k
        rec = train_store[train_s[0].id]
        np.testing.assert_array_equal(
            forward_emissions(model, rec), forward_emissions(loaded, rec)
        )

    def test_save_is_byte_deterministic(self, tmp_path):
        model = ner_probe.init_model(["O", "B", "I"], 2, 3, hidden_sizes=(4,), seed=8)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ner_probe.save(model, p1, {"seed": 8})
        ner_probe.save(model, p2, {"seed": 8})
        assert p1.read_bytes() == p2.read_bytes()
