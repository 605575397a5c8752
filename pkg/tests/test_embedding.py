import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqlab import autodiff as ad
from uqlab.data import ConceptVocabulary, Episode, MedicalToken
from uqlab.embedding import (EmbeddingLayer, embed, encode_concept, encode_episode, make_batch, select_tokens,
                             time_embedding)

VOCAB = ConceptVocabulary(["gcs=0", "gcs=1", "cap_refill=0"], ["hr", "sbp"], {"hr": 80.0}, {"hr": 10.0})


class TestEncodeConcept:
    def test_value_token(self):
        enc = encode_concept(MedicalToken(1.0, "sbp", 120.0), VOCAB)
        np.testing.assert_array_equal(enc.c, [0, 0, 0, 0, 1])
        np.testing.assert_array_equal(enc.v, [0, 120.0])
        assert enc.input_vector.shape == (VOCAB.input_width,)

    def test_boolean_token(self):
        enc = encode_concept(MedicalToken(1.0, "gcs=1", None), VOCAB)
        np.testing.assert_array_equal(enc.c, [0, 1, 0, 0, 0])
        np.testing.assert_array_equal(enc.v, [0, 0])

    def test_zero_value_keeps_concept_bit(self):
        enc = encode_concept(MedicalToken(1.0, "hr", 0.0), VOCAB)
        assert enc.c[3] == 1.0 and not enc.v.any()

    def test_normalized_value(self):
        enc = encode_concept(MedicalToken(1.0, "hr", 95.0), VOCAB, normalize=True)
        assert enc.v[0] == pytest.approx(1.5)

    def test_unknown_concept(self):
        with pytest.raises(KeyError):
            encode_concept(MedicalToken(1.0, "mood", None), VOCAB)

    def test_value_mismatch(self):
        with pytest.raises(ValueError):
            encode_concept(MedicalToken(1.0, "hr", None), VOCAB)
        with pytest.raises(ValueError):
            encode_concept(MedicalToken(1.0, "gcs=0", 2.0), VOCAB)


class TestTimeEmbedding:
    def test_zero_time(self):
        np.testing.assert_allclose(time_embedding(0.0, 6), [0, 1, 0, 1, 0, 1], atol=1e-15)

    def test_first_component_is_sin_t(self):
        assert time_embedding(2.0, 8)[0] == pytest.approx(np.sin(2.0), abs=1e-15)

    def test_batched_shape(self):
        assert time_embedding(np.zeros((3, 5)), 4).shape == (3, 5, 4)

    def test_odd_width(self):
        with pytest.raises(ValueError):
            time_embedding(1.0, 5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1e4), st.sampled_from([2, 4, 8, 32]))
    def test_bounded(self, t, d):
        assert np.all(np.abs(time_embedding(t, d)) <= 1.0)


class TestEmbeddingLayer:
    def test_batched_call_matches_single_token_embed(self, rng):
        layer = EmbeddingLayer.init(VOCAB, 4, rng)
        toks = [MedicalToken(2.0, "sbp", 110.0), MedicalToken(3.0, "gcs=1", None), MedicalToken(0.5, "hr", 95.0)]
        ep = Episode("p", [t.t for t in toks], [t.concept for t in toks],
                     [np.nan if t.v is None else t.v for t in toks], 0)
        enc = encode_episode(ep, VOCAB)
        batch = make_batch([enc])
        got = layer(batch.concept_idx, batch.values, batch.slots).data[0] + time_embedding(batch.times[0], 4)
        want = np.stack([embed(t, layer, VOCAB, normalize=True) for t in ep.tokens])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_zero_weights_leave_time_embedding(self):
        layer = EmbeddingLayer(ad.parameter(np.zeros((VOCAB.input_width, 6))), VOCAB)
        tok = MedicalToken(7.5, "hr", 120.0)
        np.testing.assert_array_equal(embed(tok, layer, VOCAB), time_embedding(7.5, 6))

    def test_weight_shape_checked(self):
        with pytest.raises(ValueError):
            EmbeddingLayer(ad.parameter(np.zeros((3, 4))), VOCAB)


class TestSequences:
    def test_short_sequence_kept(self):
        assert list(select_tokens(np.array([1.0, np.nan]), 5)) == [0, 1]

    def test_booleans_kept_first(self):
        values = np.array([1.0, np.nan, 2.0, 3.0, np.nan, 4.0, 5.0])
        keep = select_tokens(values, 4)
        assert len(keep) == 4 and {1, 4} <= set(keep)
        assert list(keep) == sorted(keep)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=80), st.integers(1, 40))
    def test_limit_respected(self, is_bool, limit):
        values = np.array([np.nan if b else 1.0 for b in is_bool])
        keep = select_tokens(values, limit)
        assert len(keep) == min(limit, len(values))
        assert len(set(keep)) == len(keep)

    def test_encode_episode_truncates(self):
        n = 30
        ep = Episode("p", np.arange(n, dtype=float), ["hr"] * n, np.full(n, 80.0), 1)
        assert len(encode_episode(ep, VOCAB, max_len=10).concept_idx) == 9

    def test_batch_padding_mask(self):
        a = encode_episode(Episode("a", [1.0, 2.0], ["hr", "sbp"], [80.0, 120.0], 1), VOCAB)
        b = encode_episode(Episode("b", [1.0], ["gcs=0"], [np.nan], 0), VOCAB)
        batch = make_batch([a, b])
        np.testing.assert_array_equal(batch.mask, [[True, True], [True, False]])
        np.testing.assert_array_equal(batch.labels, [1, 0])
