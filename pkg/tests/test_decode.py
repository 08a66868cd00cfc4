import itertools
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import importlib
from tailorsum.data import RESERVED, STOP_ID, Vocabulary
from tailorsum.decode import DecodeConfig, Hypothesis, beam_search, decode, greedy_decode, write_decodes
from tailorsum.model import Dims, ModelParams
from tailorsum.numerics import substream
from tailorsum.tailoring import ControlToken, VotingTable

decode_mod = importlib.import_module("tailorsum.decode")
WORDS = [f"w{k}" for k in range(12)]
A, B = 4, 5


def toy_vocab(controls=()):
    return Vocabulary(list(RESERVED) + list(controls) + WORDS[:20 - 4 - len(controls)], controls)


def random_model(seed, scale=1.0):
    return ModelParams.init(Dims(16, 6, 6, 6), substream(seed, "decode-test"), scale)


class ToyDecoder:
    """Stands in for the model: step distributions depend only on the prefix."""

    TABLE = {
        (): {A: 0.6, B: 0.4},
        (A,): {A: 0.4, B: 0.4, STOP_ID: 0.2},
        (B,): {STOP_ID: 0.9, A: 0.05, B: 0.05},
    }

    def __init__(self, params, vocab, article, config):
        self.source_tokens, self.oovs = list(article), ()

    def root(self):
        return Hypothesis([], 0.0, None, np.zeros(1))

    def expand(self, hyp):
        table = self.TABLE.get(tuple(hyp.tokens), {STOP_ID: 1.0})
        logp = np.full(6, -np.inf)
        for tok, p in table.items():
            logp[tok] = math.log(p)
        return SimpleNamespace(state=None, coverage=np.zeros(1), attention=np.ones(1)), logp


def toy_sequences(max_len):
    """Every finished sequence with its length-normalized score."""
    out = []

    def walk(prefix, logp):
        table = ToyDecoder.TABLE.get(tuple(prefix), {STOP_ID: 1.0})
        for tok, p in table.items():
            seq, lp = prefix + [tok], logp + math.log(p)
            if tok == STOP_ID:
                out.append((seq, lp / len(seq)))
            elif len(seq) < max_len:
                walk(seq, lp)
    walk([], 0.0)
    return out


class TestToyBeam:
    def test_beam_finds_enumeration_optimum(self, monkeypatch):
        monkeypatch.setattr(decode_mod, "_Decoder", ToyDecoder)
        best_seq, best_score = max(toy_sequences(2), key=lambda s: (s[1], [-t for t in s[0]]))
        res = beam_search(None, None, ["x"], DecodeConfig(beam_width=2, max_len=2))
        assert res.best.tokens == best_seq == [B, STOP_ID]
        assert res.best.score == pytest.approx(best_score)
        assert not res.partial

    def test_greedy_is_suboptimal(self, monkeypatch):
        monkeypatch.setattr(decode_mod, "_Decoder", ToyDecoder)
        res = greedy_decode(None, None, ["x"], DecodeConfig(max_len=2))
        assert res.best.tokens[0] == A
        assert res.best.log_prob < math.log(0.9 * 0.4)

    def test_partial_flag(self, monkeypatch):
        monkeypatch.setattr(decode_mod, "_Decoder", ToyDecoder)
        res = greedy_decode(None, None, ["x"], DecodeConfig(max_len=1))
        assert res.partial and res.best.tokens == [A]


class TestDecodeModel:
    @given(st.integers(0, 200))
    @settings(max_examples=25, deadline=None)
    def test_width_one_equals_greedy(self, seed):
        P, vocab = random_model(seed), toy_vocab()
        art = ["w1", "w2", "zz", "w3"]
        g = greedy_decode(P, vocab, art, DecodeConfig(max_len=8))
        b = beam_search(P, vocab, art, DecodeConfig(beam_width=1, max_len=8))
        assert g.best.tokens == b.best.tokens

    def test_one_hot_forced_sequence(self):
        P, vocab = ModelParams(Dims(16, 6, 6, 6)), toy_vocab()
        P.gen_b[0] = 60.0
        P.out_b[7] = 100.0
        res = greedy_decode(P, vocab, ["w1"], DecodeConfig(max_len=3))
        assert res.best.tokens == [7, 7, 7]

    def test_trace_rows_and_logprob_monotone(self):
        P, vocab = random_model(3), toy_vocab()
        res = beam_search(P, vocab, ["w1", "w5", "zz", "."], DecodeConfig(beam_width=3, max_len=10))
        for hyp in res.nbest:
            assert len(hyp.trace) == len(hyp.tokens)
            for row in hyp.trace:
                assert abs(row.sum() - 1.0) <= 1e-9
        assert res.best.log_prob <= 0

    def test_unfinished_never_exceeds_width(self, monkeypatch):
        seen = []
        orig = decode_mod._Decoder.expand

        def spy(self, hyp):
            seen.append(len(hyp.tokens))
            return orig(self, hyp)
        monkeypatch.setattr(decode_mod._Decoder, "expand", spy)
        beam_search(random_model(1), toy_vocab(), ["w1", "w2"], DecodeConfig(beam_width=3, max_len=6))
        counts = np.bincount(seen)
        assert counts.max() <= 3

    def test_min_len_suppresses_stop(self):
        P, vocab = ModelParams(Dims(16, 6, 6, 6)), toy_vocab()
        P.gen_b[0] = 60.0
        P.out_b[STOP_ID] = 50.0
        res = greedy_decode(P, vocab, ["w1"], DecodeConfig(max_len=6, min_len=3))
        assert len(res.best.tokens) == 4 and res.best.tokens[-1] == STOP_ID
        assert STOP_ID not in res.best.tokens[:3]

    def test_voting_and_boost_paths_neutral(self):
        vocab = toy_vocab()
        table = VotingTable({"w10": "w1"}, lambda c, o: True)
        for seed in range(5):
            P = random_model(seed)
            art = ["w1", "w10", "zz", "."]
            plain = beam_search(P, vocab, art, DecodeConfig(beam_width=2, max_len=8))
            neutral = beam_search(P, vocab, art, DecodeConfig(beam_width=2, max_len=8, voting=table,
                                                              voting_lambda=0.0, boost=np.ones(4)))
            assert plain.best.tokens == neutral.best.tokens
            assert plain.best.log_prob == neutral.best.log_prob

    def test_deterministic(self):
        P, vocab = random_model(11), toy_vocab()
        a = beam_search(P, vocab, ["w1", "w2"], DecodeConfig(beam_width=4, max_len=7))
        b = beam_search(P, vocab, ["w1", "w2"], DecodeConfig(beam_width=4, max_len=7))
        assert [h.tokens for h in a.nbest] == [h.tokens for h in b.nbest]

    def test_control_token_prepended_never_emitted(self):
        ctl = ControlToken("<readable>", "readability")
        vocab = toy_vocab([ctl.surface])
        P = ModelParams(Dims(16, 6, 6, 6))
        P.gen_b[0] = 60.0
        P.out_b[vocab.id(ctl.surface)] = 100.0
        res = greedy_decode(P, vocab, ["w1"], DecodeConfig(max_len=3, control=ctl))
        assert res.source_tokens[0] == ctl.surface
        assert vocab.id(ctl.surface) not in res.best.tokens
        with pytest.raises(ValueError, match="not registered"):
            greedy_decode(P, toy_vocab(), ["w1"], DecodeConfig(control=ctl))

    def test_copied_oov_uses_surface_form(self):
        P, vocab = ModelParams(Dims(16, 6, 6, 6)), toy_vocab()
        P.gen_b[0] = -60.0
        res = greedy_decode(P, vocab, ["unseenword"], DecodeConfig(max_len=2))
        assert res.words(vocab) == ["unseenword", "unseenword"]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig(beam_width=0)
        with pytest.raises(ValueError):
            DecodeConfig(min_len=5, max_len=2)
        with pytest.raises(ValueError, match="empty article"):
            greedy_decode(random_model(0), toy_vocab(), [], DecodeConfig())
        with pytest.raises(ValueError, match="boost"):
            greedy_decode(random_model(0), toy_vocab(), ["w1"], DecodeConfig(boost=np.ones(2)))

    def test_records(self, tmp_path):
        P, vocab = random_model(2), toy_vocab()
        res = decode(P, vocab, ["w1", "zz"], DecodeConfig(beam_width=2, max_len=4))
        rec = res.record(vocab, with_attention=True)
        assert rec["source"] == ["w1", "zz"] and len(rec["attention"]) == len(res.best.tokens)
        write_decodes([rec], tmp_path / "d.jsonl")
        assert json.loads((tmp_path / "d.jsonl").read_text())["text"] == rec["text"]

    def test_wider_beam_not_worse(self):
        """Normalized score is non-decreasing in beam width on these inputs."""
        vocab = toy_vocab()
        worse = []
        for seed in range(20):
            P = random_model(seed, 2.0)
            art = ["w1", "w4", "zz", "w7", "."]
            scores = [beam_search(P, vocab, art, DecodeConfig(beam_width=w, max_len=8)).best.score
                      for w in (1, 2, 4)]
            worse += [(seed, scores) for a, b in zip(scores, scores[1:]) if b < a - 1e-12]
        assert not worse, f"{len(worse)} of 20 inputs score lower with a wider beam; first: {worse[0]}"
