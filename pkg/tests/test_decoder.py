import numpy as np
import pytest

from textrich import tensor as T
from textrich.decoder import FULL_DECODER, Decoder, DecoderConfig, SequenceBatch
from textrich.errors import DegenerateBatchError, SequenceLengthError
from textrich.optim import Adam
from textrich.tensor import Tensor


@pytest.fixture
def dec(rng):
    return Decoder(DecoderConfig(layers=2, heads=2, hidden=8, ffn_mult=2, max_seq=24, vocab_size=11),
                   rng, np.float64)


def prefix(rng, p=3, b=1):
    return Tensor(rng.normal(size=(b, p, 8)))


def full_recompute_greedy(dec, pre, prompt, max_new, stop):
    """Greedy decoding that re-runs the whole sequence each step and reads the last row."""
    seq = list(prompt)
    out = []
    for _ in range(max_new):
        if pre.shape[1] + len(seq) > dec.config.max_seq:
            break
        tok = int(dec.forward(pre, seq).data[0, -1].argmax())
        if tok == stop:
            break
        out.append(tok)
        seq.append(tok)
    return out


class TestConfig:
    def test_full_preset(self):
        assert (FULL_DECODER.layers, FULL_DECODER.heads, FULL_DECODER.hidden) == (24, 16, 2048)
        assert FULL_DECODER.max_seq == 4096

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            DecoderConfig(hidden=10, heads=4).validate()


class TestForward:
    def test_shape(self, rng, dec):
        assert dec.forward(prefix(rng), [1, 2, 3, 4]).shape == (1, 4, 11)
        assert dec.forward(None, [[1, 2], [3, 4]]).shape == (2, 2, 11)

    def test_causality(self, rng, dec):
        pre = prefix(rng)
        a = dec.forward(pre, [1, 2, 3, 4, 5]).data
        b = dec.forward(pre, [1, 2, 3, 9, 5]).data
        np.testing.assert_array_equal(a[0, :3], b[0, :3])
        assert np.abs(a[0, 3:] - b[0, 3:]).max() > 0

    def test_prefix_visible_everywhere(self, rng, dec):
        a = dec.forward(prefix(rng), [1, 2]).data
        b = dec.forward(prefix(rng), [1, 2]).data
        assert np.abs(a[0, 0] - b[0, 0]).max() > 0

    def test_last_only(self, rng, dec):
        pre = prefix(rng)
        full = dec.forward(pre, [1, 2, 3]).data
        last = dec.forward(pre, [1, 2, 3], last_only=True).data
        np.testing.assert_allclose(last[0, 0], full[0, -1], atol=1e-12)

    def test_overflow(self, rng, dec):
        with pytest.raises(SequenceLengthError):
            dec.forward(prefix(rng, p=20), [1, 2, 3, 4, 5])

    def test_gradcheck(self, rng):
        d = Decoder(DecoderConfig(layers=1, heads=2, hidden=4, ffn_mult=2, max_seq=8, vocab_size=5),
                    rng, np.float64)
        pre = Tensor(rng.normal(size=(1, 2, 4)))
        assert T.grad_check(lambda p: T.tsum(d.forward(p, [1, 2, 3]) * d.forward(p, [1, 2, 3])), [pre]) < 1e-5


class TestLoss:
    def test_uniform_logits_give_log_vocab(self, rng, dec):
        dec.head.weight.data[:] = 0.0
        dec.head.bias.data[:] = 0.0
        batch = SequenceBatch(np.array([[1, 2]]), np.array([[False, True]]), None)
        assert float(dec.loss(batch).data) == pytest.approx(np.log(11))

    def test_prompt_labels_do_not_matter(self, rng, dec):
        ids = np.array([[1, 2, 3, 4, 5]])
        mask = np.array([[False, False, False, True, True]])
        loss = float(dec.loss(SequenceBatch(ids, mask)).data)
        logits = dec.forward(None, ids[:, :-1])
        targets = ids[:, 1:].copy()
        targets[0, :2] = [9, 10]  # labels under the prompt part of the mask
        assert float(T.cross_entropy(logits, targets, mask[:, 1:]).data) == loss
        lp = logits.data[0] - np.log(np.exp(logits.data[0]).sum(axis=1, keepdims=True))
        assert loss == pytest.approx(-(lp[2, 4] + lp[3, 5]) / 2)

    def test_no_response_tokens(self, dec):
        with pytest.raises(DegenerateBatchError):
            dec.loss(SequenceBatch(np.array([[1, 2]]), np.array([[False, False]])))

    def test_overfits_single_sequence(self, rng):
        d = Decoder(DecoderConfig(layers=1, heads=2, hidden=16, ffn_mult=2, max_seq=16, vocab_size=7),
                    rng, np.float64)
        opt = Adam(d.parameters(), lr=1e-2)
        batch = SequenceBatch(np.array([[1, 2, 3, 4, 5, 6]]), np.array([[False, True, True, True, True, True]]))
        for _ in range(150):
            opt.zero_grad()
            loss = d.loss(batch)
            T.backward(loss)
            opt.step()
        assert float(d.loss(batch).data) < 0.05


class TestGenerate:
    def test_matches_full_recompute(self, rng, dec):
        pre = prefix(rng)
        out = dec.generate(pre, [1, 2], max_new=10, stop_id=-1)
        assert out == full_recompute_greedy(dec, pre, [1, 2], 10, -1)
        assert len(out) == 10

    def test_stops_on_stop_id(self, rng, dec):
        dec.head.bias.data[:] = 0.0
        dec.head.bias.data[7] = 1e6
        assert dec.generate(prefix(rng), [1], max_new=5, stop_id=7) == []

    def test_budget_capped_by_max_seq(self, rng, dec):
        out = dec.generate(prefix(rng, p=18), [1, 2, 3], max_new=50, stop_id=-1)
        assert len(out) == 24 - 18 - 3

    def test_batch_equals_individual(self, rng, dec):
        pre = prefix(rng, b=3)
        prompts = [[1, 2], [3, 4], [5, 6]]
        batch = dec.generate_batch(pre, prompts, 6, stop_id=0)
        for i, p in enumerate(prompts):
            assert batch[i] == dec.generate(pre[i:i + 1], p, 6, stop_id=0)

    def test_ragged_prompts(self, rng, dec):
        pre = prefix(rng, b=2)
        batch = dec.generate_batch(pre, [[1], [2, 3]], 4, stop_id=0)
        assert batch[1] == dec.generate(pre[1:2], [2, 3], 4, stop_id=0)

    def test_no_tape_growth(self, rng, dec):
        dec.generate(prefix(rng), [1, 2], 3, stop_id=-1)
        assert all(p.grad is None for p in dec.parameters())

    def test_deterministic(self, rng, dec):
        pre = prefix(rng)
        assert dec.generate(pre, [1, 2], 8, stop_id=0) == dec.generate(pre, [1, 2], 8, stop_id=0)
