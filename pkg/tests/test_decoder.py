import math

import numpy as np
import pytest

from tilevlm import tensor as tt
from tilevlm.decoder import Decoder, DecoderConfig, KVCache, Vocab, causal_mask, masked_cross_entropy
from tilevlm.errors import ContractError, DimensionError
from tilevlm.tensor import Tensor
from tilevlm.vision import IMAGE, TEXT, TokenSequence

CFG = DecoderConfig(depth=2, dim=16, heads=2, max_len=64)


def seq_of(x, n_img=0):
    return TokenSequence(Tensor(x), [IMAGE] * n_img + [TEXT] * (len(x) - n_img))


def incremental(dec, x):
    cache = dec.new_cache()
    rows = [dec.decode_step(Tensor(x[i:i + 1]), cache).data[0] for i in range(len(x))]
    return np.array(rows), cache


def test_vocab_round_trip_and_specials():
    assert Vocab.decode(Vocab.encode("héllo")) == "héllo"
    assert (Vocab.BOS, Vocab.EOS, Vocab.IMG) == (256, 257, 258)
    assert CFG.vocab == 259


def test_zero_weights_give_head_bias():
    dec = Decoder(CFG, seed=0)
    bias = np.random.default_rng(0).normal(size=CFG.vocab)
    for name, p in dec.named_parameters():
        p.data[...] = 0.0
    dec.head.bias.data[...] = bias
    with tt.no_grad():
        out = dec.decode_step(Tensor(np.zeros((1, CFG.dim))), dec.new_cache())
    assert np.array_equal(out.data[0], bias)


def test_decode_step_is_pure_given_same_cache_state():
    dec = Decoder(CFG, seed=1)
    x = np.random.default_rng(1).normal(size=(1, CFG.dim))
    with tt.no_grad():
        a = dec.decode_step(Tensor(x), dec.new_cache()).data
        b = dec.decode_step(Tensor(x), dec.new_cache()).data
    assert np.array_equal(a, b)


def test_incremental_equals_parallel_five_tokens():
    dec = Decoder(CFG, seed=2)
    x = np.random.default_rng(5).normal(size=(5, CFG.dim))
    with tt.no_grad():
        par = dec.forward(seq_of(x)).data
        inc, cache = incremental(dec, x)
    assert np.abs(par - inc).max() <= 1e-9
    assert cache.length == 5


def test_incremental_equals_parallel_50_sequences():
    dec = Decoder(CFG, seed=3)
    rng = np.random.default_rng(50)
    worst = 0.0
    with tt.no_grad():
        for _ in range(50):
            x = rng.normal(size=(int(rng.integers(1, 12)), CFG.dim))
            worst = max(worst, float(np.abs(dec.forward(seq_of(x)).data - incremental(dec, x)[0]).max()))
    assert worst <= 1e-9


def test_causality_exact():
    dec = Decoder(CFG, seed=4)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(8, CFG.dim))
    with tt.no_grad():
        base = dec.forward(seq_of(x)).data
        for t in range(7):
            y = x.copy()
            y[t + 1:] += rng.normal(size=y[t + 1:].shape)
            out = dec.forward(seq_of(y)).data
            assert np.array_equal(out[:t + 1], base[:t + 1])


def test_cache_grows_by_append_only():
    dec = Decoder(CFG, seed=0)
    cache = dec.new_cache()
    sizes = []
    with tt.no_grad():
        for i in range(3):
            dec.decode_step(Tensor(np.zeros((1, CFG.dim))), cache)
            sizes.append(cache.nbytes())
    assert cache.length == 3
    assert sizes == [sizes[0], 2 * sizes[0], 3 * sizes[0]]
    assert sizes[0] == 2 * CFG.depth * CFG.dim * 8


def test_decode_step_width_mismatch():
    dec = Decoder(CFG, seed=0)
    with pytest.raises(DimensionError):
        dec.decode_step(Tensor(np.zeros((1, CFG.dim + 1))), dec.new_cache())


def test_causal_mask_shape():
    m = causal_mask(3)
    assert m[0, 1] == -np.inf and m[1, 0] == 0.0 and m[2, 2] == 0.0


# --------------------------------------------------------------------------
# loss


def test_uniform_logits_loss_is_ln_v():
    logits = Tensor(np.zeros((3, 4)))
    loss = masked_cross_entropy(logits, [0, 3, 1], [True, True, True])
    assert abs(loss.item() - math.log(4)) <= 1e-15


def test_confident_logits_loss_near_zero():
    logits = np.full((2, 5), -50.0)
    logits[0, 2] = logits[1, 4] = 50.0
    assert masked_cross_entropy(Tensor(logits), [2, 4], [True, True]).item() < 1e-40


def test_empty_mask_is_contract_error():
    with pytest.raises(ContractError):
        masked_cross_entropy(Tensor(np.zeros((2, 4))), [0, 1], [False, False])


def test_sequence_loss_seed13_scalar_oracle():
    dec = Decoder(CFG, seed=13)
    rng = np.random.default_rng(13)
    ids = [Vocab.BOS] + Vocab.encode("abcd") + [Vocab.EOS]
    img = rng.normal(size=(2, CFG.dim))
    x = np.concatenate([img, dec.embed_text(ids).data])
    seq = seq_of(x, n_img=2)
    n = len(seq)
    targets = np.full(n, -1)
    targets[2:n - 1] = ids[1:]
    mask = np.zeros(n, dtype=bool)
    mask[2:n - 1] = True
    with tt.no_grad():
        loss = dec.sequence_loss(seq, targets, mask).item()
        logits = dec.forward(seq).data
    total = 0.0
    for i in range(n):
        if mask[i]:
            row = logits[i].tolist()
            m = max(row)
            lse = m + math.log(sum(math.exp(v - m) for v in row))
            total += lse - row[targets[i]]
    assert abs(loss - total / mask.sum()) <= 1e-9


def test_sequence_loss_mask_must_be_text_only():
    dec = Decoder(CFG, seed=0)
    seq = seq_of(np.zeros((3, CFG.dim)), n_img=1)
    with pytest.raises(ContractError):
        dec.sequence_loss(seq, [1, 1, 1], [True, False, False])


def test_image_positions_contribute_no_loss_term():
    dec = Decoder(CFG, seed=6)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(6, CFG.dim))
    targets = np.array([-1, -1, 5, 7, 9, 11])
    mask = np.array([False, False, True, True, True, False])
    seq = seq_of(x, n_img=2)
    with tt.no_grad():
        logits = dec.forward(seq)
        loss = masked_cross_entropy(logits, targets, mask).item()
        # scrambling logits at unmasked rows leaves the loss untouched
        scrambled = logits.data.copy()
        scrambled[~mask] = rng.normal(size=scrambled[~mask].shape) * 100
        assert masked_cross_entropy(Tensor(scrambled), targets, mask).item() == loss


def test_loss_gradient_only_through_masked_rows():
    logits = tt.parameter(np.random.default_rng(0).normal(size=(4, 6)))
    tt.backward(masked_cross_entropy(logits, [0, 1, 2, 3], [False, True, False, True]))
    assert np.all(logits.grad[[0, 2]] == 0.0)
    assert np.all(logits.grad[[1, 3]] != 0.0)


def test_kv_cache_nbytes_empty():
    assert KVCache(3).nbytes() == 0
