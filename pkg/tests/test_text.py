import numpy as np
import pytest

from setn.autodiff import Adam, backward, sum_all
from setn.errors import ContractError, DataError
from setn.text import (CLS_ID, UNK_ID, MAX_TOKENS, TextEncoder, Vocab, pool,
                       tokenize)


@pytest.fixture
def vocab():
    # ids: a=3, b=4, steel=5, c=6, maker=7
    return Vocab(["a", "b", "steel", "c", "maker"])


def test_tokenize_known_words(vocab):
    assert tokenize("Steel maker", vocab) == [2, 5, 7]


def test_tokenize_unknown_word_falls_back_to_unk(vocab):
    assert tokenize("blorp", vocab) == [CLS_ID, UNK_ID]


def test_tokenize_truncates_to_512(vocab):
    text = " ".join(["steel"] * 600)
    ids = tokenize(text, vocab)
    assert len(ids) == MAX_TOKENS
    assert ids[0] == CLS_ID


def test_tokenize_empty_text_is_cls_only(vocab):
    assert tokenize("   ", vocab) == [CLS_ID]


def test_tokenize_rejects_empty_vocab():
    with pytest.raises(DataError):
        tokenize("x", Vocab([]))


def test_vocab_rejects_duplicates():
    with pytest.raises(DataError):
        Vocab(["x", "x"])


def test_vocab_file_roundtrip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.to_file(path)
    again = Vocab.from_file(path)
    assert again.tokens == vocab.tokens
    assert again.id_of("maker") == 7


def test_vocab_build_orders_by_frequency_then_alphabet():
    v = Vocab.build(["b b a", "a b c"])
    assert v.tokens == ["b", "a", "c"]
    assert v.id_of("b") == 3


# ---------------------------------------------------------------------------
# encoder


def _encoder(depth, dim=6, vocab_size=10, seed=0, max_len=32):
    return TextEncoder(vocab_size, dim, depth, np.random.default_rng(seed), max_len=max_len)


def test_depth_zero_encode_returns_raw_embedding_rows():
    enc = _encoder(depth=0)
    ids = [2, 5, 7]
    out = enc.encode(ids)
    assert np.array_equal(out.data, enc.token_emb.data[ids])


def test_encode_output_shape_for_any_depth():
    for depth in (0, 1, 2):
        enc = _encoder(depth)
        out = enc.encode([2, 3, 4, 5])
        assert out.data.shape == (4, 6)


def test_encode_rejects_bad_ids_and_lengths():
    enc = _encoder(1, max_len=4)
    with pytest.raises(DataError):
        enc.encode([])
    with pytest.raises(DataError):
        enc.encode([2, 99])
    with pytest.raises(DataError):
        enc.encode([2, 3, 4, 5, 6])


def test_encode_is_deterministic():
    enc = _encoder(2)
    a = enc.encode([2, 4, 6], training=False).data
    b = enc.encode([2, 4, 6], training=False).data
    assert np.array_equal(a, b)


def test_frozen_block_gets_no_gradient():
    enc = _encoder(depth=2)
    enc.blocks[0].set_trainable(False)
    enc.blocks[1].set_trainable(True)
    out = enc.encode([2, 5, 7])
    backward(sum_all(out))
    assert all(p.grad is None for _, p in enc.blocks[0].named_params())
    assert any(p.grad is not None for _, p in enc.blocks[1].named_params())


def test_set_trainable_policies():
    enc = _encoder(depth=2)
    enc.set_trainable("none")
    assert enc.trainable_flags() == [False, False]
    assert not enc.token_emb.requires_grad

    enc.set_trainable("last")
    assert enc.trainable_flags() == [False, True]
    assert not enc.token_emb.requires_grad

    enc.set_trainable("all")
    assert enc.trainable_flags() == [True, True]
    assert enc.token_emb.requires_grad


def test_set_trainable_last_requires_a_block():
    enc = _encoder(depth=0)
    with pytest.raises(ValueError):
        enc.set_trainable("last")


def test_policy_all_training_step_changes_embedding_table():
    enc = _encoder(depth=1)
    enc.set_trainable("all")
    before = enc.token_emb.data.copy()
    params = [p for _, p in enc.named_params() if p.requires_grad]
    backward(sum_all(enc.encode([2, 5, 7])))
    Adam(params, lr=0.01).step()
    assert not np.array_equal(before, enc.token_emb.data)


def test_frozen_parameters_identical_after_training_steps():
    enc = _encoder(depth=2)
    enc.set_trainable("last")
    frozen_before = {name: p.data.copy() for name, p in enc.named_params()
                     if not p.requires_grad}
    params = [p for _, p in enc.named_params() if p.requires_grad]
    opt = Adam(params, lr=0.05)
    for _ in range(3):
        backward(sum_all(enc.encode([2, 5, 7])))
        opt.step()
        opt.zero_grad()
    for name, p in enc.named_params():
        if name in frozen_before:
            assert np.array_equal(p.data, frozen_before[name]), name


# ---------------------------------------------------------------------------
# pooling


def test_pool_examples():
    from setn.autodiff import Tensor
    h = Tensor([[1.0, 3.0], [3.0, 5.0]])
    assert np.array_equal(pool(h, "mean").data, [2.0, 4.0])
    assert np.array_equal(pool(h, "max").data, [3.0, 5.0])
    assert np.array_equal(pool(h, "cls").data, [1.0, 3.0])


def test_pool_mean_permutation_invariant_cls_not():
    from setn.autodiff import Tensor
    h = Tensor([[1.0, 3.0], [3.0, 5.0]])
    swapped = Tensor([[3.0, 5.0], [1.0, 3.0]])
    assert np.array_equal(pool(h, "mean").data, pool(swapped, "mean").data)
    assert not np.array_equal(pool(h, "cls").data, pool(swapped, "cls").data)


def test_pool_rejects_empty_and_unknown():
    from setn.autodiff import Tensor
    with pytest.raises(ContractError):
        pool(Tensor(np.zeros((0, 3))), "mean")
    with pytest.raises(ValueError):
        pool(Tensor(np.ones((2, 2))), "median")
