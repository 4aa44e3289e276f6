import numpy as np
import pytest

from tspmn.corpus import SynthSpec, generate_synthetic_world
from tspmn.encoder import (
    EncodedStates,
    ModelConfig,
    encode,
    encode_batch,
    grad_check,
    init_params,
    param_shapes,
    relative_error,
)
from tspmn.packing import (
    TermSequence,
    assemble_msf_example,
    assemble_pretrain_example,
    collate,
    pack_term_sequences,
)
from tspmn.terminology import make_dialogue_terms_pairs
from tspmn.textcodec import build_vocab
from tspmn.training import init_model_params, make_loss_fn
from tspmn.util import DataError, NumericalError


@pytest.fixture(scope="module")
def setup():
    spec = SynthSpec(
        term_count=8,
        paraphrases_per_term=(1, 1),
        dialogue_count=12,
        query_count=12,
        terms_per_query=(1, 3),
        seed=31,
    )
    world = generate_synthetic_world(spec)
    pairs = [
        p
        for p in make_dialogue_terms_pairs(world.dictionary, world.dialogues)
        if p.matches
    ]
    vocab = build_vocab(world.dictionary, (t for p in pairs for _, t in p.turns))
    return world, pairs, vocab


def _config(vocab, **kw):
    return ModelConfig(vocab_size=len(vocab), max_len=128, **kw)


def test_init_deterministic(setup):
    _, _, vocab = setup
    config = _config(vocab)
    a = init_params(config, 7)
    b = init_params(config, 7)
    assert set(a) == set(param_shapes(config))
    for name in a:
        assert np.array_equal(a[name], b[name]), name
    c = init_params(config, 8)
    assert not np.array_equal(a["tok_emb"], c["tok_emb"])


def test_init_layer_norms_are_identity(setup):
    _, _, vocab = setup
    params = init_params(_config(vocab), 0)
    assert (params["layer0.ln1_g"] == 1.0).all()
    assert (params["layer0.ln1_b"] == 0.0).all()
    assert (params["final_ln_g"] == 1.0).all()
    assert (params["layer1.bq"] == 0.0).all()


def test_init_weight_statistics(setup):
    _, _, vocab = setup
    params = init_params(_config(vocab), 3)
    w = params["layer0.wq"]  # 64 x 64
    sigma = 0.02
    assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
    assert np.abs(w).max() <= 2 * sigma + 1e-9


def test_init_respects_custom_std(setup):
    _, _, vocab = setup
    params = init_params(_config(vocab, init_std=0.1), 3)
    w = params["layer0.wq"]
    assert 0.05 < w.std() < 0.11


def test_config_validation():
    with pytest.raises(DataError):
        ModelConfig(vocab_size=10, hidden=30, heads=4).validate()
    with pytest.raises(DataError):
        ModelConfig(vocab_size=10, dropout=1.0).validate()
    with pytest.raises(DataError):
        ModelConfig(vocab_size=0).validate()


def _example(setup, max_len=128):
    world, _, vocab = setup
    seq = TermSequence(term_ids=(0, 1, 2))
    return assemble_msf_example(
        vocab, world.dictionary, seq, world.train[0].query, {0}, max_len
    )


def test_encode_shapes_and_views(setup):
    world, _, vocab = setup
    config = _config(vocab)
    params = init_params(config, 1)
    ex = _example(setup)
    states = encode(params, config, ex)
    assert isinstance(states, EncodedStates)
    assert states.states.shape == (len(ex.token_ids), config.hidden)
    assert states.h_cls.shape == (config.hidden,)
    assert states.h_eot.shape == (3, config.hidden)
    assert len(states.sep_positions) == 2
    assert np.isfinite(states.states).all()


def test_encode_deterministic_in_eval_mode(setup):
    world, _, vocab = setup
    config = _config(vocab)
    params = init_params(config, 1)
    ex = _example(setup)
    a = encode(params, config, ex).states
    b = encode(params, config, ex).states
    assert np.array_equal(a, b)


def test_dropout_changes_states_only_in_train_mode(setup):
    world, _, vocab = setup
    config = _config(vocab, dropout=0.2)
    params = init_params(config, 1)
    ex = _example(setup)
    eval_states = encode(params, config, ex, train_mode=False).states
    train_states = encode(params, config, ex, train_mode=True, seed=5).states
    assert not np.array_equal(eval_states, train_states)
    again = encode(params, config, ex, train_mode=True, seed=5).states
    assert np.array_equal(train_states, again)


def test_attention_rows_sum_to_one(setup):
    world, _, vocab = setup
    config = _config(vocab)
    params = init_params(config, 1)
    ex = _example(setup)
    states = encode(params, config, ex)
    for layer in states.tape.layers:
        sums = layer["attn"].sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-6)


def test_padding_receives_zero_attention(setup):
    world, _, vocab = setup
    config = _config(vocab)
    params = init_params(config, 1)
    short = _example(setup, max_len=32)
    long = _example(setup, max_len=128)
    batch = collate([short, long], pad_id=vocab.pad_id)
    states, tape = encode_batch(params, config, batch)
    pad_start = len(short.token_ids)
    for layer in tape.layers:
        attn = layer["attn"]
        assert (attn[0, :, :, pad_start:] == 0.0).all()


def test_padding_does_not_change_real_states(setup):
    world, _, vocab = setup
    config = _config(vocab)
    params = init_params(config, 1)
    short = _example(setup, max_len=32)
    long = _example(setup, max_len=128)
    alone = encode(params, config, short).states
    batch = collate([short, long], pad_id=vocab.pad_id)
    states, _ = encode_batch(params, config, batch)
    padded = states[0, : len(short.token_ids)]
    assert np.allclose(alone, padded, atol=1e-5)


def test_layer_norm_statistics(setup):
    world, _, vocab = setup
    config = _config(vocab)
    params = init_params(config, 1)
    ex = _example(setup)
    states = encode(params, config, ex)
    # final layer norm has unit gain and zero bias at init, so rows of the
    # output are standardized
    real = states.states
    assert np.allclose(real.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(real.var(axis=-1), 1.0, atol=1e-4)


def test_encode_rejects_bad_inputs(setup):
    world, _, vocab = setup
    config = _config(vocab)
    params = init_params(config, 1)
    ex = _example(setup)
    bad = type(ex)(
        token_ids=[len(vocab) + 5] + ex.token_ids[1:],
        segment_ids=ex.segment_ids,
        eot_positions=ex.eot_positions,
        term_ids=ex.term_ids,
        labels=ex.labels,
    )
    with pytest.raises(DataError, match="vocabulary"):
        encode(params, config, bad)
    config_small = _config(vocab)
    tiny = ModelConfig(vocab_size=len(vocab), max_len=8)
    with pytest.raises(DataError, match="max_len"):
        encode(init_params(tiny, 0), tiny, ex)


# -- gradient checking --------------------------------------------------------


def _f64_setup(setup, with_masks):
    world, pairs, vocab = setup
    config = ModelConfig(vocab_size=len(vocab), max_len=128, dropout=0.0, dtype="float64")
    params = init_model_params(config, 11)
    if with_masks:
        examples = [
            assemble_pretrain_example(vocab, world.dictionary, p, 4, 0.5, 60 + i, 128)
            for i, p in enumerate(pairs[:2])
        ]
    else:
        seqs = pack_term_sequences(range(len(world.dictionary)), 4)
        examples = [
            assemble_msf_example(
                vocab, world.dictionary, seqs[0], q.query, q.gold_term_ids, 128
            )
            for q in world.train[:2]
        ]
    return config, params, collate(examples, pad_id=vocab.pad_id)


def test_grad_check_matching_loss(setup):
    config, params, batch = _f64_setup(setup, with_masks=False)
    err = grad_check(params, make_loss_fn(config, batch, "match"), sample_count=80, seed=1)
    assert err < 1e-6


def test_grad_check_mask_loss(setup):
    config, params, batch = _f64_setup(setup, with_masks=True)
    err = grad_check(params, make_loss_fn(config, batch, "mlm"), sample_count=80, seed=2)
    assert err < 1e-6


def test_grad_check_combined_loss(setup):
    config, params, batch = _f64_setup(setup, with_masks=True)
    err = grad_check(
        params, make_loss_fn(config, batch, "pretrain", lam=0.9), sample_count=80, seed=3
    )
    assert err < 1e-6


def test_unused_embedding_has_zero_gradient(setup):
    world, pairs, vocab = setup
    config, params, batch = _f64_setup(setup, with_masks=False)
    used = set(batch.token_ids.ravel().tolist())
    unused = next(i for i in range(len(vocab)) if i not in used)
    loss_fn = make_loss_fn(config, batch, "match")
    _, grads = loss_fn(params, True)
    assert np.abs(grads["tok_emb"][unused]).max() == 0.0
    # finite difference agrees
    step = 1e-5
    params["tok_emb"][unused, 0] += step
    up, _ = loss_fn(params, False)
    params["tok_emb"][unused, 0] -= 2 * step
    down, _ = loss_fn(params, False)
    params["tok_emb"][unused, 0] += step
    assert abs((up - down) / (2 * step)) < 1e-8


def test_grad_check_rejects_non_finite(setup):
    config, params, batch = _f64_setup(setup, with_masks=False)

    def bad_loss(params, want):
        return float("nan"), {}

    with pytest.raises(NumericalError):
        grad_check(params, bad_loss, sample_count=1)


def test_relative_error_definition():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-9)
