import numpy as np
import pytest
import torch

from matcrush.fisher import estimate_fisher
from matcrush.toylm import (
    MASK_ID,
    TokenCorpus,
    ToyLM,
    ToyLMConfig,
    _tensors,
    fisher_oracle,
    generate_corpus,
    init_model,
    make_eval_set,
    mask_tokens,
    mlm_batches,
    mlm_loss,
    permute_heads,
    perplexity,
    substitute,
    train_toylm,
)

MICRO = ToyLMConfig(vocab=16, model_dim=8, layers=2, heads=2, ff_dim=12, max_seq=8, seed=3)


@pytest.fixture(scope="module")
def micro_corpus():
    return generate_corpus(1, 2000, 400, vocab=MICRO.vocab, max_seq=MICRO.max_seq)


def test_config_names():
    names = ToyLMConfig().target_names()
    assert names[0] == "tok_emb" and len(names) == 1 + 4 * 4
    assert "layer.3.out_dense" in names
    with pytest.raises(ValueError):
        ToyLMConfig(model_dim=10, heads=4)


def test_corpus_deterministic_and_seeded():
    a = generate_corpus(0, 500, 100)
    b = generate_corpus(0, 500, 100)
    c = generate_corpus(1, 500, 100)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)
    assert not np.array_equal(a.train[:64], c.train[:64])
    assert a.train.min() >= 1 and a.train.max() < 256  # id 0 is reserved


def test_corpus_too_short():
    with pytest.raises(ValueError):
        generate_corpus(0, 10, 100)


def test_corpus_zipfian(lm_corpus):
    freq = np.sort(np.bincount(lm_corpus.train, minlength=256))[::-1]
    assert 5 <= freq[0] / freq[9] <= 20
    assert 0 < lm_corpus.unigram_entropy < np.log(255)


def test_corpus_save_load(tmp_path, micro_corpus):
    micro_corpus.save(tmp_path / "c.tok")
    raw = (tmp_path / "c.tok").read_bytes()
    assert len(raw) == 2 * (micro_corpus.train.size + micro_corpus.test.size)
    back = TokenCorpus.load(tmp_path / "c.tok")
    assert np.array_equal(back.train, micro_corpus.train) and np.array_equal(back.test, micro_corpus.test)
    assert back.seed == micro_corpus.seed


def test_masking_rule():
    rng = np.random.default_rng(0)
    seqs = rng.integers(1, 256, size=(400, 64))
    b = mask_tokens(seqs, rng, 256, 0.15)
    frac = b.labels.numel() / seqs.size
    assert 0.14 < frac < 0.16
    picked = b.inputs[b.positions[:, 0], b.positions[:, 1]].numpy()
    labels = b.labels.numpy()
    assert 0.78 < np.mean(picked == MASK_ID) < 0.82
    assert np.array_equal(labels, seqs[b.positions[:, 0], b.positions[:, 1]])


def test_eval_set_fixed_by_seed(micro_corpus):
    a = make_eval_set(micro_corpus.test, MICRO, 5)
    b = make_eval_set(micro_corpus.test, MICRO, 5)
    assert all(torch.equal(x.inputs, y.inputs) and torch.equal(x.labels, y.labels) for x, y in zip(a.batches, b.batches))


def test_uniform_predictor_perplexity(micro_corpus):
    ev = make_eval_set(micro_corpus.test, MICRO, 0)
    ppl = perplexity(lambda x: torch.zeros(*x.shape, 256, dtype=torch.float64), ev)
    assert ppl == pytest.approx(256, abs=1e-6)


def test_oracle_predictor_perplexity(micro_corpus):
    ev = make_eval_set(micro_corpus.test, MICRO, 0)
    truth = {id(b.inputs): b for b in ev.batches}

    def oracle(x):
        b = truth[id(x)]
        out = torch.full((*x.shape, MICRO.vocab), -1e4, dtype=torch.float64)
        out[b.positions[:, 0], b.positions[:, 1], b.labels] = 0.0
        return out

    assert perplexity(oracle, ev) == pytest.approx(1.0, abs=1e-12)


def test_untrained_near_uniform(lm_corpus):
    cfg = ToyLMConfig()
    ev = make_eval_set(lm_corpus.test, cfg, 0)
    ppl = perplexity(init_model(cfg), ev)
    assert cfg.vocab / 2 <= ppl <= cfg.vocab * 2


def test_trained_beats_unigram(lm_model, lm_corpus, lm_eval):
    assert perplexity(lm_model, lm_eval) < lm_corpus.unigram_perplexity(lm_eval)


def test_identity_substitution(lm_model, lm_eval):
    base = perplexity(lm_model, lm_eval)
    same = substitute(lm_model, "tok_emb", lm_model.params["tok_emb"])
    assert abs(perplexity(same, lm_eval) - base) <= 1e-9


def test_zero_embedding_degrades(lm_model, lm_eval):
    base = perplexity(lm_model, lm_eval)
    zero = substitute(lm_model, "tok_emb", np.zeros_like(lm_model.params["tok_emb"]))
    assert perplexity(zero, lm_eval) >= base
    assert lm_model.params["tok_emb"].any()  # original untouched


def test_substitute_errors(lm_model):
    with pytest.raises(KeyError):
        substitute(lm_model, "layer.9.key", np.zeros((64, 64)))
    with pytest.raises(ValueError):
        substitute(lm_model, "tok_emb", np.zeros((3, 3)))


@pytest.mark.parametrize("order", [[1, 0, 3, 2], [3, 2, 1, 0]])
def test_head_permutation_invariance(lm_model, lm_eval, order):
    base = perplexity(lm_model, lm_eval)
    assert abs(perplexity(permute_heads(lm_model, 1, order), lm_eval) - base) <= 1e-9


def test_fisher_oracle_finite_differences(micro_corpus):
    model = init_model(MICRO)
    rng = np.random.default_rng(0)
    for v in model.params.values():
        v += 0.3 * rng.standard_normal(v.shape)
    batch = mlm_batches(micro_corpus.train, MICRO, 1, 4, seed=2)[0]
    targets = ["tok_emb", "layer.1.key", "layer.0.out_dense"]
    grads = fisher_oracle(model, targets)(batch)
    h = 1e-5

    def loss():
        with torch.no_grad():
            return float(mlm_loss(_tensors(model.params), MICRO, batch))

    for name in targets:
        W = model.params[name]
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            orig = W[idx]
            W[idx] = orig + h
            up = loss()
            W[idx] = orig - h
            down = loss()
            W[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        rel = np.abs(grads[name] - fd) / (np.abs(grads[name]) + 1e-8)
        assert rel.max() <= 1e-4, name


def test_fisher_oracle_only_targets(micro_corpus):
    model = init_model(MICRO)
    batch = mlm_batches(micro_corpus.train, MICRO, 1, 4, seed=0)[0]
    assert set(fisher_oracle(model, ["layer.0.query"])(batch)) == {"layer.0.query"}
    with pytest.raises(KeyError):
        fisher_oracle(model, ["nope"])


def test_fisher_repeatable(micro_corpus):
    model = init_model(MICRO)
    data = lambda: mlm_batches(micro_corpus.train, MICRO, 3, 4, seed=7)  # noqa: E731
    a = estimate_fisher(fisher_oracle(model, ["tok_emb"]), data(), ["tok_emb"])
    b = estimate_fisher(fisher_oracle(model, ["tok_emb"]), data(), ["tok_emb"])
    assert a.elementwise["tok_emb"].tobytes() == b.elementwise["tok_emb"].tobytes()


def test_training_bit_identical(micro_corpus):
    a = train_toylm(micro_corpus, MICRO, 15, batch_size=4)
    b = train_toylm(micro_corpus, MICRO, 15, batch_size=4)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_bundle_round_trip(micro_corpus):
    model = init_model(MICRO)
    back = ToyLM.from_bundle(model.to_bundle({"note": 1}))
    assert back.cfg == MICRO
    assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)


def test_all_params_two_dimensional():
    assert all(v.ndim == 2 for v in init_model(MICRO).params.values())
