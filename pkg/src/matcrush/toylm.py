"""A desk-scale masked language model used to measure compression damage.

The corpus is synthetic (an order-2 Markov chain with Zipfian marginals) so the
whole pipeline runs offline. Weight matrices follow the (out, in) layout of
``torch.nn.Linear``; addressable targets are ``tok_emb`` and
``layer.<i>.{query,key,value,out_dense}``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tensor_io import TensorBundle

MASK_ID = 0
LN_EPS = 1e-5
TARGET_KINDS = ("query", "key", "value", "out_dense")


@dataclass(frozen=True)
class ToyLMConfig:
    vocab: int = 256
    model_dim: int = 64
    layers: int = 4
    heads: int = 4
    ff_dim: int = 128
    max_seq: int = 64
    mask_prob: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    def target_names(self) -> list[str]:
        names = ["tok_emb"]
        for i in range(self.layers):
            names += [f"layer.{i}.{kind}" for kind in TARGET_KINDS]
        return names


# ---------------------------------------------------------------------------
# corpus


@dataclass
class TokenCorpus:
    train: np.ndarray
    test: np.ndarray
    seed: int
    vocab: int

    def unigram_probs(self) -> np.ndarray:
        counts = np.bincount(self.train, minlength=self.vocab).astype(np.float64)
        counts[1:] += 1.0  # add-one smoothing over real tokens; MASK never occurs
        return counts / counts.sum()

    @property
    def unigram_entropy(self) -> float:
        p = self.unigram_probs()
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    def unigram_perplexity(self, eval_set: "EvalSet") -> float:
        """Perplexity of always predicting the training unigram distribution."""
        with np.errstate(divide="ignore"):
            logp = np.log(self.unigram_probs())
        labels = np.concatenate([b.labels.numpy() for b in eval_set.batches])
        return float(np.exp(-logp[labels].mean()))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        data = np.concatenate([self.train, self.test]).astype("<u2")
        path.write_bytes(data.tobytes())
        meta = {"seed": self.seed, "vocab": self.vocab, "train_tokens": int(self.train.size),
                "test_tokens": int(self.test.size), "unigram_entropy": self.unigram_entropy}
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TokenCorpus":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        data = np.frombuffer(path.read_bytes(), dtype="<u2").astype(np.int64)
        n_train = meta["train_tokens"]
        if data.size != n_train + meta["test_tokens"]:
            raise ValueError(f"corpus {path} has {data.size} tokens, sidecar says {n_train + meta['test_tokens']}")
        return cls(data[:n_train], data[n_train:], meta["seed"], meta["vocab"])


def generate_corpus(seed: int, train_tokens: int, test_tokens: int, vocab: int = 256,
                    max_seq: int = 64, zipf_s: float = 1.0, classes: int = 8, class_favs: int = 2,
                    boost_prev: float = 3.0, boost_prev2: float = 1.5, boosts: int = 3,
                    token_boost: float = 3.0) -> TokenCorpus:
    """Sample one seeded order-2 Markov stream and split it into train and test.

    Every token gets a Zipf base weight and a latent class. ``p(t | a, b)`` is
    proportional to that weight times class-level boosts (the class of ``b``
    favours ``class_favs`` successor classes, the class of ``a`` another
    ``class_favs``) times token-level boosts (``b`` favours ``boosts`` specific
    successors). Shared class structure plus per-token idiosyncrasy gives the
    LM weights with a decaying, but not degenerate, spectrum.
    """
    if train_tokens < max_seq or test_tokens < max_seq:
        raise ValueError(f"token counts must be at least max_seq={max_seq}")
    rng = np.random.default_rng(seed)
    real = vocab - 1  # id 0 is reserved for [MASK]
    zipf = 1.0 / np.arange(1, real + 1) ** zipf_s
    zipf = zipf[rng.permutation(real)]
    cls = rng.integers(classes, size=real)

    def class_table(strength: float) -> np.ndarray:
        t = np.zeros((classes, classes))
        for a in range(classes):
            t[a, rng.choice(classes, size=class_favs, replace=False)] = strength
        return np.exp(t[:, cls])

    prev_tab = class_table(boost_prev)
    prev2_tab = class_table(boost_prev2)
    tok_tab = np.ones((real, real))
    for a in range(real):
        if boosts:
            tok_tab[a, rng.choice(real, size=boosts, replace=False)] = math.exp(token_boost)

    total = train_tokens + test_tokens
    out = np.empty(total, dtype=np.int64)
    u = rng.random(total)
    a, b = rng.integers(real), rng.integers(real)
    for i in range(total):
        w = zipf * prev_tab[cls[b]] * prev2_tab[cls[a]] * tok_tab[b]
        c = np.cumsum(w)
        t = int(np.searchsorted(c, u[i] * c[-1], side="right"))
        t = min(t, real - 1)
        out[i] = t
        a, b = b, t
    out += 1
    return TokenCorpus(out[:train_tokens].copy(), out[train_tokens:].copy(), seed, vocab)


# ---------------------------------------------------------------------------
# masking


@dataclass
class MLMBatch:
    inputs: torch.Tensor   # (B, T) long, corrupted
    positions: torch.Tensor  # (N, 2) long, (row, col) of predicted slots
    labels: torch.Tensor   # (N,) long


@dataclass
class EvalSet:
    batches: list[MLMBatch]
    seed: int

    @property
    def n_predictions(self) -> int:
        return sum(int(b.labels.numel()) for b in self.batches)


def mask_tokens(seqs: np.ndarray, rng: np.random.Generator, vocab: int, mask_prob: float) -> MLMBatch:
    """BERT corruption: pick ``mask_prob`` of slots, then 80% [MASK], 10% random, 10% unchanged."""
    seqs = np.asarray(seqs, dtype=np.int64)
    chosen = rng.random(seqs.shape) < mask_prob
    if not chosen.any():
        chosen[0, rng.integers(seqs.shape[1])] = True
    roll = rng.random(seqs.shape)
    randoms = rng.integers(1, vocab, size=seqs.shape)
    inputs = seqs.copy()
    inputs[chosen & (roll < 0.8)] = MASK_ID
    swap = chosen & (roll >= 0.8) & (roll < 0.9)
    inputs[swap] = randoms[swap]
    rows, cols = np.nonzero(chosen)
    return MLMBatch(torch.from_numpy(inputs), torch.from_numpy(np.stack([rows, cols], axis=1)),
                    torch.from_numpy(seqs[rows, cols]))


def make_eval_set(tokens: np.ndarray, cfg: ToyLMConfig, seed: int, batch_size: int = 64) -> EvalSet:
    """Chop ``tokens`` into non-overlapping sequences and fix one mask realization."""
    T = cfg.max_seq
    n_seq = tokens.size // T
    if n_seq == 0:
        raise ValueError("evaluation corpus shorter than one sequence")
    seqs = np.asarray(tokens[: n_seq * T], dtype=np.int64).reshape(n_seq, T)
    rng = np.random.default_rng(seed)
    batches = [mask_tokens(seqs[i : i + batch_size], rng, cfg.vocab, cfg.mask_prob)
               for i in range(0, n_seq, batch_size)]
    return EvalSet(batches, seed)


def mlm_batches(tokens: np.ndarray, cfg: ToyLMConfig, n_batches: int, batch_size: int, seed: int) -> list[MLMBatch]:
    """Randomly placed training windows, each batch independently masked."""
    rng = np.random.default_rng(seed)
    T = cfg.max_seq
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    for _ in range(n_batches):
        starts = rng.integers(0, tokens.size - T + 1, size=batch_size)
        seqs = tokens[starts[:, None] + np.arange(T)]
        out.append(mask_tokens(seqs, rng, cfg.vocab, cfg.mask_prob))
    return out


# ---------------------------------------------------------------------------
# model


@dataclass
class ToyLM:
    cfg: ToyLMConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "ToyLM":
        return ToyLM(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def to_bundle(self, extra: dict | None = None) -> TensorBundle:
        return TensorBundle(dict(self.params), {"producer": "matcrush.toylm", "config": asdict(self.cfg),
                                                **(extra or {})})

    @classmethod
    def from_bundle(cls, bundle: TensorBundle) -> "ToyLM":
        cfg = ToyLMConfig(**bundle.manifest["config"])
        return cls(cfg, {k: v.copy() for k, v in bundle.entries.items()})

    def logits(self, inputs: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return forward(_tensors(self.params), self.cfg, inputs)


def init_model(cfg: ToyLMConfig) -> ToyLM:
    gen = torch.Generator().manual_seed(cfg.seed)
    d, f, V = cfg.model_dim, cfg.ff_dim, cfg.vocab

    def normal(*shape):
        return (torch.randn(*shape, generator=gen, dtype=torch.float64) * 0.02).numpy()

    p = {"tok_emb": normal(V, d), "pos_emb": normal(cfg.max_seq, d),
         "emb_ln.g": np.ones((1, d)), "emb_ln.b": np.zeros((1, d))}
    for i in range(cfg.layers):
        pre = f"layer.{i}."
        for name in ("query", "key", "value", "attn_out"):
            p[pre + name] = normal(d, d)
            p[pre + name + "_b"] = np.zeros((1, d))
        p[pre + "ff_in"] = normal(f, d)
        p[pre + "ff_in_b"] = np.zeros((1, f))
        p[pre + "out_dense"] = normal(d, f)
        p[pre + "out_dense_b"] = np.zeros((1, d))
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".g"] = np.ones((1, d))
            p[pre + ln + ".b"] = np.zeros((1, d))
    p["head.w"] = normal(V, d)
    p["head.b"] = np.zeros((1, V))
    return ToyLM(cfg, p)


def _tensors(params: dict[str, np.ndarray], grad_for: Iterable[str] = ()) -> dict[str, torch.Tensor]:
    grad_for = set(grad_for)
    return {k: torch.tensor(v, dtype=torch.float64, requires_grad=k in grad_for) for k, v in params.items()}


def _ln(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], g[0], b[0], LN_EPS)


def forward(tp: dict[str, torch.Tensor], cfg: ToyLMConfig, inputs: torch.Tensor) -> torch.Tensor:
    B, T = inputs.shape
    d, h = cfg.model_dim, cfg.heads
    dh = d // h
    x = tp["tok_emb"][inputs] + tp["pos_emb"][:T]
    x = _ln(x, tp["emb_ln.g"], tp["emb_ln.b"])
    for i in range(cfg.layers):
        pre = f"layer.{i}."

        def lin(z, name):
            return z @ tp[pre + name].T + tp[pre + name + "_b"][0]

        q = lin(x, "query").view(B, T, h, dh).transpose(1, 2)
        k = lin(x, "key").view(B, T, h, dh).transpose(1, 2)
        v = lin(x, "value").view(B, T, h, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = _ln(x + lin(ctx, "attn_out"), tp[pre + "ln1.g"], tp[pre + "ln1.b"])
        ff = lin(F.gelu(lin(x, "ff_in")), "out_dense")
        x = _ln(x + ff, tp[pre + "ln2.g"], tp[pre + "ln2.b"])
    return x @ tp["head.w"].T + tp["head.b"][0]


def mlm_loss(tp: dict[str, torch.Tensor], cfg: ToyLMConfig, batch: MLMBatch, reduction: str = "mean") -> torch.Tensor:
    logits = forward(tp, cfg, batch.inputs)
    picked = logits[batch.positions[:, 0], batch.positions[:, 1]]
    return F.cross_entropy(picked, batch.labels, reduction=reduction)


def train_toylm(corpus: TokenCorpus, cfg: ToyLMConfig, steps: int, batch_size: int = 16,
                lr: float = 2e-3, warmup: int = 100, log: Callable[[int, float], None] | None = None) -> ToyLM:
    """Masked-LM pre-training with Adam, linear warmup and linear decay to 10%."""
    if corpus.train.size < cfg.max_seq:
        raise ValueError("training corpus shorter than one sequence")
    model = init_model(cfg)
    tp = _tensors(model.params, grad_for=model.params)
    opt = torch.optim.Adam(list(tp.values()), lr=lr, foreach=False)
    rng = np.random.default_rng(cfg.seed + 1)
    T = cfg.max_seq
    tokens = np.asarray(corpus.train, dtype=np.int64)
    for step in range(steps):
        frac = (step + 1) / warmup if step < warmup else 1.0 - 0.9 * (step - warmup) / max(1, steps - warmup)
        for group in opt.param_groups:
            group["lr"] = lr * frac
        starts = rng.integers(0, tokens.size - T + 1, size=batch_size)
        batch = mask_tokens(tokens[starts[:, None] + np.arange(T)], rng, cfg.vocab, cfg.mask_prob)
        opt.zero_grad(set_to_none=True)
        loss = mlm_loss(tp, cfg, batch)
        if not torch.isfinite(loss):
            raise RuntimeError(f"toy LM training diverged at step {step}")
        loss.backward()
        opt.step()
        if log is not None and (step % 100 == 0 or step == steps - 1):
            log(step, loss.item())
    return ToyLM(cfg, {k: v.detach().numpy().copy() for k, v in tp.items()})


def perplexity(model: ToyLM | Callable[[torch.Tensor], torch.Tensor], eval_set: EvalSet) -> float:
    """``exp`` of the mean cross-entropy over every masked slot in ``eval_set``."""
    if isinstance(model, ToyLM):
        tp = _tensors(model.params)
        logits_fn = lambda x: forward(tp, model.cfg, x)  # noqa: E731
    else:
        logits_fn = model
    losses = []
    with torch.no_grad():
        for b in eval_set.batches:
            logits = logits_fn(b.inputs)
            picked = logits[b.positions[:, 0], b.positions[:, 1]]
            losses.append(F.cross_entropy(picked, b.labels, reduction="none"))
    return float(torch.exp(torch.cat(losses).mean()))


def substitute(model: ToyLM, name: str, matrix: np.ndarray) -> ToyLM:
    if name not in model.params:
        raise KeyError(f"unknown matrix {name!r}")
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != model.params[name].shape:
        raise ValueError(f"shape mismatch for {name!r}: {matrix.shape} vs {model.params[name].shape}")
    out = model.copy()
    out.params[name] = matrix.copy()
    return out


def substitute_many(model: ToyLM, replacements: dict[str, np.ndarray]) -> ToyLM:
    out = model
    for name, mat in replacements.items():
        out = substitute(out, name, mat)
    return out


def fisher_oracle(model: ToyLM, targets: Sequence[str]) -> Callable[[MLMBatch], dict[str, np.ndarray]]:
    """Gradient oracle: batch -> d(masked-LM cross-entropy)/d(target) for each target only."""
    targets = list(targets)
    for t in targets:
        if t not in model.params:
            raise KeyError(f"unknown target {t!r}")

    def oracle(batch: MLMBatch) -> dict[str, np.ndarray]:
        tp = _tensors(model.params, grad_for=targets)
        loss = mlm_loss(tp, model.cfg, batch)
        grads = torch.autograd.grad(loss, [tp[t] for t in targets])
        return {t: g.numpy().copy() for t, g in zip(targets, grads)}

    return oracle


def permute_heads(model: ToyLM, layer: int, order: Sequence[int]) -> ToyLM:
    """Reorder attention heads of one layer, moving every weight that touches them."""
    cfg = model.cfg
    dh = cfg.model_dim // cfg.heads
    idx = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in order])
    out = model.copy()
    pre = f"layer.{layer}."
    for name in ("query", "key", "value"):
        out.params[pre + name] = model.params[pre + name][idx]
        out.params[pre + name + "_b"] = model.params[pre + name + "_b"][:, idx]
    out.params[pre + "attn_out"] = model.params[pre + "attn_out"][:, idx]
    return out
