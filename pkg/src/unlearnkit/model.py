"""A small decoder-only causal LM with exact log-probabilities and snapshots.

The model keeps every parameter as a named 2-D float64 matrix so that
parameter-space distances (see :mod:`unlearnkit.ot`) can treat matrices as
point clouds, and so checkpoints round-trip bit-exactly.  Forward passes are
deterministic functions of (parameters, input); training mutates parameters
on a single thread while read-only scoring may run against snapshots.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .data import EntityBundle
from .errors import EncodingError, NumericsError, ShapeMismatchError
from .util import stable_digest

CHECKPOINT_VERSION = 1

PAD, BOS, EOS = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")

Q_MARK = "Q:"
A_MARK = "A:"


class WordTokenizer:
    """Whitespace word-level tokenizer built from a fixed text collection.

    Unknown words raise :class:`EncodingError`; there is no <unk> token, the
    vocabulary is meant to be built from everything the experiment will see.
    """

    def __init__(self, words: Iterable[str]):
        vocab = list(SPECIAL_TOKENS)
        seen = set(vocab)
        for w in sorted(set(words) - seen):
            vocab.append(w)
        self.id_to_token = vocab
        self.token_to_id = {t: i for i, t in enumerate(vocab)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "WordTokenizer":
        words = set()
        for text in texts:
            words.update(text.split())
        words.update((Q_MARK, A_MARK))
        return cls(words)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            tid = self.token_to_id.get(word)
            if tid is None:
                raise EncodingError(f"word {word!r} is outside the vocabulary")
            ids.append(tid)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise EncodingError(f"token id {i} is outside the vocabulary")
            if i in (PAD, BOS, EOS):
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)

    def encode_prompt(self, question: str, prefix_text: str | None = None) -> list[int]:
        """[<bos>] [prefix words] Q: <question words> A:"""
        ids = [BOS]
        if prefix_text:
            ids.extend(self.encode(prefix_text))
        ids.extend(self.encode(f"{Q_MARK} {question} {A_MARK}"))
        return ids

    def encode_answer(self, answer: str, add_eos: bool = False) -> list[int]:
        ids = self.encode(answer)
        if add_eos:
            ids.append(EOS)
        return ids


def build_tokenizer(bundle: EntityBundle, extra_texts: Iterable[str] = ()) -> WordTokenizer:
    """Vocabulary over every text the bundle can produce, plus extras."""
    texts = list(extra_texts)
    for rec in (*bundle.forget_set, *bundle.retain_records):
        texts.extend([rec.question, rec.answer])
        if rec.paraphrased_answer:
            texts.append(rec.paraphrased_answer)
        if rec.perturbed_answers:
            texts.extend(rec.perturbed_answers)
        if rec.idk_answer:
            texts.append(rec.idk_answer)
    for rec in bundle.world_splits.all:
        texts.append(rec.question)
        texts.extend(rec.choices)
        texts.append(rec.paraphrased_answer)
        texts.extend(rec.perturbed_answers)
    return WordTokenizer.from_texts(texts)


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    context_length: int = 64
    hidden_size: int = 32
    num_layers: int = 2
    num_heads: int = 2
    mlp_ratio: int = 4
    init_std: float = 0.1
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_length": self.context_length,
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
            "init_std": self.init_std,
            "seed": self.seed,
            "dtype": self.dtype,
        }


@dataclass
class ParamSnapshot:
    """Deep-copied named weight matrices frozen at one point in training."""

    matrices: "OrderedDict[str, torch.Tensor]"
    step_tag: str = ""

    def __post_init__(self):
        self.matrices = OrderedDict(
            (name, t.detach().clone()) for name, t in self.matrices.items()
        )

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.matrices.items()}

    def params_hash(self) -> str:
        return stable_digest(
            [(name, t.numpy().tobytes()) for name, t in self.matrices.items()]
        )


class TinyDecoderLM:
    """2-layer-ish decoder-only transformer over a word vocabulary.

    All weights are 2-D matrices; RMS-norm scales are stored as (1, h) rows.
    """

    def __init__(self, config: LMConfig, tokenizer: WordTokenizer):
        if config.vocab_size != len(tokenizer):
            raise ValueError(
                f"config vocab_size {config.vocab_size} != tokenizer size {len(tokenizer)}"
            )
        self.config = config
        self.tokenizer = tokenizer
        self.params: "OrderedDict[str, torch.Tensor]" = self._init_params()

    def _init_params(self) -> "OrderedDict[str, torch.Tensor]":
        cfg = self.config
        gen = torch.Generator().manual_seed(cfg.seed)
        dt = cfg.torch_dtype
        h, v, m = cfg.hidden_size, cfg.vocab_size, cfg.hidden_size * cfg.mlp_ratio

        def rand(rows, cols, std):
            return torch.randn((rows, cols), generator=gen, dtype=dt) * std

        out_std = cfg.init_std / (2 * cfg.num_layers) ** 0.5
        params = OrderedDict()
        params["tok_embed"] = rand(v, h, cfg.init_std)
        params["pos_embed"] = rand(cfg.context_length, h, cfg.init_std)
        for i in range(cfg.num_layers):
            params[f"block{i}.attn_norm"] = torch.ones((1, h), dtype=dt)
            params[f"block{i}.wq"] = rand(h, h, cfg.init_std)
            params[f"block{i}.wk"] = rand(h, h, cfg.init_std)
            params[f"block{i}.wv"] = rand(h, h, cfg.init_std)
            params[f"block{i}.wo"] = rand(h, h, out_std)
            params[f"block{i}.mlp_norm"] = torch.ones((1, h), dtype=dt)
            params[f"block{i}.w_up"] = rand(h, m, cfg.init_std)
            params[f"block{i}.w_down"] = rand(m, h, out_std)
        params["final_norm"] = torch.ones((1, h), dtype=dt)
        params["lm_head"] = rand(h, v, cfg.init_std)
        for t in params.values():
            t.requires_grad_(True)
        return params

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.params.values())

    @staticmethod
    def _rms_norm(x: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + 1e-8) * scale

    def apply_params(
        self, params: Mapping[str, torch.Tensor], ids: torch.Tensor
    ) -> torch.Tensor:
        """Forward pass with an explicit parameter mapping; returns logits (B, T, V)."""
        cfg = self.config
        _, t = ids.shape
        if t > cfg.context_length:
            raise ValueError(
                f"sequence length {t} exceeds context_length {cfg.context_length}"
            )
        x = params["tok_embed"][ids] + params["pos_embed"][:t]
        nh, dh = cfg.num_heads, cfg.hidden_size // cfg.num_heads
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        for i in range(cfg.num_layers):
            xn = self._rms_norm(x, params[f"block{i}.attn_norm"])
            b = xn.shape[0]
            q = (xn @ params[f"block{i}.wq"]).view(b, t, nh, dh).transpose(1, 2)
            k = (xn @ params[f"block{i}.wk"]).view(b, t, nh, dh).transpose(1, 2)
            v = (xn @ params[f"block{i}.wv"]).view(b, t, nh, dh).transpose(1, 2)
            scores = (q @ k.transpose(-1, -2)) / dh**0.5
            scores = scores.masked_fill(mask, float("-inf"))
            ctx = torch.softmax(scores, dim=-1) @ v
            ctx = ctx.transpose(1, 2).reshape(b, t, cfg.hidden_size)
            x = x + ctx @ params[f"block{i}.wo"]
            xn = self._rms_norm(x, params[f"block{i}.mlp_norm"])
            x = x + torch.tanh(xn @ params[f"block{i}.w_up"]) @ params[f"block{i}.w_down"]
        x = self._rms_norm(x, params["final_norm"])
        return x @ params["lm_head"]

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.apply_params(self.params, ids)

    def log_probs(self, ids: torch.Tensor) -> torch.Tensor:
        """Next-token log-probabilities, normalized along the vocabulary."""
        return torch.log_softmax(self.forward(ids), dim=-1)

    def validate_ids(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not 0 <= i < self.config.vocab_size:
                raise EncodingError(f"token id {i} outside vocabulary of size {self.config.vocab_size}")

    def params_hash(self) -> str:
        return snapshot(self, "hash").params_hash()


@dataclass
class PromptedModel:
    """Evaluation-time view that prepends fixed instruction tokens.

    Parameters are shared with (not copied from) the base model.
    """

    base: TinyDecoderLM
    prefix_ids: tuple[int, ...]
    prefix_text: str = ""

    @property
    def config(self) -> LMConfig:
        return self.base.config

    @property
    def tokenizer(self) -> WordTokenizer:
        return self.base.tokenizer

    @property
    def params(self):
        return self.base.params

    def params_hash(self) -> str:
        return self.base.params_hash()


def _unwrap(model) -> tuple[TinyDecoderLM, list[int]]:
    if isinstance(model, PromptedModel):
        return model.base, list(model.prefix_ids)
    return model, []


def seq_logprob(model, prompt_tokens: Sequence[int], answer_tokens: Sequence[int]) -> float:
    """Sum of log P(answer_i | prompt, answer_<i) over the answer tokens."""
    base, prefix = _unwrap(model)
    prompt = prefix + list(prompt_tokens)
    answer = list(answer_tokens)
    base.validate_ids(prompt + answer)
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    if not answer:
        return 0.0
    total = len(prompt) + len(answer)
    if total > base.config.context_length:
        raise ValueError(
            f"sequence of {total} tokens exceeds context_length "
            f"{base.config.context_length}"
        )
    ids = torch.tensor([prompt + answer], dtype=torch.long)
    with torch.no_grad():
        lp = torch.log_softmax(base.forward(ids), dim=-1)[0]
    start = len(prompt)
    out = 0.0
    for j, tok in enumerate(answer):
        out += float(lp[start + j - 1, tok])
    return out


def grad(model: TinyDecoderLM, loss_fn) -> "OrderedDict[str, torch.Tensor]":
    """Gradients of a scalar loss w.r.t. every named parameter matrix."""
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        raise NumericsError(f"loss is not finite: {float(loss)}")
    names = list(model.params)
    tensors = [model.params[n] for n in names]
    if loss.grad_fn is None:
        grads = [torch.zeros_like(t) for t in tensors]
    else:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        grads = [
            g.detach().clone() if g is not None else torch.zeros_like(t)
            for g, t in zip(grads, tensors)
        ]
    return OrderedDict(zip(names, grads))


def greedy_decode(model, prompt_tokens: Sequence[int], max_new: int) -> list[int]:
    """Argmax decoding; stops at <eos> or max_new; ties pick the lowest id."""
    base, prefix = _unwrap(model)
    ids = prefix + list(prompt_tokens)
    base.validate_ids(ids)
    out: list[int] = []
    with torch.no_grad():
        for _ in range(max_new):
            if len(ids) >= base.config.context_length:
                break
            logits = base.forward(torch.tensor([ids], dtype=torch.long))[0, -1]
            nxt = int(np.argmax(logits.numpy()))
            if nxt == EOS:
                break
            out.append(nxt)
            ids.append(nxt)
    return out


def snapshot(model: TinyDecoderLM, tag: str = "") -> ParamSnapshot:
    return ParamSnapshot(matrices=OrderedDict(model.params), step_tag=tag)


def restore(model: TinyDecoderLM, snap: ParamSnapshot) -> None:
    if list(snap.matrices) != list(model.params):
        raise ShapeMismatchError(
            f"snapshot names {list(snap.matrices)} do not match model names"
        )
    for name, t in snap.matrices.items():
        if tuple(t.shape) != tuple(model.params[name].shape):
            raise ShapeMismatchError(
                f"shape mismatch for {name}: snapshot {tuple(t.shape)} vs "
                f"model {tuple(model.params[name].shape)}"
            )
    with torch.no_grad():
        for name, t in snap.matrices.items():
            model.params[name].copy_(t)


def save_checkpoint(model: TinyDecoderLM, path: str | Path, step_tag: str = "") -> Path:
    """Self-describing, versioned, bit-exact checkpoint container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.tokenizer.id_to_token,
        "step_tag": step_tag,
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for name, t in model.params.items():
        arrays[f"param/{name}"] = t.detach().numpy()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TinyDecoderLM, str]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        config = LMConfig(**meta["config"])
        tokenizer = WordTokenizer([])
        tokenizer.id_to_token = list(meta["vocab"])
        tokenizer.token_to_id = {t: i for i, t in enumerate(tokenizer.id_to_token)}
        model = TinyDecoderLM(config, tokenizer)
        with torch.no_grad():
            for name in model.params:
                arr = data[f"param/{name}"]
                if arr.shape != tuple(model.params[name].shape):
                    raise ShapeMismatchError(f"checkpoint shape mismatch for {name}")
                model.params[name].copy_(torch.from_numpy(arr))
        return model, meta.get("step_tag", "")
