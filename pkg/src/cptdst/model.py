"""Small encoder-decoder transformer used as the frozen backbone.

A soft prompt is spliced into the encoder input right after each example's
real tokens, so the encoder sees ``[x; Q; P]`` followed by padding. Positions
are fixed sinusoids; the output projection is tied to the token embedding.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor
from .errors import ContractError, NonFiniteError
from .vocab import Vocab

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 160
    prompt_length: int = 20
    d_ff: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "prompt_length"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.max_seq_len < self.prompt_length + 8:
            raise ContractError("max_seq_len must be at least prompt_length + 8")
        if self.d_ff < 0:
            raise ContractError("d_ff must be non-negative")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model


def count_tunable_params(config: ModelConfig | int, d_model: int | None = None) -> int:
    """Soft-prompt size m * d, from a model config or from ``(prompt_length, d_model)``."""
    if isinstance(config, ModelConfig):
        return config.prompt_length * config.d_model
    if d_model is None or min(config, d_model) < 1:
        raise ContractError("count_tunable_params needs a positive prompt length and model width")
    return int(config) * int(d_model)


@dataclass
class SoftPrompt:
    task_id: str
    embeddings: Tensor

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ContractError("prompt embeddings must be a matrix")
        if not np.isfinite(self.embeddings.data).all():
            raise NonFiniteError("prompt has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.embeddings.shape

    def copy(self, task_id: str | None = None) -> "SoftPrompt":
        return SoftPrompt(self.task_id if task_id is None else task_id,
                          Tensor(self.embeddings.data.copy(), requires_grad=True))

    def group(self) -> ParamGroup:
        return ParamGroup(f"prompt:{self.task_id}", [self.embeddings])

    def digest(self) -> str:
        return hashlib.sha256(self.embeddings.data.tobytes()).hexdigest()

    def to_dict(self) -> dict:
        m, d = self.shape
        return {"format_version": FORMAT_VERSION, "kind": "soft_prompt", "task_id": self.task_id,
                "m": m, "d": d, "values": self.embeddings.data.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, record: dict) -> "SoftPrompt":
        _check_version(record, "soft_prompt")
        values = np.asarray(record["values"], dtype=np.float64).reshape(record["m"], record["d"])
        return cls(record["task_id"], Tensor(values, requires_grad=True))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "SoftPrompt":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_version(record: dict, kind: str) -> None:
    if record.get("kind") != kind:
        raise ContractError(f"expected a {kind} record, got {record.get('kind')!r}")
    if record.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported format_version {record.get('format_version')!r}")


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _layer_names(prefix: str, cross: bool) -> list[tuple[str, str]]:
    """(name, kind) pairs for one transformer layer."""
    names = [(f"{prefix}.ln1.g", "ones"), (f"{prefix}.ln1.b", "zeros")]
    names += [(f"{prefix}.self.{w}", "attn") for w in ("q", "k", "v")] + [(f"{prefix}.self.o", "out")]
    if cross:
        names += [(f"{prefix}.lnx.g", "ones"), (f"{prefix}.lnx.b", "zeros")]
        names += [(f"{prefix}.cross.{w}", "attn") for w in ("q", "k", "v")] + [(f"{prefix}.cross.o", "out")]
    names += [(f"{prefix}.ln2.g", "ones"), (f"{prefix}.ln2.b", "zeros"),
              (f"{prefix}.ff.w1", "ff1"), (f"{prefix}.ff.b1", "zeros_ff"),
              (f"{prefix}.ff.w2", "ff2"), (f"{prefix}.ff.b2", "zeros")]
    return names


class Backbone:
    """Token embedding plus encoder and decoder stacks."""

    def __init__(self, config: ModelConfig, vocab: Vocab, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        if len(vocab) != config.vocab_size:
            raise ContractError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.warnings: list[str] = []
        self.pretrain_log: list[float] = []
        arrays = params if params is not None else self._init_arrays(seed)
        self.params = {k: Tensor(np.array(v, dtype=np.float64), name=k) for k, v in arrays.items()}
        if self.params["embed"].shape[0] != config.vocab_size:
            raise ContractError("embedding rows must equal vocab_size")
        self.groups = [
            ParamGroup("embedding", [self.params["embed"]]),
            ParamGroup("encoder", [t for k, t in self.params.items() if k.startswith("enc")]),
            ParamGroup("decoder", [t for k, t in self.params.items() if k.startswith("dec")]),
        ]
        self._pe = sinusoid_table(config.max_seq_len, config.d_model)

    def _init_arrays(self, seed: int) -> dict[str, np.ndarray]:
        c = self.config
        rng = np.random.default_rng(seed)
        d, f = c.d_model, c.ff_width
        depth = 1.0 / math.sqrt(2 * c.n_layers)
        out = {"embed": rng.normal(0.0, 1.0, (c.vocab_size, d))}
        specs = []
        for i in range(c.n_layers):
            specs += _layer_names(f"enc{i}", cross=False)
        specs += [("enc.ln.g", "ones"), ("enc.ln.b", "zeros")]
        for i in range(c.n_layers):
            specs += _layer_names(f"dec{i}", cross=True)
        specs += [("dec.ln.g", "ones"), ("dec.ln.b", "zeros")]
        for name, kind in specs:
            if kind == "ones":
                out[name] = np.ones(d)
            elif kind == "zeros":
                out[name] = np.zeros(d)
            elif kind == "zeros_ff":
                out[name] = np.zeros(f)
            elif kind == "attn":
                out[name] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
            elif kind == "out":
                out[name] = rng.normal(0.0, depth / math.sqrt(d), (d, d))
            elif kind == "ff1":
                out[name] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
            elif kind == "ff2":
                out[name] = rng.normal(0.0, depth / math.sqrt(f), (f, d))
        return out

    # -- state ----------------------------------------------------------------

    @property
    def frozen(self) -> bool:
        return all(g.frozen for g in self.groups)

    def freeze(self) -> "Backbone":
        for g in self.groups:
            g.freeze()
        return self

    def unfreeze(self) -> "Backbone":
        for g in self.groups:
            g.unfreeze()
        return self

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def clone(self) -> "Backbone":
        other = Backbone(self.config, self.vocab, {k: t.data.copy() for k, t in self.params.items()})
        if self.frozen:
            other.freeze()
        return other

    # -- checkpoint -------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "backbone",
            "config": asdict(self.config),
            "vocab": self.vocab.tokens,
            "frozen": self.frozen,
            "params": [
                {"name": k, "shape": list(t.shape),
                 "f64le": base64.b64encode(t.data.astype("<f8").tobytes()).decode("ascii")}
                for k, t in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Backbone":
        _check_version(record, "backbone")
        arrays = {}
        for p in record["params"]:
            raw = np.frombuffer(base64.b64decode(p["f64le"]), dtype="<f8")
            arrays[p["name"]] = raw.reshape(p["shape"]).astype(np.float64)
        model = cls(ModelConfig(**record["config"]), Vocab(record["vocab"]), arrays)
        if record.get("frozen", True):
            model.freeze()
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Backbone":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # -- forward ----------------------------------------------------------------

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        p = self.params
        b, lq, d = xq.shape
        lk = xkv.shape[1]
        h = self.config.n_heads
        dh = d // h
        q = ad.transpose(ad.reshape(xq @ p[f"{prefix}.q"], (b, lq, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(xkv @ p[f"{prefix}.k"], (b, lk, h, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(xkv @ p[f"{prefix}.v"], (b, lk, h, dh)), (0, 2, 1, 3))
        ctx = ad.reshape(ad.transpose(ad.attention(q, k, v, mask), (0, 2, 1, 3)), (b, lq, d))
        return ctx @ p[f"{prefix}.o"]

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = ad.relu(ad.linear(x, p[f"{prefix}.ff.w1"], p[f"{prefix}.ff.b1"]))
        return ad.linear(hidden, p[f"{prefix}.ff.w2"], p[f"{prefix}.ff.b2"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def encode(self, inputs: Sequence[Sequence[int]], prompt: SoftPrompt | None = None):
        """Encoder states and the key mask for cross attention."""
        c = self.config
        m = prompt.shape[0] if prompt is not None else 0
        if prompt is not None and prompt.shape != (c.prompt_length, c.d_model):
            raise ContractError(f"prompt shape {prompt.shape} does not match config "
                                f"({c.prompt_length}, {c.d_model})")
        lengths = [len(x) + m for x in inputs]
        width = max(lengths)
        if width > c.max_seq_len:
            raise ContractError(f"encoder input of {width} positions exceeds max_seq_len {c.max_seq_len}")
        v = c.vocab_size
        index = np.zeros((len(inputs), width), dtype=np.int64)
        for row, x in enumerate(inputs):
            self._check_ids(x)
            index[row, : len(x)] = x
            if m:
                index[row, len(x): len(x) + m] = np.arange(v, v + m)
        table = self.params["embed"] if prompt is None else ad.concat([self.params["embed"], prompt.embeddings], 0)
        valid = np.arange(width)[None, :] < np.asarray(lengths)[:, None]
        key_mask = np.where(valid, 0.0, NEG_INF)[:, None, None, :]
        x = ad.gather_rows(table, index) + self._pe[:width]
        for i in range(c.n_layers):
            x = self._enc_block(f"enc{i}", x, key_mask)
        return self._ln("enc.ln", x), key_mask

    def _enc_block(self, pre: str, x: Tensor, key_mask: np.ndarray) -> Tensor:
        h = self._ln(f"{pre}.ln1", x)
        x = x + self._attention(f"{pre}.self", h, h, key_mask)
        return x + self._ff(pre, self._ln(f"{pre}.ln2", x))

    def decode(self, memory: Tensor, memory_mask: np.ndarray, dec_inputs: np.ndarray) -> Tensor:
        """Logits for every decoder position given shifted-right decoder inputs."""
        c = self.config
        b, t = dec_inputs.shape
        if t > c.max_seq_len:
            raise ContractError(f"decoder length {t} exceeds max_seq_len {c.max_seq_len}")
        causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None]
        x = ad.gather_rows(self.params["embed"], dec_inputs) + self._pe[:t]
        for i in range(c.n_layers):
            pre = f"dec{i}"
            h = self._ln(f"{pre}.ln1", x)
            x = x + self._attention(f"{pre}.self", h, h, causal)
            x = x + self._attention(f"{pre}.cross", self._ln(f"{pre}.lnx", x), memory, memory_mask)
            x = x + self._ff(pre, self._ln(f"{pre}.ln2", x))
        h = self._ln("dec.ln", x) * (1.0 / math.sqrt(c.d_model))
        return h @ ad.transpose(self.params["embed"], (1, 0))

    def _check_ids(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not 0 <= i < self.config.vocab_size:
                raise ContractError(f"unknown token id {i}")

    def loss(self, inputs: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
             prompt: SoftPrompt | None = None, per_example: bool = False):
        """Summed token NLL of ``targets`` (each already ending in EOS if wanted)."""
        if len(inputs) != len(targets):
            raise ContractError("inputs and targets differ in length")
        memory, mask = self.encode(inputs, prompt)
        t = max(len(y) for y in targets)
        if t == 0:
            raise ContractError("empty target")
        dec_in = np.zeros((len(targets), t), dtype=np.int64)
        gold = np.zeros((len(targets), t), dtype=np.int64)
        weight = np.zeros((len(targets), t))
        for row, y in enumerate(targets):
            self._check_ids(y)
            gold[row, : len(y)] = y
            weight[row, : len(y)] = 1.0
            dec_in[row, 1: len(y)] = y[:-1]
        logits = self.decode(memory, mask, dec_in)
        if not per_example:
            return ad.cross_entropy(logits, gold, weight)
        with ad.no_grad():
            lp = logits.data - logits.data.max(axis=-1, keepdims=True)
            lp = lp - np.log(np.exp(lp).sum(axis=-1, keepdims=True))
            nll = -np.take_along_axis(lp, gold[..., None], axis=-1)[..., 0]
            return (nll * weight).sum(axis=1)

    def generate(self, inputs: Sequence[Sequence[int]], prompt: SoftPrompt | None = None,
                 max_len: int = 32) -> list[list[int]]:
        """Greedy decoding for a batch; each output stops before EOS."""
        if max_len > self.config.max_seq_len:
            raise ContractError(f"max_len {max_len} exceeds max_seq_len {self.config.max_seq_len}")
        if max_len <= 0:
            return [[] for _ in inputs]
        with ad.no_grad():
            memory, mask = self.encode(inputs, prompt)
            n = len(inputs)
            seqs = np.zeros((n, 1), dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            for _ in range(max_len):
                logits = self.decode(memory, mask, seqs).data[:, -1]
                nxt = logits.argmax(axis=-1)
                nxt[done] = self.vocab.pad_id
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == self.vocab.eos_id
                if done.all():
                    break
        out = []
        for row in seqs[:, 1:]:
            ids = []
            for tok in row:
                if tok in (self.vocab.eos_id, self.vocab.pad_id):
                    break
                ids.append(int(tok))
            out.append(ids)
        return out


# ---------------------------------------------------------------------------
# module-level operations


def prompted_loss(backbone: Backbone, prompt: SoftPrompt, input_ids, target_ids) -> Tensor:
    """-log p(target | [input; prompt]) summed over target tokens (and examples).

    Accepts one example (flat id lists) or a batch (lists of id lists).
    """
    inputs, targets = _as_batch(input_ids), _as_batch(target_ids)
    return backbone.loss(inputs, targets, prompt)


def generate(backbone: Backbone, prompt: SoftPrompt | None, input_ids, max_len: int) -> list[int] | list[list[int]]:
    single = not input_ids or not isinstance(input_ids[0], (list, tuple, np.ndarray))
    out = backbone.generate(_as_batch(input_ids), prompt, max_len)
    return out[0] if single else out


def _as_batch(ids):
    if len(ids) and isinstance(ids[0], (list, tuple, np.ndarray)):
        return [list(x) for x in ids]
    return [list(ids)]


def init_prompt_random(backbone: Backbone, seed: int, task_id: str = "") -> SoftPrompt:
    """Each prompt row is a copy of a uniformly drawn vocabulary embedding."""
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, backbone.config.vocab_size, size=backbone.config.prompt_length)
    return SoftPrompt(task_id, Tensor(backbone.params["embed"].data[rows].copy(), requires_grad=True))


# ---------------------------------------------------------------------------
# span-corruption pre-training


def _segment(n_items: int, n_segments: int, rng: np.random.Generator) -> np.ndarray:
    """Random split of ``n_items`` into ``n_segments`` non-empty parts."""
    cuts = np.sort(rng.choice(np.arange(1, n_items), size=n_segments - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [n_items]]))


def span_corrupt(ids: Sequence[int], sentinel_ids: Sequence[int], rng: np.random.Generator,
                 noise_density: float = 0.15, mean_span: float = 3.0) -> tuple[list[int], list[int]]:
    """T5-style denoising pair: (input with sentinels, sentinel-led spans)."""
    n = len(ids)
    if n < 2:
        return list(ids), [sentinel_ids[0]]
    n_noise = min(max(1, round(n * noise_density)), n - 1)
    n_spans = max(1, min(round(n_noise / mean_span), n_noise, n - n_noise, len(sentinel_ids)))
    noise_lens = _segment(n_noise, n_spans, rng) if n_spans > 1 else np.array([n_noise])
    keep_lens = _segment(n - n_noise, n_spans, rng) if n_spans > 1 else np.array([n - n_noise])
    # alternate kept / noise, starting with a kept segment
    src, tgt, pos = [], [], 0
    for s in range(n_spans):
        src.extend(ids[pos: pos + keep_lens[s]])
        pos += keep_lens[s]
        src.append(sentinel_ids[s])
        tgt.append(sentinel_ids[s])
        tgt.extend(ids[pos: pos + noise_lens[s]])
        pos += noise_lens[s]
    src.extend(ids[pos:])
    return src, tgt


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    final_lr_ratio: float = 0.1  # linear decay after warmup down to this fraction of lr
    noise_density: float = 0.15
    mean_spans: tuple[float, ...] = (1.0, 3.0)  # each document draws its mean span length from these
    log_every: int = 100

    def __post_init__(self):
        self.mean_spans = tuple(float(m) for m in self.mean_spans)
        if self.steps < 1 or self.batch_size < 1 or self.warmup < 0:
            raise ContractError("pre-training needs positive steps and batch size")
        if not self.mean_spans or min(self.mean_spans) < 1:
            raise ContractError("mean_spans needs at least one length >= 1")
        if not 0 < self.final_lr_ratio <= 1:
            raise ContractError("final_lr_ratio must lie in (0, 1]")


def _lr_factor(step: int, schedule: PretrainConfig) -> float:
    if step < schedule.warmup:
        return (step + 1) / schedule.warmup
    span = max(1, schedule.steps - schedule.warmup)
    return 1.0 - (1.0 - schedule.final_lr_ratio) * (step - schedule.warmup) / span


def pretrain_backbone(corpus: Sequence[Sequence[int]], config: ModelConfig, seed: int,
                      vocab: Vocab, schedule: PretrainConfig | None = None,
                      extra_pairs: Sequence[tuple[Sequence[int], Sequence[int]]] = ()) -> Backbone:
    """Train a fresh backbone by masked-span denoising over ``corpus``, then freeze it.

    ``extra_pairs`` are additional fixed (input, target) pairs mixed into the batches.
    """
    schedule = schedule or PretrainConfig()
    if not len(corpus):
        raise ContractError("pre-training corpus is empty")
    for seq in corpus:
        if len(seq) > config.max_seq_len - 1:
            raise ContractError(f"corpus sequence of length {len(seq)} exceeds max_seq_len")
    model = Backbone(config, vocab, seed=seed).unfreeze()
    rng = np.random.default_rng(seed)
    sentinels = vocab.sentinel_ids()
    opt = ad.Adam(schedule.lr, clip_norm=1.0)
    losses: list[float] = []
    pool = [("span", i) for i in range(len(corpus))] + [("pair", i) for i in range(len(extra_pairs))]
    for step in range(schedule.steps):
        picks = rng.integers(0, len(pool), size=schedule.batch_size)
        inputs, targets = [], []
        for p in picks:
            kind, i = pool[p]
            if kind == "span":
                mean_span = schedule.mean_spans[rng.integers(len(schedule.mean_spans))]
                src, tgt = span_corrupt(corpus[i], sentinels, rng, schedule.noise_density, mean_span)
            else:
                src, tgt = extra_pairs[i]
            inputs.append(list(src))
            targets.append(list(tgt) + [vocab.eos_id])
        loss = model.loss(inputs, targets)
        value = loss.item() / sum(len(t) for t in targets)
        if not math.isfinite(value):
            raise NonFiniteError(f"pre-training loss became {value} at step {step}")
        losses.append(value)
        ad.backward(loss * (1.0 / len(inputs)))
        lr = schedule.lr * _lr_factor(step, schedule)
        opt.step(model.groups, lr)
        if schedule.log_every and step % schedule.log_every == 0:
            log.info("pretrain step %d loss %.4f", step, value)
    model.pretrain_log = losses
    window = max(1, min(50, len(losses) // 10))
    start, end = float(np.mean(losses[:window])), float(np.mean(losses[-window:]))
    if end > 0.5 * start:
        msg = f"pre-training loss fell only from {start:.3f} to {end:.3f} (<50% reduction)"
        model.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return model.freeze()
