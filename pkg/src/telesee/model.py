"""A small pre-norm transformer encoder-decoder with constrained greedy decoding."""

from __future__ import annotations

import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

IGNORE = -100
NEG = -1e9


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    max_src_len: int = 256
    max_tgt_len: int = 64
    dropout_rate: float = 0.0
    seed: int = 0
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_src_len < 8 or self.max_tgt_len < 8:
            raise ConfigError("max_src_len and max_tgt_len must be >= 8")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


TINY_CONFIG = ModelConfig(vocab_size=40, d_model=16, n_heads=2, n_layers=1, ffn_dim=32,
                          max_src_len=16, max_tgt_len=16)
"""Gradient-check configuration, well under 10k parameters."""


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        return x.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

    def project_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.split(self.k(x)), self.split(self.v(x))

    def forward(self, x, kv, mask):
        """``kv`` is (keys, values) already split into heads; ``mask`` is True where attention is allowed."""
        q = self.split(self.q(x))
        k, v = kv
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(~mask, NEG)
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.up = nn.Linear(d_model, ffn_dim)
        self.down = nn.Linear(ffn_dim, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.down(self.drop(F.gelu(self.up(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout_rate)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, self.attn.project_kv(h), mask))
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout_rate)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, self_mask, cross_kv, cross_mask, cache=None):
        h = self.norm1(x)
        k, v = self.self_attn.project_kv(h)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        x = x + self.drop(self.self_attn(h, (k, v), self_mask))
        x = x + self.drop(self.cross_attn(self.norm2(x), cross_kv, cross_mask))
        return x + self.drop(self.ffn(self.norm3(x)))


@dataclass(frozen=True)
class EncoderOutput:
    """Per-document encoding, computed once and shared by every decoder call."""

    memory: torch.Tensor  # (batch, src_len, d_model)
    src_mask: torch.Tensor  # (batch, src_len), True at real tokens
    truncated: bool = False

    @property
    def batch_size(self) -> int:
        return self.memory.shape[0]


@dataclass(frozen=True)
class DecodeConstraint:
    """Allowed token ids: ``first_allowed`` at the first step, ``allowed`` afterwards.

    ``None`` means unrestricted. EOS is always added to restricted sets.
    """

    allowed: frozenset[int] | None = None
    first_allowed: frozenset[int] | None = None
    eos_id: int | None = None

    def __post_init__(self):
        for name in ("allowed", "first_allowed"):
            ids = getattr(self, name)
            if ids is not None:
                ids = frozenset(ids) | ({self.eos_id} if self.eos_id is not None else frozenset())
                if not ids:
                    raise ValueError("constraint allows no tokens")
                object.__setattr__(self, name, ids)

    @classmethod
    def unrestricted(cls) -> "DecodeConstraint":
        return cls()

    @classmethod
    def special_only(cls, special_ids: Iterable[int], eos_id: int) -> "DecodeConstraint":
        ids = frozenset(special_ids)
        return cls(ids, ids, eos_id)

    @classmethod
    def first_type(cls, type_ids: Iterable[int], special_ids: Iterable[int], eos_id: int) -> "DecodeConstraint":
        return cls(frozenset(special_ids), frozenset(type_ids), eos_id)

    def allowed_at(self, step: int) -> frozenset[int] | None:
        return self.first_allowed if step == 0 else self.allowed

    def mask(self, step: int, vocab_size: int, device=None) -> torch.Tensor | None:
        ids = self.allowed_at(step)
        if ids is None:
            return None
        m = torch.zeros(vocab_size, dtype=torch.bool, device=device)
        m[list(ids)] = True
        return m


class Seq2SeqModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.register_buffer(
            # room for BOS, a prompt cut from the source, and a full target
            "positions", sinusoidal_positions(cfg.max_src_len + cfg.max_tgt_len + 2, cfg.d_model),
            persistent=False,
        )
        self.encoder_calls = 0

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _embed(self, ids: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids) * math.sqrt(self.cfg.d_model)
        return self.drop(x + self.positions[pos].to(x.dtype))

    def _device(self):
        return self.embed.weight.device

    # -- encoder ---------------------------------------------------------

    def encode_batch(self, src: torch.Tensor) -> EncoderOutput:
        self.encoder_calls += 1
        truncated = src.shape[1] > self.cfg.max_src_len
        src = src[:, : self.cfg.max_src_len]
        mask = src != self.cfg.pad_id
        pos = torch.arange(src.shape[1], device=src.device).expand_as(src)
        x = self._embed(src, pos)
        attn_mask = mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, attn_mask)
        return EncoderOutput(self.enc_norm(x), mask, truncated)

    def encode(self, src_ids: Sequence[int]) -> EncoderOutput:
        src = torch.tensor([list(src_ids) or [self.cfg.pad_id]], dtype=torch.long, device=self._device())
        return self.encode_batch(src)

    # -- decoder ---------------------------------------------------------

    def _cross_kv(self, enc: EncoderOutput, batch: int):
        kvs = []
        for layer in self.decoder:
            k, v = layer.cross_attn.project_kv(enc.memory)
            if k.shape[0] != batch:
                k, v = k.expand(batch, -1, -1, -1), v.expand(batch, -1, -1, -1)
            kvs.append((k, v))
        mask = enc.src_mask
        if mask.shape[0] != batch:
            mask = mask.expand(batch, -1)
        return kvs, mask[:, None, None, :]

    def _decode(self, tgt, tgt_mask, pos, cross_kvs, cross_mask, caches=None, past_mask=None):
        """Run the decoder stack over ``tgt``; returns logits (batch, len, vocab)."""
        t = tgt.shape[1]
        key_mask = tgt_mask if past_mask is None else torch.cat([past_mask, tgt_mask], dim=1)
        total = key_mask.shape[1]
        causal = torch.ones(t, total, dtype=torch.bool, device=tgt.device).tril(total - t)
        self_mask = causal[None, None] & key_mask[:, None, None, :]
        x = self._embed(tgt, pos)
        for i, layer in enumerate(self.decoder):
            x = layer(x, self_mask, cross_kvs[i], cross_mask, None if caches is None else caches[i])
        x = self.dec_norm(x)
        return x @ self.embed.weight.T

    def forward(self, src: torch.Tensor, dec_in: torch.Tensor, src_index: torch.Tensor | None = None) -> torch.Tensor:
        """Teacher-forced logits; row ``r`` of ``dec_in`` reads source ``src_index[r]``."""
        enc = self.encode_batch(src)
        if src_index is not None:
            enc = EncoderOutput(enc.memory[src_index], enc.src_mask[src_index], enc.truncated)
        kvs, cross_mask = self._cross_kv(enc, dec_in.shape[0])
        tgt_mask = dec_in != self.cfg.pad_id
        pos = (tgt_mask.long().cumsum(1) - 1).clamp(min=0)
        return self._decode(dec_in, tgt_mask, pos, kvs, cross_mask)

    def decode_step_logits(self, enc: EncoderOutput, prefix_ids: Sequence[int]) -> torch.Tensor:
        """Logits for the token following ``[BOS] + prefix_ids``."""
        dec = torch.tensor([[self.cfg.bos_id, *prefix_ids]], dtype=torch.long, device=self._device())
        kvs, cross_mask = self._cross_kv(enc, 1)
        mask = torch.ones_like(dec, dtype=torch.bool)
        pos = torch.arange(dec.shape[1], device=dec.device)[None]
        return self._decode(dec, mask, pos, kvs, cross_mask)[0, -1]

    @torch.no_grad()
    def greedy_decode(
        self,
        enc: EncoderOutput,
        prompts: Sequence[Sequence[int]],
        constraint: DecodeConstraint | None = None,
        max_len: int | None = None,
    ) -> list[list[int]]:
        """Greedy continuation of ``[BOS] + prompt`` for every prompt in one batch.

        Prompts are left-padded; the returned sequences exclude prompt and EOS.
        """
        cfg = self.cfg
        constraint = constraint or DecodeConstraint()
        max_len = cfg.max_tgt_len if max_len is None else max_len
        b = len(prompts)
        if b == 0 or max_len <= 0:
            return [[] for _ in range(b)]
        dev = self._device()
        prompts = [list(p)[: cfg.max_src_len] for p in prompts]
        width = 1 + max(len(p) for p in prompts)
        dec = torch.full((b, width), cfg.pad_id, dtype=torch.long, device=dev)
        for r, p in enumerate(prompts):
            row = [cfg.bos_id, *p]
            dec[r, width - len(row):] = torch.tensor(row, dtype=torch.long)
        tgt_mask = dec != cfg.pad_id
        pos = (tgt_mask.long().cumsum(1) - 1).clamp(min=0)
        kvs, cross_mask = self._cross_kv(enc, b)
        caches = [{} for _ in self.decoder]
        logits = self._decode(dec, tgt_mask, pos, kvs, cross_mask, caches)[:, -1]
        past_mask = tgt_mask
        next_pos = pos[:, -1] + 1
        out = [[] for _ in range(b)]
        done = torch.zeros(b, dtype=torch.bool, device=dev)
        for step in range(max_len):
            allow = constraint.mask(step, cfg.vocab_size, dev)
            if allow is not None:
                logits = logits.masked_fill(~allow, float("-inf"))
            nxt = logits.argmax(-1)
            for r in range(b):
                if not done[r]:
                    tok = int(nxt[r])
                    if tok == cfg.eos_id:
                        done[r] = True
                    else:
                        out[r].append(tok)
            if bool(done.all()) or step == max_len - 1:
                break
            step_in = nxt[:, None]
            step_mask = torch.ones(b, 1, dtype=torch.bool, device=dev)
            logits = self._decode(step_in, step_mask, next_pos[:, None], kvs, cross_mask,
                                  caches, past_mask)[:, -1]
            past_mask = torch.cat([past_mask, step_mask], dim=1)
            next_pos = next_pos + 1
        return out


# -- batching and loss ----------------------------------------------------

@dataclass
class Example:
    src_ids: list[int]
    prompt_ids: list[int]
    target_ids: list[int]
    stage: int = 0


def collate(cfg: ModelConfig, batch: Sequence[Example]):
    """Right-padded tensors: unique sources, decoder input ``[BOS]+prompt+target``,
    labels, and the source row each example reads.

    Labels cover the target tokens and the closing EOS only. Targets longer than
    ``max_tgt_len`` are cut and then carry no EOS label.
    """
    srcs: list[list[int]] = []
    seen: dict[tuple, int] = {}
    index = []
    for ex in batch:
        s = tuple(list(ex.src_ids)[: cfg.max_src_len] or [cfg.pad_id])
        if s not in seen:
            seen[s] = len(srcs)
            srcs.append(list(s))
        index.append(seen[s])
    decs, labels = [], []
    for ex in batch:
        prompt, target = list(ex.prompt_ids)[: cfg.max_src_len], list(ex.target_ids)
        end = [cfg.eos_id] if len(target) <= cfg.max_tgt_len else []
        target = target[: cfg.max_tgt_len]
        dec = [cfg.bos_id] + prompt + target
        lab = [IGNORE] * len(prompt) + target + end
        decs.append(dec)
        labels.append(lab)
    s_len = max(len(s) for s in srcs)
    d_len = max(len(d) for d in decs)
    src = torch.full((len(srcs), s_len), cfg.pad_id, dtype=torch.long)
    dec = torch.full((len(batch), d_len), cfg.pad_id, dtype=torch.long)
    lab = torch.full((len(batch), d_len), IGNORE, dtype=torch.long)
    for i, s in enumerate(srcs):
        src[i, : len(s)] = torch.tensor(s)
    for i, (d, l) in enumerate(zip(decs, labels)):
        dec[i, : len(d)] = torch.tensor(d)
        lab[i, : len(l)] = torch.tensor(l)
    return src, dec, lab, torch.tensor(index, dtype=torch.long)


def token_losses(model: Seq2SeqModel, batch: Sequence[Example]) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-label cross-entropy (flattened over supervised positions) and their row index."""
    src, dec, lab, index = collate(model.cfg, batch)
    dev = model._device()
    logits = model(src.to(dev), dec.to(dev), index.to(dev))
    lab = lab.to(dev)
    keep = lab != IGNORE
    if not bool(keep.any()):
        raise ValueError("batch has no supervised target positions")
    losses = F.cross_entropy(logits[keep], lab[keep], reduction="none")
    rows = torch.arange(len(batch), device=dev)[:, None].expand_as(lab)[keep]
    return losses, rows


def batch_loss(model: Seq2SeqModel, batch: Sequence[Example], reduction: str = "mean") -> torch.Tensor:
    """Token-level cross-entropy over target positions; call ``.backward()`` for gradients."""
    if not batch:
        raise ValueError("empty batch")
    losses, _ = token_losses(model, batch)
    if reduction == "sum":
        return losses.sum()
    if reduction == "mean":
        return losses.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def stage_losses(model: Seq2SeqModel, batch: Sequence[Example]) -> dict[int, torch.Tensor]:
    """Mean cross-entropy per stage over one shared forward pass."""
    losses, rows = token_losses(model, batch)
    stages = torch.tensor([ex.stage for ex in batch], device=losses.device)[rows]
    return {int(s): losses[stages == s].mean() for s in torch.unique(stages)}


# -- construction, optimization ----------------------------------------------

def init_params(cfg: ModelConfig, dtype: torch.dtype = torch.float64) -> Seq2SeqModel:
    """Deterministic in ``cfg.seed``."""
    gen = torch.Generator().manual_seed(cfg.seed)
    model = Seq2SeqModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                p.copy_(torch.randn(p.shape, generator=gen) * (0.02 if "embed" in name else 1.0 / math.sqrt(p.shape[1])))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return model.to(dtype).eval()


@dataclass
class Trainer:
    """AdamW with linear warm-up; skips updates whose gradients are not finite."""

    model: Seq2SeqModel
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    skipped: int = 0
    steps: int = 0
    optimizer: torch.optim.Optimizer = field(init=False)
    schedule: torch.optim.lr_scheduler.LambdaLR = field(init=False)

    def __post_init__(self):
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        warm = max(1, self.warmup_steps)
        self.schedule = torch.optim.lr_scheduler.LambdaLR(self.optimizer, lambda s: min(1.0, (s + 1) / warm))

    def step(self, loss_fn: Callable[[], torch.Tensor]) -> tuple[torch.Tensor, bool]:
        """Compute the loss, backpropagate and update. Returns (loss, applied)."""
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = loss_fn()
        loss.backward()
        finite = all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in self.model.parameters())
        if finite and bool(torch.isfinite(loss)):
            self.optimizer.step()
            applied = True
        else:
            self.skipped += 1
            applied = False
        with warnings.catch_warnings():
            # a skipped update still advances the warm-up clock
            warnings.filterwarnings("ignore", message="Detected call of `lr_scheduler.step", category=UserWarning)
            self.schedule.step()
        self.steps += 1
        self.model.eval()
        return loss.detach(), applied


def train_step(trainer: Trainer, batch: Sequence[Example]) -> tuple[float, bool]:
    loss, applied = trainer.step(lambda: batch_loss(trainer.model, batch))
    return float(loss), applied


# -- gradient verification ----------------------------------------------------

def grad_check(
    model: Seq2SeqModel,
    batch: Sequence[Example],
    epsilon: float = 1e-3,
    n_coords: int = 200,
    seed: int = 0,
    corrupt: Callable[[str, torch.Tensor], torch.Tensor] | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between backprop gradients and central differences.

    ``corrupt`` may rewrite each analytic gradient (for mutation tests).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    model = model.double().eval()
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    batch_loss(model, batch, reduction="sum").backward()
    analytic = {k: p.grad.detach().clone() for k, p in params.items()}
    if corrupt is not None:
        analytic = {k: corrupt(k, g) for k, g in analytic.items()}
    flat = [(k, i) for k, p in params.items() for i in range(p.numel())]
    gen = torch.Generator().manual_seed(seed)
    picks = torch.randperm(len(flat), generator=gen)[: min(n_coords, len(flat))].tolist()
    worst = 0.0
    with torch.no_grad():
        for idx in picks:
            name, i = flat[idx]
            p = params[name].view(-1)
            orig = float(p[i])
            p[i] = orig + epsilon
            up = float(batch_loss(model, batch, reduction="sum"))
            p[i] = orig - epsilon
            down = float(batch_loss(model, batch, reduction="sum"))
            p[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[name].view(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
    model.zero_grad(set_to_none=True)
    return worst


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, model: Seq2SeqModel, vocab_digest: str, schema_version: str,
                    extra: dict | None = None) -> None:
    """A JSON header line followed by a torch state dict."""
    header = {
        "format": "telesee-checkpoint-1",
        "config": asdict(model.cfg),
        "vocab_sha256": vocab_digest,
        "schema_version": schema_version,
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        **(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(buf.getvalue())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        return json.loads(f.readline())


def load_checkpoint(path: str | Path, vocab_digest: str | None = None,
                    schema_version: str | None = None) -> tuple[Seq2SeqModel, dict]:
    try:
        with open(path, "rb") as f:
            header = json.loads(f.readline())
            payload = f.read()
        if not isinstance(header, dict) or "config" not in header:
            raise ValueError("missing header")
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: not a telesee checkpoint ({exc})") from None
    if vocab_digest is not None and header["vocab_sha256"] != vocab_digest:
        raise CheckpointError(f"{path}: vocabulary hash does not match the checkpoint")
    if schema_version is not None and header["schema_version"] != schema_version:
        raise CheckpointError(
            f"{path}: checkpoint schema {header['schema_version']!r} != {schema_version!r}")
    cfg = ModelConfig(**header["config"])
    model = Seq2SeqModel(cfg).to(getattr(torch, header.get("dtype", "float64")))
    try:
        model.load_state_dict(torch.load(io.BytesIO(payload), weights_only=True))
    except Exception as exc:  # noqa: BLE001
        raise CheckpointError(f"{path}: corrupt weights ({type(exc).__name__})") from None
    return model.eval(), header


def params_digest(model: Seq2SeqModel) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
