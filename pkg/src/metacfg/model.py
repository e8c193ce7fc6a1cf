"""Small decoder-only transformer (pre-norm, RoPE, gated MLP) and its training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._kernels import stream_seeds_np
from .corpus import TokenizedCorpus, Vocabulary

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "Transformer",
    "Checkpoint",
    "TrainingDiverged",
    "TrainResult",
    "masked_loss",
    "train",
    "forward",
    "extract_hidden",
    "generate",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 344
    vocab_size: int = 0
    max_seq_len: int = 64
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02
    tie_embeddings: bool = False
    # optimizer
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.1
    warmup_steps: int = 0
    grad_clip: float | None = None
    batch_size: int = 96
    epochs: int = 1
    eval_every: int = 1000
    log_every: int = 100  # train-only trace rows in between evaluations
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        """12 layers, 12 heads, width 768; AdamW(0.9, 0.98), wd 0.1, lr 3e-4, batch 96."""
        base = dict(n_layers=12, n_heads=12, d_model=768, d_ff=2048, max_seq_len=512)
        return cls(**{**base, **kw})

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**{**dict(n_layers=4, n_heads=4, d_model=128, d_ff=344), **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        return cls(**{**dict(n_layers=2, n_heads=2, d_model=16, d_ff=32, batch_size=8), **kw})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rotary_tables(seq_len: int, head_dim: int, base: float, dtype=torch.float32):
    half = head_dim // 2
    inv = 1.0 / base ** (torch.arange(half, dtype=torch.float64) / half)
    ang = torch.outer(torch.arange(seq_len, dtype=torch.float64), inv)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, hd); rotate pairs (x1, x2) made of the two halves
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.wq = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wo = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def scores(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        """Pre-softmax attention logits (B, H, T, T), without the causal mask."""
        B, T, _ = x.shape
        q = self.wq(x).view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        q, k = apply_rotary(q, cos[:T], sin[:T]), apply_rotary(k, cos[:T], sin[:T])
        return q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        att = self.scores(x, cos, sin)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        v = self.wv(x).view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        return self.wo((att @ v).transpose(1, 2).reshape(B, T, C))


class MLP(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w1 = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.w3 = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.w2 = nn.Linear(cfg.d_ff, cfg.d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(F.silu(self.w1(x)) * self.w3(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.attn = Attention(cfg)
        self.mlp_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.mlp = MLP(cfg)

    def forward(self, x, cos, sin):
        x = x + self.attn(self.attn_norm(x), cos, sin)
        return x + self.mlp(self.mlp_norm(x))


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size <= 0:
            raise ValueError("ModelConfig.vocab_size must be set")
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        if cfg.tie_embeddings:
            self.head.weight = self.embed.weight
        cos, sin = rotary_tables(cfg.max_seq_len, cfg.head_dim, cfg.rope_base)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        std = self.cfg.init_std
        for name, p in self.named_parameters():
            if name.endswith("norm.weight"):
                nn.init.ones_(p)
            elif name.endswith(("wo.weight", "w2.weight")):
                with torch.no_grad():
                    p.normal_(0.0, std / math.sqrt(2 * self.cfg.n_layers), generator=gen)
            else:
                with torch.no_grad():
                    p.normal_(0.0, std, generator=gen)

    def _apply(self, fn, *args, **kwargs):
        out = super()._apply(fn, *args, **kwargs)
        # keep rotary tables in the parameter dtype
        dtype = self.embed.weight.dtype
        cos, sin = rotary_tables(self.cfg.max_seq_len, self.cfg.head_dim, self.cfg.rope_base, dtype)
        self.rope_cos, self.rope_sin = cos.to(self.embed.weight.device), sin.to(self.embed.weight.device)
        return out

    def forward(self, tokens: torch.Tensor, return_hidden: bool = False):
        """Logits (B, T, V); with ``return_hidden`` also the residual stream after
        the embedding (index 0) and after every block (index l)."""
        B, T = tokens.shape
        if T > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len={self.cfg.max_seq_len}")
        x = self.embed(tokens)
        hidden = [x] if return_hidden else None
        for blk in self.blocks:
            x = blk(x, self.rope_cos, self.rope_sin)
            if return_hidden:
                hidden.append(x)
        logits = self.head(self.norm(x))
        return (logits, hidden) if return_hidden else logits


def parameter_group(name: str) -> str:
    if name.startswith("embed"):
        return "embedding"
    if name.startswith("head"):
        return "output_head"
    if "norm" in name:
        return "norm"
    if ".attn." in name:
        return "attention"
    if ".mlp." in name:
        return "mlp"
    return "other"


def masked_loss(logits: torch.Tensor, tokens: torch.Tensor, loss_mask: torch.Tensor, reduction: str = "mean"):
    """Cross-entropy of token t+1 given the prefix, on positions where the target is loss-masked in."""
    target_mask = loss_mask[:, 1:]
    lp = torch.log_softmax(logits[:, :-1].to(torch.float64) if logits.dtype != torch.float64 else logits[:, :-1], -1)
    nll = -lp.gather(-1, tokens[:, 1:, None]).squeeze(-1)
    nll = nll * target_mask
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    return nll.sum() / target_mask.sum().clamp_min(1)


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    state: dict[str, torch.Tensor]
    step: int = 0
    optimizer: dict[str, torch.Tensor] | None = None
    extra: dict = field(default_factory=dict)

    def model(self, dtype=torch.float32) -> Transformer:
        m = Transformer(self.config)
        m.load_state_dict(self.state)
        m.to(dtype)
        m.eval()
        return m

    @property
    def id(self) -> str:
        return self.extra.get("id", "")


def _ckpt_id(state: dict[str, torch.Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[dict]
    seconds: float


def _batches(corpus: TokenizedCorpus, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Uniformly shuffled batches. No length bucketing: sentence length tracks
    content, and length-sorted batches make consecutive updates fight."""
    rng = np.random.Generator(np.random.Philox(key=seed + 7919 * epoch))
    order = rng.permutation(len(corpus))
    return [order[a : a + batch_size] for a in range(0, len(order), batch_size)]


@torch.no_grad()
def evaluate_loss(model: Transformer, corpus: TokenizedCorpus, batch_size: int = 256) -> float:
    model.eval()
    total, count = 0.0, 0
    order = np.argsort(corpus.lengths(), kind="stable")
    for a in range(0, len(order), batch_size):
        toks, mask = corpus.padded(order[a : a + batch_size])
        toks_t, mask_t = torch.from_numpy(toks), torch.from_numpy(mask)
        total += float(masked_loss(model(toks_t), toks_t, mask_t, reduction="sum"))
        count += int(mask[:, 1:].sum())
    return total / max(count, 1)


def make_optimizer(model: Transformer, cfg: ModelConfig) -> torch.optim.Optimizer:
    decay = [p for n, p in model.named_parameters() if p.ndim >= 2]
    no_decay = [p for n, p in model.named_parameters() if p.ndim < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
    )


def train(
    cfg: ModelConfig,
    vocab: Vocabulary,
    corpus: TokenizedCorpus,
    eval_sets: dict[str, TokenizedCorpus] | None = None,
    max_steps: int | None = None,
    resume: Checkpoint | None = None,
    on_eval: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Next-token training over loss-masked positions, ``cfg.epochs`` passes (default one).

    Deterministic for a fixed config and corpus: batch order comes from
    ``cfg.seed``; resuming from a checkpoint replays the same schedule.
    """
    if corpus.vocab.digest != vocab.digest:
        raise ValueError("corpus vocabulary does not match the model vocabulary")
    torch.manual_seed(cfg.seed)
    model = Transformer(cfg)
    opt = make_optimizer(model, cfg)
    step = 0
    if resume is not None:
        model.load_state_dict(resume.state)
        if resume.optimizer is not None:
            _load_optimizer(opt, model, resume.optimizer)
        step = resume.step

    def lr_at(s: int) -> float:
        # linear warmup, then constant
        return cfg.lr * (min(1.0, (s + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0)

    eval_sets = eval_sets or {}
    all_batches = [b for e in range(cfg.epochs) for b in _batches(corpus, cfg.batch_size, cfg.seed, e)]
    if max_steps is not None:
        all_batches = all_batches[:max_steps]
    trace: list[dict] = []
    window: list[float] = []
    t0 = time.time()

    def emit(s: int, evaluate: bool = True) -> None:
        row = {"step": s, "train_loss": float(np.mean(window)) if window else float("nan")}
        trace.append(row)
        if not evaluate:
            return
        for name, ev in eval_sets.items():
            row[name] = evaluate_loss(model, ev)
        model.train()
        if on_eval:
            on_eval(row)
        log.info("step %d %s", s, {k: round(v, 4) for k, v in row.items() if k != "step"})

    model.train()
    for idx in all_batches[step:]:
        toks, mask = corpus.padded(idx)
        toks_t, mask_t = torch.from_numpy(toks), torch.from_numpy(mask)
        loss = masked_loss(model(toks_t), toks_t, mask_t)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {float(loss.detach())} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        for group in opt.param_groups:
            group["lr"] = lr_at(step)
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        step += 1
        window.append(float(loss.detach()))
        if (cfg.eval_every and step % cfg.eval_every == 0) or step == len(all_batches):
            emit(step)
            window = []
        elif cfg.log_every and step % cfg.log_every == 0:
            emit(step, evaluate=False)
            window = []
    if not trace or trace[-1]["step"] != step:
        emit(step)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    ckpt = Checkpoint(cfg, vocab, state, step, _dump_optimizer(opt, model))
    ckpt.extra["id"] = _ckpt_id(state)
    return TrainResult(ckpt, trace, time.time() - t0)


def _dump_optimizer(opt: torch.optim.Optimizer, model: Transformer) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        for key, val in st.items():
            out[f"{name}/{key}"] = torch.as_tensor(val).detach().clone()
    return out


def _load_optimizer(opt: torch.optim.Optimizer, model: Transformer, saved: dict[str, torch.Tensor]) -> None:
    for name, p in model.named_parameters():
        st = {k.split("/", 1)[1]: v.clone() for k, v in saved.items() if k.split("/", 1)[0] == name}
        if st:
            opt.state[p] = st


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _as_model(m: Checkpoint | Transformer) -> Transformer:
    return m.model() if isinstance(m, Checkpoint) else m


def _check_tokens(model: Transformer, tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if t.ndim == 1:
        t = t[None]
    if t.numel() and (t.min() < 0 or t.max() >= model.cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")
    if t.shape[1] > model.cfg.max_seq_len:
        raise ValueError(f"sequence length {t.shape[1]} exceeds max_seq_len={model.cfg.max_seq_len}")
    return t


@torch.no_grad()
def forward(m: Checkpoint | Transformer, tokens, layers: Sequence[int] | None = None):
    """Logits as a numpy array (B, T, V); with ``layers`` also {layer: (B, T, d)}."""
    model = _as_model(m)
    model.eval()
    t = _check_tokens(model, tokens)
    if layers is None:
        return model(t).numpy()
    logits, hidden = model(t, return_hidden=True)
    return logits.numpy(), {l: hidden[l].numpy() for l in _check_layers(model, layers)}


def _check_layers(model: Transformer, layers: Sequence[int]) -> list[int]:
    out = []
    for l in layers:
        if not 0 <= l <= model.cfg.n_layers:
            raise ValueError(f"layer {l} outside [0, {model.cfg.n_layers}]")
        out.append(int(l))
    return out


@torch.no_grad()
def extract_hidden(m: Checkpoint | Transformer, tokens, layers: Sequence[int]) -> dict[int, np.ndarray]:
    """Residual-stream activations after the requested blocks (0 = embeddings)."""
    return forward(m, tokens, layers)[1]


@dataclass
class Generation:
    tokens: list[int]  # generated ids, prompt and EOS excluded
    truncated: bool  # hit max_new_tokens without EOS


@torch.no_grad()
def generate(
    m: Checkpoint | Transformer,
    prompts: Sequence[Sequence[int]],
    max_new_tokens: int,
    seed: int,
    eos: int = Vocabulary.eos,
) -> list[Generation]:
    """Temperature-1 ancestral sampling, one SplitMix64 stream per prompt.

    Prompts are batched by length; prompt ``k`` draws its uniforms from
    ``stream_seed(seed, k)`` and samples by inverting the float64 CDF, so the
    result does not depend on batching.
    """
    model = _as_model(m)
    model.eval()
    n = len(prompts)
    seeds = stream_seeds_np(seed, n)
    results: list[Generation | None] = [None] * n
    by_len: dict[int, list[int]] = {}
    for k, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(k)
    for plen, ids in by_len.items():
        for a in range(0, len(ids), 512):
            chunk = ids[a : a + 512]
            _generate_group(model, [prompts[k] for k in chunk], seeds[chunk], max_new_tokens, eos, results, chunk)
    return results  # type: ignore[return-value]


def _uniforms(seeds: np.ndarray, step: int) -> np.ndarray:
    from ._kernels import MASK64, mix64_np

    z = mix64_np(seeds + np.uint64(((step + 1) * 0x9E3779B97F4A7C15) & MASK64))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _generate_group(model, prompts, seeds, max_new, eos, results, slots):
    x = _check_tokens(model, [list(p) for p in prompts])
    B = x.shape[0]
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    limit = min(max_new, model.cfg.max_seq_len - x.shape[1])
    for step in range(limit):
        probs = torch.softmax(model(x)[:, -1].to(torch.float64), -1).numpy()
        cdf = np.cumsum(probs, axis=1)
        u = _uniforms(seeds, step) * cdf[:, -1]
        nxt = np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == eos:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        if done.all():
            break
        x = torch.cat([x, torch.as_tensor(nxt, dtype=torch.long)[:, None]], dim=1)
    for b, slot in enumerate(slots):
        results[slot] = Generation(out[b], not done[b])


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MCFGCKPT"
CKPT_VERSION = 1
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3, torch.float16: 4, torch.bfloat16: 5}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _write_tensors(parts: list[bytes], tensors: dict[str, torch.Tensor]) -> None:
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPES[t.dtype], t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.view(torch.uint8).numpy().tobytes() if t.dtype == torch.bfloat16 else t.numpy().tobytes())


def _read_tensors(data: bytes, pos: int) -> tuple[dict[str, torch.Tensor], int]:
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = _DTYPES_INV[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * torch.empty(0, dtype=dtype).element_size()
        buf = bytearray(data[pos : pos + nbytes])
        pos += nbytes
        out[name] = torch.frombuffer(buf, dtype=dtype).reshape(shape) if nbytes else torch.empty(shape, dtype=dtype)
    return out, pos


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Header (magic, version, JSON blob with config/vocab/step, vocab hash), then named tensors."""
    meta = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.to_dict(),
        "vocab_hash": ckpt.vocab.digest,
        "step": ckpt.step,
        "extra": ckpt.extra,
        "has_optimizer": ckpt.optimizer is not None,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, bytes.fromhex(ckpt.vocab.digest)]
    _write_tensors(parts, ckpt.state)
    _write_tensors(parts, ckpt.optimizer or {})
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, ln = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(data[16 : 16 + ln].decode("utf-8"))
    pos = 16 + ln
    digest = data[pos : pos + 32].hex()
    pos += 32
    vocab = Vocabulary.from_dict(meta["vocab"])
    if digest != vocab.digest or digest != meta["vocab_hash"]:
        raise ValueError("checkpoint vocabulary hash mismatch")
    state, pos = _read_tensors(data, pos)
    opt, pos = _read_tensors(data, pos)
    return Checkpoint(
        ModelConfig.from_dict(meta["config"]),
        vocab,
        state,
        meta["step"],
        opt if meta["has_optimizer"] else None,
        meta.get("extra", {}),
    )
