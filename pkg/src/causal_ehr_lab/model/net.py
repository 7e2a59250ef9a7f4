"""Transformer feature extractor with causal heads, masked-encounter head and static VAE."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..cohort import (
    KIND_CLS,
    KIND_ENC,
    KIND_PAD,
    KIND_REGION,
    KIND_SEX,
    KIND_SMOKING,
    STATIC_NAMES,
    Vocabulary,
)
from .config import ModelConfig

PROB_FLOOR = 1e-6
LOGIT_CLIP = math.log((1 - PROB_FLOOR) / PROB_FLOOR)
_STATIC_KIND = {"sex": KIND_SEX, "region": KIND_REGION, "smoking": KIND_SMOKING}


def clip_logit(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(-LOGIT_CLIP, LOGIT_CLIP)


def clip_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_FLOOR, 1 - PROB_FLOOR)


@dataclass
class ForwardOutput:
    """Network outputs for a batch.

    The ``*_logit`` fields are already clipped so that the matching
    probabilities stay inside ``[1e-6, 1 - 1e-6]``.
    """

    g_logit: torch.Tensor
    q0_logit: torch.Tensor
    q1_logit: torch.Tensor
    mem_logits: torch.Tensor | None = None
    vae_mu: torch.Tensor | None = None
    vae_logvar: torch.Tensor | None = None
    static_logits: dict | None = None
    attentions: list | None = None

    @property
    def g(self):
        return clip_prob(torch.sigmoid(self.g_logit))

    @property
    def q0(self):
        return clip_prob(torch.sigmoid(self.q0_logit))

    @property
    def q1(self):
        return clip_prob(torch.sigmoid(self.q1_logit))


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.hidden // cfg.heads
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.hidden)
        self.out = nn.Linear(cfg.hidden, cfg.hidden)
        self.drop = nn.Dropout(cfg.attention_dropout)

    def forward(self, x, key_mask, return_attn=False):
        B, L, H = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(B, L, H)
        return self.out(ctx), (attn if return_attn else None)


class EncoderLayer(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.attn = SelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.ff_in = nn.Linear(cfg.hidden, cfg.intermediate)
        self.ff_out = nn.Linear(cfg.intermediate, cfg.hidden)
        self.drop = nn.Dropout(cfg.hidden_dropout)

    def forward(self, x, key_mask, return_attn=False):
        a, probs = self.attn(self.ln1(x), key_mask, return_attn)
        x = x + self.drop(a)
        x = x + self.drop(self.ff_out(F.gelu(self.ff_in(self.ln2(x)))))
        return x, probs


def _mlp(sizes):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ELU())
    return nn.Sequential(*layers)


class TBEHRT(nn.Module):
    """Embedding + transformer stack + propensity/outcome heads + MEM heads.

    The CLS latent feeds a tanh pooler whose output drives the propensity
    network (one hidden layer) and two independent two-hidden-layer ELU
    outcome branches. The last non-padding slot, which holds the final
    static variable, feeds the VAE encoder.
    """

    def __init__(self, cfg: ModelConfig, vocab_size: int, static_cards: dict):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.static_cards = {k: int(static_cards[k]) for k in STATIC_NAMES}
        h = cfg.hidden
        self.code_emb = nn.Embedding(vocab_size, h)
        self.age_emb = nn.Embedding(cfg.max_age + 1, h)
        self.year_emb = nn.Embedding(cfg.n_years + 1, h)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, h)
        # one extra row per static table for the masked/withheld value
        self.static_emb = nn.ModuleDict(
            {k: nn.Embedding(c + 1, h) for k, c in self.static_cards.items()}
        )
        self.emb_drop = nn.Dropout(cfg.hidden_dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_ln = nn.LayerNorm(h)
        self.pooler = nn.Linear(h, h)
        hw = cfg.head_width
        self.propensity = _mlp([h, hw, 1])
        self.outcome0 = _mlp([h, hw, hw, 1])
        self.outcome1 = _mlp([h, hw, hw, 1])
        self.mem_head = nn.Sequential(nn.Linear(h, h), nn.GELU(), nn.LayerNorm(h), nn.Linear(h, vocab_size))
        z = cfg.vae_latent_dim
        self.vae_enc = nn.Linear(h, 2 * z)
        self.vae_dec = nn.ModuleDict({k: _mlp([z, hw, c]) for k, c in self.static_cards.items()})
        self.reset_parameters()

    @classmethod
    def for_vocab(cls, cfg: ModelConfig, vocab: Vocabulary) -> "TBEHRT":
        return cls(cfg, len(vocab), vocab.statics)

    def reset_parameters(self):
        std = self.cfg.init_range
        for mod in self.modules():
            if isinstance(mod, (nn.Linear, nn.Embedding)):
                nn.init.normal_(mod.weight, 0.0, std)
                if getattr(mod, "bias", None) is not None:
                    nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)

    # -- pieces -----------------------------------------------------------

    def embed(self, codes, ages, years, positions, kinds, statics):
        """Sum of code/age/year/position embeddings on CLS and encounter
        slots; static slots use their own tables; padding stays zero."""
        cfg = self.cfg
        temporal = (kinds == KIND_CLS) | (kinds == KIND_ENC)
        year_idx = torch.where(years > 0, years - cfg.year_base + 1, torch.zeros_like(years))
        year_idx = torch.where(temporal, year_idx, torch.zeros_like(year_idx))
        age_idx = torch.where(temporal, ages, torch.zeros_like(ages))
        checks = (
            ("code", codes, self.vocab_size),
            ("age", age_idx, cfg.max_age + 1),
            ("year", year_idx, cfg.n_years + 1),
            ("position", positions, cfg.max_seq_len),
        )
        for name, idx, size in checks:
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= size):
                raise IndexError(f"{name} index outside embedding table of size {size}")
        x = self.code_emb(codes) + self.age_emb(age_idx) + self.year_emb(year_idx) + self.pos_emb(positions)
        x = x * temporal.unsqueeze(-1).to(x.dtype)
        for name, kind in _STATIC_KIND.items():
            slot = kinds == kind
            card = self.static_cards[name]
            idx = torch.where(slot, statics, torch.zeros_like(statics))
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) > card):
                raise IndexError(f"{name} value outside embedding table of size {card + 1}")
            x = x + self.static_emb[name](idx) * slot.unsqueeze(-1).to(x.dtype)
        return x

    def encode(self, embedded, key_mask, return_attn=False):
        x = self.emb_drop(embedded)
        attns = []
        for layer in self.layers:
            x, a = layer(x, key_mask, return_attn)
            attns.append(a)
        return self.final_ln(x), (attns if return_attn else None)

    def heads(self, latents):
        pooled = torch.tanh(self.pooler(latents[:, 0]))
        g = clip_logit(self.propensity(pooled).squeeze(-1))
        q0 = clip_logit(self.outcome0(pooled).squeeze(-1))
        q1 = clip_logit(self.outcome1(pooled).squeeze(-1))
        return g, q0, q1

    def vae(self, latents, lengths, noise=None):
        last = latents[torch.arange(latents.shape[0]), lengths - 1]
        mu, logvar = self.vae_enc(last).chunk(2, dim=-1)
        if noise is not None:
            z = mu + torch.exp(0.5 * logvar) * noise
        elif self.training:
            z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
        else:
            z = mu
        return mu, logvar, {k: dec(z) for k, dec in self.vae_dec.items()}

    def forward(self, batch: dict, with_mem: bool = True, return_attn: bool = False, vae_noise=None):
        kinds = batch["kinds"]
        key_mask = kinds != KIND_PAD
        emb = self.embed(batch["codes"], batch["ages"], batch["years"], batch["positions"], kinds, batch["statics"])
        latents, attns = self.encode(emb, key_mask, return_attn)
        g, q0, q1 = self.heads(latents)
        out = ForwardOutput(g, q0, q1, attentions=attns)
        if with_mem:
            out.mem_logits = self.mem_head(latents)
            out.vae_mu, out.vae_logvar, out.static_logits = self.vae(latents, batch["lengths"], vae_noise)
        return out
