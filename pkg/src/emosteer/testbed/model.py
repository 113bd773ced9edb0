"""Small decoder-only transformer standing in for the speech-token LM.

Prompt layout: ``BOS COND_e c_1 .. c_n SEP``; target continuation:
``p_1 c_1 p_2 c_2 .. p_n c_n EOS`` where ``c`` are content symbols copied from
the transcript and ``p`` prosody symbols carrying emotion. Prosody comes
first so the prompt's last position already predicts an emotional symbol.

Every candidate steering site is an identity :class:`HookPoint` module, so
capture and injection are plain forward hooks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from emosteer.errors import ConfigurationError

OPERATORS = (
    "emb_pre_attn_post_ln",
    "q_proj",
    "k_proj",
    "v_proj",
    "attn_output",
    "W0_x_attn_output",
    "emb_post_attn_pre_ln",
    "emb_post_attn_post_ln",
    "emb_post_mlp_residual",
    "layer_output",
)
FUSED_OPERATORS = (
    "emb_pre_attn_post_ln",
    "qkv_proj",
    "attn_output",
    "W0_x_attn_output",
    "emb_post_attn_pre_ln",
    "emb_post_attn_post_ln",
    "emb_post_mlp_residual",
    "layer_output",
)
ALL_OPERATORS = OPERATORS + ("qkv_proj",)


@dataclass(frozen=True)
class Vocab:
    content: int
    prosody: int
    emotions: int

    @property
    def prosody_offset(self) -> int:
        return self.content

    @property
    def cond_offset(self) -> int:
        return self.content + self.prosody

    @property
    def bos(self) -> int:
        return self.cond_offset + self.emotions

    @property
    def eos(self) -> int:
        return self.bos + 1

    @property
    def sep(self) -> int:
        return self.bos + 2

    @property
    def size(self) -> int:
        return self.bos + 3

    def is_content(self, tok: int) -> bool:
        return 0 <= tok < self.content

    def is_prosody(self, tok: int) -> bool:
        return self.prosody_offset <= tok < self.cond_offset

    def cond(self, emotion_index: int) -> int:
        return self.cond_offset + emotion_index

    def prompt(self, transcript, emotion_index: int) -> list[int]:
        return [self.bos, self.cond(emotion_index), *transcript, self.sep]

    def target(self, transcript, prosody) -> list[int]:
        out = []
        for c, p in zip(transcript, prosody):
            out += [self.prosody_offset + p, c]
        return out + [self.eos]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_mlp: int = 256
    content_vocab: int = 32
    prosody_vocab: int = 16
    num_emotions: int = 5
    max_len: int = 64
    fused_qkv: bool = False
    # continuation positions cannot attend to the condition token, so the
    # condition reaches them only through the other prompt positions
    condition_bottleneck: bool = True

    def __post_init__(self):
        if self.n_layers < 4:
            raise ConfigurationError(f"n_layers must be >= 4, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.content_vocab, self.prosody_vocab, self.num_emotions)

    @property
    def operators(self) -> tuple[str, ...]:
        return FUSED_OPERATORS if self.fused_qkv else OPERATORS

    def site_width(self, operator: str) -> int:
        return 3 * self.d_model if operator == "qkv_proj" else self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


class HookPoint(nn.Module):
    """Identity module; forward hooks on it read or rewrite the activation."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.fused = cfg.fused_qkv
        self.ln1 = nn.LayerNorm(d)
        if self.fused:
            self.W_qkv = nn.Linear(d, 3 * d)
        else:
            self.W_q = nn.Linear(d, d)
            self.W_k = nn.Linear(d, d)
            self.W_v = nn.Linear(d, d)
        self.W_o = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.mlp_in = nn.Linear(d, cfg.d_mlp)
        self.mlp_out = nn.Linear(cfg.d_mlp, d)
        self.hooks = nn.ModuleDict({op: HookPoint() for op in cfg.operators})

    def forward(self, x: torch.Tensor, mask: torch.Tensor, past=None):
        h = self.hooks
        a = h["emb_pre_attn_post_ln"](self.ln1(x))
        if self.fused:
            qkv = h["qkv_proj"](self.W_qkv(a))
            q, k, v = qkv.split(x.shape[-1], dim=-1)
        else:
            q = h["q_proj"](self.W_q(a))
            k = h["k_proj"](self.W_k(a))
            v = h["v_proj"](self.W_v(a))
        B, T, D = q.shape
        hd = D // self.n_heads
        q, k, v = (t.view(B, T, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        scores = scores.masked_fill(mask, float("-inf"))
        z = (scores.softmax(-1) @ v).transpose(1, 2).reshape(B, T, D)
        z = h["attn_output"](z)
        o = h["W0_x_attn_output"](self.W_o(z))
        r = h["emb_post_attn_pre_ln"](x + o)
        m = h["emb_post_attn_post_ln"](self.ln2(r))
        r = h["emb_post_mlp_residual"](r + self.mlp_out(F.gelu(self.mlp_in(m))))
        return h["layer_output"](r), (k, v)


class ToyTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab.size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.register_buffer(
            "causal_mask", torch.triu(torch.ones(cfg.max_len, cfg.max_len, dtype=torch.bool), 1), persistent=False
        )
        self.position_offset = 0
        self.apply(self._init)

    @staticmethod
    def _init(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)

    def hook_point(self, layer: int, operator: str) -> HookPoint:
        """``layer`` is 1-based."""
        return self.blocks[layer - 1].hooks[operator]

    def attention_mask(self, tokens: torch.Tensor, offset: int, prompt_len=None) -> torch.Tensor:
        """Boolean mask (True = blocked), ``[T, T_total]`` or ``[B, 1, T, T_total]``."""
        T = tokens.shape[1]
        mask = self.causal_mask[offset:offset + T, : offset + T]
        if not self.cfg.condition_bottleneck:
            return mask
        if prompt_len is None:
            if offset:
                raise ValueError("prompt_len is required when decoding with a cache")
            is_sep = tokens == self.cfg.vocab.sep
            # rows without SEP are all prompt
            prompt_len = torch.where(is_sep.any(1), is_sep.int().argmax(1) + 1, torch.full((tokens.shape[0],), T))
        prompt_len = torch.as_tensor(prompt_len).reshape(-1, 1, 1)
        query_pos = torch.arange(offset, offset + T).reshape(1, T, 1)
        key_is_cond = (torch.arange(offset + T) == 1).reshape(1, 1, -1)
        blocked = key_is_cond & (query_pos >= prompt_len)
        return (mask.unsqueeze(0) | blocked).unsqueeze(1)

    def forward(self, tokens: torch.Tensor, past=None, return_cache: bool = False, prompt_len=None):
        """Logits for ``tokens``; ``past`` holds per-layer keys/values of earlier positions.

        ``self.position_offset`` is set to the absolute position of
        ``tokens[:, 0]`` so hooks can locate positions when decoding
        incrementally. ``prompt_len`` (int or per-row tensor) is inferred from
        the SEP token when the whole sequence is given.
        """
        T = tokens.shape[1]
        offset = 0 if past is None else past[0][0].shape[2]
        if offset + T > self.cfg.max_len:
            raise ValueError(f"sequence length {offset + T} exceeds max_len {self.cfg.max_len}")
        self.position_offset = offset
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(offset, offset + T))
        mask = self.attention_mask(tokens, offset, prompt_len)
        cache = []
        for i, block in enumerate(self.blocks):
            x, kv = block(x, mask, None if past is None else past[i])
            cache.append(kv)
        # tied output head
        logits = self.ln_f(x) @ self.tok_emb.weight.T
        return (logits, cache) if return_cache else logits
