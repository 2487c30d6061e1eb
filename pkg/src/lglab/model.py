"""Decoder-only transformer with tempered softmax and two task heads.

Each block is normalize ∘ (I + MLP) ∘ (I + attention): heads read disjoint
d/h-column slices of the residual stream, their outputs are concatenated with
no output projection, and one parameterless layer_norm closes the block.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from lglab.datagen import BOT_ID
from lglab.errors import CapacityError, ContractError, DimensionError, DomainError, VocabularyError
from lglab.numerics import causal_tempered_softmax, layer_norm, matmul, mlp_apply, resolve_dtype

# 定数
SOFTMAX_MODES = ("standard", "tempered")
HEAD_IDS = ("main", "aux")
STAGES = ("pre_mlp", "post_mlp")
EMBEDDING_STD = 0.02

NInput = Union[int, Sequence[int], torch.Tensor]

# ============================================
# Domain Layer
# ============================================


@dataclass(frozen=True)
class ModelConfig:
    """モデル構成の値オブジェクト"""
    depth: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 128
    vocab_size: int = 103
    activation: str = "gelu"
    softmax_mode: str = "standard"
    context_length: int = 64
    positional_embeddings: str = "none"
    normalize: bool = True
    beta_init: float = 1.0
    precision: str = "float64"

    def __post_init__(self):
        if self.depth < 0:
            raise ContractError(f"depth must be >= 0, got {self.depth}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise DimensionError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 3:
            raise VocabularyError(f"vocab_size must be >= 3, got {self.vocab_size}")
        if self.softmax_mode not in SOFTMAX_MODES:
            raise DomainError(f"Unknown softmax_mode '{self.softmax_mode}'")
        if self.activation not in ("relu", "gelu"):
            raise DomainError(f"Unknown activation '{self.activation}'")
        if self.positional_embeddings != "none":
            raise ContractError("Only positional_embeddings='none' is supported")
        if self.beta_init <= 0:
            raise DomainError(f"beta_init must be positive, got {self.beta_init}")
        if self.context_length < 4:
            raise CapacityError(f"context_length too small: {self.context_length}")
        resolve_dtype(self.precision)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_instance_length(self) -> int:
        """context_length ≥ 2·n + 2 を満たす最大の入力長"""
        return (self.context_length - 2) // 2

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class ActivationTrace:
    """位置・深さごとの MLP 前後の埋め込み

    Tensors have shape (..., T, depth, d); the leading dimensions follow the
    token batch that produced the trace.
    """
    pre_mlp: torch.Tensor
    post_mlp: torch.Tensor

    @property
    def length(self) -> int:
        return self.pre_mlp.shape[-3]

    @property
    def depth(self) -> int:
        return self.pre_mlp.shape[-2]

    def stage(self, name: str) -> torch.Tensor:
        if name not in STAGES:
            raise ContractError(f"Unknown stage '{name}', expected one of {STAGES}")
        return self.pre_mlp if name == "pre_mlp" else self.post_mlp

    def at(self, position: int, depth: int, stage: str) -> torch.Tensor:
        if not 0 <= position < self.length:
            raise ContractError(f"position {position} out of range [0, {self.length})")
        if not 0 <= depth < self.depth:
            raise ContractError(f"depth {depth} out of range [0, {self.depth})")
        return self.stage(stage)[..., position, depth, :]

    def example(self, index: int) -> "ActivationTrace":
        """バッチから1系列分を取り出す"""
        return ActivationTrace(self.pre_mlp[index], self.post_mlp[index])


def tempered_tau(beta: Union[float, torch.Tensor], n_input: NInput, softmax_mode: str = "tempered"):
    """τ = β·ln n in tempered mode, 1 in standard mode.

    Args:
        beta: per-layer temper scale (float or scalar tensor)
        n_input: instance length(s); a tensor yields one τ per example

    Returns:
        float, or a tensor shaped like `n_input`
    """
    if softmax_mode not in SOFTMAX_MODES:
        raise DomainError(f"Unknown softmax_mode '{softmax_mode}'")
    if softmax_mode == "standard":
        return 1.0
    if isinstance(n_input, torch.Tensor):
        if bool((n_input < 2).any()):
            raise DomainError(f"Tempered softmax needs n_input >= 2, got {n_input.tolist()}")
        return beta * torch.log(n_input.to(torch.float64))
    if n_input < 2:
        raise DomainError(f"Tempered softmax needs n_input >= 2, got {n_input}")
    return beta * math.log(n_input)


def masked_next_token_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the positions whose mask is 1."""
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise DimensionError(
            f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)} and mask {tuple(mask.shape)} are not aligned"
        )
    weights = mask.to(logits.dtype)
    total = weights.sum()
    if float(total) == 0.0:
        raise ContractError("Loss mask has no positions set")
    per_position = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).long(), reduction="none"
    )
    return (per_position * weights.reshape(-1)).sum() / total


# ============================================
# Network
# ============================================


def _gaussian(shape: Tuple[int, ...], std: float, generator: torch.Generator, dtype: torch.dtype) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=generator, dtype=dtype) * std)


class TransformerBlock(nn.Module):
    """ブロック B_t = normalize ∘ (I + f^mlp) ∘ (I + f^attn)"""

    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        dtype = resolve_dtype(cfg.precision)
        std = EMBEDDING_STD / math.sqrt(2.0 * max(cfg.depth, 1))
        h, dh = cfg.n_heads, cfg.d_head
        self.activation = cfg.activation
        self.normalize = cfg.normalize
        self.n_heads = h
        self.w_q = _gaussian((h, dh, dh), std, generator, dtype)
        self.w_k = _gaussian((h, dh, dh), std, generator, dtype)
        self.w_v = _gaussian((h, dh, dh), std, generator, dtype)
        self.w1 = _gaussian((cfg.d_model, cfg.d_mlp), std, generator, dtype)
        self.b1 = nn.Parameter(torch.zeros(cfg.d_mlp, dtype=dtype))
        self.w2 = _gaussian((cfg.d_mlp, cfg.d_model), std, generator, dtype)
        self.b2 = nn.Parameter(torch.zeros(cfg.d_model, dtype=dtype))
        if cfg.softmax_mode == "tempered":
            # β = exp(log_beta) > 0 なので τ は常に正
            self.log_beta = nn.Parameter(torch.tensor(math.log(cfg.beta_init), dtype=dtype))
        else:
            self.register_parameter("log_beta", None)

    @property
    def beta(self) -> Optional[torch.Tensor]:
        return None if self.log_beta is None else self.log_beta.exp()

    def attention(self, x: torch.Tensor, tau) -> torch.Tensor:
        """Concatenated per-head attention output (no residual)."""
        batch, length, d = x.shape
        slices = x.view(batch, length, self.n_heads, -1)
        q = torch.einsum("bthd,hde->bhte", slices, self.w_q)
        k = torch.einsum("bthd,hde->bhte", slices, self.w_k)
        v = torch.einsum("bthd,hde->bhte", slices, self.w_v)
        scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        weights = causal_tempered_softmax(scores, tau)
        return matmul(weights, v).transpose(1, 2).reshape(batch, length, d)

    def forward(self, x: torch.Tensor, tau) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (block output, post-attention pre-MLP embedding)."""
        y = x + self.attention(x, tau)
        z = y + mlp_apply(y, self.w1, self.b1, self.w2, self.b2, self.activation)
        return (layer_norm(z) if self.normalize else z), y


class TaskHead(nn.Module):
    """分類ヘッド logits = X·W + b"""

    def __init__(self, cfg: ModelConfig, generator: torch.Generator):
        super().__init__()
        dtype = resolve_dtype(cfg.precision)
        self.weight = _gaussian((cfg.d_model, cfg.vocab_size), EMBEDDING_STD, generator, dtype)
        self.bias = nn.Parameter(torch.zeros(cfg.vocab_size, dtype=dtype))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return matmul(embeddings, self.weight) + self.bias


class TransformerModel(nn.Module):
    """埋め込み・ブロック列・main/aux ヘッドからなるモデル"""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        generator = torch.Generator().manual_seed(seed)
        dtype = resolve_dtype(cfg.precision)
        self.embedding = _gaussian((cfg.vocab_size, cfg.d_model), EMBEDDING_STD, generator, dtype)
        self.blocks = nn.ModuleList([TransformerBlock(cfg, generator) for _ in range(cfg.depth)])
        self.heads = nn.ModuleDict({head_id: TaskHead(cfg, generator) for head_id in HEAD_IDS})

    @property
    def context_length(self) -> int:
        return self.cfg.context_length

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def block_tau(self, layer: int, n_input: torch.Tensor):
        block = self.blocks[layer]
        tau = tempered_tau(block.beta, n_input, self.cfg.softmax_mode)
        if isinstance(tau, torch.Tensor):
            return tau.to(self.embedding.dtype).view(-1, 1, 1, 1)
        return tau

    def apply_head(self, head_id: str, embeddings: torch.Tensor) -> torch.Tensor:
        if head_id not in self.heads:
            raise ContractError(f"Unknown head '{head_id}', expected one of {HEAD_IDS}")
        return self.heads[head_id](embeddings)

    def _validate_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.shape[-1] > self.cfg.context_length:
            raise CapacityError(
                f"Sequence length {tokens.shape[-1]} exceeds context_length {self.cfg.context_length}"
            )
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise VocabularyError(
                f"Token ids must lie in [0, {self.cfg.vocab_size}), got range "
                f"[{int(tokens.min())}, {int(tokens.max())}]"
            )

    def forward(
        self,
        tokens: Union[torch.Tensor, Sequence[int]],
        n_input: NInput,
        head_id: str = "main",
        capture: bool = False,
    ) -> Tuple[torch.Tensor, Optional[ActivationTrace]]:
        """Logits for every position, plus the activation trace when `capture` is set.

        Args:
            tokens: (T,) or (B, T) token ids
            n_input: instance length per example (tokens strictly before ⊥)
            head_id: "main" or "aux"
            capture: record pre/post-MLP embeddings per block

        Returns:
            (logits of shape (..., T, vocab_size), ActivationTrace or None)
        """
        if head_id not in self.heads:
            raise ContractError(f"Unknown head '{head_id}', expected one of {HEAD_IDS}")
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        single = tokens.dim() == 1
        if single:
            tokens = tokens.unsqueeze(0)
        self._validate_tokens(tokens)
        lengths = torch.as_tensor(n_input, dtype=torch.long).reshape(-1).expand(tokens.shape[0])

        x = self.embedding[tokens]
        pre: List[torch.Tensor] = []
        post: List[torch.Tensor] = []
        for layer, block in enumerate(self.blocks):
            x, y = block(x, self.block_tau(layer, lengths))
            if capture:
                pre.append(y)
                post.append(x)
        logits = self.apply_head(head_id, x)

        trace = None
        if capture:
            if pre:
                trace = ActivationTrace(torch.stack(pre, dim=-2), torch.stack(post, dim=-2))
            else:
                empty = x.new_zeros(*x.shape[:-1], 0, x.shape[-1])
                trace = ActivationTrace(empty, empty)
            if single:
                trace = trace.example(0)
        if single:
            logits = logits.squeeze(0)
        return logits, trace

    def next_token_logits(self, tokens: torch.Tensor, n_input: int) -> torch.Tensor:
        """Main-head logits at the last position of each row of a (B, t) batch."""
        with torch.no_grad():
            logits, _ = self.forward(tokens, n_input, head_id="main")
        return logits[:, -1, :]


def build_model(cfg: ModelConfig, seed: int = 0) -> TransformerModel:
    model = TransformerModel(cfg, seed)
    logging.debug(f"Built model with {sum(p.numel() for p in model.parameters())} parameters")
    return model


def attention_block(x: torch.Tensor, block: TransformerBlock, tau) -> torch.Tensor:
    """Apply one block to a (T, d) or (B, T, d) embedding."""
    single = x.dim() == 2
    out, _ = block(x.unsqueeze(0) if single else x, tau)
    return out.squeeze(0) if single else out


# ============================================
# Decoding
# ============================================


class SequenceDecoder(Protocol):
    """greedy_decode が要求するデコーダのプロトコル"""

    @property
    def context_length(self) -> int: ...

    def next_token_logits(self, tokens: torch.Tensor, n_input: int) -> torch.Tensor: ...


def argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax; ties go to the lowest id."""
    best = logits.max(dim=-1, keepdim=True).values
    ids = torch.arange(logits.shape[-1]).expand_as(logits)
    sentinel = torch.full_like(ids, logits.shape[-1])
    return torch.where(logits == best, ids, sentinel).min(dim=-1).values


def greedy_decode_batch(
    decoder: SequenceDecoder,
    inputs: Union[torch.Tensor, Sequence[Sequence[int]]],
    n_out: int,
) -> List[List[int]]:
    """Greedy continuation of equally long prompts ending in ⊥, exactly `n_out` steps."""
    if n_out < 1:
        raise ContractError(f"n_out must be >= 1, got {n_out}")
    tokens = torch.as_tensor(inputs, dtype=torch.long)
    if tokens.dim() != 2 or tokens.shape[1] < 2:
        raise ContractError(f"Expected a (B, L) prompt batch with L >= 2, got {tuple(tokens.shape)}")
    if bool((tokens[:, -1] != BOT_ID).any()):
        raise ContractError("Every prompt must end with the ⊥ token")
    if tokens.shape[1] + n_out - 1 > decoder.context_length:
        raise CapacityError(
            f"Prompt {tokens.shape[1]} + {n_out} outputs exceeds context_length {decoder.context_length}"
        )
    n_input = tokens.shape[1] - 1
    outputs: List[torch.Tensor] = []
    for _ in range(n_out):
        next_ids = argmax_lowest(decoder.next_token_logits(tokens, n_input))
        outputs.append(next_ids)
        tokens = torch.cat([tokens, next_ids.unsqueeze(1)], dim=1)
    return torch.stack(outputs, dim=1).tolist()


def greedy_decode(decoder: SequenceDecoder, input_tokens: Sequence[int], n_out: int) -> List[int]:
    return greedy_decode_batch(decoder, [list(input_tokens)], n_out)[0]
