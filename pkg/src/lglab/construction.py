"""Hand-set depth-2 sorting transformer with stage-by-stage verification.

Symbols live in Σ′ = {⊥, 1..q} with ⊥ encoded as 0. The residual stream has
one coordinate per atlas vector (six families × (q+1) symbols), so every map
below is an exact coordinate permutation/scaling and the atlas is exactly
orthonormal.

Attention follows the row convention of the trained model: score(i, j) =
⟨x_i Q, x_j K⟩ times the temper τ = 3 ln n, values x_j V. Each head's maps are
stored as full d×d matrices over disjoint coordinate supports and their
outputs are summed, which equals concatenation over those supports.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from lglab.datagen import BOT_ID, SORTING_TABLE
from lglab.errors import CapacityError, ContractError, DomainError, VocabularyError
from lglab.model import ActivationTrace, argmax_lowest
from lglab.numerics import causal_tempered_softmax, layer_norm, mlp_apply

# 定数
BOT = 0
FAMILIES = ("e", "e_prime", "e_tilde", "e_tilde_prime", "e_hat", "e_hat_prime")
LAYERNORM_MODES = ("off", "doubled")
STAGE_NAMES = ("copy", "min", "identity_successor", "denoise")
DTYPE = torch.float64
# 正規化前の埋め込みの名目二乗ノルム（各半分で 4）
NOMINAL_SQUARED_NORM = 8.0

# ============================================
# Domain Layer
# ============================================


@dataclass(frozen=True)
class BasisAtlas:
    """6 系列の正規直交ベクトル e, e′, ẽ, ẽ′, ê, ê′ の座標割り当て"""
    q: int

    def __post_init__(self):
        if self.q < 2:
            raise ContractError(f"Alphabet size q must be >= 2, got {self.q}")

    @property
    def d(self) -> int:
        return 6 * (self.q + 1)

    @property
    def symbols(self) -> range:
        """Σ（⊥ を除く）"""
        return range(1, self.q + 1)

    def index(self, family: str, symbol: int) -> int:
        if family not in FAMILIES:
            raise ContractError(f"Unknown basis family '{family}'")
        if not 0 <= symbol <= self.q:
            raise ContractError(f"Symbol {symbol} outside Σ′ = {{⊥, 1..{self.q}}}")
        return FAMILIES.index(family) * (self.q + 1) + symbol

    def indices(self, family: str, symbols: Optional[Iterable[int]] = None) -> torch.Tensor:
        chosen = self.symbols if symbols is None else symbols
        return torch.tensor([self.index(family, s) for s in chosen], dtype=torch.long)

    def vector(self, family: str, symbol: int) -> torch.Tensor:
        v = torch.zeros(self.d, dtype=DTYPE)
        v[self.index(family, symbol)] = 1.0
        return v

    def encode(self, symbol: int) -> torch.Tensor:
        """Enc(s) = e_s + e′_s"""
        return self.vector("e", symbol) + self.vector("e_prime", symbol)

    def encoder_matrix(self) -> torch.Tensor:
        """(q+1, d): row s is Enc(s)"""
        return torch.stack([self.encode(s) for s in range(self.q + 1)])

    def decoder_matrix(self) -> torch.Tensor:
        """(q+1, d): row s is ê_s + ê′_s"""
        return torch.stack([self.vector("e_hat", s) + self.vector("e_hat_prime", s) for s in range(self.q + 1)])

    def family_matrix(self, family: str) -> torch.Tensor:
        return torch.stack([self.vector(family, s) for s in range(self.q + 1)])


@dataclass(frozen=True)
class ConstructionConfig:
    """構成モデルのパラメータ（q, n, C, ε, layernorm_mode）"""
    q: int
    n: int
    c: float = 3.0
    epsilon: Optional[float] = None
    layernorm_mode: str = "off"

    def __post_init__(self):
        if self.q < 2:
            raise ContractError(f"Alphabet size q must be >= 2, got {self.q}")
        if self.n < 2:
            raise DomainError(f"Input length n must be >= 2, got {self.n}")
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", 1.0 / (4.0 * (self.n + 1)))
        if not 0.0 < self.epsilon <= 0.5:
            raise DomainError(f"ε must lie in (0, 1/2], got {self.epsilon}")
        if self.c <= 0:
            raise DomainError(f"C must be positive, got {self.c}")
        if self.layernorm_mode not in LAYERNORM_MODES:
            raise ContractError(f"Unknown layernorm_mode '{self.layernorm_mode}'")

    @property
    def tau(self) -> float:
        return 3.0 * math.log(self.n)

    def gamma(self, symbol: int) -> float:
        """γ_b = q − b + 1（b が小さいほど大きい）"""
        return float(self.q - symbol + 1)


@dataclass(frozen=True)
class ToleranceConfig:
    """「≈」比較のノイズ予算"""
    noise_budget: Optional[float] = None

    def __post_init__(self):
        if self.noise_budget is not None and self.noise_budget <= 0:
            raise DomainError(f"noise_budget must be positive, got {self.noise_budget}")

    def budget(self, n: int) -> float:
        return self.noise_budget if self.noise_budget is not None else 10.0 / (n * n)


@dataclass(frozen=True)
class SparseMap:
    """行ベクトル規約の線形写像 x ↦ x·M を非ゼロ行・列だけで保持する"""
    rows: torch.Tensor
    cols: torch.Tensor
    block: torch.Tensor
    width_in: int
    width_out: int

    @classmethod
    def from_dense(cls, matrix: torch.Tensor, cols: Optional[torch.Tensor] = None) -> "SparseMap":
        rows = matrix.abs().sum(dim=1).nonzero().flatten()
        if cols is None:
            cols = matrix.abs().sum(dim=0).nonzero().flatten()
        block = matrix.index_select(0, rows).index_select(1, cols)
        return cls(rows, cols, block, matrix.shape[0], matrix.shape[1])

    def compact(self, x: torch.Tensor) -> torch.Tensor:
        return x.index_select(-1, self.rows) @ self.block

    def scatter(self, compact: torch.Tensor) -> torch.Tensor:
        dense = compact.new_zeros(*compact.shape[:-1], self.width_out)
        dense[..., self.cols] = compact
        return dense

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return self.scatter(self.compact(x))

    def dense(self) -> torch.Tensor:
        matrix = torch.zeros(self.width_in, self.width_out, dtype=self.block.dtype)
        matrix[self.rows.unsqueeze(1), self.cols.unsqueeze(0)] = self.block
        return matrix


def _shared_maps(first: torch.Tensor, second: torch.Tensor) -> Tuple[SparseMap, SparseMap]:
    """Q と K を共通の出力列で圧縮（スコアの内積に必要）"""
    cols = ((first.abs().sum(dim=0) + second.abs().sum(dim=0)) != 0).nonzero().flatten()
    return SparseMap.from_dense(first, cols), SparseMap.from_dense(second, cols)


@dataclass(frozen=True)
class AttentionHead:
    """1 ヘッドの Q, K, V"""
    q_map: SparseMap
    k_map: SparseMap
    v_map: SparseMap

    @classmethod
    def from_dense(cls, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> "AttentionHead":
        q_map, k_map = _shared_maps(q, k)
        return cls(q_map, k_map, SparseMap.from_dense(v))

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.q_map.compact(x) @ self.k_map.compact(x).transpose(-1, -2)

    def __call__(self, x: torch.Tensor, tau: float, score_scale: float = 1.0) -> torch.Tensor:
        weights = causal_tempered_softmax(self.scores(x) * score_scale, tau)
        return self.v_map.scatter(weights @ self.v_map.compact(x))


@dataclass(frozen=True)
class ConstructionMLP:
    """ReLU MLP（W1 は入力側の非ゼロ行、W2 は出力側の非ゼロ列のみ保持）"""
    w1: SparseMap
    b1: torch.Tensor
    w2: SparseMap
    b2: torch.Tensor

    @classmethod
    def from_dense(cls, w1: torch.Tensor, b1: torch.Tensor, w2: torch.Tensor, b2: torch.Tensor) -> "ConstructionMLP":
        hidden = torch.arange(w1.shape[1])
        in_map = SparseMap.from_dense(w1, cols=hidden)
        out_map = SparseMap.from_dense(w2)
        out_map = SparseMap(hidden, out_map.cols, w2.index_select(1, out_map.cols), w2.shape[0], w2.shape[1])
        return cls(in_map, b1, out_map, b2.index_select(0, out_map.cols))

    def __call__(self, y: torch.Tensor) -> torch.Tensor:
        compact = mlp_apply(y.index_select(-1, self.w1.rows), self.w1.block, self.b1,
                            self.w2.block, self.b2, "relu")
        return self.w2.scatter(compact)


@dataclass(frozen=True)
class ConstructionBlock:
    """2 ヘッド + MLP + （任意の）正規化"""
    heads: Tuple[AttentionHead, AttentionHead]
    mlp: ConstructionMLP
    normalize: bool = False
    score_scale: float = 1.0

    def __call__(self, x: torch.Tensor, tau: float) -> Tuple[torch.Tensor, torch.Tensor]:
        y = x + sum(head(x, tau, self.score_scale) for head in self.heads)
        z = y + self.mlp(y)
        return (layer_norm(z) if self.normalize else z), y


@dataclass(frozen=True)
class ConstructionModel:
    """構成済みの 2 ブロック・ソート変換器"""
    cfg: ConstructionConfig
    atlas: BasisAtlas
    embedding: torch.Tensor
    blocks: Tuple[ConstructionBlock, ConstructionBlock]
    decoder: torch.Tensor

    @property
    def width(self) -> int:
        return self.embedding.shape[1]

    @property
    def doubled(self) -> bool:
        return self.width == 2 * self.atlas.d

    def coordinates(self, rows: torch.Tensor) -> torch.Tensor:
        """Atlas coordinates of residual rows (the first half in the doubled variant)."""
        return rows[..., :self.atlas.d]

    def forward_batch(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, ActivationTrace]:
        """Symbol logits (B, T, q+1) with ⊥ excluded, and the four-stage trace."""
        x = self.embedding[tokens]
        pre: List[torch.Tensor] = []
        post: List[torch.Tensor] = []
        for block in self.blocks:
            x, y = block(x, self.cfg.tau)
            pre.append(y)
            post.append(x)
        logits = x @ self.decoder
        logits[..., BOT] = float("-inf")
        return logits, ActivationTrace(torch.stack(pre, dim=-2), torch.stack(post, dim=-2))


# ドメインサービス

def build_atlas(q: int) -> BasisAtlas:
    return BasisAtlas(q)


def _block_one(cfg: ConstructionConfig, atlas: BasisAtlas) -> ConstructionBlock:
    d, ix, q = atlas.d, atlas.index, cfg.q
    sigma_prime = range(q + 1)

    # ヘッド1: ⊥ を最優先し、次に自分と同じ記号に注意（ẽ に記号分布を書き込む）
    wq, wk, wv = (torch.zeros(d, d, dtype=DTYPE) for _ in range(3))
    for a in atlas.symbols:
        wq[ix("e", a), ix("e", a)] = 1.0
        wq[ix("e", a), ix("e", BOT)] = cfg.c
    wq[ix("e", BOT), ix("e", BOT)] = 1.0
    for s in sigma_prime:
        wk[ix("e", s), ix("e", s)] = 1.0
        wv[ix("e", s), ix("e_tilde", s)] = 1.0
    head_one = AttentionHead.from_dense(wq, wk, wv)

    # ヘッド2: ⊥ 行は γ_b で最小値に注意、他の行は同じ記号に注意（ê′ へ）
    wq, wk, wv = (torch.zeros(d, d, dtype=DTYPE) for _ in range(3))
    for a in atlas.symbols:
        wq[ix("e_prime", a), ix("e_prime", a)] = 1.0
        wq[ix("e_prime", BOT), ix("e_prime", a)] = cfg.gamma(a)
        wv[ix("e_prime", a), ix("e_hat_prime", a)] = 1.0
    for s in sigma_prime:
        wk[ix("e_prime", s), ix("e_prime", s)] = 1.0
    head_two = AttentionHead.from_dense(wq, wk, wv)

    # MLP: f11 は ẽ_⊥ を −ẽ′_b へ変換、f12 は ẽ_b を ẽ′_b へ移す
    hidden = 3 * q
    w1 = torch.zeros(d, hidden, dtype=DTYPE)
    b1 = torch.zeros(hidden, dtype=DTYPE)
    w2 = torch.zeros(hidden, d, dtype=DTYPE)
    for unit, b in enumerate(atlas.symbols):
        w1[ix("e", b), unit] = 1.0
        w1[ix("e_tilde", BOT), unit] = 1.0
        b1[unit] = -1.0
        w2[unit, ix("e_tilde_prime", b)] = -1.0
        w2[unit, ix("e_tilde", BOT)] = -1.0

        plus, minus = q + 2 * unit, q + 2 * unit + 1
        w1[ix("e_tilde", b), plus] = 1.0
        w2[plus, ix("e_tilde_prime", b)] = 1.0
        w2[plus, ix("e_tilde", b)] = -1.0
        w1[ix("e_tilde", b), minus] = -1.0
        w2[minus, ix("e_tilde_prime", b)] = -1.0
        w2[minus, ix("e_tilde", b)] = 1.0
    mlp = ConstructionMLP.from_dense(w1, b1, w2, torch.zeros(d, dtype=DTYPE))
    return ConstructionBlock((head_one, head_two), mlp)


def _block_two(cfg: ConstructionConfig, atlas: BasisAtlas) -> ConstructionBlock:
    d, ix, q = atlas.d, atlas.index, cfg.q
    sigma_prime = range(q + 1)

    # ヘッド1: 同じ記号のトークンの ẽ′ を平均して ê へ（入力と出力の出現数を比較）
    wq, wk, wv = (torch.zeros(d, d, dtype=DTYPE) for _ in range(3))
    for s in sigma_prime:
        wq[ix("e", s), ix("e", s)] = 1.0
        wk[ix("e", s), ix("e", s)] = 1.0
    for a in atlas.symbols:
        wv[ix("e_tilde_prime", a), ix("e_hat", a)] = 1.0
    head_one = AttentionHead.from_dense(wq, wk, wv)

    # ヘッド2: 現在の記号より大きい最小の記号（後続）に注意し、ε ê′ を書く
    wq, wk, wv = (torch.zeros(d, d, dtype=DTYPE) for _ in range(3))
    for a in atlas.symbols:
        for b in range(a + 1, q + 1):
            wq[ix("e_prime", a), ix("e_prime", b)] = cfg.gamma(b)
        wv[ix("e_prime", a), ix("e_hat_prime", a)] = cfg.epsilon
    wq[ix("e_prime", BOT), ix("e_prime", BOT)] = 1.0
    for s in sigma_prime:
        wk[ix("e_prime", s), ix("e_prime", s)] = 1.0
    head_two = AttentionHead.from_dense(wq, wk, wv)

    # MLP: ẽ′_b が負なら ê′_b を打ち消す
    w1 = torch.zeros(d, q, dtype=DTYPE)
    w2 = torch.zeros(q, d, dtype=DTYPE)
    for unit, b in enumerate(atlas.symbols):
        w1[ix("e_tilde_prime", b), unit] = -1.0
        w2[unit, ix("e_hat_prime", b)] = -1.0
    mlp = ConstructionMLP.from_dense(w1, torch.zeros(q, dtype=DTYPE), w2, torch.zeros(d, dtype=DTYPE))
    return ConstructionBlock((head_one, head_two), mlp)


def build_construction(cfg: ConstructionConfig) -> ConstructionModel:
    """Build the two-block construction; layernorm_mode='doubled' returns the widened variant."""
    atlas = build_atlas(cfg.q)
    model = ConstructionModel(
        cfg=cfg,
        atlas=atlas,
        embedding=atlas.encoder_matrix(),
        blocks=(_block_one(cfg, atlas), _block_two(cfg, atlas)),
        decoder=atlas.decoder_matrix().T.contiguous(),
    )
    if cfg.layernorm_mode == "doubled":
        return doubled_layernorm_variant(model)
    return model


def _doubled_input(sparse: SparseMap) -> SparseMap:
    return SparseMap(sparse.rows, sparse.cols, sparse.block, 2 * sparse.width_in, sparse.width_out)


def _doubled_output(sparse: SparseMap, width: int) -> SparseMap:
    """x ↦ (xM, −xM)"""
    return SparseMap(
        sparse.rows,
        torch.cat([sparse.cols, sparse.cols + width]),
        torch.cat([sparse.block, -sparse.block], dim=1),
        2 * sparse.width_in,
        2 * sparse.width_out,
    )


def doubled_layernorm_variant(model: ConstructionModel) -> ConstructionModel:
    """Embed x as (x, −x) so every token has mean exactly 0 and block-end layer_norm can be on.

    The second block sees normalized inputs whose squared length is 2d instead
    of the nominal 8, so its scores are rescaled by 8/(2d).
    """
    if model.doubled:
        return model
    d = model.atlas.d
    blocks = []
    for depth, block in enumerate(model.blocks):
        heads = tuple(
            AttentionHead(
                _doubled_input(head.q_map),
                _doubled_input(head.k_map),
                _doubled_output(head.v_map, d),
            )
            for head in block.heads
        )
        mlp = ConstructionMLP(
            _doubled_input(block.mlp.w1),
            block.mlp.b1,
            _doubled_output(block.mlp.w2, d),
            torch.cat([block.mlp.b2, -block.mlp.b2]),
        )
        score_scale = 1.0 if depth == 0 else NOMINAL_SQUARED_NORM / (2.0 * d)
        blocks.append(ConstructionBlock(heads, mlp, normalize=True, score_scale=score_scale))
    cfg = ConstructionConfig(model.cfg.q, model.cfg.n, model.cfg.c, model.cfg.epsilon, "doubled")
    return ConstructionModel(
        cfg=cfg,
        atlas=model.atlas,
        embedding=torch.cat([model.embedding, -model.embedding], dim=1),
        blocks=(blocks[0], blocks[1]),
        decoder=torch.cat([model.decoder, -model.decoder], dim=0),
    )


def oracle_sort(seq: Sequence[int]) -> List[int]:
    return sorted(seq)


def count_occurrences(seq: Sequence[int], symbol: int, start: int, end: int) -> int:
    """|{j ∈ [start, end] : seq[j] = symbol}|"""
    if not 0 <= start <= end < len(seq):
        raise ContractError(f"Range [{start}, {end}] is invalid for a sequence of length {len(seq)}")
    return sum(1 for j in range(start, end + 1) if seq[j] == symbol)


def teacher_forced_tokens(seq: Sequence[int]) -> List[int]:
    """入力, ⊥, 正解出力の先頭 n−1 個（全出力位置を 1 回の順伝播で調べる）"""
    return list(seq) + [BOT] + oracle_sort(seq)[:-1]


def _validate_tokens(model: ConstructionModel, tokens: Sequence[int]) -> None:
    n, q = model.cfg.n, model.cfg.q
    if len(tokens) < n + 1 or tokens[n] != BOT:
        raise ContractError(f"Expected {n} input symbols followed by ⊥, got {list(tokens)[:n + 2]}")
    if len(tokens) > 2 * n:
        raise CapacityError(f"At most {n} outputs may follow ⊥; got {len(tokens) - n - 1}")
    for position, symbol in enumerate(tokens):
        if position != n and not 1 <= symbol <= q:
            raise ContractError(f"Symbol {symbol} at position {position} is outside 1..{q}")


def construction_forward(model: ConstructionModel, tokens: Sequence[int]) -> Tuple[int, ActivationTrace]:
    """Next-token prediction at the last position, and the trace of every position."""
    _validate_tokens(model, tokens)
    logits, trace = model.forward_batch(torch.tensor([list(tokens)], dtype=torch.long))
    return int(argmax_lowest(logits[0, -1])), trace.example(0)


def construction_sort(model: ConstructionModel, seq: Sequence[int]) -> List[int]:
    """Autoregressive n-step decode."""
    if len(seq) != model.cfg.n:
        raise ContractError(f"Sequence length {len(seq)} does not match n={model.cfg.n}")
    tokens = list(seq) + [BOT]
    outputs: List[int] = []
    for _ in range(model.cfg.n):
        prediction, _ = construction_forward(model, tokens)
        outputs.append(prediction)
        tokens.append(prediction)
    return outputs


def teacher_forced_predictions(model: ConstructionModel, seqs: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, ActivationTrace]:
    """Predictions at positions n..2n−1 for a batch of inputs fed with their oracle prefixes.

    Greedy decoding reproduces the oracle exactly when every one of these
    predictions matches it (induction over output positions).
    """
    tokens = torch.tensor([teacher_forced_tokens(seq) for seq in seqs], dtype=torch.long)
    logits, trace = model.forward_batch(tokens)
    n = model.cfg.n
    return argmax_lowest(logits[:, n:, :]), trace


# ============================================
# Stage verification
# ============================================


@dataclass(frozen=True)
class StageCheck:
    """1 位置・1 段階の検査結果"""
    position: int
    stage: str
    winner: int
    expected: Tuple[int, ...]
    margin: float
    residual: float
    passed: bool


@dataclass(frozen=True)
class StageReport:
    """Stage checks of one sequence; passes when every check does."""
    checks: Tuple[StageCheck, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def by_stage(self, stage: str) -> List[StageCheck]:
        return [check for check in self.checks if check.stage == stage]

    def failures(self) -> List[StageCheck]:
        return [check for check in self.checks if not check.passed]

    def __iter__(self) -> Iterator[StageCheck]:
        return iter(self.checks)


def _ranked(scores: torch.Tensor) -> List[int]:
    """記号 1..q を降順に並べる（同点は小さい記号が先）"""
    values = scores.tolist()
    return sorted(range(1, len(values)), key=lambda s: (-values[s], s))


def _residual(scores: torch.Tensor, explained: Iterable[Optional[int]]) -> float:
    keep = set(s for s in explained if s is not None)
    others = [abs(float(scores[s])) for s in range(1, scores.shape[0]) if s not in keep]
    return max(others, default=0.0)


def _check(position: int, stage: str, scores: torch.Tensor, expected: Sequence[int],
           explained: Iterable[Optional[int]], budget: Optional[float]) -> StageCheck:
    ranked = _ranked(scores)
    width = len(set(expected))
    top = ranked[:width]
    wanted = sorted(set(expected))
    hit = sorted(top) == wanted
    rest = [float(scores[s]) for s in ranked[width:]]
    margin = min(float(scores[s]) for s in wanted) - (max(rest) if rest else 0.0)
    residual = _residual(scores, explained)
    ok = hit and (budget is None or residual <= budget)
    return StageCheck(position, stage, ranked[0], tuple(wanted), margin, residual, ok)


def _next_larger(seq: Sequence[int], symbol: int) -> Optional[int]:
    larger = [s for s in seq if s > symbol]
    return min(larger) if larger else None


def verify_stages(model: ConstructionModel, trace: ActivationTrace, seq: Sequence[int],
                  tol: Optional[ToleranceConfig] = ToleranceConfig()) -> StageReport:
    """Check copy, min, identity+successor and denoise at every position the trace covers.

    Args:
        model: the model that produced the trace
        trace: single-sequence trace over seq, ⊥ and 0 ≤ k < n oracle outputs
        seq: the input symbols
        tol: residual budget; None checks winners only

    Returns:
        StageReport
    """
    n = model.cfg.n
    if len(seq) != n or trace.length < n + 1 or trace.length > 2 * n:
        raise ContractError(f"Trace of length {trace.length} does not match a sequence with n={n}")
    atlas = model.atlas
    budget = tol.budget(n) if tol is not None else None
    ordered = oracle_sort(seq)
    tokens = teacher_forced_tokens(seq)

    every = range(atlas.q + 1)

    def projections(stage: str, depth: int, *families: str) -> torch.Tensor:
        # アトラスは標準基底なので射影は座標の取り出し
        coords = model.coordinates(trace.stage(stage)[:, depth, :])
        return sum(coords.index_select(-1, atlas.indices(f, every)) for f in families)

    encoder = projections("pre_mlp", 0, "e", "e_prime")
    minimum = projections("pre_mlp", 0, "e_hat_prime")
    identity = projections("pre_mlp", 1, "e_hat", "e_hat_prime")
    final = projections("post_mlp", 1, "e_hat", "e_hat_prime")

    checks: List[StageCheck] = []
    for position in range(n):
        symbol = seq[position]
        checks.append(_check(position, "copy", encoder[position], [symbol], [symbol], budget))
    checks.append(_check(n, "min", minimum[n], [ordered[0]], [ordered[0]], budget))
    for position in range(n, trace.length):
        upcoming = ordered[position - n]
        if position > n:
            current = tokens[position]
            successor = _next_larger(seq, current)
            checks.append(_check(position, "identity_successor", identity[position], [current, upcoming],
                                 [current, upcoming, successor], budget))
            explained = [current, upcoming, successor]
        else:
            explained = [upcoming]
        # 最終段は argmax のみが判定対象（top-1）
        check = _check(position, "denoise", final[position], [upcoming], explained, budget)
        checks.append(check)
    return StageReport(tuple(checks))


# ============================================
# Suite verification
# ============================================


@dataclass(frozen=True)
class SuiteResult:
    """1 長さ分の検証結果"""
    n: int
    epsilon: float
    layernorm_mode: str
    sequences: int
    sorted_ok: int
    stages_ok: int
    predictions: torch.Tensor = field(repr=False, compare=False)
    rows: Tuple[Tuple[int, StageCheck], ...] = field(default_factory=tuple, repr=False, compare=False)

    @property
    def passed(self) -> bool:
        return self.sorted_ok == self.sequences and self.stages_ok == self.sequences


def batch_size_for(length: int) -> int:
    return max(1, min(256, 2_000_000 // (length * length)))


def exhaustive_sequences(q: int, n: int) -> Iterator[List[int]]:
    for seq in itertools.product(range(1, q + 1), repeat=n):
        yield list(seq)


def random_sequences(q: int, n: int, count: int, seed: int) -> List[List[int]]:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(q, n))))
    return [[int(v) for v in row] for row in rng.integers(1, q + 1, size=(count, n))]


def verify_suite(model: ConstructionModel, seqs: Sequence[Sequence[int]],
                 tol: Optional[ToleranceConfig] = ToleranceConfig(),
                 check_stages: bool = True, keep_rows: bool = False) -> SuiteResult:
    """Oracle comparison (and stage checks) for many sequences of length cfg.n."""
    n = model.cfg.n
    batch = batch_size_for(2 * n)
    sorted_ok = stages_ok = 0
    reported = 0
    predictions: List[torch.Tensor] = []
    rows: List[Tuple[int, StageCheck]] = []
    for start in range(0, len(seqs), batch):
        chunk = seqs[start:start + batch]
        predicted, trace = teacher_forced_predictions(model, chunk)
        predictions.append(predicted)
        for offset, seq in enumerate(chunk):
            seq_id = start + offset
            if predicted[offset].tolist() == oracle_sort(seq):
                sorted_ok += 1
            elif reported < 10:
                reported += 1
                logging.warning(f"n={n}: sequence {seq_id} {list(seq)} decodes to {predicted[offset].tolist()}")
            if not check_stages:
                continue
            report = verify_stages(model, trace.example(offset), seq, tol)
            stages_ok += int(report.passed)
            if not report.passed and reported < 10:
                reported += 1
                first = report.failures()[0]
                logging.warning(f"n={n}: sequence {seq_id} fails {first.stage} at position {first.position}")
            if keep_rows:
                rows.extend((seq_id, check) for check in report)
    if not check_stages:
        stages_ok = len(seqs)
    result = SuiteResult(n, model.cfg.epsilon, model.cfg.layernorm_mode, len(seqs), sorted_ok, stages_ok,
                         torch.cat(predictions) if predictions else torch.zeros(0, n, dtype=torch.long),
                         tuple(rows))
    logging.info(
        f"n={n} ε={model.cfg.epsilon:.5f} layernorm={model.cfg.layernorm_mode}: "
        f"sorted {sorted_ok}/{len(seqs)}, stages {stages_ok}/{len(seqs)}"
    )
    return result


# ============================================
# Decoder wrapper (sorting token ids)
# ============================================


class ConstructionDecoder:
    """構成モデルをソート用トークン表の ID で扱うラッパー

    Sorting ids map to symbols by s = id − 1 (⊥ id 1 ↔ symbol 0); one model
    is built per input length on first use.
    """

    def __init__(self, q: int = 100, layernorm_mode: str = "off", epsilon: Optional[float] = None):
        if not 2 <= q <= 100:
            raise ContractError(f"The sorting table supports 2 <= q <= 100, got {q}")
        self.q = q
        self.layernorm_mode = layernorm_mode
        self.epsilon = epsilon
        self._models: Dict[int, ConstructionModel] = {}

    @property
    def context_length(self) -> int:
        return 1 << 16

    @property
    def vocab_size(self) -> int:
        return SORTING_TABLE.size

    def model_for(self, n: int) -> ConstructionModel:
        if n not in self._models:
            self._models[n] = build_construction(
                ConstructionConfig(self.q, n, epsilon=self.epsilon, layernorm_mode=self.layernorm_mode)
            )
        return self._models[n]

    def to_symbols(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if bool(((tokens < BOT_ID) | (tokens > self.q + 1)).any()):
            raise VocabularyError(f"Construction wrapper accepts ids {BOT_ID}..{self.q + 1} only")
        return tokens - 1

    def next_token_logits(self, tokens: torch.Tensor, n_input: int) -> torch.Tensor:
        symbol_logits, _ = self.model_for(n_input).forward_batch(self.to_symbols(tokens))
        logits = torch.full((tokens.shape[0], self.vocab_size), float("-inf"), dtype=DTYPE)
        logits[:, BOT_ID + 1:self.q + 2] = symbol_logits[:, -1, 1:]
        return logits

    def trace(self, tokens: Sequence[int], n_input: int) -> ActivationTrace:
        _, trace = self.model_for(n_input).forward_batch(self.to_symbols(torch.tensor([list(tokens)])))
        return trace.example(0)

    def _rows(self, family_rows: torch.Tensor, n: int) -> torch.Tensor:
        model = self.model_for(n)
        if model.doubled:
            family_rows = torch.cat([family_rows, -family_rows], dim=1)
        rows = torch.zeros(self.vocab_size, family_rows.shape[1], dtype=DTYPE)
        rows[BOT_ID:self.q + 2] = family_rows
        return rows

    def encoder_rows(self, n: int = 2) -> torch.Tensor:
        """(vocab, width): Enc(s) at the id of s; PAD and unused ids are zero rows"""
        return self._rows(self.model_for(n).atlas.encoder_matrix(), n)

    def decoder_rows(self, n: int = 2) -> torch.Tensor:
        """(vocab, width): ê_s + ê′_s at the id of s"""
        return self._rows(self.model_for(n).atlas.decoder_matrix(), n)

    def value_ids(self) -> List[int]:
        return list(range(BOT_ID + 1, self.q + 2))


# ============================================
# Adapter Layer
# ============================================


class StageReportCSVAdapter:
    """段階検査の結果を CSV へ書き出すアダプター"""

    HEADER = ("seq_id", "position", "stage", "winner", "expected", "margin", "pass")

    def write(self, path: Union[str, Path], rows: Iterable[Tuple[str, StageCheck]]) -> int:
        count = 0
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.HEADER)
            for seq_id, check in rows:
                writer.writerow([
                    seq_id,
                    check.position,
                    check.stage,
                    check.winner,
                    " ".join(str(s) for s in check.expected),
                    f"{check.margin:.6e}",
                    int(check.passed),
                ])
                count += 1
        return count


@dataclass(frozen=True)
class SummaryRow:
    """verify-construction の 1 スイート分の要約"""
    suite: str
    q: int
    result: SuiteResult
    agrees: Optional[bool] = None

    @property
    def passed(self) -> bool:
        return self.result.passed and self.agrees is not False


class SuiteSummaryCSVAdapter:
    HEADER = ("suite", "q", "n", "epsilon", "layernorm", "sequences", "sorted_ok", "stages_ok", "agrees", "pass")

    def write(self, path: Union[str, Path], rows: Iterable[SummaryRow]) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.HEADER)
            for row in rows:
                r = row.result
                writer.writerow([
                    row.suite, row.q, r.n, f"{r.epsilon:.6g}", r.layernorm_mode, r.sequences,
                    r.sorted_ok, r.stages_ok, "" if row.agrees is None else int(row.agrees), int(row.passed),
                ])
