"""Reproducible generators for the sorting and increment task families.

Every example draws from its own Philox stream keyed by (seed, task, index), so
the content of example k never depends on generation order or count.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from lglab.errors import CapacityError, ContractError, FormatError, VocabularyError

# 定数
DATASET_FORMAT = "lg-dataset/1"
TABLE_VERSION = "1"
PAD_ID = 0
BOT_ID = 1
BOT = "⊥"
PAD = "<pad>"
UP = "↑"
RESERVED = "<reserved>"

Symbol = Union[int, str]

# ============================================
# Domain Layer
# ============================================


@dataclass(frozen=True)
class TokenTable:
    """記号とトークンIDの全単射"""
    family: str
    symbols: Tuple[Symbol, ...]
    version: str = TABLE_VERSION
    _index: Mapping[Symbol, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabularyError(f"Token table '{self.family}' is not bijective")
        if self.symbols[PAD_ID] != PAD or self.symbols[BOT_ID] != BOT:
            raise VocabularyError(f"Token table '{self.family}' must start with PAD and ⊥")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def name(self) -> str:
        return f"{self.family}/{self.version}"

    def encode(self, symbol: Symbol) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise VocabularyError(f"Symbol {symbol!r} is not in the {self.family} table") from None

    def decode(self, token_id: int) -> Symbol:
        if not 0 <= token_id < self.size:
            raise VocabularyError(f"Token id {token_id} is outside the {self.family} table (size {self.size})")
        return self.symbols[token_id]

    def value_ids(self) -> List[int]:
        """数値（数字）記号のIDのみ"""
        return [i for i, s in enumerate(self.symbols) if isinstance(s, int)]


SORTING_TABLE = TokenTable("sorting", (PAD, BOT) + tuple(range(1, 101)) + (RESERVED,))
INCREMENT_TABLE = TokenTable("increment", (PAD, BOT) + tuple(range(10)) + (UP, RESERVED))
TABLES: Mapping[str, TokenTable] = MappingProxyType({t.name: t for t in (SORTING_TABLE, INCREMENT_TABLE)})

TASK_TABLES: Mapping[str, TokenTable] = MappingProxyType({
    "sort": SORTING_TABLE,
    "successor": SORTING_TABLE,
    "count": SORTING_TABLE,
    "fill": SORTING_TABLE,
    "increment": INCREMENT_TABLE,
    "carry": INCREMENT_TABLE,
})
# ストリームのキーにタスクを含めて main/aux の相関を断つ
TASK_CODES: Mapping[str, int] = MappingProxyType(
    {task: i for i, task in enumerate(tuple(TASK_TABLES) + ("rep",))}
)


@dataclass(frozen=True)
class LengthTier:
    """長さ区間と確率質量"""
    mass: float
    low: int
    high: int


SORT_TIERS = (LengthTier(0.8, 2, 5), LengthTier(0.2, 6, 20))
INCREMENT_TIERS = (LengthTier(0.8, 2, 4), LengthTier(0.2, 5, 10))


@dataclass(frozen=True)
class GenConfig:
    """データ生成の設定"""
    seed: int = 0
    count: int = 1000
    tiers: Tuple[LengthTier, ...] = SORT_TIERS
    repetition_prob: float = 0.0
    value_low: int = 1
    value_high: int = 100
    nines_prob: float = 0.1
    context_length: int = 64

    def __post_init__(self):
        if not self.tiers:
            raise ContractError("At least one length tier is required")
        if abs(sum(t.mass for t in self.tiers) - 1.0) > 1e-9:
            raise ContractError(f"Length tier masses must sum to 1, got {[t.mass for t in self.tiers]}")
        for tier in self.tiers:
            if tier.low < 1 or tier.high < tier.low:
                raise ContractError(f"Empty length tier {tier}")
        if not 0.0 <= self.repetition_prob <= 1.0 or not 0.0 <= self.nines_prob <= 1.0:
            raise ContractError("Branch probabilities must lie in [0, 1]")
        if self.value_high < self.value_low:
            raise ContractError(f"Empty value range [{self.value_low}, {self.value_high}]")
        if self.count < 0:
            raise ContractError(f"count must be >= 0, got {self.count}")

    @property
    def max_length(self) -> int:
        return max(t.high for t in self.tiers)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["tiers"] = [asdict(t) for t in self.tiers]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GenConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "tiers" in known:
            known["tiers"] = tuple(
                t if isinstance(t, LengthTier) else LengthTier(**t) for t in known["tiers"]
            )
        return cls(**known)


@dataclass(frozen=True)
class RepTestConfig:
    """rep(i, r) テスト分布の設定"""
    length: int
    repeat: int
    count: int = 1000

    def __post_init__(self):
        if self.repeat < 2 or self.length < self.repeat:
            raise ContractError(f"rep({self.length},{self.repeat}) needs r >= 2 and i >= r")

    @property
    def tag(self) -> str:
        return f"rep({self.length},{self.repeat})"


@dataclass(frozen=True)
class RawExample:
    """記号レベルの例（プロンプト + 解答）"""
    task: str
    prompt: Tuple[Symbol, ...]
    answer: Tuple[Symbol, ...]
    scored: Tuple[bool, ...]
    n_input: int
    variant: str = "uniform"

    @property
    def sequence(self) -> Tuple[Symbol, ...]:
        return self.prompt + self.answer

    @property
    def scored_answer(self) -> Tuple[Symbol, ...]:
        return tuple(s for s, flag in zip(self.answer, self.scored) if flag)


@dataclass(frozen=True)
class EncodedExample:
    """トークンID列・ターゲット・損失マスク"""
    tokens: Tuple[int, ...]
    targets: Tuple[int, ...]
    mask: Tuple[int, ...]
    n_input: int
    task: str

    @property
    def length(self) -> int:
        """PAD を除いた長さ"""
        return sum(1 for t in self.tokens if t != PAD_ID)

    @property
    def answer_start(self) -> int:
        """最初の解答トークンの位置"""
        return self.mask.index(1) + 1

    @property
    def prompt_ids(self) -> Tuple[int, ...]:
        return self.tokens[:self.answer_start]

    @property
    def answer_ids(self) -> Tuple[int, ...]:
        return self.tokens[self.answer_start:self.length]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tokens": list(self.tokens),
            "targets": list(self.targets),
            "mask": list(self.mask),
            "n_input": self.n_input,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EncodedExample":
        try:
            example = cls(
                tokens=tuple(int(t) for t in data["tokens"]),
                targets=tuple(int(t) for t in data["targets"]),
                mask=tuple(int(m) for m in data["mask"]),
                n_input=int(data["n_input"]),
                task=str(data["task"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"Malformed dataset record: {exc}") from None
        if not (len(example.tokens) == len(example.targets) == len(example.mask)):
            raise FormatError("Record fields tokens/targets/mask differ in length")
        if 1 not in example.mask or example.n_input < 1:
            raise FormatError("Record has no masked position or n_input < 1")
        return example


@dataclass(frozen=True)
class DatasetHeader:
    """データセットファイルのヘッダレコード"""
    task: str
    table: str
    seed: int
    generator: Dict[str, Any] = field(default_factory=dict)
    format: str = DATASET_FORMAT

    def to_dict(self) -> Dict[str, Any]:
        return {"format": self.format, "task": self.task, "table": self.table,
                "seed": self.seed, "generator": self.generator}

    @property
    def token_table(self) -> TokenTable:
        if self.table not in TABLES:
            raise FormatError(f"Unknown token table version '{self.table}'")
        return TABLES[self.table]


# ファーストクラスコレクション

@dataclass(frozen=True)
class Examples:
    """EncodedExample のコレクション（Immutable）"""
    header: DatasetHeader
    _examples: Tuple[EncodedExample, ...] = field(default_factory=tuple)

    def to_list(self) -> List[EncodedExample]:
        return list(self._examples)  # 防御的コピー

    def __iter__(self) -> Iterator[EncodedExample]:
        return iter(self._examples)

    def __len__(self) -> int:
        return len(self._examples)

    def __getitem__(self, index: int) -> EncodedExample:
        return self._examples[index]

    @property
    def token_table(self) -> TokenTable:
        return self.header.token_table

    def by_input_length(self) -> Dict[int, List[EncodedExample]]:
        groups: Dict[int, List[EncodedExample]] = {}
        for example in self._examples:
            groups.setdefault(example.n_input, []).append(example)
        return groups


# ドメインサービス

def example_rng(seed: int, task: str, index: int, *stream: int) -> np.random.Generator:
    """(seed, task, stream..., index) をキーとするカウンタベースの乱数ストリーム"""
    if task not in TASK_CODES:
        raise ContractError(f"Unknown task stream '{task}'")
    spawn_key = (TASK_CODES[task],) + tuple(stream) + (index,)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=spawn_key)))


def skewed_length_sample(rng: np.random.Generator, tiers: Sequence[LengthTier]) -> int:
    """Draw a length from the two-tier (or n-tier) uniform mixture."""
    u = rng.random()
    cumulative = 0.0
    chosen = tiers[-1]
    for tier in tiers:
        cumulative += tier.mass
        if u < cumulative:
            chosen = tier
            break
    return int(rng.integers(chosen.low, chosen.high + 1))


def length_probability(tiers: Sequence[LengthTier], length: int) -> float:
    return sum(t.mass / (t.high - t.low + 1) for t in tiers if t.low <= length <= t.high)


def oracle_successor(values: Sequence[int], query: int) -> Symbol:
    """Element right after the first occurrence of `query` in sorted order, ⊥ past the end."""
    ordered = sorted(values)
    index = ordered.index(query)
    return ordered[index + 1] if index + 1 < len(ordered) else BOT


def increment_digits(digits: Sequence[int]) -> List[int]:
    """Digits of value+1, least significant first."""
    result: List[int] = []
    carry = 1
    for digit in reversed(digits):
        total = digit + carry
        result.append(total % 10)
        carry = total // 10
    if carry:
        result.append(carry)
    return result


def carry_trace(digits: Sequence[int]) -> List[Symbol]:
    """Interleaved (digit, ↑, carry) triples of the increment, least significant first."""
    trace: List[Symbol] = []
    carry = 1
    for digit in reversed(digits):
        total = digit + carry
        carry = total // 10
        trace.extend([total % 10, UP, carry])
    if carry:
        trace.extend([1, UP, 0])
    return trace


def _values(rng: np.random.Generator, cfg: GenConfig, size: int) -> List[int]:
    return [int(v) for v in rng.integers(cfg.value_low, cfg.value_high + 1, size=size)]


def _answer_example(task: str, inputs: Sequence[Symbol], prompt_tail: Sequence[Symbol],
                    answer: Sequence[Symbol], variant: str = "uniform") -> RawExample:
    return RawExample(
        task=task,
        prompt=tuple(inputs) + (BOT,) + tuple(prompt_tail),
        answer=tuple(answer),
        scored=tuple(True for _ in answer),
        n_input=len(inputs),
        variant=variant,
    )


def gen_sort_example(rng: np.random.Generator, cfg: GenConfig, length: Optional[int] = None) -> RawExample:
    length = length if length is not None else skewed_length_sample(rng, cfg.tiers)
    if cfg.repetition_prob and rng.random() < cfg.repetition_prob:
        population = np.arange(cfg.value_low, cfg.value_high + 1)
        palette_size = min(max(1, length // 2), len(population))
        palette = rng.choice(population, size=palette_size, replace=False)
        values = [int(v) for v in rng.choice(palette, size=length)]
        variant = "repetition"
    else:
        values = _values(rng, cfg, length)
        variant = "uniform"
    return _answer_example("sort", values, (), sorted(values), variant)


def gen_successor_example(rng: np.random.Generator, cfg: GenConfig) -> RawExample:
    values = _values(rng, cfg, skewed_length_sample(rng, cfg.tiers))
    query = values[int(rng.integers(len(values)))]
    return _answer_example("successor", values, (query,), (oracle_successor(values, query),))


def _count_length(rng: np.random.Generator, tiers: Sequence[LengthTier], accept: Callable[[int], bool]) -> int:
    """Re-sample the tier length until `accept` holds."""
    if not any(accept(n) for t in tiers if t.mass > 0 for n in range(max(t.low, 2), t.high + 1)):
        raise ContractError(f"No length in tiers {list(tiers)} fits the count branch")
    while True:
        length = skewed_length_sample(rng, tiers)
        if length >= 2 and accept(length):
            return length


def gen_count_example(rng: np.random.Generator, cfg: GenConfig) -> RawExample:
    population = np.arange(cfg.value_low, cfg.value_high + 1)
    if len(population) < 2:
        raise ContractError("The count task needs at least two distinct values")
    # 同数（偶数長）か差あり（長さ 3 以上）かを先に決める
    tie = rng.random() < 0.5
    if tie:
        length = _count_length(rng, cfg.tiers, lambda n: n % 2 == 0)
    else:
        length = _count_length(rng, cfg.tiers, lambda n: n >= 3)
    a, b = (int(v) for v in rng.choice(population, size=2, replace=False))
    if tie:
        counts = {a: length // 2, b: length // 2}
        label: Symbol = BOT
        variant = "tie"
    else:
        gaps = [g for g in range(1, 6) if g <= length - 2 and (length - g) % 2 == 0]
        gap = gaps[int(rng.integers(len(gaps)))]
        minority = a if rng.random() < 0.5 else b
        majority = b if minority == a else a
        counts = {minority: (length - gap) // 2, majority: (length + gap) // 2}
        label = minority
        variant = "gap"
    values = [a] * counts[a] + [b] * counts[b]
    values = [int(v) for v in rng.permutation(values)]
    return _answer_example("count", values, (), (label,), variant)


def gen_fill_example(rng: np.random.Generator, cfg: GenConfig) -> RawExample:
    length = skewed_length_sample(rng, cfg.tiers)
    symbol = _values(rng, cfg, 1)[0]
    repeats = int(rng.integers(1, max(1, length // 2) + 1))
    given = int(rng.integers(0, repeats))
    return _answer_example("fill", [symbol] * repeats, [symbol] * given, [symbol] * (repeats - given))


def gen_rep_example(rng: np.random.Generator, rep_cfg: RepTestConfig,
                    value_low: int = 1, value_high: int = 100) -> RawExample:
    distinct = rep_cfg.length // rep_cfg.repeat
    population = np.arange(value_low, value_high + 1)
    if distinct > len(population):
        raise ContractError(f"{rep_cfg.tag} needs {distinct} distinct values")
    chosen = rng.choice(population, size=distinct, replace=False)
    fillers = rng.integers(value_low, value_high + 1, size=rep_cfg.length - distinct * rep_cfg.repeat)
    values = [int(v) for v in np.concatenate([np.repeat(chosen, rep_cfg.repeat), fillers])]
    values = [int(v) for v in rng.permutation(values)]
    return _answer_example("sort", values, (), sorted(values), rep_cfg.tag)


def _increment_digits_input(rng: np.random.Generator, cfg: GenConfig, length: Optional[int]) -> Tuple[List[int], str]:
    length = length if length is not None else skewed_length_sample(rng, cfg.tiers)
    digits = [int(rng.integers(1, 10))] + [int(d) for d in rng.integers(0, 10, size=length - 1)]
    variant = "uniform"
    if rng.random() < cfg.nines_prob:
        k = int(rng.integers(1, length + 1))
        digits[length - k:] = [9] * k
        variant = "nines"
    return digits, variant


def gen_increment_example(rng: np.random.Generator, cfg: GenConfig, length: Optional[int] = None) -> RawExample:
    digits, variant = _increment_digits_input(rng, cfg, length)
    return _answer_example("increment", digits, (), increment_digits(digits), variant)


def gen_carry_example(rng: np.random.Generator, cfg: GenConfig) -> RawExample:
    digits, variant = _increment_digits_input(rng, cfg, None)
    answer = carry_trace(digits)
    return RawExample(
        task="carry",
        prompt=tuple(digits) + (BOT,),
        answer=tuple(answer),
        scored=tuple(symbol != UP for symbol in answer),
        n_input=len(digits),
        variant=variant,
    )


GENERATORS: Mapping[str, Callable[[np.random.Generator, GenConfig], RawExample]] = MappingProxyType({
    "sort": gen_sort_example,
    "successor": gen_successor_example,
    "count": gen_count_example,
    "fill": gen_fill_example,
    "increment": gen_increment_example,
    "carry": gen_carry_example,
})


def generate_raw(task: str, cfg: GenConfig, start: int = 0) -> Iterator[RawExample]:
    if task not in GENERATORS:
        raise ContractError(f"Unknown task '{task}', expected one of {sorted(GENERATORS)}")
    generator = GENERATORS[task]
    for index in range(start, start + cfg.count):
        yield generator(example_rng(cfg.seed, task, index), cfg)


def encode_example(raw: RawExample, table: TokenTable, context_length: int) -> EncodedExample:
    """Map symbols to ids, right-pad with PAD and mask the scored answer predictions.

    Position t predicts token t+1, so the mask is set at t whenever token t+1
    is a scored answer symbol.
    """
    sequence = raw.sequence
    if len(sequence) > context_length:
        raise CapacityError(f"Example of length {len(sequence)} exceeds context_length {context_length}")
    ids = [table.encode(symbol) for symbol in sequence]
    padding = context_length - len(ids)
    tokens = ids + [PAD_ID] * padding
    targets = ids[1:] + [PAD_ID] * (padding + 1)
    mask = [0] * context_length
    start = len(raw.prompt)
    for offset, scored in enumerate(raw.scored):
        if scored:
            mask[start + offset - 1] = 1
    return EncodedExample(tuple(tokens), tuple(targets), tuple(mask), raw.n_input, raw.task)


def decode_example(example: EncodedExample, table: TokenTable) -> RawExample:
    """Inverse of `encode_example` (the generator variant tag is not stored)."""
    start = example.answer_start
    length = example.length
    answer_positions = range(start, length)
    return RawExample(
        task=example.task,
        prompt=tuple(table.decode(t) for t in example.tokens[:start]),
        answer=tuple(table.decode(example.tokens[p]) for p in answer_positions),
        scored=tuple(bool(example.mask[p - 1]) for p in answer_positions),
        n_input=example.n_input,
    )


def gen_dataset(task: str, cfg: GenConfig) -> Examples:
    """Generate and encode `cfg.count` examples of one task."""
    table = TASK_TABLES[task] if task in TASK_TABLES else None
    if table is None:
        raise ContractError(f"Unknown task '{task}', expected one of {sorted(TASK_TABLES)}")
    encoded = tuple(encode_example(raw, table, cfg.context_length) for raw in generate_raw(task, cfg))
    header = DatasetHeader(task=task, table=table.name, seed=cfg.seed, generator=cfg.to_dict())
    logging.info(f"Generated {len(encoded)} '{task}' examples (seed={cfg.seed})")
    return Examples(header, encoded)


def gen_sort_dataset(cfg: GenConfig, repetition_mode: bool = False) -> Examples:
    if repetition_mode and not cfg.repetition_prob:
        cfg = GenConfig.from_dict({**cfg.to_dict(), "repetition_prob": 0.1})
    elif not repetition_mode and cfg.repetition_prob:
        cfg = GenConfig.from_dict({**cfg.to_dict(), "repetition_prob": 0.0})
    return gen_dataset("sort", cfg)


def gen_rep_test_set(rep_cfg: RepTestConfig, seed: int = 0, context_length: int = 64,
                     value_low: int = 1, value_high: int = 100) -> Examples:
    encoded = tuple(
        encode_example(
            gen_rep_example(example_rng(seed, "rep", index, rep_cfg.length, rep_cfg.repeat), rep_cfg, value_low, value_high),
            SORTING_TABLE, context_length,
        )
        for index in range(rep_cfg.count)
    )
    header = DatasetHeader(task="sort", table=SORTING_TABLE.name, seed=seed,
                           generator={"rep": [rep_cfg.length, rep_cfg.repeat], "count": rep_cfg.count})
    return Examples(header, encoded)


def gen_length_test_set(task: str, length: int, count: int, seed: int = 0, context_length: int = 64,
                        value_low: int = 1, value_high: int = 100) -> Examples:
    """Fixed-length test set: uniform sort inputs, or uniform numbers of `length` digits."""
    if task not in ("sort", "increment"):
        raise ContractError(f"Length test sets exist for 'sort' and 'increment', not '{task}'")
    cfg = GenConfig(seed=seed, count=count, value_low=value_low, value_high=value_high,
                    nines_prob=0.0, context_length=context_length)
    generator = gen_sort_example if task == "sort" else gen_increment_example
    table = TASK_TABLES[task]
    encoded = tuple(
        encode_example(generator(example_rng(seed, task, index, length), cfg, length), table, context_length)
        for index in range(count)
    )
    header = DatasetHeader(task=task, table=table.name, seed=seed,
                           generator={"length": length, "count": count})
    return Examples(header, encoded)


# ============================================
# Adapter Layer
# ============================================


class DatasetFileAdapter:
    """行区切り JSON のデータセットファイルを読み書きするアダプター"""

    def write(self, path: Union[str, Path], examples: Examples) -> None:
        lines = [self._dumps(examples.header.to_dict())]
        lines.extend(self._dumps(example.to_dict()) for example in examples)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def read(self, path: Union[str, Path]) -> Examples:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise FormatError(f"Dataset file is empty: {path}")
        header_data = self._loads(lines[0], path, 1)
        if header_data.get("format") != DATASET_FORMAT:
            raise FormatError(f"Unsupported dataset format {header_data.get('format')!r} in {path}")
        header = DatasetHeader(
            task=str(header_data.get("task")),
            table=str(header_data.get("table")),
            seed=int(header_data.get("seed", 0)),
            generator=dict(header_data.get("generator") or {}),
        )
        header.token_table  # バージョン検証
        records = tuple(
            EncodedExample.from_dict(self._loads(line, path, number))
            for number, line in enumerate(lines[1:], start=2)
            if line.strip()
        )
        return Examples(header, records)

    @staticmethod
    def _dumps(data: Dict[str, Any]) -> str:
        return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @staticmethod
    def _loads(line: str, path: Union[str, Path], number: int) -> Dict[str, Any]:
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{number}: malformed record ({exc.msg})") from None
        if not isinstance(data, dict):
            raise FormatError(f"{path}:{number}: record is not an object")
        return data


def write_dataset(path: Union[str, Path], examples: Examples) -> None:
    DatasetFileAdapter().write(path, examples)


def read_dataset(path: Union[str, Path]) -> Examples:
    return DatasetFileAdapter().read(path)
