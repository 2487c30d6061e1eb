"""Greedy-decode evaluation across test lengths and distributions.

Two metrics per suite: full-sequence accuracy and the mean token-level
Levenshtein distance between the decoded output and the target output
(echoed input and ⊥ excluded).
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import torch

from lglab.datagen import (
    BOT_ID,
    INCREMENT_TABLE,
    SORTING_TABLE,
    EncodedExample,
    Examples,
    RepTestConfig,
    TokenTable,
    gen_length_test_set,
    gen_rep_test_set,
    increment_digits,
)
from lglab.errors import CapacityError, ContractError, FormatError, VocabularyError
from lglab.model import SequenceDecoder, TransformerModel, argmax_lowest, greedy_decode_batch
from lglab.trainer import Batch

# 定数
DEFAULT_PER_LENGTH_COUNT = 1000
DECODE_BATCH = 256
REP_TAG = re.compile(r"^rep\((\d+),(\d+)\)$")
REPORT_HEADER = ("tag", "n_examples", "full_seq_acc", "mean_edit_distance")

LengthTag = Union[int, str]

# ============================================
# Domain Layer
# ============================================


def edit_distance(a: Sequence[Any], b: Sequence[Any]) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs (two-row DP)."""
    if len(a) > len(b):
        a, b = b, a
    previous = list(range(len(a) + 1))
    for i, item_b in enumerate(b, start=1):
        current = [i] + [0] * len(a)
        for j, item_a in enumerate(a, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (item_a != item_b),
            )
        previous = current
    return previous[len(a)]


def parse_length_tag(tag: LengthTag, count: int = DEFAULT_PER_LENGTH_COUNT) -> Union[int, RepTestConfig]:
    """'12' → 12, 'rep(10,5)' → RepTestConfig(10, 5, count)"""
    if isinstance(tag, int):
        return tag
    text = tag.strip().replace(" ", "")
    if text.isdigit():
        return int(text)
    match = REP_TAG.match(text)
    if match is None:
        raise ContractError(f"Unrecognized length tag '{tag}', expected an integer or rep(i,r)")
    return RepTestConfig(int(match.group(1)), int(match.group(2)), count)


@dataclass(frozen=True)
class EvalRow:
    """1 長さ（またはタグ）分の評価結果"""
    tag: str
    n_examples: int
    full_seq_acc: float
    mean_edit_distance: float

    def __post_init__(self):
        if self.n_examples <= 0:
            raise ContractError(f"Report row '{self.tag}' needs a positive count, got {self.n_examples}")
        if not 0.0 <= self.full_seq_acc <= 1.0:
            raise ContractError(f"Accuracy {self.full_seq_acc} outside [0, 1]")
        if self.mean_edit_distance < 0:
            raise ContractError(f"Edit distance {self.mean_edit_distance} is negative")

    def to_row(self) -> List[str]:
        return [self.tag, str(self.n_examples), f"{self.full_seq_acc:.6f}", f"{self.mean_edit_distance:.6f}"]


@dataclass(frozen=True)
class EvalReport:
    """評価レポート（行 + ヘッダ情報）"""
    rows: Tuple[EvalRow, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def to_list(self) -> List[EvalRow]:
        return list(self.rows)  # 防御的コピー

    def __iter__(self) -> Iterator[EvalRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, tag: LengthTag) -> EvalRow:
        for row in self.rows:
            if row.tag == str(tag):
                return row
        raise KeyError(tag)

    def accuracy(self) -> Dict[str, float]:
        return {row.tag: row.full_seq_acc for row in self.rows}


@dataclass(frozen=True)
class TrendCheck:
    """Directional comparison of two variants over seeds."""
    name: str
    wins: int
    seeds: int
    quorum: int

    @property
    def passed(self) -> bool:
        return self.wins >= self.quorum


def check_trend(name: str, better: Mapping[int, float], worse: Mapping[int, float],
                quorum_fraction: float = 2 / 3) -> TrendCheck:
    """Count seeds where `better` scores at least as high as `worse`."""
    seeds = sorted(set(better) & set(worse))
    if not seeds:
        raise ContractError(f"Trend '{name}' has no seed shared by both variants")
    wins = sum(1 for seed in seeds if better[seed] >= worse[seed])
    quorum = max(1, math.ceil(quorum_fraction * len(seeds) - 1e-9))
    return TrendCheck(name, wins, len(seeds), quorum)


class OracleDecoder:
    """sort / increment の正解を返すデコーダ（評価経路の検証用）"""

    def __init__(self, task: str = "sort"):
        if task not in ("sort", "increment"):
            raise ContractError(f"OracleDecoder supports 'sort' and 'increment', not '{task}'")
        self.task = task
        self.table: TokenTable = SORTING_TABLE if task == "sort" else INCREMENT_TABLE

    @property
    def context_length(self) -> int:
        return 1 << 16

    @property
    def vocab_size(self) -> int:
        return self.table.size

    def answer_ids(self, prompt_ids: Sequence[int]) -> List[int]:
        if self.task == "sort":
            # 値の順に ID が振られているので ID のソート = 値のソート
            return sorted(prompt_ids)
        digits = [self.table.decode(t) for t in prompt_ids]
        return [self.table.encode(d) for d in increment_digits(digits)]

    def next_token_logits(self, tokens: torch.Tensor, n_input: int) -> torch.Tensor:
        logits = torch.zeros(tokens.shape[0], self.vocab_size, dtype=torch.float64)
        for row, sequence in enumerate(tokens.tolist()):
            answer = self.answer_ids(sequence[:n_input])
            produced = len(sequence) - n_input - 1
            logits[row, answer[produced] if produced < len(answer) else BOT_ID] = 1.0
        return logits


# ドメインサービス

def _check_vocabulary(decoder: SequenceDecoder, table: TokenTable) -> None:
    size = getattr(decoder, "vocab_size", None)
    if size is not None and size != table.size:
        raise VocabularyError(f"Examples use table {table.name} ({table.size} ids), decoder has {size}")


def decode_predictions(decoder: SequenceDecoder, examples: Sequence[EncodedExample],
                       batch_size: int = DECODE_BATCH) -> List[Tuple[List[int], List[int]]]:
    """(prediction, target) answer-id pairs in example order.

    Examples are batched by (prompt length, answer length) so every batch
    decodes a rectangular prompt for a fixed number of steps.
    """
    groups: Dict[Tuple[int, int], List[int]] = {}
    for index, example in enumerate(examples):
        # 増分の繰り上がり桁も含め、正解と同じ長さだけ復号する
        groups.setdefault((example.answer_start, len(example.answer_ids)), []).append(index)

    results: List[Optional[Tuple[List[int], List[int]]]] = [None] * len(examples)
    for (_, n_out), indices in sorted(groups.items()):
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            prompts = [list(examples[i].prompt_ids) for i in chunk]
            predictions = greedy_decode_batch(decoder, prompts, n_out)
            for i, prediction in zip(chunk, predictions):
                results[i] = (prediction, list(examples[i].answer_ids))
    return [r for r in results if r is not None]


def score_pairs(tag: str, pairs: Sequence[Tuple[List[int], List[int]]]) -> EvalRow:
    exact = sum(1 for prediction, target in pairs if prediction == target)
    distance = sum(edit_distance(prediction, target) for prediction, target in pairs)
    return EvalRow(tag, len(pairs), exact / len(pairs), distance / len(pairs))


def full_sequence_accuracy(decoder: SequenceDecoder, examples: Examples) -> float:
    """Fraction of examples whose greedy decode equals the target exactly."""
    _check_vocabulary(decoder, examples.token_table)
    if not len(examples):
        raise ContractError("Cannot score an empty example set")
    pairs = decode_predictions(decoder, examples.to_list())
    return sum(1 for prediction, target in pairs if prediction == target) / len(pairs)


def evaluate_hint(model: TransformerModel, examples: Examples, batch_size: int = DECODE_BATCH) -> float:
    """Teacher-forced aux-head accuracy: every masked prediction of an example must be right."""
    if not isinstance(model, TransformerModel) or "aux" not in model.heads:
        raise ContractError("Hint evaluation needs a trained model with an aux head")
    _check_vocabulary(model, examples.token_table)
    items = examples.to_list()
    if not items:
        raise ContractError("Cannot score an empty example set")
    correct = 0
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            batch = Batch.collate(items[start:start + batch_size])
            logits, _ = model(batch.tokens, batch.n_input, head_id="aux")
            hits = (argmax_lowest(logits) == batch.targets) | (batch.mask == 0)
            correct += int(hits.all(dim=-1).sum())
    return correct / len(items)


# ============================================
# UseCase Layer
# ============================================


class EvaluateUseCase:
    """長さ・分布ごとのテストセットを生成して評価する UseCase"""

    def __init__(self, batch_size: int = DECODE_BATCH):
        self.batch_size = batch_size

    def execute(self, decoder: SequenceDecoder, suites: Mapping[str, Examples],
                metadata: Optional[Mapping[str, Any]] = None) -> EvalReport:
        rows: List[EvalRow] = []
        for tag, examples in suites.items():
            _check_vocabulary(decoder, examples.token_table)
            row = score_pairs(tag, decode_predictions(decoder, examples.to_list(), self.batch_size))
            logging.info(f"{tag}: acc={row.full_seq_acc:.4f} edit={row.mean_edit_distance:.4f} (n={row.n_examples})")
            rows.append(row)
        return EvalReport(tuple(rows), dict(metadata or {}))


def _suite_context(length: int) -> int:
    # 入力 + ⊥ + 出力（繰り上がり桁を含む）
    return 2 * length + 2


def _check_capacity(decoder: SequenceDecoder, prompt_length: int, n_out: int) -> None:
    needed = prompt_length + n_out - 1
    if needed > decoder.context_length:
        raise CapacityError(f"Prompt {prompt_length} needs {needed} positions, decoder context is {decoder.context_length}")


def sort_suites(lengths: Sequence[LengthTag], per_length_count: int, seed: int = 0,
                value_low: int = 1, value_high: int = 100) -> Dict[str, Examples]:
    """Uniform test sets per length, rep(i,r) suites per tag."""
    suites: Dict[str, Examples] = {}
    for tag in lengths:
        parsed = parse_length_tag(tag, per_length_count)
        if isinstance(parsed, RepTestConfig):
            suites[parsed.tag] = gen_rep_test_set(parsed, seed, _suite_context(parsed.length), value_low, value_high)
        else:
            suites[str(parsed)] = gen_length_test_set("sort", parsed, per_length_count, seed,
                                                      _suite_context(parsed), value_low, value_high)
    return suites


def evaluate_lengths(decoder: SequenceDecoder, lengths: Sequence[LengthTag],
                     per_length_count: int = DEFAULT_PER_LENGTH_COUNT, distribution: str = "uniform",
                     seed: int = 0, value_low: int = 1, value_high: int = 100,
                     metadata: Optional[Mapping[str, Any]] = None) -> EvalReport:
    """Sorting report with one row per requested length or rep(i,r) tag.

    Args:
        decoder: trained model or any SequenceDecoder
        lengths: integers and/or 'rep(i,r)' tags
        per_length_count: examples per row
        distribution: 'uniform', or 'rep' to require every tag to be rep(i,r)
        seed: test-set seed
        value_low: smallest value drawn
        value_high: largest value drawn
    """
    if distribution not in ("uniform", "rep"):
        raise ContractError(f"Unknown distribution '{distribution}'")
    for tag in lengths:
        parsed = parse_length_tag(tag, per_length_count)
        if distribution == "rep" and not isinstance(parsed, RepTestConfig):
            raise ContractError(f"Distribution 'rep' needs rep(i,r) tags, got '{tag}'")
        length = parsed.length if isinstance(parsed, RepTestConfig) else parsed
        _check_capacity(decoder, length + 1, length)
    suites = sort_suites(lengths, per_length_count, seed, value_low, value_high)
    header = {"task": "sort", "seed": seed, "per_length_count": per_length_count,
              "values": f"{value_low}..{value_high}", **dict(metadata or {})}
    return EvaluateUseCase().execute(decoder, suites, header)


def evaluate_increment(decoder: SequenceDecoder, lengths: Sequence[int],
                       count: int = DEFAULT_PER_LENGTH_COUNT, seed: int = 0,
                       metadata: Optional[Mapping[str, Any]] = None) -> EvalReport:
    """Increment report; the overflow digit counts toward the target."""
    suites: Dict[str, Examples] = {}
    for length in lengths:
        _check_capacity(decoder, length + 1, length + 1)
        suites[str(length)] = gen_length_test_set("increment", length, count, seed, _suite_context(length))
    header = {"task": "increment", "seed": seed, "per_length_count": count, **dict(metadata or {})}
    return EvaluateUseCase().execute(decoder, suites, header)


# ============================================
# Adapter Layer
# ============================================


class EvalReportCSVAdapter:
    """評価レポートを CSV で読み書きするアダプター

    Header comment rows ('# key: value') precede the table.
    """

    def write(self, path: Union[str, Path], report: EvalReport) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            for key in sorted(report.metadata):
                f.write(f"# {key}: {report.metadata[key]}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_HEADER)
            for row in report:
                writer.writerow(row.to_row())

    def read(self, path: Union[str, Path]) -> EvalReport:
        metadata: Dict[str, Any] = {}
        body: List[str] = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                metadata[key] = value
            elif line:
                body.append(line)
        reader = csv.DictReader(body)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise FormatError(f"{path} is not an evaluation report")
        rows = tuple(
            EvalRow(r["tag"], int(r["n_examples"]), float(r["full_seq_acc"]), float(r["mean_edit_distance"]))
            for r in reader
        )
        return EvalReport(rows, metadata)


@dataclass(frozen=True)
class ComparisonRow:
    """比較グリッドの 1 行（バリアント × シード × 長さ）"""
    variant: str
    seed: int
    row: EvalRow


class ComparisonCSVAdapter:
    HEADER = ("variant", "seed", "tag", "full_seq_acc", "mean_edit_distance")

    def write(self, path: Union[str, Path], rows: Sequence[ComparisonRow]) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.HEADER)
            for item in rows:
                _, _, accuracy, distance = item.row.to_row()
                writer.writerow([item.variant, item.seed, item.row.tag, accuracy, distance])


class TrendCSVAdapter:
    HEADER = ("trend", "wins", "seeds", "quorum", "pass")

    def write(self, path: Union[str, Path], checks: Sequence[TrendCheck]) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.HEADER)
            for check in checks:
                writer.writerow([check.name, check.wins, check.seeds, check.quorum, int(check.passed)])
