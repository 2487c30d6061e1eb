"""
evaluatorモジュールのunit test

複合条件カバレッジ: 100%
テストパターン: Given/When/Then方式
"""

import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

# src/ 配下の lglab をインポートできるようにパスを追加
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from lglab.construction import ConstructionDecoder
from lglab.datagen import (
    SORTING_TABLE,
    DatasetHeader,
    Examples,
    GenConfig,
    LengthTier,
    RepTestConfig,
    gen_dataset,
    gen_length_test_set,
)
from lglab.errors import CapacityError, ContractError, FormatError, VocabularyError
from lglab.evaluator import (
    REPORT_HEADER,
    ComparisonCSVAdapter,
    ComparisonRow,
    EvalReport,
    EvalReportCSVAdapter,
    EvalRow,
    EvaluateUseCase,
    OracleDecoder,
    TrendCSVAdapter,
    check_trend,
    decode_predictions,
    edit_distance,
    evaluate_hint,
    evaluate_increment,
    evaluate_lengths,
    full_sequence_accuracy,
    parse_length_tag,
    score_pairs,
)
from lglab.model import ModelConfig, build_model


def recursive_distance(a, b):
    """先頭要素で分岐する素朴な再帰（挿入・削除・置換をすべて試す）"""

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))

    return go(0, 0)


class TestEditDistance:
    """edit_distance関数のテスト"""

    @pytest.mark.parametrize("a,b,expected", [
        ("kitten", "sitting", 3),
        ([], [1, 2], 2),
        ([1, 2, 3], [1, 2, 3], 0),
        ([1, 3, 2], [1, 2, 3], 2),
        ([5], [6], 1),
        ([1, 2, 3, 4], [2, 3, 4], 1),
    ])
    def test_edit_distance_各組の場合_レーベンシュタイン距離となること(self, a, b, expected):
        # When/Then: 対称であること
        assert edit_distance(a, b) == expected
        assert edit_distance(b, a) == expected

    def test_edit_distance_ランダムな三つ組の場合_距離の公理を満たすこと(self):
        # Given
        rng = np.random.default_rng(0)
        triples = [[[int(v) for v in rng.integers(0, 4, size=rng.integers(0, 8))] for _ in range(3)] for _ in range(300)]

        # When/Then: 同一性・対称性・三角不等式
        for a, b, c in triples:
            assert edit_distance(a, a) == 0
            assert (edit_distance(a, b) == 0) == (a == b)
            assert edit_distance(a, b) == edit_distance(b, a)
            assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)

    def test_edit_distance_ランダムな1000組の場合_再帰の全探索と一致すること(self):
        # Given
        rng = np.random.default_rng(1)
        pairs = [(tuple(rng.integers(0, 4, size=rng.integers(0, 9))), tuple(rng.integers(0, 4, size=rng.integers(0, 9))))
                 for _ in range(1000)]

        # When/Then
        for a, b in pairs:
            assert edit_distance(a, b) == recursive_distance(a, b)


class TestParseLengthTag:
    """parse_length_tag関数のテスト"""

    def test_parse_整数文字列の場合_整数が返ること(self):
        # When/Then
        assert parse_length_tag("12") == 12
        assert parse_length_tag(7) == 7

    def test_parse_repタグの場合_RepTestConfigが返ること(self):
        # When
        parsed = parse_length_tag("rep(10, 5)", count=30)

        # Then
        assert parsed == RepTestConfig(10, 5, 30)

    @pytest.mark.parametrize("tag", ["rep(3)", "ten", "-4"])
    def test_parse_不正なタグの場合_ContractErrorが発生すること(self, tag):
        # When/Then
        with pytest.raises(ContractError):
            parse_length_tag(tag)


class TestEvalRowAndReport:
    """EvalRow / EvalReport クラスのテスト"""

    @pytest.mark.parametrize("kwargs", [
        dict(n_examples=0, full_seq_acc=0.5, mean_edit_distance=0.0),
        dict(n_examples=3, full_seq_acc=1.5, mean_edit_distance=0.0),
        dict(n_examples=3, full_seq_acc=0.5, mean_edit_distance=-1.0),
    ])
    def test_init_不正な値の場合_ContractErrorが発生すること(self, kwargs):
        # When/Then
        with pytest.raises(ContractError):
            EvalRow("5", **kwargs)

    def test_row_存在しないタグの場合_KeyErrorが発生すること(self):
        # Given
        report = EvalReport((EvalRow("5", 10, 1.0, 0.0), EvalRow("rep(6,2)", 10, 0.5, 1.2)))

        # When/Then
        assert report.row(5).full_seq_acc == 1.0
        assert report.accuracy() == {"5": 1.0, "rep(6,2)": 0.5}
        with pytest.raises(KeyError):
            report.row(6)

    def test_score_pairs_一部が外れた場合_正解率と平均距離が計算されること(self):
        # Given
        pairs = [([2, 3, 4], [2, 3, 4]), ([2, 4, 3], [2, 3, 4])]

        # When
        row = score_pairs("3", pairs)

        # Then
        assert row.full_seq_acc == 0.5
        assert row.mean_edit_distance == 1.0
        assert row.to_row() == ["3", "2", "0.500000", "1.000000"]


class TestCheckTrend:
    """check_trend関数のテスト"""

    def test_check_trend_3シード中2勝の場合_合格となること(self):
        # When: 同点は勝ちとして数える
        check = check_trend("hint", {0: 0.9, 1: 0.5, 2: 0.7}, {0: 0.8, 1: 0.6, 2: 0.7})

        # Then
        assert (check.wins, check.seeds, check.quorum) == (2, 3, 2)
        assert check.passed

    def test_check_trend_3シード中1勝の場合_不合格となること(self):
        # When
        check = check_trend("tempered", {0: 0.1, 1: 0.9, 2: 0.1}, {0: 0.2, 1: 0.8, 2: 0.2})

        # Then
        assert not check.passed

    def test_check_trend_共通のシードがない場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            check_trend("hint", {0: 1.0}, {1: 1.0})


class TestOracleEvaluation:
    """OracleDecoder を用いた評価経路のテスト"""

    def test_evaluate_lengths_正解デコーダの場合_全行が正解率1となること(self):
        # When
        report = evaluate_lengths(OracleDecoder(), [3, 8, "rep(6,2)"], per_length_count=20, seed=1)

        # Then
        assert [row.tag for row in report] == ["3", "8", "rep(6,2)"]
        assert all(row.full_seq_acc == 1.0 and row.mean_edit_distance == 0.0 for row in report)
        assert report.metadata["task"] == "sort"
        assert report.metadata["per_length_count"] == 20

    def test_evaluate_increment_正解デコーダの場合_繰り上がり桁を含め正解となること(self):
        # When
        report = evaluate_increment(OracleDecoder("increment"), [3, 12], count=15, seed=2)

        # Then
        assert report.accuracy() == {"3": 1.0, "12": 1.0}

    def test_evaluate_lengths_構成モデルの場合_正解率1となること(self):
        # When
        report = evaluate_lengths(ConstructionDecoder(), [2, 5, "rep(6,3)"], per_length_count=10)

        # Then
        assert all(row.full_seq_acc == 1.0 for row in report)

    def test_execute_語彙が異なる場合_VocabularyErrorが発生すること(self):
        # Given
        suites = {"4": gen_length_test_set("sort", 4, 3)}

        # When/Then
        with pytest.raises(VocabularyError):
            EvaluateUseCase().execute(OracleDecoder("increment"), suites)

    def test_evaluate_lengths_コンテキスト超過の場合_CapacityErrorが発生すること(self):
        # Given: 長さ 10 は 11 + 10 − 1 = 20 位置を要する
        model = build_model(ModelConfig(depth=1, d_model=8, n_heads=2, d_mlp=8, vocab_size=103, context_length=16))

        # When/Then
        with pytest.raises(CapacityError):
            evaluate_lengths(model, [10], per_length_count=2)

    def test_evaluate_lengths_rep分布に整数タグの場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            evaluate_lengths(OracleDecoder(), [5], distribution="rep")
        with pytest.raises(ContractError):
            evaluate_lengths(OracleDecoder(), [5], distribution="zipf")

    def test_decode_predictions_長さが混在する場合_例の順序が保たれること(self):
        # Given: 長さ 2..6 が混在するデータセット
        examples = gen_dataset("sort", GenConfig(seed=3, count=30, tiers=(LengthTier(1.0, 2, 6),))).to_list()

        # When
        pairs = decode_predictions(OracleDecoder(), examples, batch_size=4)

        # Then
        assert [target for _, target in pairs] == [list(e.answer_ids) for e in examples]
        assert all(prediction == target for prediction, target in pairs)

    def test_decode_predictions_増分で桁が増える場合_繰り上がり桁まで復号されること(self):
        # Given: 末尾がすべて 9 の増分データ（一部は全桁 9）
        cfg = GenConfig(seed=4, count=60, tiers=(LengthTier(1.0, 2, 4),), nines_prob=1.0, context_length=16)
        examples = gen_dataset("increment", cfg).to_list()

        # When
        pairs = decode_predictions(OracleDecoder("increment"), examples, batch_size=8)

        # Then
        grown = [e for e in examples if len(e.answer_ids) == e.n_input + 1]
        assert grown
        assert all(prediction == target for prediction, target in pairs)

    def test_full_sequence_accuracy_未学習モデルの場合_0から1の値となること(self):
        # Given
        model = build_model(ModelConfig(depth=1, d_model=8, n_heads=2, d_mlp=8, vocab_size=103, context_length=16))
        examples = gen_length_test_set("sort", 3, 5)

        # When
        accuracy = full_sequence_accuracy(model, examples)

        # Then
        assert 0.0 <= accuracy <= 1.0

    def test_full_sequence_accuracy_空のデータの場合_ContractErrorが発生すること(self):
        # Given
        empty = Examples(DatasetHeader("sort", SORTING_TABLE.name, 0))

        # When/Then
        with pytest.raises(ContractError):
            full_sequence_accuracy(OracleDecoder(), empty)

    def test_oracle_decoder_未対応タスクの場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            OracleDecoder("count")


class TestEvaluateHint:
    """evaluate_hint関数のテスト"""

    def test_evaluate_hint_未学習モデルの場合_0から1の値となること(self):
        # Given
        model = build_model(ModelConfig(depth=1, d_model=8, n_heads=2, d_mlp=8, vocab_size=103, context_length=16))
        examples = gen_dataset("successor", GenConfig(count=6, tiers=(LengthTier(1.0, 2, 4),), context_length=16))

        # When
        accuracy = evaluate_hint(model, examples, batch_size=4)

        # Then
        assert 0.0 <= accuracy <= 1.0

    def test_evaluate_hint_学習済みモデル以外の場合_ContractErrorが発生すること(self):
        # Given
        examples = gen_dataset("successor", GenConfig(count=2))

        # When/Then
        with pytest.raises(ContractError):
            evaluate_hint(ConstructionDecoder(), examples)


class TestReportAdapters:
    """CSVアダプターのテスト"""

    def test_write_read_レポートの場合_メタデータと行が復元されること(self, tmp_path):
        # Given
        report = EvalReport((EvalRow("5", 10, 0.9, 0.1), EvalRow("rep(6,2)", 10, 0.25, 1.5)),
                            {"task": "sort", "seed": 3})
        path = tmp_path / "eval_report.csv"

        # When
        EvalReportCSVAdapter().write(path, report)
        loaded = EvalReportCSVAdapter().read(path)

        # Then
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[:3] == ["# seed: 3", "# task: sort", ",".join(REPORT_HEADER)]
        assert loaded.rows == report.rows
        assert loaded.metadata == {"seed": "3", "task": "sort"}

    def test_read_見出しが異なる場合_FormatErrorが発生すること(self, tmp_path):
        # Given
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")

        # When/Then
        with pytest.raises(FormatError):
            EvalReportCSVAdapter().read(path)

    def test_comparison_write_グリッドの場合_バリアントとシードが書かれること(self, tmp_path):
        # Given
        path = tmp_path / "comparison.csv"
        rows = [ComparisonRow("no-hint/standard", 1, EvalRow("10", 4, 0.75, 0.5))]

        # When
        ComparisonCSVAdapter().write(path, rows)

        # Then
        assert path.read_text(encoding="utf-8").splitlines() == [
            "variant,seed,tag,full_seq_acc,mean_edit_distance",
            "no-hint/standard,1,10,0.750000,0.500000",
        ]

    def test_trend_write_判定の場合_合否が書かれること(self, tmp_path):
        # Given
        path = tmp_path / "trends.csv"
        check = check_trend("hint >= no-hint", {0: 1.0, 1: 1.0}, {0: 0.5, 1: 0.5})

        # When
        TrendCSVAdapter().write(path, [check])

        # Then
        assert path.read_text(encoding="utf-8").splitlines()[1] == "hint >= no-hint,2,2,2,1"
