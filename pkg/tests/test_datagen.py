"""
datagenモジュールのunit test

複合条件カバレッジ: 100%
テストパターン: Given/When/Then方式
"""

import math
import sys
from collections import Counter
from pathlib import Path

import pytest
from scipy import stats

# src/ 配下の lglab をインポートできるようにパスを追加
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from lglab.datagen import (
    BOT,
    BOT_ID,
    INCREMENT_TABLE,
    INCREMENT_TIERS,
    PAD_ID,
    SORTING_TABLE,
    UP,
    DatasetFileAdapter,
    GenConfig,
    LengthTier,
    RawExample,
    RepTestConfig,
    carry_trace,
    decode_example,
    encode_example,
    gen_dataset,
    gen_length_test_set,
    gen_rep_test_set,
    gen_sort_dataset,
    generate_raw,
    increment_digits,
    length_probability,
    oracle_successor,
    read_dataset,
    write_dataset,
)
from lglab.errors import CapacityError, ContractError, FormatError, VocabularyError


class TestTokenTable:
    """TokenTableクラスのテスト"""

    def test_sorting_table_値1から100の場合_IDは値プラス1となること(self):
        # When/Then: PAD=0, ⊥=1, 値 v → v+1
        assert SORTING_TABLE.size == 103
        assert SORTING_TABLE.encode(1) == 2
        assert SORTING_TABLE.encode(100) == 101
        assert SORTING_TABLE.decode(BOT_ID) == BOT

    def test_increment_table_数字と上矢印の場合_14記号となること(self):
        # When/Then
        assert INCREMENT_TABLE.size == 14
        assert INCREMENT_TABLE.encode(0) == 2
        assert INCREMENT_TABLE.encode(UP) == 12
        assert INCREMENT_TABLE.value_ids() == list(range(2, 12))

    def test_encode_未知の記号の場合_VocabularyErrorが発生すること(self):
        # When/Then
        with pytest.raises(VocabularyError):
            SORTING_TABLE.encode(101)

    @pytest.mark.parametrize("token_id", [-1, 103])
    def test_decode_範囲外のIDの場合_VocabularyErrorが発生すること(self, token_id):
        # When/Then
        with pytest.raises(VocabularyError):
            SORTING_TABLE.decode(token_id)


class TestGenConfig:
    """GenConfigクラスのテスト"""

    def test_init_確率質量の和が1でない場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            GenConfig(tiers=(LengthTier(0.5, 2, 5),))

    def test_init_空の長さ区間の場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            GenConfig(tiers=(LengthTier(1.0, 5, 4),))

    def test_init_値域が空の場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            GenConfig(value_low=10, value_high=9)

    def test_from_dict_to_dictの出力の場合_同じ設定が復元されること(self):
        # Given: 既定でない設定
        cfg = GenConfig(seed=7, count=3, tiers=INCREMENT_TIERS, repetition_prob=0.25)

        # When: 辞書を経由
        restored = GenConfig.from_dict(cfg.to_dict())

        # Then: 等価
        assert restored == cfg


class TestLengthProbability:
    """length_probability関数のテスト"""

    def test_length_probability_既定の区間の場合_質量が一様に配分されること(self):
        # Given: 0.8 on [2,5], 0.2 on [6,20]
        tiers = (LengthTier(0.8, 2, 5), LengthTier(0.2, 6, 20))

        # When/Then
        assert length_probability(tiers, 3) == pytest.approx(0.2)
        assert length_probability(tiers, 10) == pytest.approx(0.2 / 15)
        assert length_probability(tiers, 21) == 0.0
        assert sum(length_probability(tiers, n) for n in range(1, 25)) == pytest.approx(1.0)


class TestOracles:
    """記号レベルのオラクル関数のテスト"""

    def test_oracle_successor_重複値の場合_最初の出現の次が返ること(self):
        # When/Then: sorted [1, 3, 3]
        assert oracle_successor([3, 1, 3], 3) == 3
        assert oracle_successor([3, 1, 3], 1) == 3

    def test_oracle_successor_最大値の場合_BOTが返ること(self):
        # When/Then
        assert oracle_successor([1, 2], 2) == BOT

    @pytest.mark.parametrize("digits,expected", [
        ([1, 2, 8], [9, 2, 1]),
        ([1, 2, 9], [0, 3, 1]),
        ([9, 9], [0, 0, 1]),
        ([5], [6]),
    ])
    def test_increment_digits_各入力の場合_下位桁から並ぶこと(self, digits, expected):
        # When/Then
        assert increment_digits(digits) == expected

    def test_carry_trace_繰り上がりがある場合_桁と上矢印とキャリーの三つ組となること(self):
        # When: 19 + 1
        trace = carry_trace([1, 9])

        # Then: (0, ↑, 1), (2, ↑, 0)
        assert trace == [0, UP, 1, 2, UP, 0]

    def test_carry_trace_桁があふれる場合_最上位の三つ組が追加されること(self):
        # When: 99 + 1
        trace = carry_trace([9, 9])

        # Then
        assert trace == [0, UP, 1, 0, UP, 1, 1, UP, 0]


class TestEncodeExample:
    """encode_example / decode_example 関数のテスト"""

    def _raw(self):
        return RawExample(task="sort", prompt=(3, 1, BOT), answer=(1, 3), scored=(True, True), n_input=2)

    def test_encode_ソート例の場合_ターゲットとマスクが1つずれること(self):
        # Given: 3 1 ⊥ → 1 3
        raw = self._raw()

        # When: コンテキスト 8 で符号化
        example = encode_example(raw, SORTING_TABLE, 8)

        # Then: 右側 PAD、マスクは ⊥ と最初の解答の位置
        assert example.tokens == (4, 2, 1, 2, 4, 0, 0, 0)
        assert example.targets == (2, 1, 2, 4, 0, 0, 0, 0)
        assert example.mask == (0, 0, 1, 1, 0, 0, 0, 0)
        assert example.answer_start == 3
        assert example.prompt_ids == (4, 2, 1)
        assert example.answer_ids == (2, 4)
        assert example.length == 5

    def test_encode_コンテキストを超える場合_CapacityErrorが発生すること(self):
        # When/Then
        with pytest.raises(CapacityError):
            encode_example(self._raw(), SORTING_TABLE, 4)

    def test_decode_符号化済みの例の場合_記号列が復元されること(self):
        # Given
        raw = self._raw()

        # When
        decoded = decode_example(encode_example(raw, SORTING_TABLE, 8), SORTING_TABLE)

        # Then
        assert decoded.prompt == raw.prompt
        assert decoded.answer == raw.answer
        assert decoded.scored == raw.scored


class TestGenDataset:
    """gen_dataset関数のテスト"""

    def test_gen_dataset_ソートの場合_解答が入力の昇順となること(self):
        # Given
        cfg = GenConfig(seed=1, count=50)

        # When
        examples = gen_dataset("sort", cfg)

        # Then: 全例で解答 = sorted(入力)、マスク数 = n
        for example in examples:
            values = example.tokens[:example.n_input]
            assert example.tokens[example.n_input] == BOT_ID
            assert example.answer_ids == tuple(sorted(values))
            assert sum(example.mask) == example.n_input
            assert 2 <= example.n_input <= 20

    def test_gen_dataset_同じシードの場合_同一のデータとなること(self):
        # Given
        cfg = GenConfig(seed=3, count=20, repetition_prob=0.5)

        # When
        first = gen_dataset("sort", cfg)
        second = gen_dataset("sort", cfg)

        # Then
        assert first.to_list() == second.to_list()

    def test_gen_dataset_件数を増やした場合_先頭の例は変わらないこと(self):
        # Given: 同じシードで 5 件と 12 件
        small = gen_dataset("successor", GenConfig(seed=4, count=5))
        large = gen_dataset("successor", GenConfig(seed=4, count=12))

        # Then: 先頭 5 件は一致
        assert large.to_list()[:5] == small.to_list()

    def test_gen_dataset_異なるシードの場合_データが異なること(self):
        # When
        a = gen_dataset("sort", GenConfig(seed=0, count=10))
        b = gen_dataset("sort", GenConfig(seed=1, count=10))

        # Then
        assert a.to_list() != b.to_list()

    def test_gen_dataset_後続要素タスクの場合_オラクルと一致すること(self):
        # When
        examples = gen_dataset("successor", GenConfig(seed=2, count=30))

        # Then: プロンプト末尾が問い合わせ値、解答は1記号
        for example in examples:
            values = [SORTING_TABLE.decode(t) for t in example.tokens[:example.n_input]]
            query = SORTING_TABLE.decode(example.prompt_ids[-1])
            answer = SORTING_TABLE.decode(example.answer_ids[0])
            assert len(example.answer_ids) == 1
            assert answer == oracle_successor(values, query)

    def test_gen_dataset_計数タスクの場合_少数派またはBOTが解答となること(self):
        # When
        examples = gen_dataset("count", GenConfig(seed=5, count=40))

        # Then
        for example in examples:
            counts = Counter(example.tokens[:example.n_input])
            assert len(counts) == 2
            (a, ca), (b, cb) = sorted(counts.items())
            label = example.answer_ids[0]
            if ca == cb:
                assert label == BOT_ID
            else:
                assert label == (a if ca < cb else b)
                assert abs(ca - cb) <= 5

    def test_gen_dataset_補完タスクの場合_残りの個数だけ解答されること(self):
        # When
        examples = gen_dataset("fill", GenConfig(seed=6, count=30))

        # Then: 既出 + 解答 = 繰り返し数
        for example in examples:
            given = len(example.prompt_ids) - example.n_input - 1
            assert given + len(example.answer_ids) == example.n_input
            assert len(set(example.tokens[:example.length])) == 2

    def test_gen_dataset_インクリメントの場合_先頭桁が0でなく解答が正しいこと(self):
        # When
        examples = gen_dataset("increment", GenConfig(seed=7, count=40, tiers=INCREMENT_TIERS, nines_prob=0.5))

        # Then
        for example in examples:
            digits = [INCREMENT_TABLE.decode(t) for t in example.tokens[:example.n_input]]
            answer = [INCREMENT_TABLE.decode(t) for t in example.answer_ids]
            assert digits[0] != 0
            value = int("".join(str(d) for d in digits))
            assert int("".join(str(d) for d in reversed(answer))) == value + 1

    def test_gen_dataset_キャリータスクの場合_上矢印は損失から除外されること(self):
        # When
        examples = gen_dataset("carry", GenConfig(seed=8, count=20, tiers=INCREMENT_TIERS))

        # Then: 三つ組のうち 2 記号だけがマスク対象
        up = INCREMENT_TABLE.encode(UP)
        for example in examples:
            answer = example.answer_ids
            assert len(answer) % 3 == 0
            assert sum(example.mask) == 2 * len(answer) // 3
            for offset, token in enumerate(answer):
                position = example.answer_start + offset - 1
                assert example.mask[position] == (0 if token == up else 1)

    def test_gen_dataset_未知のタスクの場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            gen_dataset("reverse", GenConfig(count=1))

    def test_gen_sort_dataset_繰り返しモードの場合_重複を含む例が生成されること(self):
        # When
        examples = gen_sort_dataset(GenConfig(seed=9, count=200), repetition_mode=True)

        # Then: 少なくとも 1 例は重複値を含む
        assert any(len(set(e.tokens[:e.n_input])) < e.n_input for e in examples)
        assert examples.header.generator["repetition_prob"] == 0.1


class TestTestSets:
    """長さ別・rep(i,r) テストセットのテスト"""

    def test_gen_length_test_set_指定長の場合_全例がその長さとなること(self):
        # When
        examples = gen_length_test_set("sort", 12, 25, seed=1)

        # Then
        assert len(examples) == 25
        assert {e.n_input for e in examples} == {12}

    def test_gen_length_test_set_インクリメントの場合_桁数が指定長となること(self):
        # When
        examples = gen_length_test_set("increment", 15, 10, seed=2)

        # Then
        for example in examples:
            assert example.n_input == 15
            assert example.tokens[0] != INCREMENT_TABLE.encode(0)

    def test_gen_length_test_set_未対応タスクの場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            gen_length_test_set("count", 5, 1)

    def test_gen_rep_test_set_指定の場合_各値がr回以上現れること(self):
        # Given: rep(12, 4)
        rep_cfg = RepTestConfig(12, 4, count=20)

        # When
        examples = gen_rep_test_set(rep_cfg, seed=3)

        # Then: 長さ 12、4 回以上出現する値が 3 つ以上
        assert rep_cfg.tag == "rep(12,4)"
        for example in examples:
            counts = Counter(example.tokens[:example.n_input])
            assert example.n_input == 12
            assert sum(1 for c in counts.values() if c >= 4) >= 3
            assert example.answer_ids == tuple(sorted(example.tokens[:12]))

    def test_rep_test_config_rが長さを超える場合_ContractErrorが発生すること(self):
        # When/Then
        with pytest.raises(ContractError):
            RepTestConfig(3, 4)
        with pytest.raises(ContractError):
            RepTestConfig(5, 1)


class TestDatasetFileAdapter:
    """DatasetFileAdapterクラスのテスト"""

    def test_write_read_書き出したファイルの場合_同じ例が読み込まれること(self, tmp_path):
        # Given
        examples = gen_dataset("sort", GenConfig(seed=11, count=8, context_length=48))
        path = tmp_path / "data.jsonl"

        # When
        write_dataset(path, examples)
        loaded = read_dataset(path)

        # Then
        assert loaded.to_list() == examples.to_list()
        assert loaded.header.task == "sort"
        assert loaded.token_table is SORTING_TABLE

    def test_write_同じデータの場合_バイト列が一致すること(self, tmp_path):
        # Given
        examples = gen_dataset("increment", GenConfig(seed=2, count=4, tiers=INCREMENT_TIERS))

        # When
        write_dataset(tmp_path / "a.jsonl", examples)
        write_dataset(tmp_path / "b.jsonl", examples)

        # Then
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_read_空ファイルの場合_FormatErrorが発生すること(self, tmp_path):
        # Given
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")

        # When/Then
        with pytest.raises(FormatError):
            DatasetFileAdapter().read(path)

    def test_read_未知のフォーマットの場合_FormatErrorが発生すること(self, tmp_path):
        # Given
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format": "other/9", "task": "sort", "table": "sorting/1"}\n', encoding="utf-8")

        # When/Then
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_read_未知のトークン表の場合_FormatErrorが発生すること(self, tmp_path):
        # Given
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format": "lg-dataset/1", "task": "sort", "table": "sorting/2"}\n', encoding="utf-8")

        # When/Then
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_read_壊れたレコードの場合_FormatErrorが発生すること(self, tmp_path):
        # Given: ヘッダは正しく 2 行目が JSON でない
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format": "lg-dataset/1", "task": "sort", "table": "sorting/1"}\n{oops\n', encoding="utf-8")

        # When/Then
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_read_マスクのないレコードの場合_FormatErrorが発生すること(self, tmp_path):
        # Given
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"format": "lg-dataset/1", "task": "sort", "table": "sorting/1"}\n'
            '{"tokens": [3, 1, 3], "targets": [1, 3, 0], "mask": [0, 0, 0], "n_input": 1, "task": "sort"}\n',
            encoding="utf-8",
        )

        # When/Then
        with pytest.raises(FormatError):
            read_dataset(path)


class TestSkewedLengths:
    """長さ分布の統計的なテスト"""

    def test_gen_dataset_既定の区間の場合_短い長さが約8割となること(self):
        # When
        examples = gen_dataset("sort", GenConfig(seed=12, count=2000))

        # Then: 2..5 の割合は 0.8 ± 0.05
        short = sum(1 for e in examples if e.n_input <= 5) / len(examples)
        assert math.isclose(short, 0.8, abs_tol=0.05)
        assert PAD_ID not in examples[0].tokens[:examples[0].length]


class TestCountTask:
    """gen_count_example 関数のテスト"""

    def test_gen_count_長さ2と3の区間の場合_同数は長さ2で差ありは長さ3となること(self):
        # Given: 偶数長は 2、3 以上は 3 のみ
        cfg = GenConfig(seed=13, count=200, tiers=(LengthTier(1.0, 2, 3),))

        # When
        examples = list(generate_raw("count", cfg))

        # Then
        for example in examples:
            counts = sorted(Counter(example.prompt[:example.n_input]).values())
            assert sum(counts) == example.n_input
            if example.variant == "tie":
                assert example.n_input == 2 and counts == [1, 1]
                assert example.answer == (BOT,)
            else:
                assert example.n_input == 3 and counts == [1, 2]
        assert {e.variant for e in examples} == {"tie", "gap"}

    def test_gen_count_偶数長がない区間の場合_ContractErrorが発生すること(self):
        # Given: 長さ 3 のみでは同数の例を作れない
        cfg = GenConfig(seed=0, count=50, tiers=(LengthTier(1.0, 3, 3),))

        # When/Then
        with pytest.raises(ContractError):
            gen_dataset("count", cfg)


@pytest.mark.slow
class TestDistributions:
    """10万件規模の分布のテスト"""

    def test_gen_count_10万件の場合_同数の割合が半分で長さが保たれること(self):
        # When
        examples = list(generate_raw("count", GenConfig(seed=21, count=100_000)))

        # Then
        ties = [e for e in examples if e.variant == "tie"]
        assert math.isclose(len(ties) / len(examples), 0.5, abs_tol=0.01)
        assert all(len(e.prompt) == e.n_input + 1 for e in examples)
        assert all(e.n_input % 2 == 0 for e in ties)
        assert all(e.n_input >= 3 for e in examples if e.variant == "gap")

    def test_gen_sort_10万件の場合_反復分岐の割合が1割となること(self):
        # When
        examples = generate_raw("sort", GenConfig(seed=22, count=100_000, repetition_prob=0.1))

        # Then
        share = sum(1 for e in examples if e.variant == "repetition") / 100_000
        assert math.isclose(share, 0.1, abs_tol=0.01)

    def test_gen_increment_10万件の場合_9の接尾辞分岐の割合が1割となること(self):
        # When
        examples = generate_raw("increment", GenConfig(seed=23, count=100_000, tiers=INCREMENT_TIERS))

        # Then
        share = sum(1 for e in examples if e.variant == "nines") / 100_000
        assert math.isclose(share, 0.1, abs_tol=0.01)

    def test_gen_sort_10万件の場合_値の周辺分布が一様となること(self):
        # When
        observed = Counter()
        for example in generate_raw("sort", GenConfig(seed=24, count=100_000)):
            observed.update(example.prompt[:example.n_input])

        # Then: χ² 検定で p > 0.01
        _, p_value = stats.chisquare([observed[v] for v in range(1, 101)])
        assert p_value > 0.01
