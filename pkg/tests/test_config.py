"""
configモジュールのunit test

複合条件カバレッジ: 100%
テストパターン: Given/When/Then方式
"""

import sys
from pathlib import Path

import pytest

# src/ 配下の lglab をインポートできるようにパスを追加
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from lglab import __version__
from lglab.config import (
    MANIFEST_NAME,
    ConfigFileAdapter,
    ManifestAdapter,
    RunConfig,
    environment_overrides,
    file_sha256,
    resolve_run_config,
)
from lglab.errors import UsageError


def write_config(tmp_path, text):
    path = tmp_path / "config.yml"
    path.write_text(text, encoding="utf-8")
    return path


class TestRunConfig:
    """RunConfigクラスのテスト"""

    @pytest.mark.parametrize("kwargs", [
        dict(subcommand="fit"),
        dict(subcommand="gen", precision="float16"),
        dict(subcommand="gen", threads=0),
        dict(subcommand="gen", seed=-1),
    ])
    def test_init_不正な値の場合_UsageErrorが発生すること(self, kwargs):
        # When/Then
        with pytest.raises(UsageError):
            RunConfig(**kwargs)

    def test_section_取得した辞書を変更した場合_元の設定は変わらないこと(self):
        # Given
        run = RunConfig("train", sections={"model": {"depth": 2}})

        # When
        section = run.section("model")
        section["depth"] = 9

        # Then
        assert run.section("model") == {"depth": 2}
        assert run.section("eval") == {}

    def test_from_dict_to_dictの出力の場合_同じ設定が復元されること(self):
        # Given
        run = RunConfig("eval", seed=4, output_dir="runs/x", deterministic=False, threads=2)

        # When/Then
        assert RunConfig.from_dict(run.to_dict()) == run
        assert run.output_path == Path("runs/x")


class TestEnvironmentOverrides:
    """environment_overrides関数のテスト"""

    def test_overrides_全変数を設定した場合_型変換されること(self):
        # Given
        environ = {"LGLAB_SEED": "7", "LGLAB_THREADS": "4", "LGLAB_PRECISION": "float32",
                   "LGLAB_DETERMINISTIC": "off", "LGLAB_OUTPUT_DIR": "out", "OTHER": "x"}

        # When
        values = environment_overrides(environ)

        # Then
        assert values == {"seed": 7, "threads": 4, "precision": "float32", "deterministic": False,
                          "output_dir": "out"}

    def test_overrides_空文字の場合_無視されること(self):
        # When/Then
        assert environment_overrides({"LGLAB_SEED": ""}) == {}

    @pytest.mark.parametrize("environ", [{"LGLAB_SEED": "seven"}, {"LGLAB_DETERMINISTIC": "maybe"}])
    def test_overrides_不正な値の場合_UsageErrorが発生すること(self, environ):
        # When/Then
        with pytest.raises(UsageError):
            environment_overrides(environ)


class TestConfigFileAdapter:
    """ConfigFileAdapterクラスのテスト"""

    def test_load_正しいファイルの場合_セクションが返ること(self, tmp_path):
        # Given
        path = write_config(tmp_path, "run:\n  seed: 3\nmodel:\n  depth: 4\n")

        # When
        sections = ConfigFileAdapter().load(path)

        # Then
        assert sections == {"run": {"seed": 3}, "model": {"depth": 4}}

    def test_load_空ファイルの場合_空の辞書が返ること(self, tmp_path):
        # When/Then
        assert ConfigFileAdapter().load(write_config(tmp_path, "")) == {}

    def test_load_ファイルがない場合_UsageErrorが発生すること(self, tmp_path):
        # When/Then
        with pytest.raises(UsageError, match="not found"):
            ConfigFileAdapter().load(tmp_path / "missing.yml")

    @pytest.mark.parametrize("text", [
        "model: [1, 2\n",
        "- 1\n- 2\n",
        "optimizer:\n  lr: 1\n",
        "model: 3\n",
    ])
    def test_load_不正な内容の場合_UsageErrorが発生すること(self, tmp_path, text):
        # When/Then
        with pytest.raises(UsageError):
            ConfigFileAdapter().load(write_config(tmp_path, text))


class TestResolveRunConfig:
    """resolve_run_config関数のテスト"""

    def test_resolve_全階層に値がある場合_フラグが優先されること(self, tmp_path):
        # Given
        path = write_config(tmp_path, "run:\n  seed: 1\n  precision: float32\n")
        environ = {"LGLAB_SEED": "2"}

        # When
        run = resolve_run_config("gen", {"config": str(path), "seed": 3}, environ)

        # Then
        assert run.seed == 3
        assert run.precision == "float32"

    def test_resolve_フラグがない場合_環境変数がファイルより優先されること(self, tmp_path):
        # Given
        path = write_config(tmp_path, "run:\n  seed: 1\n")

        # When
        with_env = resolve_run_config("gen", {"config": str(path), "seed": None}, {"LGLAB_SEED": "2"})
        file_only = resolve_run_config("gen", {"config": str(path)}, {})

        # Then
        assert with_env.seed == 2
        assert file_only.seed == 1

    def test_resolve_ファイルのセクションの場合_run以外が添付されること(self, tmp_path):
        # Given
        path = write_config(tmp_path, "run:\n  seed: 1\ntrain:\n  total_steps: 50\n")

        # When
        run = resolve_run_config("train", {"config": str(path)}, {})

        # Then
        assert run.sections == {"train": {"total_steps": 50}}
        assert run.config_path == str(path)

    def test_resolve_設定がない場合_既定値となること(self):
        # When
        run = resolve_run_config("probe", {}, {})

        # Then
        assert (run.seed, run.precision, run.deterministic, run.output_dir) == (0, "float64", True, "runs/latest")


class TestManifestAdapter:
    """ManifestAdapter / file_sha256 のテスト"""

    def test_file_sha256_既知の内容の場合_既知のハッシュとなること(self, tmp_path):
        # Given
        path = tmp_path / "abc.txt"
        path.write_bytes(b"abc")

        # When/Then
        assert file_sha256(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

    def test_write_成果物の場合_相対パスとハッシュが記録されること(self, tmp_path):
        # Given
        run = RunConfig("gen", seed=5, output_dir=str(tmp_path))
        artifact = tmp_path / "sort.jsonl"
        artifact.write_bytes(b"abc")

        # When
        path = ManifestAdapter().write(run, {"data": {"tiers": (1, 2)}, "out": tmp_path / "x"}, [artifact])
        manifest = ManifestAdapter().read(path)

        # Then
        assert path.name == MANIFEST_NAME
        assert manifest["version"] == __version__
        assert manifest["seed"] == 5
        assert manifest["artifacts"] == {"sort.jsonl": file_sha256(artifact)}
        assert manifest["config"]["data"]["tiers"] == [1, 2]
        assert manifest["config"]["out"] == (tmp_path / "x").as_posix()
