"""lglab の例外階層

すべて ValueError の派生なので、呼び出し側は従来どおり ValueError で捕捉できる。
"""

from __future__ import annotations


class LabError(ValueError):
    """lglab 共通の基底例外"""


class DimensionError(LabError):
    """テンソル形状の不一致"""


class DomainError(LabError):
    """τ や n、ε が定義域外"""


class ContractError(LabError):
    """事前条件違反（スカラーでない損失、全ゼロのマスク、未知のヘッドなど）"""


class CapacityError(LabError):
    """コンテキスト長の超過"""


class VocabularyError(LabError):
    """未知のトークンID、またはデータセットとモデルの語彙不一致"""


class FormatError(LabError):
    """データセット／チェックポイントのマジック・バージョン・レコード不正"""


class NonFiniteError(LabError):
    """損失または勾配が有限でない"""


class UsageError(LabError):
    """CLI・設定値の誤り（終了コード2）"""
