"""The nine compared methods and the design flags each one implies."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class MethodSpec:
    """``strategy``: how ``M_k`` is obtained at ``k >= 1``.

    ``"independent"`` trains a fresh model on ``L_k`` (Keep-All),
    ``"joint"``/``"posthoc"`` add a learned or identity backward link,
    ``"fixed"`` reuses ``M_0`` and ``"finetune"`` continues from ``M_{k-1}``.
    """

    name: str
    label: str
    strategy: str
    transform: str | None = None
    loss: str = "single"
    approach: str = "keep-latest"

    @property
    def aligns(self) -> bool:
        return self.strategy in ("joint", "posthoc")

    @property
    def keeps_architecture(self) -> bool:
        return self.strategy in ("fixed", "finetune")


METHODS = {m.name: m for m in [
    MethodSpec("KeepAll", "Keep-All", "independent", approach="keep-all"),
    MethodSpec("FixM0", "Fix-M0", "fixed", approach="keep-m0"),
    MethodSpec("FinetuneM0", "Finetune-M0", "finetune", approach="keep-m0"),
    MethodSpec("NonBC", "Non-BC", "posthoc", "notrans", "single"),
    MethodSpec("PostLinSLoss", "Post-Lin-SLoss", "posthoc", "linear", "single"),
    MethodSpec("PostLinMLoss", "Post-Lin-MLoss", "posthoc", "linear", "multi"),
    MethodSpec("JointNoTrans", "Joint-NoTrans", "joint", "notrans", "single"),
    MethodSpec("JointLinSLoss", "Joint-Lin-SLoss", "joint", "linear", "single"),
    MethodSpec("BCAligner", "BC-Aligner", "joint", "linear", "multi"),
]}

KEEP_LATEST = [n for n, m in METHODS.items() if m.approach == "keep-latest"]


def get_method(name) -> MethodSpec:
    if isinstance(name, MethodSpec):
        return name
    try:
        return METHODS[name]
    except KeyError:
        raise ValidationError(f"unknown method {name!r}; choose from {sorted(METHODS)}") from None
