"""QP-based model selection and the on-disk model registry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .models import CODECS, METHODS, ModelBundle, load_model


class MissingModelError(LookupError):
    pass


class MetadataMismatchError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class QpModelTable:
    """Per-codec piecewise map from evaluation QP to training QP group.

    ``rules[codec]`` lists ``(upper, group)`` pairs with strictly increasing
    upper bounds, the last one infinite.  A QP belongs to the first group
    whose upper bound it does not exceed.
    """

    rules: dict = field(default_factory=lambda: {
        "VVC": ((24.5, "QP22"), (29.5, "QP27"), (34.5, "QP32"), (39.5, "QP37"), (math.inf, "QP42")),
        "AV1": ((37.5, "QP32"), (49.0, "QP43"), (59.0, "QP55"), (math.inf, "QP63")),
    })

    def __post_init__(self):
        for codec, pairs in self.rules.items():
            bounds = [u for u, _ in pairs]
            if not pairs or any(b <= a for a, b in zip(bounds, bounds[1:])) or bounds[-1] != math.inf:
                raise ValueError(f"thresholds for {codec} must increase strictly and end at +inf")

    def codecs(self) -> tuple[str, ...]:
        return tuple(self.rules)

    def groups(self, codec: str) -> tuple[str, ...]:
        return tuple(g for _, g in self._pairs(codec))

    def _pairs(self, codec: str):
        try:
            return self.rules[codec]
        except KeyError:
            raise ValueError(f"unknown codec {codec!r}; expected one of {tuple(self.rules)}") from None

    def select(self, codec: str, qp_eval: float) -> str:
        qp = float(qp_eval)
        if math.isnan(qp):
            raise ValueError("QP must be a number, got NaN")
        for upper, group in self._pairs(codec):
            if qp <= upper:
                return group
        raise AssertionError("unreachable: last threshold is infinite")


DEFAULT_TABLE = QpModelTable()


def select_model(codec: str, qp_eval: float, table: QpModelTable = DEFAULT_TABLE) -> str:
    """QP group label of the model to use for ``codec`` at evaluation QP ``qp_eval``."""
    return table.select(codec, qp_eval)


def group_qp(label: str) -> int:
    """Numeric QP of a group label such as ``QP37``."""
    if not label.startswith("QP") or not label[2:].isdigit():
        raise ValueError(f"malformed QP group label {label!r}")
    return int(label[2:])


class ModelRegistry:
    """(codec, qp_group, method) -> model file.

    Manifest format: one ``codec qp_group method path`` entry per line,
    ``#`` starts a comment, relative paths are resolved against the manifest
    directory.
    """

    def __init__(self, entries: dict | None = None, table: QpModelTable = DEFAULT_TABLE):
        self.table = table
        self.entries: dict[tuple[str, str, str], Path] = {}
        for key, path in (entries or {}).items():
            self.register(*key, path)

    def register(self, codec: str, qp_group: str, method: str, path) -> None:
        if codec not in CODECS:
            raise ValueError(f"unknown codec {codec!r}")
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        if qp_group not in self.table.groups(codec):
            raise ValueError(f"{qp_group!r} is not a {codec} QP group; expected one of {self.table.groups(codec)}")
        self.entries[(codec, qp_group, method)] = Path(path)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_manifest(cls, path, table: QpModelTable = DEFAULT_TABLE) -> "ModelRegistry":
        path = Path(path)
        reg = cls(table=table)
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(maxsplit=3)
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 'codec qp_group method path', got {line!r}")
            codec, group, method, file = parts
            try:
                reg.register(codec, group, method, (path.parent / file) if not Path(file).is_absolute() else file)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
        return reg

    def to_manifest(self, path) -> None:
        path = Path(path)
        lines = ["# codec qp_group method path"]
        for (codec, group, method), file in sorted(self.entries.items()):
            try:
                file = file.resolve().relative_to(path.parent.resolve())
            except ValueError:
                pass
            lines.append(f"{codec} {group} {method} {file}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def available(self, codec: str | None = None, method: str | None = None) -> list[tuple[str, str, str]]:
        return sorted(k for k in self.entries
                      if (codec is None or k[0] == codec) and (method is None or k[2] == method))

    def resolve(self, codec: str, qp_eval: float, method: str) -> ModelBundle:
        """Load and validate the model for an evaluation QP."""
        group = self.table.select(codec, qp_eval)
        key = (codec, group, method)
        if key not in self.entries:
            have = ", ".join(" ".join(k) for k in self.available()) or "none"
            raise MissingModelError(f"no model for group {codec}/{group}/{method} (QP {qp_eval}); "
                                    f"available: {have}")
        bundle = load_model(self.entries[key])
        got = (bundle.codec, bundle.qp_group, bundle.method)
        if got != key:
            raise MetadataMismatchError(f"{self.entries[key]} is tagged {'/'.join(got)}, "
                                        f"registered as {'/'.join(key)}")
        return bundle
