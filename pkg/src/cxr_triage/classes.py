"""Label spaces and per-class training configuration.

Manifests always store the fine-grained four-way label.  The three-class
mode merges the two pneumonia labels at load time, so one manifest serves
both configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

NORMAL = "Normal"
BACTERIAL = "BacterialPneumonia"
VIRAL = "ViralPneumonia"
COVID = "COVID19"
PNEUMONIA = "Pneumonia"

RAW_LABELS = (NORMAL, BACTERIAL, VIRAL, COVID)

CLASS_MODES = {
    "four_class": {
        "classes": (NORMAL, BACTERIAL, VIRAL, COVID),
        "label_map": {NORMAL: NORMAL, BACTERIAL: BACTERIAL, VIRAL: VIRAL, COVID: COVID},
        "sampling_ratio": (5, 5, 5, 1),
    },
    "three_class": {
        "classes": (NORMAL, PNEUMONIA, COVID),
        "label_map": {NORMAL: NORMAL, BACTERIAL: PNEUMONIA, VIRAL: PNEUMONIA, COVID: COVID},
        "sampling_ratio": (7, 7, 1),
    },
}


@dataclass(frozen=True)
class ClassConfig:
    """Ordered label space plus the two independent imbalance remedies.

    ``pos_weight``/``neg_weight`` feed the loss; ``sampling_ratio`` feeds the
    batch composer.  Weights stay ``None`` until computed from training counts.
    """

    classes: tuple[str, ...]
    sampling_ratio: tuple[int, ...]
    label_map: Mapping[str, str] = field(default_factory=dict)
    pos_weight: tuple[float, ...] | None = None
    neg_weight: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate class names in {self.classes}")
        if len(self.sampling_ratio) != len(self.classes):
            raise ValueError("sampling_ratio must have one entry per class")
        if any(int(r) != r or r < 1 for r in self.sampling_ratio):
            raise ValueError(f"sampling_ratio entries must be integers >= 1, got {self.sampling_ratio}")
        for name, w in (("pos_weight", self.pos_weight), ("neg_weight", self.neg_weight)):
            if w is not None and len(w) != len(self.classes):
                raise ValueError(f"{name} must have one entry per class")

    @classmethod
    def from_mode(cls, mode: str, sampling_ratio: Sequence[int] | None = None) -> "ClassConfig":
        try:
            preset = CLASS_MODES[mode]
        except KeyError:
            raise ValueError(f"unknown class mode {mode!r}; expected one of {sorted(CLASS_MODES)}") from None
        ratio = tuple(sampling_ratio) if sampling_ratio is not None else preset["sampling_ratio"]
        return cls(classes=preset["classes"], sampling_ratio=ratio, label_map=dict(preset["label_map"]))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index(self, label: str) -> int:
        """Class index for a raw manifest label or an already-mapped class name."""
        name = self.label_map.get(label, label)
        try:
            return self.classes.index(name)
        except ValueError:
            raise ValueError(f"label {label!r} is not in class space {self.classes}") from None

    def with_weights(self, pos_weight: Sequence[float], neg_weight: Sequence[float]) -> "ClassConfig":
        return replace(self, pos_weight=tuple(float(w) for w in pos_weight),
                       neg_weight=tuple(float(w) for w in neg_weight))

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "sampling_ratio": list(self.sampling_ratio),
            "label_map": dict(self.label_map),
            "pos_weight": None if self.pos_weight is None else list(self.pos_weight),
            "neg_weight": None if self.neg_weight is None else list(self.neg_weight),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassConfig":
        return cls(
            classes=tuple(d["classes"]),
            sampling_ratio=tuple(int(r) for r in d["sampling_ratio"]),
            label_map=dict(d.get("label_map") or {}),
            pos_weight=None if d.get("pos_weight") is None else tuple(d["pos_weight"]),
            neg_weight=None if d.get("neg_weight") is None else tuple(d["neg_weight"]),
        )


def parse_ratio(text: str | Sequence[int]) -> tuple[int, ...]:
    """Parse a colon-separated ratio such as ``"5:5:5:1"``."""
    if not isinstance(text, str):
        return tuple(int(x) for x in text)
    try:
        return tuple(int(part) for part in text.split(":"))
    except ValueError:
        raise ValueError(f"bad sampling ratio {text!r}; expected e.g. '5:5:5:1'") from None
