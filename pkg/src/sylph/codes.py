"""Class codes and the codebook registry.

A class code is the full set of classifier parameters for one class: a weight
vector (read as a 1xCx1x1 kernel) and a bias scalar. The codebook maps class
id -> code in insertion order; inserting never mutates existing entries, which
is what makes enrollment interference-free.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import checkpoint

Tensor = torch.Tensor


@dataclass
class ClassCode:
    weight: Tensor  # [C]
    bias: Tensor    # scalar
    provenance: str = "hypernet"  # "hypernet" | "pretrained"

    def detached(self) -> "ClassCode":
        return ClassCode(self.weight.detach().clone(), self.bias.detach().clone(),
                         self.provenance)


@dataclass
class CodeBook:
    _codes: dict[int, ClassCode] = field(default_factory=dict)

    def add(self, class_id: int, code: ClassCode, overwrite: bool = False) -> None:
        if class_id in self._codes and not overwrite:
            raise ValueError(f"class {class_id} already enrolled")
        self._codes[int(class_id)] = code

    def get(self, class_id: int) -> ClassCode:
        return self._codes[int(class_id)]

    def __contains__(self, class_id: int) -> bool:
        return int(class_id) in self._codes

    def __len__(self) -> int:
        return len(self._codes)

    @property
    def class_ids(self) -> list[int]:
        return list(self._codes)

    def subset(self, class_ids) -> "CodeBook":
        sub = CodeBook()
        for cid in class_ids:
            sub.add(cid, self._codes[int(cid)])
        return sub

    def weight_matrix(self) -> Tensor:
        """Stacked weights [n, C] in insertion order; keeps autograd edges."""
        return torch.stack([c.weight for c in self._codes.values()])

    def bias_vector(self) -> Tensor:
        return torch.stack([c.bias.reshape(()) for c in self._codes.values()])

    def save(self, path: str | Path) -> None:
        """Container with codes.<id>.weight|bias plus a provenance sidecar."""
        path = Path(path)
        tensors = {}
        prov = {}
        for cid, code in self._codes.items():
            tensors[f"codes.{cid}.weight"] = code.weight
            tensors[f"codes.{cid}.bias"] = code.bias.reshape(1)
            prov[str(cid)] = code.provenance
        checkpoint.save_checkpoint(path, tensors)
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps({"provenance": prov, "order": list(self._codes)}))

    @classmethod
    def load(cls, path: str | Path) -> "CodeBook":
        path = Path(path)
        tensors = checkpoint.load_checkpoint(path)
        sidecar = path.with_suffix(path.suffix + ".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        prov = meta.get("provenance", {})
        order = meta.get("order")
        if order is None:
            order = sorted({int(k.split(".")[1]) for k in tensors if k.startswith("codes.")})
        book = cls()
        for cid in order:
            w = tensors[f"codes.{cid}.weight"]
            b = tensors[f"codes.{cid}.bias"].reshape(())
            book.add(cid, ClassCode(w, b, prov.get(str(cid), "hypernet")))
        return book
