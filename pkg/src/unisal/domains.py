"""Dataset domain descriptors.

A domain names one data source: static images or dynamic clips, the native
frame rate, and the resolution the model sees that source at.  Modules with
domain-private parameters key their parameter sets by the domain's registry
index, so registration order is part of the model contract.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class DomainId:
    index: int
    name: str
    modality: str
    native_fps: int
    input_resolution: tuple

    def __post_init__(self):
        if self.modality not in ("static", "dynamic"):
            raise ValueError(f"modality must be 'static' or 'dynamic', "
                             f"got {self.modality!r}")
        if self.modality == "static" and self.native_fps != 0:
            raise ValueError("static domains have no frame rate; use 0")
        if self.modality == "dynamic" and self.native_fps <= 0:
            raise ValueError("dynamic domains need a positive native_fps")
        h, w = self.input_resolution
        if h <= 0 or w <= 0:
            raise ValueError(f"bad input resolution {self.input_resolution}")

    @property
    def dynamic(self) -> bool:
        return self.modality == "dynamic"


class DomainRegistry:
    """Ordered domain collection; index by position or name."""

    def __init__(self):
        self._domains = []
        self._by_name = {}

    def register(self, name, modality, input_resolution, native_fps=0):
        if name in self._by_name:
            raise ValueError(f"domain {name!r} is already registered")
        dom = DomainId(index=len(self._domains), name=name, modality=modality,
                       native_fps=native_fps,
                       input_resolution=(int(input_resolution[0]),
                                         int(input_resolution[1])))
        self._domains.append(dom)
        self._by_name[name] = dom
        return dom

    def __len__(self):
        return len(self._domains)

    def __iter__(self):
        return iter(self._domains)

    def __getitem__(self, key):
        if isinstance(key, str):
            if key not in self._by_name:
                raise KeyError(f"unknown domain {key!r}; "
                               f"registered: {sorted(self._by_name)}")
            return self._by_name[key]
        return self._domains[key]

    def __contains__(self, name):
        return name in self._by_name

    @property
    def names(self):
        return [d.name for d in self._domains]

    def to_list(self):
        """JSON-friendly echo used by the checkpoint manifest."""
        return [[d.name, d.modality, d.native_fps, list(d.input_resolution)]
                for d in self._domains]

    @classmethod
    def from_list(cls, rows):
        reg = cls()
        for name, modality, fps, res in rows:
            reg.register(name, modality, res, native_fps=fps)
        return reg
