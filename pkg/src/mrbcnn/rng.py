"""Named, splittable random streams on top of numpy's Philox generator.

Every stochastic operation in the package takes an explicit :class:`Stream`.
A stream is identified by a root seed and a path of names; child streams are
derived by hashing, so adding a new consumer never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    text = f"{int(seed)}::" + "/".join(path)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class Stream:
    """A counter-based random stream addressed by ``(seed, path)``."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._bitgen = np.random.Philox(key=_derive_key(self.seed, self.path))
        self.gen = np.random.Generator(self._bitgen)

    def split(self, *names: object) -> Stream:
        return Stream(self.seed, self.path + tuple(str(n) for n in names))

    @property
    def name(self) -> str:
        return "/".join(self.path) or "<root>"

    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }

    @classmethod
    def from_state(cls, state: dict) -> Stream:
        s = cls(state["seed"], tuple(state["path"]))
        s.set_state(state)
        return s

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={self.name!r})"
