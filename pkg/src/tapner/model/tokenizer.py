"""Self-contained tokenizer built from the corpus itself.

Default granularity is whitespace word pieces (lowercased); a byte/character
granularity is available for corpora without useful whitespace structure.
Ids 0..2 are reserved for PAD, UNK and BOS.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"
SPECIALS = (PAD, UNK, BOS)


class Vocab:
    def __init__(self, pieces: list[str], granularity: str = "word"):
        if granularity not in ("word", "byte"):
            raise ValueError(f"unknown granularity {granularity!r}")
        self.granularity = granularity
        self.id_to_piece = list(SPECIALS) + list(pieces)
        if len(set(self.id_to_piece)) != len(self.id_to_piece):
            raise ValueError("duplicate pieces in vocabulary")
        self.piece_to_id = {p: i for i, p in enumerate(self.id_to_piece)}

    # -- construction -------------------------------------------------------

    @staticmethod
    def split(text: str, granularity: str = "word") -> list[str]:
        if granularity == "word":
            return text.lower().split()
        return [chr(b) for b in text.lower().encode("utf-8")]

    @classmethod
    def build(cls, texts: list[str], granularity: str = "word") -> "Vocab":
        pieces = set()
        for t in texts:
            pieces.update(cls.split(t, granularity))
        return cls(sorted(pieces), granularity)

    # -- encoding -----------------------------------------------------------

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.id_to_piece)

    def encode_pieces(self, pieces: list[str]) -> list[int]:
        unk = self.unk_id
        return [self.piece_to_id.get(p.lower(), unk) for p in pieces]

    def encode(self, text: str) -> list[int]:
        return self.encode_pieces(self.split(text, self.granularity))

    def piece(self, token_id: int) -> str:
        return self.id_to_piece[token_id]

    def decode(self, ids: list[int]) -> str:
        sep = " " if self.granularity == "word" else ""
        return sep.join(self.id_to_piece[i] for i in ids)

    # -- persistence --------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "granularity": self.granularity,
            "pieces": self.id_to_piece[len(SPECIALS):],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Vocab":
        return cls(data["pieces"], data["granularity"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=0))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
