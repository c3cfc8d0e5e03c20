"""Protobyte and service-port tokens, and the training vocabulary."""
from __future__ import annotations

import os
from typing import Iterable, Iterator, Union

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<PAD>", "<UNK>"

PORT_CAP = 10000
FEATURES = ("protobytes", "ports")

PROTOCOL_NAMES = {6: "TCP", 17: "UDP"}
_NAME_TO_NUMBER = {v: k for k, v in PROTOCOL_NAMES.items()}


def protocol_name(protocol: Union[int, str]) -> str:
    if isinstance(protocol, str):
        name = protocol.strip().upper()
        if name in _NAME_TO_NUMBER or (name.startswith("P") and name[1:].isdigit()):
            return name
        protocol = int(name)
    return PROTOCOL_NAMES.get(protocol, f"P{protocol}")


def byte_bucket(byte_count: int) -> int:
    """floor(log2(bytes)), with 0 and 1 byte both landing in bucket 0."""
    if byte_count < 0:
        raise ValueError("byte_count must be non-negative")
    # bit_length is exact where math.log2 rounds for large ints
    return max(int(byte_count).bit_length() - 1, 0)


def protobyte_token(protocol: Union[int, str], byte_count: int) -> str:
    return f"{protocol_name(protocol)}:{byte_bucket(byte_count):02d}"


def service_port(src_port: int, dst_port: int) -> int:
    return min(min(src_port, PORT_CAP), min(dst_port, PORT_CAP))


def token_for(record, feature: str) -> str:
    if feature == "protobytes":
        return protobyte_token(record.protocol, record.byte_count)
    if feature == "ports":
        return str(service_port(record.src_port, record.dst_port))
    raise ValueError(f"unknown feature {feature!r}; expected one of {FEATURES}")


class Vocabulary:
    """Token string <-> index map with PAD=0 and UNK=1 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.index_to_token: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.token_to_index: dict[str, int] = {}
        for tok in tokens:
            if tok in (PAD_TOKEN, UNK_TOKEN):
                raise ValueError(f"{tok!r} is reserved")
            if tok not in self.token_to_index:
                self.token_to_index[tok] = len(self.index_to_token)
                self.index_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def __iter__(self) -> Iterator[str]:
        return iter(self.index_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.index_to_token == other.index_to_token

    def encode(self, token: str) -> int:
        return self.token_to_index.get(token, UNK)

    def decode(self, index: int) -> str:
        return self.index_to_token[index]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.index_to_token):
                fh.write(f"{i}\t{tok}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split("\t", 1) for line in fh if line.strip()]
        if [int(i) for i, _ in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: indices are not contiguous from 0")
        if len(rows) < 2 or rows[PAD][1] != PAD_TOKEN or rows[UNK][1] != UNK_TOKEN:
            raise ValueError(f"{path}: reserved PAD/UNK entries missing")
        return cls(tok for _, tok in rows[2:])


def build_vocab(tokens: Iterable[str]) -> Vocabulary:
    vocab = Vocabulary(tokens)
    if len(vocab) == 2:
        raise ValueError("cannot build a vocabulary from an empty token stream")
    return vocab


def encode(token: str, vocab: Vocabulary) -> int:
    return vocab.encode(token)
