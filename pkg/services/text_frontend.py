# services/text_frontend.py
import hashlib
import json
import logging
import re
import string
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .error_handler import ArtifactIOError, TokenizationError

logger = logging.getLogger(__name__)

PAD = '<pad>'
BLANK = '<blank>'

ARPABET = (
    'AA', 'AE', 'AH', 'AO', 'AW', 'AY', 'B', 'CH', 'D', 'DH', 'EH', 'ER', 'EY', 'F', 'G',
    'HH', 'IH', 'IY', 'JH', 'K', 'L', 'M', 'N', 'NG', 'OW', 'OY', 'P', 'R', 'S', 'SH',
    'T', 'TH', 'UH', 'UW', 'V', 'W', 'Y', 'Z', 'ZH',
)
GRAPHEMES = tuple(string.ascii_lowercase) + ("'",)

# Dropped silently during normalization
_DROPPED = re.compile(r'[,.!?;:"“”]')
_STRESS = re.compile(r'\d')


class SymbolInventory:
    """Ordered, immutable symbol list; index 0 is PAD and index 1 is BLANK"""

    def __init__(self, symbols: Sequence[str]):
        symbols = tuple(symbols)
        if len(symbols) < 2 or symbols[0] != PAD or symbols[1] != BLANK:
            raise TokenizationError(f"Inventory must start with {PAD}, {BLANK}")
        duplicates = sorted({s for s in symbols if symbols.count(s) > 1})
        if duplicates:
            raise TokenizationError("Duplicate symbols in inventory", offenders=duplicates)

        self._symbols = symbols
        self._index = {symbol: i for i, symbol in enumerate(symbols)}

    @classmethod
    def default(cls) -> 'SymbolInventory':
        return cls((PAD, BLANK) + ARPABET + GRAPHEMES)

    @property
    def symbols(self) -> tuple:
        return self._symbols

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def blank_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self._symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, SymbolInventory) and self._symbols == other._symbols

    def encode(self, names: Sequence[str]) -> np.ndarray:
        unknown = [name for name in names if name not in self._index]
        if unknown:
            raise TokenizationError(f"Symbols not in inventory: {sorted(set(unknown))}", offenders=unknown)
        return np.asarray([self._index[name] for name in names], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> List[str]:
        ids = [int(i) for i in ids]
        invalid = [i for i in ids if not 0 <= i < len(self._symbols)]
        if invalid:
            raise TokenizationError(f"Symbol ids out of range [0, {len(self._symbols)})",
                                    offenders=[str(i) for i in invalid])
        return [self._symbols[i] for i in ids]

    def to_json(self) -> str:
        return json.dumps(list(self._symbols))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode('utf-8')).hexdigest()

    def save(self, path: str) -> None:
        try:
            with open(path, 'w', encoding='utf-8') as file:
                file.write(self.to_json())
        except OSError as e:
            raise ArtifactIOError(f"Failed to write inventory {path}: {e}", path=path) from e

    @classmethod
    def load(cls, path: str) -> 'SymbolInventory':
        try:
            with open(path, 'r', encoding='utf-8') as file:
                return cls(json.load(file))
        except OSError as e:
            raise ArtifactIOError(f"Failed to read inventory {path}: {e}", path=path) from e


@dataclass(frozen=True)
class PhonemeSequence:
    ids: np.ndarray
    source_text: str

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def load_lexicon(path: str) -> Dict[str, List[str]]:
    """Read a CMUdict-style pronunciation file; stress digits are stripped and alternates ignored"""
    lexicon: Dict[str, List[str]] = {}
    try:
        with open(path, 'r', encoding='utf-8', errors='replace') as file:
            for line in file:
                line = line.strip()
                if not line or line.startswith(';;;'):
                    continue
                word, *phonemes = line.split()
                if word.endswith(')') and '(' in word:
                    continue
                if phonemes and word.upper() not in lexicon:
                    lexicon[word.upper()] = [_STRESS.sub('', p) for p in phonemes]
    except OSError as e:
        raise ArtifactIOError(f"Failed to read lexicon {path}: {e}", path=path) from e

    logger.info(f"Loaded {len(lexicon)} lexicon entries from {path}")
    return lexicon


def normalize_text(text: str) -> List[str]:
    """Lowercase, drop punctuation and split on whitespace"""
    return _DROPPED.sub(' ', text.lower()).split()


def tokenize(text: str, lexicon: Optional[Dict[str, Sequence[str]]] = None,
             inventory: Optional[SymbolInventory] = None) -> PhonemeSequence:
    """Lexicon phonemes where available, lowercase graphemes otherwise; BLANK first and after every word"""
    inventory = inventory or SymbolInventory.default()
    lookup = {word.upper(): list(phonemes) for word, phonemes in (lexicon or {}).items()}

    words = normalize_text(text)
    if not words:
        raise TokenizationError(f"Text is empty after normalization: {text!r}")

    names = [BLANK]
    offenders = []
    for word in words:
        pronunciation = lookup.get(word.upper())
        units = [_STRESS.sub('', p) for p in pronunciation] if pronunciation else list(word)
        offenders.extend(unit for unit in units if unit not in inventory)
        names.extend(units)
        names.append(BLANK)

    if offenders:
        raise TokenizationError(f"Characters outside the symbol inventory: {sorted(set(offenders))}",
                                offenders=offenders)

    return PhonemeSequence(inventory.encode(names), text)


def detokenize(ids: Sequence[int], inventory: Optional[SymbolInventory] = None) -> str:
    inventory = inventory or SymbolInventory.default()
    return ' '.join(inventory.decode(ids))
