# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Chemical formula parsing for flat SuperCon-style compositions.

Grammar: a sequence of `SYMBOL[NUMBER]` tokens, e.g. "Ca0.4Ba1.25La1.25Cu3O6.98".
SYMBOL is an uppercase letter optionally followed by one lowercase letter,
NUMBER an optional nonnegative decimal (default 1). Parentheses, hydrate dots,
charges and exponents are not part of the grammar. Repeated symbols are summed.

    >>> parse_formula("Mo4Re2Si").as_dict()
    {'Mo': 4.0, 'Re': 2.0, 'Si': 1.0}
"""
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from shared.errors import DataError

# Index i holds the element with atomic number i + 1.
ELEMENT_SYMBOLS = (
    'H', 'He', 'Li', 'Be', 'B', 'C', 'N', 'O', 'F', 'Ne',
    'Na', 'Mg', 'Al', 'Si', 'P', 'S', 'Cl', 'Ar', 'K', 'Ca',
    'Sc', 'Ti', 'V', 'Cr', 'Mn', 'Fe', 'Co', 'Ni', 'Cu', 'Zn',
    'Ga', 'Ge', 'As', 'Se', 'Br', 'Kr', 'Rb', 'Sr', 'Y', 'Zr',
    'Nb', 'Mo', 'Tc', 'Ru', 'Rh', 'Pd', 'Ag', 'Cd', 'In', 'Sn',
    'Sb', 'Te', 'I', 'Xe', 'Cs', 'Ba', 'La', 'Ce', 'Pr', 'Nd',
    'Pm', 'Sm', 'Eu', 'Gd', 'Tb', 'Dy', 'Ho', 'Er', 'Tm', 'Yb',
    'Lu', 'Hf', 'Ta', 'W', 'Re', 'Os', 'Ir', 'Pt', 'Au', 'Hg',
    'Tl', 'Pb', 'Bi', 'Po', 'At', 'Rn', 'Fr', 'Ra', 'Ac', 'Th',
    'Pa', 'U', 'Np', 'Pu', 'Am', 'Cm', 'Bk', 'Cf', 'Es', 'Fm',
    'Md', 'No', 'Lr', 'Rf', 'Db', 'Sg', 'Bh', 'Hs', 'Mt', 'Ds',
    'Rg', 'Cn', 'Nh', 'Fl', 'Mc', 'Lv', 'Ts', 'Og',
)
ATOMIC_NUMBERS = {symbol: z for z, symbol in enumerate(ELEMENT_SYMBOLS, start=1)}

SYMBOL_RE = re.compile(r'[A-Z][a-z]?')
NUMBER_RE = re.compile(r'[0-9.]+')
VALID_NUMBER_RE = re.compile(r'[0-9]+(?:\.[0-9]*)?|\.[0-9]+')


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class FormulaError(DataError):
    """Base for parse failures; `offset` is a byte offset into the input"""

    category = 'formula_error'

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class EmptyFormula(FormulaError):
    category = 'empty_formula'

    def __init__(self):
        super().__init__("Empty formula", 0)


class UnknownElement(FormulaError):
    category = 'unknown_element'

    def __init__(self, symbol: str, offset: int):
        super().__init__(f"Unknown element symbol {symbol!r}", offset)
        self.symbol = symbol


class MalformedNumber(FormulaError):
    category = 'malformed_number'

    def __init__(self, text: str, offset: int):
        super().__init__(f"Malformed amount {text!r}", offset)
        self.text = text


class ZeroAmount(FormulaError):
    category = 'zero_amount'

    def __init__(self, symbol: str, offset: int):
        super().__init__(f"Zero amount for {symbol}", offset)
        self.symbol = symbol


class UnexpectedCharacter(FormulaError):
    category = 'unexpected_character'

    def __init__(self, char: str, offset: int):
        super().__init__(f"Unexpected character {char!r}", offset)
        self.char = char


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Element:
    atomic_number: int
    symbol: str

    @classmethod
    def from_symbol(cls, symbol: str) -> 'Element':
        return cls(ATOMIC_NUMBERS[symbol], symbol)


class Composition:
    """Element -> stoichiometric amount, in first-appearance order.

    Equality compares the mapping, not the order, so a formula and its
    canonical rendering compare equal.
    """

    def __init__(self, entries: Iterable[Tuple[Element, float]]):
        merged: Dict[Element, float] = {}
        for element, amount in entries:
            merged[element] = merged.get(element, 0.0) + float(amount)
        if not merged:
            raise ValueError("Composition needs at least one element")
        for element, amount in merged.items():
            if not amount > 0:
                raise ValueError(f"Amount for {element.symbol} must be positive, got {amount}")
        self._entries = tuple(merged.items())

    @property
    def entries(self) -> Tuple[Tuple[Element, float], ...]:
        return self._entries

    @property
    def total(self) -> float:
        return float(sum(amount for _, amount in self._entries))

    def as_dict(self) -> Dict[str, float]:
        return {element.symbol: amount for element, amount in self._entries}

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Composition):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __hash__(self) -> int:
        return hash(frozenset(self.as_dict().items()))

    def __repr__(self) -> str:
        return f"Composition({format_composition(self)!r})"


# ---------------------------------------------------------------------------
# Parsing / formatting
# ---------------------------------------------------------------------------

def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode('utf-8'))


def parse_formula(text: str) -> Composition:
    """Parse a flat formula into a Composition, merging repeated elements."""
    if not text:
        raise EmptyFormula()

    tokens: List[Tuple[Element, float]] = []
    i = 0
    while i < len(text):
        match = SYMBOL_RE.match(text, i)
        if match is None:
            raise UnexpectedCharacter(text[i], _byte_offset(text, i))
        symbol = match.group()
        if symbol not in ATOMIC_NUMBERS:
            raise UnknownElement(symbol, _byte_offset(text, i))
        symbol_offset = i
        i = match.end()

        amount = 1.0
        number = NUMBER_RE.match(text, i)
        if number is not None:
            if not VALID_NUMBER_RE.fullmatch(number.group()):
                raise MalformedNumber(number.group(), _byte_offset(text, i))
            amount = float(number.group())
            if amount == 0:
                raise ZeroAmount(symbol, _byte_offset(text, symbol_offset))
            i = number.end()
        tokens.append((Element.from_symbol(symbol), amount))

    return Composition(tokens)


def format_amount(amount: float) -> str:
    """Shortest positional rendering: 3.0 -> '3', 1e-05 -> '0.00001'"""
    return np.format_float_positional(amount, trim='-')


def format_composition(composition: Composition) -> str:
    """Canonical formula: elements by atomic number, coefficient 1 omitted."""
    parts = []
    for element, amount in sorted(composition.entries, key=lambda e: e[0].atomic_number):
        parts.append(element.symbol if amount == 1 else f"{element.symbol}{format_amount(amount)}")
    return ''.join(parts)


class InvalidFormulas(DataError):
    """Several formulas failed; `failures` pairs each input with its error"""

    category = 'formula_error'

    def __init__(self, failures: List[Tuple[str, FormulaError]]):
        lines = [f"{text!r}: {error}" for text, error in failures]
        super().__init__(f"{len(failures)} formula(s) failed to parse\n" + '\n'.join(lines))
        self.failures = failures


def parse_formulas(texts: Sequence[str]) -> List[Composition]:
    """Parse every formula, reporting all failures at once."""
    compositions, failures = [], []
    for text in texts:
        try:
            compositions.append(parse_formula(text))
        except FormulaError as e:
            failures.append((text, e))
    if failures:
        raise InvalidFormulas(failures)
    return compositions
