import re
from pathlib import Path
from typing import List, Optional, Sequence

from wsdiag.app.exceptions import ParameterError
from wsdiag.app.schemas.schemas import AbbreviationTable

# Anything that is not a (possibly accented) letter becomes a separator.
_NON_WORD_RE = re.compile(r"[^a-zà-öø-ÿ\s]")


class TextNormalizer:
    """
    Turns diagnosis strings and letter bodies into lowercase word tokens.
    """

    def __init__(self, abbreviations: Optional[AbbreviationTable] = None):
        self.abbreviations = abbreviations or AbbreviationTable()

    def normalize(self, text: str) -> List[str]:
        tokens = []
        for token in self._split(text):
            expansion = self.abbreviations.entries.get(token)
            tokens.extend(expansion.split() if expansion else [token])
        return tokens

    def tokenize_letter(self, text: str, max_tokens: int) -> List[str]:
        if max_tokens < 1:
            raise ParameterError("max_tokens must be at least 1")
        return self._split(text)[:max_tokens]

    def tokenize(self, text: str) -> List[str]:
        """Normalized tokens without abbreviation expansion or truncation."""
        return self._split(text)

    def _split(self, text: str) -> List[str]:
        return _NON_WORD_RE.sub(" ", text.lower()).split()


def normalize(text: str, abbr: Optional[AbbreviationTable] = None) -> List[str]:
    return TextNormalizer(abbr).normalize(text)


def tokenize_letter(text: str, max_tokens: int = 512) -> List[str]:
    return TextNormalizer().tokenize_letter(text, max_tokens)


def token_string(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def load_abbreviations(path: Optional[Path] = None) -> AbbreviationTable:
    return AbbreviationTable.from_file(path)
