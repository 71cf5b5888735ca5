import hashlib
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd

from wsdiag.app.schemas.schemas import (
    Corpus,
    DiagnosisString,
    ExtractionResult,
    ExtractionRules,
)
from wsdiag.scrapers.boilerplate import strip_boilerplate

logger = logging.getLogger(__name__)

DIAGNOSES_COLUMNS = ["letter_id", "string_id", "span_start", "span_end", "raw", "trimmed"]

_WS_RUN_RE = re.compile(r"(\s)\s+")
_MAJOR_PUNCT_RE = re.compile(r"[.;]")


def _phrase_pattern(phrase: str) -> str:
    return r"\s+".join(re.escape(part) for part in phrase.split())


def string_id(trimmed: str) -> str:
    """Stable id of a unique trimmed diagnosis string."""
    return "s_" + hashlib.sha1(trimmed.encode("utf-8")).hexdigest()[:10]


class DiagnosisScraper:
    """
    Locates the "Diagnosi" section of a stripped letter and cleans the sentence found there.
    """

    def __init__(self, rules: Optional[ExtractionRules] = None):
        self.rules = rules or ExtractionRules()
        triggers = "|".join(_phrase_pattern(t) for t in self.rules.ordered_triggers)
        self._section_re = re.compile(
            r"^[ \t]*(?:" + triggers + r")(?![^\W_])[ \t]*:?[ \t]*", re.IGNORECASE
        )
        keywords = sorted(self.rules.trim_keywords, key=len, reverse=True)
        self._trim_re = re.compile(
            r"\b(?:" + "|".join(_phrase_pattern(k) for k in keywords) + r")\b", re.IGNORECASE
        ) if keywords else None
        self._pattern_res = [re.compile(p, re.IGNORECASE) for p in self.rules.trim_patterns]

    def extract(self, text: str) -> Optional[Tuple[str, Tuple[int, int]]]:
        lines = self._lines_with_offsets(text)
        for index, (offset, line) in enumerate(lines):
            match = self._section_re.match(line)
            if match is None:
                continue
            remainder = line[match.end():].rstrip()
            if remainder.strip():
                start = offset + match.end()
                return remainder, (start, start + len(remainder))
            for next_offset, next_line in lines[index + 1:]:
                if next_line.strip():
                    lead = len(next_line) - len(next_line.lstrip())
                    raw = next_line.strip()
                    start = next_offset + lead
                    return raw, (start, start + len(raw))
            # Empty section at the end of the letter.
            return None
        return None

    def trim(self, raw: str) -> Optional[str]:
        current = raw
        while True:
            trimmed = self._trim_once(current)
            if trimmed == current:
                break
            current = trimmed
        current = _WS_RUN_RE.sub(r"\1", current).strip()
        return current or None

    def _trim_once(self, text: str) -> str:
        for pattern in self._pattern_res:
            text = pattern.sub("", text)
        if self._trim_re is None:
            return text
        match = self._trim_re.search(text)
        while match is not None:
            stop = _MAJOR_PUNCT_RE.search(text, match.end())
            end = stop.end() if stop else len(text)
            text = text[:match.start()] + text[end:]
            match = self._trim_re.search(text)
        return text

    def extract_all(self, corpus: Corpus) -> ExtractionResult:
        diagnoses: Dict[str, DiagnosisString] = {}
        for letter in corpus.letters:
            stripped = strip_boilerplate(letter.text)
            found = self.extract(stripped)
            if found is None:
                continue
            raw, span = found
            diagnoses[letter.id] = DiagnosisString(
                letter_id=letter.id, raw=raw, trimmed=self.trim(raw), span=span
            )
        return build_result(diagnoses, len(corpus))

    @staticmethod
    def _lines_with_offsets(text: str) -> List[Tuple[int, str]]:
        lines = []
        offset = 0
        for line in text.split("\n"):
            lines.append((offset, line))
            offset += len(line) + 1
        return lines


def build_result(diagnoses: Dict[str, DiagnosisString], n_letters: int) -> ExtractionResult:
    trimmed = [d.trimmed for d in diagnoses.values() if d.trimmed is not None]
    coverage = len(trimmed) / n_letters if n_letters else 0.0
    result = ExtractionResult(
        diagnoses=diagnoses,
        coverage=coverage,
        unique_strings=len(set(trimmed)),
        n_letters=n_letters,
    )
    logger.info(
        "Extracted %d diagnosis strings (%d unique) from %d letters, coverage %.3f",
        len(trimmed), result.unique_strings, n_letters, coverage,
    )
    return result


def extract_diagnosis(text: str, rules: Optional[ExtractionRules] = None) -> Optional[DiagnosisString]:
    found = DiagnosisScraper(rules).extract(text)
    if found is None:
        return None
    raw, span = found
    return DiagnosisString(raw=raw, span=span)


def trim_diagnosis(raw: str, rules: Optional[ExtractionRules] = None) -> Optional[str]:
    return DiagnosisScraper(rules).trim(raw)


def extract_all(corpus: Corpus, rules: Optional[ExtractionRules] = None) -> ExtractionResult:
    return DiagnosisScraper(rules).extract_all(corpus)


def write_diagnoses_csv(result: ExtractionResult, path: Path) -> Path:
    rows = [
        {
            "letter_id": d.letter_id,
            "string_id": string_id(d.trimmed) if d.trimmed else "",
            "span_start": d.span[0],
            "span_end": d.span[1],
            "raw": d.raw,
            "trimmed": d.trimmed or "",
        }
        for d in result.diagnoses.values()
    ]
    pd.DataFrame(rows, columns=DIAGNOSES_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return Path(path)


def read_diagnoses_csv(path: Path, n_letters: int) -> ExtractionResult:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    diagnoses = {}
    for row in frame.itertuples(index=False):
        diagnoses[row.letter_id] = DiagnosisString(
            letter_id=row.letter_id,
            raw=row.raw,
            trimmed=row.trimmed or None,
            span=(int(row.span_start), int(row.span_end)),
        )
    return build_result(diagnoses, n_letters)
