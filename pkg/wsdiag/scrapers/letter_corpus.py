import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from wsdiag.app.exceptions import CorpusFormatError
from wsdiag.app.schemas.schemas import Corpus, Letter

logger = logging.getLogger(__name__)

SEED_KEY = "_synthetic_seed"
REQUIRED_FIELDS = ("id", "text")


class LetterCorpusReader:
    """
    Reads discharge letters from a JSONL file, one letter object per line.
    """

    def load(self, path: Path) -> Corpus:
        path = Path(path)
        letters: List[Letter] = []
        seen: Dict[str, int] = {}
        seed: Optional[int] = None

        with path.open(encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                record = self._parse_line(line, line_number)

                if "id" not in record and SEED_KEY in record:
                    seed = int(record[SEED_KEY])
                    continue

                letter = self._to_letter(record, line_number)
                if letter.id in seen:
                    raise CorpusFormatError(
                        line_number,
                        f"duplicate id {letter.id!r} (first seen on line {seen[letter.id]})",
                    )
                seen[letter.id] = line_number
                letters.append(letter)

        provenance = "synthetic" if seed is not None else "ingested"
        logger.info("Loaded %d letters from %s (%s)", len(letters), path, provenance)
        return Corpus(letters=tuple(letters), provenance=provenance, seed=seed)

    def _parse_line(self, line: str, line_number: int) -> dict:
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(line_number, f"malformed JSON ({e.msg})") from e
        if not isinstance(record, dict):
            raise CorpusFormatError(line_number, "expected a JSON object")
        return record

    def _to_letter(self, record: dict, line_number: int) -> Letter:
        for field in REQUIRED_FIELDS:
            if field not in record:
                raise CorpusFormatError(line_number, f"missing field {field}")
        try:
            return Letter.model_validate(record)
        except ValidationError as e:
            first = e.errors()[0]
            location = ".".join(str(part) for part in first["loc"]) or "letter"
            raise CorpusFormatError(line_number, f"invalid {location}: {first['msg']}") from e


class LetterCorpusWriter:
    """
    Writes a corpus in the same JSONL layout the reader accepts.
    """

    def save(self, corpus: Corpus, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as handle:
            if corpus.provenance == "synthetic":
                handle.write(json.dumps({SEED_KEY: corpus.seed}) + "\n")
            for letter in corpus.letters:
                handle.write(json.dumps(self._to_record(letter), ensure_ascii=False) + "\n")
        return path

    def _to_record(self, letter: Letter) -> dict:
        record = {
            "id": letter.id,
            "hospital_id": letter.hospital_id,
            "lhu_id": letter.lhu_id,
            "date": letter.date.isoformat() if letter.date else None,
            "text": letter.text,
        }
        if letter.gold_label is not None:
            record["gold_label"] = letter.gold_label
        return record


def load_corpus(path: Path) -> Corpus:
    return LetterCorpusReader().load(path)


def save_corpus(corpus: Corpus, path: Path) -> Path:
    return LetterCorpusWriter().save(corpus, path)
