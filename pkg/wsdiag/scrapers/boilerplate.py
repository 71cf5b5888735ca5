"""Header/footer stripping and pediatric-ward detection for discharge letters.

Markers identify letterhead and footer lines (hospital names, addresses,
signatures, cost notices). A marker matches when the line, ignoring leading
whitespace and case, starts with the marker phrase at a word boundary.
Start-only markers are honoured only while no content line has been kept yet.
"""
import re
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple


@dataclass(frozen=True)
class Marker:
    phrase: str
    start_only: bool = False


def _parse_markers(spec: Iterable[str]) -> Tuple[Marker, ...]:
    markers = []
    for entry in spec:
        start_only = entry.endswith("*")
        phrase = entry.rstrip("*").strip().lower()
        if phrase:
            markers.append(Marker(phrase=phrase, start_only=start_only))
    return tuple(markers)


# Trailing "*" flags a start-only marker.
DEFAULT_MARKERS: Tuple[Marker, ...] = _parse_markers([
    "regione", "azienda", "dipartimento*", "pronto soccorso pediatrico*",
    "u.o.c*", "uoc*", "operativa*", "accettazione*", "u.o*", "uo*", "uo.*",
    "u.l.s.s.*", "ulss*", "ospedale*", "presidio ospedaliero*", "via*",
    "punto di primo intervento", "pediatria*", "verbale*", "pag.", "pag",
    "pagina", "nato*", "tess.san", "codice fiscale", "comune di nascita", "cap",
    "indirizzo", "cartella dea", "documento firmato digitalmente",
    "informazione ai sensi", "il medico dimettente", "gentile signor",
    "copia di documento firmato e conservato", "desideriamo renderla partecipe",
    "modulo di pronto soccorso", "direttore*", "ai genitori", "al medico",
    "residente", "residenza", "nome", "cognome", "firma",
    "consegnare al proprio pediatra", "l'orario di alcune prestazioni",
    "verbale di pronto soccorso", "della cartella*", "modulo di",
    "numero di certificato", "firmatario", "il referto e' conservato",
    "id documento", "gentile signore", "informazione", "dettagli paziente",
    "verbale n", "priorita*", "tel", "fax", "domicilio", "segreteria",
    "data e ora",
])

PEDIATRIC_KEYWORDS: Tuple[str, ...] = (
    "pediatria", "pediatrico", "pediatrica", "pediatrici", "pediatriche",
)

HEADER_KEPT_LINES = 10


def _marker_matches(marker: Marker, content: str) -> bool:
    if not content.startswith(marker.phrase):
        return False
    rest = content[len(marker.phrase):]
    if not rest or not marker.phrase[-1].isalnum():
        return True
    return not rest[0].isalnum()


def _classify_lines(text: str, markers: Sequence[Marker]) -> List[Tuple[str, bool]]:
    """Pair every line with a flag telling whether it is boilerplate."""
    classified = []
    seen_content = False
    for line in text.split("\n"):
        content = line.strip().lower()
        if not content:
            classified.append((line, False))
            continue
        removed = any(
            _marker_matches(marker, content)
            for marker in markers
            if not (marker.start_only and seen_content)
        )
        if not removed:
            seen_content = True
        classified.append((line, removed))
    return classified


def strip_boilerplate(text: str, markers: Sequence[Marker] = DEFAULT_MARKERS) -> str:
    kept = [line for line, removed in _classify_lines(text, markers) if not removed]
    return "\n".join(kept)


def header_region(text: str, markers: Sequence[Marker] = DEFAULT_MARKERS) -> List[str]:
    """Every removed line plus the first kept content lines of the letter."""
    region = []
    kept_content = 0
    for line, removed in _classify_lines(text, markers):
        if removed:
            region.append(line)
        elif line.strip() and kept_content < HEADER_KEPT_LINES:
            region.append(line)
            kept_content += 1
    return region


_PEDIATRIC_RE = re.compile(
    r"\b(?:" + "|".join(PEDIATRIC_KEYWORDS) + r")\b", flags=re.IGNORECASE
)


def detect_pediatric(text: str, markers: Sequence[Marker] = DEFAULT_MARKERS) -> bool:
    return any(_PEDIATRIC_RE.search(line) for line in header_region(text, markers))
