import pytest
from pydantic import ValidationError

from wsdiag.app.schemas.schemas import Corpus, DiagnosisString, ExtractionRules
from wsdiag.scrapers.diagnosis_scraper import (
    DiagnosisScraper,
    extract_all,
    extract_diagnosis,
    read_diagnoses_csv,
    string_id,
    trim_diagnosis,
    write_diagnoses_csv,
)
from wsdiag.scrapers.synthetic_letters import generate_synthetic


def test_section_on_next_line():
    text = "Gentile collega,\nDiagnosi:\n INSUFFICIENZA RESPIRATORIA IN BRONCOSPASMO\nDecorso Clinico: stabile"
    diag = extract_diagnosis(text)
    assert diag.raw == "INSUFFICIENZA RESPIRATORIA IN BRONCOSPASMO"
    start, end = diag.span
    assert text[start:end] == diag.raw


def test_no_section_is_absent():
    assert extract_diagnosis("Decorso clinico regolare.\nDimesso in buone condizioni.") is None


def test_longest_trigger_wins():
    diag = extract_diagnosis("Diagnosi testuale: virosi")
    assert diag.raw == "virosi"
    diag = extract_diagnosis("diagnosi di dimissione: otite media")
    assert diag.raw == "otite media"


def test_trigger_needs_word_boundary():
    assert extract_diagnosis("Diagnosis: flu\nDiagnostica per immagini negativa") is None


def test_first_section_wins():
    diag = extract_diagnosis("Diagnosi: febbre\nDiagnosi: otite")
    assert diag.raw == "febbre"


def test_empty_section_at_end():
    assert extract_diagnosis("Decorso regolare.\nDiagnosi:\n\n") is None


def test_trim_cuts_to_sentence_end():
    assert trim_diagnosis("broncospasmo in corso. a domicilio aerosol con broncovaleas") == "broncospasmo in corso."


def test_trim_identity():
    assert trim_diagnosis("febbre") == "febbre"


def test_trim_consumes_everything():
    assert trim_diagnosis("controllo dal curante") is None


def test_trim_keeps_text_after_punctuation():
    trimmed = trim_diagnosis("otite media; controllo tra 3 giorni; dx")
    assert trimmed == "otite media; dx"


def test_trim_pattern_removes_patient_id():
    assert trim_diagnosis("Paziente: (ID: 123) bronchiolite lieve") == "bronchiolite lieve"


def test_trim_is_idempotent():
    scraper = DiagnosisScraper()
    for raw in ["bronchiolite; consiglio riposo. febbre", "a domicilio a domicilio.", "otite   media"]:
        once = scraper.trim(raw)
        assert once is None or scraper.trim(once) == once


def test_trimmed_must_come_from_raw():
    with pytest.raises(ValidationError):
        DiagnosisString(raw="febbre", trimmed="otite", span=(0, 6))
    with pytest.raises(ValidationError):
        DiagnosisString(raw="febbre", span=(0, 5))


def test_custom_rules():
    rules = ExtractionRules(section_keywords=["Conclusione"], trim_keywords=["terapia"], trim_patterns=[])
    scraper = DiagnosisScraper(rules)
    raw, _ = scraper.extract("Conclusione: faringite, terapia con amoxicillina")
    assert raw == "faringite, terapia con amoxicillina"
    assert scraper.trim(raw) == "faringite,"


def test_extract_all_full_coverage(small_synthesis):
    corpus = generate_synthetic(small_synthesis, 4)
    result = extract_all(corpus)
    assert result.coverage == 1.0
    assert result.unique_strings < len(corpus)


def test_extract_all_half_coverage(make_letter):
    corpus = Corpus(letters=(
        make_letter("A", "Diagnosi: febbre"),
        make_letter("B", "Decorso regolare."),
    ))
    result = extract_all(corpus)
    assert result.coverage == 0.5
    assert result.trimmed("A") == "febbre"
    assert result.trimmed("B") is None


def test_extraction_runs_on_stripped_text(make_letter):
    letter = make_letter("A", "REGIONE VENETO\nDiagnosi: bronchiolite\nDecorso regolare.")
    result = extract_all(Corpus(letters=(letter,)))
    assert result.diagnoses["A"].span == (10, 22)


def test_string_id_is_stable():
    assert string_id("febbre") == string_id("febbre")
    assert string_id("febbre") != string_id("otite")
    assert string_id("febbre").startswith("s_")


def test_diagnoses_csv_round_trip(tmp_path, small_synthesis):
    corpus = generate_synthetic(small_synthesis, 8)
    result = extract_all(corpus)
    path = write_diagnoses_csv(result, tmp_path / "diagnoses.csv")
    reread = read_diagnoses_csv(path, len(corpus))
    assert reread.diagnoses == result.diagnoses
    assert reread.coverage == result.coverage
