"""Synthetic discharge-letter generator for desk-scale runs.

Letters follow the usual Italian ER layout: an institutional header, a
greeting, an optional "Diagnosi" section, the clinical course, discharge
advice and a signature footer. Gold labels are planted at generation time.
"""
import datetime as dt
import logging
import math
from typing import List, Sequence

import numpy as np

from wsdiag.app.schemas.schemas import Corpus, Letter, SynthesisConfig

logger = logging.getLogger(__name__)

SECTION_TRIGGERS = ("Diagnosi", "Diagnosi di dimissione", "Diagnosi testuale")

COURSE_SENTENCES = {
    "bronchiolite": [
        "Lattante con rinite e tosse da due giorni, comparsa di rientramenti al giugulo.",
        "All'auscultazione crepitii fini diffusi e sibili espiratori bilaterali.",
        "Saturazione in aria ambiente 93%, lieve alitamento delle pinne nasali.",
        "Eseguiti lavaggi nasali e aspirazione delle secrezioni con beneficio.",
        "Alimentazione frazionata per ridotta assunzione al seno.",
        "Quadro clinico compatibile con {target}.",
    ],
    "broncospasmo": [
        "Tosse stizzosa e dispnea espiratoria insorte nella notte.",
        "Sibili espiratori diffusi, espirio prolungato.",
        "Eseguito aerosol con salbutamolo e ipratropio con netto miglioramento.",
        "Somministrato betametasone per os.",
    ],
    "otite": [
        "Otalgia intensa insorta nella notte.",
        "All'otoscopia membrana timpanica iperemica ed estroflessa.",
        "Iniziata terapia antibiotica con amoxicillina.",
    ],
    "gastroenterite": [
        "Vomito ripetuto e scariche diarroiche liquide da ieri.",
        "Mucose asciutte, addome trattabile, peristalsi vivace.",
        "Eseguita reidratazione orale con buona tolleranza.",
    ],
    "trauma cranico": [
        "Caduta accidentale con impatto al capo, non perdita di coscienza.",
        "Obiettivita' neurologica nella norma, pupille isocoriche e isocicliche.",
        "Osservazione clinica di sei ore senza eventi.",
    ],
    "febbre": [
        "Iperpiressia fino a 39,5 gradi con discreta risposta all'antipiretico.",
        "Esami ematici con indici di flogosi nella norma.",
        "Esame urine negativo.",
    ],
    "faringotonsillite": [
        "Odinofagia e iperpiressia, tonsille ipertrofiche con essudato.",
        "Tampone faringeo rapido eseguito.",
        "Adenopatia laterocervicale dolente.",
    ],
    "dolore addominale": [
        "Dolore addominale crampiforme senza vomito.",
        "Addome trattabile, Blumberg negativo.",
        "Ecografia addome senza reperti patologici.",
    ],
    "polmonite": [
        "Tosse produttiva e iperpiressia da quattro giorni.",
        "Ipofonesi e rantoli a destra, radiografia del torace con addensamento.",
        "Iniziata terapia antibiotica endovena.",
    ],
}

GENERIC_COURSE = [
    "Condizioni generali discrete all'ingresso.",
    "Parametri vitali nella norma durante la permanenza.",
    "Si osserva progressivo miglioramento clinico.",
    "Eseguita visita e valutazione clinica completa.",
]

FILLER_SENTENCES = [
    "Genitori informati sulle condizioni cliniche.",
    "Non allergie note a farmaci.",
    "Vaccinazioni eseguite secondo calendario.",
    "Accrescimento staturo-ponderale regolare.",
    "Non patologie di rilievo in anamnesi.",
    "Riferito buon appetito nei giorni precedenti.",
]

# Body mentions of the target disease in letters that do not have it.
CONFOUNDERS = [
    "Non segni clinici di {target}.",
    "Esclusa {target} all'auscultazione.",
    "Riferita familiarita' per {target} nel fratello maggiore.",
]

ICD_PREFIXES = ["466.19", "466.11", "519.11", "079.6"]

TRAILING_CLAUSES = [
    ". A domicilio aerosol con soluzione fisiologica",
    "; controllo dal curante tra 48 ore",
    ". Consiglio idratazione frequente",
]

HOSPITAL_SUFFIX = ["NORD", "SUD", "EST", "OVEST", "CENTRO"]


def _zipf_weights(n: int) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1)
    return weights / weights.sum()


class SyntheticLetterGenerator:
    """
    Builds a reproducible corpus of discharge letters from a SynthesisConfig.
    """

    def __init__(self, config: SynthesisConfig):
        self.config = config
        self.target = config.target_disease
        self.distractors = config.distractors

    def generate(self, seed: int) -> Corpus:
        cfg = self.config
        rng = np.random.default_rng(seed)
        n_positive = math.floor(cfg.target_prevalence * cfg.n_letters + 0.5)
        positive_ids = set(rng.choice(cfg.n_letters, size=n_positive, replace=False).tolist())

        letters = [
            self._letter(index, index in positive_ids, rng)
            for index in range(cfg.n_letters)
        ]
        logger.info(
            "Generated %d synthetic letters (%d planted %s), seed %d",
            len(letters), n_positive, self.target, seed,
        )
        return Corpus(letters=tuple(letters), provenance="synthetic", seed=seed)

    def _letter(self, index: int, positive: bool, rng: np.random.Generator) -> Letter:
        cfg = self.config
        hospital = int(rng.integers(cfg.n_hospitals))
        lhu = hospital % cfg.n_lhus
        pediatric = bool(rng.random() < cfg.pediatric_fraction)
        date = cfg.start_date + dt.timedelta(days=int(rng.integers(cfg.span_days)))
        disease = self.target if positive else self.distractors[int(rng.integers(len(self.distractors)))]
        noisy = bool(rng.random() < cfg.noise_rate)

        lines: List[str] = []
        lines.extend(self._header(hospital, lhu, pediatric))
        lines.append(f"Data: {date.strftime('%d/%m/%Y')}")
        lines.append("Gentile collega,")
        lines.append("si dimette in data odierna il paziente giunto alla nostra osservazione.")
        if rng.random() < cfg.diagnosis_section_rate:
            phrase = self._phrase(disease, rng)
            if positive and noisy:
                phrase = self._surface_noise(phrase, rng)
            lines.extend(self._diagnosis_section(phrase, rng))
        lines.append("")
        lines.append("Decorso clinico:")
        lines.extend(self._course(disease, positive, noisy, rng))
        lines.append("")
        lines.extend(self._advice(pediatric, rng))
        lines.append("")
        lines.extend(self._footer())

        return Letter(
            id=f"L{index:05d}",
            hospital_id=f"H-{hospital}",
            lhu_id=f"LHU-{lhu}",
            date=date,
            text="\n".join(lines),
            gold_label=positive,
        )

    def _header(self, hospital: int, lhu: int, pediatric: bool) -> List[str]:
        ward = "U.O.C. PEDIATRIA" if pediatric else "U.O.C. MEDICINA D'URGENZA"
        header = [
            "REGIONE VENETO",
            f"AZIENDA ULSS N. {lhu + 1}",
            f"PRESIDIO OSPEDALIERO DI H-{hospital} {HOSPITAL_SUFFIX[hospital % len(HOSPITAL_SUFFIX)]}",
            ward,
        ]
        if pediatric:
            header.append("Pronto Soccorso Pediatrico")
        header.append("Direttore: Dott. M. Rossi")
        header.append("Tel. 0421 000000 - Fax 0421 000001")
        header.append("")
        return header

    def _phrase(self, disease: str, rng: np.random.Generator) -> str:
        phrases = self.config.disease_templates[disease]
        return phrases[int(rng.choice(len(phrases), p=_zipf_weights(len(phrases))))]

    def _surface_noise(self, phrase: str, rng: np.random.Generator) -> str:
        kind = int(rng.integers(3))
        if kind == 0:
            return f"{ICD_PREFIXES[int(rng.integers(len(ICD_PREFIXES)))]} {phrase}"
        if kind == 1:
            return phrase.upper()
        return phrase + TRAILING_CLAUSES[int(rng.integers(len(TRAILING_CLAUSES)))]

    def _diagnosis_section(self, phrase: str, rng: np.random.Generator) -> List[str]:
        trigger = SECTION_TRIGGERS[int(rng.integers(len(SECTION_TRIGGERS)))]
        if rng.random() < 0.5:
            return [f"{trigger}: {phrase}"]
        return [f"{trigger}:", phrase]

    def _course(self, disease: str, positive: bool, noisy: bool, rng: np.random.Generator) -> List[str]:
        pool = COURSE_SENTENCES.get(disease, GENERIC_COURSE)
        n_specific = min(len(pool), int(rng.integers(2, 4)))
        picks = rng.choice(len(pool), size=n_specific, replace=False)
        sentences = [pool[int(i)].format(target=self.target) for i in sorted(picks)]
        sentences.extend(self._pick(FILLER_SENTENCES, 2, rng))
        if noisy and not positive:
            confounder = CONFOUNDERS[int(rng.integers(len(CONFOUNDERS)))]
            sentences.insert(int(rng.integers(len(sentences) + 1)), confounder.format(target=self.target))
        return sentences

    def _advice(self, pediatric: bool, rng: np.random.Generator) -> List[str]:
        doctor = "pediatra curante" if pediatric else "medico curante"
        return [
            "A domicilio si consiglia:",
            self._pick(["riposo e idratazione", "terapia come da prescrizione",
                        "lavaggi nasali frequenti", "paracetamolo al bisogno"], 1, rng)[0] + ".",
            f"Controllo presso il {doctor} entro 48-72 ore.",
        ]

    def _footer(self) -> List[str]:
        return [
            "Il medico dimettente",
            "Documento firmato digitalmente",
            "Pag. 1 di 1",
        ]

    @staticmethod
    def _pick(pool: Sequence[str], k: int, rng: np.random.Generator) -> List[str]:
        picks = rng.choice(len(pool), size=k, replace=False)
        return [pool[int(i)] for i in sorted(picks)]


def generate_synthetic(config: SynthesisConfig, seed: int) -> Corpus:
    return SyntheticLetterGenerator(config).generate(seed)
