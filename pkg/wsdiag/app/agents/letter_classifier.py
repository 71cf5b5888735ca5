import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from wsdiag.app.exceptions import ParameterError, TrainingError
from wsdiag.app.models.models import ClassifierModel
from wsdiag.app.schemas.schemas import (
    Corpus,
    DiagnosisString,
    EmbedderConfig,
    InputVariant,
    Letter,
    TrainConfig,
)
from wsdiag.scrapers.boilerplate import strip_boilerplate
from wsdiag.scrapers.text_normalizer import TextNormalizer
from wsdiag.vector_store.embeddings import HashedNgramEmbedder, embedder_fingerprint

logger = logging.getLogger(__name__)

_tokenizer = TextNormalizer()


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=float)))


def prepare_input(letter: Letter, diag: Optional[DiagnosisString], variant: InputVariant) -> List[List[str]]:
    """
    Token chunks fed to the classifier for one letter.

    In without_diagnosis mode the extracted raw span is cut out of the stripped
    text before tokenizing. Truncate mode yields a single chunk.
    """
    text = strip_boilerplate(letter.text)
    if variant.mode == "without_diagnosis" and diag is not None:
        start, end = diag.span
        if text[start:end] == diag.raw:
            text = text[:start] + text[end:]
        else:
            text = text.replace(diag.raw, "", 1)

    if variant.input_mode == "truncate":
        return [_tokenizer.tokenize_letter(text, variant.max_tokens)]
    tokens = _tokenizer.tokenize(text)
    if not tokens:
        return [[]]
    return [tokens[i:i + variant.max_tokens] for i in range(0, len(tokens), variant.max_tokens)]


def logistic_loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray,
                           sample_weight: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray, float]:
    """Weighted mean binary cross-entropy of sigmoid(Xw + b) and its gradient."""
    sample_weight = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    total = sample_weight.sum()
    z = X @ w + b
    losses = np.logaddexp(0.0, z) - y * z
    loss = float(sample_weight @ losses / total)
    residual = sample_weight * (sigmoid(z) - y) / total
    return loss, X.T @ residual, float(residual.sum())


class AdamWOptimizer:
    """
    Adam with decoupled weight decay applied to the weights only, under a linear learning-rate decay.
    """

    def __init__(self, dim: int, learning_rate: float, weight_decay: float, total_steps: int,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.total_steps = max(total_steps, 1)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m_w, self.v_w = np.zeros(dim), np.zeros(dim)
        self.m_b = self.v_b = 0.0
        self.t = 0

    def current_lr(self) -> float:
        return self.learning_rate * (1.0 - self.t / self.total_steps)

    def step(self, w: np.ndarray, b: float, grad_w: np.ndarray, grad_b: float) -> Tuple[np.ndarray, float]:
        lr = self.current_lr()
        self.t += 1
        w = w * (1.0 - lr * self.weight_decay)

        self.m_w = self.beta1 * self.m_w + (1 - self.beta1) * grad_w
        self.v_w = self.beta2 * self.v_w + (1 - self.beta2) * grad_w ** 2
        self.m_b = self.beta1 * self.m_b + (1 - self.beta1) * grad_b
        self.v_b = self.beta2 * self.v_b + (1 - self.beta2) * grad_b ** 2
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t

        w = w - lr * (self.m_w / correction1) / (np.sqrt(self.v_w / correction2) + self.eps)
        b = b - lr * (self.m_b / correction1) / (math.sqrt(self.v_b / correction2) + self.eps)
        return w, b


class LetterFeaturizer:
    """
    Embeds letter chunks with the hashed n-gram embedder, caching per letter.
    """

    def __init__(self, embedder: EmbedderConfig, variant: InputVariant):
        self.embedder_config = embedder.model_copy(update={"provider": "hashed_ngram"})
        self.variant = variant
        self.fingerprint = embedder_fingerprint(self.embedder_config)
        self._embedder = HashedNgramEmbedder(self.embedder_config)
        self._cache: Dict[str, np.ndarray] = {}

    def features(self, letter: Letter, diag: Optional[DiagnosisString]) -> np.ndarray:
        cached = self._cache.get(letter.id)
        if cached is None:
            chunks = prepare_input(letter, diag, self.variant)
            cached, _ = self._embedder.embed_many(chunks)
            self._cache[letter.id] = cached
        return cached


class LetterClassifier:
    """
    Linear logistic head over letter embeddings trained with AdamW.
    """

    def __init__(self, config: Optional[TrainConfig] = None):
        self.config = config or TrainConfig()

    def train(self, corpus: Corpus, labels: Mapping[str, int], diagnoses: Mapping[str, DiagnosisString],
              featurizer: LetterFeaturizer, trained_on: str = "weak") -> ClassifierModel:
        rows = [featurizer.features(letter, diagnoses.get(letter.id))[0] for letter in corpus.letters]
        X = np.vstack(rows)
        y = np.array([labels[letter.id] for letter in corpus.letters], dtype=float)
        w, b, mean, scale, loss = self.fit_arrays(X, y)
        return ClassifierModel(
            weights=w.tolist(),
            bias=b,
            dim=X.shape[1],
            embedder_fingerprint=featurizer.fingerprint,
            trained_on=trained_on,
            threshold=self.config.threshold,
            train_config=self.config,
            variant=featurizer.variant,
            feature_mean=mean.tolist(),
            feature_scale=scale.tolist(),
            final_loss=loss,
        )

    def fit_arrays(self, X: np.ndarray, y: np.ndarray):
        cfg = self.config
        n, dim = X.shape
        n_positive = int(y.sum())
        if n_positive == 0 or n_positive == n:
            raise TrainingError("training labels contain a single class")

        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        Xs = (X - mean) / scale

        if cfg.class_weighting == "inverse_prevalence":
            sample_weight = np.where(y == 1, n / (2.0 * n_positive), n / (2.0 * (n - n_positive)))
        else:
            sample_weight = np.ones(n)

        steps_per_epoch = math.ceil(n / cfg.batch_size)
        optimizer = AdamWOptimizer(dim, cfg.learning_rate, cfg.weight_decay, cfg.epochs * steps_per_epoch)
        rng = np.random.default_rng(cfg.seed)
        w, b = np.zeros(dim), 0.0
        loss = float("nan")

        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                _, grad_w, grad_b = logistic_loss_and_grad(w, b, Xs[batch], y[batch], sample_weight[batch])
                w, b = optimizer.step(w, b, grad_w, grad_b)
            loss, _, _ = logistic_loss_and_grad(w, b, Xs, y, sample_weight)
            if not math.isfinite(loss) or not np.all(np.isfinite(w)):
                raise TrainingError("training loss diverged", epoch=epoch)
            logger.debug("epoch %d: loss %.6f", epoch, loss)

        logger.info("Trained linear head on %d examples (%d positive), final loss %.4f", n, n_positive, loss)
        return w, float(b), mean, scale, loss

    @staticmethod
    def chunk_probabilities(model: ClassifierModel, chunks: np.ndarray) -> np.ndarray:
        standardized = (chunks - model.array("feature_mean")) / model.array("feature_scale")
        return sigmoid(standardized @ model.array("weights") + model.bias)

    def predict_proba(self, model: ClassifierModel, letter: Letter, diag: Optional[DiagnosisString],
                      featurizer: LetterFeaturizer) -> float:
        if featurizer.fingerprint != model.embedder_fingerprint:
            raise ParameterError("embedder fingerprint does not match the one the model was trained with")
        return float(self.chunk_probabilities(model, featurizer.features(letter, diag)).max())


def train_classifier(corpus: Corpus, labels: Mapping[str, int], diagnoses: Mapping[str, DiagnosisString],
                     variant: InputVariant, cfg: TrainConfig, embedder: Optional[EmbedderConfig] = None,
                     trained_on: str = "weak") -> ClassifierModel:
    featurizer = LetterFeaturizer(embedder or EmbedderConfig(), variant)
    return LetterClassifier(cfg).train(corpus, labels, diagnoses, featurizer, trained_on)


def predict_proba(model: ClassifierModel, letter: Letter, diag: Optional[DiagnosisString],
                  variant: Optional[InputVariant] = None, embedder: Optional[EmbedderConfig] = None) -> float:
    featurizer = LetterFeaturizer(embedder or EmbedderConfig(), variant or model.variant)
    return LetterClassifier(model.train_config).predict_proba(model, letter, diag, featurizer)


def rule_classify(letter: Letter, diag: Optional[DiagnosisString], scope: str, term: str,
                  variant: Optional[InputVariant] = None) -> bool:
    """
    Keyword baseline: whole-token search for term in the letter or only in its diagnosis string.
    """
    wanted = _tokenizer.tokenize(term)
    if not wanted:
        raise ParameterError(f"rule term {term!r} has no word tokens")
    if scope == "diagnosis_only":
        if diag is None or not diag.trimmed:
            return False
        haystack = _tokenizer.tokenize(diag.trimmed)
    elif scope == "full_text":
        variant = variant or InputVariant(input_mode="chunk", max_tokens=10 ** 9)
        haystack = [tok for chunk in prepare_input(letter, diag, variant) for tok in chunk]
    else:
        raise ParameterError(f"unknown rule scope {scope!r}")
    width = len(wanted)
    return any(haystack[i:i + width] == wanted for i in range(len(haystack) - width + 1))
