"""
held-out bits per character and frozen feature transfer.

the language model is scored on eval shards with the hidden state carried
from window to window. For transfer the frozen model reads a text from zero
state and its final cell state becomes the feature vector of a binary
logistic regression.
"""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import expit

from charscale.errors import InsufficientDataError, ContractViolation
from charscale.data import make_shards
from charscale.model import HiddenState, forward_sequence, encode, token_losses

logger = logging.getLogger(__name__)

LOG2E = 1.0 / np.log(2.0)
FEATURES = ("cell", "hidden")
L2_GRID = np.logspace(-4, 5, 10)


def bpc_from_nats(loss):
    """mean cross entropy in nats to bits per character"""
    if loss < 0:
        raise ContractViolation("cross entropy must be non-negative, got {}".format(loss))
    return float(loss) * LOG2E


class EvalReport(object):
    """
    arguments:
    shard_bpc -- bits per character of every eval shard
    shard_tokens -- tokens scored in every shard
    """
    def __init__(self, shard_bpc, shard_tokens):
        self.shard_bpc = [float(bpc) for bpc in shard_bpc]
        self.shard_tokens = [int(count) for count in shard_tokens]
        self.tokens = int(sum(self.shard_tokens))
        if self.tokens == 0:
            raise InsufficientDataError("no tokens were evaluated")
        weights = np.asarray(self.shard_tokens, dtype=np.float64)
        self.mean_bpc = float(np.dot(weights, self.shard_bpc) / weights.sum())

    def as_row(self):
        return {"mean_bpc": "{:.6f}".format(self.mean_bpc), "tokens": self.tokens,
                "shards": len(self.shard_bpc)}

    def __repr__(self):
        return "EvalReport(mean_bpc={:.4f}, shards={}, tokens={})".format(
            self.mean_bpc, len(self.shard_bpc), self.tokens)


def _score_shard(params, shard, seq_len):
    """summed nats and token count of one shard, state zeroed at its start"""
    data = shard.data
    state = HiddenState.zeros(1, params.config.hidden_dim, params.precision)
    total = 0.0
    count = 0
    start = 0
    while start + 1 < len(data):
        stop = min(start + seq_len, len(data) - 1)
        inputs = data[None, start:stop].astype(np.int64)
        targets = data[None, start + 1:stop + 1].astype(np.int64)
        logits, state, _ = forward_sequence(inputs, state, params, keep_cache=False)
        total += float(np.sum(token_losses(logits, targets), dtype=np.float64))
        count += stop - start
        start = stop
    return total, count


def evaluate(params, records, batch_size=16, seq_len=None, seed=0, workers=1):
    """
    bits per character over B eval shards.

    every shard is read front to back in windows of seq_len from a zero
    state, the state carried across windows; the final partial window is
    scored too. No parameter is touched.

    arguments:
    params -- MlstmParams
    records -- test (or validation) split records
    batch_size -- number of eval shards B
    seq_len -- window length, the model's by default
    seed -- shard shuffle seed
    workers -- shards scored concurrently

    return:
    EvalReport
    """
    if not records:
        raise InsufficientDataError("cannot evaluate on an empty split")
    seq_len = seq_len or params.config.seq_len
    count = min(batch_size, len(records))
    if count < batch_size:
        logger.info("only {} records, evaluating {} shards instead of {}".format(
            len(records), count, batch_size))
    shards = make_shards(records, count, "eval", seed=seed)

    def score(shard):
        return _score_shard(params, shard, seq_len)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            scores = list(executor.map(score, shards))
    else:
        scores = [score(shard) for shard in shards]
    shard_bpc = [bpc_from_nats(total / n) if n else 0.0 for total, n in scores]
    report = EvalReport(shard_bpc, [n for _, n in scores])
    logger.info("evaluated {}".format(report))
    return report


def featurize(params, text, feature="cell"):
    """
    feature vector of one text from the frozen model.

    arguments:
    params -- MlstmParams, read only
    text -- str or bytes, non-empty
    feature -- "cell" for the final cell state c, "hidden" for h

    return:
    FP32 vector of length hidden_dim
    """
    if feature not in FEATURES:
        raise ContractViolation("feature must be one of {}".format(FEATURES))
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if not data:
        raise InsufficientDataError("cannot featurize an empty text")
    tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)[None, :]
    state = HiddenState.zeros(1, params.config.hidden_dim, params.precision)
    state = encode(tokens, state, params)
    vector = state.c if feature == "cell" else state.h
    return vector[0].astype(np.float32)


def featurize_many(params, texts, feature="cell"):
    return np.stack([featurize(params, text, feature) for text in texts])


class LabeledTextSet(object):
    """
    arguments:
    texts -- list of str
    labels -- list of 0/1
    """
    def __init__(self, texts, labels):
        if len(texts) != len(labels):
            raise ContractViolation("{} texts but {} labels".format(len(texts), len(labels)))
        self.texts = list(texts)
        self.labels = np.asarray(labels, dtype=np.int64)
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ContractViolation("labels must be 0 or 1")

    def __len__(self):
        return len(self.texts)


def load_labeled(path):
    """lines of: label TAB text"""
    texts, labels = [], []
    with io.open(path, "r", encoding="utf-8") as labeledFile:
        for number, line in enumerate(labeledFile, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep or label.strip() not in ("0", "1"):
                raise InsufficientDataError("{}:{}: expected 'label<TAB>text'".format(
                    path, number))
            labels.append(int(label))
            texts.append(text)
    logger.info("{} labeled texts from {}".format(len(texts), path))
    return LabeledTextSet(texts, labels)


class LogisticRegression(object):
    """
    binary classifier p(y=1|x) = sigmoid(x.w + b).

    arguments:
    weights -- coefficient vector
    bias -- intercept, not regularized
    l2 -- regularization strength used for the fit
    losses -- objective value after every iteration
    """
    def __init__(self, weights, bias, l2, losses=None):
        self.weights = weights
        self.bias = bias
        self.l2 = l2
        self.losses = losses or []

    def decision(self, features):
        return np.asarray(features, dtype=np.float64).dot(self.weights) + self.bias

    def predict_proba(self, features):
        return expit(self.decision(features))

    def predict(self, features):
        return (self.decision(features) > 0).astype(np.int64)


def logreg_objective(params, features, labels, l2):
    """
    sum of logistic losses plus l2/2 |w|^2, and its gradient.

    arguments:
    params -- concatenated (w, b)
    """
    w, b = params[:-1], params[-1]
    z = features.dot(w) + b
    loss = np.sum(np.logaddexp(0.0, z) - labels * z) + 0.5 * l2 * np.dot(w, w)
    residual = expit(z) - labels
    grad = np.empty_like(params)
    grad[:-1] = features.T.dot(residual) + l2 * w
    grad[-1] = np.sum(residual)
    return loss, grad


def logreg_fit(features, labels, l2=1.0, tol=1e-6, max_iter=20000):
    """
    full batch gradient descent with Armijo backtracking.

    the step grows by two after an accepted iteration and halves until the
    sufficient decrease condition holds, so the objective never increases.

    arguments:
    features -- [n x d] finite feature matrix
    labels -- n labels in {0, 1}, both classes present
    l2 -- regularization strength, >= 0
    tol -- gradient norm at which the fit stops

    return:
    LogisticRegression
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ContractViolation("features {} and labels {} disagree".format(
            features.shape, labels.shape))
    if not np.all(np.isfinite(features)):
        raise ContractViolation("features must be finite")
    if len(np.unique(labels)) < 2:
        raise InsufficientDataError("degenerate fit: only one class present")
    if l2 < 0:
        raise ContractViolation("l2 must be non-negative")

    params = np.zeros(features.shape[1] + 1)
    loss, grad = logreg_objective(params, features, labels, l2)
    losses = [loss]
    step = 1.0
    for iteration in range(max_iter):
        norm = np.sqrt(np.dot(grad, grad))
        if norm <= tol:
            break
        step *= 2.0
        while True:
            trial = params - step * grad
            trial_loss, trial_grad = logreg_objective(trial, features, labels, l2)
            if trial_loss <= loss - 0.5 * step * norm * norm:
                break
            step *= 0.5
            if step < 1e-20:
                logger.warning("line search stalled at gradient norm {:.3g}".format(norm))
                return LogisticRegression(params[:-1], params[-1], l2, losses)
        params, loss, grad = trial, trial_loss, trial_grad
        losses.append(loss)
    else:
        logger.warning("logistic regression stopped at the iteration cap {}".format(max_iter))
    logger.debug("logistic regression converged in {} iterations".format(len(losses) - 1))
    return LogisticRegression(params[:-1], params[-1], l2, losses)


def logreg_accuracy(classifier, features, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InsufficientDataError("accuracy of an empty set")
    return float(np.mean(classifier.predict(features) == labels))


def select_l2(features, labels, grid=L2_GRID, val_fraction=0.2, seed=0):
    """
    pick the regularization with the best validation fold accuracy.

    ties go to the stronger regularization.

    return:
    (best l2, list of (l2, accuracy))
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(labels))
    n_val = max(1, int(round(len(labels) * val_fraction)))
    val, fit = order[:n_val], order[n_val:]
    if len(np.unique(labels[fit])) < 2:
        logger.info("fit fold holds one class, keeping the full set for l2 selection")
        fit = order
    scores = []
    for l2 in grid:
        classifier = logreg_fit(features[fit], labels[fit], l2)
        scores.append((float(l2), logreg_accuracy(classifier, features[val], labels[val])))
    best = max(scores, key=lambda score: (score[1], score[0]))
    logger.info("selected l2 {:g} with validation accuracy {:.3f}".format(*best))
    return best[0], scores


def transfer(params, train_set, test_set, l2=None, feature="cell", name=""):
    """
    featurize, fit and score a sentiment set.

    arguments:
    params -- frozen MlstmParams
    train_set, test_set -- LabeledTextSet
    l2 -- regularization, chosen by select_l2 when None

    return:
    dict row for write_accuracy_report
    """
    train_features = featurize_many(params, train_set.texts, feature)
    test_features = featurize_many(params, test_set.texts, feature)
    if l2 is None:
        l2, _ = select_l2(train_features, train_set.labels)
    classifier = logreg_fit(train_features, train_set.labels, l2)
    row = {"dataset": name, "feature": feature, "l2": l2,
           "n_train": len(train_set), "n_test": len(test_set),
           "train_accuracy": logreg_accuracy(classifier, train_features, train_set.labels),
           "test_accuracy": logreg_accuracy(classifier, test_features, test_set.labels)}
    logger.info("transfer {}: test accuracy {:.4f}".format(name, row["test_accuracy"]))
    return row


ACCURACY_COLUMNS = ("dataset", "feature", "l2", "n_train", "n_test",
        "train_accuracy", "test_accuracy")


def write_accuracy_report(filename, rows):
    with io.open(filename, "w", newline="", encoding="utf-8") as reportFile:
        writer = csv.DictWriter(reportFile, fieldnames=ACCURACY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in ACCURACY_COLUMNS})
