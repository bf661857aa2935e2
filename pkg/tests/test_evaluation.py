import io

import numpy as np
import pytest
from scipy.optimize import minimize

from charscale.config import RunConfig
from charscale.errors import InsufficientDataError, ContractViolation
from charscale.evaluation import (LOG2E, L2_GRID, bpc_from_nats, EvalReport, evaluate,
        featurize, featurize_many, LabeledTextSet, load_labeled, logreg_objective, logreg_fit,
        logreg_accuracy, select_l2, transfer, write_accuracy_report, ACCURACY_COLUMNS)
from charscale.trainer import train

from conftest import make_records


def test_bpc_from_nats():
    assert bpc_from_nats(np.log(2.0)) == pytest.approx(1.0)
    assert bpc_from_nats(np.log(256.0)) == pytest.approx(8.0)
    assert bpc_from_nats(0.0) == 0.0
    assert LOG2E == pytest.approx(1.4426950408889634)
    with pytest.raises(ContractViolation):
        bpc_from_nats(-0.1)


def test_report_weights_by_tokens():
    report = EvalReport([1.0, 2.0], [300, 100])
    assert report.mean_bpc == pytest.approx(1.25)
    assert report.as_row() == {"mean_bpc": "1.250000", "tokens": 400, "shards": 2}
    with pytest.raises(InsufficientDataError):
        EvalReport([1.0], [0])


def test_uniform_model_scores_eight_bits(tiny_params):
    tiny_params.masters["dec_w"][:] = 0
    tiny_params.masters["dec_b"][:] = 0
    tiny_params.rebuild()
    report = evaluate(tiny_params, make_records(10, seed=4), batch_size=4)
    assert report.mean_bpc == pytest.approx(8.0, abs=1e-5)
    assert len(report.shard_bpc) == 4


def test_evaluate_counts_every_next_byte(tiny_params):
    records = make_records(6, seed=2)
    report = evaluate(tiny_params, records, batch_size=3, seq_len=5)
    joined = [len("\n".join(records[i::3]).encode("utf-8")) for i in range(3)]
    assert report.tokens == sum(joined) - 3


def test_evaluate_is_pure_and_deterministic(tiny_params):
    records = make_records(12, seed=5)
    before = tiny_params.fingerprint()
    first = evaluate(tiny_params, records, batch_size=4)
    second = evaluate(tiny_params, records, batch_size=4, workers=2)
    assert first.shard_bpc == second.shard_bpc
    assert tiny_params.fingerprint() == before
    assert 0 < first.mean_bpc < 12


def test_evaluate_small_split(tiny_params):
    report = evaluate(tiny_params, make_records(2, seed=1), batch_size=16)
    assert len(report.shard_bpc) == 2
    with pytest.raises(InsufficientDataError):
        evaluate(tiny_params, [], batch_size=4)


def test_featurize(tiny_params):
    before = tiny_params.fingerprint()
    vector = featurize(tiny_params, "a great movie")
    assert vector.shape == (tiny_params.config.hidden_dim,)
    assert vector.dtype == np.float32
    np.testing.assert_array_equal(vector, featurize(tiny_params, b"a great movie"))
    hidden = featurize(tiny_params, "a great movie", feature="hidden")
    assert not np.array_equal(vector, hidden)
    assert tiny_params.fingerprint() == before
    matrix = featurize_many(tiny_params, ["one", "two", "three"])
    assert matrix.shape == (3, tiny_params.config.hidden_dim)
    with pytest.raises(InsufficientDataError):
        featurize(tiny_params, "")
    with pytest.raises(ContractViolation):
        featurize(tiny_params, "text", feature="logits")


def separable(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    features = rng.normal(scale=0.3, size=(n, 3))
    features[:, 0] += np.where(labels == 1, 2.0, -2.0)
    return features, labels


def test_separable_data_is_fit_exactly():
    features, labels = separable(200)
    classifier = logreg_fit(features, labels, l2=1e-2)
    assert logreg_accuracy(classifier, features, labels) == 1.0
    probabilities = classifier.predict_proba(features)
    assert np.all((probabilities > 0.5) == (labels == 1))


def test_random_labels_score_chance():
    rng = np.random.default_rng(1)
    features = rng.normal(size=(800, 5))
    labels = rng.integers(0, 2, size=800)
    classifier = logreg_fit(features[:400], labels[:400], l2=1.0)
    assert logreg_accuracy(classifier, features[400:], labels[400:]) == pytest.approx(0.5, abs=0.1)


@pytest.mark.parametrize("l2", [0.1, 1.0, 10.0])
def test_fit_agrees_with_quasi_newton(l2):
    rng = np.random.default_rng(int(l2 * 10))
    features = rng.normal(size=(150, 4))
    labels = (features.dot([1.0, -0.5, 0.2, 0.0]) + rng.normal(size=150) > 0).astype(np.int64)
    classifier = logreg_fit(features, labels, l2=l2, tol=1e-8)
    result = minimize(logreg_objective, np.zeros(5), args=(features, labels, l2), jac=True,
            method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-15, "maxiter": 10000})
    np.testing.assert_allclose(classifier.weights, result.x[:-1], atol=1e-4)
    assert classifier.bias == pytest.approx(result.x[-1], abs=1e-4)


def test_objective_never_increases():
    features, labels = separable(100, seed=3)
    losses = logreg_fit(features, labels, l2=0.5).losses
    assert len(losses) > 1
    assert np.all(np.diff(losses) <= 0)


def test_fit_contract():
    features = np.ones((4, 2))
    with pytest.raises(InsufficientDataError):
        logreg_fit(features, [1, 1, 1, 1])
    with pytest.raises(ContractViolation):
        logreg_fit(features, [0, 1, 0])
    with pytest.raises(ContractViolation):
        logreg_fit(np.full((2, 2), np.nan), [0, 1])
    with pytest.raises(InsufficientDataError):
        logreg_accuracy(logreg_fit(features, [0, 1, 0, 1]), np.empty((0, 2)), [])


def test_select_l2_from_grid():
    features, labels = separable(120, seed=6)
    best, scores = select_l2(features, labels)
    assert best in [score[0] for score in scores]
    assert [score[0] for score in scores] == pytest.approx(list(L2_GRID))
    accuracy = dict(scores)
    assert accuracy[best] == max(accuracy.values())
    assert all(best >= l2 for l2, acc in scores if acc == accuracy[best])


def test_load_labeled(tmp_path):
    path = tmp_path / "labels.tsv"
    path.write_text(u"1\tloved it\n\n0\tboring\tand long\n", encoding="utf-8")
    labeled = load_labeled(str(path))
    assert labeled.texts == ["loved it", "boring\tand long"]
    assert labeled.labels.tolist() == [1, 0]
    path.write_text(u"positive\tloved it\n", encoding="utf-8")
    with pytest.raises(InsufficientDataError):
        load_labeled(str(path))
    with pytest.raises(ContractViolation):
        LabeledTextSet(["a"], [2])


def sentiment_set(count, seed):
    rng = np.random.default_rng(seed)
    good = ("good", "great", "fine", "lovely")
    bad = ("bad", "awful", "dull", "poor")
    texts, labels = [], []
    for _ in range(count):
        label = int(rng.integers(0, 2))
        words = rng.choice(good if label else bad, size=3)
        texts.append("it was " + " ".join(words))
        labels.append(label)
    return LabeledTextSet(texts, labels)


def test_transfer_row(tiny_params, tmp_path):
    train_set = sentiment_set(40, 0)
    test_set = sentiment_set(20, 1)
    row = transfer(tiny_params, train_set, test_set, l2=1.0, name="toy")
    assert row["n_train"] == 40 and row["n_test"] == 20
    assert 0.0 <= row["test_accuracy"] <= 1.0
    assert row["dataset"] == "toy" and row["feature"] == "cell"
    selected = transfer(tiny_params, train_set, test_set, feature="hidden")
    assert selected["l2"] in list(L2_GRID)

    report = tmp_path / "accuracy.csv"
    write_accuracy_report(str(report), [row, selected])
    with io.open(str(report), encoding="utf-8") as reportFile:
        lines = reportFile.read().splitlines()
    assert lines[0] == ",".join(ACCURACY_COLUMNS)
    assert len(lines) == 3


def learning_config(run_config, **values):
    pairs = [("hidden_dim", "32"), ("embed_dim", "16"), ("seq_len", "16"),
             ("batch_size", "1"), ("min_train_shards", "1"), ("base_lr", "1e-2"),
             ("gemm_order", "blas"), ("max_epochs", "1000")]
    pairs += [(key, str(value)) for key, value in values.items()]
    return RunConfig.from_pairs(pairs, run_config)


def test_overfit_repeated_string(run_config):
    text = "the quick brown fox jumps over the lazy dog. " * 23
    config = learning_config(run_config, decay_iters=600)
    trainer = train(config, [text])
    assert trainer.iteration == 600
    report = evaluate(trainer.group.params, [text], batch_size=1, seq_len=16)
    assert report.mean_bpc < 1.0


def test_transfer_after_training_separates_sentiment(run_config):
    train_set = sentiment_set(160, 2)
    test_set = sentiment_set(100, 3)
    config = learning_config(run_config, decay_iters=400, batch_size=4, min_train_shards=4)
    trainer = train(config, list(train_set.texts))
    row = transfer(trainer.group.params, train_set, test_set, l2=1.0, name="marked")
    assert row["train_accuracy"] >= 0.9
    assert row["test_accuracy"] >= 0.9
