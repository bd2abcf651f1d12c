"""Acceptance gate: the nine shipping criteria, one test per criterion.

The terminal summary prints a PASS/FAIL line per criterion (see
conftest). Criteria 4, 8, and 9 share one full-scale training run
through the module-scoped ``big_run`` fixture; everything else runs at
small scale. Expect this module to take a few minutes.
"""

import concurrent.futures
import hashlib
import threading
import time

import numpy as np
import pytest
import requests

from querycat.cli import run as cli_run
from querycat.ingest import (
    ClickEvent,
    NoisePolicy,
    SynthSpec,
    filter_noise,
    generate_synthetic_log,
    label_all,
)
from querycat.models import (
    CnnConfig,
    MlpConfig,
    TrainConfig,
    build_cnn,
    build_mlp,
    evaluate,
    predict,
    train,
)
from querycat.nncore import (
    ConvFilterBank,
    DropoutSpec,
    OptimizerConfig,
    backward,
    conv_forward,
    cross_entropy,
    dropout,
    forward,
    grad_check,
    load_model,
    save_model,
    softmax,
)
from querycat.serve import PredictionService, ServiceConfig
from querycat.textprep import (
    PAD_TOKEN,
    UNK_TOKEN,
    Vocabulary,
    build_vocab,
    encode,
    encode_dataset,
    load_dataset,
    normalize,
    split,
)

SEED = 11


def _epoch_means(curve):
    """Per-epoch mean train loss and accuracy: epoch -> (loss, acc)."""
    rows: dict[int, list] = {}
    for row in curve.train_rows():
        rows.setdefault(row.epoch, []).append(row)
    return {
        epoch: (
            sum(r.loss for r in batch) / len(batch),
            sum(r.accuracy for r in batch) / len(batch),
        )
        for epoch, batch in rows.items()
    }


@pytest.fixture(scope="module")
def big_run(tmp_path_factory):
    """Full-scale synthetic run at the reference hyperparameters.

    8 classes, 64 000 labeled queries split 50/50 (so each side matches
    the reference corpus sizes of about 32 000), click noise 0.02. The
    epoch budget is 100; training stops early once clearly converged so
    the run fits the wall-clock bound with a wide margin.
    """
    root = tmp_path_factory.mktemp("bigrun")
    spec = SynthSpec(n_classes=8, queries_per_class=8000, clicks_per_query=10,
                     noise_fraction=0.02, vocab_pool_size=1000)
    events = generate_synthetic_log(spec, seed=SEED)
    records = label_all(filter_noise(events, NoisePolicy()))
    del events
    pairs = [(r.query_norm, r.dominant_category) for r in records]
    probe_queries = [q for q, _ in pairs[:64]]
    del records
    vocab = build_vocab((q for q, _ in pairs), max_size=12814)
    dataset = encode_dataset(pairs, vocab, seq_len=10)
    train_set, eval_set = split(dataset, 0.5, seed=SEED)
    model = build_cnn(CnnConfig(
        vocab_rows=vocab.num_rows,
        class_ids=tuple(dataset.class_ids),
        embedding_dim=128,
        filter_widths=(1, 2, 3),
        filters_per_width=128,
        keep_prob=0.5,
        seq_len=10,
        seed=SEED,
        vocab_hash=vocab.content_hash(),
    ))
    config = TrainConfig(
        epochs=100,
        batch_size=64,
        optimizer=OptimizerConfig(algorithm="adam", lr=1e-3),
        seed=SEED,
        verbose=False,
    )

    def converged(curve) -> bool:
        # run at least 8 epochs, then stop once eval accuracy, train loss,
        # and train accuracy have all settled
        evals = curve.eval_rows()
        if len(evals) < 8:
            return False
        means = _epoch_means(curve)
        first_loss, _ = means[min(means)]
        last_loss, last_acc = means[max(means)]
        return (evals[-1].accuracy >= 0.95
                and last_loss < 0.04 * first_loss
                and last_acc >= 0.995)

    started = time.monotonic()
    curve = train(model, train_set, eval_set, config, stop=converged)
    wall_seconds = time.monotonic() - started
    model_path = root / "big.qcat"
    save_model(model, model_path)
    return {
        "model": model,
        "vocab": vocab,
        "train_set": train_set,
        "eval_set": eval_set,
        "curve": curve,
        "wall_seconds": wall_seconds,
        "model_path": model_path,
        "probe_queries": probe_queries,
    }


def _pinned_vocab():
    """1644-row vocabulary with the worked-example ids pinned."""
    id_to_word = [PAD_TOKEN, UNK_TOKEN] + [f"w{i}" for i in range(2, 1644)]
    id_to_word[1235] = "giving"
    id_to_word[1643] = "away"
    id_to_word[1245] = "free"
    return Vocabulary(
        word_to_id={w: i for i, w in enumerate(id_to_word)},
        id_to_word=id_to_word,
        max_size=1644,
    )


def test_criterion_1_gradient_correctness():
    model = build_cnn(CnnConfig(
        vocab_rows=20,
        class_ids=(1, 10, 27),
        embedding_dim=4,
        filter_widths=(1, 2),
        filters_per_width=2,
        keep_prob=1.0,
        activation="tanh",
        seq_len=5,
        seed=3,
        vocab_hash="acceptance",
    ))
    rng = np.random.default_rng([3, 7])
    ids = rng.integers(0, 20, size=(4, 5))
    labels = rng.integers(0, 3, size=4)

    started = time.monotonic()
    err = grad_check(model, ids, labels, epsilon=1e-4)
    elapsed = time.monotonic() - started
    assert err < 1e-4
    assert elapsed < 10.0

    # negative control: a corrupted gradient must fail the same check
    cache = forward(model, ids, labels=labels)
    grads = backward(model, cache)
    grads["dense.weights"] = grads["dense.weights"] + 0.05
    assert grad_check(model, ids, labels, epsilon=1e-4, analytic=grads) >= 1e-4


def test_criterion_2_encoding_fidelity():
    vocab = _pinned_vocab()
    out = encode("giving away free free", vocab, seq_len=9)
    assert out.tolist() == [1235, 1643, 1245, 1245, 0, 0, 0, 0, 0]
    # the repeated word maps to a single id
    assert out[2] == out[3] == 1245

    # output length always equals seq_len, over 10 000 random queries
    rng = np.random.default_rng(202)
    words = vocab.id_to_word[2:] + ["zzz-unknown", "free", "UPPER", "x!y"]
    for _ in range(10_000):
        n_tokens = int(rng.integers(1, 20))
        seq_len = int(rng.integers(1, 16))
        query = " ".join(words[i] for i in rng.integers(0, len(words), size=n_tokens))
        encoded = encode(normalize(query), vocab, seq_len)
        assert encoded.shape == (seq_len,)
        assert np.issubdtype(encoded.dtype, np.integer)


def _brute_force_labels(events):
    """Independent quadratic recount: rescan the whole log per query key."""
    normalized = [normalize(e.query_raw) for e in events]
    keys: list[str] = []
    for q in normalized:
        if q not in keys:
            keys.append(q)
    out = {}
    for key in keys:
        counts: dict[int, int] = {}
        total = 0
        for q, e in zip(normalized, events):
            if q == key:
                counts[e.category_id] = counts.get(e.category_id, 0) + 1
                total += 1
        dominant = min(counts, key=lambda c: (-counts[c], c))
        rates = {c: n / total for c, n in counts.items()}
        top3 = sorted(rates.items(), key=lambda cp: (-cp[1], cp[0]))[:3]
        out[key] = (dominant, total, rates, top3)
    return out


def test_criterion_3_labeling_oracle():
    raw_pool = []
    for j in range(12):
        raw_pool += [f"item {j}", f"Item {j}!", f"  ITEM   {j} "]
    categories = np.array([1, 5, 9, 12, 800])
    sizes = list(np.random.default_rng(404).integers(20, 401, size=97))
    sizes += [2000, 5000, 10000]
    assert len(sizes) == 100

    for i, size in enumerate(sizes):
        rng = np.random.default_rng([63, i])
        picks = rng.integers(0, len(raw_pool), size=int(size))
        cats = categories[rng.integers(0, len(categories), size=int(size))]
        events = [
            ClickEvent(session_id=f"s{i}-{j}", timestamp=int(ts),
                       query_raw=raw_pool[p], ad_id="ad0", category_id=int(c))
            for j, (p, c, ts) in enumerate(
                zip(picks, cats, rng.integers(0, 10**6, size=int(size))))
        ]
        # forced ties: equal counts must resolve to the lowest category id
        events.append(ClickEvent("tie", 1, "tie pair!", "ad0", 7))
        events.append(ClickEvent("tie", 2, "TIE pair", "ad0", 3))
        for cat in (9, 5, 1):
            events.append(ClickEvent("tie", 3, "tie trio", "ad0", cat))

        oracle = _brute_force_labels(events)
        records = label_all(events)
        assert {r.query_norm for r in records} == set(oracle)
        for r in records:
            dominant, total, rates, top3 = oracle[r.query_norm]
            assert r.dominant_category == dominant
            assert r.total_clicks == total
            assert r.rates == rates
            assert r.top3 == top3
            assert abs(sum(r.rates.values()) - 1.0) <= 1e-9
        by_key = {r.query_norm: r for r in records}
        assert by_key["tie pair"].dominant_category == 3
        assert by_key["tie trio"].dominant_category == 1


def test_criterion_4_synthetic_convergence(big_run):
    assert len(big_run["train_set"]) == 32000
    assert len(big_run["eval_set"]) == 32000
    evals = big_run["curve"].eval_rows()
    reached = [r.epoch for r in evals if r.accuracy >= 0.95]
    assert reached, "eval accuracy never reached 0.95"
    assert min(reached) <= 100
    assert big_run["wall_seconds"] <= 600.0
    final = evaluate(big_run["model"], big_run["eval_set"])
    assert final.accuracy >= 0.95


def test_criterion_5_baseline_ordering():
    spec = SynthSpec(n_classes=8, queries_per_class=250, clicks_per_query=8,
                     noise_fraction=0.0, vocab_pool_size=400,
                     order_sensitive=True)
    events = generate_synthetic_log(spec, seed=0)
    records = label_all(filter_noise(events, NoisePolicy()))
    pairs = [(r.query_norm, r.dominant_category) for r in records]
    vocab = build_vocab((q for q, _ in pairs), max_size=500)
    dataset = encode_dataset(pairs, vocab, seq_len=10)
    train_set, eval_set = split(dataset, 0.5, seed=0)

    common = dict(
        vocab_rows=vocab.num_rows,
        class_ids=tuple(dataset.class_ids),
        embedding_dim=64,
        seq_len=10,
        seed=0,
        vocab_hash=vocab.content_hash(),
    )
    config = TrainConfig(epochs=30, batch_size=64,
                         optimizer=OptimizerConfig(algorithm="adam", lr=1e-3),
                         seed=0, verbose=False)
    cnn = build_cnn(CnnConfig(filter_widths=(1, 2, 3), filters_per_width=64,
                              keep_prob=0.5, **common))
    mlp = build_mlp(MlpConfig(hidden_sizes=(200, 200), **common))
    train(cnn, train_set, None, config)
    train(mlp, train_set, None, config)

    cnn_acc = evaluate(cnn, eval_set).accuracy
    mlp_acc = evaluate(mlp, eval_set).accuracy
    assert cnn_acc >= mlp_acc
    assert cnn_acc > 0.5  # the CNN actually learned the order signal


def test_criterion_6_numeric_layer_properties():
    rng = np.random.default_rng(606)

    # softmax rows sum to 1 and ignore per-row shifts, even at extremes
    logits = rng.normal(0.0, 10.0, size=(200, 8))
    logits[0] = 1000.0
    logits[1] = -1000.0
    probs = softmax(logits)
    assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-12
    shifted = softmax(logits + rng.normal(0.0, 50.0, size=(200, 1)))
    assert np.abs(shifted - probs).max() <= 1e-12

    # uniform probabilities cost exactly ln C
    uniform = np.full(8, 1.0 / 8.0)
    for label in range(8):
        assert abs(cross_entropy(uniform, label) - np.log(8.0)) <= 1e-9

    # feature-map length is n - h + 1 for every valid (n, h)
    for n in range(1, 13):
        for h in range(1, n + 1):
            bank = ConvFilterBank(filters=rng.normal(size=(2, h, 3)),
                                  biases=np.zeros(2))
            fm = conv_forward(rng.normal(size=(n, 3)), bank)
            assert fm.values.shape == (2, n - h + 1)

    # inverted dropout is mean-preserving: 20 000 masks at keep_prob 0.5
    z = np.ones((20_000, 8))
    spec = DropoutSpec(keep_prob=0.5, mode="train")
    means = dropout(z, spec, rng=rng).mean(axis=0)
    assert np.abs(means - 1.0).max() < 0.02


def test_criterion_7_determinism(tmp_path):
    log = tmp_path / "log.jsonl"
    records = tmp_path / "records.tsv"
    vocab_path = tmp_path / "vocab.tsv"
    train_path = tmp_path / "train.ds"
    eval_path = tmp_path / "eval.ds"
    assert cli_run(["synth", "--out", str(log), "--classes", "4",
                    "--queries-per-class", "40", "--clicks-per-query", "6",
                    "--vocab-pool", "120", "--seed", "7"]) == 0
    assert cli_run(["ingest", "--log", str(log), "--out", str(records)]) == 0
    assert cli_run(["prepare", "--records", str(records),
                    "--vocab-out", str(vocab_path),
                    "--dataset-out", str(train_path),
                    "--eval-out", str(eval_path), "--seed", "7"]) == 0

    outputs = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        out.mkdir()
        assert cli_run([
            "train", "--dataset-in", str(train_path), "--eval-in", str(eval_path),
            "--vocab-in", str(vocab_path),
            "--model-out", str(out / "model.qcat"),
            "--metrics-out", str(out / "metrics.csv"),
            "--embedding-dim", "16", "--filter-widths", "1,2",
            "--num-filters", "8", "--batch-size", "32", "--epochs", "3",
            "--seed", "7", "--deterministic", "--quiet",
        ]) == 0
        outputs.append(out)
    first, second = outputs
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()
    assert (first / "model.qcat").read_bytes() == (second / "model.qcat").read_bytes()

    # lr = 0 training is a parameter no-op
    vocab = Vocabulary.load(vocab_path)
    train_set = load_dataset(train_path)
    model = build_cnn(CnnConfig(
        vocab_rows=vocab.num_rows,
        class_ids=tuple(train_set.class_ids),
        embedding_dim=16,
        filter_widths=(1, 2),
        filters_per_width=8,
        keep_prob=0.5,
        seq_len=10,
        seed=7,
        vocab_hash=vocab.content_hash(),
    ))
    before = {name: arr.tobytes() for name, arr in model.parameters().items()}
    train(model, train_set, None, TrainConfig(
        epochs=2, batch_size=32,
        optimizer=OptimizerConfig(algorithm="adam", lr=0.0),
        seed=7, verbose=False,
    ))
    for name, arr in model.parameters().items():
        assert arr.tobytes() == before[name], name


def _top1(model, ids, batch_size=512):
    out = []
    for lo in range(0, ids.shape[0], batch_size):
        cache = forward(model, ids[lo:lo + batch_size])
        out.append(cache.probs.argmax(axis=1))
    return np.concatenate(out)


def test_criterion_8_serialization_and_serving(big_run, tmp_path):
    model = big_run["model"]
    vocab = big_run["vocab"]
    model_path = big_run["model_path"]
    probes = big_run["eval_set"].ids[:10_000]

    # checkpoint round-trip flips zero top-1 predictions
    reloaded = load_model(model_path)
    flips = int((_top1(model, probes) != _top1(reloaded, probes)).sum())
    assert flips == 0

    # alternate checkpoint for reload mixing: a visibly different head
    alt = load_model(model_path)
    alt.dense.biases += 0.5
    alt_path = tmp_path / "alt.qcat"
    save_model(alt, alt_path)

    service = PredictionService(ServiceConfig(port=0), str(model_path), vocab)
    service.start()
    base = f"http://127.0.0.1:{service.port}"
    try:
        # service responses equal library predict() exactly
        main_version = hashlib.sha256(model_path.read_bytes()).hexdigest()
        for query in big_run["probe_queries"][:20]:
            resp = requests.post(base + "/predict", json={"query": query})
            assert resp.status_code == 200
            body = resp.json()
            assert body["model_version"] == main_version
            expected = predict(reloaded, vocab, query, top_k=3)
            got = [(p["category_id"], p["probability"]) for p in body["predictions"]]
            assert got == expected

        # reload under 64 concurrent requests never mixes versions
        alt_version = hashlib.sha256(alt_path.read_bytes()).hexdigest()
        query = big_run["probe_queries"][0]
        expected_by_version = {
            main_version: predict(reloaded, vocab, query, top_k=3),
            alt_version: predict(load_model(alt_path), vocab, query, top_k=3),
        }
        stop = threading.Event()
        local = threading.local()

        def flip_reloads():
            paths = [alt_path, model_path]
            with requests.Session() as session:
                i = 0
                while not stop.is_set():
                    session.post(base + "/reload",
                                 json={"model_path": str(paths[i % 2])})
                    i += 1

        def one_request(_):
            if not hasattr(local, "session"):
                local.session = requests.Session()
            r = local.session.post(base + "/predict",
                                   json={"query": query, "top_k": 3})
            assert r.status_code == 200
            body = r.json()
            return body["model_version"], [
                (p["category_id"], p["probability"]) for p in body["predictions"]
            ]

        flipper = threading.Thread(target=flip_reloads)
        flipper.start()
        try:
            with concurrent.futures.ThreadPoolExecutor(max_workers=64) as pool:
                results = list(pool.map(one_request, range(192)))
        finally:
            stop.set()
            flipper.join()
        for version, got in results:
            assert version in expected_by_version
            assert got == expected_by_version[version]
    finally:
        service.stop()


def test_criterion_9_convergence_shape(big_run):
    means = _epoch_means(big_run["curve"])
    epochs = sorted(means)
    losses = [means[e][0] for e in epochs]
    assert len(epochs) >= 5
    # smoothed loss is non-increasing from epoch 5 onward
    tail = losses[4:]
    for earlier, later in zip(tail, tail[1:]):
        assert later <= earlier
    # ends below 5% of its initial value
    assert losses[-1] < 0.05 * losses[0]
    # training accuracy almost reaches one
    assert means[epochs[-1]][1] >= 0.99
