"""Acceptance criteria, one test each.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the terminal summary for one PASS/FAIL line per criterion.
"""

import json
import time

import numpy as np
import pytest

from adm.cli import main
from adm.descriptors import (
    LabeledDataset,
    SynthSpec,
    class_parameters,
    dataset_from_bytes,
    dataset_to_bytes,
    load_dataset,
    save_dataset,
    synth_gaussian_dataset,
)
from adm.distributions import GaussianStats
from adm.episodes import EpisodeSpec, episode_stream, sample_episode
from adm.model import Embedding, FusionHead, MeasureConfig, ablate, branch_scores, evaluate, summarize
from adm.measures import kl_divergence, wasserstein2_approx, wasserstein2_exact
from adm.rng import stream
from adm.training import TrainConfig, grad
from gradcheck import finite_difference, relative_error

G = GaussianStats.from_params

# benchmark B: heteroscedastic classes, pilot recorded under these settings
BENCH_B_DATA = SynthSpec(20, 30, 16, 8, separation=0.5, cov_kind="random-spd")
BENCH_B_DATA_SEED = 0
BENCH_B_EPISODE_SEED = 0
BENCH_B_RECORDED = {
    "adm": (0.8818266666666666, 0.004522363870442466),
    "kl+cms": (0.8620533333333333, 0.0058543606398189256),
    "kl": (0.8362266666666667, 0.0065870746801067566),
    "wass-approx+cms": (0.8231066666666667, 0.005482255046640406),
    "i2c": (0.8194533333333334, 0.004978836607507581),
    "wass-approx": (0.7921866666666667, 0.005876524352676962),
}


def _logpdf(x, mean, cov):
    # independent of adm.linalg: numpy's LAPACK-backed routines
    d = x - mean
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (np.einsum("ni,ij,nj->n", d, inv, d) + logdet + len(mean) * np.log(2 * np.pi))


def _random_gaussian(rng, c):
    a = rng.standard_normal((c, c))
    return rng.standard_normal(c), a @ a.T / c + 0.3 * np.eye(c)


@pytest.mark.slow
@pytest.mark.criterion("KL oracle")
def test_kl_monte_carlo_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    samples = 10**6
    worst = 0.0
    for _ in range(50):
        (mq, cq), (ms, cs) = _random_gaussian(rng, 4), _random_gaussian(rng, 4)
        x = mq + rng.standard_normal((samples, 4)) @ np.linalg.cholesky(cq).T
        ratio = _logpdf(x, mq, cq) - _logpdf(x, ms, cs)
        se = ratio.std(ddof=1) / np.sqrt(samples)
        z = abs(kl_divergence(G(mq, cq), G(ms, cs)) - ratio.mean()) / se
        worst = max(worst, z)
    elapsed = time.perf_counter() - start
    print(f"worst deviation {worst:.2f} standard errors, {elapsed:.1f} s")
    assert worst <= 3.0
    assert elapsed < 60


@pytest.mark.criterion("Asymmetry witness")
def test_asymmetry_witness():
    narrow, wide = G(0.0, 1.0), G(0.0, 4.0)
    forward = kl_divergence(narrow, wide)
    backward = kl_divergence(wide, narrow)
    print(f"KL(N(0,1)||N(0,4)) = {forward!r}, KL(N(0,4)||N(0,1)) = {backward!r}")
    assert abs(forward - 0.5 * (0.25 + np.log(4) - 1)) <= 1e-9
    assert abs(wasserstein2_approx(narrow, wide) - wasserstein2_approx(wide, narrow)) <= 1e-8
    assert abs(wasserstein2_exact(narrow, wide) - wasserstein2_exact(wide, narrow)) <= 1e-8
    # the closed form gives 0.5 * (4 - ln 4 - 1) = 0.80685...; the stated 1.0568 is
    # asserted as written and is not attainable
    assert abs(backward - 1.0568) <= 1e-9


@pytest.mark.criterion("Exact-vs-approx Wasserstein")
def test_exact_versus_approx_wasserstein():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = int(rng.integers(1, 8))
        mean_q, cov = _random_gaussian(rng, c)
        q, s = G(mean_q, cov), G(rng.standard_normal(c), cov)
        assert abs(wasserstein2_exact(q, s) - wasserstein2_approx(q, s)) <= 1e-8
    q, s = G([0.0, 0.0], np.diag([1.0, 4.0])), G([0.0, 0.0], np.eye(2))
    assert wasserstein2_approx(q, s) - wasserstein2_exact(q, s) == pytest.approx(8.0, abs=1e-12)


@pytest.mark.criterion("Gradient suite")
def test_gradient_suite():
    start = time.perf_counter()
    dataset = synth_gaussian_dataset(SynthSpec(6, 6, 8, 4, 1.5, "random-spd"), 3)
    worst = 0.0
    for t in range(10):
        rng = stream(2024, t)
        config = TrainConfig(spec=EpisodeSpec(3, 1, 2), trainable="fusion+embedding", cms=bool(t % 2))
        episode = sample_episode(dataset, dataset.class_ids, config.spec, rng)
        embedding = Embedding.linear(np.eye(4) + 0.3 * rng.standard_normal((4, 4)))
        head = FusionHead(
            w=rng.uniform(0.5, 1.5, 2),
            gamma=rng.uniform(0.5, 2.0, 2),
            beta=rng.standard_normal(2),
            mode="off" if t % 3 == 2 else "episode-stats",
        )
        _, analytic = grad(episode, embedding, head, config)
        numeric = finite_difference(episode, embedding, head, config)
        for name in numeric:
            worst = max(worst, relative_error(analytic[name], numeric[name]))
    elapsed = time.perf_counter() - start
    print(f"worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-4
    assert elapsed < 120


@pytest.mark.criterion("CMS two-class antisymmetry")
def test_cms_two_class_antisymmetry():
    dataset = synth_gaussian_dataset(SynthSpec(10, 8, 6, 4, 1.0, "random-spd"), 11)
    for t in range(100):
        episode = sample_episode(dataset, dataset.class_ids, EpisodeSpec(2, 1 + t % 3, 4), episode_stream(5, t))
        dist, _ = branch_scores(episode, cms=True, with_i2c=False)
        assert np.array_equal(dist[:, 0], -dist[:, 1])


@pytest.mark.slow
@pytest.mark.criterion("Synthetic benchmark A")
def test_benchmark_a():
    start = time.perf_counter()
    spec = SynthSpec(20, 40, 64, 16, separation=10.0, cov_kind="isotropic")
    dataset = synth_gaussian_dataset(spec, 0)
    episodes = EpisodeSpec(5, 1, 15)
    rows = ("kl", "wass-approx", "wass-exact", "i2c", "adm", "kl+cms")
    results = dict(ablate(dataset, dataset.class_ids, episodes, rows=rows, tasks=1000, reps=1, seed=0))
    for name, report in results.items():
        print(f"{name:16s} {report.mean_acc:.4f}")

    # generating-parameter likelihood classifier on the same episodes
    params = class_parameters(spec, 0)
    inverses = np.stack([np.linalg.inv(p.cov) for p in params])
    logdets = np.array([np.linalg.slogdet(p.cov)[1] for p in params])
    means = np.stack([p.mean for p in params])
    hits = total = 0
    for t in range(1000):
        ep = sample_episode(dataset, dataset.class_ids, episodes, episode_stream(0, t))
        x = np.stack(ep.query).astype(np.float64)[:, None]  # (Q, 1, n, c)
        d = x - means[ep.class_ids][None, :, None, :]
        maha = np.einsum("qkni,kij,qknj->qk", d, inverses[ep.class_ids], d)
        ll = -0.5 * (maha + x.shape[2] * logdets[ep.class_ids])
        hits += int(np.sum(np.argmax(ll, axis=1) == ep.query_labels))
        total += len(ep.query_labels)
    bayes = hits / total
    elapsed = time.perf_counter() - start
    print(f"bayes oracle {bayes:.4f}, {elapsed:.1f} s")
    assert bayes >= 0.999
    assert all(r.mean_acc >= 0.99 for r in results.values())
    assert elapsed < 300


@pytest.mark.slow
@pytest.mark.criterion("Synthetic benchmark B")
def test_benchmark_b():
    dataset = synth_gaussian_dataset(BENCH_B_DATA, BENCH_B_DATA_SEED)
    results = dict(
        ablate(dataset, dataset.class_ids, EpisodeSpec(5, 1, 15), rows=tuple(BENCH_B_RECORDED),
               tasks=1000, reps=1, seed=BENCH_B_EPISODE_SEED)
    )
    for name, report in results.items():
        print(f"{name:16s} {report.mean_acc!r} {report.ci95!r}")
    acc = {name: r.mean_acc for name, r in results.items()}
    assert all(0.5 < a < 0.9 for a in acc.values())
    assert acc["kl"] > acc["wass-approx"]
    assert acc["kl+cms"] >= acc["kl"]
    for name, (mean_acc, ci95) in BENCH_B_RECORDED.items():
        assert (results[name].mean_acc, results[name].ci95) == (mean_acc, ci95)


@pytest.mark.criterion("Evaluation statistics")
def test_ci95_example():
    report = summarize([1.0, 0.5], tasks=2, reps=1, config={})
    assert abs(report.mean_acc - 0.75) <= 1e-12
    assert abs(report.ci95 - 1.96 * np.sqrt(0.125) / np.sqrt(2)) <= 1e-12
    assert abs(report.ci95 - 0.49) <= 1e-12


@pytest.mark.criterion("Determinism")
def test_ablate_determinism(tmp_path):
    data = tmp_path / "bench.admd"
    save_dataset(synth_gaussian_dataset(BENCH_B_DATA, BENCH_B_DATA_SEED), data)
    payloads = []
    for i, workers in enumerate((1, 1, 8, 8)):
        out = tmp_path / f"run{i}.json"
        argv = ["ablate", "--data", data, "--tasks", 100, "--seed", 3, "--workers", workers, "-o", out]
        assert main([str(a) for a in argv]) == 0
        payloads.append(out.read_bytes())
    assert len(set(payloads)) == 1
    assert len(json.loads(payloads[0])["rows"]) == 6


@pytest.mark.criterion("ADMD round-trip")
def test_admd_round_trip(tmp_path):
    rng = np.random.default_rng(77)
    for i in range(100):
        c = int(rng.integers(1, 9))
        ids = [int(k) for k in rng.choice(2**32, size=int(rng.integers(1, 6)), replace=False)]
        images = [
            [rng.standard_normal((int(rng.integers(1, 12)), c)) * 10 ** rng.uniform(-3, 3)
             for _ in range(int(rng.integers(1, 5)))]
            for _ in ids
        ]
        dataset = LabeledDataset(ids, images)
        first, second = tmp_path / f"{i}a.admd", tmp_path / f"{i}b.admd"
        save_dataset(dataset, first)
        loaded = load_dataset(first)
        save_dataset(loaded, second)
        assert loaded == dataset
        assert first.read_bytes() == second.read_bytes() == dataset_to_bytes(dataset_from_bytes(first.read_bytes()))
