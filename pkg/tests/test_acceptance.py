"""Acceptance criteria, one test each; the terminal summary prints a PASS/FAIL line per criterion.

Criteria 1 and 7 train full-size networks and take tens of minutes on one
core. Set ``UNCSENS_SKIP_SLOW=1`` to skip them (they then report SKIP).
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import (
    BilinearLatentModel,
    central_difference,
    linear_posterior,
    random_posterior,
    relative_error,
)
from uncsens.cli import main as cli_main
from uncsens.data import Dataset, Manifest, generate_toy
from uncsens.harness import ExperimentConfig, log_mean_exp, run_experiment, test_log_likelihood as tll
from uncsens.rng import RngStream
from uncsens.sensitivity import STATISTICS, gradients_from_draws, sensitivity_analysis
from uncsens.training import Batch, TrainConfig, draw_energy_noise, energy_from_noise
from uncsens.uncertainty import PredictiveSampleGrid, decompose, draw_frozen, grid_from_draws

ROOT = Path(__file__).resolve().parent.parent
SKIP_SLOW = os.environ.get("UNCSENS_SKIP_SLOW") == "1"

# "bitwise up to floating-point association": a few units in the last place
ASSOCIATION_TOL = 8 * np.finfo(np.float64).eps


def _skip_slow(acceptance, name):
    if SKIP_SLOW:
        acceptance(name, None, "skipped (UNCSENS_SKIP_SLOW=1)")
        pytest.skip("slow acceptance criterion")


def test_criterion_1_toy_reproduction(acceptance):
    name = "1 toy: I_epi(x1) > I_epi(x2) and I_ale(x2) > I_ale(x1) in >= 4 of 5 seeds"
    _skip_slow(acceptance, name)
    passes, details, worst = 0, [], 0.0
    for seed in range(5):
        start = time.perf_counter()
        cfg = ExperimentConfig(
            train=TrainConfig(epochs=3000, learning_rate=0.001),
            hidden_layer_sizes=(20, 20), repetitions=1, n_w=200, n_z=200, seed=seed,
        )
        rep = run_experiment(generate_toy(500, seed).dataset, cfg, name="toy").sensitivity
        worst = max(worst, time.perf_counter() - start)
        ok = rep.epistemic[0, 0] > rep.epistemic[1, 0] and rep.aleatoric[1, 0] > rep.aleatoric[0, 0]
        passes += ok
        details.append(
            f"seed {seed}: epi {rep.epistemic[0, 0]:.4f}/{rep.epistemic[1, 0]:.4f} "
            f"ale {rep.aleatoric[0, 0]:.4f}/{rep.aleatoric[1, 0]:.4f} {'ok' if ok else 'no'}"
        )
    acceptance(name, passes >= 4, f"{passes}/5; slowest seed {worst:.0f}s; " + "; ".join(details))
    assert passes >= 4, details


def test_criterion_2_law_of_total_variance(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        n_w, n_z = rng.integers(2, 21, size=2)
        samples = rng.normal(size=(n_w, n_z, 1)) * rng.uniform(0.1, 10) + rng.normal(scale=5)
        samples += rng.normal(size=(n_w, 1, 1)) * rng.uniform(0, 3)
        dec = decompose(PredictiveSampleGrid(samples))
        total = samples.reshape(-1).var()
        worst = max(worst, abs(dec.epistemic_std[0] ** 2 + dec.aleatoric_std[0] ** 2 - total) / total)
    acceptance("2 law of total variance over 1000 grids", worst <= 1e-10, f"max relative error {worst:.2e}")
    assert worst <= 1e-10


def _estimators(model, x, draws):
    dec = decompose(grid_from_draws(model, x, draws))
    return np.stack([dec.expectation, dec.epistemic_std, dec.aleatoric_std])


def test_criterion_3_gradient_oracles(acceptance):
    rng = np.random.default_rng(3)
    worst_sens, worst_energy = 0.0, 0.0
    for i in range(50):
        d = int(rng.integers(1, 5))
        hidden = tuple(int(h) for h in rng.integers(1, 9, size=2))
        post = random_posterior(i, input_dim=d, output_dim=int(rng.integers(1, 3)), hidden=hidden,
                                weight_var=float(rng.uniform(0.01, 0.3)), n_train=6)
        post.latent_means = rng.normal(size=6)
        post.latent_log_variances = rng.normal(scale=0.3, size=6)
        x = rng.normal(size=d)
        draws = draw_frozen(post, RngStream(i, 1), 5, 5)
        g = gradients_from_draws(post, x, draws)
        analytic = np.stack([g.expectation, g.epistemic_std, g.aleatoric_std], axis=1)
        numeric = central_difference(lambda v: _estimators(post, v, draws), x, 1e-5)
        worst_sens = max(worst_sens, relative_error(analytic, numeric, floor=1e-6))

        rows = np.sort(rng.choice(6, size=3, replace=False))
        batch = Batch(rng.normal(size=(3, d)), rng.normal(size=(3, post.output_dim)), rows)
        alpha = float(rng.uniform(0.2, 1.0))
        noise = draw_energy_noise(RngStream(i, 2), post, 3, 4)
        _, grad = energy_from_noise(batch, post, alpha, noise, with_gradient=True)
        vec = post.to_vector()
        fd = central_difference(lambda v: energy_from_noise(batch, post.with_vector(v), alpha, noise).total, vec, 1e-5)
        worst_energy = max(worst_energy, relative_error(grad, fd, floor=1e-6))
    ok = worst_sens <= 1e-4 and worst_energy <= 1e-4
    acceptance("3 gradient oracles on 50 random networks", ok,
               f"estimators max rel err {worst_sens:.2e}; energy max rel err {worst_energy:.2e}")
    assert ok


def test_criterion_4_bilinear_closed_form(acceptance):
    model = BilinearLatentModel(weight_mean=1.3, weight_var=0.0)
    worst_ale, worst_epi = 0.0, 0.0
    for i, x in enumerate([0.25, 0.7, 1.0, 2.5, 9.0]):
        draws = draw_frozen(model, RngStream(40, i), 7, 50)
        g = gradients_from_draws(model, np.array([x]), draws)
        # f = w x z with w fixed, so d aleatoric_std / dx = w * std(z)
        expected = 1.3 * draws.latents.std()
        worst_ale = max(worst_ale, abs(g.aleatoric_std[0, 0] - expected) / expected)
        worst_epi = max(worst_epi, abs(g.epistemic_std[0, 0]))
    unit = BilinearLatentModel()
    draws = draw_frozen(unit, RngStream(41), 4, 30)
    g = gradients_from_draws(unit, np.array([0.8]), draws)
    unit_err = abs(g.aleatoric_std[0, 0] - draws.latents.std()) / draws.latents.std()
    ok = worst_ale <= ASSOCIATION_TOL and unit_err <= ASSOCIATION_TOL and worst_epi == 0.0
    acceptance("4 bilinear model: aleatoric gradient = std of frozen z, epistemic = 0", ok,
               f"max rel err {max(worst_ale, unit_err):.1e} (a few ulp); max |epistemic| {worst_epi}")
    assert ok


def test_criterion_5_degenerate_models(acceptance):
    xs = np.random.default_rng(5).normal(size=(8, 3))
    post = random_posterior(5, weight_var=0.5, hidden=(8, 8))
    post.weight_log_variances = [np.full(v.shape, -np.inf) for v in post.weight_log_variances]
    epi_std = max(float(np.max(decompose(grid_from_draws(post, x, draw_frozen(post, RngStream(5, i), 20, 20)))
                                .epistemic_std)) for i, x in enumerate(xs))
    epi_sens = float(np.max(np.abs(sensitivity_analysis(xs, post, 20, 20, RngStream(5)).epistemic)))

    dead = random_posterior(6, weight_var=0.5, hidden=(8, 8))
    dead.weight_means[0][:, 2] = 0.0
    dead.weight_log_variances[0][:, 2] = -np.inf
    report = sensitivity_analysis(xs, dead, 20, 20, RngStream(6))
    zero_column = all(np.all(report[s][2] == 0.0) for s in STATISTICS)
    ok = epi_std <= 1e-12 and epi_sens <= 1e-12 and zero_column
    acceptance("5 degenerate models: zero weight variance and dead feature column", ok,
               f"max epistemic std {epi_std:.1e}; max I_epistemic {epi_sens:.1e}; dead column exactly zero: {zero_column}")
    assert ok


def test_criterion_6_log_likelihood_statistics(acceptance):
    worst = 0.0
    for a, b in [(0.0, 0.0), (-1.0, 2.0), (-3.7, -0.2), (12.0, -40.0), (-300.0, -299.0)]:
        direct = max(a, b) + math.log(0.5 * math.exp(a - max(a, b)) + 0.5 * math.exp(b - max(a, b)))
        worst = max(worst, abs(float(log_mean_exp(np.array([a, b]))) - direct))
    post = linear_posterior([[0.0, 0.0, -0.4]], noise_var=1 / (2 * math.pi))
    test = Dataset(np.array([[1.0], [2.0], [-5.0]]), np.full(3, -0.4), ["x"], ["y"])
    at_mean, _ = tll(test, post, 2, 2, RngStream(6))
    ok = worst <= 1e-12 and at_mean == 0.0
    acceptance("6 log-mean-exp two-term oracle and Gaussian-at-mean LL", ok,
               f"two-term max abs err {worst:.1e}; LL at mean {at_mean}")
    assert ok


def test_criterion_7_boston_housing(acceptance):
    name = "7 Boston Housing, 40 units, 5 splits: mean test LL within 0.30 of -2.39"
    _skip_slow(acceptance, name)
    manifest = Manifest.load(ROOT / "data" / "boston_housing.json")
    cfg = ExperimentConfig(train=TrainConfig(), hidden_layer_sizes=(40, 40), repetitions=5, seed=0)
    start = time.perf_counter()
    record = run_experiment(manifest, cfg)
    lls = [r["test_log_likelihood"] for r in record.repetitions]
    mean = float(np.mean(lls))
    ok = abs(mean - (-2.39)) <= 0.30
    acceptance(name, ok, f"mean LL {mean:.3f} (splits: {', '.join(f'{v:.3f}' for v in lls)}); "
                         f"{time.perf_counter() - start:.0f}s")
    assert ok


def test_criterion_8_determinism(acceptance, tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"epochs": 20, "repetitions": 2, "n_w": 20, "n_z": 20}))
    manifest = ROOT / "data" / "toy.json"
    outs = {}
    for label, threads in (("a", 1), ("b", 1), ("c", 4)):
        code = cli_main(["experiment", "--manifest", str(manifest), "--config", str(config), "--seed", "8",
                         "--threads", str(threads), "--out-dir", str(tmp_path / label)])
        capsys.readouterr()
        assert code == 0
        outs[label] = tmp_path / label
    same_results = (outs["a"] / "results.json").read_bytes() == (outs["b"] / "results.json").read_bytes()
    same_threads = all(
        (outs["a"] / f).read_bytes() == (outs["c"] / f).read_bytes()
        for f in ("sensitivity.csv", "sensitivity.json", "results.json")
    )
    ok = same_results and same_threads
    acceptance("8 determinism: repeated run and --threads 1 vs 4", ok,
               f"results.json identical across runs: {same_results}; identical across thread counts: {same_threads}")
    assert ok
