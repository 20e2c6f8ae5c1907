import math
import os
import subprocess

import numpy as np
import pytest

import disdyn


def test_integrate_small_angle_pendulum():
    traj = disdyn.integrate("pendulum", [1.0], [0.01, 0.0], 300)
    assert traj.shape == (300, 2)
    assert traj[0, 0] == 0.01
    w = math.sqrt(9.81)
    t = np.arange(300) * 0.01
    assert np.max(np.abs(traj[:, 0] - 0.01 * np.cos(w * t))) < 1e-6


def test_generate_split_shapes_and_determinism():
    a = disdyn.generate_split("lotka_volterra", "ood_hard", seed=4, n_sequences=3, seq_len=50)
    b = disdyn.generate_split("lotka_volterra", "ood_hard", seed=4, n_sequences=3, seq_len=50)
    assert a["states"].shape == (3, 50, 2)
    assert a["factors"].shape == (3, 4)
    assert a["factor_names"] == disdyn.factor_names("lotka_volterra")
    assert np.array_equal(a["noisy"], b["noisy"])
    assert not np.array_equal(a["noisy"], a["states"])


def test_loss_terms():
    assert disdyn.reconstruction_nll([1.0] * 4, [0.0] * 4, 0.1) == pytest.approx(30.7897, abs=1e-4)
    assert disdyn.kl_term([0.0], [math.log(2.0)]) == pytest.approx(2.6137, abs=1e-4)
    assert disdyn.sd_loss([0.0], [1.2], "linear", [(1.0, 1.5)]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        disdyn.reconstruction_nll([1.0], [0.0], 0.0)


def test_model_predict_rollout_and_checkpoint(tmp_path):
    spec = {"family": "vae_ssd", "system": "pendulum", "input_steps": 10, "output_steps": 5,
            "hidden": [16], "latent_size": 4, "supervision_delta": 0.1, "seed": 2}
    m = disdyn.Model(spec)
    assert m.spec["family"] == "vae_ssd"
    assert "enc.mu.weight" in m.parameter_names()
    window = np.sin(np.linspace(0, 1, 20)).reshape(10, 2)
    y = m.predict(window)
    assert y.shape == (5, 2)
    pred, diverged, at = disdyn.rollout(m, window, 23)
    assert pred.shape == (23, 2)
    assert diverged is False and at is None
    assert np.array_equal(pred[:5], y)
    assert disdyn.mae_at(pred, pred, 23) == 0.0

    m.save(tmp_path / "ckpt")
    back = disdyn.Model.load(tmp_path / "ckpt")
    assert np.array_equal(back.predict(window), y)


def test_bad_spec_raises_config_error():
    with pytest.raises(disdyn.ConfigError):
        disdyn.Model({"family": "vae", "supervision_delta": 0.2})


def test_cli_dry_run(tmp_path):
    code, out, err = disdyn.cli(["generate", "--system", "pendulum", "--out", str(tmp_path / "d"), "--dry-run"])
    assert code == 0
    assert "would write" in out
    assert not (tmp_path / "d").exists()


@pytest.mark.skipif("DISDYN_CLI" not in os.environ, reason="executable path not provided")
def test_executable_exit_codes(tmp_path):
    exe = os.environ["DISDYN_CLI"]
    bad = subprocess.run([exe, "train", "--out", str(tmp_path)], capture_output=True)
    assert bad.returncode == 2
