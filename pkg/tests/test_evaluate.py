import numpy as np
import pytest

from stacca.env import ConfigError, EnvConfig
from stacca.evaluate import (
    ABLATION_VARIANTS,
    ERADICATION_NEVER,
    SUMMARY_FIELDS,
    ArtifactError,
    ConstantPolicy,
    EvalScenario,
    FullControl,
    Injection,
    RandomPolicy,
    ZeroControl,
    ablation_suite,
    compare,
    evaluate,
    run_episodes,
    separation,
    variant_configs,
    write_summary,
    write_timeseries,
)
from stacca.graph import GraphSpec, generate
from stacca.models import ModelConfig
from stacca.train import TrainConfig, train

SMALL = ModelConfig(d_model=8, n_gat_layers=1, n_enc_layers=1, n_heads=2, d_ff=16,
                    actor_hidden=8, critic_hidden=8)
BA20 = GraphSpec.barabasi_albert(20, 1, 0)


def test_rumor_without_control_never_spreads():
    g = generate(BA20)
    m = run_episodes(EnvConfig.rumor(delta_recovery=0.0), g, ZeroControl(), 10, 30, seed=1)
    assert np.all(m.mean_frac == m.mean_frac[0])
    assert m.mean_frac[0] == pytest.approx(3 / 20)
    assert np.all(m.mean_control == 0.0)


def test_full_control_beats_none_on_spread():
    g = generate(BA20)
    env = EnvConfig.epidemic(beta0=0.5, eta=1.0)
    full = run_episodes(env, g, FullControl(), 20, 40, seed=2)
    zero = run_episodes(env, g, ZeroControl(), 20, 40, seed=2)
    assert full.mean_frac[-1] < zero.mean_frac[-1]
    assert full.mean_control[-1] == 1.0
    assert np.allclose(full.mean_control[:11], np.arange(11) / 10)


def test_paired_seeds_and_determinism():
    g = generate(BA20)
    env = EnvConfig.epidemic()
    a = run_episodes(env, g, RandomPolicy(), 5, 12, seed=3)
    b = run_episodes(env, g, RandomPolicy(), 5, 12, seed=3)
    assert np.array_equal(a.mean_frac, b.mean_frac)
    assert np.array_equal(a.episode_rewards, b.episode_rewards)
    # same seed gives the same initial outbreak regardless of policy
    z = run_episodes(env, g, ZeroControl(), 5, 12, seed=3)
    assert z.mean_frac[0] == a.mean_frac[0] and z.std_frac[0] == a.std_frac[0]


def test_eradication_time_and_never():
    g = generate(BA20)
    recover = EnvConfig.epidemic(beta0=0.0, delta_recovery=1.0)
    m = run_episodes(recover, g, ZeroControl(), 4, 5)
    assert m.erad_time == 1 and m.final_frac == 0.0
    sticky = EnvConfig.epidemic(beta0=0.0, delta_recovery=0.0)
    assert run_episodes(sticky, g, ZeroControl(), 4, 5).erad_time == ERADICATION_NEVER


def test_injection_adds_infections():
    g = generate(BA20)
    env = EnvConfig.epidemic(beta0=0.0, delta_recovery=1.0, num_seeds=1)
    m = run_episodes(env, g, ZeroControl(), 3, 8, injection=Injection(4, 5))
    assert m.mean_frac[4] == pytest.approx(5 / 20)
    assert m.mean_frac[3] == 0.0 and m.mean_frac[5] == 0.0


def test_init_control():
    g = generate(BA20)
    m = run_episodes(EnvConfig.epidemic(), g, ZeroControl(), 2, 3, init_control=0.7)
    assert np.allclose(m.mean_control, 0.7, atol=1e-15)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        EvalScenario(BA20, horizon=10, injection=Injection(10, 1)).validate()
    with pytest.raises(ConfigError):
        EvalScenario(BA20, episodes=0).validate()
    with pytest.raises(ConfigError):
        EvalScenario(BA20, init_control=1.5).validate()
    with pytest.raises(ConfigError):
        evaluate(EvalScenario(BA20))


def test_missing_checkpoint():
    with pytest.raises(ArtifactError):
        evaluate(EvalScenario(BA20, policy_checkpoint="/nonexistent/final.ckpt"))


def test_separation():
    g = generate(BA20)
    env = EnvConfig.epidemic()
    a = run_episodes(env, g, ZeroControl(), 30, 20)
    assert separation(a, a) == 0.0
    b = run_episodes(env, g, FullControl(), 30, 20)
    assert separation(a, b) == -separation(b, a)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(episodes_per_iter=2, horizon=5, iters=1, k_pi=1, k_v=1)
    train(generate(BA20), EnvConfig.epidemic(), SMALL, cfg, out_dir=out)
    return out / "checkpoints" / "final.ckpt"


def test_compare_rows_and_csv(tmp_path, checkpoint):
    scenarios = [EvalScenario(BA20, episodes=3, horizon=6, name="a"),
                 EvalScenario(GraphSpec.barabasi_albert(30, 2, 1), episodes=3, horizon=6)]
    rows = compare(scenarios, {"mine": checkpoint})
    assert [(r.scenario, r.policy) for r in rows] == [
        (s, p) for s in ("a", "BA(m=2,N=30)")
        for p in ("mine", "ZeroControl", "FullControl", "RandomPolicy")
    ]
    write_summary(tmp_path / "s.csv", rows)
    write_timeseries(tmp_path / "t.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",".join(SUMMARY_FIELDS) and len(lines) == 9
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 1 + 8 * 7


def test_self_compare_is_identical(checkpoint):
    sc = EvalScenario(BA20, episodes=4, horizon=6)
    rows = compare([sc], {"x": checkpoint, "y": checkpoint}, baselines=())
    assert np.array_equal(rows[0].metrics.episode_rewards, rows[1].metrics.episode_rewards)
    assert separation(rows[0].metrics, rows[1].metrics) == 0.0


def test_compare_rejects_mixed_kinds(checkpoint):
    with pytest.raises(ConfigError):
        compare([EvalScenario(BA20, kind="rumor")], {"x": checkpoint})


def test_evaluate_uses_checkpoint_env(checkpoint):
    m = evaluate(EvalScenario(BA20, episodes=2, horizon=4, policy_checkpoint=str(checkpoint)))
    assert m.mean_frac.shape == (5,) and m.episode_rewards.shape == (2,)


def test_constant_policy_shape():
    acts = ConstantPolicy(2, "inc").actions(None, np.zeros((3, 4)), np.zeros((3, 4)), None)
    assert acts.shape == (3, 4) and np.all(acts == 2)


def test_variant_configs():
    t = TrainConfig()
    seen = {variant_configs(v, SMALL, t) for v in ABLATION_VARIANTS}
    assert len(seen) == len(ABLATION_VARIANTS)
    m, tc = variant_configs("gae_shared", SMALL, t)
    assert m.variant == "stacca" and tc.advantage_mode == "gae_shared"
    with pytest.raises(ConfigError):
        variant_configs("coma", SMALL, t)


def test_ablation_suite_shape(tmp_path):
    cfg = TrainConfig(episodes_per_iter=1, horizon=3, iters=1, k_pi=1, k_v=1)
    curves = ablation_suite(generate(GraphSpec.barabasi_albert(6, 1, 0)), EnvConfig.epidemic(),
                            SMALL, cfg, runs=2, out_dir=tmp_path)
    assert set(curves) == set(ABLATION_VARIANTS)
    assert all(len(runs) == 2 and len(runs[0]) == 1 for runs in curves.values())
    assert (tmp_path / "mlp_critic" / "run1" / "metrics.csv").is_file()
    with pytest.raises(ConfigError):
        ablation_suite(generate(BA20), EnvConfig.epidemic(), SMALL, cfg, runs=0)
