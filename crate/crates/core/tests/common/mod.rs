use alam_core::harness::{parse_config, RunConfig};

/// 16x16 world with single-layer networks; every stage runs in seconds.
pub fn tiny_run(extra: &[&str]) -> RunConfig {
    let mut ov: Vec<String> = [
        "world.resolution=16",
        "encoder.patch_size=4",
        "encoder.hidden=16",
        "encoder.layers=1",
        "encoder.heads=2",
        "encoder.queries=2",
        "encoder.latent_dim=4",
        "decoder.hidden=16",
        "decoder.blocks=1",
        "decoder.heads=2",
        "pretrain.episodes=10",
        "pretrain.episode_len=16",
        "pretrain.batch_size=4",
        "pretrain.test_fraction=0.2",
        "probe.grid.stride=2",
        "probe.n_anchors=16",
        "policy.demos=8",
        "policy.batch_size=8",
        "policy.horizon=4",
        "policy.replan=2",
        "policy.net.hidden=16",
        "policy.net.layers=1",
        "policy.net.heads=2",
        "policy.net.pool=4",
        "policy.eval_episodes=6",
        "policy.max_episode_steps=16",
        "log_every=1",
    ]
    .map(String::from)
    .to_vec();
    ov.extend(extra.iter().map(|s| s.to_string()));
    parse_config(None, &ov).expect("tiny config")
}
