use vdvae::arch::{BlockSpec, DownsampleMode, ModelConfig, PriorMode, Vdvae};
use vdvae::data::{generate_synthetic, load_checkpoint, SyntheticConfig};
use vdvae::trainer::{metrics_header, train, KlPhase, NormStats, TrainConfig, TrainOutputs, TrainState};

fn toy() -> ModelConfig {
    ModelConfig {
        width: 8,
        bottleneck_ratio: 0.5,
        zdim: 2,
        enc_spec: BlockSpec::parse("8x1,4x1,1x1").unwrap(),
        dec_spec: BlockSpec::parse("1x1,4x1,8x1").unwrap(),
        image_size: 8,
        image_channels: 3,
        prior_mode: PriorMode::Separate,
        ff_group_size: 4,
        dmol_mixtures: 2,
        residual_scaling: true,
        downsample: DownsampleMode::AvgPool,
        independent_group: 1,
    }
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let ds = generate_synthetic(&SyntheticConfig { n: 40, ..Default::default() }).unwrap();
    let (tr, val) = ds.split_holdout(8, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        total_steps: 6,
        checkpoint_every: 3,
        ..Default::default()
    };
    let model = Vdvae::new(toy()).unwrap();
    let mut state = TrainState::new(toy(), cfg, NormStats::compute(&tr).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&mut state, &model, &tr, Some(&val), dir.path()).unwrap();
    assert_eq!(summary.steps, 6);
    assert_eq!(summary.applied + summary.skipped, 6);
    let v = summary.val.unwrap();
    assert!(v.loss.is_finite() && v.kl >= 0.0);
    let out = TrainOutputs { dir: dir.path().to_path_buf() };
    let csv = std::fs::read_to_string(out.metrics()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], metrics_header(3));
    assert_eq!(lines.len(), 7);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 6 + 3));
    assert_eq!(load_checkpoint(&out.checkpoint(3)).unwrap().step, 3);
    assert_eq!(load_checkpoint(&out.last()).unwrap(), state);
}

#[test]
fn phase_switch_on_resume_keeps_the_logged_loss_comparable() {
    let ds = generate_synthetic(&SyntheticConfig { n: 24, ..Default::default() }).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        total_steps: 2,
        ..Default::default()
    };
    let model = Vdvae::new(toy()).unwrap();
    let norm = NormStats::compute(&ds).unwrap();
    let mut a = TrainState::new(toy(), cfg.clone(), norm.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&mut a, &model, &ds, None, dir.path()).unwrap();
    let mut b = a.clone();
    a.config.total_steps = 3;
    b.config.total_steps = 3;
    b.config.kl_phase = KlPhase::TrueKl;
    let la = vdvae::trainer::train_step(&mut a, &model, &ds).unwrap();
    let lb = vdvae::trainer::train_step(&mut b, &model, &ds).unwrap();
    // Same batch and noise, so the logged true-KL loss matches before the
    // update even though the gradients differ.
    assert_eq!(la.loss_nats, lb.loss_nats);
    assert_ne!(a.params, b.params);
}
