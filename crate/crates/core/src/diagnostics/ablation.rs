use std::fmt::Write as _;

use crate::arch::{BlockSpec, ModelConfig, Parameters, Vdvae};
use crate::data::Splits;
use crate::dist::{nats_to_bpd, ElboValues};
use crate::error::{Error, Result};
use crate::trainer::{evaluate, train_step, NormStats, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub val_loss_bpd: f64,
    pub params: usize,
    pub layout_hash: u32,
    pub first_layer_kl_bpd: f64,
    pub skipped: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,seed,val_loss_bpd,params\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.config, r.seed, r.val_loss_bpd, r.params);
        }
        s
    }

    /// Mean validation loss of the rows labelled `config`.
    pub fn mean_loss(&self, config: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.config == config).map(|r| r.val_loss_bpd).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Training budget and evaluation choices shared by every cell.
#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub train: TrainConfig,
    pub use_ema: bool,
    pub eval_batch: usize,
}

/// Train one model from scratch and evaluate it on the validation split.
pub fn train_cell(cfg: &ModelConfig, settings: &AblationSettings, splits: &Splits, seed: u64) -> Result<(TrainState, ElboValues)> {
    let norm = NormStats::compute(&splits.train)?;
    let train = TrainConfig {
        seed,
        ..settings.train.clone()
    };
    let model = Vdvae::new(cfg.clone())?;
    let mut state = TrainState::new(cfg.clone(), train, norm)?;
    while state.step < state.config.total_steps {
        train_step(&mut state, &model, &splits.train)?;
    }
    let params = if settings.use_ema { &state.ema } else { &state.params };
    let val = evaluate(params, &model, &state.norm, &splits.val, settings.eval_batch, seed)?;
    Ok((state, val))
}

fn row(config: String, seed: u64, state: &TrainState, val: &ElboValues) -> AblationRow {
    AblationRow {
        config,
        seed,
        val_loss_bpd: val.loss_bpd(),
        params: state.params.count(),
        layout_hash: state.params.layout_hash(),
        first_layer_kl_bpd: val.kl_layers.first().map_or(0.0, |&k| nats_to_bpd(k)),
        skipped: state.skip_count,
    }
}

/// Label used for a depth-ablation cell.
pub fn depth_label(cfg: &ModelConfig) -> String {
    format!("K={},depth={}", cfg.independent_group, cfg.stochastic_depth())
}

/// Train `base` under each independence group size in `ks`, checking that
/// the parameter layout never changes.
pub fn depth_ablation(
    base: &ModelConfig,
    ks: &[usize],
    seeds: &[u64],
    settings: &AblationSettings,
    splits: &Splits,
) -> Result<AblationResult> {
    let cfgs = ks
        .iter()
        .map(|&k| {
            let cfg = ModelConfig {
                independent_group: k,
                ..base.clone()
            };
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let hashes: Vec<u32> = cfgs
        .iter()
        .map(|c| Parameters::<f32>::init(c, &mut crate::trainer::init_rng(0)).map(|p| p.layout_hash()))
        .collect::<Result<_>>()?;
    if hashes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Invalid("depth grid changes the parameter layout".into()));
    }
    let mut out = AblationResult::default();
    for cfg in &cfgs {
        for &seed in seeds {
            let (state, val) = train_cell(cfg, settings, splits, seed)?;
            out.rows.push(row(depth_label(cfg), seed, &state, &val));
        }
    }
    Ok(out)
}

/// Train one model per decoder spec; all specs must hold the same number
/// of blocks.
pub fn layer_distribution_ablation(
    base: &ModelConfig,
    specs: &[BlockSpec],
    seeds: &[u64],
    settings: &AblationSettings,
    splits: &Splits,
) -> Result<AblationResult> {
    let total = specs
        .first()
        .ok_or_else(|| Error::Invalid("no decoder specs given".into()))?
        .total_blocks();
    if let Some(bad) = specs.iter().find(|s| s.total_blocks() != total) {
        return Err(Error::Invalid(format!(
            "spec {bad} has {} blocks, expected {total}",
            bad.total_blocks()
        )));
    }
    let cfgs = specs
        .iter()
        .map(|s| {
            let cfg = ModelConfig {
                dec_spec: s.clone(),
                ..base.clone()
            };
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = AblationResult::default();
    for cfg in &cfgs {
        for &seed in seeds {
            let (state, val) = train_cell(cfg, settings, splits, seed)?;
            // Commas would break the CSV column.
            out.rows.push(row(cfg.dec_spec.to_string().replace(',', " "), seed, &state, &val));
        }
    }
    Ok(out)
}
