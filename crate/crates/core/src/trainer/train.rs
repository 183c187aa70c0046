use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objective::{phase_policy, training_loss};
use super::optim::{grads_norm, maybe_skip_update, UpdateOutcome};
use super::state::{step_rng, TrainState};
use super::NormStats;
use crate::arch::{LatentPolicy, Parameters, RngNoise, Vdvae};
use crate::autodiff::{Graph, Tensor};
use crate::data::{save_checkpoint, to_unit_range, Dataset};
use crate::dist::{elbo, nats_to_bpd, ElboValues};
use crate::error::{Error, Result};

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based index of the batch just processed.
    pub step: u64,
    pub applied: bool,
    /// True-KL negative ELBO in nats per subpixel.
    pub loss_nats: f64,
    pub grad_norm: f64,
    /// Cumulative skipped updates.
    pub skip_count: u64,
    /// Per-layer KL in nats per subpixel.
    pub kl_layers: Vec<f64>,
}

impl StepLog {
    pub fn loss_bpd(&self) -> f64 {
        nats_to_bpd(self.loss_nats)
    }
}

pub fn metrics_header(layers: usize) -> String {
    let mut h = String::from("step,applied,loss_nats,loss_bpd,grad_norm,skipped");
    for i in 0..layers {
        h.push_str(&format!(",kl_layer_{i}"));
    }
    h
}

/// `applied` is 1 when this step's update was applied, `skipped` is the
/// running skip count.
pub fn metrics_row(log: &StepLog) -> String {
    let mut r = format!(
        "{},{},{},{},{},{}",
        log.step,
        u8::from(log.applied),
        log.loss_nats,
        log.loss_bpd(),
        log.grad_norm,
        log.skip_count
    );
    for k in &log.kl_layers {
        r.push_str(&format!(",{k}"));
    }
    r
}

/// Loss terms and gradients of one batch.
pub struct BatchGradients {
    pub values: ElboValues,
    pub grads: Parameters<f32>,
    pub grad_norm: f64,
}

/// Forward and backward pass on NHWC bytes `pixels` holding `n` images.
pub fn batch_gradients(
    state: &TrainState,
    model: &Vdvae,
    pixels: &[u8],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchGradients> {
    let cfg = model.config();
    let (s, c) = (cfg.image_size, cfg.image_channels);
    let input: Tensor<f32> = state.norm.normalize(pixels, n, s, s)?;
    let target: Tensor<f32> = to_unit_range(pixels, n, s, s, c);
    let mut g = Graph::new();
    let bound = state.params.bind(&mut g, true);
    let x = g.constant(input);
    let fwd = model.forward(&mut g, &bound, x, phase_policy(state.config.kl_phase), &mut RngNoise(rng))?;
    let tl = training_loss(&mut g, &target, &fwd.state, fwd.dmol, model.dmol_layout(), state.config.kl_phase)?;
    g.backward(tl.loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in bound.iter() {
        let grad = g
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(state.params.get(name).expect("bound from params").shape()));
        grads.insert(name.clone(), grad);
    }
    let grads = Parameters::from_map(grads);
    let grad_norm = grads_norm(&grads);
    Ok(BatchGradients {
        values: tl.elbo.values(&g),
        grads,
        grad_norm,
    })
}

/// Indices of the batch used at `step`, drawn with replacement.
pub fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Apply precomputed gradients, honoring the skip threshold. Fails if an
/// applied step had a non-finite loss.
pub fn apply_gradients(state: &mut TrainState, grads: &Parameters<f32>, grad_norm: f64, loss: f64) -> Result<UpdateOutcome> {
    let outcome = maybe_skip_update(
        &mut state.params,
        &mut state.adam_m,
        &mut state.adam_v,
        &mut state.ema,
        grads,
        grad_norm,
        state.applied,
        &state.config,
    );
    state.step += 1;
    match outcome {
        UpdateOutcome::Applied => {
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    term: "loss",
                    layer: None,
                });
            }
            state.applied += 1;
        }
        UpdateOutcome::Skipped => state.skip_count += 1,
    }
    Ok(outcome)
}

/// Process the next batch of `train`.
pub fn train_step(state: &mut TrainState, model: &Vdvae, train: &Dataset) -> Result<StepLog> {
    let mut rng = step_rng(state.config.seed, state.step);
    let idx = batch_indices(&mut rng, train.len(), state.config.batch_size);
    let pixels = train.gather(&idx);
    let bg = batch_gradients(state, model, &pixels, idx.len(), &mut rng)?;
    let outcome = apply_gradients(state, &bg.grads, bg.grad_norm, bg.values.loss)?;
    Ok(StepLog {
        step: state.step,
        applied: outcome == UpdateOutcome::Applied,
        loss_nats: bg.values.loss,
        grad_norm: bg.grad_norm,
        skip_count: state.skip_count,
        kl_layers: bg.values.kl_layers,
    })
}

/// Mean per-subpixel ELBO terms over `ds`, one posterior sample per image.
pub fn evaluate(
    params: &Parameters<f32>,
    model: &Vdvae,
    norm: &NormStats,
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<ElboValues> {
    if ds.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let cfg = model.config();
    let (s, c) = (cfg.image_size, cfg.image_channels);
    if (ds.height(), ds.width(), ds.channels()) != (s, s, c) {
        return Err(Error::Invalid(format!(
            "data is {}x{}x{}, model expects {s}x{s}x{c}",
            ds.height(),
            ds.width(),
            ds.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = model.num_layers();
    let mut total = ElboValues {
        nll: 0.0,
        kl_layers: vec![0.0; layers],
        kl: 0.0,
        loss: 0.0,
    };
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let pixels = ds.gather(chunk);
        let n = chunk.len();
        let input: Tensor<f32> = norm.normalize(&pixels, n, s, s)?;
        let target: Tensor<f32> = to_unit_range(&pixels, n, s, s, c);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(input);
        let fwd = model.forward(&mut g, &bound, x, LatentPolicy::posterior(), &mut RngNoise(&mut rng))?;
        let v = elbo(&mut g, &target, &fwd.state, fwd.dmol, model.dmol_layout())?.values(&g);
        let w = n as f64 / ds.len() as f64;
        total.nll += w * v.nll;
        total.kl += w * v.kl;
        total.loss += w * v.loss;
        for (t, k) in total.kl_layers.iter_mut().zip(&v.kl_layers) {
            *t += w * k;
        }
    }
    Ok(total)
}

/// Where [`train`] writes its outputs.
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{step:08}.vdvc"))
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.vdvc")
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub applied: u64,
    pub skipped: u64,
    /// EMA parameters on the validation split.
    pub val: Option<ElboValues>,
}

/// Run until `state.config.total_steps`, appending to the metrics log and
/// writing checkpoints into `out`, then evaluate the EMA weights on `val`.
pub fn train(state: &mut TrainState, model: &Vdvae, train: &Dataset, val: Option<&Dataset>, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let outputs = TrainOutputs { dir: out.to_path_buf() };
    let path = outputs.metrics();
    let fresh = state.step == 0 || !path.exists();
    let file = if fresh {
        File::create(&path)?
    } else {
        OpenOptions::new().append(true).open(&path)?
    };
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{}", metrics_header(model.num_layers()))?;
    }
    while state.step < state.config.total_steps {
        let row = train_step(state, model, train)?;
        writeln!(log, "{}", metrics_row(&row))?;
        let every = state.config.checkpoint_every;
        if every > 0 && state.step.is_multiple_of(every) {
            log.flush()?;
            save_checkpoint(&outputs.checkpoint(state.step), state)?;
        }
    }
    log.flush()?;
    save_checkpoint(&outputs.last(), state)?;
    let val = match val {
        Some(v) if !v.is_empty() => Some(evaluate(
            &state.ema,
            model,
            &state.norm,
            v,
            state.config.batch_size,
            state.config.seed,
        )?),
        _ => None,
    };
    Ok(TrainSummary {
        steps: state.step,
        applied: state.applied,
        skipped: state.skip_count,
        val,
    })
}
