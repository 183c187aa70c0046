use std::fmt::Write as _;

use crate::arch::{Parameters, Vdvae};
use crate::data::Dataset;
use crate::dist::nats_to_bpd;
use crate::error::Result;
use crate::trainer::{evaluate, NormStats};

/// Layers whose rate falls below this many bits per dimension count as
/// collapsed.
pub const COLLAPSE_THRESHOLD_BPD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub layer: usize,
    pub resolution: usize,
    pub kl_bpd: f64,
    pub cum_kl_bpd: f64,
}

impl RateRow {
    pub fn collapsed(&self) -> bool {
        self.kl_bpd < COLLAPSE_THRESHOLD_BPD
    }
}

/// Per-layer KL rate and its running total.
#[derive(Clone, Debug, PartialEq)]
pub struct RateProfile {
    pub rows: Vec<RateRow>,
}

impl RateProfile {
    /// Build from per-layer KL in nats per subpixel.
    pub fn from_nats(kl_nats: &[f64], resolutions: &[usize]) -> Self {
        let mut cum = 0.0;
        let rows = kl_nats
            .iter()
            .zip(resolutions)
            .enumerate()
            .map(|(layer, (&k, &resolution))| {
                let kl_bpd = nats_to_bpd(k);
                cum += kl_bpd;
                RateRow {
                    layer,
                    resolution,
                    kl_bpd,
                    cum_kl_bpd: cum,
                }
            })
            .collect();
        RateProfile { rows }
    }

    pub fn total_bpd(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_kl_bpd)
    }

    pub fn collapsed_layers(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.collapsed()).map(|r| r.layer).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,resolution,kl_bpd,cum_kl_bpd\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.layer, r.resolution, r.kl_bpd, r.cum_kl_bpd);
        }
        s
    }
}

/// Average KL per layer over `ds`, one posterior sample per image.
pub fn kl_per_layer(
    params: &Parameters<f32>,
    model: &Vdvae,
    norm: &NormStats,
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<RateProfile> {
    let v = evaluate(params, model, norm, ds, batch_size, seed)?;
    Ok(RateProfile::from_nats(&v.kl_layers, &model.layer_resolutions()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_is_prefix_sum() {
        let p = RateProfile::from_nats(&[0.0, 0.1, 0.0, 0.3], &[1, 4, 4, 8]);
        let mut acc = 0.0;
        for r in &p.rows {
            acc += r.kl_bpd;
            assert_eq!(r.cum_kl_bpd, acc);
        }
        assert_eq!(p.collapsed_layers(), vec![0, 2]);
        assert!(p.to_csv().starts_with("layer,resolution,kl_bpd,cum_kl_bpd\n0,1,0,0\n"));
    }
}
