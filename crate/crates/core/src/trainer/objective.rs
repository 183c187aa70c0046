use super::config::KlPhase;
use crate::arch::{LatentPolicy, TopDownState};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::dist::{elbo, gaussian_kl, kl_standard_normal, normalized_sum, subpixels, sum_scalars, DmolLayout, Elbo};
use crate::error::{Error, Result};

/// KL term seen by the optimizer, normalized per subpixel like the ELBO.
///
/// In the standard-prior phase the posterior is pulled toward N(0, I) and
/// the prior is fit to the detached posterior. The prior-fitting term
/// enters with its value subtracted back out, so the reported value is
/// KL(q || N(0, I)) alone while the gradients are those of the sum.
pub fn kl_phase_loss<T: Scalar>(g: &mut Graph<T>, state: &TopDownState, phase: KlPhase, denom: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(state.layers.len());
    for rec in &state.layers {
        let q = rec
            .q
            .ok_or_else(|| Error::Invalid(format!("layer {} did not sample from the posterior", rec.index)))?;
        let per_elem = match phase {
            KlPhase::TrueKl => gaussian_kl(g, q, rec.p)?,
            KlPhase::StandardPrior => {
                let to_standard = kl_standard_normal(g, q)?;
                let fixed = q.detach(g);
                let fit_prior = gaussian_kl(g, fixed, rec.p)?;
                let offset = g.detach(fit_prior);
                let fit_prior = g.sub(fit_prior, offset)?;
                g.add(to_standard, fit_prior)?
            }
        };
        terms.push(normalized_sum(g, per_elem, denom)?);
    }
    sum_scalars(g, &terms)
}

/// Forward-pass policy for training in `phase`. The standard-prior phase
/// detaches the prior's input so that fitting the prior trains only the
/// prior.
pub fn phase_policy(phase: KlPhase) -> LatentPolicy {
    LatentPolicy {
        detach_prior_input: phase == KlPhase::StandardPrior,
        ..LatentPolicy::posterior()
    }
}

/// The optimized loss together with the (true-KL) ELBO terms for logging.
#[derive(Clone, Debug)]
pub struct TrainingLoss {
    pub loss: Var,
    pub elbo: Elbo,
}

pub fn training_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: &Tensor<T>,
    state: &TopDownState,
    dmol: Var,
    layout: DmolLayout,
    phase: KlPhase,
) -> Result<TrainingLoss> {
    let e = elbo(g, x, state, dmol, layout)?;
    let loss = match phase {
        KlPhase::TrueKl => e.loss,
        KlPhase::StandardPrior => {
            let (n, d) = subpixels(x)?;
            let kl = kl_phase_loss(g, state, phase, n * d)?;
            g.add(e.nll, kl)?
        }
    };
    Ok(TrainingLoss { loss, elbo: e })
}
