//! Independent per-cluster templates combined by `max_m`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::mining::{train_mined, RigidMiner};
use super::platt::platt_calibrate;
use super::{MixtureModel, Template, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{dot, FeatureGrid, WindowDescriptor};

#[derive(Clone, Debug)]
pub struct MixtureFit {
    pub model: MixtureModel,
    /// Final training objective per trained template.
    pub objectives: Vec<f64>,
    /// Negatives in each template's final working set.
    pub negatives: Vec<usize>,
}

/// Trains one template per cluster on that cluster's positives and the
/// shared negative images, then calibrates each on its own training scores.
/// `cs[i]` is the trade-off for cluster `i`. Clusters with fewer than
/// `config.min_pos` positives are skipped and listed in the model.
pub fn train_mixture(
    clusters: &[Vec<WindowDescriptor>],
    neg_grids: &[FeatureGrid],
    cs: &[f64],
    config: &TrainConfig,
) -> Result<MixtureFit> {
    if cs.len() != clusters.len() {
        return Err(Error::Validation(format!(
            "{} C values for {} clusters",
            cs.len(),
            clusters.len()
        )));
    }
    let results: Vec<Result<Option<(Template, f64, usize)>>> = clusters
        .par_iter()
        .enumerate()
        .map(|(id, pos)| {
            if pos.len() < config.min_pos.max(1) {
                return Ok(None);
            }
            let shape = pos[0].shape;
            if pos.iter().any(|p| p.shape != shape) {
                return Err(Error::Data(format!("cluster {id} mixes window shapes")));
            }
            let miner = RigidMiner {
                h: shape.0,
                w: shape.1,
                dim: shape.2,
            };
            let positives: Vec<Vec<f64>> = pos.iter().map(|p| p.values.clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (id as u64).wrapping_mul(0x9E37_79B9));
            let rep = train_mined(&miner, &positives, neg_grids, cs[id], config, &mut rng)?;
            let mut scores = Vec::with_capacity(positives.len() + rep.negatives.len());
            let mut labels = Vec::with_capacity(scores.capacity());
            for p in &positives {
                scores.push(dot(&rep.w, p) + rep.bias);
                labels.push(true);
            }
            for n in &rep.negatives {
                scores.push(dot(&rep.w, n) + rep.bias);
                labels.push(false);
            }
            let platt = platt_calibrate(&scores, &labels)?.params;
            let objective = *rep.full_objectives.last().unwrap_or(&f64::NAN);
            Ok(Some((
                Template {
                    h: shape.0,
                    w: shape.1,
                    dim: shape.2,
                    weights: rep.w,
                    bias: rep.bias,
                    platt: Some(platt),
                    mixture_id: id,
                },
                objective,
                rep.negatives.len(),
            )))
        })
        .collect();

    let mut model = MixtureModel {
        templates: Vec::new(),
        skipped: Vec::new(),
    };
    let mut objectives = Vec::new();
    let mut negatives = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r? {
            Some((t, obj, n)) => {
                model.templates.push(t);
                objectives.push(obj);
                negatives.push(n);
            }
            None => {
                let reason = format!(
                    "{} positives, fewer than {}",
                    clusters[id].len(),
                    config.min_pos
                );
                log::info!("skipping cluster {id}: {reason}");
                model.skipped.push((id, reason));
            }
        }
    }
    if model.templates.is_empty() {
        return Err(Error::Data("every cluster was skipped".into()));
    }
    Ok(MixtureFit {
        model,
        objectives,
        negatives,
    })
}
