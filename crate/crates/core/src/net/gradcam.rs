use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Which class score the importance gradient is taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradCamScore {
    /// Scaled similarity before the softmax.
    #[default]
    Logit,
    /// Softmax probability of the class.
    Probability,
}

/// Samples per forward pass when computing importances.
const CHUNK: usize = 64;

/// Mean over samples of the spatially averaged gradient of column `target`
/// of `scores` with respect to `features` (`[B, C, H, W]`, registered as a
/// trainable leaf on `tape`). Consumes the tape's backward pass.
pub fn gradcam_from_scores(tape: &mut Tape, features: Var, scores: Var, target: usize) -> Result<Vec<f64>> {
    let fshape = tape.shape(features).to_vec();
    let sshape = tape.shape(scores).to_vec();
    if fshape.len() != 4 || sshape.len() != 2 || sshape[0] != fshape[0] {
        return Err(Error::dim(
            "gradcam",
            format!("features {fshape:?} and scores {sshape:?} disagree"),
        ));
    }
    if target >= sshape[1] {
        return Err(Error::contract(format!("target slot {target} outside {} classes", sshape[1])));
    }
    let idx = vec![target; sshape[0]];
    let picked = tape.pick(scores, &idx)?;
    let total = tape.sum(picked)?;
    let grads = tape.backward(total)?;
    let g = grads
        .get(features)
        .ok_or_else(|| Error::contract("features must be a trainable leaf"))?;
    let (b, c, plane) = (fshape[0], fshape[1], fshape[2] * fshape[3]);
    let mut alpha = vec![0.0; c];
    for sample in g.data().chunks(c * plane) {
        for (j, map) in sample.chunks(plane).enumerate() {
            alpha[j] += map.iter().sum::<f64>() / plane as f64;
        }
    }
    alpha.iter_mut().for_each(|a| *a /= b as f64);
    Ok(alpha)
}

/// Per-channel Grad-CAM importance of the last backbone layer for class
/// slot `target`, averaged over `images`.
pub fn gradcam_importance(model: &Model, images: &[&[f32]], target: usize, score: GradCamScore) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::contract("grad-cam needs at least one sample"));
    }
    let mut acc = vec![0.0; model.backbone.config.final_channels()];
    for chunk in images.chunks(CHUNK) {
        let batch = model.batch_from_images(chunk)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(batch);
        let (layers, _) = model.forward_features(&mut tape, &bound, x)?;
        let last = tape.value(*layers.last().expect("validated backbone")).clone();
        let features = tape.param(last);
        let pooled = tape.global_avg_pool(features)?;
        let sims = model.head_scores(&mut tape, &bound, pooled)?;
        let logits = tape.scale_by(sims, bound.scale)?;
        let scores = match score {
            GradCamScore::Logit => logits,
            GradCamScore::Probability => tape.softmax(logits)?,
        };
        let alpha = gradcam_from_scores(&mut tape, features, scores, target)?;
        for (a, v) in acc.iter_mut().zip(alpha) {
            *a += v * chunk.len() as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= images.len() as f64);
    Ok(acc)
}
