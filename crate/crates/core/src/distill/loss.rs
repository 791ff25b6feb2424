use super::{ssim_map, FdWeights, SsimParams};
use crate::error::{Error, Result};
use crate::net::FeatureBundle;
use crate::tensor::{Tape, Tensor, Var};

/// Per-map dissimilarity `(1 - SSIM) / 2`, shaped like the leading axes of
/// the maps (`[B, C]` for `[B, C, H, W]` inputs).
pub fn s2il_terms(tape: &mut Tape, current: Var, previous: Var, params: &SsimParams) -> Result<Var> {
    let s = ssim_map(tape, current, previous, params)?;
    let half = tape.mul_scalar(s, -0.5)?;
    tape.add_scalar(half, 0.5)
}

/// Structural distillation loss over last-layer maps `[B, C, H, W]`:
/// the batch mean of the per-sample sum over channels of `(1 - SSIM) / 2`.
///
/// The teacher maps are read as constants; their gradient is zero.
pub fn s2il_loss(tape: &mut Tape, current: Var, previous: Var, params: &SsimParams) -> Result<Var> {
    let (cs, ps) = (tape.shape(current).to_vec(), tape.shape(previous).to_vec());
    if cs.len() != 4 || ps.len() != 4 {
        return Err(Error::contract(format!("expected [B, C, H, W] maps, got {cs:?} and {ps:?}")));
    }
    if cs[1] != ps[1] {
        return Err(Error::contract(format!(
            "student has {} channels, teacher has {}",
            cs[1], ps[1]
        )));
    }
    let terms = s2il_terms(tape, current, previous, params)?;
    let per_sample = tape.sum_last(terms)?;
    tape.mean(per_sample)
}

/// Sum of squared entries per `(b, c)` map: `[B, C, H, W] -> [B, C]`.
fn squared_map_norms(tape: &mut Tape, current: Var, previous: Var) -> Result<Var> {
    let shape = tape.shape(current).to_vec();
    let prev = tape.value(previous).clone();
    let prev = tape.constant(prev);
    let diff = tape.sub(current, prev)?;
    let sq = tape.mul(diff, diff)?;
    let (lead, plane) = match shape.len() {
        4 => (vec![shape[0], shape[1]], shape[2] * shape[3]),
        2 => (vec![shape[0], 1], shape[1]),
        _ => return Err(Error::contract(format!("unsupported feature shape {shape:?}"))),
    };
    let mut flat = lead;
    flat.push(plane);
    let sq = tape.reshape(sq, flat)?;
    tape.sum_last(sq)
}

/// Squared-norm feature distillation across every backbone layer plus the
/// pooled feature, averaged over the batch.
///
/// Without weights every term has weight one; with weights each map's term is
/// scaled by its importance.
pub fn baseline_fd_loss(
    tape: &mut Tape,
    current: &FeatureBundle,
    previous: &FeatureBundle,
    weights: Option<&FdWeights>,
) -> Result<Var> {
    if current.layers.len() != previous.layers.len() {
        return Err(Error::contract(format!(
            "student has {} layers, teacher has {}",
            current.layers.len(),
            previous.layers.len()
        )));
    }
    if let Some(w) = weights {
        w.validate()?;
        if w.layers.len() != current.layers.len() {
            return Err(Error::contract(format!(
                "weights cover {} layers, bundle has {}",
                w.layers.len(),
                current.layers.len()
            )));
        }
    }
    let batch = tape.shape(current.pooled)[0];
    let mut parts = Vec::with_capacity(current.layers.len() + 1);
    for (i, (&cur, &prev)) in current.layers.iter().zip(&previous.layers).enumerate() {
        if tape.shape(cur) != tape.shape(prev) {
            return Err(Error::contract(format!(
                "layer {i}: student {:?} vs teacher {:?}",
                tape.shape(cur),
                tape.shape(prev)
            )));
        }
        let norms = squared_map_norms(tape, cur, prev)?;
        let term = match weights {
            None => norms,
            Some(w) => {
                let channels = tape.shape(norms)[1];
                let row = &w.layers[i];
                if row.len() != channels {
                    return Err(Error::contract(format!(
                        "layer {i}: {} weights for {channels} channels",
                        row.len()
                    )));
                }
                let tiled: Vec<f64> = (0..batch).flat_map(|_| row.iter().copied()).collect();
                let rho = tape.constant(Tensor::new(vec![batch, channels], tiled)?);
                tape.mul(norms, rho)?
            }
        };
        parts.push(tape.sum(term)?);
    }
    let pooled = squared_map_norms(tape, current.pooled, previous.pooled)?;
    let pooled = match weights {
        None => pooled,
        Some(w) => tape.mul_scalar(pooled, w.pooled)?,
    };
    parts.push(tape.sum(pooled)?);

    let all = tape.concat(&parts, 0)?;
    let total = tape.sum(all)?;
    tape.mul_scalar(total, 1.0 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(tape: &mut Tape, maps: Tensor, grad: bool) -> FeatureBundle {
        let layer = tape.leaf(maps, grad);
        let pooled = tape.global_avg_pool(layer).unwrap();
        FeatureBundle {
            layers: vec![layer],
            pooled,
            scores: pooled,
        }
    }

    #[test]
    fn identical_maps_give_zero_structural_loss() {
        let maps = Tensor::new(vec![1, 2, 2, 2], vec![0.1, 0.5, 0.2, 0.9, 1.0, 0.0, 0.3, 0.3]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(maps.clone());
        let b = tape.constant(maps);
        let l = s2il_loss(&mut tape, a, b, &SsimParams::default()).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn batch_mean_of_per_sample_losses() {
        let a0 = vec![0.1, 0.5, 0.2, 0.9];
        let b0 = vec![0.9, 0.1, 0.4, 0.0];
        let a1 = vec![1.0, 0.0, 0.0, 1.0];
        let b1 = vec![0.2, 0.3, 0.8, 0.1];
        let p = SsimParams::default();
        let single = |a: &[f64], b: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], a.to_vec()).unwrap());
            let y = tape.constant(Tensor::new(vec![1, 1, 2, 2], b.to_vec()).unwrap());
            let l = s2il_loss(&mut tape, x, y, &p).unwrap();
            tape.value(l).item().unwrap()
        };
        let (la, lb) = (single(&a0, &b0), single(&a1, &b1));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 2, 2], [a0, a1].concat()).unwrap());
        let y = tape.constant(Tensor::new(vec![2, 1, 2, 2], [b0, b1].concat()).unwrap());
        let l = s2il_loss(&mut tape, x, y, &p).unwrap();
        assert!((tape.value(l).item().unwrap() - (la + lb) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 2, 2, 2], 0.5));
        let b = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.5));
        assert!(matches!(
            s2il_loss(&mut tape, a, b, &SsimParams::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn weighted_squared_norm_arithmetic() {
        let mut tape = Tape::new();
        let cur = bundle(&mut tape, Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap(), false);
        let prev = bundle(&mut tape, Tensor::zeros(&[1, 1, 1, 2]), false);
        let w = FdWeights {
            layers: vec![vec![3.0]],
            pooled: 0.0,
        };
        let l = baseline_fd_loss(&mut tape, &cur, &prev, Some(&w)).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 15.0);
    }

    #[test]
    fn weight_shape_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let cur = bundle(&mut tape, Tensor::full(&[1, 2, 2, 2], 1.0), false);
        let prev = bundle(&mut tape, Tensor::zeros(&[1, 2, 2, 2]), false);
        let w = FdWeights {
            layers: vec![vec![1.0]],
            pooled: 1.0,
        };
        assert!(matches!(
            baseline_fd_loss(&mut tape, &cur, &prev, Some(&w)),
            Err(Error::Contract(_))
        ));
    }
}
