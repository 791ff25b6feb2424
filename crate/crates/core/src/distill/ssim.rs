use super::{PowerMode, SsimParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Luminance, contrast and structure terms for one pair of maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimComponents {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

fn check_pair(u: &Tensor, v: &Tensor) -> Result<usize> {
    if u.shape() != v.shape() {
        return Err(Error::dim(
            "ssim",
            format!("map shapes {:?} and {:?} differ", u.shape(), v.shape()),
        ));
    }
    if u.len() < 2 {
        return Err(Error::contract("ssim needs at least two spatial positions per map"));
    }
    Ok(u.len())
}

/// Statistics use every position of the single map with population (1/N)
/// normalisation.
pub fn ssim_components(u: &Tensor, v: &Tensor, params: &SsimParams) -> Result<SsimComponents> {
    params.validate()?;
    let n = check_pair(u, v)? as f64;
    let (u, v) = (u.data(), v.data());
    let mu_u = u.iter().sum::<f64>() / n;
    let mu_v = v.iter().sum::<f64>() / n;
    let var_u = u.iter().map(|a| (a - mu_u).powi(2)).sum::<f64>() / n;
    let var_v = v.iter().map(|b| (b - mu_v).powi(2)).sum::<f64>() / n;
    let cov = u.iter().zip(v).map(|(a, b)| (a - mu_u) * (b - mu_v)).sum::<f64>() / n;
    // sqrt(var_u · var_v) rather than sd_u · sd_v: it is exactly var_u when
    // u = v, so identical maps score exactly 1.
    let sd_uv = (var_u * var_v).sqrt();
    Ok(SsimComponents {
        luminance: (2.0 * mu_u * mu_v + params.c1) / (mu_u * mu_u + mu_v * mu_v + params.c1),
        contrast: (2.0 * sd_uv + params.c2) / (var_u + var_v + params.c2),
        structure: (cov + params.c3) / (sd_uv + params.c3),
    })
}

fn powered(base: f64, e: f64, mode: PowerMode) -> Result<f64> {
    match mode {
        PowerMode::SignPreserving => Ok(if base == 0.0 { 0.0 } else { base.signum() * base.abs().powf(e) }),
        PowerMode::Plain => {
            if base < 0.0 && e.fract() != 0.0 {
                return Err(Error::guard(
                    "ssim",
                    format!("negative component {base} with non-integer exponent {e} in plain mode"),
                ));
            }
            Ok(base.powf(e))
        }
    }
}

/// Structural similarity `l^p · c^q · s^r` of two maps.
pub fn ssim(u: &Tensor, v: &Tensor, params: &SsimParams) -> Result<f64> {
    let comps = ssim_components(u, v, params)?;
    let exps = params.effective_exponents();
    let mut out = 1.0;
    for (base, e) in [comps.luminance, comps.contrast, comps.structure].into_iter().zip(exps) {
        if e != 0.0 {
            out *= powered(base, e, params.power)?;
        }
    }
    Ok(out)
}

/// Per-map structural similarity on the tape.
///
/// `current` and `previous` hold maps with the spatial plane on the last
/// two axes (typically `[B, C, H, W]`); the result has the leading shape
/// (`[B, C]`). `previous` is read as a constant, so no gradient flows into it.
pub fn ssim_map(tape: &mut Tape, current: Var, previous: Var, params: &SsimParams) -> Result<Var> {
    params.validate()?;
    let shape = tape.shape(current).to_vec();
    if shape != tape.shape(previous) {
        return Err(Error::contract(format!(
            "teacher maps {:?} do not match student maps {shape:?}",
            tape.shape(previous)
        )));
    }
    if shape.len() < 2 || shape[shape.len() - 2] * shape[shape.len() - 1] < 2 {
        return Err(Error::contract("ssim needs at least two spatial positions per map"));
    }
    let prev = tape.value(previous).clone();
    let prev = tape.constant(prev);
    let [ep, eq, er] = params.effective_exponents();

    let mut factors = Vec::with_capacity(3);
    if ep != 0.0 {
        let mu_x = tape.spatial_mean(current)?;
        let mu_y = tape.spatial_mean(prev)?;
        let xy = tape.mul(mu_x, mu_y)?;
        let num = tape.mul_scalar(xy, 2.0)?;
        let num = tape.add_scalar(num, params.c1)?;
        let xx = tape.mul(mu_x, mu_x)?;
        let yy = tape.mul(mu_y, mu_y)?;
        let den = tape.add(xx, yy)?;
        let den = tape.add_scalar(den, params.c1)?;
        let l = tape.div(num, den)?;
        factors.push((l, ep));
    }
    if eq != 0.0 || er != 0.0 {
        let var_x = tape.spatial_var(current)?;
        let var_y = tape.spatial_var(prev)?;
        let var_xy = tape.mul(var_x, var_y)?;
        let sd_xy = tape.sqrt(var_xy)?;
        if eq != 0.0 {
            let num = tape.mul_scalar(sd_xy, 2.0)?;
            let num = tape.add_scalar(num, params.c2)?;
            let den = tape.add(var_x, var_y)?;
            let den = tape.add_scalar(den, params.c2)?;
            let c = tape.div(num, den)?;
            factors.push((c, eq));
        }
        if er != 0.0 {
            let cov = tape.spatial_cov(current, prev)?;
            let num = tape.add_scalar(cov, params.c3)?;
            let den = tape.add_scalar(sd_xy, params.c3)?;
            let s = tape.div(num, den)?;
            factors.push((s, er));
        }
    }

    let mut acc: Option<Var> = None;
    for (base, e) in factors {
        let term = match params.power {
            PowerMode::SignPreserving => tape.signed_pow(base, e)?,
            PowerMode::Plain => tape.pow(base, e)?,
        };
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.mul(prev, term)?,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => {
            let lead = shape[..shape.len() - 2].to_vec();
            let lead = if lead.is_empty() { vec![1] } else { lead };
            Ok(tape.constant(Tensor::full(&lead, 1.0)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(data: &[f64]) -> Tensor {
        Tensor::new(vec![4, 4], data.to_vec()).unwrap()
    }

    fn ramp() -> Tensor {
        map(&(0..16).map(|i| (i as f64 * 0.37).sin() + 0.2 * i as f64).collect::<Vec<_>>())
    }

    #[test]
    fn identical_maps_score_one() {
        let u = ramp();
        let c = ssim_components(&u, &u, &SsimParams::default()).unwrap();
        assert_eq!((c.luminance, c.contrast, c.structure), (1.0, 1.0, 1.0));
        assert_eq!(ssim(&u, &u, &SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn constant_maps_closed_form() {
        let (a, b) = (0.7, 0.2);
        let p = SsimParams::default();
        let c = ssim_components(&Tensor::full(&[4, 4], a), &Tensor::full(&[4, 4], b), &p).unwrap();
        assert_eq!(c.contrast, 1.0);
        assert_eq!(c.structure, 1.0);
        let expect = (2.0 * a * b + p.c1) / (a * a + b * b + p.c1);
        assert!((c.luminance - expect).abs() < 1e-15);
    }

    #[test]
    fn negated_zero_mean_map() {
        // Zero-mean 4x4 map and its negation.
        let u = map(&[
            1.0, -2.0, 0.5, 0.5, -1.0, 2.0, -0.5, -0.5, 3.0, -3.0, 1.5, -1.5, 0.25, -0.25, 0.0, 0.0,
        ]);
        let v = map(&u.data().iter().map(|x| -x).collect::<Vec<_>>());
        let p = SsimParams::default();
        let c = ssim_components(&u, &v, &p).unwrap();
        let var: f64 = u.data().iter().map(|x| x * x).sum::<f64>() / 16.0;
        assert!((c.luminance - 1.0).abs() < 1e-15);
        assert!((c.contrast - 1.0).abs() < 1e-15);
        let expect = (-var + p.c3) / (var + p.c3);
        assert!((c.structure - expect).abs() < 1e-15);
        assert!(c.structure < 0.0);
    }

    #[test]
    fn exponent_zero_isolates_structure() {
        let u = ramp();
        let v = map(&u.data().iter().rev().cloned().collect::<Vec<_>>());
        let p = SsimParams {
            p: 0.0,
            q: 0.0,
            r: 1.0,
            ..SsimParams::default()
        };
        let c = ssim_components(&u, &v, &p).unwrap();
        assert_eq!(ssim(&u, &v, &p).unwrap(), c.structure);
    }

    #[test]
    fn plain_mode_guards_fractional_power_of_negative_structure() {
        let u = ramp();
        let v = map(&u.data().iter().map(|x| -x).collect::<Vec<_>>());
        let mut p = SsimParams {
            power: PowerMode::Plain,
            p: 0.0,
            r: 1.5,
            ..SsimParams::default()
        };
        assert!(matches!(ssim(&u, &v, &p), Err(Error::NumericGuard { .. })));
        p.r = 8.0;
        assert!(ssim(&u, &v, &p).unwrap() > 0.0);
    }

    #[test]
    fn shape_and_size_errors() {
        let p = SsimParams::default();
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[4, 1], 1.0);
        assert!(matches!(ssim(&a, &b, &p), Err(Error::Dimension { .. })));
        let single = Tensor::full(&[1, 1], 1.0);
        assert!(matches!(ssim(&single, &single, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_version_matches_plain_version() {
        let u = ramp();
        let v = map(&u.data().iter().map(|x| 0.5 * x * x + 0.1).collect::<Vec<_>>());
        let p = SsimParams::default();
        let mut tape = Tape::new();
        let a = tape.constant(u.clone());
        let b = tape.constant(v.clone());
        let s = ssim_map(&mut tape, a, b, &p).unwrap();
        let direct = ssim(&u, &v, &p).unwrap();
        assert!((tape.value(s).item().unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn all_components_disabled_gives_one() {
        let mut p = SsimParams::default();
        p.set_components("-").unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3, 2, 2], 0.3));
        let b = tape.constant(Tensor::full(&[2, 3, 2, 2], 0.9));
        let s = ssim_map(&mut tape, a, b, &p).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0; 6]);
    }
}
