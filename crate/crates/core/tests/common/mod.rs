//! Independent reference implementations shared by the integration tests.
//! They follow the textbook formulas directly and share no code with the
//! library.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// SSIM of two flat maps: l^p c^q s^r with sign-preserving powers.
pub fn ssim_scalar(u: &[f64], v: &[f64], p: f64, q: f64, r: f64, c: [f64; 3]) -> f64 {
    let n = u.len() as f64;
    let mut su = 0.0;
    let mut sv = 0.0;
    for i in 0..u.len() {
        su += u[i];
        sv += v[i];
    }
    let (mu, mv) = (su / n, sv / n);
    let (mut vu, mut vv, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..u.len() {
        vu += (u[i] - mu) * (u[i] - mu);
        vv += (v[i] - mv) * (v[i] - mv);
        cov += (u[i] - mu) * (v[i] - mv);
    }
    vu /= n;
    vv /= n;
    cov /= n;
    let (du, dv) = (vu.sqrt(), vv.sqrt());
    let l = (2.0 * mu * mv + c[0]) / (mu * mu + mv * mv + c[0]);
    let cc = (2.0 * du * dv + c[1]) / (vu + vv + c[1]);
    let s = (cov + c[2]) / (du * dv + c[2]);
    let sp = |x: f64, e: f64| if e == 0.0 { 1.0 } else { x.signum() * x.abs().powf(e) };
    sp(l, p) * sp(cc, q) * sp(s, r)
}

/// Greedy herding by exhaustive recomputation: at every step each remaining
/// candidate (visited in ascending id order) is scored by the distance from
/// the class mean to the mean of the chosen set plus that candidate.
pub fn herding_brute(ids: &[usize], feats: &[Vec<f64>], k: usize, normalize: bool) -> Vec<usize> {
    let mut rows: Vec<(usize, Vec<f64>)> = ids
        .iter()
        .zip(feats)
        .map(|(&id, f)| {
            let mut f = f.clone();
            if normalize {
                let n: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    for x in &mut f {
                        *x /= n;
                    }
                }
            }
            (id, f)
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    let dim = rows[0].1.len();
    let target: Vec<f64> = (0..dim)
        .map(|d| rows.iter().map(|r| r.1[d]).sum::<f64>() / rows.len() as f64)
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (j, (_, _)) in rows.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            let mut set = chosen.clone();
            set.push(j);
            let dist: f64 = (0..dim)
                .map(|d| {
                    let m = set.iter().map(|&s| rows[s].1[d]).sum::<f64>() / set.len() as f64;
                    (target[d] - m).powi(2)
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen.into_iter().map(|j| rows[j].0).collect()
}

/// Lower-triangular accuracy matrix with entries in [0, 1].
pub fn random_triangle(rng: &mut ChaCha8Rng, tasks: usize) -> Vec<Vec<f64>> {
    (0..tasks)
        .map(|t| (0..=t).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

pub fn aia_ref(overall: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in overall {
        s += a;
    }
    100.0 * s / overall.len() as f64
}

pub fn bt_ref(acc: &[Vec<f64>]) -> f64 {
    let t = acc.len() - 1;
    let mut s = 0.0;
    for i in 0..t {
        s += acc[t][i] - acc[i][i];
    }
    100.0 * s / t as f64
}

pub fn fgt_ref(acc: &[Vec<f64>]) -> f64 {
    let t = acc.len() - 1;
    let mut s = 0.0;
    for i in 0..t {
        let mut best = acc[i][i];
        for row in acc.iter().take(t + 1).skip(i + 1) {
            if row[i] > best {
                best = row[i];
            }
        }
        s += best - acc[t][i];
    }
    100.0 * s / t as f64
}

pub fn deviation_ref(mt: &[f64], m0: &[f64], ot: &[f64], o0: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for j in 0..mt.len() {
        let den = ot[j] - o0[j];
        if den.abs() < 1e-8 {
            continue;
        }
        let f = 1.0 - (mt[j] - m0[j]) / den;
        s += f * f;
        n += 1;
    }
    s / n as f64
}
