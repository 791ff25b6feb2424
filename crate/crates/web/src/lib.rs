//! wasm-bindgen bindings for the static page in `www/`.

use s2il::distill::{ssim, ssim_components, SsimParams};
use s2il::engine::lambda_schedule;
use s2il::exemplar::herding_select;
use s2il::metrics::{aia, bt, fgt};
use s2il::tensor::Tensor;
use wasm_bindgen::prelude::*;

fn map(v: &[f64]) -> Result<Tensor, String> {
    Tensor::new(vec![v.len()], v.to_vec()).map_err(|e| e.to_string())
}

/// `[luminance, contrast, structure, ssim, (1 - ssim) / 2]`.
pub fn ssim_report(u: &[f64], v: &[f64], p: f64, q: f64, r: f64) -> Result<Vec<f64>, String> {
    let params = SsimParams { p, q, r, ..SsimParams::default() };
    let (u, v) = (map(u)?, map(v)?);
    let c = ssim_components(&u, &v, &params).map_err(|e| e.to_string())?;
    let s = ssim(&u, &v, &params).map_err(|e| e.to_string())?;
    Ok(vec![c.luminance, c.contrast, c.structure, s, (1.0 - s) / 2.0])
}

/// Herding order over 2-D points given as `[x0, y0, x1, y1, ...]`.
pub fn herding_order(points: &[f64], k: usize, normalize: bool) -> Result<Vec<u32>, String> {
    if !points.len().is_multiple_of(2) {
        return Err("points must come in (x, y) pairs".into());
    }
    let feats: Vec<Vec<f64>> = points.chunks(2).map(<[f64]>::to_vec).collect();
    let ids: Vec<usize> = (0..feats.len()).collect();
    let picked = herding_select(&ids, &feats, k, normalize).map_err(|e| e.to_string())?;
    Ok(picked.into_iter().map(|i| i as u32).collect())
}

/// `[aia, bt, fgt, lambda...]` for a lower-triangular accuracy matrix given
/// row by row, plus the distillation weight per task.
pub fn stream_metrics(cells: &[f64], base_classes: usize, increment: usize, lambda: f64) -> Result<Vec<f64>, String> {
    let mut rows = Vec::new();
    let mut at = 0;
    while at < cells.len() {
        let len = rows.len() + 1;
        let row = cells.get(at..at + len).ok_or("cells do not form a lower triangle")?;
        rows.push(row.to_vec());
        at += len;
    }
    if rows.len() < 2 {
        return Err("need at least two tasks".into());
    }
    let sizes: Vec<usize> = (0..rows.len()).map(|t| if t == 0 { base_classes } else { increment }).collect();
    let overall: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(&sizes).map(|(a, n)| a * *n as f64).sum::<f64>() / sizes[..r.len()].iter().sum::<usize>() as f64)
        .collect();
    let e = |x: s2il::Error| x.to_string();
    let mut out = vec![aia(&overall).map_err(e)?, bt(&rows).map_err(e)?, fgt(&rows).map_err(e)?];
    for t in 1..rows.len() {
        out.push(lambda_schedule(lambda, base_classes + t * increment, increment).map_err(e)?);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = ssim)]
pub fn ssim_js(u: &[f64], v: &[f64], p: f64, q: f64, r: f64) -> Result<Vec<f64>, JsError> {
    ssim_report(u, v, p, q, r).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn herding(points: &[f64], k: usize, normalize: bool) -> Result<Vec<u32>, JsError> {
    herding_order(points, k, normalize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn metrics(cells: &[f64], base_classes: usize, increment: usize, lambda: f64) -> Result<Vec<f64>, JsError> {
    stream_metrics(cells, base_classes, increment, lambda).map_err(|e| JsError::new(&e))
}
