//! Browser bindings. Each export has a plain Rust twin returning
//! `Result<_, String>` so the logic is testable off the web.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use wasm_bindgen::prelude::*;

use cvqn::controller::{entropy_upper_bound, split_channels, ChannelImportance, GroupSpec, ImportanceMode};
use cvqn::gmm::GmmParams;
use cvqn::Tensor;

fn floats(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("not a number: {:?}", s.trim())))
        .collect()
}

fn counts(text: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("not a count: {:?}", s.trim())))
        .collect()
}

/// Per-symbol bounds and the verdict for a grouping against one `single_q`-level quantizer.
pub fn bound_report(ratios: &str, levels: &str, single_q: usize, channels: usize, height: usize, width: usize) -> Result<String, String> {
    if single_q == 0 {
        return Err("Q must be positive".into());
    }
    let spec = GroupSpec::new(floats(ratios)?, counts(levels)?).map_err(|e| e.to_string())?;
    let b = entropy_upper_bound(&spec, channels, height, width, single_q);
    Ok(format!(
        "grouped: {:.4} bits/symbol, {:.1} bits total\nsingle:  {:.4} bits/symbol, {:.1} bits total\n{}",
        b.grouped_per_symbol,
        b.grouped_bits,
        b.single_per_symbol,
        b.single_bits,
        b.verdict()
    ))
}

/// `[z, hard(z), soft(z)]` triples flattened, for `points` inputs evenly spaced on `[lo, hi]`.
pub fn quantizer_samples(pi: &str, mu: &str, sigma: &str, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, String> {
    if points < 2 || !(hi > lo) {
        return Err("need at least two points on a nonempty range".into());
    }
    let gmm = GmmParams::from_moments(&floats(pi)?, &floats(mu)?, &floats(sigma)?).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(3 * points);
    for k in 0..points {
        let z = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        out.extend([z, gmm.quantize_hard(z).0, gmm.quantize_soft(z)]);
    }
    Ok(out)
}

/// Sorts channels by importance and lists each group's original channel indices.
pub fn grouping_report(importance: &str, ratios: &str, levels: &str) -> Result<String, String> {
    let w = floats(importance)?;
    let c = w.len();
    let spec = GroupSpec::new(floats(ratios)?, counts(levels)?).map_err(|e| e.to_string())?;
    let sizes = spec.group_sizes(c).map_err(|e| e.to_string())?;
    let imp = ChannelImportance::new(w, ImportanceMode::Predefined).map_err(|e| e.to_string())?;
    let perm = imp.permutation();
    // Channel k carries the value k so the split shows which channels land where.
    let z = Tensor::new(&[c, 1, 1], (0..c).map(|k| k as f64).collect()).map_err(|e| e.to_string())?;
    let parts = split_channels(&z, perm, &sizes).map_err(|e| e.to_string())?;
    let mut s = format!("sorted order: {perm:?}\n");
    for (g, (part, q)) in parts.iter().zip(spec.levels()).enumerate() {
        let chans: Vec<usize> = part.data().iter().map(|&v| v as usize).collect();
        s += &format!("group {g}: q={q} channels {chans:?}\n");
    }
    Ok(s)
}

#[wasm_bindgen(js_name = entropyBound)]
pub fn entropy_bound(ratios: &str, levels: &str, single_q: usize, channels: usize, height: usize, width: usize) -> Result<String, JsError> {
    bound_report(ratios, levels, single_q, channels, height, width).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = quantizerCurve)]
pub fn quantizer_curve(pi: &str, mu: &str, sigma: &str, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, JsError> {
    quantizer_samples(pi, mu, sigma, lo, hi, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = channelGrouping)]
pub fn channel_grouping(importance: &str, ratios: &str, levels: &str) -> Result<String, JsError> {
    grouping_report(importance, ratios, levels).map_err(|e| JsError::new(&e))
}
