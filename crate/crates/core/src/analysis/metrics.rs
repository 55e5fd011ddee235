use crate::error::{contract_err, Error, Result};
use crate::model::ForwardTrace;
use crate::scalar::Scalar;
use crate::vocab;

/// `ε` of the inverse-entropy focus.
pub const FOCUS_EPS: f64 = 1e-6;

fn strip(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|t| *t != vocab::EOS && *t != vocab::PAD)
        .collect()
}

pub fn exact_match_accuracy(predictions: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(contract_err!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        ));
    }
    if predictions.is_empty() {
        return Err(contract_err!("no predictions"));
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| strip(p) == strip(r))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn mass(row: &[f64], positions: &[usize]) -> Result<f64> {
    positions
        .iter()
        .map(|p| {
            row.get(*p)
                .copied()
                .ok_or_else(|| contract_err!("position {p} beyond attention row of {}", row.len()))
        })
        .sum()
}

/// Image-to-text attention mass ratio on an already summed attention row.
pub fn ratio_of_row(row: &[f64], image: &[usize], text: &[usize]) -> Result<f64> {
    if text.is_empty() {
        return Err(contract_err!("attention ratio needs text positions"));
    }
    let t = mass(row, text)?;
    if t == 0.0 {
        return Err(Error::Division("text positions carry zero attention".into()));
    }
    Ok(mass(row, image)? / t)
}

/// Inverse entropy of the summed attention restricted to `positions`.
pub fn focus_of_row(row: &[f64], positions: &[usize]) -> Result<f64> {
    if positions.is_empty() {
        return Err(contract_err!("attention focus needs positions"));
    }
    let total = mass(row, positions)?;
    if !(total > 0.0) {
        return Err(contract_err!("attention mass over the positions is zero"));
    }
    let mut h = 0.0;
    for p in positions {
        let q = row[*p] / total;
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    Ok(1.0 / (h + FOCUS_EPS))
}

/// `R` at `query`, attention summed over all layers and heads.
pub fn attention_ratio<S: Scalar>(trace: &ForwardTrace<S>, query: usize, image: &[usize], text: &[usize]) -> Result<f64> {
    ratio_of_row(&trace.summed_attention_row(query), image, text)
}

/// `F` at `query` over `positions`.
pub fn attention_focus<S: Scalar>(trace: &ForwardTrace<S>, query: usize, positions: &[usize]) -> Result<f64> {
    focus_of_row(&trace.summed_attention_row(query), positions)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in &idx[i..=j] {
            r[*t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
