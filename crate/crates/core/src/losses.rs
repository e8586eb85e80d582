//! Training objectives.
//!
//! Every batched term returns its value together with the gradient with
//! respect to each of its tensor inputs, so the trainer can splice it into
//! the autograd graph as a single scalar node.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::synth::CategoryTable;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_att: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_att: 7.0,
            alpha: 0.7,
            temperature: 5.0,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_att >= 0.0 && self.lambda_att.is_finite()) {
            return Err(Error::Config(format!("lambda_att must be finite and >= 0, got {}", self.lambda_att)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        check_temperature(self.temperature)?;
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return Err(Error::Config(format!("triplet_margin must be finite and >= 0, got {}", self.triplet_margin)));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive and finite, got {tau}")))
    }
}

/// How the full-resolution mask is brought down to the attention grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    #[default]
    Area,
    Nearest,
}

/// Attention target: `ε` on cloth cells, `1` elsewhere, plus its resampled grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClothMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub resized_height: usize,
    pub resized_width: usize,
    pub resized: Vec<f64>,
    pub epsilon: f64,
}

/// Overlap weights of target cell `i` over source cells, for `src → dst` cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut s = lo.floor() as usize;
            while s < src && (s as f64) < hi {
                let overlap = hi.min(s as f64 + 1.0) - lo.max(s as f64);
                if overlap > 0.0 {
                    w.push((s, overlap / scale));
                }
                s += 1;
            }
            w
        })
        .collect()
}

/// Area-average resample of an `h × w` grid to `th × tw`.
pub fn resize_area(grid: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let rows = area_weights(h, th);
    let cols = area_weights(w, tw);
    let mut out = vec![0.0; th * tw];
    for (i, rw) in rows.iter().enumerate() {
        for (j, cw) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for &(r, a) in rw {
                for &(c, b) in cw {
                    acc += a * b * grid[r * w + c];
                }
            }
            out[i * tw + j] = acc;
        }
    }
    out
}

/// Nearest-neighbor resample sampling each target cell's center.
pub fn resize_nearest(grid: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = vec![0.0; th * tw];
    for i in 0..th {
        let r = (((2 * i + 1) * h) / (2 * th)).min(h - 1);
        for j in 0..tw {
            let c = (((2 * j + 1) * w) / (2 * tw)).min(w - 1);
            out[i * tw + j] = grid[r * w + c];
        }
    }
    out
}

/// Build the cloth-irrelevant target from a parsing mask.
pub fn cloth_irrelevant_mask(
    parsing: &[u8],
    height: usize,
    width: usize,
    table: &CategoryTable,
    epsilon: f64,
    target: (usize, usize),
    mode: ResizeMode,
) -> Result<ClothMask> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if parsing.len() != height * width || height == 0 || width == 0 {
        return shape_err(format!("parsing mask has {} cells, expected {height}x{width}", parsing.len()));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > height || tw > width {
        return shape_err(format!("cannot resize {height}x{width} mask to {th}x{tw}"));
    }
    let cloth = table.cloth_codes();
    let mut data = Vec::with_capacity(parsing.len());
    // 1 on non-cloth cells; the resized grid is built from this indicator
    let mut keep = Vec::with_capacity(parsing.len());
    for &code in parsing {
        if !table.contains(code) {
            return Err(Error::Data(format!("parsing mask uses unknown category code {code}")));
        }
        let is_cloth = cloth.contains(&code);
        data.push(if is_cloth { epsilon } else { 1.0 });
        keep.push(if is_cloth { 0.0 } else { 1.0 });
    }
    let frac = match mode {
        ResizeMode::Area => resize_area(&keep, height, width, th, tw),
        ResizeMode::Nearest => resize_nearest(&keep, height, width, th, tw),
    };
    let resized = frac
        .into_iter()
        .map(|f| {
            let f = f.clamp(0.0, 1.0);
            (f + (1.0 - f) * epsilon).clamp(epsilon, 1.0)
        })
        .collect();
    Ok(ClothMask {
        height,
        width,
        data,
        resized_height: th,
        resized_width: tw,
        resized,
        epsilon,
    })
}

/// A loss value with the gradient for each input, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Mean squared error between one attention grid and its target.
pub fn attention_loss(att: &[f64], target: &[f64]) -> Result<f64> {
    if att.len() != target.len() || att.is_empty() {
        return shape_err(format!("attention has {} cells, target {}", att.len(), target.len()));
    }
    let s: f64 = att.iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum();
    Ok(s / att.len() as f64)
}

/// Batched attention loss over `[N, 1, h, w]`, averaged over the batch.
pub fn attention_term(att: &Tensor, targets: &[&[f64]]) -> Result<Term> {
    let s = att.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != targets.len() || s[0] == 0 {
        return shape_err(format!("attention batch {:?} does not match {} targets", s, targets.len()));
    }
    let n = s[0];
    let cells = s[2] * s[3];
    let mut value = 0.0;
    let mut grad = vec![0.0; att.len()];
    for (k, t) in targets.iter().enumerate() {
        let a = &att.data()[k * cells..(k + 1) * cells];
        value += attention_loss(a, t)?;
        for (g, (x, y)) in grad[k * cells..(k + 1) * cells].iter_mut().zip(a.iter().zip(t.iter())) {
            *g = 2.0 * (x - y) / (cells * n) as f64;
        }
    }
    Ok(Term {
        value: value / n as f64,
        grads: vec![Tensor::new(s.to_vec(), grad)?],
    })
}

fn log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = z.iter().map(|v| (v - m) / tau).collect();
    let lse = scaled.iter().map(|v| v.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|v| v - lse).collect()
}

/// `exp(z_i/τ) / Σ_j exp(z_j/τ)`.
pub fn softmax_with_temperature(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input must be non-empty and finite".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `KL(S(teacher, τ) ‖ S(student, τ))`.
pub fn kl_divergence(teacher: &[f64], student: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if teacher.len() != student.len() || teacher.is_empty() {
        return shape_err("KL inputs differ in length");
    }
    let lp = log_softmax(teacher, tau);
    let lq = log_softmax(student, tau);
    Ok(lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum::<f64>().max(0.0))
}

fn check_groups(a: &[&Tensor], b: &[&Tensor]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err(format!("logit groups have {} and {} members", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() || x.ndim() != 2 {
            return shape_err(format!("group members {:?} and {:?} differ", x.shape(), y.shape()));
        }
    }
    Ok(())
}

/// Knowledge propagation loss for one sample: `τ² Σ_i KL(S(I^t_i) ‖ S(I^s_i))`.
pub fn fkp_loss(student: &[Vec<f64>], teacher: &[Vec<f64>], tau: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return shape_err(format!("student has {} logit vectors, teacher {}", student.len(), teacher.len()));
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        total += tau * tau * kl_divergence(t, s, tau)?;
    }
    Ok(total)
}

/// Batched knowledge propagation: sum over group members, mean over batch.
/// Gradients are returned for the student only.
pub fn fkp_term(student: &[&Tensor], teacher: &[&Tensor], tau: f64) -> Result<Term> {
    check_temperature(tau)?;
    check_groups(student, teacher)?;
    let (n, k) = (student[0].shape()[0], student[0].shape()[1]);
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let mut g = vec![0.0; n * k];
        for r in 0..n {
            let lp = log_softmax(t.row(r), tau);
            let lq = log_softmax(s.row(r), tau);
            let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
            value += tau * tau * kl.max(0.0);
            for (c, (p, q)) in lp.iter().zip(&lq).enumerate() {
                g[r * k + c] = tau * (q.exp() - p.exp()) / n as f64;
            }
        }
        grads.push(Tensor::new(vec![n, k], g)?);
    }
    Ok(Term {
        value: value / n as f64,
        grads,
    })
}

/// Cross-entropy summed over the group members for one sample.
pub fn cross_entropy_sum(logits: &[Vec<f64>], label: usize) -> Result<f64> {
    let mut total = 0.0;
    for z in logits {
        if label >= z.len() {
            return Err(Error::Data(format!("label {label} out of range for {} classes", z.len())));
        }
        total -= log_softmax(z, 1.0)[label];
    }
    Ok(total)
}

/// Batched cross-entropy: sum over members, mean over batch.
pub fn cross_entropy_term(logits: &[&Tensor], labels: &[usize]) -> Result<Term> {
    if logits.is_empty() {
        return shape_err("empty logit group");
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for z in logits {
        let s = z.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return shape_err(format!("logits {:?} do not match {} labels", s, labels.len()));
        }
        let (n, k) = (s[0], s[1]);
        let mut g = vec![0.0; n * k];
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Data(format!("label {y} out of range for {k} classes")));
            }
            let ls = log_softmax(z.row(r), 1.0);
            value -= ls[y];
            for (c, l) in ls.iter().enumerate() {
                g[r * k + c] = (l.exp() - if c == y { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        grads.push(Tensor::new(vec![n, k], g)?);
    }
    Ok(Term {
        value: value / labels.len() as f64,
        grads,
    })
}

/// Euclidean distance between two rows.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::BatchComposition("triplet batch needs at least 2 identities".into()));
    }
    let has_pair = distinct.iter().any(|&&y| labels.iter().filter(|&&l| l == y).count() >= 2);
    if !has_pair {
        return Err(Error::BatchComposition(
            "triplet batch needs an identity with at least 2 samples".into(),
        ));
    }
    Ok(())
}

/// Batch-hard triplet on one `[N, D]` feature matrix, with its gradient.
///
/// Anchors without a positive are left out of the mean. Ties pick the lowest index.
fn triplet_member(f: &Tensor, labels: &[usize], margin: f64) -> Result<(f64, Tensor)> {
    let s = f.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return shape_err(format!("features {:?} do not match {} labels", s, labels.len()));
    }
    let (n, d) = (s[0], s[1]);
    let dist: Vec<f64> = (0..n * n).map(|i| euclidean(f.row(i / n), f.row(i % n))).collect();
    let mut grad = vec![0.0; n * d];
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut picks = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dj = dist[a * n + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dj > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| dj < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(q)) = (pos, neg) else { continue };
        anchors += 1;
        let hinge = dist[a * n + p] - dist[a * n + q] + margin;
        if hinge > 0.0 {
            total += hinge;
            picks.push((a, p, q));
        }
    }
    if anchors == 0 {
        return Err(Error::BatchComposition("no anchor has both a positive and a negative".into()));
    }
    let scale = 1.0 / anchors as f64;
    for (a, p, q) in picks {
        for (other, sign) in [(p, 1.0), (q, -1.0)] {
            let dd = dist[a * n + other];
            if dd == 0.0 {
                continue;
            }
            for c in 0..d {
                let u = (f.data()[a * d + c] - f.data()[other * d + c]) / dd * sign * scale;
                grad[a * d + c] += u;
                grad[other * d + c] -= u;
            }
        }
    }
    Ok((total / anchors as f64, Tensor::new(vec![n, d], grad)?))
}

/// Batch-hard triplet summed over group members, each a `[N, D]` matrix.
pub fn batch_hard_triplet(features: &[&Tensor], labels: &[usize], margin: f64) -> Result<f64> {
    Ok(triplet_term(features, labels, margin)?.value)
}

pub fn triplet_term(features: &[&Tensor], labels: &[usize], margin: f64) -> Result<Term> {
    if features.is_empty() {
        return shape_err("empty feature group");
    }
    check_triplet_batch(labels)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for f in features {
        let (v, g) = triplet_member(f, labels, margin)?;
        value += v;
        grads.push(g);
    }
    Ok(Term { value, grads })
}

/// The five parts of the total objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_att: f64,
    pub l_trip: f64,
    pub l_fkp: f64,
    pub l_ce_s: f64,
    pub l_ce_g: f64,
}

impl LossParts {
    pub const NAMES: [&'static str; 5] = ["l_att", "l_trip", "l_fkp", "l_ce_s", "l_ce_g"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.l_att, self.l_trip, self.l_fkp, self.l_ce_s, self.l_ce_g]
    }
}

/// Coefficients applied to [`LossParts::as_array`].
pub fn coefficients(w: &LossWeights) -> [f64; 5] {
    [w.lambda_att, 1.0, w.alpha, 1.0 - w.alpha, 1.0]
}

/// `λ·L_att + L_trip + (α·L_fkp + (1−α)·L_ce^s) + L_ce^g`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let values = parts.as_array();
    for (name, v) in LossParts::NAMES.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is not finite ({v})")));
        }
    }
    let c = coefficients(weights);
    Ok(c[0] * values[0] + c[1] * values[1] + (c[2] * values[2] + c[3] * values[3]) + c[4] * values[4])
}
