//! Reference implementations shared by the property and acceptance tests.
//! Each one is written the slow, obvious way and shares no code with the crate.

#![allow(dead_code)]

use ccreid_core::eval::{PersonEmbedding, RankedEntry, RetrievalResult};
use rand::Rng;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet by enumerating every valid `(a, p, n)` triplet.
/// The hardest triplet of an anchor is the one with the largest hinge argument.
pub fn brute_triplet(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for a in 0..n {
        let mut best: Option<f64> = None;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let v = dist(&rows[a], &rows[p]) - dist(&rows[a], &rows[q]) + margin;
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        if let Some(b) = best {
            anchors += 1;
            total += b.max(0.0);
        }
    }
    total / anchors as f64
}

/// Rank a gallery by selection: repeatedly take the highest remaining score,
/// lowest index among equals.
pub fn brute_rank(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut pick = 0;
        for (k, &i) in left.iter().enumerate() {
            if scores[i] > scores[left[pick]] {
                pick = k;
            }
        }
        order.push(left.remove(pick));
    }
    order
}

/// Per-query relevance flags after dropping the entries a protocol excludes.
pub fn kept_flags(r: &RetrievalResult, cross_clothes: bool) -> Vec<bool> {
    let mut out = Vec::new();
    for e in &r.ranking {
        let same = e.identity_id == r.query_identity;
        if cross_clothes && same && e.clothing_id == r.query_clothing {
            continue;
        }
        out.push(same);
    }
    out
}

/// `CMC(k)` by checking the top-k prefix of every query separately.
pub fn brute_cmc(results: &[RetrievalResult], cross_clothes: bool, len: usize) -> Vec<f64> {
    let flags: Vec<Vec<bool>> = results.iter().map(|r| kept_flags(r, cross_clothes)).collect();
    (1..=len)
        .map(|k| {
            let hits = flags.iter().filter(|f| f.iter().take(k).any(|&m| m)).count();
            hits as f64 / results.len() as f64
        })
        .collect()
}

/// mAP with precision at each relevant position counted from the prefix.
pub fn brute_map(results: &[RetrievalResult], cross_clothes: bool) -> f64 {
    let mut total = 0.0;
    for r in results {
        let f = kept_flags(r, cross_clothes);
        let mut acc = 0.0;
        let mut relevant = 0usize;
        for pos in 0..f.len() {
            if f[pos] {
                let in_prefix = f[..=pos].iter().filter(|&&m| m).count();
                acc += in_prefix as f64 / (pos + 1) as f64;
                relevant += 1;
            }
        }
        total += acc / relevant as f64;
    }
    total / results.len() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn embedding(vector: Vec<f64>, global_len: usize, has_face: bool, id: usize, cloth: usize) -> PersonEmbedding {
    PersonEmbedding {
        vector,
        global_len,
        has_face,
        identity_id: id,
        clothing_id: cloth,
    }
}

/// A random retrieval instance with small integer features, so that ties occur.
/// Returns the query, the gallery and the brute-force result for the query.
pub fn random_instance(rng: &mut impl Rng, gallery_len: usize) -> (PersonEmbedding, Vec<PersonEmbedding>, RetrievalResult) {
    let dim = 3;
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        }
    };
    let ids = 3;
    let q_id = rng.random_range(0..ids);
    let q_cloth = rng.random_range(0..2);
    let query = embedding(draw(rng), dim, true, q_id, q_cloth);
    let mut gallery = Vec::with_capacity(gallery_len);
    // the first entry guarantees a valid cross-clothes match
    gallery.push(embedding(draw(rng), dim, true, q_id, 1 - q_cloth));
    while gallery.len() < gallery_len {
        gallery.push(embedding(draw(rng), dim, true, rng.random_range(0..ids), rng.random_range(0..2)));
    }
    let scores: Vec<f64> = gallery.iter().map(|g| cosine(&query.vector, &g.vector)).collect();
    let ranking = brute_rank(&scores)
        .into_iter()
        .map(|i| RankedEntry {
            gallery_index: i,
            score: scores[i],
            identity_id: gallery[i].identity_id,
            clothing_id: gallery[i].clothing_id,
        })
        .collect();
    let expected = RetrievalResult {
        query_identity: q_id,
        query_clothing: q_cloth,
        ranking,
    };
    (query, gallery, expected)
}

/// Central difference of `f` at `x` along every coordinate.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let keep = p[i];
            p[i] = keep + h;
            let up = f(&p);
            p[i] = keep - h;
            let down = f(&p);
            p[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, and 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
