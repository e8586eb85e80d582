//! Embedding extraction, cosine retrieval, and CMC / mAP.
//!
//! An embedding is the concatenation of the global head's branch features
//! and, when the sample has a face, the face network's branch features. Two
//! embeddings are compared over their full length only when both carry a
//! face; otherwise both are cut down to the global part.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Dataset, LoadedSample, Protocol, Split};
use crate::tensor::Tensor;
use crate::trainer::{FaceVariant, JointModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PersonEmbedding {
    pub vector: Vec<f64>,
    /// Length of the leading global sub-vector.
    pub global_len: usize,
    pub has_face: bool,
    pub identity_id: usize,
    pub clothing_id: usize,
}

impl PersonEmbedding {
    pub fn global_part(&self) -> &[f64] {
        &self.vector[..self.global_len]
    }

    /// Copy with the face part dropped.
    pub fn without_face(&self) -> Self {
        Self {
            vector: self.global_part().to_vec(),
            has_face: false,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedOptions {
    /// L2-normalize each stream's part before concatenation.
    pub normalize_streams: bool,
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Embed many samples with batched inference.
pub fn embed_all(samples: &[&LoadedSample], model: &JointModel, opts: EmbedOptions) -> Result<Vec<PersonEmbedding>> {
    let global: Vec<Vec<f64>> = match &model.global {
        Some(net) => {
            let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
            net.infer(&images)?.into_iter().map(|r| r.groups.concat_features()).collect()
        }
        None => vec![Vec::new(); samples.len()],
    };
    let use_face = model.ablation.use_face_stream;
    let face_net = match model.ablation.face_variant {
        FaceVariant::Teacher => model.teacher.as_ref(),
        _ => model.student.as_ref(),
    };
    let mut face: Vec<Option<Vec<f64>>> = vec![None; samples.len()];
    if use_face {
        let net = face_net.ok_or_else(|| Error::State("model lacks the network its face variant needs".into()))?;
        let rows: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].has_face()).collect();
        let inputs: Vec<&Tensor> = rows
            .iter()
            .map(|&i| {
                let s = samples[i];
                match model.ablation.face_variant {
                    FaceVariant::Teacher => s.face_clean.as_ref(),
                    _ => s.face_degraded.as_ref(),
                }
                .expect("face-bearing")
            })
            .collect();
        for (r, out) in rows.iter().zip(net.infer(&inputs)?) {
            face[*r] = Some(out.groups.concat_features());
        }
    }
    let mut out = Vec::with_capacity(samples.len());
    for ((s, mut g), f) in samples.iter().zip(global).zip(face) {
        if opts.normalize_streams {
            l2_normalize(&mut g);
        }
        let global_len = g.len();
        let has_face = f.is_some();
        let mut vector = g;
        if let Some(mut f) = f {
            if opts.normalize_streams {
                l2_normalize(&mut f);
            }
            vector.extend(f);
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("embedding of sample {} is not finite", s.index)));
        }
        out.push(PersonEmbedding {
            vector,
            global_len,
            has_face,
            identity_id: s.identity_id,
            clothing_id: s.clothing_id,
        });
    }
    Ok(out)
}

/// Embed one sample.
pub fn embed(sample: &LoadedSample, model: &JointModel, opts: EmbedOptions) -> Result<PersonEmbedding> {
    Ok(embed_all(&[sample], model, opts)?.remove(0))
}

/// One ranked gallery entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub gallery_index: usize,
    pub score: f64,
    pub identity_id: usize,
    pub clothing_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_identity: usize,
    pub query_clothing: usize,
    /// Every gallery entry once, by descending score, ties by gallery index.
    pub ranking: Vec<RankedEntry>,
}

impl RetrievalResult {
    pub fn matches(&self) -> Vec<bool> {
        self.ranking.iter().map(|e| e.identity_id == self.query_identity).collect()
    }

    /// Ranked entries the protocol keeps, with their match flags.
    pub fn filtered(&self, protocol: Protocol) -> Vec<bool> {
        self.ranking
            .iter()
            .filter(|e| {
                protocol != Protocol::CrossClothes
                    || e.identity_id != self.query_identity
                    || e.clothing_id != self.query_clothing
            })
            .map(|e| e.identity_id == self.query_identity)
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Similarity under the fallback rule. `None` means a zero-norm operand.
pub fn similarity(q: &PersonEmbedding, g: &PersonEmbedding) -> Result<Option<f64>> {
    let (a, b) = if q.has_face && g.has_face {
        (q.vector.as_slice(), g.vector.as_slice())
    } else {
        (q.global_part(), g.global_part())
    };
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cannot compare embeddings of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        // face-only model and a faceless side: nothing to compare
        return Ok(Some(0.0));
    }
    Ok(cosine(a, b))
}

/// Rank the gallery for one query by cosine similarity.
pub fn cosine_rank(query: &PersonEmbedding, gallery: &[PersonEmbedding]) -> Result<RetrievalResult> {
    let mut ranking = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        let score = similarity(query, g)?.ok_or_else(|| {
            Error::Numeric(format!(
                "zero-norm embedding when comparing the query (identity {}) with gallery entry {i}",
                query.identity_id
            ))
        })?;
        if !score.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite similarity between the query (identity {}) and gallery entry {i}",
                query.identity_id
            )));
        }
        ranking.push(RankedEntry {
            gallery_index: i,
            score,
            identity_id: g.identity_id,
            clothing_id: g.clothing_id,
        });
    }
    // stable sort keeps gallery order among equal scores; partial_cmp so that -0 ties with 0
    ranking.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    Ok(RetrievalResult {
        query_identity: query.identity_id,
        query_clothing: query.clothing_id,
        ranking,
    })
}

fn check_valid(results: &[RetrievalResult], protocol: Protocol) -> Result<Vec<Vec<bool>>> {
    let flags: Vec<Vec<bool>> = results.iter().map(|r| r.filtered(protocol)).collect();
    let bad: Vec<usize> = flags.iter().enumerate().filter(|(_, f)| !f.contains(&true)).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        return Err(Error::Protocol(format!("queries without a valid gallery match: {bad:?}")));
    }
    if results.is_empty() {
        return Err(Error::Protocol("no queries".into()));
    }
    Ok(flags)
}

/// `CMC(k)` for `k = 1..=|gallery|`.
pub fn cmc(results: &[RetrievalResult], protocol: Protocol) -> Result<Vec<f64>> {
    let flags = check_valid(results, protocol)?;
    let len = results.iter().map(|r| r.ranking.len()).max().unwrap_or(0);
    let mut hits = vec![0usize; len];
    for f in &flags {
        let first = f.iter().position(|&m| m).expect("checked");
        for h in &mut hits[first..] {
            *h += 1;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / results.len() as f64).collect())
}

/// Mean over queries of average precision.
pub fn mean_average_precision(results: &[RetrievalResult], protocol: Protocol) -> Result<f64> {
    let flags = check_valid(results, protocol)?;
    let mut total = 0.0;
    for f in &flags {
        let mut found = 0usize;
        let mut acc = 0.0;
        for (pos, &m) in f.iter().enumerate() {
            if m {
                found += 1;
                acc += found as f64 / (pos + 1) as f64;
            }
        }
        total += acc / found as f64;
    }
    Ok(total / flags.len() as f64)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDump {
    pub query_index: usize,
    pub has_face: bool,
    pub ranked_gallery: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub checkpoint_id: String,
    pub dataset_seed: u64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Full curve, index `k - 1` holds `CMC(k)`.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryDump>>,
}

fn at(curve: &[f64], k: usize) -> f64 {
    curve.get(k - 1).or(curve.last()).copied().unwrap_or(0.0)
}

/// Evaluate a model over the dataset's query and gallery splits.
pub fn evaluate(
    dataset: &Dataset,
    model: &JointModel,
    protocol: Protocol,
    opts: EmbedOptions,
    checkpoint_id: &str,
    dump: bool,
) -> Result<EvalReport> {
    let q_idx = dataset.indices(Split::Query);
    let g_idx = dataset.indices(Split::Gallery);
    if q_idx.is_empty() || g_idx.is_empty() {
        return Err(Error::Protocol("dataset has no query or gallery samples".into()));
    }
    let qs: Vec<&LoadedSample> = q_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let gs: Vec<&LoadedSample> = g_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let qe = embed_all(&qs, model, opts)?;
    let ge = embed_all(&gs, model, opts)?;
    let results = qe.iter().map(|q| cosine_rank(q, &ge)).collect::<Result<Vec<_>>>()?;
    let curve = cmc(&results, protocol)?;
    let map = mean_average_precision(&results, protocol)?;
    let per_query = dump.then(|| {
        results
            .iter()
            .zip(&q_idx)
            .zip(&qe)
            .map(|((r, &qi), e)| QueryDump {
                query_index: qi,
                has_face: e.has_face,
                ranked_gallery: r.ranking.iter().map(|x| g_idx[x.gallery_index]).collect(),
                scores: r.ranking.iter().map(|x| x.score).collect(),
            })
            .collect()
    });
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        protocol,
        checkpoint_id: checkpoint_id.to_string(),
        dataset_seed: dataset.manifest.dataset_seed,
        rank1: at(&curve, 1),
        rank5: at(&curve, 5),
        rank10: at(&curve, 10),
        map,
        cmc: curve,
        num_queries: q_idx.len(),
        num_gallery: g_idx.len(),
        per_query,
    })
}

/// Share of queries whose nearest class centroid (Euclidean) is their own identity.
pub fn nearest_centroid_accuracy(
    reference: &[(Vec<f64>, usize)],
    queries: &[(Vec<f64>, usize)],
) -> Result<f64> {
    use std::collections::BTreeMap;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (v, y) in reference {
        let e = sums.entry(*y).or_insert_with(|| (vec![0.0; v.len()], 0));
        e.0.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    if sums.is_empty() || queries.is_empty() {
        return Err(Error::Data("nearest-centroid needs reference and query samples".into()));
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(y, (s, n))| (y, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut correct = 0usize;
    for (v, y) in queries {
        let best = centroids
            .iter()
            .map(|(c, m)| (*c, crate::losses::euclidean(v, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        if best.0 == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}
