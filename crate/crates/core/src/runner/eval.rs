use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, RunStamp};
use super::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{
    build_eval_pairs, ordering_satisfaction, relation_means, retrieval_topk, roc, sample_ordering_triples,
    similarity_matrix, Protocol, RocResult,
};
use crate::relations::{Relation, SampleMeta};
use crate::seeding::{keyed_rng, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub auc: f64,
    pub num_positive: usize,
    pub num_negative: usize,
    /// Keys are target FARs; `null` marks an unresolvable target.
    pub vr_at_far: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub query: String,
    pub results: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stamp: RunStamp,
    pub source: String,
    pub num_samples: usize,
    pub num_identities: usize,
    pub mean_similarity: BTreeMap<String, f64>,
    pub gap_r1_r2: f64,
    pub gap_r2_r3: f64,
    pub ordering_satisfaction: f64,
    pub num_triples: usize,
    pub protocols: BTreeMap<String, ProtocolReport>,
    /// Mean cosine between `z_id` and the teacher target over face-visible samples.
    pub teacher_alignment: Option<f64>,
    pub retrieval: Vec<RetrievalRow>,
    pub head_projection_used: bool,
}

/// Queries shown in the retrieval section of the report.
const RETRIEVAL_QUERIES: usize = 8;

/// Computes every metric on unit-norm embeddings of `samples`.
pub fn evaluate_embeddings(
    samples: &[Sample],
    emb: ArrayView2<f64>,
    protocols: &[Protocol],
    cfg: &EvalConfig,
    stamp: RunStamp,
    source: &str,
) -> Result<(EvalReport, BTreeMap<Protocol, RocResult>)> {
    let metas: Vec<SampleMeta> = samples.iter().map(|s| s.meta.clone()).collect();
    if metas.len() < 2 {
        return Err(Error::Insufficient("evaluation needs at least two samples".into()));
    }
    let sim = similarity_matrix(emb);
    let means = relation_means(&metas, sim.view())?;
    let get = |r: Relation| means.get(&r).copied().unwrap_or(f64::NAN);
    let mut rng = keyed_rng(&[cfg.seed, stream::EVAL, 0]);
    let triples = sample_ordering_triples(&metas, sim.view(), cfg.num_triples, &mut rng)?;
    let ordering = ordering_satisfaction(&triples)?;

    let mut reports = BTreeMap::new();
    let mut rocs = BTreeMap::new();
    for (k, &p) in protocols.iter().enumerate() {
        let mut rng = keyed_rng(&[cfg.seed, stream::EVAL, 1 + k as u64]);
        let pairs = build_eval_pairs(&metas, emb, p, cfg.pair_limits, &mut rng)?;
        let r = roc(&pairs)?;
        reports.insert(
            p.as_str().to_string(),
            ProtocolReport {
                auc: r.auc,
                num_positive: r.num_positive,
                num_negative: r.num_negative,
                vr_at_far: r.vr_at_far.clone(),
            },
        );
        rocs.insert(p, r);
    }

    let mut cos_sum = 0.0;
    let mut cos_n = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if let (true, Some(t)) = (s.meta.face_visible, &s.teacher) {
            cos_sum += emb.row(i).iter().zip(t.iter()).map(|(a, &b)| a * b as f64).sum::<f64>();
            cos_n += 1;
        }
    }

    let nq = RETRIEVAL_QUERIES.min(samples.len());
    let stride = (samples.len() / nq.max(1)).max(1);
    let query_idx: Vec<usize> = (0..nq).map(|i| i * stride).collect();
    let queries = Array2::from_shape_fn((nq, emb.ncols()), |(q, k)| emb[[query_idx[q], k]]);
    let self_idx: Vec<Option<usize>> = query_idx.iter().map(|&i| Some(i)).collect();
    let k = cfg.topk.min(samples.len() - 1);
    let hits = retrieval_topk(queries.view(), emb, k, Some(&self_idx))?;
    let retrieval = query_idx
        .iter()
        .zip(hits)
        .map(|(&q, h)| RetrievalRow {
            query: metas[q].sample_id.clone(),
            results: h
                .indices
                .iter()
                .zip(h.scores)
                .map(|(&j, s)| (metas[j].sample_id.clone(), s))
                .collect(),
        })
        .collect();

    let report = EvalReport {
        stamp,
        source: source.to_string(),
        num_samples: samples.len(),
        num_identities: metas.iter().map(|m| m.identity).collect::<std::collections::BTreeSet<_>>().len(),
        mean_similarity: means.iter().map(|(r, v)| (format!("{r:?}"), *v)).collect(),
        gap_r1_r2: get(Relation::R1) - get(Relation::R2),
        gap_r2_r3: get(Relation::R2) - get(Relation::R3),
        ordering_satisfaction: ordering,
        num_triples: triples.len(),
        protocols: reports,
        teacher_alignment: (cos_n > 0).then(|| cos_sum / cos_n as f64),
        retrieval,
        head_projection_used: false,
    };
    Ok((report, rocs))
}
