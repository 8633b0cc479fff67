//! Verification and ordering metrics: ROC/AUC, VR@FAR, evaluation-pair
//! protocols, hierarchical ordering satisfaction and top-k retrieval.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relations::{relation_of, Relation, SampleMeta};

pub const FAR_TARGETS: [f64; 3] = [1e-2, 1e-3, 1e-4];
const SCORE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub score: f64,
    pub label: bool,
    pub relation: Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Positives are R1 and R2 pairs; negatives are R3.
    Identity,
    /// Positives are R1 pairs; negatives are R2 and R3.
    Appearance,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Identity, Protocol::Appearance];

    pub fn is_positive(self, r: Relation) -> bool {
        match self {
            Protocol::Identity => r != Relation::R3,
            Protocol::Appearance => r == Relation::R1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Identity => "identity",
            Protocol::Appearance => "appearance",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Protocol::Identity),
            "appearance" => Ok(Protocol::Appearance),
            other => Err(Error::InvalidConfig(format!("unknown protocol {other:?}"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One ROC operating point: everything scoring `>= threshold` is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Starts at `(+inf, 0, 0)` and ends at `(min score, 1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub num_positive: usize,
    pub num_negative: usize,
    /// `None` marks a target the negative count cannot resolve.
    pub vr_at_far: BTreeMap<String, Option<f64>>,
}

impl RocResult {
    pub fn far(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.far).collect()
    }

    pub fn tpr(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.tpr).collect()
    }

    /// Threshold/FAR/TPR table with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,far,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.far, p.tpr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses the output of [`RocResult::to_csv`] back into points.
    pub fn points_from_csv(text: &str) -> Result<Vec<RocPoint>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |k: usize| -> Result<f64> {
                cols.get(k)
                    .and_then(|c| c.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        path: "<roc csv>".into(),
                        line: i + 1,
                        message: format!("bad column {k} in {line:?}"),
                    })
            };
            out.push(RocPoint {
                threshold: parse(0)?,
                far: parse(1)?,
                tpr: parse(2)?,
            });
        }
        Ok(out)
    }
}

pub fn far_key(target: f64) -> String {
    format!("{target:e}")
}

fn validate_pairs(pairs: &[ScoredPair]) -> Result<(usize, usize)> {
    let p = pairs.iter().filter(|x| x.label).count();
    let n = pairs.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Insufficient(format!(
            "ROC needs positives and negatives, got {p} positive and {n} negative pairs"
        )));
    }
    if let Some(x) = pairs.iter().find(|x| !x.score.is_finite()) {
        return Err(Error::NonFinite(format!("pair score {}", x.score)));
    }
    Ok((p, n))
}

/// ROC over distinct score thresholds with tied scores grouped into one step.
pub fn roc(pairs: &[ScoredPair]) -> Result<RocResult> {
    let (num_pos, num_neg) = validate_pairs(pairs)?;
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (pf, nf) = (num_pos as f64, num_neg as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = order[i].score;
        while i < order.len() && order[i].score == t {
            if order[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("non-empty");
        let p = RocPoint {
            threshold: t,
            far: fp as f64 / nf,
            tpr: tp as f64 / pf,
        };
        auc += (p.far - prev.far) * (p.tpr + prev.tpr) * 0.5;
        points.push(p);
    }
    let mut result = RocResult {
        points,
        auc,
        num_positive: num_pos,
        num_negative: num_neg,
        vr_at_far: BTreeMap::new(),
    };
    for t in FAR_TARGETS {
        result.vr_at_far.insert(far_key(t), vr_at_far(&result, t)?);
    }
    Ok(result)
}

/// TPR at the most permissive threshold whose FAR does not exceed `target`;
/// `None` when fewer than `1 / target` negatives exist.
pub fn vr_at_far(result: &RocResult, target: f64) -> Result<Option<f64>> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidInput(format!("target FAR {target} outside (0, 1)")));
    }
    if (result.num_negative as f64) * target < 1.0 {
        return Ok(None);
    }
    Ok(result
        .points
        .iter()
        .filter(|p| p.far <= target)
        .map(|p| p.tpr)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t)))))
}

/// Limits on the number of pairs kept per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLimits {
    pub max_positive: usize,
    pub max_negative: usize,
}

impl Default for PairLimits {
    fn default() -> Self {
        Self {
            max_positive: 20_000,
            max_negative: 200_000,
        }
    }
}

/// Cosine similarity matrix of unit-norm rows.
pub fn similarity_matrix(emb: ArrayView2<f64>) -> Array2<f64> {
    emb.dot(&emb.t())
}

/// All unordered pairs labelled under `protocol`, each class subsampled to its
/// limit with `rng`. Output is ordered by `(i, j)`.
pub fn build_eval_pairs<R: Rng + ?Sized>(
    metas: &[SampleMeta],
    embeddings: ArrayView2<f64>,
    protocol: Protocol,
    limits: PairLimits,
    rng: &mut R,
) -> Result<Vec<ScoredPair>> {
    let n = metas.len();
    if embeddings.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings for {n} samples",
            embeddings.nrows()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let r = relation_of(&metas[i], &metas[j])?;
            if protocol.is_positive(r) {
                pos.push((i, j, r));
            } else {
                neg.push((i, j, r));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Insufficient(format!(
            "{protocol} protocol yields {} positive and {} negative pairs",
            pos.len(),
            neg.len()
        )));
    }
    let mut subsample = |v: &mut Vec<(usize, usize, Relation)>, cap: usize| {
        if v.len() > cap {
            v.shuffle(rng);
            v.truncate(cap);
            v.sort_unstable_by_key(|&(i, j, _)| (i, j));
        }
    };
    subsample(&mut pos, limits.max_positive);
    subsample(&mut neg, limits.max_negative);
    let mut all: Vec<(usize, usize, Relation)> = pos.into_iter().chain(neg).collect();
    all.sort_unstable_by_key(|&(i, j, _)| (i, j));
    let mut out = Vec::with_capacity(all.len());
    for (i, j, r) in all {
        let score = embeddings.row(i).dot(&embeddings.row(j));
        if !(-1.0 - SCORE_TOL..=1.0 + SCORE_TOL).contains(&score) {
            return Err(Error::InvalidInput(format!(
                "pair score {score} outside [-1, 1]; embeddings must be unit norm"
            )));
        }
        out.push(ScoredPair {
            score,
            label: protocol.is_positive(r),
            relation: r,
        });
    }
    Ok(out)
}

/// Fraction of triples with `s_r1 > s_r2 > s_r3` strictly.
pub fn ordering_satisfaction(triples: &[(f64, f64, f64)]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Insufficient("no ordering triples".into()));
    }
    let ok = triples.iter().filter(|(a, b, c)| a > b && b > c).count();
    Ok(ok as f64 / triples.len() as f64)
}

/// Samples `count` triples `(s(a,p), s(a,sn), s(a,n))` with `p` in R1, `sn` in
/// R2 and `n` in R3 of a uniformly drawn anchor. Anchors lacking any of the
/// three relations are never drawn.
pub fn sample_ordering_triples<R: Rng + ?Sized>(
    metas: &[SampleMeta],
    similarity: ArrayView2<f64>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64, f64)>> {
    let n = metas.len();
    if similarity.dim() != (n, n) {
        return Err(Error::ShapeMismatch("similarity matrix does not match metas".into()));
    }
    let mut partners: Vec<[Vec<usize>; 3]> = Vec::new();
    let mut anchors = Vec::new();
    for a in 0..n {
        let mut by_rel: [Vec<usize>; 3] = Default::default();
        for b in 0..n {
            if b != a {
                let k = relation_of(&metas[a], &metas[b])? as usize;
                by_rel[k].push(b);
            }
        }
        if by_rel.iter().all(|v| !v.is_empty()) {
            anchors.push(a);
            partners.push(by_rel);
        }
    }
    if anchors.is_empty() {
        return Err(Error::Insufficient("no anchor has R1, R2 and R3 partners".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..anchors.len());
        let a = anchors[k];
        let [r1, r2, r3] = &partners[k];
        let p = r1[rng.random_range(0..r1.len())];
        let s = r2[rng.random_range(0..r2.len())];
        let q = r3[rng.random_range(0..r3.len())];
        out.push((similarity[[a, p]], similarity[[a, s]], similarity[[a, q]]));
    }
    Ok(out)
}

/// Mean similarity over all unordered pairs of each relation.
pub fn relation_means(metas: &[SampleMeta], similarity: ArrayView2<f64>) -> Result<BTreeMap<Relation, f64>> {
    let mut acc: BTreeMap<Relation, (f64, usize)> = BTreeMap::new();
    for i in 0..metas.len() {
        for j in i + 1..metas.len() {
            let e = acc.entry(relation_of(&metas[i], &metas[j])?).or_insert((0.0, 0));
            e.0 += similarity[[i, j]];
            e.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(r, (s, c))| (r, s / c as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Top-`k` gallery items per query by descending cosine similarity, ties to
/// the lowest index. `self_index[q] = Some(g)` excludes gallery item `g`.
pub fn retrieval_topk(
    queries: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    k: usize,
    self_index: Option<&[Option<usize>]>,
) -> Result<Vec<Retrieval>> {
    let g = gallery.nrows();
    if g == 0 {
        return Err(Error::Insufficient("empty gallery".into()));
    }
    if k > g {
        return Err(Error::InvalidInput(format!("k = {k} exceeds gallery size {g}")));
    }
    if queries.ncols() != gallery.ncols() {
        return Err(Error::ShapeMismatch("query and gallery dimensions differ".into()));
    }
    let sims = queries.dot(&gallery.t());
    let mut out = Vec::with_capacity(queries.nrows());
    for q in 0..queries.nrows() {
        let skip = self_index.and_then(|s| s.get(q).copied().flatten());
        let mut idx: Vec<usize> = (0..g).filter(|&j| Some(j) != skip).collect();
        idx.sort_by(|&a, &b| sims[[q, b]].total_cmp(&sims[[q, a]]).then(a.cmp(&b)));
        idx.truncate(k);
        out.push(Retrieval {
            scores: idx.iter().map(|&j| sims[[q, j]]).collect(),
            indices: idx,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn pairs(pos: &[f64], neg: &[f64]) -> Vec<ScoredPair> {
        pos.iter()
            .map(|&s| ScoredPair { score: s, label: true, relation: Relation::R1 })
            .chain(neg.iter().map(|&s| ScoredPair { score: s, label: false, relation: Relation::R3 }))
            .collect()
    }

    fn rank_statistic(p: &[ScoredPair]) -> f64 {
        let (mut wins, mut np, mut nn) = (0.0, 0usize, 0usize);
        for a in p.iter().filter(|x| x.label) {
            np += 1;
            for b in p.iter().filter(|x| !x.label) {
                if a.score > b.score {
                    wins += 1.0;
                } else if a.score == b.score {
                    wins += 0.5;
                }
            }
        }
        nn += p.len() - np;
        wins / (np * nn) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc(&pairs(&[0.9, 0.8], &[0.2, 0.1])).unwrap().auc, 1.0);
        assert!((roc(&pairs(&[0.6], &[0.8, 0.4])).unwrap().auc - 0.5).abs() < 1e-12);
        assert!((roc(&pairs(&[0.3, 0.3], &[0.3, 0.3, 0.3])).unwrap().auc - 0.5).abs() < 1e-12);
        assert!(roc(&pairs(&[0.3], &[])).is_err());
        assert!(roc(&pairs(&[], &[0.3])).is_err());
    }

    #[test]
    fn vr_examples() {
        let r = roc(&pairs(&[0.9, 0.8, 0.7], &(0..200).map(|i| i as f64 / 1000.0).collect::<Vec<_>>())).unwrap();
        assert_eq!(vr_at_far(&r, 1e-2).unwrap(), Some(1.0));
        assert_eq!(vr_at_far(&r, 1e-3).unwrap(), None);
        let small = roc(&pairs(&[0.9], &vec![0.1; 50])).unwrap();
        assert_eq!(vr_at_far(&small, 1e-4).unwrap(), None);
        assert!(vr_at_far(&small, 0.0).is_err());
        assert!(vr_at_far(&small, 1.0).is_err());
        assert_eq!(small.vr_at_far[&far_key(1e-4)], None);
    }

    #[test]
    fn csv_round_trip() {
        let r = roc(&pairs(&[0.9, 0.5, 0.5], &[0.5, 0.1])).unwrap();
        let pts = RocResult::points_from_csv(&r.to_csv()).unwrap();
        assert_eq!(pts, r.points);
    }

    #[test]
    fn protocols_label_relations() {
        assert!(Protocol::Identity.is_positive(Relation::R2));
        assert!(!Protocol::Appearance.is_positive(Relation::R2));
        for p in Protocol::ALL {
            assert!(!p.is_positive(Relation::R3));
            assert!(p.is_positive(Relation::R1));
        }
    }

    fn meta(i: usize, u: usize, a: usize) -> SampleMeta {
        SampleMeta {
            sample_id: format!("s{i}"),
            identity: u,
            appearance: a,
            video_id: String::new(),
            face_visible: true,
        }
    }

    #[test]
    fn eval_pairs_cover_all_pairs_under_limits() {
        use rand::SeedableRng;
        let metas: Vec<_> = (0..12).map(|i| meta(i, i / 4, i / 2)).collect();
        let emb = ndarray::Array2::from_shape_fn((12, 2), |(i, k)| {
            let t = i as f64 * 0.3;
            if k == 0 { t.cos() } else { t.sin() }
        });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = build_eval_pairs(&metas, emb.view(), Protocol::Identity, PairLimits::default(), &mut rng).unwrap();
        assert_eq!(p.len(), 66);
        assert!(p.iter().all(|x| x.label == (x.relation != Relation::R3)));
        let limited = build_eval_pairs(
            &metas,
            emb.view(),
            Protocol::Appearance,
            PairLimits { max_positive: 3, max_negative: 10 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(limited.len(), 13);
        let one_identity: Vec<_> = (0..4).map(|i| meta(i, 0, i / 2)).collect();
        assert!(build_eval_pairs(&one_identity, emb.slice(ndarray::s![..4, ..]), Protocol::Identity, PairLimits::default(), &mut rng).is_err());
    }

    #[test]
    fn ordering_examples() {
        assert_eq!(ordering_satisfaction(&[(0.9, 0.5, 0.1)]).unwrap(), 1.0);
        assert_eq!(ordering_satisfaction(&[(0.5, 0.5, 0.1)]).unwrap(), 0.0);
        assert_eq!(ordering_satisfaction(&[(0.9, 0.5, 0.1), (0.1, 0.5, 0.9)]).unwrap(), 0.5);
        assert!(ordering_satisfaction(&[]).is_err());
    }

    #[test]
    fn retrieval_examples() {
        let g = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [1.0, 0.0]];
        let q = array![[1.0, 0.0]];
        let r = retrieval_topk(q.view(), g.view(), 1, None).unwrap();
        assert_eq!(r[0].indices, vec![0]);
        assert_eq!(r[0].scores, vec![1.0]);
        let r = retrieval_topk(q.view(), g.view(), 3, Some(&[Some(0)])).unwrap();
        assert_eq!(r[0].indices, vec![3, 2, 1]);
        assert!(retrieval_topk(q.view(), g.view(), 5, None).is_err());
        assert!(retrieval_topk(q.view(), ndarray::Array2::<f64>::zeros((0, 2)).view(), 1, None).is_err());
    }

    proptest! {
        #[test]
        fn auc_equals_rank_statistic(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..200)
        ) {
            let mut p: Vec<ScoredPair> = raw
                .iter()
                .map(|&(s, l)| ScoredPair { score: s as f64 / 5.0 - 0.5, label: l, relation: Relation::R1 })
                .collect();
            p[0].label = true;
            p[1].label = false;
            let r = roc(&p).unwrap();
            prop_assert!((r.auc - rank_statistic(&p)).abs() < 1e-9);
            for w in r.points.windows(2) {
                prop_assert!(w[1].far >= w[0].far && w[1].tpr >= w[0].tpr);
            }
            // strictly increasing transform leaves the curve unchanged
            let t: Vec<ScoredPair> = p.iter().map(|x| ScoredPair { score: (3.0 * x.score).exp(), ..*x }).collect();
            let rt = roc(&t).unwrap();
            prop_assert_eq!(r.far(), rt.far());
            prop_assert_eq!(r.tpr(), rt.tpr());
        }

        #[test]
        fn topk_matches_full_sort(vals in proptest::collection::vec(-1.0f64..1.0, 10), k in 1usize..10) {
            let g = ndarray::Array2::from_shape_fn((10, 1), |(i, _)| vals[i]);
            let q = array![[1.0]];
            let r = retrieval_topk(q.view(), g.view(), k, None).unwrap();
            let mut all: Vec<usize> = (0..10).collect();
            all.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(&r[0].indices[..], &all[..k]);
        }
    }
}
