//! Pairwise R1/R2/R3 relations, in-batch quadruplet mining and the mixed
//! head/face batch sampler.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::SampleRecord;

/// Weak labels of one training sample.
///
/// `appearance` ids must be globally unique (namespaced by video/identity), so
/// equality of `(identity, appearance)` is the only thing relations look at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub identity: usize,
    pub appearance: usize,
    pub video_id: String,
    pub face_visible: bool,
}

impl SampleMeta {
    /// Builds metas from a world manifest, namespacing appearance by identity.
    pub fn from_records(records: &[SampleRecord]) -> Vec<SampleMeta> {
        let states = records.iter().map(|r| r.appearance + 1).max().unwrap_or(1);
        records
            .iter()
            .map(|r| SampleMeta {
                sample_id: r.sample_id.clone(),
                identity: r.identity,
                appearance: r.identity * states + r.appearance,
                video_id: r.video_id.clone(),
                face_visible: r.face_visible,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    /// Same identity, same appearance state.
    R1,
    /// Same identity, different appearance state.
    R2,
    /// Different identity.
    R3,
}

#[inline]
fn relation_unchecked(a: &SampleMeta, b: &SampleMeta) -> Relation {
    if a.identity != b.identity {
        Relation::R3
    } else if a.appearance != b.appearance {
        Relation::R2
    } else {
        Relation::R1
    }
}

pub fn relation_of(a: &SampleMeta, b: &SampleMeta) -> Result<Relation> {
    if a.sample_id == b.sample_id {
        return Err(Error::InvalidInput(format!(
            "relation of sample {} with itself is undefined",
            a.sample_id
        )));
    }
    Ok(relation_unchecked(a, b))
}

/// Mined training tuple of batch indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub anchor: usize,
    pub positive: usize,
    /// Meaningful only when `semi_negative_present`.
    pub semi_negative: usize,
    pub negative: usize,
    pub semi_negative_present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    Hard,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningOptions {
    pub mode: MiningMode,
    /// In hard mode, pick the least similar R1 partner; otherwise the first one.
    pub hardest_positive: bool,
}

impl Default for MiningOptions {
    fn default() -> Self {
        Self {
            mode: MiningMode::Hard,
            hardest_positive: true,
        }
    }
}

fn pick<F, R>(cands: &[usize], row: &[F], better: impl Fn(F, F) -> bool, mode: MiningMode, rng: &mut R) -> usize
where
    F: Copy,
    R: Rng + ?Sized,
{
    match mode {
        MiningMode::Random => cands[rng.random_range(0..cands.len())],
        MiningMode::Hard => {
            // candidates are in ascending index order, so a strict comparison keeps the lowest index on ties
            let mut best = cands[0];
            for &c in &cands[1..] {
                if better(row[c], row[best]) {
                    best = c;
                }
            }
            best
        }
    }
}

/// Mines one quadruplet per anchor that has at least one R1 and one R3 partner.
///
/// Hard mode: negative = most similar R3, semi-negative = most similar R2,
/// positive = least similar R1 (or the first R1 when `hardest_positive` is off).
/// Ties go to the lowest index.
pub fn build_quadruplets<F, R>(
    metas: &[SampleMeta],
    similarity: ArrayView2<F>,
    options: MiningOptions,
    rng: &mut R,
) -> Result<Vec<Quadruplet>>
where
    F: Copy + PartialOrd,
    R: Rng + ?Sized,
{
    let n = metas.len();
    if similarity.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix is {:?}, expected ({n}, {n})",
            similarity.dim()
        )));
    }
    let mut out = Vec::new();
    let (mut r1, mut r2, mut r3) = (Vec::new(), Vec::new(), Vec::new());
    let mut row = Vec::with_capacity(n);
    for a in 0..n {
        r1.clear();
        r2.clear();
        r3.clear();
        for b in 0..n {
            if b == a {
                continue;
            }
            match relation_unchecked(&metas[a], &metas[b]) {
                Relation::R1 => r1.push(b),
                Relation::R2 => r2.push(b),
                Relation::R3 => r3.push(b),
            }
        }
        if r1.is_empty() || r3.is_empty() {
            continue;
        }
        row.clear();
        row.extend(similarity.row(a).iter().copied());
        let positive = if options.mode == MiningMode::Hard && !options.hardest_positive {
            r1[0]
        } else {
            pick(&r1, &row, |x, y| x < y, options.mode, rng)
        };
        let negative = pick(&r3, &row, |x, y| x > y, options.mode, rng);
        let (semi_negative, present) = if r2.is_empty() {
            (a, false)
        } else {
            (pick(&r2, &row, |x, y| x > y, options.mode, rng), true)
        };
        out.push(Quadruplet {
            anchor: a,
            positive,
            semi_negative,
            negative,
            semi_negative_present: present,
        });
    }
    Ok(out)
}

/// How many states per identity and samples per state the head sampler draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerShape {
    pub states_per_identity: usize,
    pub samples_per_state: usize,
}

impl Default for SamplerShape {
    fn default() -> Self {
        Self {
            states_per_identity: 2,
            samples_per_state: 2,
        }
    }
}

/// Indices (into the respective pools) selected for one training batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchDescriptor {
    pub head: Vec<usize>,
    /// Face-pool samples; these only receive the alignment loss.
    pub face: Vec<usize>,
}

impl BatchDescriptor {
    pub fn len(&self) -> usize {
        self.head.len() + self.face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples a batch with `ceil(head_fraction * batch_size)` head samples drawn
/// identity-by-identity (`shape.states_per_identity` states of
/// `shape.samples_per_state` samples each) and the rest from the face pool.
pub fn mixed_batch<R: Rng + ?Sized>(
    head_pool: &[SampleMeta],
    face_pool_len: usize,
    batch_size: usize,
    head_fraction: f64,
    shape: SamplerShape,
    rng: &mut R,
) -> Result<BatchDescriptor> {
    if !(head_fraction > 0.0 && head_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("head_fraction {head_fraction} outside (0, 1]")));
    }
    let n_head = ((head_fraction * batch_size as f64).ceil() as usize).min(batch_size);
    let n_face = batch_size - n_head;
    if n_head > 0 && head_pool.is_empty() {
        return Err(Error::Insufficient("head pool is empty".into()));
    }
    if n_face > 0 && face_pool_len == 0 {
        return Err(Error::Insufficient("face pool is empty but head_fraction < 1".into()));
    }

    // identity -> state -> pool indices
    let mut groups: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (i, m) in head_pool.iter().enumerate() {
        groups.entry(m.identity).or_default().entry(m.appearance).or_default().push(i);
    }
    let mut identities: Vec<usize> = groups.keys().copied().collect();
    identities.shuffle(rng);

    let mut head = Vec::with_capacity(n_head);
    for &u in &identities {
        if head.len() >= n_head {
            break;
        }
        let states = &groups[&u];
        let mut keys: Vec<usize> = states.keys().copied().collect();
        keys.shuffle(rng);
        for k in keys.into_iter().take(shape.states_per_identity) {
            let mut members = states[&k].clone();
            members.shuffle(rng);
            head.extend(members.into_iter().take(shape.samples_per_state));
        }
    }
    head.truncate(n_head);
    // if the pool ran out of identities, top up with random samples not yet chosen
    if head.len() < n_head {
        let mut rest: Vec<usize> = (0..head_pool.len()).filter(|i| !head.contains(i)).collect();
        rest.shuffle(rng);
        let need = n_head - head.len();
        head.extend(rest.into_iter().take(need));
        while head.len() < n_head {
            head.push(rng.random_range(0..head_pool.len()));
        }
    }
    // a single identity yields no R3 pair; swap the last slot for another identity
    if head.len() >= 2 && identities.len() >= 2 {
        let first = head_pool[head[0]].identity;
        if head.iter().all(|&i| head_pool[i].identity == first) {
            let others: Vec<usize> = (0..head_pool.len())
                .filter(|&i| head_pool[i].identity != first)
                .collect();
            let last = head.len() - 1;
            head[last] = others[rng.random_range(0..others.len())];
        }
    }

    let face = (0..n_face).map(|_| rng.random_range(0..face_pool_len)).collect();
    Ok(BatchDescriptor { head, face })
}
