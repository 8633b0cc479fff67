//! Alignment (distillation) loss, hierarchical Softplus similarity loss and
//! their variant-routed batch combination with analytic embedding gradients.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::real::Real;
use crate::relations::Quadruplet;

const UNIT_TOL: f64 = 1e-4;
const SIM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            m1: 0.1,
            m2: 0.3,
            m3: 0.2,
        }
    }
}

impl Margins {
    pub fn new(m1: f64, m2: f64, m3: f64) -> Result<Self> {
        let m = Self { m1, m2, m3 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.m1, self.m2, self.m3].iter().all(|m| m.is_finite() && *m > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("margins must be strictly positive, got {self:?}")))
        }
    }
}

impl std::str::FromStr for Margins {
    type Err = Error;

    /// Parses `m1,m2,m3`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("bad margins {s:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => Margins::new(*a, *b, *c),
            _ => Err(Error::InvalidConfig(format!("expected three margins, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { align: 1.0, sim: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub sim_id: f64,
    pub sim_head: f64,
    pub total: f64,
    pub num_quadruplets: usize,
    pub num_align_pairs: usize,
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput(format!("{what} has norm {n}, expected unit norm")));
    }
    Ok(())
}

/// `1 - <z_t, z_id>` for unit vectors.
pub fn align_loss(z_t: &[f64], z_id: &[f64]) -> Result<f64> {
    if z_t.len() != z_id.len() {
        return Err(Error::ShapeMismatch("align_loss inputs differ in length".into()));
    }
    check_unit(z_t, "teacher embedding")?;
    check_unit(z_id, "identity embedding")?;
    Ok(1.0 - z_t.iter().zip(z_id).map(|(a, b)| a * b).sum::<f64>())
}

fn check_sim(s: f64) -> Result<()> {
    if !(-1.0 - SIM_TOL..=1.0 + SIM_TOL).contains(&s) {
        return Err(Error::InvalidInput(format!("similarity {s} outside [-1, 1]")));
    }
    Ok(())
}

/// Hierarchical ordering loss for one quadruplet; with no semi-negative only
/// the anchor-positive vs anchor-negative term remains.
pub fn sim_loss(s_ap: f64, s_an1: Option<f64>, s_an2: f64, m: &Margins) -> Result<f64> {
    check_sim(s_ap)?;
    check_sim(s_an2)?;
    if let Some(s) = s_an1 {
        check_sim(s)?;
    }
    Ok(sim_terms(s_ap, s_an1, s_an2, m).0)
}

/// Loss value and its partial derivatives `(d/ds_ap, d/ds_an1, d/ds_an2)`.
fn sim_terms(s_ap: f64, s_an1: Option<f64>, s_an2: f64, m: &Margins) -> (f64, f64, f64, f64) {
    let t2 = m.m2 + s_an2 - s_ap;
    let sig2 = sigmoid(t2);
    match s_an1 {
        Some(s_an1) => {
            let t1 = m.m1 + s_an1 - s_ap;
            let t3 = m.m3 + s_an2 - s_an1;
            let (sig1, sig3) = (sigmoid(t1), sigmoid(t3));
            (
                softplus_stable(t1) + softplus_stable(t2) + softplus_stable(t3),
                -sig1 - sig2,
                sig1 - sig3,
                sig2 + sig3,
            )
        }
        None => (softplus_stable(t2), -sig2, 0.0, sig2),
    }
}

/// Per-sample distillation input: `Some(target)` marks the sample for alignment.
pub struct TeacherTargets<'a, F> {
    pub flagged: &'a [bool],
    pub targets: &'a [Option<Array1<F>>],
}

/// Result of [`batch_objective`]: loss terms and gradients w.r.t. both embeddings.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput<F> {
    pub breakdown: LossBreakdown,
    pub grad_id: Array2<F>,
    pub grad_head: Array2<F>,
    /// Part of `grad_id` contributed by the similarity loss alone.
    pub grad_id_sim: Array2<F>,
}

fn sim_block<F: Real>(
    z: ArrayView2<F>,
    quads: &[Quadruplet],
    margins: &Margins,
    scale: f64,
    grad: &mut Array2<F>,
) -> f64 {
    if quads.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / quads.len() as f64;
    let mut total = 0.0;
    let dot = |i: usize, j: usize| z.row(i).dot(&z.row(j)).f64();
    let mut axpy = |dst: usize, src: usize, c: f64| {
        let c = F::of(c);
        for k in 0..z.ncols() {
            grad[[dst, k]] += c * z[[src, k]];
        }
    };
    for q in quads {
        let s_ap = dot(q.anchor, q.positive);
        let s_an2 = dot(q.anchor, q.negative);
        let s_an1 = q.semi_negative_present.then(|| dot(q.anchor, q.semi_negative));
        let (l, g_ap, g_an1, g_an2) = sim_terms(s_ap, s_an1, s_an2, margins);
        total += l;
        let (g_ap, g_an1, g_an2) = (g_ap * inv * scale, g_an1 * inv * scale, g_an2 * inv * scale);
        axpy(q.anchor, q.positive, g_ap);
        axpy(q.positive, q.anchor, g_ap);
        axpy(q.anchor, q.negative, g_an2);
        axpy(q.negative, q.anchor, g_an2);
        if q.semi_negative_present {
            axpy(q.anchor, q.semi_negative, g_an1);
            axpy(q.semi_negative, q.anchor, g_an1);
        }
    }
    total * inv
}

/// Combines alignment and similarity losses according to the variant:
///
/// | variant          | z_id            | z_head |
/// |------------------|-----------------|--------|
/// | shared           | align + sim     | -      |
/// | dual_head_split  | align           | sim    |
/// | dual_head_both   | align + sim     | sim    |
/// | dual_cls         | align + sim     | sim    |
///
/// Reductions are means over quadruplets and over aligned samples.
pub fn batch_objective<F: Real>(
    z_id: ArrayView2<F>,
    z_head: ArrayView2<F>,
    quads: &[Quadruplet],
    teacher: &TeacherTargets<'_, F>,
    variant: Variant,
    margins: &Margins,
    weights: &LossWeights,
) -> Result<ObjectiveOutput<F>> {
    let (n, d) = z_id.dim();
    if z_head.dim() != (n, d) {
        return Err(Error::ShapeMismatch("z_id and z_head shapes differ".into()));
    }
    if teacher.flagged.len() != n || teacher.targets.len() != n {
        return Err(Error::ShapeMismatch("teacher target arrays must match the batch".into()));
    }
    for q in quads {
        for idx in [q.anchor, q.positive, q.negative]
            .into_iter()
            .chain(q.semi_negative_present.then_some(q.semi_negative))
        {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, len: n });
            }
        }
    }

    let mut grad_id = Array2::<F>::zeros((n, d));
    let mut grad_head = Array2::<F>::zeros((n, d));
    let mut grad_id_sim = Array2::<F>::zeros((n, d));

    // alignment on z_id
    let mut align = 0.0;
    let flagged: Vec<usize> = (0..n).filter(|&i| teacher.flagged[i]).collect();
    if !flagged.is_empty() {
        let inv = 1.0 / flagged.len() as f64;
        let c = F::of(-inv * weights.align);
        for &i in &flagged {
            let t = teacher.targets[i].as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("sample {i} is flagged for distillation but has no teacher target"))
            })?;
            if t.len() != d {
                return Err(Error::ShapeMismatch(format!("teacher target has {} dims, expected {d}", t.len())));
            }
            align += 1.0 - z_id.row(i).dot(t).f64();
            for k in 0..d {
                grad_id[[i, k]] += c * t[k];
            }
        }
        align *= inv;
    }

    let sim_on_id = variant != Variant::DualHeadSplit;
    let sim_on_head = variant != Variant::Shared;
    let sim_id = if sim_on_id {
        sim_block(z_id, quads, margins, weights.sim, &mut grad_id_sim)
    } else {
        0.0
    };
    let sim_head = if sim_on_head {
        sim_block(z_head, quads, margins, weights.sim, &mut grad_head)
    } else {
        0.0
    };
    grad_id += &grad_id_sim;

    let total = weights.align * align + weights.sim * (sim_id + sim_head);
    Ok(ObjectiveOutput {
        breakdown: LossBreakdown {
            align,
            sim_id,
            sim_head,
            total,
            num_quadruplets: quads.len(),
            num_align_pairs: flagged.len(),
        },
        grad_id,
        grad_head,
        grad_id_sim,
    })
}
