use rand_distr::{Distribution, StandardNormal};

use super::render::{squash, IdentityCode, HEAD_CODE_DIMS};
use super::FactorSpec;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::real::normalized;
use crate::seeding::{keyed_rng, stream};

pub const DEFAULT_TEACHER_DIM: usize = 128;

/// Anything that can produce a frozen unit-norm identity target for a sample.
pub trait TeacherModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `identity` is the label when known; image-based teachers may ignore it.
    fn target(&self, image: &RgbImage, identity: Option<usize>) -> Result<Vec<f64>>;
}

/// Frozen identity-pure teacher for the synthetic world.
///
/// Column `u` of the weight matrix is a fixed random linear lift of the
/// view-independent part of identity `u`'s render code (skin tone and head
/// shape, as rendered). The lift matrix depends only on the teacher seed, so
/// worlds generated with different seeds share one embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTeacher {
    dim: usize,
    /// `columns[u]` is column `u` of the `dim x U` weight matrix.
    columns: Vec<Vec<f64>>,
}

impl OracleTeacher {
    pub fn new(spec: &FactorSpec, dim: usize, teacher_seed: u64) -> Self {
        Self::from_codes(&spec.identity_codes(), dim, teacher_seed)
    }

    pub fn from_codes(codes: &[IdentityCode], dim: usize, teacher_seed: u64) -> Self {
        let mut rng = keyed_rng(&[teacher_seed, stream::TEACHER]);
        let lift: Vec<[f64; HEAD_CODE_DIMS]> = (0..dim)
            .map(|_| {
                let mut row = [0.0; HEAD_CODE_DIMS];
                for v in &mut row {
                    *v = StandardNormal.sample(&mut rng);
                }
                row
            })
            .collect();
        let columns = codes
            .iter()
            .map(|c| {
                lift.iter()
                    .map(|row| row.iter().zip(c.0.iter()).map(|(a, &b)| a * squash(b)).sum())
                    .collect()
            })
            .collect();
        Self { dim, columns }
    }

    /// Independent Gaussian column per identity: a random linear map of
    /// identity one-hots. Identity-pure but not predictable from pixels;
    /// used where only discrimination matters (face clustering).
    pub fn identity_pure(num_identities: usize, dim: usize, teacher_seed: u64) -> Self {
        let mut rng = keyed_rng(&[teacher_seed, stream::TEACHER, 1]);
        let columns = (0..num_identities)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self { dim, columns }
    }

    pub fn num_identities(&self) -> usize {
        self.columns.len()
    }

    pub fn weight_column(&self, identity: usize) -> Option<&[f64]> {
        self.columns.get(identity).map(Vec::as_slice)
    }

    /// Unit-norm teacher embedding of an identity; ignores everything else.
    pub fn embed(&self, identity: usize) -> Result<Vec<f64>> {
        let col = self.columns.get(identity).ok_or(Error::IndexOutOfRange {
            index: identity,
            len: self.columns.len(),
        })?;
        Ok(normalized(col))
    }
}

impl TeacherModel for OracleTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn target(&self, _image: &RgbImage, identity: Option<usize>) -> Result<Vec<f64>> {
        let u = identity.ok_or_else(|| Error::InvalidInput("oracle teacher needs an identity label".into()))?;
        self.embed(u)
    }
}

/// Adapter for an external image-to-embedding function, e.g. a real face model.
pub struct FnTeacher<F> {
    dim: usize,
    f: F,
}

impl<F> FnTeacher<F>
where
    F: Fn(&RgbImage) -> Vec<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> TeacherModel for FnTeacher<F>
where
    F: Fn(&RgbImage) -> Vec<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn target(&self, image: &RgbImage, _identity: Option<usize>) -> Result<Vec<f64>> {
        let v = (self.f)(image);
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "teacher returned {} dims, expected {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("teacher output".into()));
        }
        Ok(normalized(&v))
    }
}
