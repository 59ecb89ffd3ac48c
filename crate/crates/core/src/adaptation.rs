//! Second-order feature alignment: source features are whitened with the
//! source covariance and recoloured with the target covariance, then moved
//! onto the target mean.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::format::{read_file, ByteReader, ByteWriter};
use crate::types::FeatureVector;

pub const ATFM_MAGIC: &[u8; 4] = b"ATFM";

/// Ridge added to each covariance, relative to its mean eigenvalue.
pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    SecondOrder,
}

impl TransformKind {
    fn byte(self) -> u8 {
        match self {
            TransformKind::Identity => 0,
            TransformKind::SecondOrder => 1,
        }
    }
}

/// Affine map `f ↦ matrix · (f − source_mean) + target_mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTransform {
    pub dim: usize,
    pub kind: TransformKind,
    pub source_mean: Vec<f32>,
    pub target_mean: Vec<f32>,
    /// Row-major `dim × dim`.
    pub matrix: Vec<f32>,
}

impl AlignmentTransform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            dim,
            kind: TransformKind::Identity,
            source_mean: vec![0.0; dim],
            target_mean: vec![0.0; dim],
            matrix,
        }
    }

    pub fn apply(&self, f: &FeatureVector) -> Result<FeatureVector> {
        check_dim(self.dim, f.dim())?;
        if self.kind == TransformKind::Identity {
            return Ok(f.clone());
        }
        let centered: Vec<f64> = f
            .values()
            .iter()
            .zip(&self.source_mean)
            .map(|(&v, &m)| v as f64 - m as f64)
            .collect();
        let out = self
            .matrix
            .chunks_exact(self.dim)
            .zip(&self.target_mean)
            .map(|(row, &t)| {
                let s: f64 = row.iter().zip(&centered).map(|(&a, &b)| a as f64 * b).sum();
                (s + t as f64) as f32
            })
            .collect();
        FeatureVector::new(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::header(ATFM_MAGIC);
        w.u32(self.dim as u32);
        w.u8(self.kind.byte());
        w.f32s(&self.source_mean);
        w.f32s(&self.target_mean);
        w.f32s(&self.matrix);
        w.write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = read_file(path.as_ref())?;
        let mut r = ByteReader::open(&buf, ATFM_MAGIC, "ATFM")?;
        let dim = r.u32()? as usize;
        let kind = match r.u8()? {
            0 => TransformKind::Identity,
            1 => TransformKind::SecondOrder,
            k => return Err(Error::Format(format!("unknown transform kind {k}"))),
        };
        let source_mean = r.f32s(dim)?;
        let target_mean = r.f32s(dim)?;
        let matrix = r.f32s(dim * dim)?;
        r.finish()?;
        Ok(Self {
            dim,
            kind,
            source_mean,
            target_mean,
            matrix,
        })
    }
}

/// Mean, population covariance and its regularized square roots for one
/// sample set. Computed once per set so several pairs can reuse it.
#[derive(Debug, Clone)]
pub struct CovarianceRoots {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

pub fn mean_and_covariance(samples: &[FeatureVector]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("no samples"))?;
    let dim = first.dim();
    let n = samples.len();
    let mut data = DMatrix::<f64>::zeros(n, dim);
    for (i, s) in samples.iter().enumerate() {
        check_dim(dim, s.dim())?;
        for (j, &v) in s.values().iter().enumerate() {
            data[(i, j)] = v as f64;
        }
    }
    let mean = DVector::from_iterator(dim, (0..dim).map(|j| data.column(j).sum() / n as f64));
    for j in 0..dim {
        let m = mean[j];
        data.column_mut(j).add_scalar_mut(-m);
    }
    let cov = data.transpose() * &data / n as f64;
    Ok((mean, cov))
}

/// Symmetric eigendecomposition with descending eigenvalues and each
/// eigenvector's first nonzero coordinate made positive.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let dim = m.nrows();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vectors = DMatrix::<f64>::zeros(dim, dim);
    let values = order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut v = eig.eigenvectors.column(i).into_owned();
            if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
                if first < 0.0 {
                    v.neg_mut();
                }
            }
            vectors.set_column(k, &v);
            eig.eigenvalues[i]
        })
        .collect();
    (values, vectors)
}

fn matrix_power(values: &[f64], vectors: &DMatrix<f64>, floor: f64, power: f64) -> DMatrix<f64> {
    let scaled = DVector::from_iterator(values.len(), values.iter().map(|&l| l.max(floor).powf(power)));
    let mut left = vectors.clone();
    for (k, s) in scaled.iter().enumerate() {
        left.column_mut(k).scale_mut(*s);
    }
    left * vectors.transpose()
}

impl CovarianceRoots {
    pub fn fit(samples: &[FeatureVector], eps: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("alignment needs at least 2 samples per side"));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        let (mean, covariance) = mean_and_covariance(samples)?;
        let dim = covariance.nrows();
        let mean_eig = covariance.trace() / dim as f64;
        let ridge = if mean_eig > 0.0 { eps * mean_eig } else { eps };
        let mut reg = covariance.clone();
        for i in 0..dim {
            reg[(i, i)] += ridge;
        }
        let (values, vectors) = sorted_eigen(&reg);
        Ok(Self {
            sqrt: matrix_power(&values, &vectors, ridge, 0.5),
            inv_sqrt: matrix_power(&values, &vectors, ridge, -0.5),
            mean,
            covariance,
        })
    }
}

pub fn align(source: &CovarianceRoots, target: &CovarianceRoots) -> Result<AlignmentTransform> {
    check_dim(source.mean.len(), target.mean.len())?;
    let dim = source.mean.len();
    let m = &target.sqrt * &source.inv_sqrt;
    let mut matrix = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            matrix.push(m[(i, j)] as f32);
        }
    }
    Ok(AlignmentTransform {
        dim,
        kind: TransformKind::SecondOrder,
        source_mean: source.mean.iter().map(|&v| v as f32).collect(),
        target_mean: target.mean.iter().map(|&v| v as f32).collect(),
        matrix,
    })
}

pub fn fit_second_order(source: &[FeatureVector], target: &[FeatureVector], eps: f64) -> Result<AlignmentTransform> {
    let (s, t) = (CovarianceRoots::fit(source, eps)?, CovarianceRoots::fit(target, eps)?);
    align(&s, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn fv(v: &[f32]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn one_dimensional_scaling() {
        // source: ±2 around 1 (variance 4), target: ±1 around -3 (variance 1)
        let src: Vec<_> = [-1.0f32, 3.0].iter().map(|&v| fv(&[v])).collect();
        let tgt: Vec<_> = [-4.0f32, -2.0].iter().map(|&v| fv(&[v])).collect();
        let t = fit_second_order(&src, &tgt, 1e-9).unwrap();
        assert!((t.matrix[0] - 0.5).abs() < 1e-6);
        let out = t.apply(&fv(&[3.0])).unwrap();
        assert!((out.values()[0] - -2.0).abs() < 1e-5);
    }

    #[test]
    fn same_distribution_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<_> = (0..50)
            .map(|_| fv(&(0..4).map(|_| n.sample(&mut rng) as f32).collect::<Vec<_>>()))
            .collect();
        let t = fit_second_order(&xs, &xs, DEFAULT_EPS).unwrap();
        for x in &xs {
            let y = t.apply(x).unwrap();
            for (a, b) in x.values().iter().zip(y.values()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn identity_and_mean_mapping() {
        let id = AlignmentTransform::identity(3);
        let f = fv(&[0.2, -7.0, 1e3]);
        assert_eq!(id.apply(&f).unwrap(), f);

        let src = vec![fv(&[0.0, 1.0]), fv(&[2.0, 0.0]), fv(&[1.0, 5.0])];
        let tgt = vec![fv(&[10.0, 1.0]), fv(&[12.0, 4.0]), fv(&[9.0, 2.0])];
        let t = fit_second_order(&src, &tgt, DEFAULT_EPS).unwrap();
        let out = t.apply(&fv(&t.source_mean)).unwrap();
        for (a, b) in out.values().iter().zip(&t.target_mean) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let a = vec![fv(&[1.0, 2.0])];
        let b = vec![fv(&[1.0, 2.0]), fv(&[0.0, 1.0])];
        assert!(fit_second_order(&a, &b, DEFAULT_EPS).is_err());
        let c = vec![fv(&[1.0]), fv(&[0.0])];
        assert!(fit_second_order(&b, &c, DEFAULT_EPS).is_err());
        assert!(AlignmentTransform::identity(2).apply(&fv(&[1.0])).is_err());
    }

    #[test]
    fn eigen_order_and_signs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 1.0, 0.0, 1.0, 3.0]);
        let (vals, vecs) = sorted_eigen(&m);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for k in 0..3 {
            let first = vecs.column(k).iter().copied().find(|x| x.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
        let (vals2, vecs2) = sorted_eigen(&m);
        assert_eq!(vals, vals2);
        assert_eq!(vecs, vecs2);
    }

    #[test]
    fn atfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = vec![fv(&[0.0, 1.0]), fv(&[2.0, 0.0]), fv(&[1.0, 5.0])];
        let tgt = vec![fv(&[10.0, 1.0]), fv(&[12.0, 4.0]), fv(&[9.0, 2.0])];
        let t = fit_second_order(&src, &tgt, DEFAULT_EPS).unwrap();
        let p = dir.path().join("t.atfm");
        t.save(&p).unwrap();
        assert_eq!(AlignmentTransform::load(&p).unwrap(), t);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 12 + 1 + 4 * (2 + 2 + 4));
    }
}
