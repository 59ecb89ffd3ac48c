use crate::error::{check_dim, Error, Result};

/// Fixed-dimension feature vector produced by an extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    /// Coordinate-wise maximum, in place.
    pub fn max_assign(&mut self, other: &FeatureVector) -> Result<()> {
        check_dim(self.dim(), other.dim())?;
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            if b > *a {
                *a = b;
            }
        }
        Ok(())
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a FeatureVector>) -> FeatureVector {
        FeatureVector(parts.into_iter().flat_map(|p| p.0.iter().copied()).collect())
    }
}

impl From<FeatureVector> for Vec<f32> {
    fn from(f: FeatureVector) -> Self {
        f.0
    }
}

/// Per-pixel domainness scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainnessMap {
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl DomainnessMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        check_dim(height * width, scores.len())?;
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            scores: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut scores = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                scores.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            scores,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.scores[row * self.width + col] = value;
    }
}
