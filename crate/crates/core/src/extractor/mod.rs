//! Image-to-feature mappings.
//!
//! Everything downstream only sees the [`Extractor`] trait: the built-in
//! gradient/moment descriptor and the FEX0 subprocess bridge both implement it.

mod builtin;
mod subprocess;

pub use builtin::{builtin_extract, BuiltinExtractor, BUILTIN_DIM, GRID_CELLS, ORIENTATION_BINS};
pub use subprocess::{serve_fex0, Fex0Process, SubprocessExtractor, DEFAULT_IO_TIMEOUT};

use crate::error::Result;
use crate::image::ImageTensor;
use crate::occlusion::{occlude, Occluder};
use crate::types::FeatureVector;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorKind {
    Builtin,
    Subprocess(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorDescriptor {
    pub name: String,
    pub dim: usize,
    pub kind: ExtractorKind,
}

pub trait Extractor: Send + Sync {
    fn descriptor(&self) -> &ExtractorDescriptor;

    fn dim(&self) -> usize {
        self.descriptor().dim
    }

    fn extract(&self, img: &ImageTensor) -> Result<FeatureVector>;

    /// Prepares repeated occlusion queries against one image.
    ///
    /// Implementations may cache per-image state, but every vector returned by
    /// the probe must be bit-identical to `extract(occlude(img, ..))`.
    fn probe<'a>(&'a self, img: &'a ImageTensor) -> Result<Box<dyn OcclusionProbe + 'a>> {
        let base = self.extract(img)?;
        Ok(Box::new(RecomputeProbe {
            extractor: self,
            img,
            base,
        }))
    }
}

/// Features of one image and of its occluded variants.
pub trait OcclusionProbe: Send + Sync {
    fn base(&self) -> &FeatureVector;

    fn occluded(&self, occ: &Occluder) -> Result<FeatureVector>;
}

struct RecomputeProbe<'a, E: ?Sized> {
    extractor: &'a E,
    img: &'a ImageTensor,
    base: FeatureVector,
}

impl<E: Extractor + ?Sized> OcclusionProbe for RecomputeProbe<'_, E> {
    fn base(&self) -> &FeatureVector {
        &self.base
    }

    fn occluded(&self, occ: &Occluder) -> Result<FeatureVector> {
        self.extractor.extract(&occlude(self.img, occ)?)
    }
}
