//! L2-regularized logistic regression trained by deterministic full-batch
//! gradient descent, used both as the domain discriminator and (one row per
//! class) as the one-vs-rest object classifier.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::format::{read_file, ByteReader, ByteWriter};
use crate::types::FeatureVector;

pub const LMOD_MAGIC: &[u8; 4] = b"LMOD";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub epochs: usize,
    /// Requested step size. The effective step is capped at `1 / L`, where
    /// `L` bounds the curvature of the objective, so the loss never increases.
    pub learning_rate: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-3,
            epochs: 2000,
            learning_rate: 0.1,
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.tolerance > 0.0) || !(self.l2_lambda >= 0.0) {
            return Err(Error::invalid("learning_rate and tolerance must be > 0, l2_lambda >= 0"));
        }
        Ok(())
    }
}

/// A weight vector and bias; the decision value is `w·f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl LinearRow {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn margin(&self, f: &FeatureVector) -> Result<f64> {
        check_dim(self.dim(), f.dim())?;
        Ok(dot(&self.weights, f.values()) + self.bias as f64)
    }

    pub fn negated(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| -w).collect(),
            bias: -self.bias,
        }
    }
}

#[inline]
fn dot(w: &[f32], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Binary linear model. `classes[1]` is the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub classes: Vec<String>,
    pub row: LinearRow,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.row.dim()
    }

    pub fn weights(&self) -> &[f32] {
        &self.row.weights
    }

    pub fn bias(&self) -> f32 {
        self.row.bias
    }

    pub fn negated(&self) -> Self {
        Self {
            classes: self.classes.clone(),
            row: self.row.negated(),
        }
    }

    pub fn predict(&self, f: &FeatureVector) -> Result<u8> {
        Ok((margin(self, f)? > 0.0) as u8)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        encode_lmod(&self.classes, std::slice::from_ref(&self.row)).write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (classes, mut rows) = decode_lmod(&read_file(path.as_ref())?)?;
        if classes.len() != 2 || rows.len() != 1 {
            return Err(Error::Format(format!(
                "expected a binary model, found {} classes / {} rows",
                classes.len(),
                rows.len()
            )));
        }
        Ok(Self {
            classes,
            row: rows.remove(0),
        })
    }
}

/// Decision value `w·f + b`.
pub fn margin(model: &LinearModel, f: &FeatureVector) -> Result<f64> {
    model.row.margin(f)
}

/// `u_i = |w_i| / max_j |w_j|`, or all ones when every weight is zero.
pub fn domain_weighting(model: &LinearModel) -> Vec<f32> {
    let max = model.weights().iter().fold(0.0f32, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return vec![1.0; model.dim()];
    }
    model.weights().iter().map(|w| w.abs() / max).collect()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Outcome of a binary training run.
#[derive(Debug, Clone)]
pub struct TrainedRow {
    pub row: LinearRow,
    /// Objective value at initialization and after every epoch.
    pub loss_history: Vec<f64>,
}

fn check_features(features: &[FeatureVector]) -> Result<usize> {
    let dim = features
        .first()
        .ok_or_else(|| Error::invalid("no training examples"))?
        .dim();
    for f in features {
        check_dim(dim, f.dim())?;
    }
    Ok(dim)
}

/// Core logistic trainer over `{0,1}` labels.
///
/// Residuals are evaluated as `σ(z)` for negatives and `-σ(-z)` for positives
/// so flipping all labels yields exactly the negated trajectory.
pub fn train_logistic(features: &[FeatureVector], labels: &[u8], cfg: &TrainConfig) -> Result<TrainedRow> {
    cfg.validate()?;
    check_dim(features.len(), labels.len())?;
    let dim = check_features(features)?;
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("binary labels must be 0 or 1"));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::invalid("training needs at least one example of each label"));
    }

    let n = features.len() as f64;
    let lambda = cfg.l2_lambda;
    let max_sq = features
        .iter()
        .map(|f| f.values().iter().map(|&v| v as f64 * v as f64).sum::<f64>() + 1.0)
        .fold(0.0f64, f64::max);
    let curvature = 0.25 * max_sq + lambda;
    let step = cfg.learning_rate.min(1.0 / curvature);

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let objective = |w: &[f64], b: f64| -> f64 {
        let mut loss = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let z = dot64(w, f.values()) + b;
            loss += if y == 1 { softplus(-z) } else { softplus(z) };
        }
        loss / n + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
    };

    let mut history = vec![objective(&w, b)];
    let mut grad = vec![0.0f64; dim];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let z = dot64(&w, f.values()) + b;
            let residual = if y == 1 { -sigmoid(-z) } else { sigmoid(z) };
            for (g, &x) in grad.iter_mut().zip(f.values()) {
                *g += residual * x as f64;
            }
            grad_b += residual;
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= step * (g / n + lambda * *wi);
        }
        b -= step * (grad_b / n);

        let loss = objective(&w, b);
        let prev = *history.last().unwrap();
        history.push(loss);
        if prev - loss < cfg.tolerance {
            break;
        }
    }

    Ok(TrainedRow {
        row: LinearRow {
            weights: w.iter().map(|&v| v as f32).collect(),
            bias: b as f32,
        },
        loss_history: history,
    })
}

#[inline]
fn dot64(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a * b as f64).sum()
}

/// Trains the binary discriminator; `classes` names label 0 then label 1.
pub fn train_binary(
    features: &[FeatureVector],
    labels: &[u8],
    classes: [&str; 2],
    cfg: &TrainConfig,
) -> Result<LinearModel> {
    let trained = train_logistic(features, labels, cfg)?;
    Ok(LinearModel {
        classes: classes.iter().map(|s| s.to_string()).collect(),
        row: trained.row,
    })
}

/// One-vs-rest model: one row per class, classes in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassModel {
    pub classes: Vec<String>,
    pub rows: Vec<LinearRow>,
}

impl MulticlassModel {
    pub fn dim(&self) -> usize {
        self.rows[0].dim()
    }

    /// Per-class decision values `D_c = w_c·f + b_c`.
    pub fn margins(&self, f: &FeatureVector) -> Result<Vec<f64>> {
        self.rows.iter().map(|r| r.margin(f)).collect()
    }

    /// Index of the highest margin; ties go to the earlier class.
    pub fn predict(&self, f: &FeatureVector) -> Result<usize> {
        Ok(argmax(&self.margins(f)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        encode_lmod(&self.classes, &self.rows).write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (classes, rows) = decode_lmod(&read_file(path.as_ref())?)?;
        if rows.len() != classes.len() {
            return Err(Error::Format(format!(
                "expected one row per class, found {} classes / {} rows",
                classes.len(),
                rows.len()
            )));
        }
        Ok(Self { classes, rows })
    }
}

/// First index of the maximum (strict comparison keeps the earliest on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn train_multiclass(features: &[FeatureVector], labels: &[&str], cfg: &TrainConfig) -> Result<MulticlassModel> {
    check_dim(features.len(), labels.len())?;
    check_features(features)?;
    let classes: Vec<String> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    if classes.len() < 2 {
        return Err(Error::invalid("multiclass training needs at least two classes"));
    }
    let rows = classes
        .iter()
        .map(|c| {
            let y: Vec<u8> = labels.iter().map(|l| (l == c) as u8).collect();
            train_logistic(features, &y, cfg).map(|t| t.row)
        })
        .collect::<Result<_>>()?;
    Ok(MulticlassModel { classes, rows })
}

pub(crate) fn encode_lmod(classes: &[String], rows: &[LinearRow]) -> ByteWriter {
    let dim = rows.first().map_or(0, LinearRow::dim);
    let labels = classes.join("\0");
    let mut w = ByteWriter::header(LMOD_MAGIC);
    w.u32(dim as u32);
    w.u32(classes.len() as u32);
    w.u32(labels.len() as u32);
    w.bytes(labels.as_bytes());
    for row in rows {
        w.f32s(&row.weights);
        w.f32s(&[row.bias]);
    }
    w
}

pub(crate) fn decode_lmod(buf: &[u8]) -> Result<(Vec<String>, Vec<LinearRow>)> {
    let mut r = ByteReader::open(buf, LMOD_MAGIC, "LMOD")?;
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let block = r.u32()? as usize;
    let text = std::str::from_utf8(r.bytes(block)?).map_err(|_| Error::Format("class labels are not UTF-8".into()))?;
    let classes: Vec<String> = if count == 0 {
        Vec::new()
    } else {
        text.split('\0').map(String::from).collect()
    };
    if classes.len() != count {
        return Err(Error::Format(format!(
            "class block holds {} labels, header says {count}",
            classes.len()
        )));
    }
    let row_bytes = 4 * (dim + 1);
    if r.remaining() % row_bytes != 0 || r.remaining() == 0 {
        return Err(Error::Format("LMOD weight block has a partial row".into()));
    }
    let mut rows = Vec::new();
    while r.remaining() > 0 {
        let mut v = r.f32s(dim + 1)?;
        let bias = v.pop().unwrap();
        rows.push(LinearRow { weights: v, bias });
    }
    r.finish()?;
    Ok((classes, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fv(v: &[f32]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn accuracy(model: &LinearModel, xs: &[FeatureVector], ys: &[u8]) -> f64 {
        let hits = xs.iter().zip(ys).filter(|(x, &y)| model.predict(x).unwrap() == y).count();
        hits as f64 / xs.len() as f64
    }

    #[test]
    fn separable_pair() {
        let xs = vec![fv(&[-1.0]), fv(&[1.0])];
        let ys = vec![0, 1];
        let cfg = TrainConfig {
            l2_lambda: 0.0,
            ..Default::default()
        };
        let m = train_binary(&xs, &ys, ["a", "b"], &cfg).unwrap();
        assert_eq!(accuracy(&m, &xs, &ys), 1.0);
    }

    #[test]
    fn flipped_labels_negate_model_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<_> = (0..40)
            .map(|_| fv(&[rng.random::<f32>(), rng.random::<f32>() * 2.0 - 1.0, rng.random()]))
            .collect();
        let ys: Vec<u8> = (0..40).map(|i| (i % 3 == 0) as u8).collect();
        let flipped: Vec<u8> = ys.iter().map(|y| 1 - y).collect();
        let cfg = TrainConfig::default();
        let a = train_binary(&xs, &ys, ["a", "b"], &cfg).unwrap();
        let b = train_binary(&xs, &flipped, ["a", "b"], &cfg).unwrap();
        assert_eq!(a.negated().row, b.row);
    }

    #[test]
    fn gaussian_blobs_reach_bayes_accuracy() {
        // Bayes boundary is x = 0; with unit variance and means ±2 its error
        // is Φ(-2) ≈ 2.3%, so ≥ 95% training accuracy is expected.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..200 {
            let y = (i % 2) as u8;
            let mx = if y == 1 { 2.0 } else { -2.0 };
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            xs.push(fv(&[(mx + a) as f32, b as f32]));
            ys.push(y);
        }
        let cfg = TrainConfig {
            l2_lambda: 0.01,
            ..Default::default()
        };
        let m = train_binary(&xs, &ys, ["neg", "pos"], &cfg).unwrap();
        let bayes = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| ((x.values()[0] > 0.0) as u8) == y)
            .count() as f64
            / 200.0;
        let acc = accuracy(&m, &xs, &ys);
        assert!(acc >= 0.95, "accuracy {acc}");
        assert!(acc >= bayes - 0.02, "accuracy {acc} vs bayes {bayes}");
    }

    #[test]
    fn rejects_single_class_and_ragged_input() {
        let cfg = TrainConfig::default();
        assert!(train_binary(&[fv(&[1.0]), fv(&[2.0])], &[1, 1], ["a", "b"], &cfg).is_err());
        assert!(matches!(
            train_binary(&[fv(&[1.0]), fv(&[2.0, 0.0])], &[0, 1], ["a", "b"], &cfg),
            Err(Error::DimMismatch { .. })
        ));
        assert!(train_binary(&[fv(&[1.0]), fv(&[2.0])], &[0, 1], ["a", "b"], &TrainConfig { epochs: 0, ..cfg }).is_err());
    }

    #[test]
    fn margin_examples() {
        let m = LinearModel {
            classes: vec!["a".into(), "b".into()],
            row: LinearRow {
                weights: vec![1.0, 0.0],
                bias: 0.0,
            },
        };
        assert_eq!(margin(&m, &fv(&[3.0, 5.0])).unwrap(), 3.0);
        let m2 = LinearModel {
            row: LinearRow {
                weights: vec![0.3, -1.2],
                bias: 0.7,
            },
            ..m.clone()
        };
        assert_eq!(margin(&m2, &FeatureVector::zeros(2)).unwrap(), 0.7f32 as f64);
        let f = fv(&[0.9, 2.5]);
        assert_eq!(margin(&m2, &f).unwrap() + margin(&m2.negated(), &f).unwrap(), 0.0);
        assert!(margin(&m2, &fv(&[1.0])).is_err());
    }

    #[test]
    fn weighting_examples() {
        let mk = |w: Vec<f32>| LinearModel {
            classes: vec!["a".into(), "b".into()],
            row: LinearRow { weights: w, bias: 1.0 },
        };
        assert_eq!(domain_weighting(&mk(vec![2.0, -4.0])), vec![0.5, 1.0]);
        assert_eq!(domain_weighting(&mk(vec![0.0, 0.0, 0.0])), vec![1.0, 1.0, 1.0]);
        let u = domain_weighting(&mk(vec![0.1, -0.7, 0.3, 0.0]));
        assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(u.iter().cloned().fold(0.0, f32::max), 1.0);
    }

    fn blobs(k: usize, per: usize, seed: u64) -> (Vec<FeatureVector>, Vec<String>) {
        let centers = [(0.0, 5.0), (5.0, -3.0), (-5.0, -3.0), (4.0, 4.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..k * per {
            let c = i % k;
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            xs.push(fv(&[(centers[c].0 + a) as f32, (centers[c].1 + b) as f32]));
            ys.push(format!("class{c}"));
        }
        (xs, ys)
    }

    #[test]
    fn multiclass_matches_nearest_centroid_oracle() {
        let (xs, ys) = blobs(3, 50, 2);
        let labels: Vec<&str> = ys.iter().map(String::as_str).collect();
        let m = train_multiclass(&xs, &labels, &TrainConfig::default()).unwrap();
        assert_eq!(m.classes, vec!["class0", "class1", "class2"]);

        let mut centroids = [[0.0f64; 2]; 3];
        for (x, y) in xs.iter().zip(&ys) {
            let c = m.classes.iter().position(|k| k == y).unwrap();
            centroids[c][0] += x.values()[0] as f64 / 50.0;
            centroids[c][1] += x.values()[1] as f64 / 50.0;
        }
        let mut hits = 0;
        let mut oracle_hits = 0;
        for (x, y) in xs.iter().zip(&ys) {
            let truth = m.classes.iter().position(|k| k == y).unwrap();
            hits += (m.predict(x).unwrap() == truth) as usize;
            let d: Vec<f64> = centroids
                .iter()
                .map(|c| -((x.values()[0] as f64 - c[0]).powi(2) + (x.values()[1] as f64 - c[1]).powi(2)))
                .collect();
            oracle_hits += (argmax(&d) == truth) as usize;
        }
        let acc = hits as f64 / xs.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
        assert!(acc >= oracle_hits as f64 / xs.len() as f64 - 0.03);
    }

    #[test]
    fn two_class_prediction_follows_row_difference() {
        let (xs, ys) = blobs(2, 30, 5);
        let labels: Vec<&str> = ys.iter().map(String::as_str).collect();
        let m = train_multiclass(&xs, &labels, &TrainConfig::default()).unwrap();
        for x in &xs {
            let d = m.rows[1].margin(x).unwrap() - m.rows[0].margin(x).unwrap();
            if d != 0.0 {
                assert_eq!(m.predict(x).unwrap(), (d > 0.0) as usize);
            }
        }
    }

    #[test]
    fn duplicated_data_gives_the_same_model() {
        let (xs, ys) = blobs(3, 10, 8);
        let labels: Vec<&str> = ys.iter().map(String::as_str).collect();
        let cfg = TrainConfig::default();
        let a = train_multiclass(&xs, &labels, &cfg).unwrap();
        let xs2: Vec<_> = xs.iter().flat_map(|x| [x.clone(), x.clone()]).collect();
        let l2: Vec<&str> = labels.iter().flat_map(|l| [*l, *l]).collect();
        let b = train_multiclass(&xs2, &l2, &cfg).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            for (x, y) in ra.weights.iter().zip(&rb.weights) {
                assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{x} vs {y}");
            }
            assert!((ra.bias - rb.bias).abs() <= 1e-4 * ra.bias.abs().max(1.0));
        }
    }

    #[test]
    fn multiclass_rejects_single_class() {
        let xs = vec![fv(&[1.0]), fv(&[2.0])];
        assert!(train_multiclass(&xs, &["a", "a"], &TrainConfig::default()).is_err());
    }

    #[test]
    fn lmod_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bin = LinearModel {
            classes: vec!["amazon".into(), "webcam".into()],
            row: LinearRow {
                weights: vec![0.25, -1.5, 3.0],
                bias: -0.125,
            },
        };
        let p = dir.path().join("d.lmod");
        bin.save(&p).unwrap();
        assert_eq!(LinearModel::load(&p).unwrap(), bin);
        assert!(MulticlassModel::load(&p).is_err());

        let multi = MulticlassModel {
            classes: vec!["a".into(), "b".into(), "c".into()],
            rows: vec![bin.row.clone(), bin.row.negated(), bin.row.clone()],
        };
        let p2 = dir.path().join("m.lmod");
        multi.save(&p2).unwrap();
        assert_eq!(MulticlassModel::load(&p2).unwrap(), multi);
        assert!(LinearModel::load(&p2).is_err());

        let bytes = std::fs::read(&p2).unwrap();
        assert_eq!(&bytes[..4], b"LMOD");
        // header 20 bytes + "a\0b\0c" + 3 rows of (3 weights + bias)
        assert_eq!(bytes.len(), 20 + 5 + 3 * 16);
    }
}
