//! Object classification on whole-image and level descriptors, the nine
//! level-pair evaluations, and margin fusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{align, AlignmentTransform, CovarianceRoots, DEFAULT_EPS};
use crate::classifier::{argmax, train_multiclass, MulticlassModel, TrainConfig};
use crate::error::{check_dim, Error, Result};
use crate::levels::Level;
use crate::types::FeatureVector;

/// Level pairs `(source, target)` in report order.
pub const PAIR_ORDER: [(Level, Level); 9] = [
    (Level::L, Level::L),
    (Level::L, Level::H),
    (Level::L, Level::M),
    (Level::M, Level::M),
    (Level::M, Level::L),
    (Level::M, Level::H),
    (Level::H, Level::H),
    (Level::H, Level::L),
    (Level::H, Level::M),
];

pub fn pair_name((s, t): (Level, Level)) -> String {
    format!("{s}-{t} level")
}

/// Per-class margins of one classifier on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMatrix {
    pub classes: Vec<String>,
    pub values: Vec<f64>,
}

impl MarginMatrix {
    pub fn new(classes: Vec<String>, values: Vec<f64>) -> Result<Self> {
        check_dim(classes.len(), values.len())?;
        Ok(Self { classes, values })
    }
}

pub fn margins(model: &MulticlassModel, f: &FeatureVector) -> Result<MarginMatrix> {
    MarginMatrix::new(model.classes.clone(), model.margins(f)?)
}

/// Fused per-class scores `mean_j D_c^j + D_c^G`.
pub fn fused_scores(levels: &[MarginMatrix], global: &MarginMatrix) -> Result<Vec<f64>> {
    if levels.is_empty() {
        return Err(Error::invalid("fusion needs at least one level margin set"));
    }
    let mut sums = vec![0.0f64; global.values.len()];
    for m in levels {
        if m.classes != global.classes {
            return Err(Error::invalid("class lists differ between fused classifiers"));
        }
        for (s, v) in sums.iter_mut().zip(&m.values) {
            *s += v;
        }
    }
    let n = levels.len() as f64;
    Ok(sums.iter().zip(&global.values).map(|(s, g)| s / n + g).collect())
}

/// Index of the winning class; ties go to the lexicographically first class.
pub fn fuse(levels: &[MarginMatrix], global: &MarginMatrix) -> Result<usize> {
    let scores = fused_scores(levels, global)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| global.classes[a].cmp(&global.classes[b]));
    let mut best = order[0];
    for &i in &order[1..] {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Descriptors of one side of a domain pair, one entry per image.
#[derive(Debug, Clone, Default)]
pub struct DescriptorSet {
    pub paths: Vec<String>,
    pub classes: Vec<Option<String>>,
    pub global: Vec<FeatureVector>,
    /// Indexed by [`Level::index`].
    pub levels: [Vec<FeatureVector>; 3],
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    fn check(&self, what: &str) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid(format!("{what} set is empty")));
        }
        if self.classes.len() != n || self.global.len() != n || self.levels.iter().any(|l| l.len() != n) {
            return Err(Error::invalid(format!("missing descriptors in {what} set")));
        }
        Ok(())
    }

    fn labels(&self, what: &str) -> Result<Vec<&str>> {
        self.classes
            .iter()
            .zip(&self.paths)
            .map(|(c, p)| {
                c.as_deref()
                    .ok_or_else(|| Error::invalid(format!("{what} image {p} has no class label")))
            })
            .collect()
    }
}

/// Fits one transform per level pair. Implementations other than the
/// built-in ones only need to return an affine [`AlignmentTransform`].
pub trait Adapter: Sync {
    fn name(&self) -> &str;

    fn fit(&self, source: &[FeatureVector], target: &[FeatureVector]) -> Result<AlignmentTransform>;

    /// Transforms indexed `[source level][target level]`.
    fn fit_levels(
        &self,
        source: &[Vec<FeatureVector>; 3],
        target: &[Vec<FeatureVector>; 3],
    ) -> Result<Vec<Vec<AlignmentTransform>>> {
        source
            .iter()
            .map(|s| target.iter().map(|t| self.fit(s, t)).collect())
            .collect()
    }
}

pub struct IdentityAdapter;

impl Adapter for IdentityAdapter {
    fn name(&self) -> &str {
        "identity"
    }

    fn fit(&self, source: &[FeatureVector], _target: &[FeatureVector]) -> Result<AlignmentTransform> {
        let dim = source.first().map_or(0, FeatureVector::dim);
        Ok(AlignmentTransform::identity(dim))
    }
}

pub struct SecondOrderAdapter {
    pub eps: f64,
}

impl Default for SecondOrderAdapter {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS }
    }
}

impl Adapter for SecondOrderAdapter {
    fn name(&self) -> &str {
        "second-order"
    }

    fn fit(&self, source: &[FeatureVector], target: &[FeatureVector]) -> Result<AlignmentTransform> {
        align(&CovarianceRoots::fit(source, self.eps)?, &CovarianceRoots::fit(target, self.eps)?)
    }

    fn fit_levels(
        &self,
        source: &[Vec<FeatureVector>; 3],
        target: &[Vec<FeatureVector>; 3],
    ) -> Result<Vec<Vec<AlignmentTransform>>> {
        let roots = |sets: &[Vec<FeatureVector>; 3]| -> Result<Vec<CovarianceRoots>> {
            sets.par_iter().map(|s| CovarianceRoots::fit(s, self.eps)).collect()
        };
        let (src, tgt) = (roots(source)?, roots(target)?);
        src.iter()
            .map(|s| tgt.iter().map(|t| align(s, t)).collect())
            .collect()
    }
}

/// Results of the nine level-pair classifiers on the target set.
#[derive(Debug, Clone)]
pub struct PairEvaluation {
    pub classes: Vec<String>,
    /// `[source level][target level]`.
    pub accuracy: [[f64; 3]; 3],
    /// Per pair in [`PAIR_ORDER`], per target image.
    pub margins: Vec<Vec<MarginMatrix>>,
    /// Classifier used for each pair in [`PAIR_ORDER`].
    pub models: Vec<MulticlassModel>,
    /// Alignment fitted for each pair in [`PAIR_ORDER`], when adapting.
    pub transforms: Option<Vec<AlignmentTransform>>,
}

impl PairEvaluation {
    pub fn pair_accuracy(&self, (s, t): (Level, Level)) -> f64 {
        self.accuracy[s.index()][t.index()]
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().flatten().sum::<f64>() / 9.0
    }
}

fn accuracy(predicted: &[usize], classes: &[String], truth: &[&str]) -> f64 {
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| classes[p] == t)
        .count();
    hits as f64 / truth.len() as f64
}

fn score_set(model: &MulticlassModel, features: &[FeatureVector]) -> Result<Vec<MarginMatrix>> {
    features.iter().map(|f| margins(model, f)).collect()
}

/// Trains on source level `i` (optionally aligned towards target level `j`)
/// and tests on target level `j`, for all nine pairs.
pub fn evaluate_pairs(
    source: &DescriptorSet,
    target: &DescriptorSet,
    adapter: Option<&dyn Adapter>,
    cfg: &TrainConfig,
) -> Result<PairEvaluation> {
    source.check("source")?;
    target.check("target")?;
    let src_labels = source.labels("source")?;
    let tgt_labels = target.labels("target")?;

    let mut fitted = None;
    let models: Vec<Vec<MulticlassModel>> = match adapter {
        None => {
            let per_source = Level::ALL
                .par_iter()
                .map(|l| train_multiclass(&source.levels[l.index()], &src_labels, cfg))
                .collect::<Result<Vec<_>>>()?;
            per_source.into_iter().map(|m| vec![m; 3]).collect()
        }
        Some(adapter) => {
            let transforms = adapter.fit_levels(&source.levels, &target.levels)?;
            let jobs: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
            let trained = jobs
                .par_iter()
                .map(|&(i, j)| {
                    let aligned = source.levels[i]
                        .iter()
                        .map(|f| transforms[i][j].apply(f))
                        .collect::<Result<Vec<_>>>()?;
                    train_multiclass(&aligned, &src_labels, cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            fitted = Some(
                PAIR_ORDER
                    .iter()
                    .map(|&(s, t)| transforms[s.index()][t.index()].clone())
                    .collect(),
            );
            trained.chunks(3).map(|c| c.to_vec()).collect()
        }
    };

    let classes = models[0][0].classes.clone();
    let mut acc = [[0.0; 3]; 3];
    let mut pair_margins = Vec::with_capacity(9);
    for &(s, t) in &PAIR_ORDER {
        let model = &models[s.index()][t.index()];
        let m = score_set(model, &target.levels[t.index()])?;
        let predicted: Vec<usize> = m.iter().map(|mm| argmax(&mm.values)).collect();
        acc[s.index()][t.index()] = accuracy(&predicted, &classes, &tgt_labels);
        pair_margins.push(m);
    }
    Ok(PairEvaluation {
        classes,
        accuracy: acc,
        margins: pair_margins,
        models: PAIR_ORDER
            .iter()
            .map(|&(s, t)| models[s.index()][t.index()].clone())
            .collect(),
        transforms: fitted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ReportRow {
    fn new(name: impl Into<String>, accuracy: f64) -> Self {
        Self {
            name: name.into(),
            accuracy: Some(accuracy),
            stderr: None,
            note: None,
        }
    }
}

pub const ROW_GLOBAL: &str = "G";
pub const ROW_GLOBAL_FT: &str = "G-FT";
pub const ROW_FUSED: &str = "G + DL";
pub const ROW_FUSED_ADAPTED: &str = "G + adapted-DL";

/// Accuracy table for one domain pair: G, G-FT, nine level pairs and two
/// fused rows. The nine adapted level-pair accuracies are listed separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pair: String,
    pub rows: Vec<ReportRow>,
    pub adapted_levels: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.row(name).and_then(|r| r.accuracy)
    }

    pub fn best_level_accuracy(&self) -> f64 {
        PAIR_ORDER
            .iter()
            .filter_map(|&p| self.accuracy(&pair_name(p)))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// One target image's fused outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub path: String,
    pub truth: String,
    pub predicted: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusedEvaluation {
    pub report: Report,
    pub global_model: MulticlassModel,
    pub plain: PairEvaluation,
    pub adapted: PairEvaluation,
    pub classes: Vec<String>,
    pub predictions: Vec<Prediction>,
    pub adapted_predictions: Vec<Prediction>,
}

fn fused_predictions(
    target: &DescriptorSet,
    truth: &[&str],
    global: &[MarginMatrix],
    pairs: &PairEvaluation,
) -> Result<(f64, Vec<Prediction>)> {
    let mut out = Vec::with_capacity(target.len());
    let mut hits = 0;
    for (i, g) in global.iter().enumerate() {
        let levels: Vec<MarginMatrix> = pairs.margins.iter().map(|m| m[i].clone()).collect();
        let scores = fused_scores(&levels, g)?;
        let c = fuse(&levels, g)?;
        hits += (g.classes[c] == truth[i]) as usize;
        out.push(Prediction {
            path: target.paths[i].clone(),
            truth: truth[i].to_string(),
            predicted: g.classes[c].clone(),
            scores,
        });
    }
    Ok((hits as f64 / truth.len() as f64, out))
}

/// Full accuracy table: global classifier, the nine level pairs with and
/// without adaptation, and both fusions. All classifiers share `cfg`.
pub fn evaluate_fused(
    pair: &str,
    source: &DescriptorSet,
    target: &DescriptorSet,
    adapter: &dyn Adapter,
    cfg: &TrainConfig,
) -> Result<FusedEvaluation> {
    source.check("source")?;
    target.check("target")?;
    let src_labels = source.labels("source")?;
    let tgt_labels = target.labels("target")?;

    let global_model = train_multiclass(&source.global, &src_labels, cfg)?;
    let global_margins = score_set(&global_model, &target.global)?;
    let global_pred: Vec<usize> = global_margins.iter().map(|m| argmax(&m.values)).collect();
    let global_acc = accuracy(&global_pred, &global_model.classes, &tgt_labels);

    let plain = evaluate_pairs(source, target, None, cfg)?;
    let adapted = evaluate_pairs(source, target, Some(adapter), cfg)?;
    let (fused_acc, predictions) = fused_predictions(target, &tgt_labels, &global_margins, &plain)?;
    let (fused_adapted_acc, adapted_predictions) =
        fused_predictions(target, &tgt_labels, &global_margins, &adapted)?;

    let mut rows = vec![
        ReportRow::new(ROW_GLOBAL, global_acc),
        ReportRow {
            name: ROW_GLOBAL_FT.into(),
            accuracy: None,
            stderr: None,
            note: Some("not applicable: no fine-tuned global features".into()),
        },
    ];
    rows.extend(PAIR_ORDER.iter().map(|&p| ReportRow::new(pair_name(p), plain.pair_accuracy(p))));
    rows.push(ReportRow::new(ROW_FUSED, fused_acc));
    rows.push(ReportRow::new(ROW_FUSED_ADAPTED, fused_adapted_acc));
    let adapted_levels = PAIR_ORDER
        .iter()
        .map(|&p| ReportRow::new(format!("{} ({})", pair_name(p), adapter.name()), adapted.pair_accuracy(p)))
        .collect();

    Ok(FusedEvaluation {
        report: Report {
            pair: pair.to_string(),
            rows,
            adapted_levels,
        },
        classes: global_model.classes.clone(),
        global_model,
        plain,
        adapted,
        predictions,
        adapted_predictions,
    })
}

/// Mean accuracy per row with the standard error over repetitions.
pub fn combine_reports(reports: &[Report]) -> Result<Report> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to combine"))?;
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    let combine_rows = |pick: &dyn Fn(&Report) -> &Vec<ReportRow>| -> Vec<ReportRow> {
        pick(first)
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| pick(r)[i].accuracy).collect();
                if vals.len() != reports.len() {
                    return row.clone();
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                ReportRow {
                    name: row.name.clone(),
                    accuracy: Some(mean),
                    stderr: Some((var / n).sqrt()),
                    note: row.note.clone(),
                }
            })
            .collect()
    };
    Ok(Report {
        pair: first.pair.clone(),
        rows: combine_rows(&|r| &r.rows),
        adapted_levels: combine_rows(&|r| &r.adapted_levels),
    })
}

/// Writes predictions as CSV: image, true class, predicted class, then one
/// fused score column per class.
pub fn predictions_csv(classes: &[String], predictions: &[Prediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image".to_string(), "true_class".into(), "predicted_class".into()];
    header.extend(classes.iter().map(|c| format!("score_{c}")));
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for p in predictions {
        let mut rec = vec![p.path.clone(), p.truth.clone(), p.predicted.clone()];
        rec.extend(p.scores.iter().map(|s| format!("{s:.9}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm(classes: &[&str], values: &[f64]) -> MarginMatrix {
        MarginMatrix::new(classes.iter().map(|s| s.to_string()).collect(), values.to_vec()).unwrap()
    }

    #[test]
    fn fuse_examples() {
        let cls = ["a", "b", "c"];
        let zeros = vec![mm(&cls, &[0.0; 3]); 9];
        assert_eq!(fuse(&zeros, &mm(&cls, &[0.1, 0.7, -0.2])).unwrap(), 1);

        let shared = vec![mm(&cls, &[0.3, -0.1, 0.9]); 9];
        assert_eq!(fuse(&shared, &mm(&cls, &[0.0; 3])).unwrap(), 2);

        let shifted: Vec<_> = shared.iter().map(|m| mm(&cls, &m.values.iter().map(|v| v + 5.0).collect::<Vec<_>>())).collect();
        assert_eq!(fuse(&shifted, &mm(&cls, &[5.0; 3])).unwrap(), 2);
    }

    #[test]
    fn fuse_breaks_ties_lexicographically() {
        let cls = ["b", "a"];
        let levels = vec![mm(&cls, &[1.0, 1.0]); 9];
        assert_eq!(fuse(&levels, &mm(&cls, &[0.0, 0.0])).unwrap(), 1);
    }

    #[test]
    fn fuse_rejects_mismatched_classes() {
        let levels = vec![mm(&["a", "b"], &[0.0, 1.0]); 9];
        assert!(fuse(&levels, &mm(&["a", "c"], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn perfect_global_dominates_weak_levels() {
        // Global gap 2.0 in favour of the truth; level gaps average below it.
        let cls = ["x", "y"];
        for truth in 0..2 {
            let mut g = [0.0; 2];
            g[truth] = 2.0;
            let levels: Vec<_> = (0..9)
                .map(|j| {
                    let mut v = [0.0; 2];
                    v[1 - truth] = if j % 2 == 0 { 3.0 } else { 0.5 };
                    mm(&cls, &v)
                })
                .collect();
            assert_eq!(fuse(&levels, &mm(&cls, &g)).unwrap(), truth);
        }
    }

    #[test]
    fn combine_reports_mean_and_stderr() {
        let mk = |a: f64| Report {
            pair: "P->Q".into(),
            rows: vec![ReportRow::new("G", a)],
            adapted_levels: vec![],
        };
        let r = combine_reports(&[mk(0.5), mk(0.7)]).unwrap();
        assert!((r.rows[0].accuracy.unwrap() - 0.6).abs() < 1e-12);
        assert!((r.rows[0].stderr.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let text = predictions_csv(
            &["a".into(), "b".into()],
            &[Prediction {
                path: "img/1.png".into(),
                truth: "a".into(),
                predicted: "b".into(),
                scores: vec![0.5, 1.25],
            }],
        )
        .unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "image,true_class,predicted_class,score_a,score_b");
        assert_eq!(lines.next().unwrap(), "img/1.png,a,b,0.500000000,1.250000000");
    }
}
