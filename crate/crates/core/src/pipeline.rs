//! End-to-end stages for one (source, target) manifest pair, with on-disk
//! artifacts and resumable caching.
//!
//! Output layout under the run directory:
//!
//! ```text
//! models/domain.lmod, models/domain.json
//! maps/{src,tgt}/NNNN.dmap, index.json   (+ NNNN.heat.png, NNNN.overlay.png)
//! analysis.json
//! levels/{src,tgt}/levels.dfea, global.dfea, levels.json
//! models/global.lmod, models/levels/*.lmod, models/adapted/*.lmod, models/transforms/*.atfm
//! report.json, predictions.csv, predictions_adapted.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{aggregate_stats, fg_bg_stats, RegionStats, DEFAULT_CROP};
use crate::cache::{digest_bytes, KeyBuilder, Stamp};
use crate::classifier::{train_binary, LinearModel, TrainConfig};
use crate::error::{check_dim, Error, Result};
use crate::extractor::Extractor;
use crate::format::{load_features, load_map, save_features, save_map};
use crate::fusion::{combine_reports, evaluate_fused, predictions_csv, DescriptorSet, FusedEvaluation, Report, SecondOrderAdapter, PAIR_ORDER};
use crate::image::{load_image, load_mask, resize_canonical, ImageTensor, SegMask, CANONICAL_SIDE};
use crate::levels::{build_level_descriptors, mix_seed, scale_seeds, Level};
use crate::manifest::{parse_manifest, DatasetManifest};
use crate::occlusion::{build_map, save_heatmap, save_overlay, MapConfig, Weighting, DEFAULT_OVERLAY_THRESHOLD, DEFAULT_PATCH, DEFAULT_STRIDE};
use crate::types::{DomainnessMap, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Src,
    Tgt,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Src, Side::Tgt];

    pub fn dir(self) -> &'static str {
        match self {
            Side::Src => "src",
            Side::Tgt => "tgt",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

/// All parameters that influence pipeline outputs. Worker count is not one
/// of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Images (and masks) are resized to `side`×`side` on load.
    pub side: usize,
    pub patch: usize,
    pub stride: usize,
    /// Occluder colour; `None` uses the mean colour of the domain training images.
    pub fill: Option<[f32; 3]>,
    pub weighting: Weighting,
    /// Share of each domain used to train the discriminator; the rest is held out.
    pub domain_train_fraction: f64,
    pub crop: usize,
    pub overlay_threshold: f32,
    /// Also write heatmap and overlay PNGs next to each map.
    pub heatmaps: bool,
    pub train: TrainConfig,
    pub adapt_eps: f64,
    /// Independent patch samplings; the report gives mean and standard error.
    pub repeats: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            side: CANONICAL_SIDE,
            patch: DEFAULT_PATCH,
            stride: DEFAULT_STRIDE,
            fill: None,
            weighting: Weighting::AbsW,
            domain_train_fraction: 0.7,
            crop: DEFAULT_CROP,
            overlay_threshold: DEFAULT_OVERLAY_THRESHOLD,
            heatmaps: false,
            train: TrainConfig::default(),
            adapt_eps: crate::adaptation::DEFAULT_EPS,
            repeats: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.domain_train_fraction > 0.0 && self.domain_train_fraction <= 1.0) {
            return Err(Error::invalid("domain_train_fraction must be in (0, 1]"));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if !(self.adapt_eps > 0.0) {
            return Err(Error::invalid("adapt_eps must be > 0"));
        }
        Ok(())
    }

    /// Only the mask analysis uses the crop, so only it calls this.
    pub fn check_crop(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.side {
            return Err(Error::invalid(format!(
                "crop {} must lie in 1..={} (the image side)",
                self.crop, self.side
            )));
        }
        Ok(())
    }

    pub fn map_config(&self, fill: [f32; 3]) -> MapConfig {
        MapConfig {
            patch: self.patch,
            stride: self.stride,
            fill,
            weighting: self.weighting,
        }
    }
}

/// One manifest entry, decoded and resized.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub path: String,
    pub domain: String,
    pub class: Option<String>,
    pub image: ImageTensor,
    pub mask: Option<SegMask>,
    /// Hash of the image and mask file contents.
    pub digest: String,
}

pub fn load_set(manifest: &DatasetManifest, side: usize) -> Result<Vec<LoadedImage>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let img_path = manifest.resolve(&e.path);
            let bytes = fs::read(&img_path).map_err(|err| Error::io(&img_path, err))?;
            let mut digest_input = bytes;
            let image = resize_canonical(&load_image(&img_path)?, side)?;
            let mask = match &e.mask {
                Some(m) => {
                    let mask_path = manifest.resolve(m);
                    let mb = fs::read(&mask_path).map_err(|err| Error::io(&mask_path, err))?;
                    digest_input.extend_from_slice(&mb);
                    Some(load_mask(&mask_path)?.resize_nearest(side, side))
                }
                None => None,
            };
            Ok(LoadedImage {
                path: e.path.clone(),
                domain: e.domain.clone(),
                class: e.class.clone(),
                image,
                mask,
                digest: digest_bytes(&digest_input),
            })
        })
        .collect()
}

/// The single domain label of a manifest.
pub fn single_domain(manifest: &DatasetManifest, what: &str) -> Result<String> {
    let domains = manifest.domains();
    match domains.len() {
        1 => Ok(domains.into_iter().next().unwrap().to_string()),
        0 => Err(Error::Manifest(format!("{what} manifest has no entries"))),
        _ => Err(Error::Manifest(format!(
            "{what} manifest mixes domains: {}",
            domains.into_iter().collect::<Vec<_>>().join(", ")
        ))),
    }
}

pub fn extract_all(images: &[LoadedImage], extractor: &dyn Extractor) -> Result<Vec<FeatureVector>> {
    images.par_iter().map(|i| extractor.extract(&i.image)).collect()
}

/// Deterministic split of `0..n` into (train, held-out), both sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((fraction * n as f64).round() as usize).clamp(1.min(n), n);
    let (mut train, mut held) = (idx[..k].to_vec(), idx[k..].to_vec());
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Sidecar of the domain model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub classes: [String; 2],
    pub fill: [f32; 3],
    pub train_images: usize,
    pub heldout_images: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

pub struct DomainStage {
    pub model: LinearModel,
    pub summary: DomainSummary,
}

fn domain_accuracy(model: &LinearModel, samples: &[(&FeatureVector, u8)]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut hits = 0;
    for (f, l) in samples {
        hits += (model.predict(f)? == *l) as usize;
    }
    Ok(Some(hits as f64 / samples.len() as f64))
}

/// Trains the discriminator on a per-domain split. The lexicographically
/// smaller domain is label 0.
pub fn train_domain(
    sets: [(&str, &[LoadedImage], &[FeatureVector]); 2],
    cfg: &PipelineConfig,
) -> Result<DomainStage> {
    let [(da, ..), (db, ..)] = sets;
    if da == db {
        return Err(Error::invalid(format!("source and target share the domain label `{da}`")));
    }
    let negative = da.min(db);
    let classes = [negative.to_string(), da.max(db).to_string()];
    let mut train = Vec::new();
    let mut held = Vec::new();
    let mut fill = [0.0f64; 3];
    for (k, (domain, images, feats)) in sets.into_iter().enumerate() {
        check_dim(images.len(), feats.len())?;
        let label = (domain != negative) as u8;
        let (tr, ho) = split_indices(images.len(), cfg.domain_train_fraction, mix_seed(cfg.seed ^ (0xD0 + k as u64)));
        for &i in &tr {
            let m = images[i].image.channel_means();
            for c in 0..3 {
                fill[c] += m[c];
            }
            train.push((&feats[i], label));
        }
        held.extend(ho.iter().map(|&i| (&feats[i], label)));
    }
    let features: Vec<FeatureVector> = train.iter().map(|(f, _)| (*f).clone()).collect();
    let labels: Vec<u8> = train.iter().map(|(_, l)| *l).collect();
    let model = train_binary(&features, &labels, [&classes[0], &classes[1]], &cfg.train)?;
    let fill = cfg
        .fill
        .unwrap_or_else(|| fill.map(|s| (s / train.len() as f64) as f32));
    let summary = DomainSummary {
        classes,
        fill,
        train_images: train.len(),
        heldout_images: held.len(),
        train_accuracy: domain_accuracy(&model, &train)?.unwrap_or(0.0),
        heldout_accuracy: domain_accuracy(&model, &held)?,
    };
    Ok(DomainStage { model, summary })
}

pub fn compute_maps(images: &[LoadedImage], extractor: &dyn Extractor, model: &LinearModel, cfg: &MapConfig) -> Result<Vec<DomainnessMap>> {
    images
        .par_iter()
        .map(|i| build_map(&i.image, extractor, model, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapIndex {
    pub entries: Vec<IndexEntry>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Optional PNG renderings written next to each map.
#[derive(Debug, Clone, Copy)]
pub struct Renderings {
    pub heatmap: bool,
    pub overlay: bool,
    pub threshold: f32,
}

pub fn write_maps(dir: &Path, images: &[LoadedImage], maps: &[DomainnessMap], render: Renderings) -> Result<MapIndex> {
    check_dim(images.len(), maps.len())?;
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(maps.len());
    for (n, (img, map)) in images.iter().zip(maps).enumerate() {
        let file = format!("{n:04}.dmap");
        save_map(map, dir.join(&file))?;
        if render.heatmap {
            save_heatmap(map, dir.join(format!("{n:04}.heat.png")))?;
        }
        if render.overlay {
            save_overlay(&img.image, map, render.threshold, dir.join(format!("{n:04}.overlay.png")))?;
        }
        entries.push(IndexEntry {
            path: img.path.clone(),
            file,
        });
    }
    let index = MapIndex { entries };
    write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

/// Maps keyed by image path, in index order.
pub fn read_maps(dir: &Path) -> Result<Vec<(String, DomainnessMap)>> {
    let index: MapIndex = read_json(&dir.join("index.json"))?;
    index
        .entries
        .into_iter()
        .map(|e| Ok((e.path, load_map(dir.join(&e.file))?)))
        .collect()
}

/// Maps aligned with `images`; every image must have one.
pub fn match_maps(images: &[LoadedImage], maps: Vec<(String, DomainnessMap)>) -> Result<Vec<DomainnessMap>> {
    let mut by_path: BTreeMap<String, DomainnessMap> = maps.into_iter().collect();
    images
        .iter()
        .map(|i| {
            by_path
                .remove(&i.path)
                .ok_or_else(|| Error::invalid(format!("no map for image {}", i.path)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub path: String,
    pub domain: String,
    #[serde(flatten)]
    pub stats: RegionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg_in: f64,
    pub avg_out: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub pair: String,
    pub crop: usize,
    pub images: Vec<ImageStats>,
    pub skipped: Vec<Skipped>,
    /// Over all analysed images of the pair; absent if none had a usable mask.
    pub aggregate: Option<Aggregate>,
    pub per_domain: BTreeMap<String, Aggregate>,
}

fn aggregate(stats: &[&ImageStats]) -> Result<Aggregate> {
    let pairs: Vec<(f64, f64)> = stats.iter().map(|s| (s.stats.mean_in, s.stats.mean_out)).collect();
    let (avg_in, avg_out) = aggregate_stats(&pairs)?;
    Ok(Aggregate {
        avg_in,
        avg_out,
        images: pairs.len(),
    })
}

/// Inside/outside-mask statistics; images without a mask or with an empty
/// region in the crop are listed as skipped.
pub fn analyze(pair: &str, images: &[LoadedImage], maps: &[DomainnessMap], crop: usize) -> Result<AnalysisReport> {
    check_dim(images.len(), maps.len())?;
    let mut stats = Vec::new();
    let mut skipped = Vec::new();
    for (img, map) in images.iter().zip(maps) {
        let Some(mask) = &img.mask else {
            skipped.push(Skipped {
                path: img.path.clone(),
                reason: "no mask".into(),
            });
            continue;
        };
        match fg_bg_stats(map, mask, crop) {
            Ok(s) => stats.push(ImageStats {
                path: img.path.clone(),
                domain: img.domain.clone(),
                stats: s,
            }),
            Err(Error::InvalidInput(reason)) => skipped.push(Skipped {
                path: img.path.clone(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    let all: Vec<&ImageStats> = stats.iter().collect();
    let aggregate_all = if all.is_empty() { None } else { Some(aggregate(&all)?) };
    let mut per_domain = BTreeMap::new();
    let domains: std::collections::BTreeSet<&str> = stats.iter().map(|s| s.domain.as_str()).collect();
    for d in domains {
        let members: Vec<&ImageStats> = stats.iter().filter(|s| s.domain == d).collect();
        per_domain.insert(d.to_string(), aggregate(&members)?);
    }
    Ok(AnalysisReport {
        pair: pair.to_string(),
        crop,
        images: stats,
        skipped,
        aggregate: aggregate_all,
        per_domain,
    })
}

/// Seed of the patch sampler for one image.
pub fn image_seed(seed: u64, side: Side, index: usize, repeat: usize) -> u64 {
    let s = mix_seed(mix_seed(seed) ^ side.tag());
    mix_seed(mix_seed(s ^ index as u64) ^ repeat as u64)
}

pub fn compute_levels(
    images: &[LoadedImage],
    maps: &[DomainnessMap],
    global: Vec<FeatureVector>,
    extractor: &dyn Extractor,
    seed: u64,
    side: Side,
    repeat: usize,
) -> Result<DescriptorSet> {
    check_dim(images.len(), maps.len())?;
    check_dim(images.len(), global.len())?;
    let per_image = images
        .par_iter()
        .zip(maps)
        .enumerate()
        .map(|(i, (img, map))| {
            build_level_descriptors(&img.image, map, extractor, scale_seeds(image_seed(seed, side, i, repeat)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut levels: [Vec<FeatureVector>; 3] = Default::default();
    for descs in per_image {
        for d in descs {
            levels[d.level.index()].push(d.values);
        }
    }
    Ok(DescriptorSet {
        paths: images.iter().map(|i| i.path.clone()).collect(),
        classes: images.iter().map(|i| i.class.clone()).collect(),
        global,
        levels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRows {
    pub path: String,
    #[serde(rename = "class", default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    /// Row in `global.dfea`.
    pub global: usize,
    /// Rows in `levels.dfea`, keyed by level name.
    pub levels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelIndex {
    pub global_dim: usize,
    pub level_dim: usize,
    pub images: Vec<LevelRows>,
}

/// Writes `levels.dfea` (three rows per image, L/M/H), `global.dfea` and
/// the `levels.json` index.
pub fn write_levels(dir: &Path, set: &DescriptorSet) -> Result<()> {
    create_dir(dir)?;
    let n = set.len();
    let mut rows = Vec::with_capacity(3 * n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut levels = BTreeMap::new();
        for l in Level::ALL {
            levels.insert(l.to_string(), rows.len());
            rows.push(set.levels[l.index()][i].clone());
        }
        images.push(LevelRows {
            path: set.paths[i].clone(),
            class: set.classes[i].clone(),
            global: i,
            levels,
        });
    }
    save_features(&rows, dir.join("levels.dfea"))?;
    save_features(&set.global, dir.join("global.dfea"))?;
    let index = LevelIndex {
        global_dim: set.global.first().map_or(0, FeatureVector::dim),
        level_dim: rows.first().map_or(0, FeatureVector::dim),
        images,
    };
    write_json(&dir.join("levels.json"), &index)
}

pub fn read_levels(dir: &Path) -> Result<DescriptorSet> {
    let index: LevelIndex = read_json(&dir.join("levels.json"))?;
    let rows = load_features(dir.join("levels.dfea"))?;
    let global = load_features(dir.join("global.dfea"))?;
    let fetch = |table: &[FeatureVector], i: usize, dim: usize| -> Result<FeatureVector> {
        let f = table
            .get(i)
            .ok_or_else(|| Error::Format(format!("levels index points past row {i}")))?;
        check_dim(dim, f.dim())?;
        Ok(f.clone())
    };
    let mut set = DescriptorSet::default();
    for img in &index.images {
        set.paths.push(img.path.clone());
        set.classes.push(img.class.clone());
        set.global.push(fetch(&global, img.global, index.global_dim)?);
        for l in Level::ALL {
            let row = *img
                .levels
                .get(&l.to_string())
                .ok_or_else(|| Error::Format(format!("{}: missing level {l}", img.path)))?;
            set.levels[l.index()].push(fetch(&rows, row, index.level_dim)?);
        }
    }
    Ok(set)
}

/// Writes report, prediction CSVs, and the classifiers and transforms
/// behind them.
pub fn write_evaluation(out: &Path, report: &Report, eval: &FusedEvaluation) -> Result<()> {
    let models = out.join("models");
    for sub in ["levels", "adapted", "transforms"] {
        create_dir(&models.join(sub))?;
    }
    eval.global_model.save(models.join("global.lmod"))?;
    for (k, &(s, t)) in PAIR_ORDER.iter().enumerate() {
        let name = format!("{s}{t}");
        eval.plain.models[k].save(models.join("levels").join(format!("{name}.lmod")))?;
        eval.adapted.models[k].save(models.join("adapted").join(format!("{name}.lmod")))?;
        if let Some(tf) = &eval.adapted.transforms {
            tf[k].save(models.join("transforms").join(format!("{name}.atfm")))?;
        }
    }
    let csv_path = out.join("predictions.csv");
    fs::write(&csv_path, predictions_csv(&eval.classes, &eval.predictions)?).map_err(|e| Error::io(&csv_path, e))?;
    let csv_path = out.join("predictions_adapted.csv");
    fs::write(&csv_path, predictions_csv(&eval.classes, &eval.adapted_predictions)?)
        .map_err(|e| Error::io(&csv_path, e))?;
    let report_path = out.join("report.json");
    fs::write(&report_path, report.to_json()).map_err(|e| Error::io(&report_path, e))
}

/// What a pipeline run produced, and which stages were served from cache.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub domain: DomainSummary,
    pub analysis: AnalysisReport,
    pub report: Report,
    pub reused: Vec<String>,
}

fn extractor_key(k: &mut KeyBuilder, extractor: &dyn Extractor) {
    let d = extractor.descriptor();
    k.str("extractor", &d.name).str("dim", &d.dim.to_string());
}

fn levels_dir(out: &Path, side: Side, repeat: usize, repeats: usize) -> PathBuf {
    if repeats == 1 {
        out.join("levels").join(side.dir())
    } else {
        out.join("levels").join(format!("repeat{repeat}")).join(side.dir())
    }
}

/// Runs every stage for `src` → `tgt`. Stages whose stamp matches are
/// loaded from `out` instead of recomputed unless `force` is set.
pub fn run_pipeline(
    src_manifest: &Path,
    tgt_manifest: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    extractor: &dyn Extractor,
    force: bool,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    cfg.check_crop()?;
    let src_m = parse_manifest(src_manifest)?;
    let tgt_m = parse_manifest(tgt_manifest)?;
    let src_domain = single_domain(&src_m, "source")?;
    let tgt_domain = single_domain(&tgt_m, "target")?;
    let pair = format!("{src_domain}->{tgt_domain}");
    create_dir(out)?;
    let mut reused = Vec::new();

    info!("loading {} + {} images", src_m.entries.len(), tgt_m.entries.len());
    let images = [load_set(&src_m, cfg.side)?, load_set(&tgt_m, cfg.side)?];
    let data_key = |side: Side| {
        let mut k = KeyBuilder::new("data");
        k.json("side", &cfg.side);
        for img in &images[side as usize] {
            k.str("path", &img.path)
                .str("domain", &img.domain)
                .json("class", &img.class)
                .str("digest", &img.digest);
        }
        k.finish()
    };
    let data_keys = Side::BOTH.map(data_key);

    let global = [
        extract_all(&images[0], extractor)?,
        extract_all(&images[1], extractor)?,
    ];

    // Domain discriminator.
    let models_dir = out.join("models");
    let domain_key = {
        let mut k = KeyBuilder::new("domain");
        extractor_key(&mut k, extractor);
        k.str("src", &data_keys[0])
            .str("tgt", &data_keys[1])
            .json("seed", &cfg.seed)
            .json("fraction", &cfg.domain_train_fraction)
            .json("fill", &cfg.fill)
            .json("train", &cfg.train);
        k.finish()
    };
    let stamp = Stamp::new(models_dir.join(".domain.key"), domain_key.clone())
        .output(models_dir.join("domain.lmod"))
        .output(models_dir.join("domain.json"));
    let (model, domain) = if !force && stamp.is_fresh() {
        reused.push("domain".to_string());
        (
            LinearModel::load(models_dir.join("domain.lmod"))?,
            read_json::<DomainSummary>(&models_dir.join("domain.json"))?,
        )
    } else {
        info!("training domain discriminator");
        stamp.invalidate()?;
        let stage = train_domain(
            [
                (&src_domain, &images[0], &global[0]),
                (&tgt_domain, &images[1], &global[1]),
            ],
            cfg,
        )?;
        create_dir(&models_dir)?;
        stage.model.save(models_dir.join("domain.lmod"))?;
        write_json(&models_dir.join("domain.json"), &stage.summary)?;
        stamp.commit()?;
        (stage.model, stage.summary)
    };
    check_dim(extractor.dim(), model.dim())?;
    let map_cfg = cfg.map_config(domain.fill);

    // Domainness maps.
    let render = Renderings {
        heatmap: cfg.heatmaps,
        overlay: cfg.heatmaps,
        threshold: cfg.overlay_threshold,
    };
    let mut maps: Vec<Vec<DomainnessMap>> = Vec::with_capacity(2);
    let mut map_keys = Vec::with_capacity(2);
    for side in Side::BOTH {
        let dir = out.join("maps").join(side.dir());
        let key = KeyBuilder::new("maps")
            .str("domain", &domain_key)
            .str("data", &data_keys[side as usize])
            .json("patch", &cfg.patch)
            .json("stride", &cfg.stride)
            .json("fill", &domain.fill)
            .json("weighting", &cfg.weighting)
            .json("heatmaps", &cfg.heatmaps)
            .json("threshold", &cfg.overlay_threshold)
            .finish();
        let stamp = Stamp::new(dir.join(".key"), key.clone()).output(dir.join("index.json"));
        let side_images = &images[side as usize];
        let side_maps = if !force && stamp.is_fresh() {
            reused.push(format!("maps/{}", side.dir()));
            match_maps(side_images, read_maps(&dir)?)?
        } else {
            info!("building {} maps for {}", side_images.len(), side.dir());
            stamp.invalidate()?;
            let m = compute_maps(side_images, extractor, &model, &map_cfg)?;
            write_maps(&dir, side_images, &m, render)?;
            stamp.commit()?;
            m
        };
        maps.push(side_maps);
        map_keys.push(key);
    }

    // Mask analysis (cheap, always recomputed).
    let all_images: Vec<LoadedImage> = images.iter().flatten().cloned().collect();
    let all_maps: Vec<DomainnessMap> = maps.iter().flatten().cloned().collect();
    let analysis = analyze(&pair, &all_images, &all_maps, cfg.crop)?;
    write_json(&out.join("analysis.json"), &analysis)?;

    // Level descriptors and evaluation, per repeat.
    let mut eval_key = KeyBuilder::new("evaluate");
    eval_key
        .json("train", &cfg.train)
        .json("eps", &cfg.adapt_eps)
        .json("repeats", &cfg.repeats);
    let mut sets_per_repeat = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let mut pair_sets = Vec::with_capacity(2);
        for side in Side::BOTH {
            let dir = levels_dir(out, side, repeat, cfg.repeats);
            let mut k = KeyBuilder::new("levels");
            extractor_key(&mut k, extractor);
            let key = k
                .str("maps", &map_keys[side as usize])
                .json("seed", &cfg.seed)
                .json("repeat", &repeat)
                .finish();
            eval_key.str("levels", &key);
            let stamp = Stamp::new(dir.join(".key"), key)
                .output(dir.join("levels.json"))
                .output(dir.join("levels.dfea"))
                .output(dir.join("global.dfea"));
            let set = if !force && stamp.is_fresh() {
                reused.push(format!("levels/{}#{repeat}", side.dir()));
                read_levels(&dir)?
            } else {
                info!("level descriptors for {} (repeat {repeat})", side.dir());
                stamp.invalidate()?;
                let set = compute_levels(
                    &images[side as usize],
                    &maps[side as usize],
                    global[side as usize].clone(),
                    extractor,
                    cfg.seed,
                    side,
                    repeat,
                )?;
                write_levels(&dir, &set)?;
                stamp.commit()?;
                set
            };
            pair_sets.push(set);
        }
        sets_per_repeat.push(pair_sets);
    }

    let eval_stamp = Stamp::new(out.join(".evaluate.key"), eval_key.finish())
        .output(out.join("report.json"))
        .output(out.join("predictions.csv"))
        .output(out.join("predictions_adapted.csv"))
        .output(models_dir.join("global.lmod"));
    let report = if !force && eval_stamp.is_fresh() {
        reused.push("evaluate".to_string());
        read_json::<Report>(&out.join("report.json"))?
    } else {
        info!("evaluating {pair}");
        eval_stamp.invalidate()?;
        let adapter = SecondOrderAdapter { eps: cfg.adapt_eps };
        let evals = sets_per_repeat
            .iter()
            .map(|s| evaluate_fused(&pair, &s[0], &s[1], &adapter, &cfg.train))
            .collect::<Result<Vec<_>>>()?;
        let reports: Vec<Report> = evals.iter().map(|e| e.report.clone()).collect();
        let report = combine_reports(&reports)?;
        write_evaluation(out, &report, &evals[0])?;
        eval_stamp.commit()?;
        report
    };

    Ok(PipelineOutput {
        domain,
        analysis,
        report,
        reused,
    })
}

/// Runs `f` on a dedicated pool of `jobs` workers (rayon's default when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
