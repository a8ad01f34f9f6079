//! End-to-end orchestration: one frame from sensor data to label maps,
//! suite runs, the feature/inference ablation grid, the patch-classifier
//! training protocol and stage inspection.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{FeatureConfig, InferenceMode, PipelineConfig};
use crate::crf::{build_problem, export_result, infer_paired, CrfProblem, InferenceOptions, LabelingResult};
use crate::crnn::{
    augment_flips, extract_patch, score_patches, train_crnn, CrnnModel, LabeledPatch, PatchOptions, PatchTensor,
    ScoreTable, NUM_CLASSES,
};
use crate::error::{Error, IoContext, Result};
use crate::eval::{confusion, gce_lce, ClassificationReport, ConfusionMatrix};
use crate::hypothesis::{generate_hypotheses, HypothesisSet, ObjectCluster};
use crate::io::FrameInput;
use crate::priors::{build_prior_bank, load_prior_cache, save_prior_cache, sky_samples, PriorBank};
use crate::registration::{build_feature_image, project_points, upsample_depth, SparseDepth, UpsampleParams};
use crate::scene::{CameraCalibration, Category, ColorImage, DepthMap, FeatureImage, LabelMaps};

/// Maximum number of sky color samples kept for the sky model.
pub const SKY_SAMPLE_LIMIT: usize = 3000;

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimings {
    pub register: f64,
    pub upsample: f64,
    pub hypothesize: f64,
    pub priors: f64,
    pub scores: f64,
    pub build: f64,
    pub infer: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.register + self.upsample + self.hypothesize + self.priors + self.scores + self.build + self.infer
    }
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed().as_secs_f64();
    out
}

/// A frame after registration, densification and hypothesis generation;
/// none of this depends on the feature configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub image: ColorImage,
    pub calib: CameraCalibration,
    pub sparse: SparseDepth,
    pub dense: DepthMap,
    pub features: FeatureImage,
    pub hyp: HypothesisSet,
    pub timings: StageTimings,
}

pub fn prepare(frame: &FrameInput, config: &PipelineConfig) -> Result<Prepared> {
    let mut t = StageTimings::default();
    let (w, h) = (frame.image.width, frame.image.height);
    let sparse = timed(&mut t.register, || project_points(&frame.cloud, &frame.calib, w, h))?;
    let params = UpsampleParams {
        sigma_spatial: config.upsample_sigma_s,
        sigma_range: config.upsample_sigma_r,
    };
    let dense = timed(&mut t.upsample, || upsample_depth(&sparse, &frame.image, params))?;
    let features = timed(&mut t.upsample, || build_feature_image(&frame.image, &dense, &frame.calib))?;
    let hyp = timed(&mut t.hypothesize, || generate_hypotheses(&frame.cloud, &frame.calib, &sparse, config))?;
    Ok(Prepared {
        id: frame.id.clone(),
        image: frame.image.clone(),
        calib: frame.calib.clone(),
        sparse,
        dense,
        features,
        hyp,
        timings: t,
    })
}

/// Uniform class scores, used when no classifier is available or a patch
/// is too small to crop.
fn uniform_row() -> [f64; NUM_CLASSES] {
    [1.0 / NUM_CLASSES as f64; NUM_CLASSES]
}

/// Patch-classifier scores for every hypothesis of the frame.
pub fn score_frame(prep: &Prepared, model: Option<&CrnnModel>) -> Result<ScoreTable> {
    let Some(model) = model else {
        return Ok(ScoreTable {
            rows: vec![uniform_row(); prep.hyp.num_objects()],
        });
    };
    let mut patches: Vec<Option<PatchTensor>> = Vec::with_capacity(prep.hyp.num_objects());
    for c in &prep.hyp.clusters {
        match extract_patch(&prep.image, Some(&prep.dense), c, model.options) {
            Ok(p) => patches.push(Some(p)),
            Err(Error::DegeneratePatch(w, h)) => {
                log::warn!("{}: cluster {} patch {w}x{h} too small to score", prep.id, c.id);
                patches.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let present: Vec<PatchTensor> = patches.iter().flatten().cloned().collect();
    let scored = score_patches(&present, model)?;
    let mut rows = scored.rows.into_iter();
    Ok(ScoreTable {
        rows: patches
            .iter()
            .map(|p| match p {
                Some(_) => rows.next().expect("one row per patch"),
                None => uniform_row(),
            })
            .collect(),
    })
}

/// Sky color samples from `(image, mask)` pairs.
pub fn sky_prior_samples(masks: &[(&ColorImage, &[bool])]) -> Vec<[f64; 3]> {
    sky_samples(masks, SKY_SAMPLE_LIMIT)
}

/// Sky samples from the bundled hand-labeled fixtures.
pub fn bundled_sky_samples() -> Result<Vec<[f64; 3]>> {
    const FIXTURES: [(&[u8], &[u8]); 3] = [
        (include_bytes!("../fixtures/sky/image_0.png"), include_bytes!("../fixtures/sky/mask_0.png")),
        (include_bytes!("../fixtures/sky/image_1.png"), include_bytes!("../fixtures/sky/mask_1.png")),
        (include_bytes!("../fixtures/sky/image_2.png"), include_bytes!("../fixtures/sky/mask_2.png")),
    ];
    let mut decoded = Vec::new();
    for (img, mask) in FIXTURES {
        let img = image::load_from_memory(img)?.into_rgb8();
        let mask = image::load_from_memory(mask)?.into_luma8();
        let (w, h) = img.dimensions();
        let image = ColorImage::new(w as usize, h as usize, img.pixels().map(|p| p.0).collect())?;
        let mask: Vec<bool> = mask.pixels().map(|p| p.0[0] > 0).collect();
        decoded.push((image, mask));
    }
    let pairs: Vec<(&ColorImage, &[bool])> = decoded.iter().map(|(i, m)| (i, m.as_slice())).collect();
    Ok(sky_prior_samples(&pairs))
}

/// Shared, read-only inputs of a run.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub config: &'a PipelineConfig,
    pub model: Option<&'a CrnnModel>,
    pub sky: &'a [[f64; 3]],
    /// Directory for prior-bank caches.
    pub cache: Option<&'a Path>,
}

/// Prior bank for the context's feature configuration, from the cache when
/// one matches.
pub fn frame_priors(prep: &Prepared, ctx: &RunContext) -> Result<PriorBank> {
    if let Some(dir) = ctx.cache {
        if let Some(bank) = load_prior_cache(dir, &prep.id, ctx.config)? {
            return Ok(bank);
        }
    }
    let bank = build_prior_bank(&prep.features, &prep.hyp, ctx.sky, ctx.config)?;
    if let Some(dir) = ctx.cache {
        save_prior_cache(dir, &prep.id, ctx.config, &bank)?;
    }
    Ok(bank)
}

/// Segmentation and labeling quality against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub gce: f64,
    pub lce: f64,
    /// Pixel accuracy of the category map, percent.
    pub accuracy: f64,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

pub fn frame_metrics(maps: &LabelMaps, truth: &LabelMaps) -> Result<FrameMetrics> {
    let seg = gce_lce(&maps.objects, &truth.objects, None)?;
    let confusion = confusion(&maps.categories, &truth.categories, None)?;
    Ok(FrameMetrics {
        gce: seg.gce,
        lce: seg.lce,
        accuracy: 100.0 * confusion.trace() as f64 / confusion.total().max(1) as f64,
        confusion,
    })
}

/// One inference result with its diagnostics.
#[derive(Debug, Clone)]
pub struct Solved {
    pub result: LabelingResult,
    pub maps: LabelMaps,
    pub metrics: Option<FrameMetrics>,
    /// Seed pixels labeled with their own hypothesis, and all seed pixels.
    pub seed_agreement: (usize, usize),
    /// Pixels whose category differs from their object's category.
    pub coupling_violations: usize,
}

fn solved(problem: &CrfProblem, hyp: &HypothesisSet, result: LabelingResult, truth: Option<&LabelMaps>) -> Result<Solved> {
    let maps = result.label_maps(problem);
    let metrics = truth.map(|t| frame_metrics(&maps, t)).transpose()?;
    let mut agree = (0, 0);
    for (p, owner) in hyp.seed_labels().into_iter().enumerate() {
        if let Some(o) = owner {
            agree.1 += 1;
            agree.0 += (result.objects[p] == o) as usize;
        }
    }
    let coupling_violations = (0..problem.num_pixels())
        .filter(|&i| result.categories[i] != problem.m2[result.objects[i]])
        .count();
    Ok(Solved {
        result,
        maps,
        metrics,
        seed_agreement: agree,
        coupling_violations,
    })
}

/// Holistic and separated solutions of one frame under one configuration.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub id: String,
    pub features: FeatureConfig,
    pub problem: CrfProblem,
    pub holistic: Solved,
    pub separated: Solved,
    pub timings: StageTimings,
}

impl FrameOutcome {
    pub fn chosen(&self, mode: InferenceMode) -> &Solved {
        match mode {
            InferenceMode::Holistic => &self.holistic,
            InferenceMode::Separated => &self.separated,
        }
    }
}

/// Builds and solves the CRF of a prepared frame.
pub fn solve_prepared(
    prep: &Prepared,
    scores: &ScoreTable,
    truth: Option<&LabelMaps>,
    ctx: &RunContext,
) -> Result<FrameOutcome> {
    let mut t = prep.timings;
    let bank = timed(&mut t.priors, || frame_priors(prep, ctx))?;
    let (problem, _) = timed(&mut t.build, || build_problem(&prep.features, &bank, &prep.hyp, scores, ctx.config));
    let options = InferenceOptions {
        max_sweeps: ctx.config.max_sweeps,
        ..InferenceOptions::default()
    };
    let (hol, sep) = timed(&mut t.infer, || infer_paired(&problem, options));
    let holistic = solved(&problem, &prep.hyp, hol, truth)?;
    let separated = solved(&problem, &prep.hyp, sep, truth)?;
    Ok(FrameOutcome {
        id: prep.id.clone(),
        features: ctx.config.features,
        problem,
        holistic,
        separated,
        timings: t,
    })
}

/// The whole per-frame pipeline.
pub fn process_frame(frame: &FrameInput, ctx: &RunContext) -> Result<FrameOutcome> {
    let mut prep = prepare(frame, ctx.config)?;
    let mut secs = 0.0;
    let scores = timed(&mut secs, || score_frame(&prep, ctx.model))?;
    prep.timings.scores += secs;
    solve_prepared(&prep, &scores, frame.truth.as_ref(), ctx)
}

/// Rayon pool with `workers` threads (at least one).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Other(format!("thread pool: {e}")))
}

/// Per-frame record of a run.
#[derive(Debug, Clone, Serialize)]
pub struct FrameRecord {
    pub id: String,
    pub status: String,
    pub holistic_energy: Option<f64>,
    pub separated_energy: Option<f64>,
    pub metrics: Option<FrameMetrics>,
    pub timings: Option<StageTimings>,
    pub outputs: Vec<PathBuf>,
}

/// Everything needed to audit or repeat a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: String,
    pub mode: InferenceMode,
    pub features: FeatureConfig,
    pub frames: Vec<FrameRecord>,
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub mean_gce: f64,
    pub mean_lce: f64,
    pub accuracy: f64,
}

impl RunManifest {
    pub fn succeeded(&self) -> usize {
        self.frames.iter().filter(|f| f.status == "ok").count()
    }
}

/// Processes every frame in parallel and writes label maps, overlays and
/// energy reports under `out` from a single writer. Failed frames are
/// logged and recorded.
pub fn run_frames(frames: &[Result<FrameInput>], ctx: &RunContext, out: &Path) -> Result<RunManifest> {
    let pool = worker_pool(ctx.config.workers)?;
    let outcomes: Vec<Result<FrameOutcome>> = pool.install(|| {
        frames
            .par_iter()
            .map(|f| f.as_ref().map_err(|e| Error::Other(e.to_string())).and_then(|f| process_frame(f, ctx)))
            .collect()
    });
    std::fs::create_dir_all(out).at(out)?;
    let mode = ctx.config.mode;
    let mut records = Vec::with_capacity(frames.len());
    let mut confusion_total = ConfusionMatrix::default();
    let mut seg = Vec::new();
    for (frame, outcome) in frames.iter().zip(outcomes) {
        let id = match frame {
            Ok(f) => f.id.clone(),
            Err(_) => String::from("?"),
        };
        match outcome {
            Ok(o) => {
                let input = frame.as_ref().expect("processed frames loaded");
                let chosen = o.chosen(mode);
                let outputs = export_result(out, &o.id, &input.image, &chosen.maps, &chosen.result)?;
                if let Some(m) = &chosen.metrics {
                    confusion_total.merge(&m.confusion);
                    seg.push((m.gce, m.lce));
                }
                records.push(FrameRecord {
                    id: o.id.clone(),
                    status: "ok".into(),
                    holistic_energy: Some(o.holistic.result.energy),
                    separated_energy: Some(o.separated.result.energy),
                    metrics: chosen.metrics,
                    timings: Some(o.timings),
                    outputs,
                });
            }
            Err(e) => {
                log::warn!("frame {id} skipped: {e}");
                records.push(FrameRecord {
                    id,
                    status: format!("skipped: {e}"),
                    holistic_energy: None,
                    separated_energy: None,
                    metrics: None,
                    timings: None,
                    outputs: Vec::new(),
                });
            }
        }
    }
    let summary = (!seg.is_empty()).then(|| RunSummary {
        frames: seg.len(),
        mean_gce: seg.iter().map(|s| s.0).sum::<f64>() / seg.len() as f64,
        mean_lce: seg.iter().map(|s| s.1).sum::<f64>() / seg.len() as f64,
        accuracy: 100.0 * confusion_total.trace() as f64 / confusion_total.total().max(1) as f64,
    });
    let manifest = RunManifest {
        config: ctx.config.to_kv_string(),
        mode,
        features: ctx.config.features,
        frames: records,
        summary,
    };
    if summary.is_some() {
        let report = ClassificationReport::from_confusion(confusion_total);
        let path = out.join("metrics.csv");
        std::fs::write(&path, report.to_csv()).at(&path)?;
        let path = out.join("metrics.txt");
        std::fs::write(&path, report.to_text()).at(&path)?;
    }
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    if manifest.succeeded() == 0 && !frames.is_empty() {
        return Err(Error::Other("every frame failed".into()));
    }
    Ok(manifest)
}

/// Mean metrics of one feature configuration and inference mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationCell {
    pub features: FeatureConfig,
    pub mode: InferenceMode,
    pub gce: f64,
    pub lce: f64,
    pub accuracy: f64,
    pub frames: usize,
}

/// The 4 x 2 grid of feature configurations and inference modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, features: FeatureConfig, mode: InferenceMode) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.features == features && c.mode == mode)
    }

    /// Rows are feature configurations; columns GCE, LCE and accuracy for
    /// each mode.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<11}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "features", "sep GCE", "sep LCE", "sep acc", "hol GCE", "hol LCE", "hol acc"
        );
        for f in FeatureConfig::ALL {
            s += &format!("{:<11}", f.label());
            for m in [InferenceMode::Separated, InferenceMode::Holistic] {
                let c = self.cell(f, m).expect("full grid");
                s += &format!("{:>10.4}{:>10.4}{:>10.2}", c.gce, c.lce, c.accuracy);
            }
            s += "\n";
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("features,mode,gce,lce,accuracy,frames\n");
        for c in &self.cells {
            s += &format!(
                "{},{},{:.6},{:.6},{:.4},{}\n",
                c.features.label(),
                c.mode,
                c.gce,
                c.lce,
                c.accuracy,
                c.frames
            );
        }
        s
    }
}

/// Per-frame outcomes of the ablation, in frame order per configuration.
pub type AblationOutcomes = Vec<(FeatureConfig, Vec<FrameOutcome>)>;

/// Runs every feature configuration on every frame with ground truth.
/// Registration, hypotheses and classifier scores are shared across
/// configurations.
pub fn run_ablation(frames: &[FrameInput], ctx: &RunContext) -> Result<(AblationReport, AblationOutcomes)> {
    let pool = worker_pool(ctx.config.workers)?;
    let prepared: Vec<(Prepared, ScoreTable)> = pool.install(|| {
        frames
            .par_iter()
            .map(|f| {
                let mut prep = prepare(f, ctx.config)?;
                let mut secs = 0.0;
    let scores = timed(&mut secs, || score_frame(&prep, ctx.model))?;
    prep.timings.scores += secs;
                Ok((prep, scores))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut outcomes = Vec::new();
    let mut cells = Vec::new();
    for features in FeatureConfig::ALL {
        let config = PipelineConfig {
            features,
            ..ctx.config.clone()
        };
        let sub = RunContext {
            config: &config,
            ..*ctx
        };
        let per_frame: Vec<FrameOutcome> = pool.install(|| {
            prepared
                .par_iter()
                .zip(frames.par_iter())
                .map(|((prep, scores), f)| solve_prepared(prep, scores, f.truth.as_ref(), &sub))
                .collect::<Result<Vec<_>>>()
        })?;
        for mode in [InferenceMode::Separated, InferenceMode::Holistic] {
            let metrics: Vec<FrameMetrics> = per_frame.iter().filter_map(|o| o.chosen(mode).metrics).collect();
            let n = metrics.len().max(1) as f64;
            let mut total = ConfusionMatrix::default();
            for m in &metrics {
                total.merge(&m.confusion);
            }
            cells.push(AblationCell {
                features,
                mode,
                gce: metrics.iter().map(|m| m.gce).sum::<f64>() / n,
                lce: metrics.iter().map(|m| m.lce).sum::<f64>() / n,
                accuracy: 100.0 * total.trace() as f64 / total.total().max(1) as f64,
                frames: metrics.len(),
            });
        }
        outcomes.push((features, per_frame));
    }
    Ok((AblationReport { cells }, outcomes))
}

/// A hypothesis of a frame with its majority ground-truth category.
#[derive(Debug, Clone)]
pub struct PatchSource {
    pub frame: String,
    pub image: ColorImage,
    pub dense: DepthMap,
    pub clusters: Vec<(ObjectCluster, Category)>,
}

/// Labels every hypothesis by the majority truth category of its seed
/// pixels; hypotheses dominated by road or sky are not objects and are
/// skipped.
pub fn patch_source(prep: &Prepared, truth: &LabelMaps) -> PatchSource {
    let clusters = prep
        .hyp
        .clusters
        .iter()
        .filter_map(|c| {
            let mut votes = [0usize; Category::COUNT];
            for &p in &c.seeds {
                votes[truth.categories[p].index()] += 1;
            }
            let best = (0..Category::COUNT).max_by_key(|&i| (votes[i], usize::MAX - i))?;
            let category = Category::from_index(best)?;
            category.recognized_index().map(|_| (c.clone(), category))
        })
        .collect();
    PatchSource {
        frame: prep.id.clone(),
        image: prep.image.clone(),
        dense: prep.dense.clone(),
        clusters,
    }
}

/// Patch sources of every frame with ground truth.
pub fn patch_sources(frames: &[FrameInput], config: &PipelineConfig) -> Result<Vec<PatchSource>> {
    let pool = worker_pool(config.workers)?;
    pool.install(|| {
        frames
            .par_iter()
            .filter(|f| f.truth.is_some())
            .map(|f| Ok(patch_source(&prepare(f, config)?, f.truth.as_ref().expect("filtered"))))
            .collect()
    })
}

/// Index of one labeled hypothesis: `(source, cluster)`.
pub type PatchIndex = (usize, usize);

/// Deterministic train/test split of every labeled hypothesis.
pub fn split_patches(sources: &[PatchSource], train_fraction: f64, seed: u64) -> (Vec<PatchIndex>, Vec<PatchIndex>) {
    let mut all: Vec<PatchIndex> = sources
        .iter()
        .enumerate()
        .flat_map(|(s, src)| (0..src.clusters.len()).map(move |c| (s, c)))
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((all.len() as f64) * train_fraction).round() as usize;
    let test = all.split_off(cut.min(all.len()));
    (all, test)
}

/// Crops the indexed hypotheses with the given options; degenerate boxes
/// are skipped.
pub fn extract_labeled(sources: &[PatchSource], index: &[PatchIndex], options: PatchOptions) -> Result<Vec<LabeledPatch>> {
    let mut out = Vec::with_capacity(index.len());
    for &(s, c) in index {
        let src = &sources[s];
        let (cluster, category) = &src.clusters[c];
        match extract_patch(&src.image, Some(&src.dense), cluster, options) {
            Ok(tensor) => out.push(LabeledPatch {
                tensor,
                category: *category,
            }),
            Err(Error::DegeneratePatch(..)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One cell of the masked x depth training grid.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub masked: bool,
    pub depth: bool,
    pub train_patches: usize,
    pub test_patches: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `[truth][prediction]` over the classifier classes, test split.
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    #[serde(skip)]
    pub model: Option<CrnnModel>,
}

/// Trains one classifier per requested `(masked, depth)` cell on a
/// deterministic split (flipped copies added to training only) and scores
/// the held-out patches.
pub fn crnn_protocol(sources: &[PatchSource], config: &PipelineConfig, cells: &[(bool, bool)]) -> Result<Vec<GridCell>> {
    let (train_idx, test_idx) = split_patches(sources, config.train_fraction, config.stage_seed("split"));
    let mut present = [0usize; NUM_CLASSES];
    for &(s, c) in &train_idx {
        present[sources[s].clusters[c].1.recognized_index().expect("recognized")] += 1;
    }
    for (i, &n) in present.iter().enumerate() {
        if n == 0 {
            log::warn!("class {} has no training samples; excluded", Category::RECOGNIZED[i].name());
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for &(masked, depth) in cells {
        let config = PipelineConfig {
            patch_masked: masked,
            patch_depth: depth,
            ..config.clone()
        };
        let options = PatchOptions::from(&config);
        let train = augment_flips(extract_labeled(sources, &train_idx, options)?);
        let test = extract_labeled(sources, &test_idx, options)?;
        let trained = train_crnn(&train, &config)?;
        let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        let tensors: Vec<PatchTensor> = test.iter().map(|p| p.tensor.clone()).collect();
        let scores = score_patches(&tensors, &trained.model)?;
        for (p, row) in test.iter().zip(&scores.rows) {
            let truth = p.category.recognized_index().expect("recognized");
            let pred = (0..NUM_CLASSES).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).expect("classes");
            confusion[truth][pred] += 1;
        }
        let correct: u64 = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
        out.push(GridCell {
            masked,
            depth,
            train_patches: train.len(),
            test_patches: test.len(),
            train_accuracy: trained.train_accuracy,
            test_accuracy: if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 },
            confusion,
            model: Some(trained.model),
        });
    }
    Ok(out)
}

/// The full 2 x 2 grid: unmasked/masked x RGB/RGBD.
pub const FULL_GRID: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

/// Serializable summary of one stage of a frame.
pub fn inspect(frame: &FrameInput, stage: &str, ctx: &RunContext) -> Result<serde_json::Value> {
    const STAGES: [&str; 5] = ["register", "hypothesize", "priors", "scores", "unaries"];
    if !STAGES.contains(&stage) {
        return Err(Error::Other(format!("unknown stage {stage:?}; expected one of {}", STAGES.join(", "))));
    }
    let prep = prepare(frame, ctx.config)?;
    let value = match stage {
        "register" => {
            let s = &prep.sparse;
            let depths: Vec<f64> = s.seeds.iter().map(|p| s.depth.depth[p.pixel]).collect();
            serde_json::json!({
                "width": s.width(),
                "height": s.height(),
                "points": frame.cloud.len(),
                "seeds": s.seeds.len(),
                "seed_fraction": s.seeds.len() as f64 / (s.width() * s.height()) as f64,
                "depth_min": depths.iter().copied().fold(f64::INFINITY, f64::min),
                "depth_max": depths.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                "feature_scaling": prep.features.scaling,
            })
        }
        "hypothesize" => prep.hyp.report(),
        "priors" => {
            let bank = frame_priors(&prep, ctx)?;
            let models: Vec<serde_json::Value> = bank
                .models()
                .enumerate()
                .map(|(label, g)| {
                    serde_json::json!({
                        "label": label,
                        "dim": g.dim(),
                        "components": g.num_components(),
                        "weights": g.weights(),
                        "mean": g.mean(),
                    })
                })
                .collect();
            serde_json::json!({ "models": models })
        }
        "scores" => {
            let scores = score_frame(&prep, ctx.model)?;
            let rows: Vec<serde_json::Value> = scores
                .rows
                .iter()
                .enumerate()
                .map(|(k, row)| {
                    let named: serde_json::Map<String, serde_json::Value> = Category::RECOGNIZED
                        .iter()
                        .zip(row)
                        .map(|(c, v)| (c.name().to_string(), serde_json::json!(v)))
                        .collect();
                    serde_json::json!({ "cluster": k + 1, "scores": named, "sum": row.iter().sum::<f64>() })
                })
                .collect();
            serde_json::json!({ "model": ctx.model.is_some(), "rows": rows })
        }
        _ => {
            let scores = score_frame(&prep, ctx.model)?;
            let bank = frame_priors(&prep, ctx)?;
            let (problem, _) = build_problem(&prep.features, &bank, &prep.hyp, &scores, ctx.config);
            unary_summary(&problem, &prep.hyp)
        }
    };
    Ok(value)
}

fn column_stats(values: impl Iterator<Item = f64>) -> serde_json::Value {
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    serde_json::json!({ "min": lo, "max": hi, "mean": sum / n.max(1) as f64 })
}

fn unary_summary(problem: &CrfProblem, hyp: &HypothesisSet) -> serde_json::Value {
    let l = problem.num_object_labels;
    let n = problem.num_pixels();
    let objects: Vec<serde_json::Value> = (0..l)
        .map(|o| column_stats((0..n).map(|i| problem.psi_o(i, o))))
        .collect();
    let categories: serde_json::Map<String, serde_json::Value> = problem
        .categories
        .iter()
        .enumerate()
        .map(|(c, cat)| (cat.name().to_string(), column_stats((0..n).map(|i| problem.psi_c(i, c)))))
        .collect();
    let owners = hyp.seed_labels();
    let (mut own, mut other) = (Vec::new(), Vec::new());
    for (p, owner) in owners.iter().enumerate() {
        if let Some(o) = *owner {
            for k in 0..l {
                if k == o {
                    own.push(problem.psi_o(p, k));
                } else {
                    other.push(problem.psi_o(p, k));
                }
            }
        }
    }
    serde_json::json!({
        "object_columns": objects,
        "category_columns": categories,
        "seed_own_label": column_stats(own.into_iter()),
        "seed_other_labels": column_stats(other.into_iter()),
        "m2": problem.m2.iter().map(|&c| problem.categories[c].name()).collect::<Vec<_>>(),
    })
}
