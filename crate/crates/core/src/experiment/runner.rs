use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::{
    CalibrationConfig, DatasetConfig, ExperimentConfig, MetricKind, ModelRef, StatsConfig,
    TaskConfig,
};
use super::report::{version_string, MetricReport, MetricRow, Provenance, FULL};
use crate::archive::TensorArchive;
use crate::data::{
    generate_synthetic_pairs, prepare_for_model, AugmentConfig, Image, ImageSource, PairManifest,
};
use crate::error::{Error, Result};
use crate::geometry::{
    attention_flow, attention_js, effective_rank_with, pca_rgb, row_cosine, spectrum_entropy_with,
};
use crate::interventions::{
    calibrate, plan, resolve_target, CalibrationStats, InterventionKind, InterventionPlan,
    InterventionSpec, PlanShape, TokenSlot,
};
use crate::stats::{
    bootstrap_ci_with, mean, median, sign_flip_permutation_test, BootstrapMethod, Interval,
    PairedOutcomes,
};
use crate::tasks::{
    patch_correspondence_multi, pck_at_alpha, pck_oracle_ceiling, segmentation_probe,
    stratified_split, train_linear_probe, CorrespondencePair, KeypointManifest, KeypointPair,
    PatchGrid, ProbeConfig, SegmentationSample,
};
use crate::tensor::{RandomStream, Matrix};
use crate::vit::{extract_features, ActivationTrace, FeatureGroup, ForwardOptions, GroupKind, VisionTransformer};

/// Environment variable naming the calibration cache directory.
pub const CACHE_ENV: &str = "ABLATE_LAB_CACHE";

/// A plain seed derived from `(seed, tag)`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    RandomStream::new(seed, tag, 0).seed_u64()
}

/// One column of the task × intervention matrix.
#[derive(Debug, Clone)]
pub struct Condition {
    pub label: String,
    /// `None` for the unmodified model.
    pub spec: Option<InterventionSpec>,
}

/// Full first, then every spec except `none` (which is Full under another name).
pub fn conditions(config: &ExperimentConfig) -> Vec<Condition> {
    let mut out = vec![Condition {
        label: FULL.into(),
        spec: None,
    }];
    for s in &config.interventions {
        if s.kind == InterventionKind::None {
            continue;
        }
        out.push(Condition {
            label: s.label(),
            spec: Some(s.clone()),
        });
    }
    out
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: MetricReport,
    /// PCA-RGB projections and source images for plotting.
    pub samples: TensorArchive,
}

fn needs_calibration(config: &ExperimentConfig) -> bool {
    config
        .interventions
        .iter()
        .any(|s| s.kind.needs_calibration() && s.calibration_ref.is_none())
}

fn check_calibration_sources(config: &ExperimentConfig) -> Result<()> {
    for s in &config.interventions {
        if !s.kind.needs_calibration() {
            continue;
        }
        match &s.calibration_ref {
            Some(r) => {
                resolve_calibration_ref(r)?;
            }
            None if config.calibration.is_none() => {
                return Err(Error::Config(format!(
                    "intervention {:?} needs calibration but the config has no [calibration] section or calibration_ref",
                    s.label()
                )));
            }
            None => {}
        }
    }
    Ok(())
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// `(directory, stem)` of a saved calibration. A reference is either a path
/// to the sidecar (with or without `.json`) or a stem inside the cache.
fn resolve_calibration_ref(r: &str) -> Result<(PathBuf, String)> {
    let p = Path::new(r);
    let stem_of = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    let with_json = if p.extension().is_some_and(|e| e == "json") {
        p.to_path_buf()
    } else {
        p.with_extension("json")
    };
    if with_json.is_file() {
        let dir = with_json.parent().map(Path::to_path_buf).unwrap_or_default();
        return Ok((dir, stem_of(&with_json).expect("file has a stem")));
    }
    if let Some(dir) = cache_dir() {
        if dir.join(format!("{r}.json")).is_file() {
            return Ok((dir, r.to_owned()));
        }
    }
    Err(Error::Config(format!("calibration reference {r:?} not found")))
}

fn model_fingerprint(model_ref: &ModelRef) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model_ref)?);
    if let ModelRef::Archive { path, .. } = model_ref {
        h.update(std::fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Block indices and slots that the configured mean/noise specs touch.
fn calibration_targets(config: &ExperimentConfig, model: &VisionTransformer) -> Result<(Vec<usize>, Vec<TokenSlot>)> {
    let layout = model.layout();
    let depth = model.config().depth;
    let mut layers = Vec::new();
    let mut slots = Vec::new();
    for s in &config.interventions {
        if s.kind.needs_calibration() && s.calibration_ref.is_none() {
            layers.extend(s.layers.resolve(depth)?);
            slots.extend(resolve_target(&s.target, &layout)?);
        }
    }
    layers.sort_unstable();
    layers.dedup();
    slots.sort();
    slots.dedup();
    Ok((layers, slots))
}

/// Computes (or loads from the cache) the calibration a config asks for.
pub fn calibrate_for(
    config: &ExperimentConfig,
    model: &VisionTransformer,
    dataset: &dyn ImageSource,
) -> Result<CalibrationStats> {
    let cal: CalibrationConfig = config.calibration.clone().unwrap_or(CalibrationConfig {
        samples: 100,
        seed: 0,
        pooled: false,
        dataset: None,
    });
    let own;
    let source: &dyn ImageSource = match &cal.dataset {
        Some(d) => {
            own = d.open()?;
            own.as_ref()
        }
        None => dataset,
    };
    let (mut layers, mut slots) = calibration_targets(config, model)?;
    if layers.is_empty() {
        layers = (0..model.config().depth).collect();
    }
    if slots.is_empty() {
        slots = (0..model.config().register_count).map(TokenSlot::Register).collect();
    }
    let mut key = Sha256::new();
    key.update(model_fingerprint(&config.model)?.as_bytes());
    key.update(source.id().as_bytes());
    key.update(serde_json::to_vec(&(cal.samples, cal.seed, &layers, &slots))?);
    let stem = format!("calib-{}", hex::encode(&key.finalize()[..8]));
    let cache = cache_dir();
    if let Some(dir) = &cache {
        if dir.join(format!("{stem}.json")).is_file() {
            log::info!("loading cached calibration {stem}");
            let stats = CalibrationStats::load(dir, &stem)?;
            return Ok(if cal.pooled { stats.pooled_over_registers() } else { stats });
        }
    }
    log::info!("calibrating on {} images", cal.samples);
    let stats = calibrate(source, model, &layers, &slots, cal.samples, cal.seed, config.batch_size)?;
    if let Some(dir) = &cache {
        stats.save(dir, &stem)?;
    }
    Ok(if cal.pooled { stats.pooled_over_registers() } else { stats })
}

/// Forward passes of every condition over one set of images.
struct Engine<'a> {
    model: &'a VisionTransformer,
    conditions: &'a [Condition],
    calibrations: Vec<Option<&'a CalibrationStats>>,
    batch_size: usize,
}

impl Engine<'_> {
    fn plan_for(&self, c: usize, batch: usize, seed: u64) -> Result<Option<InterventionPlan>> {
        let Some(spec) = &self.conditions[c].spec else {
            return Ok(None);
        };
        let layout = self.model.layout();
        let shape = PlanShape {
            layout: &layout,
            depth: self.model.config().depth,
            hidden_dim: self.model.config().hidden_dim,
        };
        plan(spec, shape, batch, self.calibrations[c], seed).map(Some)
    }

    /// Calls `visit(condition, image_index, trace, full_trace)` for every
    /// condition and image. Batches are fixed chunks of `batch_size`
    /// consecutive indices, so plan randomness depends only on the seed and
    /// the batch composition.
    fn sweep(
        &self,
        n: usize,
        load: &(dyn Fn(usize) -> Result<Image> + Sync),
        tag: &str,
        seed: u64,
        record_attention: bool,
        mut visit: impl FnMut(usize, usize, &ActivationTrace, &ActivationTrace) -> Result<()>,
    ) -> Result<()> {
        let options = ForwardOptions { record_attention };
        for (b, start) in (0..n).step_by(self.batch_size).enumerate() {
            let end = (start + self.batch_size).min(n);
            let images = (start..end).map(load).collect::<Result<Vec<_>>>()?;
            let full = self.model.forward_batch(&images, None, options)?;
            for c in 0..self.conditions.len() {
                let plan_seed = derive_seed(seed, &format!("{tag}/{}/batch{b}", self.conditions[c].label));
                let traces;
                let used = match self.plan_for(c, images.len(), plan_seed)? {
                    None => &full,
                    Some(p) => {
                        traces = self.model.forward_batch(&images, Some(&p), options)?;
                        &traces
                    }
                };
                for (i, (t, f)) in used.iter().zip(&full).enumerate() {
                    visit(c, start + i, t, f)?;
                }
            }
        }
        Ok(())
    }
}

/// A condition's value with optional per-unit outcomes for CIs and tests.
#[derive(Debug, Clone)]
struct Measurement {
    value: f64,
    units: Option<Vec<f64>>,
    ci: Option<Interval>,
}

#[derive(Debug, Clone, Copy)]
enum Stat {
    Mean,
    Median,
}

impl Measurement {
    fn from_units(units: Vec<f64>, stat: Stat, stats: &StatsConfig, seed: u64) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Degenerate("no units to summarise".into()));
        }
        let f: fn(&[f64]) -> f64 = match stat {
            Stat::Mean => mean,
            Stat::Median => median,
        };
        let method = if stats.bca {
            BootstrapMethod::Bca
        } else {
            BootstrapMethod::Percentile
        };
        let ci = bootstrap_ci_with(&units, &f, stats.level, stats.bootstrap_resamples, seed, method)?;
        Ok(Self {
            value: f(&units),
            units: Some(units),
            ci: Some(ci),
        })
    }

    fn scalar(value: f64) -> Self {
        Self {
            value,
            units: None,
            ci: None,
        }
    }
}

struct RowSink<'a> {
    rows: Vec<MetricRow>,
    model: String,
    hash: String,
    labels: Vec<String>,
    stats: &'a StatsConfig,
}

impl RowSink<'_> {
    /// Emits Full and every condition for one (task, metric); `per_cond[0]`
    /// is Full. Conditions may be `None` when the metric is Full-only.
    fn emit(&mut self, task: &str, metric: &str, seed: u64, per_cond: Vec<Option<Measurement>>) -> Result<()> {
        let Some(Some(full)) = per_cond.first().cloned() else {
            return Err(Error::Contract(format!("{task}/{metric} lacks a full measurement")));
        };
        for (c, m) in per_cond.into_iter().enumerate() {
            let Some(m) = m else { continue };
            let (delta, p) = if c == 0 {
                (None, None)
            } else {
                let p = match (&m.units, &full.units) {
                    (Some(a), Some(b)) if a.len() == b.len() => {
                        let pairs = PairedOutcomes::indexed(a.clone(), b.clone())?;
                        let s = derive_seed(seed, &format!("perm/{task}/{metric}/{}", self.labels[c]));
                        Some(sign_flip_permutation_test(&pairs, self.stats.permutations, s)?.p_value)
                    }
                    _ => None,
                };
                (Some(m.value - full.value), p)
            };
            self.rows.push(MetricRow {
                model: self.model.clone(),
                intervention: self.labels[c].clone(),
                task: task.into(),
                metric: metric.into(),
                value: m.value,
                ci_lo: m.ci.map(|i| i.lo),
                ci_hi: m.ci.map(|i| i.hi),
                delta_vs_full: delta,
                p_value: p,
                seed,
                config_hash: self.hash.clone(),
            });
        }
        Ok(())
    }

    fn emit_units(&mut self, task: &str, metric: &str, seed: u64, stat: Stat, units: Vec<Vec<f64>>) -> Result<()> {
        let per_cond = units
            .into_iter()
            .enumerate()
            .map(|(c, u)| {
                let s = derive_seed(seed, &format!("ci/{task}/{metric}/{}", self.labels[c]));
                Measurement::from_units(u, stat, self.stats, s).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        self.emit(task, metric, seed, per_cond)
    }
}

/// Per-condition accumulators from the pass over the dataset.
#[derive(Default)]
struct MainPass {
    cls: Vec<Vec<f32>>,
    patches: Vec<Matrix>,
    /// Metric name → per-image values.
    units: BTreeMap<String, Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f32>], idx: &[usize]) -> Result<Matrix> {
    Matrix::from_rows(&idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())
}

/// Runs every condition over the configured tasks and metrics.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    check_calibration_sources(config)?;
    let hash = config.hash();
    let model = config.model.load()?;
    let dataset = config.dataset.open()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("experiment dataset is empty".into()));
    }
    for s in &config.interventions {
        s.validate(&model.layout(), model.config().depth)?;
    }
    let conds = conditions(config);
    let computed = if needs_calibration(config) {
        Some(calibrate_for(config, &model, dataset.as_ref())?)
    } else {
        None
    };
    let mut loaded: BTreeMap<String, CalibrationStats> = BTreeMap::new();
    for s in &config.interventions {
        if let Some(r) = &s.calibration_ref {
            if s.kind.needs_calibration() && !loaded.contains_key(r) {
                let (dir, stem) = resolve_calibration_ref(r)?;
                loaded.insert(r.clone(), CalibrationStats::load(&dir, &stem)?);
            }
        }
    }
    let calibrations: Vec<Option<&CalibrationStats>> = conds
        .iter()
        .map(|c| match &c.spec {
            Some(s) if s.kind.needs_calibration() => match &s.calibration_ref {
                Some(r) => loaded.get(r),
                None => computed.as_ref(),
            },
            _ => None,
        })
        .collect();
    let engine = Engine {
        model: &model,
        conditions: &conds,
        calibrations,
        batch_size: config.batch_size,
    };
    let mut sink = RowSink {
        rows: Vec::new(),
        model: config.model.label(),
        hash: hash.clone(),
        labels: conds.iter().map(|c| c.label.clone()).collect(),
        stats: &config.stats,
    };
    let mut samples = TensorArchive::new();
    for (si, &seed) in config.seeds.iter().enumerate() {
        run_seed(config, &engine, dataset.as_ref(), seed, &mut sink, (si == 0).then_some(&mut samples))?;
    }
    samples.metadata.insert(
        "conditions".into(),
        serde_json::to_value(conds.iter().map(|c| c.label.clone()).collect::<Vec<_>>())?,
    );
    samples
        .metadata
        .insert("grid".into(), serde_json::json!(model.config().grid_side()));
    let calibration_id = computed.as_ref().map(CalibrationStats::id);
    let report = MetricReport {
        provenance: Provenance {
            config_hash: hash,
            seeds: config.seeds.clone(),
            version: version_string(),
            model: config.model.label(),
            calibration_id,
        },
        rows: sink.rows,
    };
    report.check_deltas()?;
    Ok(RunOutput { report, samples })
}

fn run_seed(
    config: &ExperimentConfig,
    engine: &Engine<'_>,
    dataset: &dyn ImageSource,
    seed: u64,
    sink: &mut RowSink<'_>,
    mut samples: Option<&mut TensorArchive>,
) -> Result<()> {
    let model = engine.model;
    let size = model.config().image_size;
    let grid = model.config().grid_side();
    let nc = engine.conditions.len();
    let n = dataset.len();
    let wants_segmentation = config
        .tasks
        .iter()
        .any(|t| matches!(t, TaskConfig::Segmentation { .. }));
    let metrics = &config.metrics;
    let record_attention = metrics
        .iter()
        .any(|m| matches!(m, MetricKind::AttentionJs | MetricKind::AttentionFlow));
    let depth = model.config().depth;

    // Pass over the dataset: CLS features, patch features, geometry.
    let mut main: Vec<MainPass> = (0..nc).map(|_| MainPass::default()).collect();
    let mut metric_names: Vec<String> = Vec::new();
    let load = |i: usize| dataset.load(i).map(|img| prepare_for_model(&img, size));
    engine.sweep(n, &load, "main", seed, record_attention, |c, i, t, full| {
        let acc = &mut main[c];
        acc.cls.push(extract_features(t, FeatureGroup::Cls)?.into_vec());
        let patches = extract_features(t, FeatureGroup::Patches)?;
        let mut push = |name: String, v: f64| {
            if c == 0 && i == 0 && !metric_names.contains(&name) {
                metric_names.push(name.clone());
            }
            acc.units.entry(name).or_default().push(v);
        };
        for m in metrics {
            match m {
                MetricKind::PatchCosine => {
                    let fp = extract_features(full, FeatureGroup::Patches)?;
                    push(m.name().into(), row_cosine(&fp, &patches)?.mean);
                }
                MetricKind::EffectiveRank => {
                    push(m.name().into(), effective_rank_with(&patches, config.geometry.gram)?);
                }
                MetricKind::SpectrumEntropy => {
                    push(m.name().into(), spectrum_entropy_with(&patches, config.geometry.gram)?);
                }
                MetricKind::AttentionJs => {
                    for l in 0..depth {
                        push(format!("attention_js_layer{l}"), attention_js(full, t, l, config.geometry.js_rows)?);
                    }
                }
                MetricKind::AttentionFlow => {
                    let flow = attention_flow(std::slice::from_ref(t))?;
                    for l in 0..depth {
                        for src in GroupKind::ALL {
                            for tgt in GroupKind::ALL {
                                if let Some(v) = flow.fraction(l, src, tgt) {
                                    push(
                                        format!("attention_flow_layer{l}_{}_to_{}", src.name(), tgt.name()),
                                        v,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(archive) = samples.as_deref_mut() {
            if i < config.plot_samples {
                let rgb = pca_rgb(&patches, grid, grid)?;
                let data: Vec<f32> = rgb.pixels.iter().flatten().copied().collect();
                let label = &engine.conditions[c].label;
                archive.insert(
                    format!("pca/{label}/img{i}"),
                    crate::archive::ArchiveTensor::new(vec![grid, grid, 3], data)?,
                )?;
            }
        }
        if wants_segmentation {
            acc.patches.push(patches);
        }
        Ok(())
    })?;
    if let Some(archive) = samples.as_deref_mut() {
        for i in 0..config.plot_samples.min(n) {
            let img = dataset.load(i)?.resize(size, size);
            archive.insert(
                format!("image/img{i}"),
                crate::archive::ArchiveTensor::new(vec![3, size, size], img.data)?,
            )?;
        }
    }

    for task in &config.tasks {
        match task {
            TaskConfig::Classification {
                val_fraction,
                split_seed,
                probe,
            } => {
                let labels: Vec<usize> = (0..n)
                    .map(|i| {
                        dataset
                            .label(i)
                            .ok_or_else(|| Error::Dataset(format!("image {i} has no class label")))
                    })
                    .collect::<Result<_>>()?;
                let classes = labels.iter().max().map_or(0, |m| m + 1);
                let (tr, va) = stratified_split(&labels, *val_fraction, *split_seed)?;
                if va.is_empty() || tr.is_empty() {
                    return Err(Error::Dataset("classification split left an empty side".into()));
                }
                let mut cfg = probe.unwrap_or_else(ProbeConfig::classification);
                cfg.seed = cfg.seed.wrapping_add(seed);
                let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
                let yva: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
                let mut units = Vec::with_capacity(nc);
                for m in &main {
                    let r = train_linear_probe(
                        &rows_to_matrix(&m.cls, &tr)?,
                        &ytr,
                        &rows_to_matrix(&m.cls, &va)?,
                        &yva,
                        classes,
                        &cfg,
                    )?;
                    units.push(r.correct);
                }
                sink.emit_units("classification", "top1", seed, Stat::Mean, units)?;
            }
            TaskConfig::Knn { augmentation } => {
                augmentation.validate()?;
                let view_seed = derive_seed(seed, "knn");
                let load_view = |i: usize| -> Result<Image> {
                    let img = dataset.load(i)?;
                    let mut rng = crate::tensor::stream(view_seed, "knn/view", i as u64);
                    let view = augmentation.sample_view(img.width, img.height, size, &mut rng);
                    Ok(view.render(&img)?.normalized())
                };
                let mut queries: Vec<Vec<Vec<f32>>> = vec![Vec::new(); nc];
                engine.sweep(n, &load_view, "knn", seed, false, |c, _, t, _| {
                    queries[c].push(extract_features(t, FeatureGroup::Cls)?.into_vec());
                    Ok(())
                })?;
                let all: Vec<usize> = (0..n).collect();
                let truth = all.clone();
                let mut units = Vec::with_capacity(nc);
                for (c, q) in queries.iter().enumerate() {
                    let gallery = rows_to_matrix(&main[c].cls, &all)?;
                    let queries = rows_to_matrix(q, &all)?;
                    let opts = crate::tasks::KnnOptions {
                        exclude_self: false,
                        level: config.stats.level,
                        resamples: 1,
                        seed: 0,
                    };
                    units.push(crate::tasks::knn_recall_at_1(&gallery, &queries, &truth, &opts)?.hits);
                }
                sink.emit_units("knn", "recall_at_1", seed, Stat::Mean, units)?;
            }
            TaskConfig::Correspondence {
                pairs,
                augmentation,
                tolerances,
            } => {
                let manifest = generate_synthetic_pairs(dataset, augmentation, size, *pairs, derive_seed(seed, "correspondence"))?;
                let feats = pair_features(engine, dataset, &manifest, "correspondence", seed)?;
                let mut acc_units = vec![vec![Vec::new(); nc]; tolerances.len()];
                let mut cycle_units = vec![Vec::new(); nc];
                let mut skipped = manifest.skipped;
                for (k, rec) in manifest.pairs.iter().enumerate() {
                    let mut scored = Vec::with_capacity(nc);
                    for f in &feats {
                        let pair = CorrespondencePair {
                            image_id: rec.image_index.to_string(),
                            views: rec.views,
                            features: f[k].clone(),
                            grid,
                            patch_size: model.config().patch_size,
                        };
                        scored.push(patch_correspondence_multi(&pair, tolerances)?);
                    }
                    if scored[0].is_none() {
                        skipped += 1;
                        continue;
                    }
                    for (c, s) in scored.into_iter().enumerate() {
                        let (scores, _) = s.expect("overlap depends only on geometry");
                        for (t, sc) in scores.iter().enumerate() {
                            acc_units[t][c].push(sc.accuracy);
                        }
                        cycle_units[c].push(scores[0].cycle_consistency);
                    }
                }
                if skipped > 0 {
                    log::info!("correspondence: {skipped} pairs skipped without overlap");
                }
                for (t, units) in tolerances.iter().zip(acc_units) {
                    sink.emit_units("correspondence", &format!("accuracy_tol{t}"), seed, Stat::Mean, units)?;
                }
                sink.emit_units("correspondence", "cycle_consistency", seed, Stat::Mean, cycle_units)?;
            }
            TaskConfig::Pck {
                manifest,
                alpha,
                pairs,
                keypoints_per_pair,
                augmentation,
            } => {
                let patch_grid = PatchGrid {
                    image_size: size,
                    patch_size: model.config().patch_size,
                };
                let (kp_pairs, feats) = match manifest {
                    Some(path) => {
                        let m = KeypointManifest::load(path)?;
                        let feats = keypoint_features(engine, &m.pairs, seed)?;
                        (m.pairs, feats)
                    }
                    None => {
                        let pm = generate_synthetic_pairs(dataset, augmentation, size, *pairs, derive_seed(seed, "pck"))?;
                        let kp = synthetic_keypoints(&pm, *keypoints_per_pair, derive_seed(seed, "pck/keypoints"));
                        let feats = pair_features(engine, dataset, &pm, "pck", seed)?;
                        (kp, feats)
                    }
                };
                let metric = format!("pck_alpha{alpha}");
                let mut units = Vec::with_capacity(nc);
                for f in &feats {
                    let fp: Vec<(Matrix, Matrix)> = f.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
                    units.push(pck_at_alpha(&kp_pairs, &fp, patch_grid, *alpha, 1, 0)?.hits);
                }
                sink.emit_units("pck", &metric, seed, Stat::Mean, units)?;
                let ceiling = pck_oracle_ceiling(&kp_pairs, patch_grid, *alpha, 1, 0)?;
                let s = derive_seed(seed, "ci/pck/oracle_ceiling");
                let mut per_cond = vec![None; nc];
                per_cond[0] = Some(Measurement::from_units(ceiling.hits, Stat::Mean, &config.stats, s)?);
                sink.emit("pck", &format!("oracle_ceiling_alpha{alpha}"), seed, per_cond)?;
            }
            TaskConfig::Segmentation {
                val_fraction,
                split_seed,
                probe,
                classes,
            } => {
                let masks = (0..n)
                    .map(|i| {
                        dataset
                            .mask(i)?
                            .ok_or_else(|| Error::Dataset(format!("image {i} has no mask")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let classes = match (classes, config.dataset.classes()) {
                    (Some(k), _) => *k,
                    (None, Some(k)) if matches!(config.dataset, DatasetConfig::Synthetic { .. }) => k + 1,
                    _ => masks
                        .iter()
                        .flat_map(|m| m.labels.iter().copied())
                        .filter(|&l| l != crate::data::IGNORE_INDEX)
                        .max()
                        .map_or(1, |m| m as usize + 1),
                };
                let strata = vec![0usize; n];
                let (tr, va) = stratified_split(&strata, *val_fraction, *split_seed)?;
                if va.is_empty() || tr.is_empty() {
                    return Err(Error::Dataset("segmentation split left an empty side".into()));
                }
                let mut cfg = probe.unwrap_or_else(ProbeConfig::segmentation);
                cfg.seed = cfg.seed.wrapping_add(seed);
                let mut per_cond = Vec::with_capacity(nc);
                for m in &main {
                    let sample = |i: &usize| SegmentationSample {
                        features: m.patches[*i].clone(),
                        mask: masks[*i].clone(),
                    };
                    let train: Vec<_> = tr.iter().map(sample).collect();
                    let val: Vec<_> = va.iter().map(sample).collect();
                    let r = segmentation_probe(&train, &val, classes, &cfg)?;
                    per_cond.push(Some(Measurement::scalar(r.miou)));
                }
                sink.emit("segmentation", "miou", seed, per_cond)?;
            }
        }
    }

    for name in &metric_names {
        let stat = if name == MetricKind::EffectiveRank.name() || name == MetricKind::SpectrumEntropy.name() {
            Stat::Median
        } else {
            Stat::Mean
        };
        let units: Vec<Vec<f64>> = main
            .iter_mut()
            .map(|m| m.units.remove(name).unwrap_or_default())
            .collect();
        sink.emit_units("geometry", name, seed, stat, units)?;
    }
    Ok(())
}

/// Patch features `[view A, view B]` per condition and pair.
fn pair_features(
    engine: &Engine<'_>,
    dataset: &dyn ImageSource,
    manifest: &PairManifest,
    tag: &str,
    seed: u64,
) -> Result<Vec<Vec<[Matrix; 2]>>> {
    let nc = engine.conditions.len();
    let np = manifest.pairs.len();
    // Views interleaved as A0, B0, A1, B1, ...
    let load = |k: usize| -> Result<Image> {
        let rec = &manifest.pairs[k / 2];
        let img = dataset.load(rec.image_index)?;
        Ok(rec.views[k % 2].render(&img)?.normalized())
    };
    let mut flat: Vec<Vec<Option<Matrix>>> = vec![vec![None; 2 * np]; nc];
    engine.sweep(2 * np, &load, tag, seed, false, |c, k, t, _| {
        flat[c][k] = Some(extract_features(t, FeatureGroup::Patches)?);
        Ok(())
    })?;
    Ok(flat
        .into_iter()
        .map(|v| {
            let mut it = v.into_iter().map(|m| m.expect("every view visited"));
            (0..np)
                .map(|_| [it.next().expect("A view"), it.next().expect("B view")])
                .collect()
        })
        .collect())
}

fn keypoint_features(engine: &Engine<'_>, pairs: &[KeypointPair], seed: u64) -> Result<Vec<Vec<[Matrix; 2]>>> {
    let size = engine.model.config().image_size;
    let nc = engine.conditions.len();
    let np = pairs.len();
    let load = |k: usize| -> Result<Image> {
        let p = &pairs[k / 2];
        let path = if k % 2 == 0 { &p.source } else { &p.target };
        Ok(prepare_for_model(&Image::load(Path::new(path))?, size))
    };
    let mut flat: Vec<Vec<Option<Matrix>>> = vec![vec![None; 2 * np]; nc];
    engine.sweep(2 * np, &load, "pck", seed, false, |c, k, t, _| {
        flat[c][k] = Some(extract_features(t, FeatureGroup::Patches)?);
        Ok(())
    })?;
    Ok(flat
        .into_iter()
        .map(|v| {
            let mut it = v.into_iter().map(|m| m.expect("every image visited"));
            (0..np)
                .map(|_| [it.next().expect("source"), it.next().expect("target")])
                .collect()
        })
        .collect())
}

/// Random keypoints in view A of each pair, mapped into view B; a keypoint
/// is visible in B when it lands inside the view.
pub fn synthetic_keypoints(manifest: &PairManifest, per_pair: usize, seed: u64) -> Vec<KeypointPair> {
    let s = manifest.out_size as f64;
    manifest
        .pairs
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = crate::tensor::stream(seed, "keypoints", i as u64);
            let [a, b] = &rec.views;
            let mut src = Vec::with_capacity(per_pair);
            let mut tgt = Vec::with_capacity(per_pair);
            let mut vis = Vec::with_capacity(per_pair);
            for _ in 0..per_pair {
                let u = rng.random_range(0.0..s);
                let v = rng.random_range(0.0..s);
                let (x, y) = a.view_to_source(u, v);
                let (tu, tv) = b.source_to_view(x, y);
                src.push([u, v]);
                tgt.push([tu, tv]);
                vis.push(b.contains_view_point(tu, tv));
            }
            KeypointPair {
                source: format!("pair{i}/a"),
                target: format!("pair{i}/b"),
                source_size: [s, s],
                target_size: [s, s],
                source_keypoints: src,
                target_keypoints: tgt,
                source_visible: vec![true; per_pair],
                target_visible: vis,
                target_bbox: [s, s],
            }
        })
        .collect()
}

/// Pair manifest for the first correspondence task (or default
/// augmentation) of a config.
pub fn pairs_for(config: &ExperimentConfig, n_pairs: Option<usize>, seed: u64) -> Result<PairManifest> {
    let model_size = match &config.model {
        ModelRef::Random { architecture, .. } => architecture.resolve()?.image_size,
        ModelRef::Archive { .. } => config.model.load()?.config().image_size,
    };
    let (aug, count) = config
        .tasks
        .iter()
        .find_map(|t| match t {
            TaskConfig::Correspondence { pairs, augmentation, .. } => Some((*augmentation, *pairs)),
            _ => None,
        })
        .unwrap_or((AugmentConfig::default(), 200));
    let dataset = config.dataset.open()?;
    generate_synthetic_pairs(dataset.as_ref(), &aug, model_size, n_pairs.unwrap_or(count), seed)
}
