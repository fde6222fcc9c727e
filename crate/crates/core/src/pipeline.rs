//! End-to-end driver: ingest, privatize, train, evaluate and query, with
//! every stage's outputs written under one directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{
    self, facility_select, kde_hotspots, range_query_error, sorensen_dice, to_meters, Bandwidth,
    FacilityVariant, PlaceSet, RangeError,
};
use crate::checkpoint::{self, Manifest, RunInfo};
use crate::ingest::{self, denormalize, filter_region, normalize, DatasetBounds, PointSet, RegionMask, Units};
use crate::metrics::{evaluate_generator, EvalConfig, MetricReport};
use crate::model::{generate, ArchitectureConfig, ModelState};
use crate::privacy::{domain_coverage, privatize_real_dataset, PrivacyBudget, PrivatizedDataset};
use crate::rng::{stream_rng, Seeds, Stream};
use crate::training::{TrainConfig, TrainError, TrainLog, Trainer};

/// The seven budgets of the privacy sweep.
pub const STANDARD_EPSILONS: [f64; 7] = [0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Privatize,
    Train,
    Generate,
    Evaluate,
    Query,
    Sweep,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Ingest => "ingest",
            Stage::Privatize => "privatize",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Query => "query",
            Stage::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: Box::new(e),
        })
    }
}

fn fail(stage: Stage, msg: impl Into<String>) -> PipelineError {
    PipelineError {
        stage,
        source: msg.into().into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale widths, schedule and evaluation protocol; sized for a GPU.
    Paper,
    /// Reduced widths and 2,000 steps; runs on a CPU in under a minute.
    #[default]
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset `{other}` (expected paper or desk)")),
        }
    }
}

impl Preset {
    pub fn architecture(self, dim: usize) -> ArchitectureConfig {
        match self {
            Preset::Paper => ArchitectureConfig::full_scale(dim),
            Preset::Desk => ArchitectureConfig::desk(dim),
        }
    }

    pub fn training(self) -> TrainConfig {
        match self {
            Preset::Paper => TrainConfig::full_scale(),
            Preset::Desk => TrainConfig::desk(),
        }
    }

    /// Evaluation protocol. The desk preset shrinks it so exact EMD stays
    /// cheap on a CPU.
    pub fn evaluation(self) -> EvalConfig {
        match self {
            Preset::Paper => EvalConfig::default(),
            Preset::Desk => EvalConfig {
                samples: 10,
                sample_size: 1_000,
                cd_only: false,
            },
        }
    }
}

/// Input data description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub path: Option<PathBuf>,
    pub columns: Vec<String>,
    pub units: Units,
    pub region: Option<PathBuf>,
    /// Share of points held out from training for evaluation.
    pub holdout_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            path: None,
            columns: vec!["lon".into(), "lat".into()],
            units: Units::Degrees,
            region: None,
            holdout_fraction: 0.0,
        }
    }
}

/// Overrides applied on top of the preset's training settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOverrides {
    pub epochs: Option<u64>,
    pub steps_per_epoch: Option<u64>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workloads {
    pub range: bool,
    pub hotspot: bool,
    pub facility: bool,
    /// Places CSV (same coordinate columns as the data); sampled from the
    /// data when absent.
    pub places: Option<PathBuf>,
    pub radii_m: Vec<f64>,
    pub granularities: Vec<usize>,
    pub ks: Vec<usize>,
    pub variant: FacilityVariant,
    pub facility_radius_m: f64,
    /// Synthetic samples per workload; `None` follows the evaluation
    /// protocol.
    pub samples: Option<usize>,
    pub sample_size: Option<usize>,
}

impl Default for Workloads {
    fn default() -> Self {
        Self {
            range: true,
            hotspot: true,
            facility: true,
            places: None,
            radii_m: analytics::RANGE_RADII_M.to_vec(),
            granularities: analytics::HOTSPOT_GRANULARITIES.to_vec(),
            ks: analytics::FACILITY_KS.to_vec(),
            variant: FacilityVariant::MaxInf,
            facility_radius_m: analytics::MAX_INF_RADIUS_M,
            samples: None,
            sample_size: None,
        }
    }
}

/// Everything a run needs. Serialized as JSON; command-line flags override
/// individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSpec,
    pub epsilon: PrivacyBudget,
    /// Budgets for the sweep stage.
    pub epsilons: Vec<PrivacyBudget>,
    pub preset: Preset,
    pub train: TrainOverrides,
    pub seed: u64,
    pub out: PathBuf,
    /// Existing checkpoint manifest; when set, training is skipped.
    pub checkpoint: Option<PathBuf>,
    pub stages: BTreeSet<Stage>,
    /// `None` uses the preset's protocol.
    pub evaluation: Option<EvalConfig>,
    pub workloads: Workloads,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            epsilon: PrivacyBudget::Finite(1.0),
            epsilons: STANDARD_EPSILONS.iter().map(|&e| PrivacyBudget::Finite(e)).collect(),
            preset: Preset::Desk,
            train: TrainOverrides::default(),
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            stages: [Stage::Ingest, Stage::Privatize, Stage::Train, Stage::Evaluate, Stage::Query]
                .into_iter()
                .collect(),
            evaluation: None,
            workloads: Workloads::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).at(Stage::Ingest)?;
        serde_json::from_str(&text).at(Stage::Ingest)
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    pub fn training(&self) -> TrainConfig {
        let mut t = self.preset.training();
        let o = &self.train;
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.steps_per_epoch {
            t.steps_per_epoch = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            t.schedule.initial = v;
        }
        t
    }

    pub fn eval_config(&self) -> EvalConfig {
        self.evaluation.unwrap_or_else(|| self.preset.evaluation())
    }

    /// Checks the config before any stage runs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let needs_data = self
            .stages
            .iter()
            .any(|s| matches!(s, Stage::Ingest | Stage::Privatize | Stage::Train | Stage::Evaluate | Stage::Query | Stage::Sweep));
        match &self.data.path {
            Some(p) if !p.exists() => return Err(fail(Stage::Ingest, format!("data file {} not found", p.display()))),
            None if needs_data => return Err(fail(Stage::Ingest, "no data file given")),
            _ => {}
        }
        for (path, stage) in [
            (&self.data.region, Stage::Ingest),
            (&self.checkpoint, Stage::Evaluate),
            (&self.workloads.places, Stage::Query),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(fail(stage, format!("{} not found", p.display())));
                }
            }
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(fail(Stage::Ingest, "holdout fraction must lie in [0, 1)"));
        }
        if !matches!(self.data.columns.len(), 2 | 3) {
            return Err(fail(Stage::Ingest, "expected two or three coordinate columns"));
        }
        self.training().validate().at(Stage::Train)?;
        Ok(())
    }
}

/// Loaded and normalized data.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Every point in the region, source units.
    pub all: PointSet,
    /// Training points, normalized.
    pub train: PointSet,
    /// Held-out points, normalized.
    pub holdout: Option<PointSet>,
    pub bounds: DatasetBounds,
    pub skipped: usize,
    pub coverage: f64,
}

impl Prepared {
    /// Real reference set for evaluation: held-out points when present.
    pub fn reference(&self) -> &PointSet {
        self.holdout.as_ref().unwrap_or(&self.train)
    }
}

/// Loads, filters and normalizes the data. With `fixed` bounds (from a
/// checkpoint) points outside them are dropped instead of widening the
/// domain.
pub fn prepare(spec: &DataSpec, fixed: Option<&DatasetBounds>, seeds: &Seeds) -> Result<Prepared, PipelineError> {
    let st = Stage::Ingest;
    let path = spec.path.as_ref().ok_or_else(|| fail(st, "no data file given"))?;
    let cols: Vec<&str> = spec.columns.iter().map(String::as_str).collect();
    let loaded = ingest::load_points(path, &cols, spec.units).at(st)?;
    let mut all = loaded.points;
    if let Some(r) = &spec.region {
        let mask = RegionMask::load(r).at(st)?;
        all = filter_region(&all, &mask);
        if all.is_empty() {
            return Err(fail(st, "no points inside the region mask"));
        }
    }
    let bounds = match fixed {
        Some(b) => {
            let keep: Vec<usize> = (0..all.len()).filter(|&i| b.contains(all.point(i))).collect();
            if keep.len() < all.len() {
                log::warn!("dropping {} points outside the model's bounds", all.len() - keep.len());
            }
            all = all.select(&keep);
            b.clone()
        }
        None => DatasetBounds::from_points(&all, spec.units).at(st)?,
    };
    let normalized = normalize(&all, &bounds).at(st)?;
    let (train, holdout) = if spec.holdout_fraction > 0.0 {
        let mut order: Vec<usize> = (0..normalized.len()).collect();
        order.shuffle(&mut stream_rng(seeds.derive("holdout"), Stream::Batch));
        let n_hold = ((normalized.len() as f64) * spec.holdout_fraction).round() as usize;
        let (h, t) = order.split_at(n_hold);
        let (mut h, mut t) = (h.to_vec(), t.to_vec());
        h.sort_unstable();
        t.sort_unstable();
        (normalized.select(&t), Some(normalized.select(&h)))
    } else {
        (normalized, None)
    };
    let coverage = domain_coverage(&train);
    Ok(Prepared {
        all,
        train,
        holdout,
        bounds,
        skipped: loaded.skipped,
        coverage,
    })
}

/// Writes the provenance line that heads every CSV report.
fn provenance<W: Write>(w: &mut W, hash: &str, seed: u64) -> std::io::Result<()> {
    writeln!(w, "# config_hash={hash} seed={seed}")
}

fn create(path: &Path, stage: Stage) -> Result<BufWriter<File>, PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(stage)?;
    }
    Ok(BufWriter::new(File::create(path).at(stage)?))
}

pub fn write_points_csv(path: &Path, ps: &PointSet, columns: &[String], header: Option<(&str, u64)>) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    if let Some((hash, seed)) = header {
        provenance(&mut w, hash, seed)?;
    }
    writeln!(w, "{}", columns.join(","))?;
    for p in ps.points() {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

pub fn write_train_log(path: &Path, log: &TrainLog, hash: &str, seed: u64) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    provenance(&mut w, hash, seed)?;
    writeln!(w, "step,d_loss,g_loss,lr")?;
    for r in &log.steps {
        writeln!(w, "{},{},{},{}", r.step, r.d_loss, r.g_loss, r.lr)?;
    }
    w.flush()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotspotAgreement {
    pub g: usize,
    pub sdc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacilityAgreement {
    pub variant: FacilityVariant,
    pub k: usize,
    pub sdc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub samples: usize,
    pub sample_size: usize,
    pub range: Vec<RangeError>,
    pub hotspot: Vec<HotspotAgreement>,
    pub facility: Vec<FacilityAgreement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub epsilon: PrivacyBudget,
    pub checkpoint_id: Option<String>,
    pub train_steps: u64,
    pub label_digest: Option<String>,
    pub domain_coverage: Option<f64>,
    pub metrics: Option<MetricReport>,
    pub queries: Option<QueryReport>,
}

/// Model plus what is needed to use it.
pub struct Trained {
    pub state: ModelState<f32>,
    pub manifest: Option<Manifest>,
    pub run: RunInfo,
}

/// Runs the device-side privatization and writes the upload CSV.
pub fn privatize_stage(
    prepared: &Prepared,
    budget: PrivacyBudget,
    seeds: &Seeds,
    out: Option<&Path>,
) -> Result<PrivatizedDataset, PipelineError> {
    let st = Stage::Privatize;
    let mut rng = seeds.rng(Stream::RealLabelFlip);
    let (_, upload) = privatize_real_dataset(&prepared.train, budget, &mut rng).at(st)?;
    if let Some(path) = out {
        let mut w = create(path, st)?;
        upload.write_csv(&mut w).at(st)?;
        w.flush().at(st)?;
    }
    Ok(upload)
}

/// Trains on a privatized upload, checkpointing after every epoch under
/// `out/checkpoints` and writing the final model as `out/model.json`.
pub fn train_stage(
    upload: &PrivatizedDataset,
    prepared: &Prepared,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(Trained, TrainLog), PipelineError> {
    let st = Stage::Train;
    let seeds = cfg.seeds();
    let tc = cfg.training();
    let arch = cfg.preset.architecture(prepared.train.dim());
    let run = RunInfo {
        epsilon: upload.budget(),
        seeds,
        batch_size: tc.batch_size,
        bounds: Some(prepared.bounds.clone()),
        columns: cfg.data.columns.clone(),
    };
    let ckpt_dir = out.join("checkpoints");
    let mut trainer = Trainer::<f32>::new(upload, arch, tc, seeds).at(st)?;
    let log = trainer
        .run(&mut |snap, state| {
            checkpoint::save(&ckpt_dir, &format!("epoch_{:04}", snap.epoch), state, &run)
                .map(|_| ())
                .map_err(|e| TrainError::Callback(e.to_string()))
        })
        .at(st)?;
    if log.label_digest_before != log.label_digest_after {
        return Err(fail(st, "flipped labels changed during training"));
    }
    let state = trainer.into_state();
    let path = checkpoint::save(out, "model", &state, &run).at(st)?;
    write_train_log(&out.join("train_log.csv"), &log, &cfg.hash(), cfg.seed).at(st)?;
    let (state, manifest) = checkpoint::load(&path).at(st)?;
    Ok((
        Trained {
            state,
            manifest: Some(manifest),
            run,
        },
        log,
    ))
}

pub fn load_trained(path: &Path) -> Result<Trained, PipelineError> {
    let (state, manifest) = checkpoint::load(path).at(Stage::Evaluate)?;
    let run = manifest.run.clone();
    Ok(Trained {
        state,
        manifest: Some(manifest),
        run,
    })
}

/// Samples `n` points from a trained model, in source units when the
/// checkpoint records bounds.
pub fn generate_points(trained: &Trained, n: usize, seed: u64) -> Result<PointSet, PipelineError> {
    let st = Stage::Generate;
    if n == 0 {
        return Err(fail(st, "number of points must be at least 1"));
    }
    let mut rng = stream_rng(seed, Stream::Noise);
    let ps = generate(&trained.state, n, trained.run.batch_size.max(1), &mut rng).at(st)?;
    match &trained.run.bounds {
        Some(b) => denormalize(&ps, b).at(st),
        None => Ok(ps),
    }
}

pub fn evaluate_stage(
    trained: &Trained,
    reference: &PointSet,
    eval: &EvalConfig,
    seed: u64,
    out: Option<(&Path, &str, u64)>,
) -> Result<MetricReport, PipelineError> {
    let st = Stage::Evaluate;
    let report = evaluate_generator(&trained.state, reference, eval, trained.run.batch_size.max(1), seed).at(st)?;
    if let Some((path, hash, s)) = out {
        let mut w = create(path, st)?;
        provenance(&mut w, hash, s).at(st)?;
        report.write_csv(&mut w).at(st)?;
        w.flush().at(st)?;
    }
    Ok(report)
}

/// Runs the selected analytics workloads on `samples` synthetic sets and
/// averages the per-sample answers.
pub fn query_stage(
    trained: &Trained,
    prepared: &Prepared,
    work: &Workloads,
    columns: &[String],
    samples: usize,
    sample_size: usize,
    seeds: &Seeds,
) -> Result<QueryReport, PipelineError> {
    let st = Stage::Query;
    let bounds = &prepared.bounds;
    let real_src = prepared.all.project(2).at(st)?;
    let real_m = to_meters(&real_src, bounds).at(st)?;
    let bounds2 = DatasetBounds::new(bounds.min[..2].to_vec(), bounds.max[..2].to_vec(), bounds.units).at(st)?;
    let mut place_rng = seeds.rng(Stream::Places);
    let mut place_set = |count: usize| -> Result<PointSet, PipelineError> {
        let places = match &work.places {
            Some(p) => {
                let cols: Vec<&str> = columns.iter().take(2).map(String::as_str).collect();
                PlaceSet::load(p, &cols, &bounds2).at(st)?
            }
            None => PlaceSet::sample_from(&real_src, count, &bounds2, &mut place_rng).at(st)?,
        };
        to_meters(&places.points, bounds).at(st)
    };
    let range_places = if work.range {
        Some(place_set(analytics::RANGE_PLACES)?)
    } else {
        None
    };
    let candidates = if work.facility {
        Some(place_set(analytics::FACILITY_CANDIDATES)?)
    } else {
        None
    };
    let real_norm2 = normalize(&prepared.all, bounds).at(st)?.project(2).at(st)?;
    let real_hot: Vec<BTreeSet<usize>> = if work.hotspot {
        work.granularities
            .iter()
            .map(|&g| kde_hotspots(&real_norm2, g, Bandwidth::Scott).map(|h| h.hotspots))
            .collect::<Result<_, _>>()
            .at(st)?
    } else {
        vec![]
    };
    let k_max = work.ks.iter().copied().max().unwrap_or(0);
    let real_fac = match &candidates {
        Some(c) => Some(facility_select(&real_m, c, k_max, work.variant, work.facility_radius_m).at(st)?),
        None => None,
    };

    let mut report = QueryReport {
        samples,
        sample_size,
        ..Default::default()
    };
    let mut range_acc: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); work.radii_m.len()];
    let mut hot_acc = vec![0.0; work.granularities.len()];
    let mut fac_acc = vec![0.0; work.ks.len()];
    let mut noise = stream_rng(seeds.derive("query"), Stream::Noise);
    for k in 0..samples {
        let synth = generate(&trained.state, sample_size, trained.run.batch_size.max(1), &mut noise).at(st)?;
        let synth_norm2 = synth.project(2).at(st)?;
        let synth_src = denormalize(&synth, bounds).at(st)?.project(2).at(st)?;
        let synth_m = to_meters(&synth_src, bounds).at(st)?;
        if let Some(places) = &range_places {
            for (acc, e) in range_acc.iter_mut().zip(range_query_error(&real_m, &synth_m, places, &work.radii_m).at(st)?) {
                acc.0 += e.mae;
                acc.1 += e.mpe;
                acc.2 = e.zero_count_places;
            }
        }
        for (i, &g) in work.granularities.iter().enumerate().filter(|_| work.hotspot) {
            let h = kde_hotspots(&synth_norm2, g, Bandwidth::Scott).at(st)?;
            hot_acc[i] += sorensen_dice(&real_hot[i], &h.hotspots);
        }
        if let (Some(c), Some(rf)) = (&candidates, &real_fac) {
            let sf = facility_select(&synth_m, c, k_max, work.variant, work.facility_radius_m).at(st)?;
            for (i, &kk) in work.ks.iter().enumerate() {
                let a: BTreeSet<usize> = rf.selected[..kk].iter().copied().collect();
                let b: BTreeSet<usize> = sf.selected[..kk].iter().copied().collect();
                fac_acc[i] += sorensen_dice(&a, &b);
            }
        }
        log::debug!("query sample {k} done");
    }
    let n = samples.max(1) as f64;
    if range_places.is_some() {
        report.range = work
            .radii_m
            .iter()
            .zip(range_acc)
            .map(|(&r, (mae, mpe, z))| RangeError {
                radius_m: r,
                mae: mae / n,
                mpe: mpe / n,
                zero_count_places: z,
            })
            .collect();
    }
    if work.hotspot {
        report.hotspot = work
            .granularities
            .iter()
            .zip(hot_acc)
            .map(|(&g, s)| HotspotAgreement { g, sdc: s / n })
            .collect();
    }
    if candidates.is_some() {
        report.facility = work
            .ks
            .iter()
            .zip(fac_acc)
            .map(|(&k, s)| FacilityAgreement {
                variant: work.variant,
                k,
                sdc: s / n,
            })
            .collect();
    }
    Ok(report)
}

/// Writes `range.csv`, `hotspot.csv` and `facility.csv` for the workloads
/// present in `q`.
pub fn write_query_csvs(dir: &Path, q: &QueryReport, epsilon: PrivacyBudget, hash: &str, seed: u64) -> Result<(), PipelineError> {
    let st = Stage::Query;
    let io = |r: std::io::Result<()>| r.at(st);
    if !q.range.is_empty() {
        let mut w = create(&dir.join("range.csv"), st)?;
        io(provenance(&mut w, hash, seed))?;
        io(writeln!(w, "epsilon,radius_m,mae,mpe,zero_count_places"))?;
        for e in &q.range {
            io(writeln!(w, "{epsilon},{},{},{},{}", e.radius_m, e.mae, e.mpe, e.zero_count_places))?;
        }
        io(w.flush())?;
    }
    if !q.hotspot.is_empty() {
        let mut w = create(&dir.join("hotspot.csv"), st)?;
        io(provenance(&mut w, hash, seed))?;
        io(writeln!(w, "epsilon,g,sdc"))?;
        for h in &q.hotspot {
            io(writeln!(w, "{epsilon},{},{}", h.g, h.sdc))?;
        }
        io(w.flush())?;
    }
    if !q.facility.is_empty() {
        let mut w = create(&dir.join("facility.csv"), st)?;
        io(provenance(&mut w, hash, seed))?;
        io(writeln!(w, "epsilon,variant,k,sdc"))?;
        for f in &q.facility {
            let v = match f.variant {
                FacilityVariant::MaxInf => "max-inf",
                FacilityVariant::MinDist => "min-dist",
            };
            io(writeln!(w, "{epsilon},{v},{},{}", f.k, f.sdc))?;
        }
        io(w.flush())?;
    }
    Ok(())
}

/// Executes the configured stages in order under `cfg.out`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<ExperimentReport, PipelineError> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).at(Stage::Ingest)?;
    let hash = cfg.hash();
    let seeds = cfg.seeds();
    let config_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(out.join("config.json"), config_json).at(Stage::Ingest)?;

    let mut trained = match &cfg.checkpoint {
        Some(p) => Some(load_trained(p)?),
        None => None,
    };
    let fixed = trained.as_ref().and_then(|t| t.run.bounds.clone());
    let prepared = prepare(&cfg.data, fixed.as_ref(), &seeds)?;
    log::info!(
        "loaded {} points ({} skipped), hull coverage {:.3}",
        prepared.all.len(),
        prepared.skipped,
        prepared.coverage
    );
    if cfg.stages.contains(&Stage::Ingest) {
        let mut cols: Vec<String> = cfg.data.columns.clone();
        cols.truncate(prepared.train.dim());
        write_points_csv(&out.join("ingest").join("normalized.csv"), &prepared.train, &cols, None).at(Stage::Ingest)?;
        let b = serde_json::to_string_pretty(&prepared.bounds).expect("bounds serialize");
        fs::write(out.join("ingest").join("bounds.json"), b).at(Stage::Ingest)?;
    }

    let mut report = ExperimentReport {
        config_hash: hash.clone(),
        seed: cfg.seed,
        epsilon: cfg.epsilon,
        checkpoint_id: trained.as_ref().and_then(|t| t.manifest.as_ref()).map(|m| m.id().to_string()),
        train_steps: trained.as_ref().map(|t| t.state.step).unwrap_or(0),
        label_digest: None,
        domain_coverage: Some(prepared.coverage),
        metrics: None,
        queries: None,
    };

    let wants_training = trained.is_none() && cfg.stages.contains(&Stage::Train);
    if cfg.stages.contains(&Stage::Privatize) || wants_training {
        let upload_path = cfg.stages.contains(&Stage::Privatize).then(|| out.join("privatized.csv"));
        let upload = privatize_stage(&prepared, cfg.epsilon, &seeds, upload_path.as_deref())?;
        report.label_digest = Some(upload.label_digest());
        if wants_training {
            let (t, _) = train_stage(&upload, &prepared, cfg, &out)?;
            report.checkpoint_id = t.manifest.as_ref().map(|m| m.id().to_string());
            report.train_steps = t.state.step;
            report.epsilon = t.run.epsilon;
            trained = Some(t);
        }
    }
    if let Some(t) = &trained {
        report.epsilon = t.run.epsilon;
    }

    if cfg.stages.contains(&Stage::Evaluate) {
        let t = trained.as_ref().ok_or_else(|| fail(Stage::Evaluate, "no model: train first or pass a checkpoint"))?;
        let metrics = evaluate_stage(
            t,
            prepared.reference(),
            &cfg.eval_config(),
            seeds.derive("evaluate"),
            Some((&out.join("metrics.csv"), &hash, cfg.seed)),
        )?;
        report.metrics = Some(metrics);
    }

    if cfg.stages.contains(&Stage::Query) {
        let t = trained.as_ref().ok_or_else(|| fail(Stage::Query, "no model: train first or pass a checkpoint"))?;
        let eval = cfg.eval_config();
        let samples = cfg.workloads.samples.unwrap_or(eval.samples);
        let size = cfg.workloads.sample_size.unwrap_or(eval.sample_size);
        let q = query_stage(t, &prepared, &cfg.workloads, &cfg.data.columns, samples, size, &seeds)?;
        write_query_csvs(&out, &q, report.epsilon, &hash, cfg.seed)?;
        report.queries = Some(q);
    }

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(out.join("report.json"), json).at(Stage::Evaluate)?;
    Ok(report)
}

/// Runs the pipeline once per budget in `cfg.epsilons`, each under
/// `out/eps_<ε>`, and writes a `sweep.csv` summary.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<ExperimentReport>, PipelineError> {
    let st = Stage::Sweep;
    if cfg.epsilons.is_empty() {
        return Err(fail(st, "no privacy budgets to sweep"));
    }
    let mut reports = Vec::new();
    for &eps in &cfg.epsilons {
        let mut sub = cfg.clone();
        sub.epsilon = eps;
        sub.checkpoint = None;
        sub.stages.remove(&Stage::Sweep);
        sub.stages.insert(Stage::Train);
        sub.out = cfg.out.join(format!("eps_{eps}"));
        log::info!("sweep: ε = {eps}");
        reports.push(run_pipeline(&sub)?);
    }
    let mut w = create(&cfg.out.join("sweep.csv"), st)?;
    provenance(&mut w, &cfg.hash(), cfg.seed).at(st)?;
    writeln!(w, "epsilon,config_hash,cd_mean,cd_std,emd_mean,emd_std").at(st)?;
    for r in &reports {
        let (cd, emd) = match &r.metrics {
            Some(m) => (Some(m.cd_summary), m.emd_summary),
            None => (None, None),
        };
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epsilon,
            r.config_hash,
            f(cd.map(|s| s.mean)),
            f(cd.map(|s| s.std)),
            f(emd.map(|s| s.mean)),
            f(emd.map(|s| s.std))
        )
        .at(st)?;
    }
    w.flush().at(st)?;
    Ok(reports)
}
