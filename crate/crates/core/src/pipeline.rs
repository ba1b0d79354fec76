//! The experiment stages behind the command-line harness: dataset
//! generation, training, density fitting, scoring and evaluation, all
//! persisted under one output root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{ExperimentConfig, Source, Stage};
use crate::contrastive::{history_csv, train_contrastive, EncoderModel};
use crate::data::{build_dataset, derive_rng, Dataset, Split, SplitSet};
use crate::density::{fit_em, fit_flow, FlowModel, GmmModel};
use crate::error::{Error, Result};
use crate::io::pgm::export_heatmap_image;
use crate::io::checkpoint::MANIFEST_FILE;
use crate::io::{write_tensor, Checkpoint, Manifest};
use crate::metrics::{
    evaluate as evaluate_split, results_csv, select_scorer, slice_aggregate, summary_table, voxel_aggregate,
    Candidate, Metric, ResultRow, Task,
};
use crate::scoring::{detection_scores, heatmaps, postprocess, Density, Heatmap, HeatmapKind, Scorer, ScoreKind};
use crate::tensor::Tensor;
use crate::vae::{train_vae, VaeModel};

const STREAM_GMM: u64 = 0x41;
/// Dataset name used in result rows.
pub const DATASET_NAME: &str = "synth";
pub const RESULTS_FILE: &str = "results.csv";
pub const TABLE_FILE: &str = "table.txt";
pub const SELECTION_FILE: &str = "selection.csv";
pub const LOG_FILE: &str = "evaluation.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainStage {
    Simclr,
    Vae,
    Cevae,
}

impl TrainStage {
    pub const ALL: [TrainStage; 3] = [TrainStage::Simclr, TrainStage::Vae, TrainStage::Cevae];

    pub fn name(self) -> &'static str {
        match self {
            TrainStage::Simclr => "simclr",
            TrainStage::Vae => "vae",
            TrainStage::Cevae => "cevae",
        }
    }

    fn snapshot_stage(self) -> Stage {
        match self {
            TrainStage::Simclr => Stage::Simclr,
            _ => Stage::Vae,
        }
    }
}

impl std::str::FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown training stage {s:?} (simclr, vae, cevae)")))
    }
}

fn train_stage_of(source: Source) -> TrainStage {
    match source {
        Source::Cradl => TrainStage::Simclr,
        Source::Vae => TrainStage::Vae,
        Source::Cevae => TrainStage::Cevae,
    }
}

/// A fitted density's directory name: `gmm_k4` or `flow`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DensityId {
    Gmm(usize),
    Flow,
}

impl DensityId {
    pub fn name(self) -> String {
        match self {
            DensityId::Gmm(k) => format!("gmm_k{k}"),
            DensityId::Flow => "flow".to_string(),
        }
    }
}

/// Restricts `fit` to the GMMs or the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityFamily {
    Gmm,
    Flow,
}

impl DensityFamily {
    fn contains(self, id: DensityId) -> bool {
        matches!((self, id), (DensityFamily::Gmm, DensityId::Gmm(_)) | (DensityFamily::Flow, DensityId::Flow))
    }
}

impl std::str::FromStr for DensityFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(DensityFamily::Gmm),
            "flow" => Ok(DensityFamily::Flow),
            _ => Err(Error::invalid(format!("unknown density {s:?} (gmm, flow)"))),
        }
    }
}

/// Paths of every artifact under one output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }

    pub fn model_dir(&self, seed: u64, stage: TrainStage) -> PathBuf {
        self.seed_dir(seed).join(stage.name())
    }

    pub fn density_dir(&self, seed: u64, source: Source, id: DensityId) -> PathBuf {
        self.seed_dir(seed).join("density").join(source.name()).join(id.name())
    }

    pub fn scores_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("scores")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(paths: Vec<PathBuf>) -> Result<()> {
    let missing: Vec<PathBuf> = paths.into_iter().filter(|p| !p.exists()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

fn all_indices(d: &Dataset) -> Vec<usize> {
    (0..d.len()).collect()
}

fn all_images(d: &Dataset) -> Result<Tensor> {
    d.batch(&all_indices(d))
}

/// Writes every split plus a config snapshot.
pub fn generate(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<PathBuf> {
    let dir = layout.data_dir();
    claim_dir(&dir, force)?;
    build_dataset(&cfg.data)?.save(&dir)?;
    cfg.write_snapshot(&dir, Stage::Data)?;
    Ok(dir)
}

pub fn load_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<SplitSet> {
    let dir = layout.data_dir();
    require(vec![dir.join(crate::config::SNAPSHOT_FILE)])?;
    cfg.check_snapshot(&dir, Stage::Data)?;
    SplitSet::load(&dir)
}

/// Runs one training stage for one seed and writes the selected checkpoint,
/// the per-epoch history and a config snapshot.
pub fn train(cfg: &ExperimentConfig, layout: &Layout, stage: TrainStage, seed: u64, force: bool) -> Result<PathBuf> {
    let data = load_data(cfg, layout)?;
    let dir = layout.model_dir(seed, stage);
    claim_dir(&dir, force)?;
    let (ck, history) = match stage {
        TrainStage::Simclr => {
            let run = train_contrastive(&data.train, &data.holdout, &cfg.encoder, &cfg.contrastive, &cfg.augmentation, seed)?;
            let manifest = run
                .encoder
                .manifest()
                .with("seed", seed)
                .with("selected_epoch", run.selected_epoch);
            let mut ck = Checkpoint::new(manifest);
            run.encoder.save_into(&mut ck);
            run.head.save_into(&mut ck, "head");
            (ck, history_csv(&run.history))
        }
        TrainStage::Vae | TrainStage::Cevae => {
            let run = train_vae(&data.train, &data.holdout, &cfg.vae, stage == TrainStage::Cevae, seed)?;
            let manifest = run
                .model
                .manifest()
                .with("seed", seed)
                .with("selected_epoch", run.selected_epoch);
            let mut ck = Checkpoint::new(manifest);
            run.model.save_into(&mut ck);
            (ck, run.history_csv())
        }
    };
    ck.save(&dir)?;
    write_text(&dir.join("history.csv"), &history)?;
    cfg.write_snapshot(&dir, stage.snapshot_stage())?;
    Ok(dir)
}

/// A trained representation model loaded from disk.
pub enum SourceModel {
    Encoder(EncoderModel),
    Vae(VaeModel),
}

impl SourceModel {
    pub fn representation(&self) -> &dyn crate::scoring::Representation {
        match self {
            SourceModel::Encoder(e) => e,
            SourceModel::Vae(v) => v,
        }
    }

    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        match self {
            SourceModel::Encoder(e) => e.encode(batch),
            SourceModel::Vae(v) => v.representation(batch),
        }
    }
}

fn checked_checkpoint(cfg: &ExperimentConfig, dir: &Path, stage: Stage) -> Result<Checkpoint> {
    require(vec![dir.join(MANIFEST_FILE), dir.join(crate::config::SNAPSHOT_FILE)])?;
    cfg.check_snapshot(dir, stage)?;
    Checkpoint::load(dir)
}

pub fn load_source(cfg: &ExperimentConfig, layout: &Layout, source: Source, seed: u64) -> Result<SourceModel> {
    let stage = train_stage_of(source);
    let ck = checked_checkpoint(cfg, &layout.model_dir(seed, stage), stage.snapshot_stage())?;
    Ok(match source {
        Source::Cradl => SourceModel::Encoder(EncoderModel::from_checkpoint(&ck)?),
        Source::Vae | Source::Cevae => SourceModel::Vae(VaeModel::from_checkpoint(&ck)?),
    })
}

fn density_ids(cfg: &ExperimentConfig) -> Vec<DensityId> {
    let mut ids: Vec<DensityId> = cfg.gmm.components.iter().map(|&k| DensityId::Gmm(k)).collect();
    if cfg.methods.flow {
        ids.push(DensityId::Flow);
    }
    ids
}

/// Fits every configured density on the un-augmented training
/// representations of `source`.
pub fn fit(
    cfg: &ExperimentConfig,
    layout: &Layout,
    source: Source,
    seed: u64,
    family: Option<DensityFamily>,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let model = load_source(cfg, layout, source, seed)?;
    let data = load_data(cfg, layout)?;
    let ids: Vec<DensityId> = density_ids(cfg)
        .into_iter()
        .filter(|id| family.is_none_or(|f| f.contains(*id)))
        .collect();
    if ids.is_empty() {
        return Err(Error::invalid("no density selected (is the flow disabled?)"));
    }
    for id in &ids {
        let dir = layout.density_dir(seed, source, *id);
        if dir.exists() && !force {
            return Err(Error::AlreadyExists(dir));
        }
    }
    let z = model.encode(&all_images(&data.train)?)?;
    let mut written = Vec::new();
    for id in ids {
        let dir = layout.density_dir(seed, source, id);
        claim_dir(&dir, true)?;
        let base = || {
            Manifest::new()
                .with("source", source)
                .with("seed", seed)
        };
        match id {
            DensityId::Gmm(k) => {
                let mut rng = derive_rng(seed, STREAM_GMM, k as u64);
                let (gmm, log) = fit_em(&z, k, &mut rng, cfg.gmm.tol, cfg.gmm.max_iter)?;
                let mut manifest = base();
                for (key, v) in gmm.manifest().entries() {
                    manifest.set(key, v);
                }
                manifest.set("converged", log.converged);
                manifest.set("iterations", log.iterations);
                let mut ck = Checkpoint::new(manifest);
                gmm.save_into(&mut ck);
                ck.save(&dir)?;
                write_text(&dir.join("fit_log.txt"), &log.to_text())?;
                cfg.write_snapshot(&dir, Stage::Gmm(source))?;
            }
            DensityId::Flow => {
                let zv = model.encode(&all_images(&data.holdout)?)?;
                let run = fit_flow(&z, Some(&zv), &cfg.flow, seed)?;
                let mut manifest = base();
                for (key, v) in run.model.manifest().entries() {
                    manifest.set(key, v);
                }
                manifest.set("selected_epoch", run.selected_epoch);
                let mut ck = Checkpoint::new(manifest);
                run.model.save_into(&mut ck);
                ck.save(&dir)?;
                write_text(&dir.join("fit_log.txt"), &run.history_csv())?;
                cfg.write_snapshot(&dir, Stage::Flow(source))?;
            }
        }
        written.push(dir);
    }
    Ok(written)
}

pub enum DensityModel {
    Gmm(GmmModel),
    Flow(FlowModel),
}

impl DensityModel {
    pub fn as_density(&self) -> Density<'_> {
        match self {
            DensityModel::Gmm(m) => Density::Gmm(m),
            DensityModel::Flow(f) => Density::Flow(f),
        }
    }
}

/// All models of one seed needed for evaluation.
pub struct SeedModels {
    pub seed: u64,
    pub sources: BTreeMap<Source, SourceModel>,
    pub densities: BTreeMap<Source, Vec<(DensityId, DensityModel)>>,
}

fn active_sources(cfg: &ExperimentConfig) -> Vec<Source> {
    let mut s = vec![Source::Cradl];
    if cfg.methods.vae {
        s.push(Source::Vae);
    }
    if cfg.methods.cevae {
        s.push(Source::Cevae);
    }
    s
}

fn density_sources(cfg: &ExperimentConfig) -> Vec<Source> {
    active_sources(cfg)
        .into_iter()
        .filter(|&s| s == Source::Cradl || cfg.methods.radl)
        .collect()
}

/// Every artifact evaluation reads, for all seeds.
pub fn required_artifacts(cfg: &ExperimentConfig, layout: &Layout) -> Vec<PathBuf> {
    let mut paths = vec![layout.data_dir().join(crate::config::SNAPSHOT_FILE)];
    for &seed in &cfg.seeds {
        for source in active_sources(cfg) {
            paths.push(layout.model_dir(seed, train_stage_of(source)).join(MANIFEST_FILE));
        }
        for source in density_sources(cfg) {
            for id in density_ids(cfg) {
                paths.push(layout.density_dir(seed, source, id).join(MANIFEST_FILE));
            }
        }
    }
    paths
}

pub fn load_seed(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<SeedModels> {
    let mut sources = BTreeMap::new();
    for source in active_sources(cfg) {
        sources.insert(source, load_source(cfg, layout, source, seed)?);
    }
    let mut densities = BTreeMap::new();
    for source in density_sources(cfg) {
        let mut list = Vec::new();
        for id in density_ids(cfg) {
            let dir = layout.density_dir(seed, source, id);
            let (stage, model) = match id {
                DensityId::Gmm(_) => (Stage::Gmm(source), None),
                DensityId::Flow => (Stage::Flow(source), Some(())),
            };
            let ck = checked_checkpoint(cfg, &dir, stage)?;
            let recorded = ck.manifest.require("source")?;
            if recorded != source.name() {
                return Err(Error::Format {
                    what: "density checkpoint",
                    detail: format!("{} was fitted on {recorded}, expected {source}", dir.display()),
                });
            }
            let m = match model {
                None => DensityModel::Gmm(GmmModel::from_checkpoint(&ck)?),
                Some(()) => DensityModel::Flow(FlowModel::from_checkpoint(&ck)?),
            };
            list.push((id, m));
        }
        densities.insert(source, list);
    }
    Ok(SeedModels {
        seed,
        sources,
        densities,
    })
}

/// One selectable scoring rule.
#[derive(Clone, Copy)]
pub struct ScoringRule<'a> {
    pub scorer: Scorer<'a>,
    pub detection: Option<ScoreKind>,
    pub localization: Option<HeatmapKind>,
}

#[derive(Clone)]
pub struct NamedRule<'a> {
    pub name: String,
    pub rule: ScoringRule<'a>,
}

/// Candidate rules of one method.
pub struct Method<'a> {
    pub name: String,
    pub detection: Vec<NamedRule<'a>>,
    pub localization: Vec<NamedRule<'a>>,
}

fn nll_kind(id: DensityId) -> ScoreKind {
    match id {
        DensityId::Gmm(_) => ScoreKind::NllGmm,
        DensityId::Flow => ScoreKind::NllFlow,
    }
}

/// The methods compared by evaluation and their candidate scorers.
pub fn methods<'a>(cfg: &ExperimentConfig, models: &'a SeedModels) -> Vec<Method<'a>> {
    let det = &cfg.scoring.detection;
    let loc = &cfg.scoring.localization;
    let mut out = Vec::new();
    for (source, list) in &models.densities {
        let encoder = models.sources[source].representation();
        let name = match source {
            Source::Cradl => "cradl".to_string(),
            other => format!("radl_{other}"),
        };
        let mut m = Method {
            name,
            detection: Vec::new(),
            localization: Vec::new(),
        };
        for (id, model) in list {
            let scorer = Scorer::Nll {
                encoder,
                density: model.as_density(),
            };
            let kind = nll_kind(*id);
            if det.contains(&kind) {
                m.detection.push(NamedRule {
                    name: format!("nll_{}", id.name()),
                    rule: ScoringRule {
                        scorer,
                        detection: Some(kind),
                        localization: None,
                    },
                });
            }
            if loc.contains(&HeatmapKind::NllGrad) {
                m.localization.push(NamedRule {
                    name: format!("nll_grad_{}", id.name()),
                    rule: ScoringRule {
                        scorer,
                        detection: None,
                        localization: Some(HeatmapKind::NllGrad),
                    },
                });
            }
        }
        out.push(m);
    }
    for (source, model) in &models.sources {
        let SourceModel::Vae(vae) = model else { continue };
        let scorer = Scorer::Vae(vae);
        let mut m = Method {
            name: source.name().to_string(),
            detection: Vec::new(),
            localization: Vec::new(),
        };
        for kind in [ScoreKind::Elbo, ScoreKind::Kl, ScoreKind::Rec] {
            if det.contains(&kind) {
                m.detection.push(NamedRule {
                    name: kind.name().to_string(),
                    rule: ScoringRule {
                        scorer,
                        detection: Some(kind),
                        localization: None,
                    },
                });
            }
        }
        for kind in [HeatmapKind::Rec, HeatmapKind::KlGrad, HeatmapKind::Combi] {
            if loc.contains(&kind) {
                m.localization.push(NamedRule {
                    name: kind.name().to_string(),
                    rule: ScoringRule {
                        scorer,
                        detection: None,
                        localization: Some(kind),
                    },
                });
            }
        }
        out.push(m);
    }
    out
}

fn slice_scores(rule: &ScoringRule<'_>, data: &Dataset, images: &Tensor) -> Result<(Vec<f64>, Vec<bool>)> {
    let kind = rule.detection.expect("detection rule");
    slice_aggregate(data, &detection_scores(kind, rule.scorer, images)?)
}

fn processed_heatmaps(
    cfg: &ExperimentConfig,
    rule: &ScoringRule<'_>,
    data: &Dataset,
    images: &Tensor,
) -> Result<(Vec<Heatmap>, Vec<Heatmap>)> {
    let kind = rule.localization.expect("localization rule");
    let raw = heatmaps(kind, rule.scorer, images)?;
    let pp = cfg.scoring.postprocess();
    let post = raw
        .iter()
        .zip(&data.samples)
        .map(|(h, s)| postprocess(h, &s.brain_mask, &pp))
        .collect::<Result<Vec<_>>>()?;
    Ok((raw, post))
}

fn score_rule(
    cfg: &ExperimentConfig,
    task: Task,
    rule: &ScoringRule<'_>,
    data: &Dataset,
    images: &Tensor,
) -> Result<(Vec<f64>, Vec<bool>)> {
    match task {
        Task::Detection => slice_scores(rule, data, images),
        Task::Localization => {
            let (_, post) = processed_heatmaps(cfg, rule, data, images)?;
            voxel_aggregate(data, &post)
        }
    }
}

/// Writes per-slice detection scores of every candidate on the validation
/// and test splits.
pub fn score(cfg: &ExperimentConfig, layout: &Layout, seed: u64, force: bool) -> Result<PathBuf> {
    require(required_artifacts(cfg, layout))?;
    let data = load_data(cfg, layout)?;
    let models = load_seed(cfg, layout, seed)?;
    let dir = layout.scores_dir(seed);
    claim_dir(&dir, force)?;
    for split in [Split::Val, Split::Test] {
        let d = data.get(split);
        let images = all_images(d)?;
        for m in methods(cfg, &models) {
            for c in &m.detection {
                let (scores, labels) = slice_scores(&c.rule, d, &images)?;
                let mut text = String::from("index,label,score\n");
                for (i, (s, l)) in scores.iter().zip(&labels).enumerate() {
                    text.push_str(&format!("{i},{},{s}\n", *l as u8));
                }
                write_text(&dir.join(format!("{}_{}_{split}.csv", m.name, c.name)), &text)?;
            }
        }
    }
    Ok(dir)
}

/// Which candidate a method uses for one task, chosen on validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub seed: u64,
    pub method: String,
    pub task: Task,
    pub candidate: String,
    pub val_auprc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Test-split metrics of the selected scorers.
    pub rows: Vec<ResultRow>,
    pub selections: Vec<Selection>,
    pub table: String,
    /// Test slice prevalence.
    pub slice_prevalence: f64,
    /// Test prevalence of anomalous voxels within the brain.
    pub voxel_prevalence: f64,
}

impl EvalReport {
    pub fn value(&self, method: &str, task: Task, metric: Metric, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.task == task && r.metric == metric && r.seed == seed)
            .map(|r| r.value)
    }
}

pub const CONSTANT_METHOD: &str = "constant";

fn push_rows(rows: &mut Vec<ResultRow>, method: &str, task: Task, seed: u64, auroc: f64, auprc: f64) {
    for (metric, value) in [(Metric::Auroc, auroc), (Metric::Auprc, auprc)] {
        rows.push(ResultRow {
            method: method.to_string(),
            dataset: DATASET_NAME.to_string(),
            task,
            metric,
            seed,
            value,
        });
    }
}

fn export_maps(dir: &Path, raw: &[Heatmap], post: &[Heatmap], n: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (r, p)) in raw.iter().zip(post).take(n).enumerate() {
        write_tensor(dir.join(format!("{i:04}_raw.crtf")), &r.map)?;
        write_tensor(dir.join(format!("{i:04}_post.crtf")), &p.map)?;
        export_heatmap_image(&p.map, dir.join(format!("{i:04}.pgm")))?;
    }
    Ok(())
}

/// Selects every method's scorers on validation AUPRC, then reports their
/// test metrics, a constant-score baseline, and the seed summary table.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<EvalReport> {
    require(required_artifacts(cfg, layout))?;
    let data = load_data(cfg, layout)?;
    let dir = layout.eval_dir();
    claim_dir(&dir, force)?;
    let start = Instant::now();
    let mut log = String::new();
    let stamp = |log: &mut String, line: String| {
        log.push_str(&format!("[{:>9.3}s] {line}\n", start.elapsed().as_secs_f64()));
    };
    let val_images = all_images(&data.val)?;
    let test_images = all_images(&data.test)?;
    let mut rows = Vec::new();
    let mut selections = Vec::new();
    let mut voxel_prevalence = 0.0;
    let slice_prevalence = data.test.slice_prevalence();
    for &seed in &cfg.seeds {
        let models = load_seed(cfg, layout, seed)?;
        for m in methods(cfg, &models) {
            for (task, cands) in [(Task::Detection, &m.detection), (Task::Localization, &m.localization)] {
                if cands.is_empty() {
                    continue;
                }
                let mut evaluated = Vec::with_capacity(cands.len());
                for c in cands.iter() {
                    let (s, l) = score_rule(cfg, task, &c.rule, &data.val, &val_images)?;
                    let ev = evaluate_split(Split::Val, &s, &l)?;
                    stamp(&mut log, format!(
                        "seed {seed} {} {task} val {}: auroc {:.4} auprc {:.4}",
                        m.name, c.name, ev.auroc, ev.auprc
                    ));
                    evaluated.push(Candidate {
                        name: c.name.clone(),
                        evaluation: ev,
                    });
                }
                let best = select_scorer(&evaluated)?;
                let chosen = &cands[best];
                stamp(&mut log, format!("seed {seed} {} {task} selected {}", m.name, chosen.name));
                selections.push(Selection {
                    seed,
                    method: m.name.clone(),
                    task,
                    candidate: chosen.name.clone(),
                    val_auprc: evaluated[best].evaluation.auprc,
                });
                let (s, l) = match task {
                    Task::Detection => slice_scores(&chosen.rule, &data.test, &test_images)?,
                    Task::Localization => {
                        let (raw, post) = processed_heatmaps(cfg, &chosen.rule, &data.test, &test_images)?;
                        let out = dir.join("heatmaps").join(format!("seed_{seed}")).join(&m.name);
                        export_maps(&out, &raw, &post, cfg.scoring.export_heatmaps)?;
                        voxel_aggregate(&data.test, &post)?
                    }
                };
                let ev = evaluate_split(Split::Test, &s, &l)?;
                stamp(&mut log, format!(
                    "seed {seed} {} {task} test {}: auroc {:.4} auprc {:.4}",
                    m.name, chosen.name, ev.auroc, ev.auprc
                ));
                push_rows(&mut rows, &m.name, task, seed, ev.auroc, ev.auprc);
            }
        }
        let zeros = vec![0.0; data.test.len()];
        let ev = evaluate_split(Split::Test, &zeros, &data.test.labels())?;
        push_rows(&mut rows, CONSTANT_METHOD, Task::Detection, seed, ev.auroc, ev.auprc);
        let flat: Vec<Heatmap> = (0..data.test.len())
            .map(|_| Heatmap {
                map: Tensor::zeros(&[data.test.resolution, data.test.resolution]),
                kind: HeatmapKind::Rec,
                postprocessed: true,
            })
            .collect();
        let (s, l) = voxel_aggregate(&data.test, &flat)?;
        let ev = evaluate_split(Split::Test, &s, &l)?;
        voxel_prevalence = ev.prevalence;
        push_rows(&mut rows, CONSTANT_METHOD, Task::Localization, seed, ev.auroc, ev.auprc);
    }
    let table = summary_table(&rows)?;
    write_text(&dir.join(RESULTS_FILE), &results_csv(&rows))?;
    write_text(&dir.join(TABLE_FILE), &table)?;
    let mut sel = String::from("seed,method,task,candidate,val_auprc\n");
    for s in &selections {
        sel.push_str(&format!("{},{},{},{},{}\n", s.seed, s.method, s.task, s.candidate, s.val_auprc));
    }
    write_text(&dir.join(SELECTION_FILE), &sel)?;
    write_text(&dir.join(LOG_FILE), &log)?;
    Ok(EvalReport {
        rows,
        selections,
        table,
        slice_prevalence,
        voxel_prevalence,
    })
}
