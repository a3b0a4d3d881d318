//! Experiment orchestration: configuration, the pretraining pipeline
//! (sample, train, measure, fit the forest), search runs, the exact versus
//! surrogate comparison and the metric study. Every command writes its
//! results under an output directory, atomically, tagged with the hash of the
//! configuration that produced them.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{load_csv, split, synth_blobs, DataError, DataSplit};
use crate::diversity::Metric;
use crate::ensemble::{predict_ensemble, EnsembleError, StackConfig, StackingModel};
use crate::genome::{random_genome, Genome, GenomeError, SearchSpaceBounds};
use crate::learner::{train_population, LearnerError, PredictionProfile, ResidualMlp, TrainConfig};
use crate::rng::{derive_seed, seeded, tag};
use crate::search::{run, ExactOracle, Mode, NsConfig, RunOutcome, RunReport, SearchError, SurrogateOracle};
use crate::stats::{mann_whitney, median, MannWhitney};
use crate::surrogate::{
    build_distance_dataset, fit_with_oob, forest_fidelity, holdout_split, read_distance_csv, write_distance_csv,
    DistanceRecord, FidelityReport, ForestParams, RandomForestSurrogate, SurrogateError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("sampled genome {index} diverged twice; aborting")]
    SampleDiverged { index: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Gaussian blobs around the first `classes` unit vectors.
    Blobs { classes: usize, per_class: usize, dim: usize, spread: f64 },
    /// Numeric CSV; relative paths resolve against the config file.
    Csv { path: PathBuf, label_column: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Train, validation and test shares.
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

fn default_true() -> bool {
    true
}

/// Ranges of the search space, as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpaceSection {
    pub number_of_blocks: [usize; 2],
    pub number_of_channels_in_the_first_convolution: [usize; 2],
    pub number_of_channels_in_residual_blocks: [usize; 2],
    pub dropout_probability_in_residual_blocks: [f64; 2],
}

impl SearchSpaceSection {
    pub fn bounds(&self) -> Result<SearchSpaceBounds, GenomeError> {
        SearchSpaceBounds::new(
            (self.number_of_blocks[0], self.number_of_blocks[1]),
            (self.number_of_channels_in_the_first_convolution[0], self.number_of_channels_in_the_first_convolution[1]),
            (self.number_of_channels_in_residual_blocks[0], self.number_of_channels_in_residual_blocks[1]),
            (self.dropout_probability_in_residual_blocks[0], self.dropout_probability_in_residual_blocks[1]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoveltySearchSection {
    pub iterations: usize,
    pub final_ensemble_size: usize,
    pub population_size: usize,
    pub diversity_metric: Metric,
    pub number_of_neighbours_k: usize,
    pub size_n_a_of_archive_sample: usize,
    pub size_of_tournament_for_selection: usize,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestSection {
    pub trees: usize,
    #[serde(default)]
    pub m_try: Option<usize>,
    pub min_leaf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_directory: PathBuf,
    /// Number of architectures drawn for pretraining.
    pub sample_size: usize,
    /// Independent runs per mode (compare) or per metric (metric study).
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub dataset: DatasetSpec,
    pub search_space: SearchSpaceSection,
    pub novelty_search: NoveltySearchSection,
    pub training: TrainingSection,
    pub forest: ForestSection,
    #[serde(default)]
    pub stacking: StackConfig,
    /// Directory of the config file, used to resolve relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_repetitions() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.bounds()?;
        self.ns_config().validate()?;
        self.train_config().validate()?;
        if self.sample_size < 2 {
            return Err(HarnessError::Config("sample_size must be at least 2".into()));
        }
        if self.repetitions < 1 {
            return Err(HarnessError::Config("repetitions must be at least 1".into()));
        }
        if self.forest.trees < 1 || self.forest.min_leaf < 1 {
            return Err(HarnessError::Config("forest needs at least one tree and min_leaf >= 1".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Result<SearchSpaceBounds, GenomeError> {
        self.search_space.bounds()
    }

    pub fn ns_config(&self) -> NsConfig {
        let ns = &self.novelty_search;
        NsConfig {
            iterations: ns.iterations,
            population_size: ns.population_size,
            ensemble_size: ns.final_ensemble_size,
            metric: ns.diversity_metric,
            neighbours: ns.number_of_neighbours_k,
            archive_sample: ns.size_n_a_of_archive_sample,
            tournament_size: ns.size_of_tournament_for_selection,
            mode: ns.mode,
            seed: self.seed,
        }
    }

    /// Training settings; the seed is derived from `search_seed`.
    pub fn train_config(&self) -> TrainConfig {
        self.train_config_for(self.seed)
    }

    pub fn train_config_for(&self, search_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            seed: derive_seed(search_seed, tag::INIT, 0),
        }
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            trees: self.forest.trees,
            m_try: self.forest.m_try,
            min_leaf: self.forest.min_leaf,
            seed: derive_seed(self.seed, tag::FOREST, 0),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Loads or synthesizes the data and splits it. Depends only on the config seed.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DataSplit, HarnessError> {
    let data = match &cfg.dataset.source {
        DatasetSource::Blobs { classes, per_class, dim, spread } => {
            synth_blobs(*classes, *per_class, *dim, *spread, &mut seeded(derive_seed(cfg.seed, tag::DATA, 0)))?
        }
        DatasetSource::Csv { path, label_column } => load_csv(cfg.base_dir.join(path), *label_column)?,
    };
    let f = cfg.dataset.fractions;
    let parts = split(&data, (f[0], f[1], f[2]), &mut seeded(derive_seed(cfg.seed, tag::SPLIT, 0)))?;
    Ok(if cfg.dataset.standardize { parts.standardized() } else { parts })
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub config_hash: String,
    pub sample_size: usize,
    pub unique_pairs: usize,
    pub rows: usize,
    pub resampled: Vec<usize>,
    pub genomes: Vec<Genome>,
    pub validation_accuracy: Vec<f64>,
    pub training_seconds: f64,
    pub distance_seconds: f64,
}

pub struct Sample {
    pub members: Vec<(Genome, PredictionProfile)>,
    pub records: Vec<DistanceRecord>,
    pub summary: SampleSummary,
}

/// Draws `sample_size` genomes, trains them as one population (joint flags
/// honoured), profiles them on validation data and measures every pair.
/// A genome whose training diverges is redrawn once.
pub fn sample_architectures(cfg: &ExperimentConfig, data: &DataSplit) -> Result<Sample, HarnessError> {
    let bounds = cfg.bounds()?;
    let mut rng = seeded(derive_seed(cfg.seed, tag::SAMPLE, 0));
    let mut genomes: Vec<Genome> = (0..cfg.sample_size).map(|_| random_genome(&bounds, &mut rng)).collect();
    let train = cfg.train_config().with_seed(derive_seed(cfg.seed, tag::SAMPLE, 1));
    let mut resampled: Vec<usize> = Vec::new();
    let t = Instant::now();
    let profiles = loop {
        match train_population(&genomes, data, &train) {
            Ok(p) => break p,
            Err(e) => {
                let Some(index) = e.member_index() else { return Err(e.into()) };
                log::warn!("sampled genome {index} failed to train: {e}");
                if resampled.contains(&index) {
                    return Err(HarnessError::SampleDiverged { index });
                }
                genomes[index] = random_genome(&bounds, &mut rng);
                resampled.push(index);
            }
        }
    };
    let training_seconds = t.elapsed().as_secs_f64();
    log::info!("trained {} sample architectures in {training_seconds:.2}s", genomes.len());

    let t = Instant::now();
    let members: Vec<(Genome, PredictionProfile)> = genomes.into_iter().zip(profiles).collect();
    let records = build_distance_dataset(&members, &bounds, true)?;
    let distance_seconds = t.elapsed().as_secs_f64();
    let n = members.len();
    let summary = SampleSummary {
        config_hash: cfg.hash(),
        sample_size: n,
        unique_pairs: n * (n - 1) / 2,
        rows: records.len(),
        resampled,
        genomes: members.iter().map(|(g, _)| g.clone()).collect(),
        validation_accuracy: members.iter().map(|(_, p)| p.accuracy()).collect(),
        training_seconds,
        distance_seconds,
    };
    Ok(Sample { members, records, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub config_hash: String,
    pub fit_rows: usize,
    pub held_out_rows: usize,
    pub trees: usize,
    pub m_try: usize,
    pub oob_mse: Vec<f64>,
    pub fidelity: FidelityReport,
    pub fit_seconds: f64,
}

/// Fits the forest on 80% of the pairs and scores rank fidelity on the rest.
pub fn train_surrogate(
    cfg: &ExperimentConfig,
    records: &[DistanceRecord],
) -> Result<(RandomForestSurrogate, SurrogateSummary), HarnessError> {
    let (fit_part, held_out) = holdout_split(records, 0.2, derive_seed(cfg.seed, tag::HOLDOUT, 0));
    let t = Instant::now();
    let (forest, oob) = fit_with_oob(&fit_part, &cfg.forest_params(), true)?;
    let fit_seconds = t.elapsed().as_secs_f64();
    let fidelity = forest_fidelity(&forest, &held_out)?;
    let summary = SurrogateSummary {
        config_hash: cfg.hash(),
        fit_rows: fit_part.len(),
        held_out_rows: held_out.len(),
        trees: forest.tree_count(),
        m_try: forest.m_try(),
        oob_mse: oob.mse.to_vec(),
        fidelity,
        fit_seconds,
    };
    Ok((forest, summary))
}

pub struct Pretrained {
    pub forest: RandomForestSurrogate,
    pub sample: SampleSummary,
    pub surrogate: SurrogateSummary,
    pub seconds: f64,
}

pub fn pretrain(cfg: &ExperimentConfig, data: &DataSplit) -> Result<Pretrained, HarnessError> {
    let t = Instant::now();
    let sample = sample_architectures(cfg, data)?;
    let (forest, surrogate) = train_surrogate(cfg, &sample.records)?;
    Ok(Pretrained { forest, sample: sample.summary, surrogate, seconds: t.elapsed().as_secs_f64() })
}

// ---------------------------------------------------------------------------
// Commands

pub const DISTANCES_FILE: &str = "distances.csv";
pub const SAMPLE_SUMMARY_FILE: &str = "sample.json";
pub const SURROGATE_FILE: &str = "surrogate.nsrf";
pub const FIDELITY_FILE: &str = "fidelity.json";
pub const REPORT_FILE: &str = "report.json";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const ENSEMBLE_DIR: &str = "ensemble";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STACK_FILE: &str = "stack.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const COMPARE_TABLE_FILE: &str = "compare.csv";
pub const COMPARE_SUMMARY_FILE: &str = "compare.json";
pub const METRIC_TABLE_FILE: &str = "metric_study.csv";
pub const METRIC_SUMMARY_FILE: &str = "metric_study.json";

fn hash_comment(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={}\n", cfg.hash())
}

/// Writes `distances.csv` and `sample.json` into `out`.
pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path) -> Result<SampleSummary, HarnessError> {
    let data = prepare_data(cfg)?;
    let sample = sample_architectures(cfg, &data)?;
    let mut bytes = hash_comment(cfg).into_bytes();
    write_distance_csv(&sample.records, &mut bytes)?;
    let path = out.join(DISTANCES_FILE);
    write_atomic(&path, &bytes).map_err(io_err(&path))?;
    write_json(&out.join(SAMPLE_SUMMARY_FILE), &sample.summary)?;
    Ok(sample.summary)
}

/// Reads a distance dataset, fits the forest on 80% of it, writes the model
/// and the held-out fidelity report into `out`.
pub fn cmd_train_surrogate(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<SurrogateSummary, HarnessError> {
    let file = std::fs::File::open(dataset).map_err(io_err(dataset))?;
    let records = read_distance_csv(std::io::BufReader::new(file))?;
    let (forest, summary) = train_surrogate(cfg, &records)?;
    forest.save(out.join(SURROGATE_FILE))?;
    write_json(&out.join(FIDELITY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub genome: Genome,
    pub model_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub config_hash: String,
    pub members: Vec<ManifestMember>,
    pub stack_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutput {
    pub config_hash: String,
    #[serde(flatten)]
    pub report: RunReport,
}

/// Runs the search for `cfg` in the given mode; `model` is required in
/// surrogate mode.
pub fn run_search(
    cfg: &ExperimentConfig,
    ns: &NsConfig,
    data: &DataSplit,
    model: Option<&RandomForestSurrogate>,
) -> Result<RunOutcome, HarnessError> {
    let bounds = cfg.bounds()?;
    let train = cfg.train_config_for(ns.seed);
    let outcome = match ns.mode {
        Mode::Surrogate => {
            let forest = model.ok_or_else(|| HarnessError::Config("surrogate mode needs a trained model".into()))?;
            run(ns, &bounds, &mut SurrogateOracle::new(forest, bounds.clone()), data, &train, &cfg.stacking)?
        }
        Mode::Exact => run(ns, &bounds, &mut ExactOracle::new(data, train, bounds.clone()), data, &train, &cfg.stacking)?,
    };
    Ok(outcome)
}

fn iterations_csv(cfg: &ExperimentConfig, report: &RunReport) -> Result<Vec<u8>, HarnessError> {
    let mut bytes = hash_comment(cfg).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        let csv_err = |e: csv::Error| HarnessError::Config(e.to_string());
        w.write_record(["iteration", "mean_novelty", "max_novelty", "elite_score"]).map_err(csv_err)?;
        for l in &report.iterations {
            w.write_record([
                l.iteration.to_string(),
                format!("{:?}", l.mean_novelty),
                format!("{:?}", l.max_novelty),
                format!("{:?}", l.elite_score),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    Ok(bytes)
}

/// Search end to end. Writes `report.json`, `iterations.csv` and the trained
/// ensemble (`ensemble/manifest.json`, member model files, `stack.json`).
pub fn cmd_search(cfg: &ExperimentConfig, model: Option<&Path>, out: &Path) -> Result<SearchOutput, HarnessError> {
    let data = prepare_data(cfg)?;
    let ns = cfg.ns_config();
    let forest = match (ns.mode, model) {
        (Mode::Surrogate, Some(path)) => Some(RandomForestSurrogate::load(path)?),
        (Mode::Surrogate, None) => {
            return Err(HarnessError::Config("surrogate mode needs --model (run train-surrogate first)".into()))
        }
        (Mode::Exact, _) => None,
    };
    let outcome = run_search(cfg, &ns, &data, forest.as_ref())?;
    let output = SearchOutput { config_hash: cfg.hash(), report: outcome.report };

    let ens_dir = out.join(ENSEMBLE_DIR);
    let mut members = Vec::new();
    for (k, (genome, model)) in outcome.ensemble.iter().zip(&outcome.members).enumerate() {
        let name = format!("member_{k}.nsmp");
        model.save(ens_dir.join(&name))?;
        members.push(ManifestMember { genome: genome.clone(), model_file: name });
    }
    write_json(&ens_dir.join(STACK_FILE), &outcome.stack)?;
    let manifest = EnsembleManifest { config_hash: cfg.hash(), members, stack_file: STACK_FILE.into() };
    write_json(&ens_dir.join(MANIFEST_FILE), &manifest)?;
    let path = out.join(ITERATIONS_FILE);
    write_atomic(&path, &iterations_csv(cfg, &output.report)?).map_err(io_err(&path))?;
    write_json(&out.join(REPORT_FILE), &output)?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config_hash: String,
    pub members: usize,
    pub test_accuracy: f64,
    pub member_test_accuracy: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Reloads an ensemble written by [`cmd_search`] and scores it on test data.
pub fn cmd_evaluate(cfg: &ExperimentConfig, ensemble_dir: &Path, out: &Path) -> Result<Evaluation, HarnessError> {
    let data = prepare_data(cfg)?;
    let manifest_path = ensemble_dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: EnsembleManifest = serde_json::from_str(&text)?;
    let members: Vec<ResidualMlp> = manifest
        .members
        .iter()
        .map(|m| ResidualMlp::load(ensemble_dir.join(&m.model_file)))
        .collect::<Result<_, _>>()?;
    let stack_path = ensemble_dir.join(&manifest.stack_file);
    let text = std::fs::read_to_string(&stack_path).map_err(io_err(&stack_path))?;
    let stack: StackingModel = serde_json::from_str(&text)?;
    let profile = predict_ensemble(&members, &stack, &data.test)?;
    let member_test_accuracy = members
        .iter()
        .map(|m| Ok(crate::learner::evaluate(m, &data.test)?.accuracy()))
        .collect::<Result<Vec<f64>, HarnessError>>()?;
    let evaluation = Evaluation {
        config_hash: cfg.hash(),
        members: members.len(),
        test_accuracy: profile.accuracy(),
        member_test_accuracy,
        predictions: profile.predictions().to_vec(),
    };
    write_json(&out.join(EVALUATION_FILE), &evaluation)?;
    Ok(evaluation)
}

/// Search seed of repetition `rep`.
pub fn repetition_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    derive_seed(cfg.seed, tag::SEARCH, rep as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub repetition: usize,
    pub mode: Mode,
    pub seed: u64,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub total_seconds: f64,
    pub distance_seconds: f64,
    pub training_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub config_hash: String,
    pub repetitions: usize,
    pub rows: Vec<CompareRow>,
    pub median_exact_seconds: f64,
    pub median_surrogate_seconds: f64,
    /// Median exact-mode time over median surrogate-mode time.
    pub runtime_ratio_seconds: f64,
    pub pretraining_seconds: f64,
    pub median_exact_accuracy: f64,
    pub median_surrogate_accuracy: f64,
    /// Present when `repetitions >= 10`.
    pub accuracy_test: Option<MannWhitney>,
    pub runtime_test_seconds: Option<MannWhitney>,
    pub sample: SampleSummary,
    pub fidelity: FidelityReport,
}

fn compare_row(rep: usize, seed: u64, r: &RunReport) -> CompareRow {
    CompareRow {
        repetition: rep,
        mode: r.mode,
        seed,
        test_accuracy: r.test_accuracy,
        val_accuracy: r.val_accuracy,
        total_seconds: r.seconds.total,
        distance_seconds: r.seconds.observe + r.seconds.distances,
        training_seconds: r.seconds.final_training,
    }
}

/// Both modes on matched seeds. Pretrains its own surrogate first; that
/// one-off cost is reported separately from the per-run wall-clocks.
pub fn compare(cfg: &ExperimentConfig) -> Result<CompareSummary, HarnessError> {
    let data = prepare_data(cfg)?;
    let pre = pretrain(cfg, &data)?;
    let base = cfg.ns_config();
    let mut rows = Vec::new();
    for rep in 0..cfg.repetitions {
        let seed = repetition_seed(cfg, rep);
        for mode in [Mode::Exact, Mode::Surrogate] {
            let ns = NsConfig { mode, seed, ..base };
            let outcome = run_search(cfg, &ns, &data, Some(&pre.forest))?;
            log::info!(
                "rep {rep} {mode}: test accuracy {:.4}, {:.2}s",
                outcome.report.test_accuracy,
                outcome.report.seconds.total
            );
            rows.push(compare_row(rep, seed, &outcome.report));
        }
    }
    let pick = |mode: Mode, f: fn(&CompareRow) -> f64| -> Vec<f64> {
        rows.iter().filter(|r| r.mode == mode).map(f).collect()
    };
    let (exact_t, sur_t) = (pick(Mode::Exact, |r| r.total_seconds), pick(Mode::Surrogate, |r| r.total_seconds));
    let (exact_a, sur_a) = (pick(Mode::Exact, |r| r.test_accuracy), pick(Mode::Surrogate, |r| r.test_accuracy));
    let med = |v: &[f64]| median(v).unwrap_or(f64::NAN);
    let significance = cfg.repetitions >= 10;
    Ok(CompareSummary {
        config_hash: cfg.hash(),
        repetitions: cfg.repetitions,
        median_exact_seconds: med(&exact_t),
        median_surrogate_seconds: med(&sur_t),
        runtime_ratio_seconds: med(&exact_t) / med(&sur_t),
        pretraining_seconds: pre.seconds,
        median_exact_accuracy: med(&exact_a),
        median_surrogate_accuracy: med(&sur_a),
        accuracy_test: if significance { mann_whitney(&sur_a, &exact_a) } else { None },
        runtime_test_seconds: if significance { mann_whitney(&sur_t, &exact_t) } else { None },
        rows,
        sample: pre.sample,
        fidelity: pre.surrogate.fidelity,
    })
}

/// Runs [`compare`] and writes `compare.csv` (accuracies) and `compare.json`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareSummary, HarnessError> {
    let summary = compare(cfg)?;
    let mut bytes = hash_comment(cfg).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        let csv_err = |e: csv::Error| HarnessError::Config(e.to_string());
        w.write_record(["repetition", "mode", "seed", "test_accuracy", "val_accuracy"]).map_err(csv_err)?;
        for r in &summary.rows {
            w.write_record([
                r.repetition.to_string(),
                r.mode.to_string(),
                r.seed.to_string(),
                format!("{:?}", r.test_accuracy),
                format!("{:?}", r.val_accuracy),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let path = out.join(COMPARE_TABLE_FILE);
    write_atomic(&path, &bytes).map_err(io_err(&path))?;
    write_json(&out.join(COMPARE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: Metric,
    pub test_accuracy: Vec<f64>,
    pub median_test_accuracy: f64,
    /// Test against the first metric of the study (two-sided).
    pub versus_baseline: Option<MannWhitney>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStudy {
    pub config_hash: String,
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    pub baseline: Metric,
    pub results: Vec<MetricResult>,
    pub fidelity: FidelityReport,
    pub total_seconds: f64,
}

/// Surrogate-mode searches for each metric over `cfg.repetitions` matched
/// seeds. The first metric is the baseline the others are tested against.
pub fn metric_study(cfg: &ExperimentConfig, metrics: &[Metric]) -> Result<MetricStudy, HarnessError> {
    if metrics.is_empty() {
        return Err(HarnessError::Config("metric study needs at least one metric".into()));
    }
    let t = Instant::now();
    let data = prepare_data(cfg)?;
    let pre = pretrain(cfg, &data)?;
    let seeds: Vec<u64> = (0..cfg.repetitions).map(|r| repetition_seed(cfg, r)).collect();
    let base = NsConfig { mode: Mode::Surrogate, ..cfg.ns_config() };
    let mut accuracies: Vec<Vec<f64>> = Vec::new();
    for &metric in metrics {
        let mut acc = Vec::new();
        for &seed in &seeds {
            let ns = NsConfig { metric, seed, ..base };
            acc.push(run_search(cfg, &ns, &data, Some(&pre.forest))?.report.test_accuracy);
        }
        log::info!("{metric}: median test accuracy {:.4}", median(&acc).unwrap_or(f64::NAN));
        accuracies.push(acc);
    }
    let results = metrics
        .iter()
        .zip(&accuracies)
        .enumerate()
        .map(|(i, (&metric, acc))| MetricResult {
            metric,
            test_accuracy: acc.clone(),
            median_test_accuracy: median(acc).unwrap_or(f64::NAN),
            versus_baseline: if i == 0 { None } else { mann_whitney(acc, &accuracies[0]) },
        })
        .collect();
    Ok(MetricStudy {
        config_hash: cfg.hash(),
        repetitions: cfg.repetitions,
        seeds,
        baseline: metrics[0],
        results,
        fidelity: pre.surrogate.fidelity,
        total_seconds: t.elapsed().as_secs_f64(),
    })
}

pub fn cmd_metric_study(cfg: &ExperimentConfig, metrics: &[Metric], out: &Path) -> Result<MetricStudy, HarnessError> {
    let study = metric_study(cfg, metrics)?;
    let mut bytes = hash_comment(cfg).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        let csv_err = |e: csv::Error| HarnessError::Config(e.to_string());
        w.write_record(["metric", "seed", "test_accuracy"]).map_err(csv_err)?;
        for r in &study.results {
            for (seed, acc) in study.seeds.iter().zip(&r.test_accuracy) {
                w.write_record([r.metric.to_string(), seed.to_string(), format!("{acc:?}")]).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let path = out.join(METRIC_TABLE_FILE);
    write_atomic(&path, &bytes).map_err(io_err(&path))?;
    write_json(&out.join(METRIC_SUMMARY_FILE), &study)?;
    Ok(study)
}

/// Removes every object key ending in `seconds`, recursively. Wall-clock
/// fields are the only run-to-run differences in command outputs.
pub fn strip_wall_clock(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !k.ends_with("seconds"));
            map.values_mut().for_each(strip_wall_clock);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}
