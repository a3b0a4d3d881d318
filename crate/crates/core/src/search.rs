//! Novelty search over genomes. Distances come from a [`BehaviourOracle`]:
//! either the pretrained surrogate (no training inside the loop) or exact
//! distances from training the population every iteration.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DataSplit;
use crate::diversity::{exact_distance, DistanceVector, DiversityError, Metric};
use crate::ensemble::{fit_stacking, predict_ensemble, EnsembleError, StackConfig, StackingModel};
use crate::genome::{arch_rep, mutate, normalize, random_genome, Genome, NormalizedRep, SearchSpaceBounds};
use crate::learner::{build_population, train_joint, train_population, LearnerError, PredictionProfile, ResidualMlp, TrainConfig};
use crate::rng::{derive_seed, seeded, tag, Rng};
use crate::surrogate::{RandomForestSurrogate, SurrogateError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("individual has no peers to compare against")]
    EmptyPeers,
    #[error("elite archive holds {have} members, ensemble needs {need}")]
    InsufficientElites { have: usize, need: usize },
    #[error("distance oracle: {0}")]
    Oracle(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Surrogate,
    Exact,
}

impl std::str::FromStr for Mode {
    type Err = SearchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surrogate" => Ok(Mode::Surrogate),
            "exact" => Ok(Mode::Exact),
            other => Err(SearchError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Surrogate => "surrogate",
            Mode::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsConfig {
    pub iterations: usize,
    pub population_size: usize,
    pub ensemble_size: usize,
    pub metric: Metric,
    pub neighbours: usize,
    pub archive_sample: usize,
    pub tournament_size: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl NsConfig {
    /// Desk-scale version of the runtime-comparison column (population 12, 5 iterations).
    pub fn desk_runtime_comparison(seed: u64) -> Self {
        Self {
            iterations: 5,
            population_size: 12,
            ensemble_size: 3,
            metric: Metric::CosDist,
            neighbours: 3,
            archive_sample: 5,
            tournament_size: 10,
            mode: Mode::Surrogate,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.population_size < 2 {
            return bad("population_size must be at least 2");
        }
        if self.neighbours < 1 {
            return bad("K must be at least 1");
        }
        if self.archive_sample > self.population_size {
            return bad("archive sample size exceeds population size");
        }
        if self.tournament_size < 1 || self.tournament_size > self.population_size {
            return bad("tournament size must lie in [1, population_size]");
        }
        if self.ensemble_size < 1 || self.ensemble_size > self.iterations {
            return bad("ensemble size must lie in [1, iterations]");
        }
        Ok(())
    }
}

/// A genome plus whatever the oracle needs to measure distances to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub genome: Genome,
    pub rep: NormalizedRep,
    /// Validation profile, present in exact mode.
    pub profile: Option<PredictionProfile>,
}

pub trait BehaviourOracle: Sync {
    /// Prepares the current population. Exact oracles train it here.
    fn observe(&mut self, population: &[Genome], iteration: usize) -> Result<Vec<Member>, SearchError>;
    fn distance(&self, a: &Member, b: &Member) -> Result<DistanceVector, SearchError>;
}

/// Estimates distances from two normalized representations.
pub trait PairEstimator: Sync {
    fn estimate(&self, a: &NormalizedRep, b: &NormalizedRep) -> Result<DistanceVector, SearchError>;
}

impl PairEstimator for RandomForestSurrogate {
    fn estimate(&self, a: &NormalizedRep, b: &NormalizedRep) -> Result<DistanceVector, SearchError> {
        Ok(self.predict(a, b)?)
    }
}

pub struct SurrogateOracle<'a, E: PairEstimator> {
    estimator: &'a E,
    bounds: SearchSpaceBounds,
}

impl<'a, E: PairEstimator> SurrogateOracle<'a, E> {
    pub fn new(estimator: &'a E, bounds: SearchSpaceBounds) -> Self {
        Self { estimator, bounds }
    }
}

impl<E: PairEstimator> BehaviourOracle for SurrogateOracle<'_, E> {
    fn observe(&mut self, population: &[Genome], _iteration: usize) -> Result<Vec<Member>, SearchError> {
        Ok(population
            .iter()
            .map(|g| Member { genome: g.clone(), rep: normalize(g, &self.bounds), profile: None })
            .collect())
    }

    fn distance(&self, a: &Member, b: &Member) -> Result<DistanceVector, SearchError> {
        self.estimator.estimate(&a.rep, &b.rep)
    }
}

/// Trains populations on `data.train` and profiles them on `data.val`.
///
/// Profiles are memoised per genome for the lifetime of the oracle: a genome
/// is trained the first time it appears (jointly with the other new joint
/// genomes of that population) and its profile is reused afterwards. This
/// makes every exact distance a function of the two genomes alone.
pub struct ExactOracle<'a> {
    data: &'a DataSplit,
    train: TrainConfig,
    bounds: SearchSpaceBounds,
    profiles: HashMap<GenomeKey, PredictionProfile>,
}

type GenomeKey = (bool, usize, Vec<(usize, u64)>);

fn genome_key(g: &Genome) -> GenomeKey {
    (g.joint, g.first_width, g.blocks.iter().map(|b| (b.width, b.dropout.to_bits())).collect())
}

impl<'a> ExactOracle<'a> {
    pub fn new(data: &'a DataSplit, train: TrainConfig, bounds: SearchSpaceBounds) -> Self {
        Self { data, train, bounds, profiles: HashMap::new() }
    }

    /// Number of distinct genomes trained so far.
    pub fn trained(&self) -> usize {
        self.profiles.len()
    }
}

impl BehaviourOracle for ExactOracle<'_> {
    fn observe(&mut self, population: &[Genome], _iteration: usize) -> Result<Vec<Member>, SearchError> {
        let mut fresh: Vec<Genome> = Vec::new();
        for g in population {
            let key = genome_key(g);
            if !self.profiles.contains_key(&key) && !fresh.iter().any(|f| genome_key(f) == key) {
                fresh.push(g.clone());
            }
        }
        if !fresh.is_empty() {
            let trained = train_population(&fresh, self.data, &self.train)?;
            self.profiles.extend(fresh.iter().map(genome_key).zip(trained));
        }
        Ok(population
            .iter()
            .map(|g| Member {
                genome: g.clone(),
                rep: normalize(g, &self.bounds),
                profile: Some(self.profiles[&genome_key(g)].clone()),
            })
            .collect())
    }

    fn distance(&self, a: &Member, b: &Member) -> Result<DistanceVector, SearchError> {
        let (pa, pb) = match (&a.profile, &b.profile) {
            (Some(pa), Some(pb)) => (pa, pb),
            _ => return Err(SearchError::Oracle("exact distance needs trained profiles".into())),
        };
        Ok(exact_distance(pa, pb, &arch_rep(&a.rep), &arch_rep(&b.rep))?)
    }
}

/// Mean of the `k` smallest distances (all of them if fewer than `k`).
pub fn novelty_score(distances_to_peers: &[f64], k: usize) -> Result<f64, SearchError> {
    if distances_to_peers.is_empty() {
        return Err(SearchError::EmptyPeers);
    }
    let mut d = distances_to_peers.to_vec();
    d.sort_by(f64::total_cmp);
    let take = k.min(d.len());
    Ok(d[..take].iter().sum::<f64>() / take as f64)
}

/// Sum of distances to all elite members; 0 for an empty archive.
pub fn elite_score(distances_to_elites: &[f64]) -> f64 {
    distances_to_elites.iter().sum()
}

/// Index of the first maximum.
fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Winner of a tournament over `entrants` (population indices): highest
/// novelty, ties to the lowest index.
pub fn tournament_winner(entrants: &[usize], novelty: &[f64]) -> usize {
    let mut best = entrants[0];
    for &i in &entrants[1..] {
        if novelty[i] > novelty[best] || (novelty[i] == novelty[best] && i < best) {
            best = i;
        }
    }
    best
}

/// `k` members with the largest total distance to the rest of the archive,
/// returned in archive order. Ties go to earlier members.
pub fn top_k_by_total_distance(matrix: &[Vec<f64>], k: usize) -> Result<Vec<usize>, SearchError> {
    let n = matrix.len();
    if k > n {
        return Err(SearchError::InsufficientElites { have: n, need: k });
    }
    let totals: Vec<f64> = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| matrix[i][j]).sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_novelty: f64,
    pub max_novelty: f64,
    pub elite_score: f64,
    pub observe_seconds: f64,
    pub distance_seconds: f64,
    pub selection_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub population: Vec<Genome>,
    pub archive: Vec<Member>,
    pub elite_archive: Vec<Member>,
    pub iteration: usize,
    pub rng: Rng,
    pub log: Vec<IterationLog>,
    /// Novelty scores of the population evaluated in the last step.
    pub last_novelty: Vec<f64>,
}

impl SearchState {
    pub fn new(cfg: &NsConfig, bounds: &SearchSpaceBounds) -> Self {
        let mut rng = seeded(derive_seed(cfg.seed, tag::SEARCH, u64::MAX));
        let population = (0..cfg.population_size).map(|_| random_genome(bounds, &mut rng)).collect();
        Self { population, archive: Vec::new(), elite_archive: Vec::new(), iteration: 0, rng, log: Vec::new(), last_novelty: Vec::new() }
    }

    pub fn archive_genomes(&self) -> Vec<&Genome> {
        self.archive.iter().map(|m| &m.genome).collect()
    }

    pub fn elite_genomes(&self) -> Vec<&Genome> {
        self.elite_archive.iter().map(|m| &m.genome).collect()
    }
}

fn metric_distances<O: BehaviourOracle>(
    oracle: &O,
    pairs: &[(&Member, &Member)],
    metric: Metric,
) -> Result<Vec<f64>, SearchError> {
    use rayon::prelude::*;
    pairs.par_iter().map(|(a, b)| oracle.distance(a, b).map(|d| d.get(metric))).collect()
}

/// One iteration. On error `state` is left untouched.
pub fn step<O: BehaviourOracle>(
    state: &mut SearchState,
    cfg: &NsConfig,
    bounds: &SearchSpaceBounds,
    oracle: &mut O,
) -> Result<(), SearchError> {
    let t0 = Instant::now();
    let members = oracle.observe(&state.population, state.iteration)?;
    let observe_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let n = members.len();
    let mut pairs: Vec<(&Member, &Member)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((&members[i], &members[j]));
        }
    }
    let within = pairs.len();
    for m in &members {
        pairs.extend(state.archive.iter().map(|a| (m, a)));
    }
    let to_archive = pairs.len();
    for m in &members {
        pairs.extend(state.elite_archive.iter().map(|e| (m, e)));
    }
    let dist = metric_distances(oracle, &pairs, cfg.metric)?;
    let distance_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let mut pop_matrix = vec![vec![0.0; n]; n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            pop_matrix[i][j] = dist[k];
            pop_matrix[j][i] = dist[k];
            k += 1;
        }
    }
    debug_assert_eq!(k, within);
    let na = state.archive.len();
    let ne = state.elite_archive.len();
    let mut novelty = Vec::with_capacity(n);
    let mut elite_scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut peers: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| pop_matrix[i][j]).collect();
        peers.extend_from_slice(&dist[within + i * na..within + (i + 1) * na]);
        novelty.push(novelty_score(&peers, cfg.neighbours)?);
        elite_scores.push(elite_score(&dist[to_archive + i * ne..to_archive + (i + 1) * ne]));
    }

    let mut rng = state.rng.clone();
    let archived: Vec<usize> = sample_indices(&mut rng, n, cfg.archive_sample).into_vec();
    let best = first_argmax(&elite_scores);
    let mut next = Vec::with_capacity(cfg.population_size);
    for _ in 0..cfg.population_size {
        let entrants = sample_indices(&mut rng, n, cfg.tournament_size).into_vec();
        let winner = tournament_winner(&entrants, &novelty);
        next.push(mutate(&members[winner].genome, bounds, &mut rng));
    }
    let selection_seconds = t2.elapsed().as_secs_f64();

    state.archive.extend(archived.iter().map(|&i| members[i].clone()));
    state.elite_archive.push(members[best].clone());
    state.log.push(IterationLog {
        iteration: state.iteration,
        mean_novelty: novelty.iter().sum::<f64>() / n as f64,
        max_novelty: novelty.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        elite_score: elite_scores[best],
        observe_seconds,
        distance_seconds,
        selection_seconds,
    });
    state.population = next;
    state.last_novelty = novelty;
    state.rng = rng;
    state.iteration += 1;
    Ok(())
}

/// Picks `ensemble_size` elites by total distance to the other elites.
pub fn select_final_ensemble<O: BehaviourOracle>(
    elite_archive: &[Member],
    oracle: &O,
    metric: Metric,
    ensemble_size: usize,
) -> Result<Vec<usize>, SearchError> {
    let n = elite_archive.len();
    if ensemble_size > n {
        return Err(SearchError::InsufficientElites { have: n, need: ensemble_size });
    }
    let pairs: Vec<(&Member, &Member)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| (&elite_archive[i], &elite_archive[j])).collect();
    let dist = metric_distances(oracle, &pairs, metric)?;
    let mut matrix = vec![vec![0.0; n]; n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            matrix[i][j] = dist[k];
            matrix[j][i] = dist[k];
            k += 1;
        }
    }
    top_k_by_total_distance(&matrix, ensemble_size)
}

/// Loop only: `cfg.iterations` steps followed by ensemble selection.
pub fn evolve<O: BehaviourOracle>(
    cfg: &NsConfig,
    bounds: &SearchSpaceBounds,
    oracle: &mut O,
) -> Result<(SearchState, Vec<usize>, f64), SearchError> {
    cfg.validate()?;
    let mut state = SearchState::new(cfg, bounds);
    for _ in 0..cfg.iterations {
        step(&mut state, cfg, bounds, oracle)?;
    }
    let t = Instant::now();
    let chosen = select_final_ensemble(&state.elite_archive, oracle, cfg.metric, cfg.ensemble_size)?;
    Ok((state, chosen, t.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub observe: f64,
    pub distances: f64,
    pub selection: f64,
    pub final_selection: f64,
    pub final_training: f64,
    pub stacking: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub metric: Metric,
    pub seed: u64,
    pub iterations: Vec<IterationLog>,
    pub elite_archive: Vec<Genome>,
    pub ensemble: Vec<Genome>,
    pub member_val_accuracy: Vec<f64>,
    pub member_test_accuracy: Vec<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub seconds: PhaseTimes,
}

pub struct RunOutcome {
    pub ensemble: Vec<Genome>,
    pub members: Vec<ResidualMlp>,
    pub stack: StackingModel,
    pub report: RunReport,
    pub state: SearchState,
}

/// Search, select, train the chosen genomes on `data.train` (honouring the
/// joint flags), stack on `data.val` and score on `data.test`.
pub fn run<O: BehaviourOracle>(
    cfg: &NsConfig,
    bounds: &SearchSpaceBounds,
    oracle: &mut O,
    data: &DataSplit,
    train: &TrainConfig,
    stack_cfg: &StackConfig,
) -> Result<RunOutcome, SearchError> {
    let start = Instant::now();
    let (state, chosen, final_selection) = evolve(cfg, bounds, oracle)?;
    let ensemble: Vec<Genome> = chosen.iter().map(|&i| state.elite_archive[i].genome.clone()).collect();

    let t = Instant::now();
    let final_cfg = train.with_seed(derive_seed(cfg.seed, tag::FINAL, train.seed));
    let models = build_population(&ensemble, data.feature_dim(), data.class_count(), &final_cfg)?;
    let members = train_joint(models, &data.train, &final_cfg)?;
    let final_training = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let stack = fit_stacking(&members, &data.val, stack_cfg)?;
    let val_accuracy = predict_ensemble(&members, &stack, &data.val)?.accuracy();
    let test_accuracy = predict_ensemble(&members, &stack, &data.test)?.accuracy();
    let stacking = t.elapsed().as_secs_f64();
    let member_acc = |part: &crate::dataset::LabeledDataset| -> Result<Vec<f64>, SearchError> {
        members.iter().map(|m| Ok(crate::learner::evaluate(m, part)?.accuracy())).collect()
    };
    let member_val_accuracy = member_acc(&data.val)?;
    let member_test_accuracy = member_acc(&data.test)?;

    let sum = |f: fn(&IterationLog) -> f64| state.log.iter().map(f).sum::<f64>();
    let seconds = PhaseTimes {
        observe: sum(|l| l.observe_seconds),
        distances: sum(|l| l.distance_seconds),
        selection: sum(|l| l.selection_seconds),
        final_selection,
        final_training,
        stacking,
        total: start.elapsed().as_secs_f64(),
    };
    let report = RunReport {
        mode: cfg.mode,
        metric: cfg.metric,
        seed: cfg.seed,
        iterations: state.log.clone(),
        elite_archive: state.elite_archive.iter().map(|m| m.genome.clone()).collect(),
        ensemble: ensemble.clone(),
        member_val_accuracy,
        member_test_accuracy,
        val_accuracy,
        test_accuracy,
        seconds,
    };
    Ok(RunOutcome { ensemble, members, stack, report, state })
}
