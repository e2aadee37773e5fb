//! Real-coded genetic search over (learning rate, activation bound).
//!
//! Each gene's interval is cut into `segments` equal cells. Initial genes
//! come from a uniformly chosen cell; a mutation moves the gene to its own
//! cell or one of the two adjacent ones and redraws it uniformly there.
//! A child that would duplicate a chromosome already in the next generation
//! gets one extra mutation, so no evaluation is spent twice on the same genes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::data::Dataset;
use crate::dp::{train, DpConfig, Optimizer, SchedulePhase};
use crate::error::{Error, Result};
use crate::nn::{build_model, ActivationKind, Arch, ModelOptions};
use crate::rng::Rng;

/// Closed gene interval; serialized as `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct GeneBounds {
    pub lo: f64,
    pub hi: f64,
}

impl TryFrom<[f64; 2]> for GeneBounds {
    type Error = Error;
    fn try_from([lo, hi]: [f64; 2]) -> Result<Self> {
        GeneBounds::new(lo, hi)
    }
}

impl From<GeneBounds> for [f64; 2] {
    fn from(b: GeneBounds) -> Self {
        [b.lo, b.hi]
    }
}

impl GeneBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config(format!("gene bounds [{lo}, {hi}] are not an interval")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn segment_of(&self, v: f64, segments: usize) -> usize {
        if self.width() == 0.0 {
            return 0;
        }
        (((v - self.lo) / self.width() * segments as f64) as usize).min(segments - 1)
    }

    fn draw_in_segment(&self, seg: usize, segments: usize, rng: &mut Rng) -> f64 {
        let w = self.width() / segments as f64;
        let lo = self.lo + seg as f64 * w;
        rng.uniform(lo, lo + w).clamp(self.lo, self.hi)
    }

    fn mutate(&self, v: f64, segments: usize, rng: &mut Rng) -> f64 {
        let cur = self.segment_of(v, segments) as i64;
        let seg = (cur + rng.below(3) as i64 - 1).clamp(0, segments as i64 - 1);
        self.draw_in_segment(seg as usize, segments, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    pub lr: f64,
    pub bound_a: f64,
    pub fitness: Option<f64>,
    /// Privacy cost of the run that produced `fitness`.
    pub epsilon: Option<f64>,
    /// Set when the fitness run diverged and was scored 0.
    pub diverged: bool,
}

impl Chromosome {
    pub fn new(lr: f64, bound_a: f64) -> Self {
        Self {
            lr,
            bound_a,
            fitness: None,
            epsilon: None,
            diverged: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub mutation_rate: f64,
    pub segments: usize,
    pub generations: usize,
    pub lr_bounds: GeneBounds,
    pub a_bounds: GeneBounds,
    /// Worker threads for fitness evaluation.
    pub jobs: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 10,
            mutation_rate: 0.25,
            segments: 10,
            generations: 10,
            lr_bounds: GeneBounds { lo: 1e-4, hi: 0.5 },
            a_bounds: GeneBounds { lo: 0.5, hi: 8.0 },
            jobs: 1,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::config(format!("`ga.population` must be at least 2, got {}", self.population)));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::config(format!(
                "`ga.mutation_rate` must lie in [0, 1], got {}",
                self.mutation_rate
            )));
        }
        if self.segments == 0 {
            return Err(Error::config("`ga.segments` must be positive"));
        }
        GeneBounds::new(self.lr_bounds.lo, self.lr_bounds.hi)?;
        GeneBounds::new(self.a_bounds.lo, self.a_bounds.hi)?;
        Ok(())
    }
}

/// Result of scoring one chromosome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub fitness: f64,
    pub epsilon: f64,
    pub diverged: bool,
}

pub trait Fitness: Sync {
    /// Must be a pure function of the chromosome's genes and `rng`.
    fn evaluate(&self, lr: f64, bound_a: f64, rng: Rng) -> Evaluation;
}

/// Any `Fn(lr, a) -> fitness` is a noiseless fitness with ε = 0.
impl<F: Fn(f64, f64) -> f64 + Sync> Fitness for F {
    fn evaluate(&self, lr: f64, bound_a: f64, _: Rng) -> Evaluation {
        Evaluation {
            fitness: self(lr, bound_a),
            epsilon: 0.0,
            diverged: false,
        }
    }
}

/// Final test accuracy of a short DPSGD run with BoundedReLU(a).
#[derive(Clone, Debug)]
pub struct DpBudget<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub arch: Arch,
    pub model: ModelOptions,
    pub dp: DpConfig,
    pub schedule: Vec<SchedulePhase>,
}

impl Fitness for DpBudget<'_> {
    fn evaluate(&self, lr: f64, bound_a: f64, mut rng: Rng) -> Evaluation {
        let mut run = || -> Result<(f64, f64)> {
            let mut opts = self.model.clone();
            opts.activation = ActivationKind::BoundedRelu;
            opts.bound = Some(bound_a);
            opts.input_shape = Some(self.train.image_shape());
            let mut model = build_model(self.arch, &opts, &mut rng)?;
            let mut ledger = PrivacyLedger::new(self.dp.delta)?;
            let dp = DpConfig { lr, ..self.dp };
            let log = train(
                &mut model,
                self.train,
                self.test,
                &Optimizer::Dp(dp),
                &self.schedule,
                &mut ledger,
                &mut rng,
            )?;
            Ok((log.final_test_acc().unwrap_or(f64::NAN), ledger.epsilon()?.0))
        };
        match run() {
            Ok((acc, eps)) if acc.is_finite() => Evaluation {
                fitness: acc,
                epsilon: eps,
                diverged: false,
            },
            _ => Evaluation {
                fitness: 0.0,
                epsilon: f64::NAN,
                diverged: true,
            },
        }
    }
}

/// Stratified start: per gene, segments are dealt out as shuffled decks so
/// every segment is used before any repeats.
pub fn init_population(cfg: &GaConfig, rng: &mut Rng) -> Vec<Chromosome> {
    let deck = |rng: &mut Rng| {
        let mut segs = Vec::with_capacity(cfg.population);
        while segs.len() < cfg.population {
            let mut d: Vec<usize> = (0..cfg.segments).collect();
            rng.shuffle(&mut d);
            segs.extend(d);
        }
        segs.truncate(cfg.population);
        segs
    };
    let lr_segs = deck(rng);
    let a_segs = deck(rng);
    lr_segs
        .into_iter()
        .zip(a_segs)
        .map(|(ls, as_)| {
            let lr = cfg.lr_bounds.draw_in_segment(ls, cfg.segments, rng);
            let a = cfg.a_bounds.draw_in_segment(as_, cfg.segments, rng);
            Chromosome::new(lr, a)
        })
        .collect()
}

/// Score every unevaluated chromosome. Chromosome `i` of generation `g`
/// always gets the same substream, so the thread count does not matter.
pub fn evaluate_population(
    pop: &mut [Chromosome],
    fitness: &dyn Fitness,
    generation: usize,
    jobs: usize,
    root: &Rng,
) {
    let pending: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].fitness.is_none()).collect();
    let gen_rng = root.fork(generation as u64);
    let score = |i: usize, c: &Chromosome| fitness.evaluate(c.lr, c.bound_a, gen_rng.fork(i as u64));
    let results: Vec<(usize, Evaluation)> = if jobs <= 1 || pending.len() <= 1 {
        pending.iter().map(|&i| (i, score(i, &pop[i]))).collect()
    } else {
        let snapshot: Vec<Chromosome> = pop.to_vec();
        let chunk = pending.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = pending
                .chunks(chunk)
                .map(|ids| {
                    let snapshot = &snapshot;
                    let score = &score;
                    s.spawn(move || ids.iter().map(|&i| (i, score(i, &snapshot[i]))).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("fitness worker panicked"))
                .collect()
        })
    };
    for (i, e) in results {
        pop[i].fitness = Some(e.fitness);
        pop[i].epsilon = Some(e.epsilon);
        pop[i].diverged = e.diverged;
    }
}

fn by_fitness_desc(a: &Chromosome, b: &Chromosome) -> std::cmp::Ordering {
    let f = |c: &Chromosome| c.fitness.unwrap_or(f64::NEG_INFINITY);
    f(b).total_cmp(&f(a))
}

/// Next generation: the top half survives with its fitness; the rest are
/// uniform-crossover children of tournament-selected survivors.
pub fn evolve(pop: &[Chromosome], cfg: &GaConfig, rng: &mut Rng) -> Result<Vec<Chromosome>> {
    if pop.iter().any(|c| c.fitness.is_none()) {
        return Err(Error::State("evolve needs every chromosome evaluated".into()));
    }
    let mut sorted = pop.to_vec();
    sorted.sort_by(by_fitness_desc);
    let keep = (pop.len() / 2).max(1);
    let survivors = &sorted[..keep];
    let mut next = survivors.to_vec();
    let tournament = |rng: &mut Rng| {
        let a = &survivors[rng.below(keep)];
        let b = &survivors[rng.below(keep)];
        if by_fitness_desc(a, b).is_le() {
            a
        } else {
            b
        }
    };
    while next.len() < pop.len() {
        let p1 = tournament(rng);
        let p2 = tournament(rng);
        let mut lr = if rng.bernoulli(0.5) { p1.lr } else { p2.lr };
        let mut a = if rng.bernoulli(0.5) { p1.bound_a } else { p2.bound_a };
        if rng.bernoulli(cfg.mutation_rate) {
            lr = cfg.lr_bounds.mutate(lr, cfg.segments, rng);
        }
        if rng.bernoulli(cfg.mutation_rate) {
            a = cfg.a_bounds.mutate(a, cfg.segments, rng);
        }
        if next.iter().any(|c| c.lr == lr && c.bound_a == a) && cfg.mutation_rate > 0.0 {
            if rng.bernoulli(0.5) {
                lr = cfg.lr_bounds.mutate(lr, cfg.segments, rng);
            } else {
                a = cfg.a_bounds.mutate(a, cfg.segments, rng);
            }
        }
        next.push(Chromosome::new(lr, a));
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_lr: f64,
    pub best_a: f64,
    pub epsilon: f64,
}

pub fn write_history_csv<W: Write>(history: &[GenerationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::Runtime(format!("writing GA history: {e}")))?;
    }
    w.flush().map_err(|e| Error::Runtime(format!("writing GA history: {e}")))
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub best: Chromosome,
    /// One record per generation, the initial population being generation 0.
    pub history: Vec<GenerationRecord>,
    /// Every chromosome evaluated, per generation.
    pub populations: Vec<Vec<Chromosome>>,
}

/// Search for the (lr, a) pair with the highest fitness.
pub fn tune_bound(cfg: &GaConfig, fitness: &dyn Fitness, rng: &mut Rng) -> Result<TuneOutcome> {
    cfg.validate()?;
    let eval_root = rng.split();
    let mut pop = init_population(cfg, rng);
    let mut history = Vec::with_capacity(cfg.generations + 1);
    let mut populations = Vec::with_capacity(cfg.generations + 1);
    for generation in 0..=cfg.generations {
        if generation > 0 {
            pop = evolve(&pop, cfg, rng)?;
        }
        evaluate_population(&mut pop, fitness, generation, cfg.jobs, &eval_root);
        let best = *pop.iter().min_by(|a, b| by_fitness_desc(a, b)).expect("population is non-empty");
        if let Some(prev) = history.last().map(|r: &GenerationRecord| r.best_fitness) {
            debug_assert!(best.fitness.unwrap() >= prev, "elitism violated");
        }
        history.push(GenerationRecord {
            generation,
            best_fitness: best.fitness.unwrap(),
            best_lr: best.lr,
            best_a: best.bound_a,
            epsilon: best.epsilon.unwrap_or(f64::NAN),
        });
        populations.push(pop.clone());
    }
    let best = *pop.iter().min_by(|a, b| by_fitness_desc(a, b)).expect("population is non-empty");
    Ok(TuneOutcome {
        best,
        history,
        populations,
    })
}
