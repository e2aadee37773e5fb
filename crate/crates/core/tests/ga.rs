use dpsgd_lab::data::{Dataset, DatasetName};
use dpsgd_lab::dp::{DpConfig, Sampling, SchedulePhase};
use dpsgd_lab::ga::{
    evolve, init_population, tune_bound, write_history_csv, Chromosome, DpBudget, Fitness, GaConfig, GeneBounds,
};
use dpsgd_lab::nn::{ActivationKind, Arch, ModelOptions};
use dpsgd_lab::tensor::gaussian;
use dpsgd_lab::Rng;
use proptest::prelude::*;

fn concave(lr: f64, a: f64) -> f64 {
    -(lr - 0.3).powi(2) - (a - 2.0).powi(2)
}

fn near_optimum(c: &Chromosome) -> bool {
    (c.lr - 0.3).abs() <= 0.1 && (c.bound_a - 2.0).abs() <= 0.1
}

#[test]
fn concave_optimum_is_found_by_majority_of_seeds() {
    let cfg = GaConfig::default();
    let hits = (0..5)
        .filter(|&seed| near_optimum(&tune_bound(&cfg, &concave, &mut Rng::new(seed)).unwrap().best))
        .count();
    assert!(hits >= 3, "{hits}/5 seeds reached the optimum");
}

#[test]
fn initial_population_size_bounds_and_determinism() {
    let cfg = GaConfig::default();
    let pop = init_population(&cfg, &mut Rng::new(7));
    assert_eq!(pop.len(), 10);
    for c in &pop {
        assert!(cfg.lr_bounds.contains(c.lr) && cfg.a_bounds.contains(c.bound_a));
    }
    assert_eq!(pop, init_population(&cfg, &mut Rng::new(7)));
}

#[test]
fn zero_width_bounds_give_identical_chromosomes() {
    let cfg = GaConfig {
        lr_bounds: GeneBounds::new(0.1, 0.1).unwrap(),
        a_bounds: GeneBounds::new(3.0, 3.0).unwrap(),
        ..GaConfig::default()
    };
    let pop = init_population(&cfg, &mut Rng::new(1));
    assert!(pop.iter().all(|c| c.lr == 0.1 && c.bound_a == 3.0));
}

fn scored(lr: f64, a: f64) -> Chromosome {
    Chromosome {
        fitness: Some(concave(lr, a)),
        ..Chromosome::new(lr, a)
    }
}

#[test]
fn optimum_survives_evolution() {
    let cfg = GaConfig::default();
    let mut pop: Vec<Chromosome> = (0..9).map(|i| scored(0.01 * i as f64, 5.0)).collect();
    pop.push(scored(0.3, 2.0));
    let next = evolve(&pop, &cfg, &mut Rng::new(2)).unwrap();
    assert_eq!(next.len(), 10);
    assert!(next.contains(&scored(0.3, 2.0)));
}

#[test]
fn no_mutation_and_identical_parents_copy_genes() {
    let cfg = GaConfig {
        mutation_rate: 0.0,
        ..GaConfig::default()
    };
    let pop = vec![scored(0.2, 4.0); 10];
    for c in evolve(&pop, &cfg, &mut Rng::new(3)).unwrap() {
        assert_eq!((c.lr, c.bound_a), (0.2, 4.0));
    }
}

#[test]
fn evolve_requires_fitness() {
    let pop = vec![Chromosome::new(0.1, 1.0); 4];
    assert!(evolve(&pop, &GaConfig::default(), &mut Rng::new(0)).is_err());
}

#[test]
fn zero_generations_and_history_length() {
    let cfg = GaConfig {
        generations: 0,
        ..GaConfig::default()
    };
    let out = tune_bound(&cfg, &concave, &mut Rng::new(1)).unwrap();
    assert_eq!(out.history.len(), 1);
    let best0 = out.populations[0]
        .iter()
        .map(|c| c.fitness.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.fitness, Some(best0));

    let out = tune_bound(&GaConfig::default(), &concave, &mut Rng::new(1)).unwrap();
    assert_eq!(out.history.len(), 11);
    let mut csv = Vec::new();
    write_history_csv(&out.history, &mut csv).unwrap();
    assert!(String::from_utf8(csv)
        .unwrap()
        .starts_with("generation,best_fitness,best_lr,best_a,epsilon\n"));
}

#[test]
fn parallel_evaluation_matches_serial() {
    let serial = tune_bound(&GaConfig::default(), &concave, &mut Rng::new(9)).unwrap();
    let cfg = GaConfig {
        jobs: 3,
        ..GaConfig::default()
    };
    let parallel = tune_bound(&cfg, &concave, &mut Rng::new(9)).unwrap();
    assert_eq!(serial.history, parallel.history);
}

fn tiny_digits(n: usize, seed: u64) -> Dataset {
    let x = gaussian(&mut Rng::new(seed), &[n, 1, 28, 28], 0.5, 0.3).unwrap();
    let y = (0..n).map(|i| (i % 10) as u8).collect();
    Dataset::new(x, y, DatasetName::Mnist).unwrap()
}

fn budget<'a>(train: &'a Dataset, test: &'a Dataset) -> DpBudget<'a> {
    DpBudget {
        train,
        test,
        arch: Arch::MnistCnn,
        model: ModelOptions::new(ActivationKind::BoundedRelu, Some(2.0)),
        dp: DpConfig {
            batch_size: 16,
            sampling: Sampling::Poisson,
            ..DpConfig::default()
        },
        schedule: vec![SchedulePhase { sigma: 1.0, epochs: 1 }],
    }
}

#[test]
fn dp_fitness_is_deterministic_and_untrained_at_zero_lr() {
    let train = tiny_digits(64, 1);
    let test = tiny_digits(200, 2);
    let b = budget(&train, &test);
    let e1 = b.evaluate(0.1, 2.0, Rng::new(5));
    let e2 = b.evaluate(0.1, 2.0, Rng::new(5));
    assert_eq!(e1, e2);
    assert!(e1.epsilon.is_finite() && e1.epsilon > 0.0);
    // Labels cycle through 10 classes, so a constant predictor scores 10%.
    let frozen = b.evaluate(0.0, 2.0, Rng::new(5));
    assert!(!frozen.diverged);
    assert!((frozen.fitness - 0.1).abs() <= 0.1, "{}", frozen.fitness);
}

#[test]
fn divergent_fitness_run_scores_zero() {
    let train = tiny_digits(64, 1);
    let test = tiny_digits(20, 2);
    let e = budget(&train, &test).evaluate(f64::MAX, 2.0, Rng::new(1));
    assert!(e.diverged);
    assert_eq!(e.fitness, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elitism_and_bounds_hold_every_generation(seed in any::<u64>(), wobble in 0.0f64..3.0) {
        let fitness = move |lr: f64, a: f64| concave(lr, a) + wobble * (7.0 * lr).sin() * (a).cos();
        let cfg = GaConfig::default();
        let out = tune_bound(&cfg, &fitness, &mut Rng::new(seed)).unwrap();
        for w in out.history.windows(2) {
            prop_assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        for pop in &out.populations {
            prop_assert_eq!(pop.len(), cfg.population);
            for c in pop {
                prop_assert!(cfg.lr_bounds.contains(c.lr) && cfg.a_bounds.contains(c.bound_a));
            }
        }
        let again = tune_bound(&cfg, &fitness, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(out.history, again.history);
    }
}

#[test]
#[ignore = "diagnostic: optimum hit rate over many seeds"]
fn concave_hit_rate() {
    let hits = (0..200)
        .filter(|&s| near_optimum(&tune_bound(&GaConfig::default(), &concave, &mut Rng::new(s)).unwrap().best))
        .count();
    println!("hit rate {hits}/200");
}

