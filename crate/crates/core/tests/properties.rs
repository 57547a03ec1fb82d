use proptest::prelude::*;

use tautune::es::{run_es_traced, score_of, update_sigma, EsConfig, ObjectiveSpec};
use tautune::llm::ScriptedBackend;
use tautune::report::{render_csv, render_plot};
use tautune::tuning::{best_trial, run_session, EsTemplate, SessionConfig, SessionStatus, Trial, TuningSession};

fn es_config() -> impl Strategy<Value = EsConfig> {
    (0.05f64..3.0, 0.1f64..3.0, 1usize..8, 1u64..300, any::<u64>()).prop_map(|(tau, sigma0, dim, gens, seed)| {
        EsConfig { tau, sigma0, dimension: dim, max_generations: gens, init_low: -5.0, init_high: 5.0, seed }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_success_balances_four_failures(sigma in 1e-8f64..1e4, tau in 1e-6f64..5.0) {
        let balance = update_sigma(sigma, tau, true) * update_sigma(sigma, tau, false).powi(4);
        prop_assert!(((balance - sigma.powi(5)) / sigma.powi(5)).abs() <= 1e-12);
    }

    #[test]
    fn accepted_objective_never_increases(cfg in es_config()) {
        let objective = ObjectiveSpec::sphere(cfg.dimension);
        let mut trace = Vec::new();
        let result = run_es_traced(&cfg, &objective, &mut |_, f, sigma, _| trace.push((f, sigma))).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1].0 <= w[0].0));
        prop_assert!(trace.iter().all(|&(_, s)| s > 0.0));
        prop_assert!(result.final_sigma > 0.0);
        prop_assert!(result.best_f >= 0.0);
        prop_assert_eq!(result.score, score_of(result.best_f).unwrap());
        prop_assert_eq!(result.generations_run, cfg.max_generations);
        prop_assert_eq!(trace.len() as u64, cfg.max_generations);
    }

    #[test]
    fn runs_are_pure(cfg in es_config()) {
        let objective = ObjectiveSpec::sphere(cfg.dimension);
        let a = run_es_traced(&cfg, &objective, &mut |_, _, _, _| {}).unwrap();
        let b = run_es_traced(&cfg, &objective, &mut |_, _, _, _| {}).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn best_trial_is_scale_invariant(
        means in proptest::collection::vec(-50f64..80.0, 1..12),
        factor in 0.01f64..100.0,
    ) {
        let trials: Vec<Trial> = means
            .iter()
            .enumerate()
            .map(|(i, &m)| Trial { tau: 0.5 + 0.1 * i as f64, results: Vec::new(), mean_score: m, std_score: 0.0 })
            .collect();
        let mut plain = TuningSession::new(SessionConfig::default());
        let mut scaled = TuningSession::new(SessionConfig::default());
        for t in &trials {
            plain.push_trial(t.clone());
            scaled.push_trial(Trial { mean_score: t.mean_score * factor, ..t.clone() });
        }
        prop_assert_eq!(best_trial(&plain).unwrap().tau, best_trial(&scaled).unwrap().tau);
        prop_assert_eq!(plain.best_tau, scaled.best_tau);
    }

    #[test]
    fn plot_and_csv_agree(means in proptest::collection::vec(0f64..80.0, 2..12)) {
        let trials: Vec<Trial> = means
            .iter()
            .enumerate()
            .map(|(i, &m)| Trial { tau: 1.5 - 0.1 * i as f64, results: Vec::new(), mean_score: m, std_score: 1.0 })
            .collect();
        let csv = render_csv(&trials).unwrap();
        let svg = render_plot(&trials, None).unwrap();
        let rows: Vec<(f64, f64)> = csv
            .lines()
            .skip(1)
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                (cols[0].parse().unwrap(), cols[1].parse().unwrap())
            })
            .collect();
        let points: Vec<(f64, f64)> = svg
            .lines()
            .filter(|l| l.contains(r#"class="point""#))
            .map(|l| (attr(l, "data-tau"), attr(l, "data-fitness")))
            .collect();
        prop_assert_eq!(&rows, &points);
        prop_assert!(rows.windows(2).all(|w| w[0].0 < w[1].0));
        for (row, trial) in rows.iter().zip(trials.iter().rev()) {
            prop_assert_eq!(row.0, trial.tau);
            prop_assert_eq!(row.1, trial.mean_score);
        }
    }
}

fn attr(line: &str, name: &str) -> f64 {
    let start = line.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
    let end = start + line[start..].find('"').unwrap();
    line[start..end].parse().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Completed sessions have exactly `budget` distinct trials and log every
    /// backend call once, in order.
    #[test]
    fn completed_sessions_respect_budget_and_uniqueness(
        proposals in proptest::collection::vec(prop_oneof![Just(0.9f64), Just(1.0), 0.3f64..2.0], 1..6),
        budget in 1u32..5,
    ) {
        let responses: Vec<String> = proposals
            .iter()
            .cycle()
            .take(3 * budget as usize)
            .map(|t| format!("tau = {t}"))
            .collect();
        let total = responses.len();
        let mut backend = ScriptedBackend::new(responses);
        let cfg = SessionConfig {
            budget,
            replicates: 1,
            es: EsTemplate { max_generations: 10, ..EsTemplate::default() },
            ..SessionConfig::default()
        };
        let tol = cfg.duplicate_tolerance;
        let session = run_session(cfg, &mut backend, None).unwrap();
        prop_assert_eq!(session.status, SessionStatus::Completed);
        prop_assert_eq!(session.trials.len(), budget as usize);
        for (i, a) in session.trials.iter().enumerate() {
            for b in &session.trials[i + 1..] {
                prop_assert!((a.tau - b.tau).abs() > tol);
            }
        }
        prop_assert_eq!(session.exchanges.len(), total - backend.remaining());
        prop_assert!(session.exchanges.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }
}

#[test]
fn monotone_fitness_gives_monotone_marker_heights() {
    let trials: Vec<Trial> = (0..10)
        .map(|i| Trial { tau: 0.6 + 0.1 * i as f64, results: Vec::new(), mean_score: 10.0 + i as f64, std_score: 0.0 })
        .collect();
    let svg = render_plot(&trials, Some(trials[3].tau)).unwrap();
    let heights: Vec<f64> = svg.lines().filter(|l| l.contains(r#"class="point""#)).map(|l| attr(l, "cy")).collect();
    assert_eq!(heights.len(), 10);
    // Larger fitness is drawn higher, i.e. at a smaller y.
    assert!(heights.windows(2).all(|w| w[1] < w[0]));
    let best: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="best""#)).collect();
    assert_eq!(best.len(), 1);
    assert!((attr(best[0], "data-tau") - 0.9).abs() < 1e-9);
}

#[test]
fn highlight_lands_on_its_point() {
    let trials: Vec<Trial> = [0.6, 0.8, 0.95, 1.2, 1.5]
        .iter()
        .enumerate()
        .map(|(i, &tau)| Trial {
            tau,
            results: Vec::new(),
            mean_score: [50.0, 56.0, 58.0, 55.0, 52.0][i],
            std_score: 0.0,
        })
        .collect();
    let svg = render_plot(&trials, Some(0.95)).unwrap();
    let best: Vec<&str> = svg.lines().filter(|l| l.contains(r#"class="best""#)).collect();
    assert_eq!(best.len(), 1);
    assert_eq!(attr(best[0], "data-tau"), 0.95);
    let point = svg.lines().find(|l| l.contains(r#"data-tau="0.95""#) && l.contains(r#"class="point""#)).unwrap();
    assert_eq!(attr(best[0], "cx"), attr(point, "cx"));
}
