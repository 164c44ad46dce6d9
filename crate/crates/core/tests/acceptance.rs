//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always show.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rewardlab::analysis::{proxy_true_correlation, run_sweep, CorrelationOptions, SweepAxis, SweepBase, SweepResult};
use rewardlab::covid::{CovidAction, CovidEpisode, SeirParams};
use rewardlab::io::{roc_csv, scores_csv, sweep_csv, table_csv};
use rewardlab::policy::PolicySpec;
use rewardlab::polynomaly::{
    anomaly_score, auroc, bench_eval, bench_generate, hellinger, jsd, max_f1, Aggregate, BenchConfig, Benchmark,
    DetectorConfig, DetectorReport, Distance, Label,
};
use rewardlab::rewards::{RewardId, RewardPair};
use rewardlab::rollout::{EnvConfig, EnvKind};
use rewardlab::traffic::{Edge, TrafficConfig, TrafficState};
use rewardlab::trainer::TrainConfig;

// Tolerances and budgets.
const DIVERGENCE_TOL: f64 = 1e-12;
const FIXTURE_TOL: f64 = 1e-6;
const CONSERVATION_REL_TOL: f64 = 1e-9;
const DEGENERATE_RHO_TOL: f64 = 1e-9;
const MIN_AUROC: f64 = 0.7;
const KERNEL_BUDGET: Duration = Duration::from_secs(5);
const SIM_BUDGET: Duration = Duration::from_secs(60);
const SWEEP_BUDGET: Duration = Duration::from_secs(30 * 60);
const BENCH_BUDGET: Duration = Duration::from_secs(45 * 60);

// Experiment settings shared by the sweep, correlation and benchmark checks.
const SEED: u64 = 0;
const CORRELATION_SEED: u64 = 5;
const DETECT_SEED: u64 = 1;
const GENERATIONS: usize = 30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_categorical(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Roughly a third of the entries are exact zeros to exercise 0·ln 0.
    let mut v: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let total: f64 = v.iter().sum();
    v.iter().map(|x| x / total).collect()
}

fn plogp(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Entropy form: H(M) − ½ (H(P) + H(Q)).
fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut h_m = 0.0;
    let mut h_pq = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        h_m -= plogp(0.5 * (a + b));
        h_pq -= 0.5 * (plogp(a) + plogp(b));
    }
    h_m - h_pq
}

/// Bhattacharyya form: 1 − Σ √(p q).
fn hellinger_oracle(p: &[f64], q: &[f64]) -> f64 {
    1.0 - p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum::<f64>()
}

fn divergence_kernels() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=64);
        let p = random_categorical(&mut rng, n);
        let q = random_categorical(&mut rng, n);
        let dj = (jsd(&p, &q).unwrap() - jsd_oracle(&p, &q)).abs();
        let dh = (hellinger(&p, &q).unwrap() - hellinger_oracle(&p, &q)).abs();
        worst = worst.max(dj).max(dh);
    }
    let fj = jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    let fh = hellinger(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    let elapsed = t0.elapsed();
    let pass = worst <= DIVERGENCE_TOL
        && (fj - 0.215762).abs() <= FIXTURE_TOL
        && (fh - 0.292893).abs() <= FIXTURE_TOL
        && elapsed < KERNEL_BUDGET;
    outcome(
        pass,
        format!("max |err| {worst:.3e}, jsd fixture {fj:.6}, hellinger fixture {fh:.6}, {elapsed:.2?}"),
    )
}

/// Midrank (Mann-Whitney) count, returned as twice the number of wins.
fn twice_rank_wins(scores: &[f64], labels: &[bool]) -> u64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled midranks keep everything integral.
    let mut rank2 = vec![0u64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            rank2[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let sum2: u64 = (0..scores.len()).filter(|&k| labels[k]).map(|k| rank2[k]).sum();
    sum2 - pos * (pos + 1)
}

fn f1_scan_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut best = 0.0f64;
    for &t in scores {
        let tp = (0..scores.len()).filter(|&k| labels[k] && scores[k] >= t).count();
        let fp = (0..scores.len()).filter(|&k| !labels[k] && scores[k] >= t).count();
        let positives = labels.iter().filter(|&&l| l).count();
        if tp > 0 {
            best = best.max((2 * tp) as f64 / (tp + fp + positives) as f64);
        }
    }
    best
}

fn metric_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=20);
        // A small score alphabet forces plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) * 0.25).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let pos = labels.iter().filter(|&&l| l).count() as u64;
        let neg = n as u64 - pos;
        let want_auc = twice_rank_wins(&scores, &labels) as f64 / (2 * pos * neg) as f64;
        if auroc(&scores, &labels).unwrap() != want_auc {
            mismatches += 1;
        }
        if max_f1(&scores, &labels).unwrap() != f1_scan_oracle(&scores, &labels) {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        mismatches == 0 && elapsed < KERNEL_BUDGET,
        format!("{mismatches} mismatches over 1000 instances, {elapsed:.2?}"),
    )
}

fn simulator_invariants() -> Outcome {
    let t0 = Instant::now();
    let mut worst_drift = 0.0f64;
    for seed in 0..50u64 {
        let params = SeirParams {
            seed,
            horizon: 200,
            ..SeirParams::default()
        };
        let mut ep = CovidEpisode::new(&params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            ep.step(CovidAction::from_index(rng.random_range(0..3)).unwrap());
            let drift = (ep.state.total() - params.population).abs() / params.population;
            worst_drift = worst_drift.max(drift);
        }
    }
    let covid_time = t0.elapsed();

    let t1 = Instant::now();
    let mut violations = 0usize;
    let mut min_gap = f64::INFINITY;
    let mut min_velocity = f64::INFINITY;
    for seed in 0..100u64 {
        let cfg = TrafficConfig {
            seed,
            spawn_jitter: 5.0,
            ..TrafficConfig::default()
        };
        let mut state = TrafficState::reset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for _ in 0..cfg.horizon {
            if state.is_done() {
                break;
            }
            let [lo, hi] = cfg.av_accel_bounds;
            if state.step(rng.random_range(lo..=hi)).is_err() {
                violations += 1;
                break;
            }
            for edge in [Edge::Main, Edge::Ramp] {
                let mut on: Vec<(f64, f64)> = state
                    .vehicles
                    .iter()
                    .filter(|v| v.edge == edge)
                    .map(|v| (v.position, v.velocity))
                    .collect();
                on.sort_by(|a, b| a.0.total_cmp(&b.0));
                for w in on.windows(2) {
                    let gap = w[1].0 - w[0].0 - cfg.car_length;
                    min_gap = min_gap.min(gap);
                    if gap.is_nan() || gap <= 0.0 {
                        violations += 1;
                    }
                }
                for &(_, v) in &on {
                    min_velocity = min_velocity.min(v);
                    if v.is_nan() || v < 0.0 {
                        violations += 1;
                    }
                }
            }
        }
    }
    let traffic_time = t1.elapsed();
    let pass =
        worst_drift <= CONSERVATION_REL_TOL && violations == 0 && covid_time < SIM_BUDGET && traffic_time < SIM_BUDGET;
    outcome(
        pass,
        format!(
            "SEIR max relative drift {worst_drift:.3e} ({covid_time:.2?}); traffic {violations} violations, \
             min gap {min_gap:.3} m, min velocity {min_velocity:.3} m/s ({traffic_time:.2?})"
        ),
    )
}

fn sweep_sizes() -> Vec<Vec<usize>> {
    vec![vec![], vec![4], vec![16], vec![64]]
}

fn capacity_sweep() -> SweepResult {
    let env = EnvConfig::default_for(EnvKind::Traffic);
    let policy = PolicySpec::new(EnvKind::Traffic, vec![]).with_bounds(env.action_bounds());
    let train = TrainConfig {
        generations: GENERATIONS,
        seed: SEED,
        ..TrainConfig::default()
    };
    let mut base = SweepBase::new(env, policy, train);
    base.eval_rollouts = 5;
    let rewards = RewardPair::for_proxy(RewardId::TrafficOntological);
    run_sweep(&SweepAxis::ModelSize(sweep_sizes()), &base, &rewards, SEED).unwrap()
}

fn misalignment(sweep: &SweepResult, elapsed: Duration) -> Outcome {
    let evals: Vec<_> = sweep
        .rows
        .iter()
        .map(|r| r.eval.expect("every sweep row trains"))
        .collect();
    let (small, large) = (evals[0], evals[evals.len() - 1]);
    let flag = sweep.phase_transition(0.5);
    let table: Vec<String> = sweep
        .rows
        .iter()
        .zip(&evals)
        .map(|(r, e)| format!("{} {:.1}/{:.2}", r.axis_value, e.mean_proxy, e.mean_true))
        .collect();
    let pass = sweep.rows.len() >= 4
        && large.mean_proxy > small.mean_proxy
        && large.mean_true < small.mean_true
        && flag.is_some()
        && elapsed <= SWEEP_BUDGET;
    outcome(
        pass,
        format!(
            "proxy/true {}; phase transition {flag:?}; {elapsed:.1?}",
            table.join(", ")
        ),
    )
}

fn correlation_protocol(sweep: &SweepResult) -> Outcome {
    let row = sweep.rows.last().unwrap();
    let (run, spec) = (row.run.as_ref().unwrap(), row.spec.as_ref().unwrap());
    let env = EnvConfig::default_for(EnvKind::Traffic);
    let opts = CorrelationOptions::default();
    let pair = RewardPair::for_proxy(RewardId::TrafficOntological);
    let rho = |params| proxy_true_correlation(spec, params, &env, &pair, CORRELATION_SEED, &opts).map(|c| c.rho);
    let trained = rho(&run.trained().params);
    let early = rho(&run.early().params);
    let degenerate = proxy_true_correlation(
        spec,
        &run.trained().params,
        &env,
        &RewardPair::degenerate(EnvKind::Traffic),
        CORRELATION_SEED,
        &opts,
    )
    .map(|c| c.rho);
    let pass = match (&trained, &early, &degenerate) {
        (Ok(t), Ok(e), Ok(d)) => t <= e && (d - 1.0).abs() <= DEGENERATE_RHO_TOL,
        _ => false,
    };
    let show = |r: &rewardlab::Result<f64>| match r {
        Ok(v) => format!("{v:.4}"),
        Err(e) => format!("undefined ({e})"),
    };
    outcome(
        pass,
        format!(
            "model {}: trained rho {} vs early rho {} over {} rollouts; degenerate rho {}",
            row.axis_value,
            show(&trained),
            show(&early),
            opts.rollouts,
            show(&degenerate)
        ),
    )
}

fn bench_sizes() -> Vec<Vec<usize>> {
    vec![
        vec![],
        vec![4],
        vec![16],
        vec![64],
        vec![16, 16],
        vec![48, 48],
        vec![64, 64],
        vec![128, 128],
    ]
}

struct BenchRun {
    bench: Benchmark,
    reports: Vec<DetectorReport>,
}

fn misweighting_bench() -> BenchRun {
    let env = EnvConfig::default_for(EnvKind::Traffic);
    let train = TrainConfig {
        generations: GENERATIONS,
        ..TrainConfig::for_env(EnvKind::Traffic)
    };
    let cfg = BenchConfig::new(env, RewardId::TrafficMisweighting, bench_sizes(), train);
    let bench = bench_generate(&cfg, SEED).unwrap();
    let reports = DetectorConfig::all()
        .iter()
        .map(|d| bench_eval(&bench, d, DETECT_SEED).unwrap())
        .collect();
    BenchRun { bench, reports }
}

fn polynomaly_end_to_end(run: &BenchRun, elapsed: Duration) -> Outcome {
    let m = &run.bench.manifest;
    let problematic = m.entries.iter().filter(|e| e.label == Label::Problematic).count();
    let acceptable = m.entries.iter().filter(|e| e.label == Label::Acceptable).count();
    let jsd_mean = DetectorConfig::new(Distance::Jsd, Aggregate::Mean).name();
    let auc = run
        .reports
        .iter()
        .find(|r| r.detector == jsd_mean)
        .and_then(|r| r.roc.as_ref())
        .map(|r| r.auroc);
    let self_scores: Vec<f64> = DetectorConfig::all()
        .iter()
        .map(|d| {
            anomaly_score(
                &run.bench.trusted,
                &run.bench.trusted,
                &m.env,
                m.sampling(),
                d,
                DETECT_SEED,
            )
            .unwrap()
        })
        .collect();
    let self_zero = self_scores.iter().all(|&s| s == 0.0);
    let pass = problematic >= 3
        && acceptable >= 3
        && auc.is_some_and(|a| a >= MIN_AUROC)
        && self_zero
        && elapsed <= BENCH_BUDGET;
    outcome(
        pass,
        format!(
            "{problematic} problematic, {acceptable} acceptable; jsd-mean auroc {auc:?}; \
             self-scores {self_scores:?}; {elapsed:.1?}"
        ),
    )
}

fn bench_csvs(run: &BenchRun) -> Vec<Vec<u8>> {
    let mut out = vec![table_csv(&run.reports).unwrap()];
    for r in &run.reports {
        out.push(scores_csv(r).unwrap());
        if let Some(roc) = &r.roc {
            out.push(roc_csv(roc).unwrap());
        }
    }
    out
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        // libtest protocol: nothing to list, the suite runs as a whole.
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    record("1 divergence kernels", divergence_kernels());
    record("2 metric correctness", metric_correctness());
    record("3 simulator invariants", simulator_invariants());

    let t = Instant::now();
    let sweep = capacity_sweep();
    record("4 misalignment under capacity", misalignment(&sweep, t.elapsed()));
    record("5 correlation protocol", correlation_protocol(&sweep));

    let t = Instant::now();
    let bench = misweighting_bench();
    record("6 polynomaly end to end", polynomaly_end_to_end(&bench, t.elapsed()));

    let sweep_again = capacity_sweep();
    let bench_again = misweighting_bench();
    let same_sweep = sweep_csv(&sweep).unwrap() == sweep_csv(&sweep_again).unwrap();
    let same_bench = bench_csvs(&bench) == bench_csvs(&bench_again);
    record(
        "7 determinism",
        outcome(
            same_sweep && same_bench,
            format!("sweep CSV identical: {same_sweep}; benchmark CSVs identical: {same_bench}"),
        ),
    );

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        println!("acceptance: {} of {} criteria failed", failed.len(), results.len());
        std::process::exit(1);
    }
    println!("acceptance: all {} criteria passed", results.len());
}
