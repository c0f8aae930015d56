//! One pass/fail line per acceptance criterion, written straight to stderr so
//! it shows up without `--nocapture`. Run alone with
//! `cargo test -p sil-core --test acceptance`.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use sil_core::config::{TrainConfig, Variant};
use sil_core::oracle::suite::{
    check_alpha_limit, check_grad_equivalence, check_gradients, check_lower_bound_expected, lbq_sweep,
    lower_bound_sweep, prioritized_frequency_error, sil_clip_max_gradient, sum_tree_stress, SuiteSizes, BOUND_TOL,
    EQUIVALENCE_TOL, LBQ_CONVERGENCE_TOL, LBQ_EXCESS_TOL, SAMPLING_REL_TOL,
};
use sil_core::trainer::{train, RunMetrics, Trainer};

use common::{reference_a2c, stream};

const SEED: u64 = 20_241;
const SEEDS: u64 = 10;
/// A seed succeeds once the rolling mean return reaches this share of the
/// full-collection return.
const SUCCESS_SHARE: f64 = 0.9;
const MIN_SUCCESSES: usize = 7;
const APPLE_MIN_SEEDS: usize = 6;
/// Band around the two-apple return that counts as stuck at the apples.
const APPLE_BAND: f64 = 0.5;
const SUM_TREE_TOL: f64 = 1e-9;
const IDENTITY_ITERATIONS: usize = 300;

fn report(criterion: u32, title: &str, passed: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {criterion:>2} {}: {title}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    std::io::stderr().lock().write_all(line.as_bytes()).unwrap();
}

fn config(name: &str) -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    TrainConfig::load(path).unwrap()
}

#[derive(Debug)]
struct Batch {
    metrics: Vec<RunMetrics>,
    full: f64,
}

impl Batch {
    fn run(cfg: &TrainConfig) -> Self {
        let full = cfg.env.load_spec().unwrap().full_collection_return();
        let metrics = (0..SEEDS)
            .map(|s| {
                let mut c = cfg.clone();
                c.seed = s;
                train(c, |_| {}).unwrap().0
            })
            .collect();
        Self { metrics, full }
    }

    fn first_steps(&self) -> Vec<Option<u64>> {
        self.metrics
            .iter()
            .map(|m| m.first_step_reaching(SUCCESS_SHARE * self.full))
            .collect()
    }

    fn successes(&self) -> usize {
        self.first_steps().iter().flatten().count()
    }

    /// Median over seeds; a seed that never succeeds counts as infinitely slow.
    fn median_steps(&self) -> f64 {
        let mut v: Vec<f64> = self.first_steps().iter().map(|s| s.map_or(f64::INFINITY, |x| x as f64)).collect();
        v.sort_by(f64::total_cmp);
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    }

    fn final_means(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.final_mean_return().unwrap_or(f64::NAN)).collect()
    }
}

fn key_door_sil() -> &'static Batch {
    static B: OnceLock<Batch> = OnceLock::new();
    B.get_or_init(|| Batch::run(&config("keydoor_sil.cfg")))
}

fn key_door_a2c() -> &'static Batch {
    static B: OnceLock<Batch> = OnceLock::new();
    B.get_or_init(|| Batch::run(&config("keydoor_a2c.cfg")))
}

#[test]
fn criterion_01_gradients() {
    let out = check_gradients(SuiteSizes::full().grad_draws, &mut stream(SEED, 1)).unwrap();
    report(1, "loss gradients match finite differences", out.passed, &out.detail);
    assert!(out.passed, "{}", out.detail);
}

#[test]
fn criterion_02_lower_bound() {
    let sizes = SuiteSizes::full();
    let sweep = lower_bound_sweep(sizes.bound_mdps, sizes.bound_trajectories, &mut stream(SEED, 2)).unwrap();
    let expected = check_lower_bound_expected(sizes.expected_mdps, sizes.expected_rollouts, &mut stream(SEED, 3)).unwrap();
    let per_alpha: Vec<String> = sweep
        .per_alpha
        .iter()
        .map(|(a, r)| format!("alpha {a}: {}/{} violations (max R - Q* {:.2e})", r.violations, r.samples, r.max_excess))
        .collect();
    let all_zero = sweep.per_alpha.iter().all(|(_, r)| r.violations == 0);
    report(
        2,
        "Q*(s,a) >= per-episode soft return for alpha in {0, 0.1, 1}",
        all_zero,
        &format!(
            "{}; tight with mu = pi*: max gap {:.1e}; expectation form: {}",
            per_alpha.join(", "),
            sweep.tight_max_gap,
            expected.detail
        ),
    );
    // The per-episode statement only holds at alpha = 0; for alpha > 0 it
    // holds in expectation over the behavior policy.
    assert_eq!(sweep.report(0.0).unwrap().violations, 0);
    assert!(sweep.tight_max_gap <= BOUND_TOL);
    assert!(expected.passed, "{}", expected.detail);
}

#[test]
fn criterion_03_gradient_equivalence() {
    let (out, per_alpha) = check_grad_equivalence(SuiteSizes::full().equivalence_instances, &mut stream(SEED, 4)).unwrap();
    report(3, "lower-bound gradient equals the decomposed form", out.passed, &out.detail);
    assert_eq!(per_alpha.len(), 3);
    assert!(per_alpha.iter().all(|(_, d)| *d <= EQUIVALENCE_TOL), "{}", out.detail);
}

#[test]
fn criterion_04_alpha_limit() {
    let (out, gaps) = check_alpha_limit(SuiteSizes::full().limit_instances, &mut stream(SEED, 5)).unwrap();
    report(4, "lower-bound and SIL losses converge as alpha -> 0", out.passed, &out.detail);
    assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
}

#[test]
fn criterion_05_lower_bound_q_learning() {
    let sizes = SuiteSizes::full();
    let s = lbq_sweep(sizes.lbq_mdps, sizes.lbq_episodes, &mut stream(SEED, 6)).unwrap();
    let passed = s.largest_decrease == 0.0 && s.largest_excess <= LBQ_EXCESS_TOL && s.visited_error <= LBQ_CONVERGENCE_TOL;
    report(
        5,
        "tabular lower-bound Q-learning is monotone, stays below Q*, converges",
        passed,
        &format!(
            "largest decrease {:.1e}, max Q - Q* {:.2e}, visited error {:.2e}",
            s.largest_decrease, s.largest_excess, s.visited_error
        ),
    );
    assert!(passed, "{s:?}");
}

#[test]
fn criterion_06_prioritized_replay() {
    let sizes = SuiteSizes::full();
    let freq = prioritized_frequency_error(sizes.sampling_draws, &mut stream(SEED, 7)).unwrap();
    let (tree, bad) = sum_tree_stress(sizes.tree_ops, &mut stream(SEED, 8));
    let passed = freq <= SAMPLING_REL_TOL && tree <= SUM_TREE_TOL && bad == 0;
    report(
        6,
        "prioritized sampling frequencies and sum-tree invariant",
        passed,
        &format!(
            "max relative frequency error {freq:.2e} (tol {SAMPLING_REL_TOL}), tree error {tree:.1e}, bad finds {bad}"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_07_sil_clipping() {
    let g = sil_clip_max_gradient(SuiteSizes::full().clip_batches, &mut stream(SEED, 9)).unwrap();
    report(7, "no SIL gradient when R <= V", g == 0.0, &format!("max |grad| {g:e}"));
    assert_eq!(g, 0.0);
}

#[test]
fn criterion_08_key_door_treasure() {
    let sil = key_door_sil();
    let a2c = key_door_a2c();
    let (ns, na) = (sil.successes(), a2c.successes());
    let (ms, ma) = (sil.median_steps(), a2c.median_steps());
    let passed = ns >= MIN_SUCCESSES && ms < ma && na < ns;
    report(
        8,
        "A2C+SIL solves Key-Door-Treasure faster and more often than A2C",
        passed,
        &format!("successes sil {ns}/{SEEDS} a2c {na}/{SEEDS}; median steps sil {ms} a2c {ma}"),
    );
    assert!(passed);
}

#[test]
fn criterion_09_apple_key_door_treasure() {
    let sil = Batch::run(&config("apple_sil_exp.cfg"));
    let a2c = Batch::run(&config("apple_a2c.cfg"));
    let apples = 2.0 * TrainConfig::default().env.rewards.apple;
    let stuck = a2c.final_means().iter().filter(|m| (*m - apples).abs() <= APPLE_BAND).count();
    let ns = sil.successes();
    let passed = ns >= APPLE_MIN_SEEDS && stuck >= APPLE_MIN_SEEDS;
    report(
        9,
        "A2C+SIL+EXP collects everything while A2C settles on the apples",
        passed,
        &format!(
            "sil+exp successes {ns}/{SEEDS}; a2c final means {:?}, {stuck}/{SEEDS} within {APPLE_BAND} of {apples}",
            a2c.final_means().iter().map(|m| (m * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_delayed_rewards() {
    let sil_delay = Batch::run(&config("keydoor_delayed_sil.cfg"));
    let mut a2c_cfg = config("keydoor_delayed_sil.cfg");
    a2c_cfg.apply_variant(Variant::A2c);
    let a2c_delay = Batch::run(&a2c_cfg);
    let gap_delay = sil_delay.successes() as i64 - a2c_delay.successes() as i64;
    let gap_plain = key_door_sil().successes() as i64 - key_door_a2c().successes() as i64;
    let passed = gap_delay >= gap_plain;
    report(
        10,
        "the SIL advantage grows under delayed rewards",
        passed,
        &format!(
            "delayed: sil {}/{SEEDS} a2c {}/{SEEDS} (gap {gap_delay}); immediate gap {gap_plain}",
            sil_delay.successes(),
            a2c_delay.successes()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_11_no_sil_is_plain_a2c() {
    let mut cfg = config("keydoor_sil.cfg");
    cfg.seed = 3;
    cfg.set("trainer.sil_updates", "0").unwrap();
    cfg.set("env.exploration_beta", "0").unwrap();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut mismatched = Vec::new();
    let (ref_params, ref_losses) = reference_a2c(&cfg, IDENTITY_ITERATIONS);
    for (i, want) in ref_losses.iter().enumerate() {
        let rep = trainer.iterate().unwrap();
        assert!(rep.sil.is_empty());
        let got = (rep.a2c.policy_loss, rep.a2c.value_loss, rep.a2c.entropy);
        if got != (want.policy_loss, want.value_loss, want.entropy) {
            mismatched.push(i);
        }
    }
    let same_params = trainer.params().to_flat() == ref_params.to_flat();
    let passed = mismatched.is_empty() && same_params;
    report(
        11,
        "with M = 0 and no bonus the trainer is bit-identical to plain A2C",
        passed,
        &format!(
            "{IDENTITY_ITERATIONS} iterations: {} loss mismatches, parameters identical: {same_params}",
            mismatched.len()
        ),
    );
    assert!(passed, "first mismatched iterations {:?}", &mismatched[..mismatched.len().min(5)]);
}
