//! Acceptance suite. Prints one PASS/FAIL line per criterion, with the
//! measurements behind it indented underneath, and exits non-zero if any
//! criterion fails.
//!
//! Runs serially on the desk profile; expect tens of minutes on one core.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsity::experiments::{
    run_ablation_grid, run_discrimination, run_layer_sweep, run_sparsity_sweep, AblationAxis, ExperimentConfig,
    ExperimentKind, ExperimentResult, Profile, CONTROLS, METRIC_AVG_COEFF_NORM, METRIC_FINAL_LOSS, METRIC_NONZERO,
    METRIC_NORMALIZED_LOSS,
};
use sparsity::ingest::{labels_path, metadata_path, read_activations, read_metadata, write_activations, write_metadata};
use sparsity::metrics::{metric_avg_coeff_norm, metric_normalized_loss};
use sparsity::model::reconstruct;
use sparsity::solver::greedy_inclusion_delta;
use sparsity::synth::{gen_sparse_linear, SynthConfig};
use sparsity::{normalize_dictionary, ActivationSet, CoefficientSet};

const SWEEP_GRID: [f64; 3] = [4.0, 8.0, 16.0];
const SWEEP_TOLERANCE: f64 = 0.25;
const SWEEP_BUDGET: Duration = Duration::from_secs(15 * 60);
const DISCRIMINATION_D: usize = 128;
const DISCRIMINATION_MARGIN: f64 = 1.5;
const SMALL_D_MARGIN: f64 = 1.1;
const SMALL_D_A: f64 = 20.0;
const LARGE_D: usize = 512;
const M_TRUE_GRID: [f64; 3] = [8.0, 16.0, 32.0];
const M_TRUE_TOLERANCE: f64 = 0.30;
const IDENTITY_TOLERANCE: f64 = 1e-6;
const SCALE_TOLERANCE: f64 = 1e-9;
const GREEDY_INSTANCES: usize = 1000;
const SYNTHETIC_VE: f64 = 0.90;
const LAYER_VE: f64 = 0.98;
const SEED: u64 = 0;

#[derive(Default)]
struct Criterion {
    details: Vec<String>,
    ok: bool,
}

impl Criterion {
    fn new() -> Self {
        Self {
            details: Vec::new(),
            ok: true,
        }
    }

    fn check(&mut self, ok: bool, detail: String) {
        self.ok &= ok;
        self.details.push(format!("{} {detail}", if ok { "ok  " } else { "MISS" }));
    }

    fn report(self, name: &str) -> bool {
        println!("{} {name}", if self.ok { "PASS" } else { "FAIL" });
        for d in &self.details {
            println!("    {d}");
        }
        self.ok
    }
}

fn desk(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind, Profile::Desk);
    cfg.seed = SEED;
    cfg
}

fn label(a: f64) -> String {
    format!("sparse_a{:04}", a as u64)
}

fn metric(result: &ExperimentResult, table: &str, dataset: &str, name: &str) -> f64 {
    result.value(table, dataset, name).unwrap_or(f64::NAN)
}

/// S₁ and L_norm within `tol` of `a / 2` for every `a`.
fn tracking(c: &mut Criterion, result: &ExperimentResult, table: &str, grid: &[f64], tol: f64) {
    for &a in grid {
        let target = a / 2.0;
        for name in [METRIC_AVG_COEFF_NORM, METRIC_NORMALIZED_LOSS] {
            let v = metric(result, table, &label(a), name);
            let rel = (v - target) / target;
            c.check(
                rel.abs() <= tol,
                format!("{table} a={a} {name} = {v:.3}, target {target}, off by {:+.1}% (limit {:.0}%)", rel * 100.0, tol * 100.0),
            );
        }
    }
}

/// Every sparse S₁ and L_norm at most `1 / margin` of the smallest control.
fn separation(c: &mut Criterion, result: &ExperimentResult, table: &str, sparse: &[f64], margin: f64) {
    for name in [METRIC_AVG_COEFF_NORM, METRIC_NORMALIZED_LOSS] {
        let worst_sparse = sparse
            .iter()
            .map(|&a| metric(result, table, &label(a), name))
            .fold(f64::NEG_INFINITY, f64::max);
        let best_control = CONTROLS
            .iter()
            .map(|ctl| metric(result, table, ctl, name))
            .fold(f64::INFINITY, f64::min);
        let ratio = best_control / worst_sparse;
        c.check(
            ratio >= margin,
            format!("{table} {name}: min control {best_control:.3} / max sparse {worst_sparse:.3} = {ratio:.3} (need {margin})"),
        );
    }
}

/// A control value that does not clear the separation margin over the
/// sparse datasets.
fn overlap(c: &mut Criterion, result: &ExperimentResult, table: &str, sparse: &[f64], control: &str, name: &str) {
    let values: Vec<f64> = sparse.iter().map(|&a| metric(result, table, &label(a), name)).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let v = metric(result, table, control, name);
    c.check(
        v.is_finite() && v < DISCRIMINATION_MARGIN * hi,
        format!("{table} {control} {name} = {v:.3} overlaps sparse range [{lo:.3}, {hi:.3}] (below {DISCRIMINATION_MARGIN}x max)"),
    );
}

fn exact_identities() -> Criterion {
    let mut c = Criterion::new();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let gauss = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(rand_distr::StandardNormal)).collect() };

    let (n, d, m) = (200, 16, 48);
    let dict = normalize_dictionary(ndarray::Array2::from_shape_vec((d, m), gauss(&mut rng, d * m)).unwrap()).unwrap();
    let mut columns = vec![Vec::new(); n];
    for col in columns.iter_mut() {
        for i in 0..m {
            if rng.random::<f64>() < 0.1 {
                col.push((i, rng.random_range(0.05..3.0)));
            }
        }
    }
    let alpha = CoefficientSet::new(m, columns).unwrap();
    let x = ActivationSet::new(reconstruct(&dict, &alpha).unwrap()).unwrap();
    let lambda = 0.3;
    let l = metric_normalized_loss(&x, &dict, &alpha, lambda).unwrap().unwrap();
    let s1 = metric_avg_coeff_norm(&alpha, 1.0).unwrap();
    c.check(
        (l - s1).abs() <= IDENTITY_TOLERANCE,
        format!("zero residual: L_norm {l:.9} vs S1 {s1:.9} (diff {:.1e})", (l - s1).abs()),
    );

    let mut worst: f64 = 0.0;
    for _ in 0..GREEDY_INSTANCES {
        let dim = rng.random_range(1..64);
        let r = Array1::from(gauss(&mut rng, dim));
        let f = Array1::from(gauss(&mut rng, dim));
        let f = &f / f.dot(&f).sqrt();
        let lam = rng.random_range(0.0..2.0);
        let (coef, delta) = greedy_inclusion_delta(r.view(), f.view(), lam);
        worst = worst.max((delta + coef * coef).abs());
    }
    c.check(
        worst <= IDENTITY_TOLERANCE,
        format!("greedy step decrease vs -c^2 over {GREEDY_INSTANCES} instances: max diff {worst:.1e}"),
    );

    let mut worst_s: f64 = 0.0;
    let mut worst_l: f64 = 0.0;
    let noisy = ActivationSet::new(x.data().to_owned() + ndarray::Array2::from_shape_vec((n, d), gauss(&mut rng, n * d)).unwrap()).unwrap();
    for t in [1e-3, 0.37, 2.0, 1e3] {
        for p in [0.5, 1.0, 2.0] {
            let a = metric_avg_coeff_norm(&alpha, p).unwrap();
            let b = metric_avg_coeff_norm(&alpha.scaled(t).unwrap(), p).unwrap();
            worst_s = worst_s.max((a - b).abs() / a);
        }
        let a = metric_normalized_loss(&noisy, &dict, &alpha, lambda).unwrap().unwrap();
        let b = metric_normalized_loss(&noisy.scaled(t).unwrap(), &dict, &alpha.scaled(t).unwrap(), t * lambda)
            .unwrap()
            .unwrap();
        worst_l = worst_l.max((a - b).abs() / a);
    }
    c.check(worst_s <= SCALE_TOLERANCE, format!("S_p under rescaling: max relative change {worst_s:.1e}"));
    c.check(worst_l <= SCALE_TOLERANCE, format!("L_norm under rescaling: max relative change {worst_l:.1e}"));
    c
}

fn layer_fixture_ve(dir: &Path) -> Criterion {
    let mut c = Criterion::new();
    let mut cfg = desk(ExperimentKind::Layers);
    for (layer, a) in [4.0, 12.0, 4.0].into_iter().enumerate() {
        let (x, _) = gen_sparse_linear(&SynthConfig::new(32, a, 0.1, 4096, 100 + layer as u64)).unwrap();
        let path = dir.join(format!("layer_{layer}.actv"));
        write_activations(&path, &x).unwrap();
        let mut meta = sparsity::ingest::Sidecar::default();
        meta.set("layer", layer as i64);
        write_metadata(&path, &meta).unwrap();
        cfg.datasets.push(path);
    }
    match run_layer_sweep(&cfg) {
        Ok(result) => {
            for dataset in result.datasets("layers") {
                let ve = result
                    .row("layers", dataset, METRIC_NORMALIZED_LOSS)
                    .and_then(|r| r.variance_explained)
                    .unwrap_or(f64::NAN);
                c.check(ve >= LAYER_VE, format!("layer fixture {dataset}: variance explained {ve:.4} (need {LAYER_VE})"));
            }
        }
        Err(e) => c.check(false, format!("layer sweep failed: {e}")),
    }
    c
}

fn golden_round_trip(dir: &Path) -> Criterion {
    let mut c = Criterion::new();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden.actv");
    let out = dir.join("golden.actv");
    let outcome = read_activations(&src).and_then(|x| {
        write_activations(&out, &x)?;
        if let Some(meta) = read_metadata(&src)? {
            write_metadata(&out, &meta)?;
        }
        // Second generation from the copy.
        let again = read_activations(&out)?;
        write_activations(&dir.join("golden2.actv"), &again)
    });
    if let Err(e) = outcome {
        c.check(false, format!("round trip failed: {e}"));
        return c;
    }
    let same = |a: &Path, b: &Path| fs::read(a).ok().is_some_and(|x| fs::read(b).ok() == Some(x));
    c.check(same(&src, &out), "payload byte-identical".into());
    c.check(same(&src, &dir.join("golden2.actv")), "second generation byte-identical".into());
    c.check(same(&labels_path(&src), &labels_path(&out)), "labels byte-identical".into());
    c.check(same(&metadata_path(&src), &metadata_path(&out)), "sidecar byte-identical".into());
    c
}

fn main() -> ExitCode {
    // Tolerate the libtest flags cargo passes to every test target.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut all = true;

    // Desk sweep: tracking, ordering and variance explained share these fits.
    let mut cfg = desk(ExperimentKind::Sweep);
    cfg.a_grid = SWEEP_GRID.to_vec();
    let started = Instant::now();
    let sweep = run_sparsity_sweep(&cfg).expect("sweep");
    let sweep_time = started.elapsed();

    let mut c = Criterion::new();
    tracking(&mut c, &sweep, "sweep", &SWEEP_GRID, SWEEP_TOLERANCE);
    c.check(
        sweep_time <= SWEEP_BUDGET,
        format!("sweep runtime {:.1}s (budget {}s)", sweep_time.as_secs_f64(), SWEEP_BUDGET.as_secs()),
    );
    all &= c.report("sweep tracking at d=64, n=8192, a in {4, 8, 16}");

    let mut c = Criterion::new();
    for &a in &SWEEP_GRID {
        let n0 = metric(&sweep, "sweep", &label(a), METRIC_NONZERO);
        let s1 = metric(&sweep, "sweep", &label(a), METRIC_AVG_COEFF_NORM);
        c.check(n0 >= s1, format!("a={a}: N0 {n0:.3} >= S1 {s1:.3}"));
    }
    all &= c.report("nonzero count overestimates S1 in every sweep cell");

    // Discrimination.
    let mut cfg = desk(ExperimentKind::Discriminate);
    cfg.d = DISCRIMINATION_D;
    let sparse = cfg.sparse_a.clone();
    let disc = run_discrimination(&cfg).expect("discrimination");
    let mut c = Criterion::new();
    separation(&mut c, &disc, "discrimination", &sparse, DISCRIMINATION_MARGIN);
    overlap(&mut c, &disc, "discrimination", &sparse, "heavy_tailed", METRIC_NONZERO);
    overlap(&mut c, &disc, "discrimination", &sparse, "gaussian", METRIC_FINAL_LOSS);
    all &= c.report(&format!("discrimination at d={DISCRIMINATION_D} with documented N0 and final-loss overlaps"));

    // Ablations, one axis at a time. d = 64 is the desk baseline, so its
    // tracking cells are the sweep above.
    let mut c = Criterion::new();
    let mut cfg = desk(ExperimentKind::Ablation);
    cfg.a_grid = SWEEP_GRID.to_vec();
    cfg.ablation_discrimination = false;
    cfg.ablation_axes = vec![
        AblationAxis::DictFactor(16),
        AblationAxis::Sigma(0.05),
        AblationAxis::Sigma(0.2),
        AblationAxis::Dim(LARGE_D),
    ];
    let ablation = run_ablation_grid(&cfg).expect("ablation");
    for axis in &cfg.ablation_axes {
        tracking(&mut c, &ablation, &format!("{}/sweep", axis.name()), &SWEEP_GRID, SWEEP_TOLERANCE);
    }
    tracking(&mut c, &sweep, "sweep", &SWEEP_GRID, SWEEP_TOLERANCE);

    let mut small = desk(ExperimentKind::Discriminate);
    small.sparse_a = vec![SMALL_D_A];
    let small_disc = run_discrimination(&small).expect("d=64 discrimination");
    separation(&mut c, &small_disc, "discrimination", &[SMALL_D_A], SMALL_D_MARGIN);

    let mut cfg = desk(ExperimentKind::Ablation);
    cfg.a_grid = M_TRUE_GRID.to_vec();
    cfg.ablation_discrimination = false;
    cfg.ablation_axes = vec![AblationAxis::GroundTruthFactor(8)];
    let wide = run_ablation_grid(&cfg).expect("m_true ablation");
    tracking(&mut c, &wide, "m_true_8d/sweep", &M_TRUE_GRID, M_TRUE_TOLERANCE);
    all &= c.report("ablation robustness: dict 16d, sigma 0.05/0.2, d 64/512, m_true 8d");

    all &= exact_identities().report("exact identities: zero-residual L_norm = S1, greedy decrease, scale invariance");

    let mut c = Criterion::new();
    for &a in &SWEEP_GRID {
        let ve = sweep
            .row("sweep", &label(a), METRIC_AVG_COEFF_NORM)
            .and_then(|r| r.variance_explained)
            .unwrap_or(f64::NAN);
        c.check(ve >= SYNTHETIC_VE, format!("synthetic a={a}: variance explained {ve:.4} (need {SYNTHETIC_VE})"));
    }
    let layers = layer_fixture_ve(scratch.path());
    c.ok &= layers.ok;
    c.details.extend(layers.details);
    all &= c.report("variance explained on synthetic fits and layer fixtures");

    all &= golden_round_trip(scratch.path()).report("activation file round trip on the golden fixture");

    println!("PASS scope: real-model results are not reproduced here");
    println!("    the embedding-size trend across model families, the cross-layer curve on real transformer");
    println!("    activations and the feature tables need exported checkpoints; they are covered only by the");
    println!("    fixture checks above, and this suite builds and runs without the exporter");

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
