//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criterion 10 runs only when `SEQDREAM_FORDA_DIR` points at a directory
//! holding `FordA_TRAIN.tsv` and `FordA_TEST.tsv`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seqdream::classifier::{accuracy, build_resnet, train, EpochRecord, LayerSelector, ModelWeights, ResNetConfig, TrainConfig};
use seqdream::dataset::{load_ucr_tsv, synth_binary, Dataset, Delimiter};
use seqdream::dreamer::{
    alpha_norm, dream_ascent, dream_objective, select_seed_input, sequence_dream, sm, target_logits, tv, DataScale,
    DreamConfig, ScoreDistance, SeedStrategy, TargetMode, Variant,
};
use seqdream::evaluator::{fit_gaussian_stats, mahalanobis, DEFAULT_EPS_SCALE};
use seqdream::harness::{run_grid, GridOutcome, GridSpec, RunDir, RunMetrics};

const TARGET_CLASS: usize = 1;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, id: u32, name: &str, elapsed: Duration, verdict: Verdict) {
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id:>2} {name}: {detail} ({:.1}s)", elapsed.as_secs_f64());
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn gradient_correctness() -> Verdict {
    const M: usize = 32;
    let (ds, _) = synth_binary(40, 2, M, 3).unwrap();
    let model = build_resnet(&ResNetConfig::compact(2, M), 4).unwrap();
    let spec = target_logits(&model, &ds, TARGET_CLASS, TargetMode::Max, 2.5).unwrap();
    let cfg = DreamConfig {
        lambda_alpha: 1e-2,
        lambda_beta: 1e-2,
        lambda_sm: 0.3,
        alpha: 4.0,
        beta: 1.5,
        score_distance: ScoreDistance::FullVector,
        ..Default::default()
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let step = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..M).map(|_| normal.sample(&mut rng)).collect();
        let (_, grad) = dream_objective(&model, &x, TARGET_CLASS, Some(&spec), &cfg).unwrap();
        for i in 0..M {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += step;
            minus[i] -= step;
            let fp = dream_objective(&model, &plus, TARGET_CLASS, Some(&spec), &cfg).unwrap().0;
            let fm = dream_objective(&model, &minus, TARGET_CLASS, Some(&spec), &cfg).unwrap().0;
            let fd = (fp - fm) / (2.0 * step);
            worst = worst.max((grad[i] - fd).abs() / (grad[i].abs() + fd.abs()).max(1e-12));
        }
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 20 inputs"))
}

fn regularizer_oracles() -> Verdict {
    let cases = [
        ("tv([0,1,0],2)", tv(&[0.0, 1.0, 0.0], 2.0).unwrap(), 2.0),
        ("tv([0.5,1.5,1],1.5)", tv(&[0.5, 1.5, 1.0], 1.5).unwrap(), 1.0 + 0.5f64.powf(1.5)),
        ("sm([1,4,2,2])", sm(&[1.0, 4.0, 2.0, 2.0]).unwrap(), 5.0 / 3.0),
        ("alpha_norm([2],6)", alpha_norm(&[2.0], 6.0).unwrap(), 64.0),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|(name, got, want)| format!("{name}={got} (want {want})"))
        .collect();
    verdict(bad.is_empty(), if bad.is_empty() { "4/4 exact".into() } else { bad.join(", ") })
}

/// Dense quadratic form with the same ridge, solved by Gauss-Jordan
/// elimination with partial pivoting.
fn dense_mahalanobis(points: &[Vec<f64>], x: &[f64]) -> f64 {
    let n = points.len() as f64;
    let d = x.len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let eps = DEFAULT_EPS_SCALE * trace / d as f64;
    let mut a: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut row = cov[i].clone();
            row[i] += eps;
            row.push(x[i] - mean[i]);
            row
        })
        .collect();
    for col in 0..d {
        let piv = (col..d).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=d {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    let sol: Vec<f64> = (0..d).map(|i| a[i][d] / a[i][i]).collect();
    (0..d).map(|i| (x[i] - mean[i]) * sol[i]).sum::<f64>().sqrt()
}

fn mahalanobis_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let points: Vec<Vec<f64>> = (0..100)
        .map(|i| {
            let z: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng)).collect();
            // correlated coordinates with unequal scales
            vec![z[0] * 3.0, z[0] + z[1], 0.5 * z[2] - z[1], z[3] + 0.01 * i as f64, 2.0 * z[4] + z[2]]
        })
        .collect();
    let stats = fit_gaussian_stats(&points, DEFAULT_EPS_SCALE).unwrap();
    let mut worst = 0.0f64;
    for q in points.iter().take(50).chain([vec![10.0, -4.0, 2.0, 0.0, 7.0]].iter()) {
        let lib = mahalanobis(&stats, q).unwrap();
        worst = worst.max((lib - dense_mahalanobis(&points, q)).abs());
    }
    verdict(worst <= 1e-9, format!("max abs difference {worst:.2e} on 51 queries"))
}

struct Trained {
    model: ModelWeights,
    train: Dataset,
}

fn train_once(train_ds: &Dataset) -> (ModelWeights, Vec<EpochRecord>) {
    let model = build_resnet(&ResNetConfig::compact(train_ds.num_classes(), train_ds.length()), 7).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        seed: 7,
        ..Default::default()
    };
    train(model, train_ds, &cfg).unwrap()
}

fn training(suite: &mut Suite) -> Trained {
    let (train_ds, test_ds) = synth_binary(200, 100, 128, 7).unwrap();
    let ((model, history), elapsed) = timed(|| train_once(&train_ds));
    let acc = accuracy(&model, &test_ds).unwrap();
    let (_, rerun) = train_once(&train_ds);
    let bits = |h: &[EpochRecord]| h.iter().map(|r| (r.loss.to_bits(), r.accuracy.to_bits())).collect::<Vec<_>>();
    let identical = bits(&history) == bits(&rerun);
    let ok = acc >= 0.95 && elapsed < Duration::from_secs(60) && identical;
    suite.report(
        4,
        "training",
        elapsed,
        verdict(
            ok,
            format!(
                "test accuracy {acc:.4} (>= 0.95), training {:.1}s (< 60s), rerun history identical: {identical}",
                elapsed.as_secs_f64()
            ),
        ),
    );
    Trained { model, train: train_ds }
}

fn grid(t: &Trained, mode: TargetMode, dir: &Path) -> GridOutcome {
    let spec = GridSpec::two_point(mode, TARGET_CLASS, 0);
    let run_dir = RunDir::create(dir).unwrap();
    run_grid(&t.model, &t.train, &spec, &DreamConfig::default(), LayerSelector::Logits, &run_dir, 4).unwrap()
}

fn best_metrics(outcome: &GridOutcome) -> Option<(&str, &RunMetrics)> {
    outcome
        .best()
        .and_then(|b| b.metrics.as_ref().map(|m| (b.run_id.as_str(), m)))
}

/// Both variants start from the default seed choice (the class-c training
/// series nearest the class-c mean logits) and share the run seed.
fn sm_pairs(t: &Trained) -> Verdict {
    let scale = DataScale::from(t.train.stats());
    let center = target_logits(&t.model, &t.train, TARGET_CLASS, TargetMode::Center, 2.5).unwrap();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let sd_cfg = DreamConfig {
            variant: Variant::Sd,
            seed,
            ..Default::default()
        };
        let sd = sequence_dream(&t.model, &t.train, TARGET_CLASS, &sd_cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = select_seed_input(&t.model, &t.train, &center, SeedStrategy::default(), None, &mut rng).unwrap();
        assert_eq!(start.provenance, sd.seed);
        let asc_cfg = DreamConfig {
            variant: Variant::Ascent,
            seed,
            ..Default::default()
        };
        let asc = dream_ascent(&t.model, &start.series, TARGET_CLASS, &asc_cfg, &scale).unwrap();
        let (a, b) = (sm(&sd.series).unwrap(), sm(&asc.series).unwrap());
        if a <= b {
            wins += 1;
        }
        pairs.push(format!("{a:.3}/{b:.3}"));
    }
    verdict(wins >= 4, format!("{wins}/5 pairs with SM(sd) <= SM(ascent) [{}]", pairs.join(" ")))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_seqdream")
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin())
        .args(args)
        .env_remove("SEQDREAM_OUT_DIR")
        .env_remove("SEQDREAM_PARALLELISM")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(root: &Path) -> Result<(), String> {
    let data = root.join("data");
    let run = root.join("run");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    run_cli(&["synth", "--seed", "7", "--out", d, "--n-train", "60", "--n-test", "20", "--length", "64"])?;
    run_cli(&["train", "--seed", "7", "--data", d, "--out", r, "--epochs", "5"])?;
    run_cli(&["dream", "--seed", "3", "--out", r, "--variant", "sd", "--mode", "max", "--class", "1"])?;
    run_cli(&["dream", "--seed", "3", "--out", r, "--variant", "ascent", "--class", "0"])?;
    run_cli(&["eval", "--out", r])?;
    run_cli(&["project", "--out", r])
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.jsonl") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn cli_reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for root in [&a, &b] {
        if let Err(e) = pipeline(root) {
            return Verdict::Fail(e);
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    if fa != fb {
        return Verdict::Fail(format!("file sets differ: {fa:?} vs {fb:?}"));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} result files byte-identical", fa.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn forda() -> Verdict {
    let Some(dir) = std::env::var_os("SEQDREAM_FORDA_DIR").map(PathBuf::from) else {
        return Verdict::Skip("SEQDREAM_FORDA_DIR not set".into());
    };
    let (train_path, test_path) = (dir.join("FordA_TRAIN.tsv"), dir.join("FordA_TEST.tsv"));
    if !train_path.is_file() || !test_path.is_file() {
        return Verdict::Skip(format!("FordA files not found in {}", dir.display()));
    }
    let train_ds = load_ucr_tsv(&train_path, Delimiter::Tab, None).unwrap();
    let test_ds = load_ucr_tsv(&test_path, Delimiter::Tab, Some(&train_ds.label_map())).unwrap();
    let (model, _) = train_once(&train_ds);
    let acc = accuracy(&model, &test_ds).unwrap();
    let t = Trained { model, train: train_ds };
    let tmp = tempfile::tempdir().unwrap();
    let center = grid(&t, TargetMode::Center, &tmp.path().join("center"));
    let max = grid(&t, TargetMode::Max, &tmp.path().join("max"));
    let (Some((_, c)), Some((_, m))) = (best_metrics(&center), best_metrics(&max)) else {
        return Verdict::Fail(format!("test accuracy {acc:.4}; a grid had no feasible run"));
    };
    let ok = acc >= 0.93 && c.activation_distance <= c.activation_band_max && m.activation_distance > m.activation_band_max;
    verdict(
        ok,
        format!(
            "test accuracy {acc:.4}; center {:.2}, max {:.2}, band max {:.2}; raw center {:.2}, raw max {:.2}",
            c.activation_distance, m.activation_distance, c.activation_band_max, c.raw_distance, m.raw_distance
        ),
    )
}

fn main() {
    let mut suite = Suite { failures: 0 };

    let (v, e) = timed(gradient_correctness);
    let v = match v {
        Verdict::Pass(d) if e >= Duration::from_secs(5) => Verdict::Fail(format!("{d}, but took >= 5s")),
        v => v,
    };
    suite.report(1, "gradient correctness", e, v);
    let (v, e) = timed(regularizer_oracles);
    suite.report(2, "regularizer oracles", e, v);
    let (v, e) = timed(mahalanobis_oracle);
    suite.report(3, "mahalanobis oracle", e, v);

    let trained = training(&mut suite);
    let class_mean = target_logits(&trained.model, &trained.train, TARGET_CLASS, TargetMode::Center, 1.0)
        .unwrap()
        .score;

    let tmp = tempfile::tempdir().unwrap();
    let (max, e) = timed(|| grid(&trained, TargetMode::Max, &tmp.path().join("max")));
    let v = match best_metrics(&max) {
        None => Verdict::Fail("no feasible run".into()),
        Some((id, m)) => verdict(
            m.predicted_class == TARGET_CLASS
                && m.confidence >= 0.99
                && m.class_score >= 2.0 * class_mean
                && e < Duration::from_secs(600),
            format!(
                "{id}: predicted {}, confidence {:.5}, class logit {:.3} vs 2 x mean {:.3}, {} feasible of 256",
                m.predicted_class,
                m.confidence,
                m.class_score,
                2.0 * class_mean,
                max.ranking.len()
            ),
        ),
    };
    suite.report(5, "sd max grid", e, v);

    let (center, e) = timed(|| grid(&trained, TargetMode::Center, &tmp.path().join("center")));
    let v = match (best_metrics(&center), best_metrics(&max)) {
        (Some((_, c)), Some((_, m))) => verdict(
            c.activation_distance <= c.activation_band_max && m.activation_distance > m.activation_band_max,
            format!(
                "center {:.3} <= band max {:.3}; max {:.3} > band max {:.3}",
                c.activation_distance, c.activation_band_max, m.activation_distance, m.activation_band_max
            ),
        ),
        _ => Verdict::Fail("a grid had no feasible run".into()),
    };
    suite.report(6, "activation band placement", e, v);

    let (v, e) = timed(|| sm_pairs(&trained));
    suite.report(7, "smoothness pairs", e, v);

    let v = match (best_metrics(&center), best_metrics(&max)) {
        (Some((_, c)), Some((_, m))) => verdict(
            c.raw_distance > c.raw_band_max && m.raw_distance > m.raw_band_max,
            format!(
                "center {:.1}, max {:.1} vs raw band max {:.3}",
                c.raw_distance, m.raw_distance, c.raw_band_max
            ),
        ),
        _ => Verdict::Fail("a grid had no feasible run".into()),
    };
    suite.report(8, "raw series out of distribution", Duration::ZERO, v);

    let (v, e) = timed(cli_reproducibility);
    suite.report(9, "cli reproducibility", e, v);
    let (v, e) = timed(forda);
    suite.report(10, "FordA reference", e, v);

    println!("acceptance: {} failed", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
