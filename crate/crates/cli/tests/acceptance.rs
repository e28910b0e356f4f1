//! One pass/fail line per acceptance criterion. Runs sequentially so the
//! runtime budgets are measured without contention; exits nonzero if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use coda::analysis::{
    constant_field_check, contraction_battery, distribution_diagnostics, fixed_point_report, mean_policy_loglik,
    twin_peaks_fixed_point,
};
use coda::diffusion::{heun_sample, DenoiserConfig, DenoiserModel, GaussianOracle, NoGuide, NoiseSchedule, SamplerConfig, TrainNoiseLaw};
use coda::diffusion::model::draw_loss_batch;
use coda::games::{gen_dataset, gen_dataset_with, DatasetLaw, GameSpec};
use coda::guidance::{policy_log_density, policy_score, GuidanceHook, GuidanceMode};
use coda::marl::{JointPolicy, LearnerConfig};
use coda::pipeline::{build_dataset, generate, sweep_with_cache, PriorCache, PriorKind, RunConfig, RunLog, Variant};
use coda::rng;
use coda::transforms::{BoundedMap, CdfNormalizer};
use ndarray::Array2;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn timed(budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let mut o = f();
    let dt = t.elapsed();
    if let Some(b) = budget {
        if dt > b {
            o.passed = false;
            o.detail.push_str(&format!("; over the {:.0} s budget", b.as_secs_f64()));
        }
    }
    (o, dt)
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn c1_constant_field() -> Outcome {
    let ds = gen_dataset(&GameSpec::<f64>::multiplication(), 4000, 0).unwrap();
    let r = constant_field_check(&ds, 100, 0).unwrap();
    outcome(r.max_deviation < 1e-12, format!("max deviation {:.2e} over {} points", r.max_deviation, r.points))
}

fn c2_fixed_point() -> Outcome {
    let (a, b, c) = (1.0, 4.0, 5.0);
    let game = GameSpec::<f64>::twin_peaks(a, b, c).unwrap();
    let cfg = LearnerConfig { steps: 400, ..LearnerConfig::default() };
    let mut worst = 0.0f64;
    let mut monotone = true;
    for m in [0.2, 0.4, 0.6] {
        let mut last = f64::INFINITY;
        for s in [0.1, 0.3, 0.5] {
            let law = DatasetLaw::ClippedGaussian { mean_x: m, mean_y: m, std_x: s, std_y: s };
            let ds = gen_dataset_with(&game, 4000, law, 11).unwrap();
            let r = fixed_point_report(a, b, c, &ds, &cfg).unwrap();
            worst = worst.max(r.gap.0).max(r.gap.1);
            monotone &= r.predicted.0 < last && r.empirical.0 < last;
            last = r.predicted.0.min(r.empirical.0);
        }
    }
    let centered = gen_dataset_with(&game, 4000, DatasetLaw::CenteredUniform, 11).unwrap();
    let r = fixed_point_report(a, b, c, &centered, &cfg).unwrap();
    let origin = twin_peaks_fixed_point(a, b, c, 0.0, 1.0 / 3.0).unwrap() == 0.0
        && r.predicted.0.abs() < 1e-12
        && r.empirical.0.abs().max(r.empirical.1.abs()) < 1e-3;
    outcome(
        worst < 1e-3 && monotone && origin,
        format!("max gap {worst:.2e} on 3x3 grid; decreasing in variance: {monotone}; centered lands at origin: {origin}"),
    )
}

fn finals(logs: &[Result<RunLog, String>]) -> Vec<f64> {
    logs.iter().map(|r| r.as_ref().map_or(f64::NAN, |l| l.final_return)).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(" ")
}

fn c3_multiplication(cache: &PriorCache<f32>) -> Outcome {
    let by_variant = |v: Variant| -> Vec<RunConfig> { SEEDS.iter().map(|&s| RunConfig::multiplication(v, s)).collect() };
    let mut configs = by_variant(Variant::CodaClassifier);
    configs.extend(by_variant(Variant::UncondAug));
    configs.extend(by_variant(Variant::Baseline));
    let res = sweep_with_cache(&configs, cache).unwrap();
    let r = finals(&res.runs);
    let (coda, rest) = r.split_at(5);
    let (uncond, base) = rest.split_at(5);
    let ok = coda.iter().all(|&x| x >= 0.9) && uncond.iter().all(|&x| x <= 0.5) && base.iter().all(|&x| x <= 0.5);
    outcome(ok, format!("CODA [{}] UncondAug [{}] Baseline [{}]", fmt_list(coda), fmt_list(uncond), fmt_list(base)))
}

fn c4_twin_peaks(cache: &PriorCache<f32>) -> Outcome {
    let mut configs: Vec<RunConfig> = SEEDS.iter().map(|&s| RunConfig::twin_peaks(Variant::CodaClassifier, s)).collect();
    configs.extend(SEEDS.iter().map(|&s| RunConfig::twin_peaks(Variant::Baseline, s)));
    let res = sweep_with_cache(&configs, cache).unwrap();
    let r = finals(&res.runs);
    let coda = &r[..5];
    let mut dist = Vec::new();
    let mut rets = Vec::new();
    for log in &res.runs[5..] {
        let l = log.as_ref().unwrap();
        dist.push(l.converged_theta.0.hypot(l.converged_theta.1));
        rets.push(l.converged_return);
    }
    let ok = coda.iter().all(|&x| x >= 0.5) && dist.iter().all(|&d| d <= 1e-2) && rets.iter().all(|r| r.abs() <= 1e-2);
    outcome(
        ok,
        format!("CODA final [{}]; Baseline |theta| [{}] return [{}]", fmt_list(coda), fmt_list(&dist), fmt_list(&rets)),
    )
}

fn c5_oracle_sampler() -> Outcome {
    let mean = vec![0.5, -1.0, 2.0, 0.0, 0.25];
    let sd = 0.5;
    let oracle = GaussianOracle { mean: mean.clone(), sigma_data: sd };
    let cfg = SamplerConfig { schedule: NoiseSchedule::<f64>::default(), ..SamplerConfig::default() };
    let x = heun_sample(&oracle, &cfg, &NoGuide, 10_000, 5).unwrap();
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for (j, &m) in mean.iter().enumerate() {
        let c = x.column(j);
        let mu = c.mean().unwrap();
        let std = c.std(0.0);
        worst_mean = worst_mean.max((mu - m).abs());
        worst_std = worst_std.max((std - sd).abs());
    }
    outcome(worst_mean < 0.05 && worst_std < 0.05, format!("max |mean - m| {worst_mean:.4}, max |std - sigma_d| {worst_std:.4}"))
}

fn c6_fidelity(cache: &PriorCache<f32>) -> Outcome {
    let cfg = RunConfig::multiplication(Variant::UncondAug, 0);
    let ds = build_dataset::<f32>(&cfg).unwrap();
    let prior = cache.get_or_train(&cfg, PriorKind::Unconditional, &ds).unwrap();
    let policy = JointPolicy::for_game(&ds.game, cfg.learner.init);
    let x = generate(&prior, Variant::UncondAug, &cfg.guidance, &policy, &cfg.diffusion, &ds, 1000, 99).unwrap();
    let d = distribution_diagnostics(x.view(), ds.data.view()).unwrap();
    outcome(
        d.max_mean_gap() < 0.05 && d.max_ks() < 0.08,
        format!("1000 samples vs {} rows: max mean gap {:.4}, max KS {:.4}", ds.len(), d.max_mean_gap(), d.max_ks()),
    )
}

fn c7_steering(cache: &PriorCache<f32>) -> Outcome {
    let cfg = RunConfig::multiplication(Variant::CodaClassifier, 0);
    let ds = build_dataset::<f32>(&cfg).unwrap();
    let prior = cache.get_or_train(&cfg, PriorKind::Unconditional, &ds).unwrap();
    let policy = JointPolicy::for_game(&ds.game, cfg.learner.init);
    let metric = |lambda: f64, seed: u64| {
        let hook = GuidanceHook { mode: GuidanceMode::Classifier, lambda, ..cfg.guidance };
        let x = generate(&prior, Variant::CodaClassifier, &hook, &policy, &cfg.diffusion, &ds, 1000, seed).unwrap();
        mean_policy_loglik(x.view(), &ds.layout, &policy, 1.0).unwrap()
    };
    let mut wins = 0;
    let mut collapse = Vec::new();
    for &s in &SEEDS {
        let base = metric(0.0, s);
        let mid = metric(0.5, s);
        wins += usize::from(mid > base);
        collapse.push([1.0, 2.0, 5.0, 10.0].into_iter().find(|&l| metric(l, s) < mid));
    }
    let all_collapse = collapse.iter().all(Option::is_some);
    let lambdas: Vec<String> = collapse.iter().map(|c| c.map_or("none".into(), |l| format!("{l}"))).collect();
    outcome(wins == 5 && all_collapse, format!("lambda 0.5 beats 0 on {wins}/5 seeds; first collapsing lambda per seed [{}]", lambdas.join(" ")))
}

fn c8_battery() -> Outcome {
    let rows = contraction_battery(&[-0.5, 0.0, 0.1, 0.5, 1.0, 1.5, 2.0, 2.5], 100, 8);
    let worst = rows.iter().map(|r| r.max_law_error).fold(0.0, f64::max);
    let failed: Vec<f64> = rows.iter().filter(|r| !r.passed()).map(|r| r.lambda).collect();
    outcome(failed.is_empty() && worst < 1e-12, format!("{} lambdas x 100 trials, max law error {worst:.2e}, failing {failed:?}", rows.len()))
}

fn c9_transforms() -> Outcome {
    let map = BoundedMap::new(-1.0f64, 1.0).unwrap();
    let mut bounded = 0.0f64;
    for k in 1..2000 {
        let x = -1.0 + 2.0 * k as f64 / 2000.0;
        bounded = bounded.max((map.inverse(map.forward(x)).unwrap() - x).abs());
    }
    let game = GameSpec::<f64>::multiplication();
    let laws = [
        DatasetLaw::Uniform,
        DatasetLaw::CenteredUniform,
        DatasetLaw::ClippedGaussian { mean_x: 0.8, mean_y: -0.5, std_x: 0.6, std_y: 0.3 },
        DatasetLaw::Point { ax: 0.3, ay: -0.2 },
    ];
    let mut cdf = 0.0f64;
    let mut finite = true;
    for (i, law) in laws.into_iter().enumerate() {
        let ds = gen_dataset_with(&game, 4000, law, i as u64).unwrap();
        let norm = CdfNormalizer::fit(ds.data.view()).unwrap();
        let z = norm.forward_matrix(ds.data.view()).unwrap();
        finite &= z.iter().all(|v| v.is_finite());
        let back = norm.inverse_matrix(z.view()).unwrap();
        for d in 0..ds.data.ncols() {
            let support = norm.support(d);
            let (lo, hi) = (support[0], support[support.len() - 1]);
            for (x, y) in ds.data.column(d).iter().zip(back.column(d)) {
                if *x > lo && *x < hi || norm.is_constant(d) {
                    cdf = cdf.max((x - y).abs());
                }
            }
        }
    }
    outcome(
        bounded < 1e-9 && cdf < 1e-6 && finite,
        format!("bounded round trip {bounded:.2e}, CDF round trip {cdf:.2e}, all diffusion-space values finite: {finite}"),
    )
}

fn c10_gradients() -> Outcome {
    let mut cfg = DenoiserConfig::new(3, 2);
    cfg.hidden = vec![8];
    cfg.noise_emb_dim = 4;
    cfg.cond_emb_dim = 4;
    let model = DenoiserModel::<f64>::new(cfg, 0.8, 3).unwrap();
    let mut r = rng::stream(10, "acceptance-fd", 0);
    let data = Array2::from_shape_fn((16, 3), |_| rng::normal(&mut r));
    let labels = Array2::from_shape_fn((16, 2), |_| rng::normal(&mut r));
    let law = TrainNoiseLaw::<f64>::default();
    let batch = draw_loss_batch(data.view(), Some(labels.view()), 12, &law, 0.3, &mut r);
    let (_, grad) = model.loss_and_grad(&batch).unwrap();
    let h = 1e-6;
    let mut worst_rel = 0.0f64;
    for i in 0..model.num_params() {
        let mut plus = model.clone();
        plus.params_mut()[i] += h;
        let mut minus = model.clone();
        minus.params_mut()[i] -= h;
        let fd = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
        worst_rel = worst_rel.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }

    let mut worst_score = 0.0f64;
    let obs = Array2::zeros((1, 2));
    for k in 0..200 {
        let u = |j: u64| 2.0 * (rng::derive_seed(k, "acceptance-score", j) as f64 / u64::MAX as f64) - 1.0;
        let policy = JointPolicy::new(u(0), u(1), -1.0, 1.0);
        let (ax, ay, std) = (u(2), u(3), 0.3 + (u(4) + 1.0));
        let g = policy_score(&policy, ndarray::arr2(&[[ax, ay]]).view(), obs.view(), std).unwrap();
        let f = |x: f64, y: f64| policy_log_density(&policy, ndarray::arr2(&[[x, y]]).view(), std).unwrap();
        let e = 1e-5;
        let fx = (f(ax + e, ay) - f(ax - e, ay)) / (2.0 * e);
        let fy = (f(ax, ay + e) - f(ax, ay - e)) / (2.0 * e);
        worst_score = worst_score.max((fx - g[[0, 0]]).abs()).max((fy - g[[0, 1]]).abs());
    }
    outcome(
        worst_rel < 1e-3 && worst_score < 1e-6,
        format!("denoiser max relative error {worst_rel:.2e} over {} params; policy score max error {worst_score:.2e}", model.num_params()),
    )
}

const TINY: &str = "epochs = 3\npolicy_steps = 4\nsynth_batch = 64\n[dataset]\nn = 300\n[diffusion]\nhidden = [16]\nsteps = 8\n[diffusion.train]\nepochs = 50\nbatch = 64\n";

fn cli(args: &[&str], cwd: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_coda")).args(args).current_dir(cwd).output().map(|o| o.status.success()).unwrap_or(false)
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timing.txt") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    let commands: [&[&str]; 5] = [
        &["gen-data", "--config", "tiny.toml", "--seed", "4"],
        &["run", "--config", "tiny.toml", "--seed", "4", "--variant", "coda_classifier"],
        &["sample", "--config", "tiny.toml", "--seed", "4", "--variant", "coda_classifier", "--lambda", "0.6"],
        &["sweep", "--config", "tiny.toml", "--seed", "4", "--seeds", "2", "--variants", "baseline,q_cond_aug"],
        &["repro-fig2", "--config", "tiny.toml", "--seed", "4"],
    ];
    let mut mismatched = Vec::new();
    let mut files = 0;
    for args in commands {
        let a = root.join("a").join(args[0]);
        let b = root.join("b").join(args[0]);
        for dir in [&a, &b] {
            let mut full = args.to_vec();
            full.extend(["--out", dir.to_str().unwrap()]);
            if !cli(&full, root) {
                return outcome(false, format!("`coda {}` failed", args.join(" ")));
            }
        }
        let (fa, fb) = (data_files(&a), data_files(&b));
        files += fa.len();
        if fa != fb || fa.is_empty() {
            mismatched.push(args[0]);
        }
    }
    outcome(mismatched.is_empty(), format!("{files} files from 5 commands compared byte for byte; differing: {mismatched:?}"))
}

fn main() {
    // Skip quietly under `cargo test -- --list` and similar harness probes.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let cache = PriorCache::<f32>::default();
    let secs = Duration::from_secs;
    let criteria: Vec<(&str, Option<Duration>, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("1 constant-field exactness", Some(secs(1)), Box::new(c1_constant_field)),
        ("2 twin peaks fixed point", Some(secs(10)), Box::new(c2_fixed_point)),
        ("3 multiplication reproduction", Some(secs(600)), Box::new(|| c3_multiplication(&cache))),
        ("4 twin peaks reproduction", Some(secs(600)), Box::new(|| c4_twin_peaks(&cache))),
        ("5 sampler oracle", Some(secs(30)), Box::new(c5_oracle_sampler)),
        ("6 unconditional fidelity", None, Box::new(|| c6_fidelity(&cache))),
        ("7 guidance steering", None, Box::new(|| c7_steering(&cache))),
        ("8 contraction battery", Some(secs(1)), Box::new(c8_battery)),
        ("9 transform round trips", None, Box::new(c9_transforms)),
        ("10 gradient correctness", None, Box::new(c10_gradients)),
        ("11 determinism", None, Box::new(c11_determinism)),
    ];
    let mut failures = 0;
    for (name, budget, f) in criteria {
        let (o, dt) = timed(budget, f);
        failures += usize::from(!o.passed);
        println!("[{}] criterion {name} ({:.1} s): {}", if o.passed { "PASS" } else { "FAIL" }, dt.as_secs_f64(), o.detail);
    }
    println!("acceptance: {} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
