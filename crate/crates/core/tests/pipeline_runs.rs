//! Pipeline invariants on moderately sized priors.

use coda::marl::{train_brud, LearnerConfig};
use coda::pipeline::{build_dataset, run, run_with_cache, sweep, PriorCache, RunConfig, Variant};
use coda::games::DatasetLaw;

fn small(variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::multiplication(variant, seed);
    cfg.diffusion.hidden = vec![32, 32];
    cfg.diffusion.train.epochs = 2000;
    cfg.diffusion.train.batch = 256;
    cfg.dataset.n = 2000;
    cfg.synth_batch = 500;
    cfg
}

#[test]
fn guided_batches_are_more_on_policy_than_unguided_ones() {
    let cfg = RunConfig { compare_uncond: true, epochs: 10, ..small(Variant::CodaClassifier, 0) };
    let log = run::<f32>(&cfg).unwrap();
    for e in &log.epochs[1..] {
        let s = e.synth.as_ref().unwrap();
        let u = s.uncond_loglik.unwrap();
        assert!(s.loglik >= u, "epoch {}: guided {} < unguided {u}", e.epoch, s.loglik);
    }
}

#[test]
fn unconditional_augmentation_follows_the_constant_field() {
    let cache = PriorCache::<f32>::default();
    let law = DatasetLaw::ClippedGaussian { mean_x: 0.3, mean_y: 0.2, std_x: 0.4, std_y: 0.4 };
    let mk = |v| {
        let mut c = small(v, 3);
        c.dataset.law = law;
        c
    };
    let mean_grad = |v| {
        let log = run_with_cache::<f32>(&mk(v), &cache).unwrap();
        let n = (log.steps.len() - 1) as f64;
        let gx: f64 = log.steps[1..].iter().map(|s| s.grad_x).sum::<f64>() / n;
        let gy: f64 = log.steps[1..].iter().map(|s| s.grad_y).sum::<f64>() / n;
        (gx, gy)
    };
    let (bx, by) = mean_grad(Variant::Baseline);
    let (ux, uy) = mean_grad(Variant::UncondAug);
    let cos = (bx * ux + by * uy) / (bx.hypot(by) * ux.hypot(uy));
    assert!(cos > 0.95, "cosine {cos}: baseline ({bx}, {by}) vs uncond ({ux}, {uy})");
}

#[test]
fn baseline_sweep_matches_direct_brud_per_seed() {
    let configs: Vec<RunConfig> = (0..5).map(|s| RunConfig::multiplication(Variant::Baseline, s)).collect();
    let res = sweep::<f64>(&configs).unwrap();
    for (c, r) in configs.iter().zip(&res.runs) {
        let log = r.as_ref().unwrap();
        let ds = build_dataset::<f64>(c).unwrap();
        let lc = LearnerConfig { steps: c.total_steps(), ..c.learner.clone() };
        assert_eq!(log.steps, train_brud(&ds.game, &ds.actions(), &lc, c.seed).unwrap());
        let again = run::<f64>(c).unwrap();
        assert!(again.same_data(log));
    }
    assert_eq!(res.summaries.len(), 1);
    assert_eq!(res.summaries[0].runs, 5);
    assert!(res.summaries[0].stderr_return > 0.0);
}

#[test]
fn q_conditioned_pool_is_static_and_reproducible() {
    let cfg = RunConfig { epochs: 4, ..small(Variant::QCondAug, 5) };
    let a = run::<f32>(&cfg).unwrap();
    let b = run::<f32>(&cfg).unwrap();
    assert!(a.same_data(&b));
    let d0 = &a.epochs[0].synth.as_ref().unwrap().pool_digest;
    assert!(a.epochs.iter().all(|e| &e.synth.as_ref().unwrap().pool_digest == d0));
}
