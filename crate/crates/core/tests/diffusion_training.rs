//! Full-budget training checks for the denoiser.

use coda::diffusion::{estimate_sigma_data, train, DenoiserConfig, DenoiserModel, TrainConfig, TrainNoiseLaw};
use coda::games::{gen_dataset, GameSpec};
use coda::transforms::CdfNormalizer;
use ndarray::Array2;

#[test]
fn one_point_dataset_reaches_loss_below_1e_3_at_full_budget() {
    let data = Array2::<f32>::zeros((256, 5));
    let mut model = DenoiserModel::new(DenoiserConfig::new(5, 0), 1.0, 0).unwrap();
    let curve = train(&mut model, data.view(), None, &TrainNoiseLaw::default(), &TrainConfig::default(), 0).unwrap();
    let tail = curve.tail_mean(20).unwrap();
    assert!(tail < 1e-3, "tail loss {tail}");
}

#[test]
fn loss_falls_on_the_uniform_multiplication_dataset() {
    let ds = gen_dataset(&GameSpec::<f32>::multiplication(), 4000, 1).unwrap();
    let z = CdfNormalizer::fit(ds.data.view()).unwrap().forward_matrix(ds.data.view()).unwrap();
    let mut model = DenoiserModel::new(DenoiserConfig::new(5, 0), estimate_sigma_data(z.view()), 1).unwrap();
    let cfg = TrainConfig { epochs: 1500, ..TrainConfig::default() };
    let curve = train(&mut model, z.view(), None, &TrainNoiseLaw::default(), &cfg, 1).unwrap();
    let head: f64 = curve.points[..5].iter().map(|p| p.1).sum::<f64>() / 5.0;
    assert!(curve.tail_mean(5).unwrap() < head, "{head} -> {:?}", curve.last());
}

#[test]
fn diverging_learning_rate_aborts_with_step() {
    // f32 overflows where f64 would carry a huge but finite loss.
    let ds = gen_dataset(&GameSpec::<f32>::multiplication(), 500, 2).unwrap();
    let z = CdfNormalizer::fit(ds.data.view()).unwrap().forward_matrix(ds.data.view()).unwrap();
    let mut model = DenoiserModel::new(DenoiserConfig::new(5, 0), 1.0, 2).unwrap();
    let cfg = TrainConfig { epochs: 500, batch: 64, lr: 1e30, grad_clip: 1e30, optimizer: coda::diffusion::OptimizerKind::Sgd, ..TrainConfig::default() };
    let err = train(&mut model, z.view(), None, &TrainNoiseLaw::default(), &cfg, 2).unwrap_err();
    assert!(matches!(err, coda::Error::Diverged { .. }), "{err}");
}
