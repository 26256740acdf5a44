mod common;

use common::{mean_se, PlainSchedule};
use msdda_core::msdda::{msdda_sample, FusionEnsemble};
use msdda_core::nn::{init_params, Activation, MlpArchitecture, MlpParams};
use msdda_core::{sample, EpsilonModel, PreferenceWeights, ScheduleSpec};

fn arch() -> MlpArchitecture {
    MlpArchitecture {
        data_dim: 2,
        t_embed_dim: 4,
        hidden: vec![6],
        activation: Activation::Silu,
    }
}

/// A network whose output is the constant `bias`.
fn constant_model(bias: [f64; 2], eta: f64, spec: ScheduleSpec) -> EpsilonModel {
    let mut p = MlpParams::zeros(arch()).unwrap();
    let n = p.flat().len();
    p.flat_mut()[n - 2..].copy_from_slice(&bias);
    EpsilonModel::new(p, spec, eta).unwrap()
}

#[test]
fn vertex_weights_reproduce_the_single_model_chain() {
    let spec = ScheduleSpec::linear(30, 1e-3, 0.2);
    for pick in 0..2 {
        let models: Vec<EpsilonModel> = (0..2)
            .map(|i| EpsilonModel::new(init_params(&arch(), 50 + i).unwrap(), spec, 1.0).unwrap())
            .collect();
        let ens = FusionEnsemble::new(models, PreferenceWeights::vertex(2, pick).unwrap()).unwrap();
        let fused = msdda_sample(&ens, 300, 77).unwrap();
        assert_eq!(ens.models()[1 - pick].forward_count(), 0);
        assert_eq!(ens.models()[pick].forward_count(), 300 * 30);
        assert_eq!(fused, sample(&ens.models()[pick], 300, 77).unwrap());
    }
}

#[test]
fn constant_networks_give_the_predicted_gaussian() {
    let (steps, b0, b1) = (20, 1e-3, 0.2);
    let spec = ScheduleSpec::linear(steps, b0, b1);
    let plain = PlainSchedule::linear(steps, b0, b1);
    let biases = [[0.5, -1.0], [-0.3, 0.8]];
    let etas = [1.0, 0.6];
    let w = [0.3, 0.7];
    let models = vec![
        constant_model(biases[0], etas[0], spec),
        constant_model(biases[1], etas[1], spec),
    ];
    let ens = FusionEnsemble::new(models, PreferenceWeights::new(w.to_vec()).unwrap()).unwrap();
    let n = 20_000;
    let xs = msdda_sample(&ens, n, 5).unwrap();

    // Every step is affine in x, so x_{t-1} stays Gaussian with the same
    // variance in each coordinate.
    let mut mean = [0.0, 0.0];
    let mut var = 1.0;
    for t in (1..=steps).rev() {
        let beta = plain.beta(t);
        let alpha = 1.0 - beta;
        let ab = plain.alpha_bar(t);
        let ab_prev = plain.alpha_bar(t - 1);
        let pi: Vec<f64> = if t == 1 {
            w.to_vec()
        } else {
            let bt = (1.0 - ab_prev) / (1.0 - ab) * beta;
            let prec: Vec<f64> = (0..2).map(|i| w[i] / (etas[i] * etas[i] * bt)).collect();
            let total: f64 = prec.iter().sum();
            var = var / alpha + 1.0 / total;
            prec.iter().map(|p| p / total).collect()
        };
        if t == 1 {
            var /= alpha;
        }
        let c = beta / (alpha.sqrt() * (1.0 - ab).sqrt());
        for d in 0..2 {
            let eps = pi[0] * biases[0][d] + pi[1] * biases[1][d];
            mean[d] = mean[d] / alpha.sqrt() - c * eps;
        }
    }

    for d in 0..2 {
        let col: Vec<f64> = xs.iter().map(|x| x[d]).collect();
        let (m, se) = mean_se(&col);
        assert!(
            (m - mean[d]).abs() <= 5.0 * se,
            "dim {d}: mean {m} vs {}",
            mean[d]
        );
        let sq: Vec<f64> = col.iter().map(|x| (x - mean[d]) * (x - mean[d])).collect();
        let (v, se_v) = mean_se(&sq);
        assert!(
            (v - var).abs() <= 5.0 * se_v,
            "dim {d}: variance {v} vs {var}"
        );
    }
}
