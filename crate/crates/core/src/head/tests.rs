use rand::Rng;

use super::*;
use crate::dataset::Dataset;
use crate::synth::{generate_synthetic, SynthConfig};

fn config(input_dim: usize, hidden_dim: usize, seed: u64) -> HeadConfig {
    HeadConfig {
        hidden_dim,
        seed,
        ..HeadConfig::new(input_dim)
    }
}

/// Straightforward nested-vector matrix oracle, independent of `Dense::apply`.
fn oracle_forward(model: &HeadModel<f64>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mats: Vec<Vec<Vec<f64>>> = model
        .layers()
        .iter()
        .map(|l| (0..l.out_dim).map(|i| (0..l.in_dim).map(|j| l.weights[i * l.in_dim + j]).collect()).collect())
        .collect();
    let affine = |m: &Vec<Vec<f64>>, b: &[f64], v: &[f64]| -> Vec<f64> {
        m.iter()
            .zip(b)
            .map(|(row, bi)| {
                let mut s = *bi;
                for k in 0..row.len() {
                    s += row[k] * v[k];
                }
                s
            })
            .collect()
    };
    let l = model.layers();
    let h: Vec<f64> = affine(&mats[0], &l[0].bias, x).into_iter().map(|v| v.max(0.0)).collect();
    let e: Vec<f64> = affine(&mats[1], &l[1].bias, &h).into_iter().map(|v| v.max(0.0)).collect();
    let y = affine(&mats[2], &l[2].bias, &e);
    (e, y)
}

#[test]
fn zero_model_maps_to_zero() {
    let model = HeadModel::<f64>::zeros(config(12, 16, 0)).unwrap();
    let out = model.forward(&[0.7; 12]).unwrap();
    assert_eq!(out.embedding, vec![0.0; EMBED_DIM]);
    assert_eq!(out.prediction, [0.0; OUTPUT_DIM]);
}

#[test]
fn identity_slices_reproduce_leading_inputs() {
    let mut model = HeadModel::<f64>::zeros(config(12, 16, 0)).unwrap();
    let [l1, l2, _] = model.layers_mut();
    for i in 0..12 {
        l1.weights[i * 12 + i] = 1.0;
    }
    for i in 0..EMBED_DIM {
        l2.weights[i * 16 + i] = 1.0;
    }
    let x: Vec<f64> = (0..12).map(|i| 0.25 * i as f64).collect();
    let out = model.forward(&x).unwrap();
    assert_eq!(out.embedding, x[..EMBED_DIM].to_vec());
}

#[test]
fn forward_matches_matrix_oracle() {
    let mut rng = crate::seeded_rng(5);
    for seed in 0..10 {
        let model = HeadModel::<f64>::initialize(config(9, 13, seed)).unwrap();
        let x: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = model.forward(&x).unwrap();
        let (e, y) = oracle_forward(&model, &x);
        for (a, b) in out.embedding.iter().zip(&e) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in out.prediction.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_rejects_wrong_width() {
    let model = HeadModel::<f64>::zeros(config(4, 8, 0)).unwrap();
    assert!(matches!(model.forward(&[0.0; 5]), Err(Error::Shape(_))));
}

#[test]
fn pre_activation_tap_can_be_negative() {
    let mut model = HeadModel::<f64>::zeros(config(3, 4, 0)).unwrap();
    model.layers_mut()[1].bias[0] = -1.0;
    assert_eq!(model.forward(&[0.0; 3]).unwrap().embedding[0], 0.0);
    model.set_embedding_tap(EmbeddingTap::PreActivation);
    assert_eq!(model.forward(&[0.0; 3]).unwrap().embedding[0], -1.0);
}

#[test]
fn clamp_reports_unit_range() {
    let f = Forward {
        embedding: vec![],
        prediction: [-0.5, 0.2, 1.7, 1.0, 0.0],
    };
    assert_eq!(f.clamped(), [0.0, 0.2, 1.0, 1.0, 0.0]);
}

#[test]
fn mse_examples() {
    let t: [f64; 5] = [0.3, 0.1, 0.9, 0.5, 0.0];
    assert_eq!(mse_loss(&t, &t), 0.0);
    let shifted = t.map(|v| v + 1.0);
    assert!((mse_loss(&shifted, &t) - 1.0).abs() < 1e-15);
    // (0.01 + 0.01 + 0 + 0 + 0.09) / 5 = 0.022
    let l: f64 = mse_loss(&[0.2, 0.4, 0.0, 0.0, 0.0], &[0.1, 0.5, 0.0, 0.0, 0.3]);
    assert!((l - 0.022).abs() < 1e-15, "{l}");
}

#[test]
fn zero_error_batch_has_zero_gradient() {
    let model = HeadModel::<f64>::initialize(config(6, 8, 3)).unwrap();
    let xs = [vec![0.1, -0.3, 0.2, 0.9, 1.1, -0.4], vec![1.0; 6]];
    let batch: Vec<_> = xs
        .iter()
        .map(|x| Sample {
            feature: x,
            target: model.forward(x).unwrap().prediction,
        })
        .collect();
    let g = model.gradients(&batch).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
}

#[test]
fn single_active_path_matches_hand_chain_rule() {
    // x0 = 2, w1 = 0.5, w2 = 3, w3 = -1, target 0:
    // z1 = 1, e = 3, y = -3, loss = 9/5, dL/dy = 2/5 * -3 = -1.2
    let mut model = HeadModel::<f64>::zeros(config(3, 4, 0)).unwrap();
    let [l1, l2, l3] = model.layers_mut();
    l1.weights[0] = 0.5;
    l2.weights[0] = 3.0;
    l3.weights[0] = -1.0;
    let x = [2.0, 0.0, 0.0];
    let g = model
        .gradients(&[Sample {
            feature: &x,
            target: [0.0; 5],
        }])
        .unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(g.loss, 1.8);
    close(g.layers[2].weights[0], -3.6);
    close(g.layers[2].bias[0], -1.2);
    close(g.layers[1].weights[0], 1.2);
    close(g.layers[1].bias[0], 1.2);
    close(g.layers[0].weights[0], 7.2);
    close(g.layers[0].bias[0], 3.6);
    let nonzero = g.param_slices().iter().map(|s| s.iter().filter(|v| **v != 0.0).count()).sum::<usize>();
    assert_eq!(nonzero, 6);
}

/// Central finite differences of the batch loss, one parameter at a time.
fn finite_difference(model: &HeadModel<f64>, batch: &[Sample<'_, f64>], h: f64) -> Vec<Vec<f64>> {
    let mut probe = model.clone();
    let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::new();
    for (group, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let orig = probe.param_slices()[group][i];
            probe.param_slices_mut()[group][i] = orig + h;
            let up = probe.batch_loss(batch).unwrap();
            probe.param_slices_mut()[group][i] = orig - h;
            let down = probe.batch_loss(batch).unwrap();
            probe.param_slices_mut()[group][i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = crate::seeded_rng(99);
    for seed in 0..5 {
        let model = HeadModel::<f64>::initialize(config(7, 9, seed)).unwrap();
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..7).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let batch: Vec<_> = xs
            .iter()
            .map(|x| Sample {
                feature: x,
                target: std::array::from_fn(|_| rng.random::<f64>()),
            })
            .collect();
        let analytic = model.gradients(&batch).unwrap();
        let numeric = finite_difference(&model, &batch, 1e-6);
        for (a, n) in analytic.param_slices().iter().zip(&numeric) {
            for (a, n) in a.iter().zip(n) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                assert!(rel < 1e-5, "analytic {a} vs numeric {n}");
            }
        }
    }
}

#[test]
fn f32_model_runs() {
    let model = HeadModel::<f32>::initialize(config(4, 6, 1)).unwrap();
    let out = model.forward(&[0.5f32; 4]).unwrap();
    assert_eq!(out.embedding.len(), EMBED_DIM);
    assert!(out.embedding.iter().all(|v| *v >= 0.0));
}

fn small_dataset(n: usize, sigma: f64, dim: usize) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_nodules: n,
        feature_dim: dim,
        doctors_per_nodule: 3,
        noise_sigma: sigma,
        seed: 17,
    })
    .unwrap()
}

#[test]
fn overfits_eight_nodules() {
    let ds = small_dataset(8, 0.5, 16);
    let cfg = HeadConfig {
        epochs: 500,
        batch_size: 1,
        ..config(16, DEFAULT_HIDDEN, 4)
    };
    let (_, report) = train::<f64>(&ds, &cfg).unwrap();
    assert!(report.final_loss < 1e-4, "final loss {}", report.final_loss);
    assert_eq!(report.epoch_losses.len(), 500);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let ds = small_dataset(20, 0.5, 8);
    let cfg = HeadConfig {
        epochs: 5,
        learning_rate: 0.0,
        batch_size: 6,
        ..config(8, 12, 9)
    };
    let (model, report) = train::<f64>(&ds, &cfg).unwrap();
    let init = HeadModel::<f64>::initialize(cfg.clone()).unwrap();
    assert_eq!(model, init);
    let first = report.epoch_losses[0];
    for l in &report.epoch_losses {
        assert!((l - first).abs() <= 1e-12 * first.max(1.0));
    }
}

#[test]
fn training_is_reproducible() {
    let ds = small_dataset(30, 0.5, 8);
    let cfg = HeadConfig {
        epochs: 10,
        batch_size: 7,
        ..config(8, 12, 21)
    };
    let (a, ra) = train::<f64>(&ds, &cfg).unwrap();
    let (b, rb) = train::<f64>(&ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn noiseless_training_drops_loss_by_epoch_fifty() {
    let ds = small_dataset(300, 0.0, 32);
    let cfg = HeadConfig {
        epochs: 50,
        ..config(32, DEFAULT_HIDDEN, 42)
    };
    let (_, report) = train::<f64>(&ds, &cfg).unwrap();
    let (first, last) = (report.epoch_losses[0], report.epoch_losses[49]);
    assert!(last < 0.1 * first, "epoch 1 {first}, epoch 50 {last}");
}

#[test]
fn train_rejects_dimension_mismatch() {
    let ds = small_dataset(5, 0.5, 8);
    assert!(matches!(train::<f64>(&ds, &config(9, 4, 0)), Err(Error::Config(_))));
}

#[test]
fn embed_all_aligns_with_forward() {
    let ds = small_dataset(12, 0.5, 8);
    let model = HeadModel::<f64>::initialize(config(8, 12, 2)).unwrap();
    let embs = embed_all(&model, &ds).unwrap();
    assert_eq!(embs.len(), ds.len());
    for (e, r) in embs.iter().zip(ds.records()) {
        assert_eq!(e.nodule_id, r.nodule_id);
        assert_eq!(e.values, model.forward(r.feature.values()).unwrap().embedding);
    }
    assert_eq!(embs, embed_all(&model, &ds).unwrap());
}

#[test]
fn identical_features_identical_embeddings() {
    let ds = small_dataset(2, 0.5, 8);
    let mut records = ds.records().to_vec();
    records[1].feature = records[0].feature.clone();
    let ds = Dataset::new(records, 8, ds.provenance()).unwrap();
    let model = HeadModel::<f64>::initialize(config(8, 12, 2)).unwrap();
    let embs = embed_all(&model, &ds).unwrap();
    assert_eq!(embs[0].values, embs[1].values);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn clamped_prediction_in_unit_box(seed in any::<u64>(), xs in proptest::collection::vec(-10.0f64..10.0, 5)) {
            let model = HeadModel::<f64>::initialize(config(5, 8, seed)).unwrap();
            let out = model.forward(&xs).unwrap();
            prop_assert!(out.clamped().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(out.embedding.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}
