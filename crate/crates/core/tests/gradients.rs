use posenorm_core::gan::{adversarial_losses, discriminator_objective, generator_objective, GanLossConfig, PairBatch};
use posenorm_core::gradcheck::{check_gradients, TensorCheck};
use posenorm_core::networks::{init_params, ArchConfig};
use posenorm_core::nn::{dropout_mask, Parameters};
use posenorm_core::reid::{classification_objective, Backbone, BackboneArch};
use posenorm_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        base_channels: 2,
        n_res_blocks: 1,
        input_dims: [8, 4],
        discriminator_layers: 2,
    }
}

fn random_batch(n: usize, dims: (usize, usize), seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * n * dims.0 * dims.1)
        .map(|_| rng.random_range(-0.9..0.9))
        .collect();
    Tensor::from_vec(&[3, n, dims.0, dims.1], data).unwrap()
}

fn assert_all(checks: &[TensorCheck]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert!(
            c.relative_error < TOL,
            "{}: relative error {:.3e} (analytic {:.3e}, numeric {:.3e})",
            c.name,
            c.relative_error,
            c.analytic_norm,
            c.numeric_norm
        );
    }
}

#[test]
fn generator_gradient_matches_finite_differences() {
    for mode in ["non_saturating", "original"] {
        let (g, d) = init_params::<f64>(&tiny_arch(), 5).unwrap();
        let batch = PairBatch {
            sources: random_batch(2, (8, 4), 1),
            poses: random_batch(2, (8, 4), 2),
            targets: random_batch(2, (8, 4), 3),
        };
        let cfg: GanLossConfig = serde_json::from_str(&format!(r#"{{"generator_adv_mode": "{mode}"}}"#)).unwrap();
        let (_, grad) = generator_objective(&g, &d, &batch, &cfg).unwrap();
        let checks = check_gradients(&g, &grad, 1e-6, 1e-10, |p| {
            generator_objective(p, &d, &batch, &cfg).unwrap().0
        });
        assert_all(&checks);
    }
}

#[test]
fn discriminator_gradient_matches_and_is_negated_gan_gradient() {
    let (g, d) = init_params::<f64>(&tiny_arch(), 9).unwrap();
    let real = random_batch(3, (8, 4), 4);
    let fake = g
        .forward(&random_batch(3, (8, 4), 5), &random_batch(3, (8, 4), 6))
        .unwrap()
        .output;
    let (_, grad, _, _) = discriminator_objective(&d, &real, &fake).unwrap();
    let l_d = |p: &_| discriminator_objective(p, &real, &fake).unwrap().0.l_d;
    assert_all(&check_gradients(&d, &grad, 1e-6, 1e-10, l_d));

    // L_D = -L_GAN, so the L_GAN gradient is the negated L_D gradient.
    let l_gan = |p: &posenorm_core::networks::Discriminator<f64>| {
        let r: Vec<f64> = p.forward(&real).unwrap().probs;
        let f: Vec<f64> = p.forward(&fake).unwrap().probs;
        adversarial_losses(&r, &f, &GanLossConfig::default()).unwrap().l_gan
    };
    let mut negated = grad.clone();
    negated.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = -*v));
    assert_all(&check_gradients(&d, &negated, 1e-6, 1e-10, l_gan));
}

#[test]
fn backbone_gradient_matches_finite_differences() {
    let arch = BackboneArch {
        base_channels: 2,
        feature_dim: 6,
        tap_stages: vec![1, 2, 3],
        input_dims: [16, 8],
    };
    let mut b = Backbone::<f64>::new(&arch, 3, 2).unwrap();
    // a larger head than the default near-zero init gives measurable gradients
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    b.classifier
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|w| *w = rng.random_range(-0.5..0.5));
    let images = random_batch(3, (16, 8), 7);
    let classes = [0, 2, 1];
    let mask: Vec<f64> = dropout_mask(6 * 3, 0.5, &mut rng);
    let (_, grad) = classification_objective(&b, &images, &classes, Some(mask.clone())).unwrap();
    let checks = check_gradients(&b, &grad, 1e-6, 1e-10, |p| {
        classification_objective(p, &images, &classes, Some(mask.clone()))
            .unwrap()
            .0
    });
    assert_all(&checks);
}
