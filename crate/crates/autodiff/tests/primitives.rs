use jscc_autodiff::gradcheck::{primitive_cases, run_case};
use jscc_autodiff::{BatchNormMode, ConvOptions, Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_finite_differences_over_20_seeds() {
    for case in primitive_cases() {
        for seed in 0..20 {
            let report = run_case(&case, None, seed).unwrap();
            assert!(report.worst() < 1e-4, "{} seed {seed}: {:?}", case.name, report.max_rel_error);
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x, w), y> == <x, conv_t(y, w)> for matching geometry
    let opts = ConvOptions::new(2, 2);
    let x: Vec<f64> = (0..2 * 3 * 9 * 9).map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.5).collect();
    let w: Vec<f64> = (0..4 * 3 * 5 * 5).map(|i| ((i * 11) % 13) as f64 / 13.0 - 0.5).collect();
    let mut g = Graph::<f64>::new(0);
    let xi = g.input("x", Tensor::new(vec![2, 3, 9, 9], x.clone()).unwrap()).unwrap();
    let wi = g.input("w", Tensor::new(vec![4, 3, 5, 5], w).unwrap()).unwrap();
    let y = g.conv2d(xi, wi, opts).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 5, 5]);
    let probe: Vec<f64> = (0..g.value(y).numel()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let lhs: f64 = g.value(y).data().iter().zip(&probe).map(|(a, b)| a * b).sum();
    let pi = g.input("probe", Tensor::new(vec![2, 4, 5, 5], probe).unwrap()).unwrap();
    // conv_t with kernel [O, C, kh, kw] maps O channels back to C
    let back = g.conv_transpose2d(pi, wi, opts).unwrap();
    assert_eq!(g.shape(back), &[2, 3, 9, 9]);
    let rhs: f64 = g.value(back).data().iter().zip(&x).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut g = Graph::<f64>::new(0);
    let data: Vec<f64> = (0..4 * 2 * 3).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
    let x = g.input("x", Tensor::new(vec![4, 2, 3], data).unwrap()).unwrap();
    let gamma = g.input("gamma", Tensor::full(&[2], 1.0)).unwrap();
    let beta = g.input("beta", Tensor::zeros(&[2])).unwrap();
    let y = g.batch_norm(x, gamma, beta, BatchNormMode::Train, 1e-5).unwrap();
    let stats = g.batch_statistics(y).unwrap();
    assert_eq!(stats.count, 12);
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| g.value(y).data()[(b * 2 + c) * 3..(b * 2 + c) * 3 + 3].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 12.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - stats.var[c] / (stats.var[c] + 1e-5)).abs() < 1e-9);
    }
}

#[test]
fn reparameterization_gradients() {
    let mut g = Graph::<f64>::new(9);
    let mu = g.param("mu", Tensor::from_f64(&[3], &[0.1, -0.4, 2.0]).unwrap()).unwrap();
    let lv = g.param("lv", Tensor::from_f64(&[3], &[0.3, -1.0, 0.0]).unwrap()).unwrap();
    let z = g.gaussian_sample(mu, lv).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    let eps = g.sample_noise(z).unwrap().to_vec();
    assert_eq!(g.grad(mu).unwrap().data(), &[1.0, 1.0, 1.0]);
    let lvs = g.value(lv).data().to_vec();
    for i in 0..3 {
        let want = 0.5 * (0.5 * lvs[i]).exp() * eps[i];
        assert!((g.grad(lv).unwrap().data()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut g = Graph::<f32>::new(3);
        let x = g.input("x", Tensor::from_f64(&[1, 2, 6, 6], &(0..72).map(|i| i as f64 / 72.0).collect::<Vec<_>>()).unwrap()).unwrap();
        let w = g.param("w", Tensor::from_f64(&[3, 2, 3, 3], &(0..54).map(|i| (i as f64 - 27.0) / 50.0).collect::<Vec<_>>()).unwrap()).unwrap();
        let y = g.conv2d(x, w, ConvOptions::new(1, 1)).unwrap();
        let lv = g.constant(Tensor::zeros(&[1, 3, 6, 6])).unwrap();
        let z = g.gaussian_sample(y, lv).unwrap();
        let s = g.sigmoid(z).unwrap();
        g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn unit_kernel_conv_scales_input(
        c in -3.0f64..3.0,
        h in 1usize..7,
        w in 1usize..7,
        seed in 0u64..1000,
    ) {
        let data: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
        let mut g = Graph::<f64>::new(0);
        let x = g.input("x", Tensor::new(vec![1, 1, h, w], data.clone()).unwrap()).unwrap();
        let k = g.input("k", Tensor::full(&[1, 1, 1, 1], c)).unwrap();
        let y = g.conv2d(x, k, ConvOptions::new(1, 0)).unwrap();
        let want: Vec<f64> = data.iter().map(|v| v * c).collect();
        prop_assert_eq!(g.value(y).data(), &want[..]);
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(v in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
        let mut g = Graph::<f32>::new(0);
        let n = v.len();
        let x = g.input("x", Tensor::new(vec![n], v).unwrap()).unwrap();
        let y = g.sigmoid(x).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&s| (0.0..=1.0).contains(&s)));
    }
}
