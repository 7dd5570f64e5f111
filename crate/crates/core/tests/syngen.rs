use std::collections::HashSet;

use ndtensor::check::{central_difference, relative_error};
use ndtensor::{OpKind, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styleae::syngen::{param, Generator, GeneratorSpec, ATTRIBUTE_PARAMS, PARAM_COUNT};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn default_gen() -> Generator {
    Generator::new(GeneratorSpec::default()).unwrap()
}

fn random_w(gen: &Generator, seed: u64) -> Vec<f64> {
    gen.make_dataset(1, seed).unwrap().remove(0).w
}

#[test]
fn sample_z_is_deterministic_and_standard_normal() {
    let gen = default_gen();
    let a = gen.sample_z(100_000, 11).unwrap();
    assert_eq!(a, gen.sample_z(100_000, 11).unwrap());
    assert_ne!(a, gen.sample_z(100_000, 12).unwrap());
    let d = gen.style_dim();
    let n = 100_000.0;
    for j in 0..d {
        let col = a.data().iter().skip(j).step_by(d);
        let mean = col.clone().sum::<f64>() / n;
        let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.02, "coordinate {j}: mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "coordinate {j}: variance {var}");
    }
}

#[test]
fn map_at_zero_is_stable() {
    let gen = default_gen();
    let z = vec![0.0; gen.style_dim()];
    let w = gen.map(&z).unwrap();
    assert_eq!(w, gen.map(&z).unwrap());
    assert!(w.iter().any(|v| *v != 0.0));
    assert!(gen.map(&vec![0.0; gen.style_dim() + 1]).is_err());
}

/// d w_i / d z_j by reverse mode, one output coordinate at a time.
fn map_jacobian_row(gen: &Generator, z: &[f64], i: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let zv = tape.leaf(Tensor::matrix(1, z.len(), z.to_vec()).unwrap());
    let w = gen.map_on_tape(&mut tape, zv).unwrap();
    let wi = tape.slice_cols(w, i, i + 1).unwrap();
    let root = tape.sum(wi);
    tape.backward(root).unwrap().get(zv).unwrap().to_vec()
}

#[test]
fn map_gradient_matches_finite_differences() {
    let gen = default_gen();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10 {
        let z = gen.sample_z(1, 100 + trial).unwrap().into_data();
        let i = rng.random_range(0..gen.style_dim());
        let analytic = map_jacobian_row(&gen, &z, i);
        for _ in 0..8 {
            let j = rng.random_range(0..z.len());
            let numeric = central_difference(&mut |x| gen.map(x).unwrap()[i], &z, j, H);
            let err = relative_error(analytic[j], numeric);
            assert!(err <= TOL, "dw{i}/dz{j}: {} vs {numeric} ({err:e})", analytic[j]);
        }
    }
}

#[test]
fn scene_params_lie_strictly_inside_unit_interval() {
    let gen = default_gen();
    let w = gen.map_rows(&gen.sample_z(500, 3).unwrap()).unwrap();
    let p = gen.scene_rows(&w).unwrap();
    assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    let w0 = random_w(&gen, 8);
    assert_eq!(gen.scene_params(&w0).unwrap(), gen.scene_params(&w0).unwrap());
}

#[test]
fn single_coordinate_perturbation_moves_most_parameters() {
    let gen = default_gen();
    for seed in 0..5 {
        let w = random_w(&gen, seed);
        let p = gen.scene_params(&w).unwrap();
        for j in 0..gen.style_dim() {
            let mut moved = w.clone();
            moved[j] += 1e-3;
            let q = gen.scene_params(&moved).unwrap();
            let changed = p.iter().zip(&q).filter(|(a, b)| (*a - *b).abs() > 1e-9).count();
            assert!(changed >= PARAM_COUNT - 1, "coordinate {j}: only {changed} parameters moved");
        }
    }
}

#[test]
fn synthesized_pixels_lie_in_unit_interval() {
    let gen = default_gen();
    let w = gen.map_rows(&gen.sample_z(200, 4).unwrap()).unwrap();
    assert!(gen.render_rows(&w).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

/// Gradient of one pixel with respect to `w`.
fn pixel_gradient(gen: &Generator, w: &[f64], pixel: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::matrix(1, w.len(), w.to_vec()).unwrap());
    let img = gen.render_on_tape(&mut tape, wv).unwrap();
    let px = tape.slice_cols(img, pixel, pixel + 1).unwrap();
    let root = tape.sum(px);
    tape.backward(root).unwrap().get(wv).unwrap().to_vec()
}

#[test]
fn pixel_gradients_match_finite_differences() {
    let gen = default_gen();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_w(&gen, 77);
    for _ in 0..20 {
        let pixel = rng.random_range(0..gen.pixels());
        let j = rng.random_range(0..gen.style_dim());
        let analytic = pixel_gradient(&gen, &w, pixel)[j];
        let numeric = central_difference(&mut |x| gen.synthesize(x).unwrap().data()[pixel], &w, j, H);
        let err = relative_error(analytic, numeric);
        assert!(err <= TOL, "pixel {pixel}, coordinate {j}: {analytic} vs {numeric}");
    }
}

#[test]
fn image_functional_gradient_holds_on_100_random_styles() {
    let gen = default_gen();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let weights: Vec<f64> = (0..gen.pixels()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let functional = |x: &[f64]| -> f64 {
        let img = gen.synthesize(x).unwrap();
        img.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let records = gen.make_dataset(100, 606).unwrap();
    for rec in &records {
        let mut tape = Tape::new();
        let wv = tape.leaf(Tensor::matrix(1, rec.w.len(), rec.w.clone()).unwrap());
        let img = gen.render_on_tape(&mut tape, wv).unwrap();
        let c = tape.constant(Tensor::matrix(1, weights.len(), weights.clone()).unwrap());
        let prod = tape.mul(img, c).unwrap();
        let root = tape.sum(prod);
        let grad = tape.backward(root).unwrap().get(wv).unwrap().to_vec();
        let j = rng.random_range(0..rec.w.len());
        let numeric = central_difference(&mut |x| functional(x), &rec.w, j, H);
        let err = relative_error(grad[j], numeric);
        assert!(err <= TOL, "coordinate {j}: {} vs {numeric}", grad[j]);
    }
}

#[test]
fn degenerate_scene_renders_a_constant_image() {
    let gen = default_gen();
    let mut p = vec![0.5; PARAM_COUNT];
    p[param::BACKGROUND] = 1.0;
    p[param::INTENSITY] = 0.0;
    p[param::STRIPE_AMPLITUDE] = 0.0;
    let img = gen.render_params(&p).unwrap();
    let first = img.data()[0];
    assert!(img.data().iter().all(|v| *v == first));
    let mut dark = p.clone();
    dark[param::BACKGROUND] = 0.0;
    assert!(gen.render_params(&dark).unwrap().data()[0] < first);
}

#[test]
fn oracle_thresholds_default_generator() {
    let gen = default_gen();
    let mut p = vec![0.5; PARAM_COUNT];
    for (k, &j) in ATTRIBUTE_PARAMS.iter().enumerate() {
        p[j] = gen.thresholds()[k] + 0.3;
        assert_eq!(gen.labels_from_params(&p)[k], 1);
        p[j] = gen.thresholds()[k] - 0.3;
        assert_eq!(gen.labels_from_params(&p)[k], 0);
    }
}

#[test]
fn default_thresholds_balance_labels() {
    let gen = default_gen();
    let records = gen.make_dataset(10_000, 4242).unwrap();
    for k in 0..gen.attrs() {
        let rate = records.iter().filter(|r| r.labels[k] == 1).count() as f64 / records.len() as f64;
        assert!((0.3..=0.7).contains(&rate), "attribute {k}: positive rate {rate}");
    }
}

#[test]
fn calibration_reproduces_shipped_thresholds() {
    let spec = GeneratorSpec::calibrate(1, 64, 32, 32).unwrap();
    assert_eq!(spec, GeneratorSpec::default());
}

#[test]
fn datasets_are_reproducible_consistent_and_disjoint() {
    let gen = default_gen();
    let hash = |records: &[styleae::envelope::Record]| {
        styleae::envelope::hash_arrays(records.iter().map(|r| r.w.as_slice()))
    };
    let a = gen.make_dataset(10_000, 9).unwrap();
    assert_eq!(hash(&a), hash(&gen.make_dataset(10_000, 9).unwrap()));
    for rec in a.iter().take(500) {
        assert_eq!(gen.oracle_labels(&rec.w).unwrap(), rec.labels);
    }
    let b = gen.make_dataset(2_000, 10).unwrap();
    let seen: HashSet<Vec<u64>> = a.iter().map(|r| r.w.iter().map(|v| v.to_bits()).collect()).collect();
    assert!(b
        .iter()
        .all(|r| !seen.contains(&r.w.iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
}

#[test]
fn generator_weights_never_enter_the_tape_as_tracked_leaves() {
    let gen = default_gen();
    let mut tape = Tape::new();
    let z = tape.leaf(gen.sample_z(2, 1).unwrap());
    let w = gen.map_on_tape(&mut tape, z).unwrap();
    let img = gen.render_on_tape(&mut tape, w).unwrap();
    let root = tape.mean(img);
    let tracked: Vec<_> = tape
        .vars()
        .filter(|&v| tape.op_kind(v) == OpKind::Leaf && tape.is_tracked(v))
        .collect();
    assert_eq!(tracked, vec![z]);
    let grads = tape.backward(root).unwrap();
    assert!(grads.get(z).is_some());
}

#[test]
fn weights_are_a_function_of_the_seed() {
    let a = default_gen();
    let b = default_gen();
    assert_eq!(a.weights_hash(), b.weights_hash());
    let other = Generator::new(GeneratorSpec {
        seed: 2,
        ..GeneratorSpec::default()
    })
    .unwrap();
    assert_ne!(a.weights_hash(), other.weights_hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labels_follow_thresholds(p in prop::collection::vec(0.001f64..0.999, PARAM_COUNT)) {
        let gen = default_gen();
        let labels = gen.labels_from_params(&p);
        for (k, &j) in ATTRIBUTE_PARAMS.iter().enumerate() {
            prop_assert_eq!(labels[k], u8::from(p[j] > gen.thresholds()[k]));
        }
    }

    #[test]
    fn any_style_renders_in_range(z in prop::collection::vec(-4.0f64..4.0, 64)) {
        let gen = default_gen();
        let w = gen.map(&z).unwrap();
        let p = gen.scene_params(&w).unwrap();
        prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        let img = gen.synthesize(&w).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(gen.synthesize(&w).unwrap(), img);
    }
}
