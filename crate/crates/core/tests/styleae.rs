use ndtensor::check::{central_difference, relative_error};
use ndtensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styleae::envelope::Record;
use styleae::styleae::{
    attribute_loss, attribute_loss_on_tape, attribute_term, image_loss, lambda_schedule, total_loss,
    total_loss_on_tape, train, AttributeLossMode, Batch, Plugin, TargetCode, TrainConfig, PLUGIN_MAGIC,
};
use styleae::syngen::{Generator, GeneratorSpec};
use styleae::{envelope::Envelope, Error, ImageGrid};

fn small_gen() -> Generator {
    Generator::new(GeneratorSpec {
        seed: 3,
        style_dim: 16,
        height: 16,
        width: 16,
        thresholds: vec![0.5; 4],
    })
    .unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        ramp_epochs: 1,
        batch_size: 32,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn hinge_examples() {
    let h = AttributeLossMode::HingePositive;
    assert_eq!(attribute_term(1.7, 1.0, h).unwrap(), 0.0);
    assert!((attribute_term(0.2, 1.0, h).unwrap() - 0.8).abs() < 1e-15);
    assert!((attribute_term(0.3, 0.0, h).unwrap() - 0.09).abs() < 1e-15);
    assert!(attribute_term(0.3, 0.5, h).is_err());
    assert!(attribute_loss(&[0.1, 0.2], &[1.0], h).is_err());
    let m = AttributeLossMode::Mse;
    assert!((attribute_term(0.2, 1.0, m).unwrap() - 0.64).abs() < 1e-15);
}

#[test]
fn hinge_is_flat_above_one_on_the_tape() {
    let mut tape = Tape::new();
    let c = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.5, 1.3, 0.4]).unwrap());
    let loss = attribute_loss_on_tape(&mut tape, c, &[1.0, 1.0, 1.0, 0.0], AttributeLossMode::HingePositive).unwrap();
    let root = tape.sum(loss);
    let g = tape.backward(root).unwrap();
    let g = g.get(c).unwrap();
    assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
    assert!((g[3] - 0.8).abs() < 1e-15);
}

#[test]
fn schedule_endpoints() {
    assert_eq!(lambda_schedule(0, 0.3, 30), 0.0);
    assert_eq!(lambda_schedule(30, 0.3, 30), 0.3);
    assert_eq!(lambda_schedule(99, 0.3, 30), 0.3);
    assert!((lambda_schedule(15, 0.3, 30) - 0.15).abs() < 1e-15);
}

#[test]
fn encode_splits_into_attributes_and_free_coordinates() {
    let gen = small_gen();
    let plugin = Plugin::new(16, 4, 1).unwrap();
    let w = gen.make_dataset(1, 2).unwrap().remove(0).w;
    let code = plugin.encode(&w).unwrap();
    assert_eq!((code.c.len(), code.s.len()), (4, 12));
    assert_eq!(code, plugin.encode(&w).unwrap());
    let w_hat = plugin.decode(&code).unwrap();
    assert_eq!(w_hat.len(), 16);
    assert!(w_hat.iter().all(|v| v.is_finite()));
    assert_eq!(w_hat, plugin.decode(&code).unwrap());
    assert!(plugin.encode(&w[..15]).is_err());
    let short = TargetCode {
        c: vec![0.0; 3],
        s: vec![0.0; 12],
    };
    assert!(plugin.decode(&short).is_err());
}

#[test]
fn plugin_width_is_fixed() {
    let plugin = Plugin::new(64, 4, 0).unwrap();
    let env = plugin.to_envelope(serde_json::json!({}));
    assert_eq!(env.widths, vec![64, 512, 512, 64]);
}

#[test]
fn image_loss_zero_and_constant_offset() {
    let gen = small_gen();
    let w = gen.make_dataset(1, 5).unwrap().remove(0).w;
    let x = gen.synthesize(&w).unwrap();
    assert_eq!(image_loss(&gen, &x, &w).unwrap(), 0.0);
    let shifted = ImageGrid::new(1, 16, 16, x.data().iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((image_loss(&gen, &shifted, &w).unwrap() - 0.01).abs() < 1e-12);
    assert!(image_loss(&gen, &ImageGrid::filled(1, 8, 8, 0.0), &w).is_err());
}

#[test]
fn image_loss_gradient_through_generator() {
    let gen = small_gen();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gen.synthesize(&gen.make_dataset(1, 6).unwrap()[0].w).unwrap();
    let w_hat = gen.make_dataset(1, 7).unwrap().remove(0).w;
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::matrix(1, 16, w_hat.clone()).unwrap());
    let img = gen.render_on_tape(&mut tape, wv).unwrap();
    let target = tape.constant(Tensor::matrix(1, 256, x.data().to_vec()).unwrap());
    let d = tape.sub(img, target).unwrap();
    let sq = tape.square(d);
    let root = tape.mean(sq);
    assert!((tape.value(root).item() - image_loss(&gen, &x, &w_hat).unwrap()).abs() < 1e-15);
    let grad = tape.backward(root).unwrap().get(wv).unwrap().to_vec();
    for _ in 0..16 {
        let j = rng.random_range(0..16);
        let numeric = central_difference(&mut |v| image_loss(&gen, &x, v).unwrap(), &w_hat, j, 1e-5);
        assert!(relative_error(grad[j], numeric) <= 1e-4, "{j}: {} vs {numeric}", grad[j]);
    }
}

#[test]
fn total_loss_at_zero_lambda_is_the_image_term() {
    let gen = small_gen();
    let plugin = Plugin::new(16, 4, 2).unwrap();
    let records = gen.make_dataset(8, 9).unwrap();
    let refs: Vec<&Record> = records.iter().collect();
    let batch = Batch::from_records(&gen, &refs).unwrap();
    let mut tape = Tape::no_grad();
    let bound = plugin.params().bind_frozen(&mut tape);
    let w = tape.constant(batch.w.clone());
    let vars = total_loss_on_tape(
        &mut tape,
        &plugin,
        &bound,
        &gen,
        w,
        &batch.images,
        &batch.labels,
        0.0,
        AttributeLossMode::HingePositive,
    )
    .unwrap();
    assert_eq!(
        tape.value(vars.total).item().to_bits(),
        tape.value(vars.image).item().to_bits()
    );
    let config = small_config(3);
    assert_eq!(total_loss(&plugin, &gen, &refs, 0, &config).unwrap(), tape.value(vars.image).item());
    assert!(matches!(
        total_loss(&plugin, &gen, &[], 0, &config),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn perfect_reconstruction_and_placed_codes_give_zero_loss() {
    let gen = small_gen();
    let records = gen.make_dataset(4, 1).unwrap();
    let refs: Vec<&Record> = records.iter().collect();
    let batch = Batch::from_records(&gen, &refs).unwrap();
    let mut tape = Tape::no_grad();
    let x_hat = tape.constant(batch.images.clone());
    let x = tape.constant(batch.images.clone());
    let d = tape.sub(x_hat, x).unwrap();
    let sq = tape.square(d);
    let image = tape.row_sums(sq).unwrap();
    let c = tape.constant(Tensor::new(&[4, 4], batch.labels.clone()).unwrap());
    let attr = attribute_loss_on_tape(&mut tape, c, &batch.labels, AttributeLossMode::HingePositive).unwrap();
    let weighted = tape.scale(attr, 0.3);
    let per_sample = tape.add(image, weighted).unwrap();
    let total = tape.mean(per_sample);
    assert_eq!(tape.value(total).item(), 0.0);
}

#[test]
fn training_is_deterministic_and_leaves_the_generator_alone() {
    let gen = small_gen();
    let before = gen.weights_hash();
    let records = gen.make_dataset(128, 12).unwrap();
    let config = small_config(2);
    let a = train(&config, &gen, &records, &mut |_| {}).unwrap();
    let b = train(&config, &gen, &records, &mut |_| {}).unwrap();
    assert_eq!(
        a.to_envelope().to_bytes().unwrap(),
        b.to_envelope().to_bytes().unwrap()
    );
    assert_eq!(gen.weights_hash(), before);
    assert_eq!(a.generator_hash, before);
    let other = train(&TrainConfig { seed: 5, ..config }, &gen, &records, &mut |_| {}).unwrap();
    assert_ne!(other.plugin.content_hash(), a.plugin.content_hash());
}

#[test]
fn training_reduces_the_loss() {
    let gen = small_gen();
    let records = gen.make_dataset(256, 13).unwrap();
    let config = TrainConfig {
        lambda_max: 0.0,
        ..small_config(6)
    };
    let mut firsts = Vec::new();
    let mut lasts = Vec::new();
    for seed in 0..3 {
        let report = train(&TrainConfig { seed, ..config.clone() }, &gen, &records, &mut |_| {}).unwrap();
        firsts.push(report.history.first().unwrap().total);
        lasts.push(report.history.last().unwrap().total);
    }
    firsts.sort_by(f64::total_cmp);
    lasts.sort_by(f64::total_cmp);
    assert!(lasts[1] < firsts[1], "{firsts:?} -> {lasts:?}");
}

#[test]
fn divergent_training_aborts_with_location() {
    let gen = small_gen();
    let records = gen.make_dataset(64, 14).unwrap();
    let config = TrainConfig {
        lr: 1e300,
        ..small_config(3)
    };
    match train(&config, &gen, &records, &mut |_| {}) {
        Err(Error::NonFiniteLoss { at, value }) => {
            assert!(at.starts_with("epoch "), "{at}");
            assert!(at.contains("batch "), "{at}");
            assert!(!value.is_finite());
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            ramp_epochs: 200,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambda_max: -0.1,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let err = serde_json::from_str::<TrainConfig>(r#"{"epocs": 3}"#);
    assert!(err.is_err());
}

#[test]
fn checkpoint_roundtrip() {
    let gen = small_gen();
    let records = gen.make_dataset(64, 15).unwrap();
    let report = train(&small_config(1), &gen, &records, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.sae");
    report.to_envelope().write_to(&path).unwrap();
    let env = Envelope::read_from(&path, PLUGIN_MAGIC).unwrap();
    assert_eq!(env.trailer["generator_hash"], gen.weights_hash());
    let back = Plugin::from_envelope(&env).unwrap();
    assert_eq!(back.content_hash(), report.plugin.content_hash());
    assert!(Envelope::read_from(&path, b"PRB1").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_keeps_dimension(w in prop::collection::vec(-3.0f64..3.0, 16)) {
        let plugin = Plugin::new(16, 4, 7).unwrap();
        let code = plugin.encode(&w).unwrap();
        prop_assert_eq!(code.c.len() + code.s.len(), 16);
        prop_assert_eq!(plugin.decode(&code).unwrap().len(), 16);
        prop_assert_eq!(TargetCode::from_flat(&code.to_flat(), 4).unwrap(), code);
    }

    #[test]
    fn hinge_is_indifferent_above_one(a in 1.0f64..50.0, b in 1.0f64..50.0) {
        let h = AttributeLossMode::HingePositive;
        prop_assert_eq!(attribute_term(a, 1.0, h).unwrap(), attribute_term(b, 1.0, h).unwrap());
    }

    #[test]
    fn schedule_is_monotone(max in 0.0f64..2.0, ramp in 1usize..60, e in 0usize..200) {
        prop_assert!(lambda_schedule(e, max, ramp) <= lambda_schedule(e + 1, max, ramp));
        prop_assert!(lambda_schedule(e, max, ramp) <= max);
    }

    #[test]
    fn attribute_losses_are_non_negative(
        c in prop::collection::vec(-5.0f64..5.0, 4),
        y in prop::collection::vec(0u8..2, 4),
    ) {
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        for mode in [AttributeLossMode::Mse, AttributeLossMode::HingePositive] {
            prop_assert!(attribute_loss(&c, &y, mode).unwrap() >= 0.0);
        }
    }
}
