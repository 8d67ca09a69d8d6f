use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sahnet::net::{DenseNetConfig, ForwardOptions, MetadataSpec, Model, Stage};
use sahnet::tensor::{Tape, Tensor};

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn any_config() -> impl Strategy<Value = DenseNetConfig> {
    (
        prop::collection::vec(1usize..4, 1..4),
        1usize..6,
        1usize..9,
        1usize..4,
        0.2f64..=1.0,
        prop::collection::vec(12usize..34, 2),
    )
        .prop_map(|(block_layers, growth_rate, init_channels, bn_size, compression, input_shape)| DenseNetConfig {
            spatial_dims: 2,
            block_layers,
            growth_rate,
            init_channels,
            bn_size,
            compression,
            input_shape,
            ..DenseNetConfig::tiny(2, 16)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn channel_bookkeeping_matches_forward_shapes(cfg in any_config(), seed in any::<u64>()) {
        prop_assume!(cfg.plan().is_ok());
        let model = Model::build(cfg.clone(), seed).unwrap();
        let plan = model.plan().clone();
        let mut c = cfg.init_channels;
        for stage in &plan.stages {
            match stage {
                Stage::Stem { channels, .. } => prop_assert_eq!(*channels, c),
                Stage::Block { index, layers, in_channels, out_channels } => {
                    prop_assert_eq!(*in_channels, c);
                    prop_assert_eq!(*out_channels, c + layers * cfg.growth_rate);
                    for l in 0..*layers {
                        let norm = model.tensor(&format!("block{index}.layer{}.norm1.weight", l + 1)).unwrap();
                        prop_assert_eq!(norm.data.len(), c + l * cfg.growth_rate);
                    }
                    c = *out_channels;
                }
                Stage::Transition { in_channels, out_channels, .. } => {
                    prop_assert_eq!(*in_channels, c);
                    prop_assert_eq!(*out_channels, (cfg.compression * c as f64).floor() as usize);
                    c = *out_channels;
                }
            }
        }
        prop_assert_eq!(plan.feature_width, c);
        prop_assert_eq!(model.head_input_width(), c);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| false);
        let x = tape.leaf(random(&model.input_shape(2), seed, 1.0), false);
        let out = model.forward_on(&mut tape, &bound, x, None, ForwardOptions::train(seed)).unwrap();
        prop_assert_eq!(tape.shape(out.features), &[2, c][..]);
        // The transition convolution runs before its pooling, at the
        // extent of the preceding stage.
        let mut extent = Vec::new();
        for stage in &plan.stages {
            match stage {
                Stage::Stem { spatial, .. } => extent = spatial.clone(),
                Stage::Transition { index, out_channels, spatial, .. } => {
                    let a = out.activation(&format!("transition{index}.conv")).unwrap();
                    let mut want = vec![2, *out_channels];
                    want.extend(&extent);
                    prop_assert_eq!(tape.shape(a), want.as_slice());
                    prop_assert_eq!(spatial.clone(), extent.iter().map(|s| s / 2).collect::<Vec<_>>());
                    extent = spatial.clone();
                }
                Stage::Block { .. } => {}
            }
        }
    }

    #[test]
    fn predicted_probabilities_sum_to_one(seed in any::<u64>(), scale in 0.1f64..50.0, n in 1usize..4) {
        let model = Model::build(DenseNetConfig::tiny(2, 16), seed).unwrap();
        let p = model.forward(&random(&model.input_shape(n), seed ^ 1, scale), None).unwrap();
        for row in p.data().chunks(2) {
            prop_assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zeroed_metadata_weights_reproduce_image_model(seed in any::<u64>(), n in 1usize..4, scale in 0.1f64..100.0) {
        let model = Model::build(DenseNetConfig::tiny(2, 16), seed).unwrap();
        let mut fused = model.fuse_metadata(MetadataSpec::default(), seed ^ 7).unwrap();
        let f = model.head_input_width();
        let mut w = fused.tensor("head.weight").unwrap().data.clone();
        w[f * 2..].iter_mut().for_each(|v| *v = 0.0);
        fused.set_tensor("head.weight", w).unwrap();
        let x = random(&model.input_shape(n), seed ^ 2, 1.0);
        let meta = random(&[n, 8], seed ^ 3, scale);
        let a = model.forward(&x, None).unwrap();
        let b = fused.forward(&x, Some(&meta)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
