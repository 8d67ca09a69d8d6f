//! Finite-difference checks for every differentiable layer and for the full
//! tiny network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sahnet::net::{DenseNetConfig, ForwardOptions, Model};
use sahnet::tensor::{finite_diff_check, BatchNormMode, GradCheckOptions, Tape, Tensor, TensorError, Var};

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an output with fixed random weights so every element matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let shape = t.shape(y).to_vec();
    let w = t.leaf(rand_tensor(&mut rng, &shape), false);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check<F>(name: &str, f: F, params: &[Tensor], seed: u64)
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let opts = GradCheckOptions { seed, ..Default::default() };
    let r = finite_diff_check(f, params, &opts).unwrap();
    assert!(r.max_rel_error < TOL, "{name} seed {seed}: {r:?}");
}

const SEEDS: std::ops::Range<u64> = 0..20;

#[test]
fn conv_2d_and_3d() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(
            "conv2d",
            |t, v| {
                let y = t.conv(v[0], v[1], Some(v[2]), &[2, 1], &[1, 1])?;
                project(t, y, seed)
            },
            &[x, w, b],
            seed,
        );
        let x = rand_tensor(&mut rng, &[1, 2, 4, 5, 3]);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
        check(
            "conv3d",
            |t, v| {
                let y = t.conv(v[0], v[1], None, &[1, 2, 1], &[1, 1, 1])?;
                project(t, y, seed)
            },
            &[x, w],
            seed,
        );
    }
}

#[test]
fn batch_norm_train_and_eval() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let g = rand_tensor(&mut rng, &[2]);
        let b = rand_tensor(&mut rng, &[2]);
        check(
            "bn-train",
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
                project(t, y, seed)
            },
            &[x.clone(), g.clone(), b.clone()],
            seed,
        );
        let mean = [0.3, -0.2];
        let var = [1.5, 0.7];
        check(
            "bn-eval",
            |t, v| {
                let mode = BatchNormMode::Eval { mean: &mean, var: &var, eps: 1e-5 };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
                project(t, y, seed)
            },
            &[x, g, b],
            seed,
        );
    }
}

#[test]
fn pooling_relu_concat() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5, 5]);
        let y = rand_tensor(&mut rng, &[2, 1, 5, 5, 5]);
        check(
            "max_pool",
            |t, v| {
                let p = t.max_pool(v[0], &[3, 3, 3], &[2, 2, 2], &[1, 1, 1])?;
                project(t, p, seed)
            },
            std::slice::from_ref(&x),
            seed,
        );
        check(
            "avg_pool",
            |t, v| {
                let p = t.avg_pool(v[0], &[2, 2, 2], &[2, 2, 2])?;
                project(t, p, seed)
            },
            std::slice::from_ref(&x),
            seed,
        );
        check(
            "relu",
            |t, v| {
                let r = t.relu(v[0]);
                project(t, r, seed)
            },
            std::slice::from_ref(&x),
            seed,
        );
        check(
            "concat+gap",
            |t, v| {
                let c = t.concat_channels(&[v[0], v[1]])?;
                let g = t.global_avg_pool(c)?;
                project(t, g, seed)
            },
            &[x, y],
            seed,
        );
    }
}

#[test]
fn linear_softmax_dropout() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 5]);
        let w = rand_tensor(&mut rng, &[5, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let keep: Vec<bool> = (0..12).map(|_| rng.random::<f64>() > 0.3).collect();
        check(
            "linear+softmax+dropout",
            |t, v| {
                let z = t.linear(v[0], v[1], Some(v[2]))?;
                let d = t.dropout(z, &keep, 0.3)?;
                let p = t.softmax(d)?;
                project(t, p, seed)
            },
            &[x, w, b],
            seed,
        );
    }
}

fn full_network(train: bool, seeds: std::ops::Range<u64>, spatial_dims: usize) {
    let model = Model::build(DenseNetConfig::tiny(spatial_dims, 16), 11).unwrap();
    let names: Vec<String> = model.parameter_names().iter().map(|s| s.to_string()).collect();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Perturb normalization affines away from 1/0 so every path is exercised.
        let mut params: Vec<Tensor> = names
            .iter()
            .map(|n| {
                let mut t = model.tensor(n).unwrap().to_tensor();
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
                t
            })
            .collect();
        params.push(rand_tensor(&mut rng, &model.input_shape(2)));
        let n_params = names.len();
        // A train-mode normalization after the stem cancels per-channel
        // shifts, so some stem gradients are zero up to rounding; those are
        // judged on absolute error below 1e-6.
        let opts = GradCheckOptions { seed, max_coords_per_param: Some(3), denominator_floor: 1e-6, ..Default::default() };
        let mode = if train { ForwardOptions::train(seed) } else { ForwardOptions::eval() };
        let report = finite_diff_check(
            |t, v| {
                let bound = model.bind_vars(t, &v[..n_params]).expect("bind");
                let out = model.forward_on(t, &bound, v[n_params], None, mode).expect("forward");
                project(t, out.logits, seed)
            },
            &params,
            &opts,
        )
        .unwrap();
        let worst = names.get(report.worst.0).map_or("input", String::as_str);
        assert!(report.max_rel_error < TOL, "seed {seed} train={train}: {report:?} at {worst}");
    }
}

#[test]
fn tiny_network_volumetric_train_mode() {
    full_network(true, SEEDS, 3);
}

#[test]
fn tiny_network_volumetric_eval_mode() {
    full_network(false, 0..5, 3);
}

#[test]
fn tiny_network_planar() {
    full_network(true, 0..5, 2);
}
