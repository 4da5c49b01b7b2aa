mod common;

use common::*;
use crowdcount::autodiff::{Tape, Tensor};
use crowdcount::density::{default_kernel_bank, render_density, DotMap};
use crowdcount::grid::DenseGrid;
use crowdcount::losses::{self, BatchTerm, LossWeights, PrimaryCoupling};
use crowdcount::model::{image_tensor, init_model, ModelConfig};
use rand::Rng;

const INSTANCES: u64 = 20;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random probe to turn a map into a scalar with a non-trivial gradient.
fn probe(tape: &mut Tape, x: crowdcount::autodiff::Var, r: &[f64]) -> crowdcount::autodiff::Var {
    let target = tape.constant(t(tape.shape(x).to_vec().as_slice(), r.to_vec()));
    tape.sq_diff_sum(x, target).unwrap()
}

#[test]
fn conv2d_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (cin, cout) = (r.random_range(1..3), r.random_range(1..3));
        let (h, w) = (r.random_range(3..7), r.random_range(3..7));
        let (kh, kw) = ([1, 3][r.random_range(0..2)], [1, 3, 5][r.random_range(0..3)]);
        let dil = r.random_range(1..3);
        let x = t(&[cin, h, w], uniform(&mut r, cin * h * w, -1.0, 1.0));
        let wt = t(&[cout, cin, kh, kw], uniform(&mut r, cout * cin * kh * kw, -1.0, 1.0));
        let b = t(&[cout], uniform(&mut r, cout, -1.0, 1.0));
        let target = uniform(&mut r, cout * h * w, -1.0, 1.0);
        let err = gradcheck(&[x, wt, b], &|tape, xs| {
            let v: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let y = tape.conv2d(v[0], v[1], v[2], dil)?;
            let l = probe(tape, y, &target);
            Ok((v, l))
        });
        assert!(err < FD_REL_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn kernel_convolve_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (h, w) = (r.random_range(2..8), r.random_range(2..8));
        let k = &default_kernel_bank()[seed as usize % 4].weights;
        let x = t(&[1, h, w], uniform(&mut r, h * w, -1.0, 1.0));
        let target = uniform(&mut r, h * w, -1.0, 1.0);
        let err = gradcheck(&[x], &|tape, xs| {
            let v = tape.leaf(xs[0].clone(), true);
            let y = tape.kernel_convolve(v, k)?;
            Ok((vec![v], probe(tape, y, &target)))
        });
        assert!(err < FD_REL_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let n = r.random_range(1..12);
        let a = t(&[1, 1, n], away_from_zero(&mut r, n, 0.05));
        let b = t(&[1, 1, n], uniform(&mut r, n, -1.0, 1.0));
        let (c, s) = (r.random_range(-2.0..2.0), r.random_range(0.5..3.0));
        let target = uniform(&mut r, n, -1.0, 1.0);
        // relu, scale, add, add_scalar, sq_diff_sum
        let err = gradcheck(&[a.clone(), b.clone()], &|tape, xs| {
            let va = tape.leaf(xs[0].clone(), true);
            let vb = tape.leaf(xs[1].clone(), true);
            let ra = tape.relu(va)?;
            let sa = tape.scale(ra, s)?;
            let sum = tape.add(sa, vb)?;
            let shifted = tape.add_scalar(sum, c)?;
            Ok((vec![va, vb], probe(tape, shifted, &target)))
        });
        assert!(err < FD_REL_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn reduction_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let n = r.random_range(1..10);
        let xs = [
            t(&[n], uniform(&mut r, n, -1.0, 1.0)),
            t(&[n], uniform(&mut r, n, -1.0, 1.0)),
        ];
        let offset = r.random_range(0.5..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        // abs(sum(x) + sum(y) + offset) stays away from its kink
        let total: f64 = xs.iter().flat_map(|x| x.data()).sum::<f64>() + offset;
        if total.abs() < 0.05 {
            continue;
        }
        let err = gradcheck(&xs, &|tape, xs| {
            let v: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let s0 = tape.sum_all(v[0])?;
            let s1 = tape.sum_all(v[1])?;
            let s = tape.add_all(&[s0, s1])?;
            let s = tape.add_scalar(s, offset)?;
            let a = tape.abs_scalar(s)?;
            Ok((v, a))
        });
        assert!(err < FD_REL_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut r = rng(400);
    let x = t(&[4], uniform(&mut r, 4, -1.0, 1.0));
    let mut tape = Tape::new();
    let v = tape.leaf(x, true);
    let d = tape.detach(v).unwrap();
    let l = tape.sq_diff_sum(v, d).unwrap();
    let twice = tape.add(l, l).unwrap();
    tape.backward(twice).unwrap();
    // d(x - stop(x))^2/dx = 2(x - x) = 0
    assert!(tape.grad(v).iter().all(|&g| g == 0.0));
}

fn random_map(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize) -> Tensor {
    t(&[1, h, w], uniform(r, h * w, 0.0, 0.1))
}

fn random_dots(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, n: usize) -> DotMap {
    let pts = (0..n)
        .map(|_| [r.random_range(0.0..w as f64), r.random_range(0.0..h as f64)])
        .collect();
    DotMap::new(w, h, pts).unwrap()
}

#[test]
fn mse_and_count_loss_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let (h, w) = (r.random_range(4..9), r.random_range(4..9));
        let dens = render_density(&random_dots(&mut r, h, w, 3), 1.0, 3.0).unwrap();
        let f = random_map(&mut r, h, w);
        let count = f.data().iter().sum::<f64>() + r.random_range(1.0..5.0);
        let err = gradcheck(&[f.clone()], &|tape, xs| {
            let v = tape.leaf(xs[0].clone(), true);
            Ok((vec![v], losses::mse_density_loss(tape, v, &dens)?))
        });
        assert!(err < FD_REL_TOL, "mse seed {seed}: {err}");
        let err = gradcheck(&[f], &|tape, xs| {
            let v = tape.leaf(xs[0].clone(), true);
            Ok((vec![v], losses::count_loss(tape, v, count)?))
        });
        assert!(err < FD_REL_TOL, "count seed {seed}: {err}");
    }
}

#[test]
fn base_loss_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let (h, w) = (r.random_range(4..8), r.random_range(4..8));
        let dens = render_density(&random_dots(&mut r, h, w, 2), 1.0, 3.0).unwrap();
        let full = random_map(&mut r, h, w);
        let weak = random_map(&mut r, h, w);
        let count = weak.data().iter().sum::<f64>() + r.random_range(1.0..5.0);
        let alpha = r.random_range(0.01..1.0);
        let err = gradcheck(&[full, weak], &|tape, xs| {
            let v: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let batch = [
                BatchTerm::Full {
                    prediction: v[0],
                    density: &dens,
                },
                BatchTerm::Weak { prediction: v[1], count },
            ];
            Ok((v, losses::base_loss(tape, &batch, alpha)?))
        });
        assert!(err < FD_REL_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn aux_loss_gradients() {
    let bank = default_kernel_bank();
    for seed in 0..INSTANCES {
        let mut r = rng(700 + seed);
        let (h, w) = (r.random_range(5..9), r.random_range(5..9));
        let maps: Vec<Tensor> = (0..5).map(|_| random_map(&mut r, h, w)).collect();
        let count = 10.0 + r.random_range(0.0..5.0);
        let weights = LossWeights {
            alpha: 0.0,
            beta1: r.random_range(0.1..2.0),
            beta2: r.random_range(0.01..0.5),
        };
        for coupling in [PrimaryCoupling::StopGradient, PrimaryCoupling::Symmetric] {
            let err = gradcheck(&maps[1..], &|tape, xs| {
                // the primary map is a constant here, so finite differences
                // over the auxiliary maps are valid for both couplings
                let f0 = tape.constant(maps[0].clone());
                let aux: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
                let l = losses::aux_loss_with(tape, &aux, f0, &bank, count, &weights, coupling)?;
                Ok((aux, l))
            });
            assert!(err < FD_REL_TOL, "seed {seed} {coupling:?}: {err}");
        }
        // symmetric coupling: the primary map is differentiable too
        let err = gradcheck(&maps, &|tape, xs| {
            let v: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let l = losses::aux_loss_with(tape, &v[1..], v[0], &bank, count, &weights, PrimaryCoupling::Symmetric)?;
            Ok((v, l))
        });
        assert!(err < FD_REL_TOL, "symmetric seed {seed}: {err}");
    }
}

#[test]
fn stop_gradient_primary_receives_nothing() {
    let bank = default_kernel_bank();
    let mut r = rng(800);
    let maps: Vec<Tensor> = (0..5).map(|_| random_map(&mut r, 6, 6)).collect();
    let mut tape = Tape::new();
    let v: Vec<_> = maps.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let l = losses::aux_loss(&mut tape, &v[1..], v[0], &bank, 3.0, &LossWeights::default()).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(v[0]).iter().all(|&g| g == 0.0));
    assert!(tape.grad(v[1]).iter().any(|&g| g != 0.0));
}

/// End to end through a tiny network: gradients of the full objective with
/// respect to every parameter group.
#[test]
fn network_gradients() {
    let config = ModelConfig {
        backbone_channels: vec![2, 2],
        backbone_dilations: vec![1, 2],
        branch_channels: vec![2, 1],
        ..ModelConfig::default()
    }
    .with_aux_branches(2);
    let kernels = config.kernels().unwrap();
    for seed in 0..INSTANCES {
        let mut r = rng(900 + seed);
        let params = init_model(&config, seed).unwrap();
        let img = DenseGrid::from_vec(7, 7, uniform(&mut r, 49, 0.0, 1.0)).unwrap();
        let dens = render_density(&random_dots(&mut r, 7, 7, 2), 1.0, 3.0).unwrap();
        // zero biases put dead units exactly on the ReLU kink
        let inputs: Vec<Tensor> = params
            .all()
            .iter()
            .map(|p| match p.value.shape() {
                [n] => t(&[*n], away_from_zero(&mut r, *n, 0.05)),
                _ => p.value.clone(),
            })
            .collect();
        let w = LossWeights {
            alpha: 0.5,
            beta1: 1.0,
            beta2: 0.3,
        };
        let err = gradcheck(&inputs, &|tape, xs| {
            let mut p = params.clone();
            for (dst, src) in p.all_mut().into_iter().zip(xs) {
                dst.value = src.clone();
            }
            let vars = p.bind(tape);
            let x = tape.constant(image_tensor(&img));
            let (f0, aux) = vars.forward_all(tape, x)?;
            let base = losses::base_loss(
                tape,
                &[
                    BatchTerm::Full {
                        prediction: f0,
                        density: &dens,
                    },
                    BatchTerm::Weak {
                        prediction: f0,
                        count: 40.0,
                    },
                ],
                w.alpha,
            )?;
            let a = losses::aux_loss_with(tape, &aux, f0, &kernels, 40.0, &w, PrimaryCoupling::Symmetric)?;
            let l = tape.add(base, a)?;
            Ok((vars.all(), l))
        });
        assert!(err < FD_REL_TOL, "seed {seed}: {err}");
    }
}
