#![allow(dead_code)]

use crowdcount::autodiff::{Tape, Tensor, Var};
use crowdcount::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-1, 1]` with magnitude at least `gap`, so kinks at zero are
/// never crossed by a finite-difference step.
pub fn away_from_zero(r: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.random_range(gap..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Builds the graph from leaf values; returns the leaves and the scalar loss.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Tensor]) -> Result<(Vec<Var>, Var)> + 'a;

/// Worst relative error between reverse-mode and central-difference
/// gradients across all inputs.
pub fn gradcheck(inputs: &[Tensor], build: &Builder<'_>) -> f64 {
    let mut tape = Tape::new();
    let (leaves, loss) = build(&mut tape, inputs).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let (_, l) = build(&mut t, xs).unwrap();
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Direct nested-loop same-padding cross-correlation.
pub fn conv_oracle(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    let (ph, pw) = ((kh / 2 * dilation) as isize, (kw / 2 * dilation) as isize);
    for o in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let mut acc = bias[o];
                for i in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let rr = r as isize + (a * dilation) as isize - ph;
                            let cc = c as isize + (b * dilation) as isize - pw;
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                acc += wt[((o * cin + i) * kh + a) * kw + b] * x[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                }
                out[(o * h + r) * w + c] = acc;
            }
        }
    }
    out
}
