//! Central finite-difference checks of tape adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvOptions, LabelMap, Padding, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

/// Relative error whose denominator never drops below `floor`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the adjoints of scalar-valued `f` against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input,
/// returning the largest relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_floor(f, inputs, eps, 1e-8)
}

/// [`grad_check`] with a caller-chosen denominator floor, for functions
/// whose smallest adjoints sit near the roundoff of the differences.
pub fn grad_check_floor<F>(f: F, inputs: &[Tensor<f64>], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got shape {}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error_floor(analytic[j], numeric, floor));
        }
    }
    Ok(worst)
}

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Threshold for single primitives.
pub const OP_THRESHOLD: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform values bounded away from zero by `margin`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() > margin {
            break v;
        }
    })
}

/// Values whose 2x2 pooling windows have a unique maximum by at least `gap`.
fn distinct_windows(rng: &mut ChaCha8Rng, shape: Shape, gap: f64) -> Tensor<f64> {
    loop {
        let t = uniform(rng, shape);
        let ok = (0..shape.n()).all(|n| {
            (0..shape.c()).all(|c| {
                (0..shape.h() / 2).all(|y| {
                    (0..shape.w() / 2).all(|x| {
                        let mut v = [
                            t.at([n, c, 2 * y, 2 * x]),
                            t.at([n, c, 2 * y, 2 * x + 1]),
                            t.at([n, c, 2 * y + 1, 2 * x]),
                            t.at([n, c, 2 * y + 1, 2 * x + 1]),
                        ];
                        v.sort_by(f64::total_cmp);
                        v[3] - v[2] > gap
                    })
                })
            })
        });
        if ok {
            return t;
        }
    }
}

fn projection(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reduces a tensor-valued op to a scalar by a fixed random projection.
fn check_projected<G>(rng: &mut ChaCha8Rng, name: &str, inputs: Vec<Tensor<f64>>, eps: f64, op: G) -> Result<CheckResult>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let probe = op(&mut tape, &vars)?;
    let weights = projection(rng, tape.value(probe).len());
    let err = grad_check(
        |t, v| {
            let y = op(t, v)?;
            t.dot_const(y, &weights)
        },
        &inputs,
        eps,
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: err,
        threshold: OP_THRESHOLD,
    })
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, classes: u32) -> LabelMap {
    LabelMap::new(n, h, w, (0..n * h * w).map(|_| rng.random_range(0..classes)).collect()).expect("label shape")
}

/// Finite-difference check of every differentiable primitive on small
/// random tensors.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-4;
    let mut results = Vec::new();

    for (k, dilation) in [(1usize, 1usize), (3, 1), (3, 2), (3, 4)] {
        let x = uniform(&mut rng, Shape::new(2, 3, 8, 8));
        let w = uniform(&mut rng, Shape::new(4, 3, k, k));
        let b = uniform(&mut rng, Shape::new(4, 1, 1, 1));
        results.push(check_projected(
            &mut rng,
            &format!("conv2d k={k} dilation={dilation} same"),
            vec![x, w, b],
            eps,
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvOptions::dilated(dilation)),
        )?);
    }
    {
        let x = uniform(&mut rng, Shape::new(1, 2, 7, 6));
        let w = uniform(&mut rng, Shape::new(3, 2, 3, 3));
        let b = uniform(&mut rng, Shape::new(3, 1, 1, 1));
        let opts = ConvOptions {
            stride: 2,
            dilation: 1,
            padding: Padding::Valid,
        };
        results.push(check_projected(&mut rng, "conv2d k=3 stride=2 valid", vec![x, w, b], eps, move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), opts)
        })?);
    }
    {
        let x = uniform(&mut rng, Shape::new(2, 3, 4, 3));
        let w = uniform(&mut rng, Shape::new(3, 2, 2, 2));
        let b = uniform(&mut rng, Shape::new(2, 1, 1, 1));
        results.push(check_projected(&mut rng, "conv_transpose2x2", vec![x, w, b], eps, |t, v| {
            t.conv_transpose2x2(v[0], v[1], Some(v[2]))
        })?);
    }
    {
        let x = distinct_windows(&mut rng, Shape::new(2, 2, 8, 6), 1e-3);
        results.push(check_projected(&mut rng, "maxpool2x2", vec![x], eps, |t, v| t.maxpool2x2(v[0]))?);
    }
    for (oh, ow) in [(8usize, 8usize), (3, 5), (4, 4)] {
        let x = uniform(&mut rng, Shape::new(1, 2, 4, 4));
        results.push(check_projected(
            &mut rng,
            &format!("resize_bilinear 4x4->{oh}x{ow}"),
            vec![x],
            eps,
            move |t, v| t.resize_bilinear(v[0], oh, ow),
        )?);
    }
    {
        let a = uniform(&mut rng, Shape::new(2, 2, 3, 4));
        let b = uniform(&mut rng, Shape::new(2, 3, 3, 4));
        results.push(check_projected(&mut rng, "concat_channels", vec![a, b], eps, |t, v| {
            t.concat_channels(&[v[0], v[1]])
        })?);
    }
    {
        let x = uniform(&mut rng, Shape::new(2, 5, 3, 3));
        results.push(check_projected(&mut rng, "slice_channels", vec![x], eps, |t, v| t.slice_channels(v[0], 1, 3))?);
    }
    {
        let x = away_from_zero(&mut rng, Shape::new(1, 3, 8, 8), 1e-3);
        results.push(check_projected(&mut rng, "relu", vec![x], eps, |t, v| Ok(t.relu(v[0])))?);
    }
    {
        let x = uniform(&mut rng, Shape::new(2, 3, 4, 5));
        let labels = random_labels(&mut rng, 2, 4, 5, 3);
        let mask: Vec<bool> = (0..labels.len()).map(|_| rng.random_bool(0.7)).collect();
        let err = grad_check(|t, v| t.softmax_cross_entropy(v[0], &labels, Some(&mask)), &[x], eps)?;
        results.push(CheckResult {
            name: "softmax_cross_entropy".into(),
            max_rel_error: err,
            threshold: OP_THRESHOLD,
        });
    }
    results.push(composite_check(&mut rng)?);
    Ok(results)
}

/// conv -> relu -> cross-entropy on a 1x1x8x8 input at `eps = 1e-4`, with
/// inputs resampled until no pre-activation sits within reach of the kink
/// and no adjoint is vanishingly small.
fn composite_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let eps = 1e-4;
    loop {
        let x = uniform(rng, Shape::new(1, 1, 8, 8));
        let w1 = uniform(rng, Shape::new(3, 1, 3, 3));
        let b1 = uniform(rng, Shape::new(3, 1, 1, 1));
        let w2 = uniform(rng, Shape::new(2, 3, 1, 1));
        let b2 = uniform(rng, Shape::new(2, 1, 1, 1));
        let labels = random_labels(rng, 1, 8, 8, 2);
        let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let h = t.conv2d(v[0], v[1], Some(v[2]), ConvOptions::default())?;
            let h = t.relu(h);
            let y = t.conv2d(h, v[3], Some(v[4]), ConvOptions::default())?;
            t.softmax_cross_entropy(y, &labels, None)
        };
        let inputs = [x, w1, b1, w2, b2];
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let pre = tape.conv2d(vars[0], vars[1], Some(vars[2]), ConvOptions::default())?;
        // A perturbation of size eps in any input moves a pre-activation by at
        // most eps * (9 + 9 + 1).
        if tape.value(pre).data().iter().any(|v| v.abs() < 40.0 * eps) {
            continue;
        }
        // Adjoints this close to zero fall under the relative-error floor,
        // where rounding in the differences dominates.
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        let tiny = vars
            .iter()
            .any(|v| tape.grad(*v).is_some_and(|g| g.iter().any(|a| a.abs() < 1e-6)));
        if tiny {
            continue;
        }
        let err = grad_check(f, &inputs, eps)?;
        return Ok(CheckResult {
            name: "conv2d -> relu -> softmax_cross_entropy".into(),
            max_rel_error: err,
            threshold: OP_THRESHOLD,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 3), |[_, _, y, x]| (y * 3 + x) as f64 * 0.1);
        let w = [0.5, -1.0, 2.0, 0.25, 3.0, -0.75];
        let err = grad_check(|t, v| t.dot_const(v[0], &w), &[x], 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_scalar_function_is_a_usage_error() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let r = grad_check(|t, v| Ok(t.relu(v[0])), &[x], 1e-3);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn maxpool_at_strict_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = distinct_windows(&mut rng, Shape::new(1, 1, 4, 4), 1e-2);
        let w = projection(&mut rng, 4);
        let err = grad_check(
            |t, v| {
                let y = t.maxpool2x2(v[0])?;
                t.dot_const(y, &w)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
