//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvOptions;
use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::BatchNormMode;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative accuracy the check is meant to certify.
pub const TARGET_REL: f64 = 1e-4;

/// Seed of the graph every evaluation runs on, so stochastic nodes see the
/// same noise for the analytic pass and all perturbed passes.
const GRAPH_SEED: u64 = 0x5eed;

/// Sampling range for a randomly generated input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    /// Uniform on `[-1, 1]`.
    Symmetric,
    /// Uniform on `[0.5, 2]`.
    Positive,
    /// Uniform on `[0, 1]`, e.g. pixel intensities.
    Unit,
    /// `±U[0.2, 1]`, keeping clear of kinks at zero.
    AwayFromZero,
}

impl Domain {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            Domain::Symmetric => rng.random_range(-1.0..1.0),
            Domain::Positive => rng.random_range(0.5..2.0),
            Domain::Unit => rng.random_range(0.05..0.95),
            Domain::AwayFromZero => {
                let m = rng.random_range(0.2..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        }
    }
}

pub type BuildFn = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Send + Sync;

/// A named differentiable computation with default input shapes.
pub struct GradCase {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub domains: Vec<Domain>,
    pub build: Box<BuildFn>,
}

impl GradCase {
    pub fn new(
        name: &str,
        shapes: Vec<Vec<usize>>,
        domains: Vec<Domain>,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Send + Sync + 'static,
    ) -> Self {
        assert_eq!(shapes.len(), domains.len());
        Self {
            name: name.to_string(),
            shapes,
            domains,
            build: Box::new(build),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub op: String,
    pub seed: u64,
    /// Largest relative error for each input, measured against
    /// [`resolution_floor`].
    pub max_rel_error: Vec<f64>,
    /// Same, with a fixed `1e-8` floor instead.
    pub max_raw_rel_error: Vec<f64>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_raw(&self) -> f64 {
        self.max_raw_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Smallest derivative a central difference at [`FD_STEP`] resolves to
/// [`TARGET_REL`] when the checked scalar has magnitude `value`. Rounding in
/// `f(x ± h)` is about `ε·|f|`, so the difference quotient carries roughly
/// `ε·|f| / h` of absolute noise. Smaller derivatives are judged on this scale.
pub fn resolution_floor(value: f64) -> f64 {
    f64::EPSILON * value.abs().max(1.0) / FD_STEP / TARGET_REL
}

/// Reduces any output to a scalar through a fixed random projection so that
/// every output element participates in the check.
fn projected(
    build: &BuildFn,
    inputs: &[Tensor<f64>],
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new(GRAPH_SEED);
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("in{i}"), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &ids)?;
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        let shape = g.shape(out).to_vec();
        let n = g.value(out).numel();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap()
    });
    let wid = g.constant(w.clone())?;
    let prod = g.mul(out, wid)?;
    let loss = g.sum(prod)?;
    Ok((g, ids, loss))
}

/// Compares analytic gradients of `build` at `inputs` against central
/// differences, elementwise, for every input.
pub fn check_gradients(name: &str, build: &BuildFn, inputs: &[Tensor<f64>], seed: u64) -> Result<GradcheckReport> {
    let mut weights = None;
    let (mut g, ids, loss) = projected(build, inputs, &mut weights, seed)?;
    g.backward(loss)?;
    let floor = resolution_floor(g.value(loss).data()[0]);
    let mut report = GradcheckReport {
        op: name.to_string(),
        seed,
        max_rel_error: Vec::with_capacity(inputs.len()),
        max_raw_rel_error: Vec::with_capacity(inputs.len()),
    };
    for (pos, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[pos].numel()]);
        let (mut worst, mut worst_raw) = (0.0f64, 0.0f64);
        let mut perturbed = inputs.to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[pos].data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                perturbed[pos].data_mut()[i] = v;
                let (g, _, loss) = projected(build, &perturbed, &mut weights, seed)?;
                Ok(g.value(loss).data()[0])
            };
            let numeric = (eval(orig + FD_STEP)? - eval(orig - FD_STEP)?) / (2.0 * FD_STEP);
            perturbed[pos].data_mut()[i] = orig;
            worst = worst.max(relative_error(a, numeric, floor));
            worst_raw = worst_raw.max(relative_error(a, numeric, 1e-8));
        }
        report.max_rel_error.push(worst);
        report.max_raw_rel_error.push(worst_raw);
    }
    Ok(report)
}

/// Draws inputs for `case` (or `shapes` when given) and runs [`check_gradients`].
pub fn run_case(case: &GradCase, shapes: Option<&[Vec<usize>]>, seed: u64) -> Result<GradcheckReport> {
    let shapes = shapes.unwrap_or(&case.shapes);
    if shapes.len() != case.domains.len() {
        return Err(AutodiffError::InvalidShape(format!(
            "`{}` takes {} inputs, {} shapes given",
            case.name,
            case.domains.len(),
            shapes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = shapes
        .iter()
        .zip(&case.domains)
        .map(|(shape, domain)| {
            let n = shape.iter().product();
            Tensor::new(shape.clone(), (0..n).map(|_| domain.sample(&mut rng)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    check_gradients(&case.name, &case.build, &inputs, seed)
}

/// Runs the case named `op` from `cases`.
pub fn gradcheck(cases: &[GradCase], op: &str, shapes: Option<&[Vec<usize>]>, seed: u64) -> Result<GradcheckReport> {
    let case = cases
        .iter()
        .find(|c| c.name == op)
        .ok_or_else(|| AutodiffError::UnknownOp(op.to_string()))?;
    run_case(case, shapes, seed)
}

/// Gaussian taps used by the `window_filter` case.
fn test_taps(k: usize) -> Vec<f64> {
    let mid = (k / 2) as f64;
    let raw: Vec<f64> = (0..k).map(|i| (-((i as f64 - mid).powi(2)) / 2.0).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Every registered primitive with representative shapes.
pub fn primitive_cases() -> Vec<GradCase> {
    use Domain::*;
    let conv = ConvOptions::new(2, 1);
    let tconv = ConvOptions::new(2, 1).with_output_padding(1);
    vec![
        GradCase::new("add", vec![vec![2, 2], vec![2, 2]], vec![Symmetric, Symmetric], |g, x| g.add(x[0], x[1])),
        GradCase::new("sub", vec![vec![2, 3], vec![2, 3]], vec![Symmetric, Symmetric], |g, x| g.sub(x[0], x[1])),
        GradCase::new("mul", vec![vec![3, 2], vec![3, 2]], vec![Symmetric, Symmetric], |g, x| g.mul(x[0], x[1])),
        GradCase::new("div", vec![vec![5], vec![5]], vec![Symmetric, Positive], |g, x| g.div(x[0], x[1])),
        GradCase::new("scale", vec![vec![4]], vec![Symmetric], |g, x| g.scale(x[0], -1.7)),
        GradCase::new("add_scalar", vec![vec![4]], vec![Symmetric], |g, x| g.add_scalar(x[0], 0.3)),
        GradCase::new("matmul", vec![vec![3, 4], vec![4, 2]], vec![Symmetric, Symmetric], |g, x| g.matmul(x[0], x[1])),
        GradCase::new(
            "conv2d",
            vec![vec![1, 3, 8, 8], vec![4, 3, 3, 3]],
            vec![Symmetric, Symmetric],
            move |g, x| g.conv2d(x[0], x[1], conv),
        ),
        GradCase::new(
            "conv_transpose2d",
            vec![vec![2, 3, 4, 4], vec![3, 2, 3, 3]],
            vec![Symmetric, Symmetric],
            move |g, x| g.conv_transpose2d(x[0], x[1], tconv),
        ),
        GradCase::new("channel_bias", vec![vec![2, 3, 2, 2], vec![3]], vec![Symmetric, Symmetric], |g, x| {
            g.channel_bias(x[0], x[1])
        }),
        GradCase::new("prelu", vec![vec![2, 3, 3, 3], vec![3]], vec![AwayFromZero, Symmetric], |g, x| {
            g.prelu(x[0], x[1])
        }),
        GradCase::new(
            "batch_norm_train",
            vec![vec![4, 3, 2, 2], vec![3], vec![3]],
            vec![Symmetric, Positive, Symmetric],
            |g, x| g.batch_norm(x[0], x[1], x[2], BatchNormMode::Train, 1e-5),
        ),
        GradCase::new(
            "batch_norm_eval",
            vec![vec![2, 3, 2, 2], vec![3], vec![3]],
            vec![Symmetric, Positive, Symmetric],
            |g, x| {
                let mode = BatchNormMode::Eval {
                    running_mean: &[0.1, -0.2, 0.3],
                    running_var: &[0.5, 1.5, 0.9],
                };
                g.batch_norm(x[0], x[1], x[2], mode, 1e-5)
            },
        ),
        GradCase::new("mean", vec![vec![3, 4]], vec![Symmetric], |g, x| g.mean(x[0])),
        GradCase::new("sum", vec![vec![3, 4]], vec![Symmetric], |g, x| g.sum(x[0])),
        GradCase::new("mean_rows", vec![vec![3, 4]], vec![Symmetric], |g, x| g.mean_rows(x[0])),
        GradCase::new("square", vec![vec![6]], vec![Symmetric], |g, x| g.square(x[0])),
        GradCase::new("sqrt", vec![vec![6]], vec![Positive], |g, x| g.sqrt(x[0])),
        GradCase::new("log", vec![vec![6]], vec![Positive], |g, x| g.log(x[0])),
        GradCase::new("exp", vec![vec![6]], vec![Symmetric], |g, x| g.exp(x[0])),
        GradCase::new("abs", vec![vec![6]], vec![AwayFromZero], |g, x| g.abs(x[0])),
        GradCase::new("recip", vec![vec![6]], vec![Positive], |g, x| g.recip(x[0])),
        GradCase::new("sigmoid", vec![vec![6]], vec![Symmetric], |g, x| g.sigmoid(x[0])),
        GradCase::new("reshape", vec![vec![2, 6]], vec![Symmetric], |g, x| {
            let r = g.reshape(x[0], &[3, 4])?;
            g.square(r)
        }),
        GradCase::new("l2_norm", vec![vec![3, 5]], vec![Symmetric], |g, x| g.l2_norm(x[0])),
        GradCase::new("mul_rows", vec![vec![3, 4], vec![3]], vec![Symmetric, Symmetric], |g, x| {
            g.mul_rows(x[0], x[1])
        }),
        GradCase::new("window_filter", vec![vec![1, 2, 9, 8]], vec![Symmetric], |g, x| {
            g.window_filter(x[0], &test_taps(5))
        }),
        GradCase::new("gaussian_sample", vec![vec![2, 5], vec![2, 5]], vec![Symmetric, Symmetric], |g, x| {
            g.gaussian_sample(x[0], x[1])
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_an_error() {
        let cases = primitive_cases();
        assert!(matches!(gradcheck(&cases, "nope", None, 0), Err(AutodiffError::UnknownOp(_))));
    }

    #[test]
    fn add_and_conv_examples() {
        let cases = primitive_cases();
        let add = gradcheck(&cases, "add", Some(&[vec![2, 2], vec![2, 2]]), 1).unwrap();
        assert!(add.worst() < 1e-6, "{add:?}");
        let conv = gradcheck(&cases, "conv2d", Some(&[vec![1, 3, 8, 8], vec![4, 3, 3, 3]]), 2).unwrap();
        assert!(conv.worst() < 1e-4, "{conv:?}");
    }

    #[test]
    fn wrong_arity_rejected() {
        let cases = primitive_cases();
        assert!(gradcheck(&cases, "add", Some(&[vec![2]]), 0).is_err());
    }

    #[test]
    fn floor_scales_with_the_checked_value() {
        assert!((resolution_floor(1.0) - 2.220446049250313e-7).abs() < 1e-20);
        assert_eq!(resolution_floor(0.01), resolution_floor(1.0));
        assert_eq!(resolution_floor(-10.0), 10.0 * resolution_floor(1.0));
    }

    #[test]
    fn small_gradient_errors_are_caught() {
        // the detached factor drops half of the correction term's derivative
        let off = GradCase::new("off_by_1e-3", vec![vec![3, 4]], vec![Domain::AwayFromZero], |g, x| {
            let held = g.constant(g.value(x[0]).clone())?;
            let sq = g.mul(x[0], x[0])?;
            let tilt = g.mul(x[0], held)?;
            let tilt = g.scale(tilt, 2e-3)?;
            g.add(sq, tilt)
        });
        for seed in 0..5 {
            let r = run_case(&off, None, seed).unwrap();
            assert!(r.worst() > TARGET_REL, "{r:?}");
        }
    }
}
