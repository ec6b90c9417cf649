//! Central-difference checks of the tape's analytic gradients.

use super::{Result, Tape, Tensor, Var};
use crate::rng::RngStream;

/// Builds a scalar loss from leaves created for the inputs.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

pub const STEP: f64 = 1e-5;

pub fn rand_tensor(shape: &[usize], rng: &mut RngStream, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * scale).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data").param()
}

fn eval(inputs: &[Tensor], f: &LossFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// `|a - n| / max(|a|, |n|, 1e-6)` for one analytic/numeric pair.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest elementwise relative error between analytic gradients and
/// central differences over every input element.
pub fn max_rel_error(inputs: &[Tensor], f: &LossFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            let fd = (eval(&plus, f)? - eval(&minus, f)?) / (2.0 * STEP);
            worst = worst.max(rel_error(a, fd));
        }
    }
    Ok(worst)
}

/// A fixed random projection to a scalar, so every output element matters.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let mut rng = RngStream::new(seed);
    let w = tape.constant(&shape, (0..n).map(|_| rng.normal()).collect())?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    tol: f64,
    f: Box<LossFn<'static>>,
}

fn case(name: &'static str, shapes: &[&[usize]], tol: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        tol,
        f: Box::new(f),
    }
}

fn cases() -> Vec<Case> {
    const OLD: [f64; 4] = [0.1, -0.4, 0.3, 0.0];
    const ADV: [f64; 4] = [1.0, -0.5, 2.0, 0.7];
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], 1e-3, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        case("matmul_nt+transpose", &[&[3, 4], &[5, 4]], 1e-3, |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            let z = t.transpose(y)?;
            weighted_sum(t, z, 2)
        }),
        case("add+mul+scale", &[&[2, 3], &[2, 3]], 1e-3, |t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[0])?;
            let q = t.scale(p, -1.7)?;
            weighted_sum(t, q, 3)
        }),
        case("add_row", &[&[4, 3], &[3]], 1e-3, |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        case("embedding", &[&[5, 3]], 1e-3, |t, v| {
            let e = t.embedding(v[0], &[4, 0, 4, 2])?;
            weighted_sum(t, e, 5)
        }),
        case("softmax", &[&[3, 5]], 1e-3, |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, 6)
        }),
        case("causal_softmax", &[&[4, 4]], 1e-3, |t, v| {
            let y = t.causal_softmax(v[0])?;
            weighted_sum(t, y, 7)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], 1e-3, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, 8)
        }),
        // looser bound for the curvature around gelu's bend near 0
        case("gelu", &[&[4, 4]], 1e-2, |t, v| {
            let y = t.gelu(v[0])?;
            weighted_sum(t, y, 9)
        }),
        case("concat+slice_cols+reshape", &[&[2, 3], &[2, 2]], 1e-3, |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let s = t.slice_cols(c, 1, 4)?;
            let r = t.reshape(s, &[3, 2])?;
            weighted_sum(t, r, 10)
        }),
        case("gather_rows+mean", &[&[4, 3]], 1e-3, |t, v| {
            let g = t.gather_rows(v[0], &[3, 1, 3])?;
            let w = weighted_sum(t, g, 11)?;
            let m = t.mean(v[0])?;
            t.add(w, m)
        }),
        case("dropout", &[&[3, 3]], 1e-3, |t, v| {
            let mut rng = RngStream::new(99);
            let d = t.dropout(v[0], 0.3, &mut rng)?;
            weighted_sum(t, d, 12)
        }),
        case("cross_entropy", &[&[4, 6]], 1e-3, |t, v| t.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true])),
        case("cross_entropy_scaled", &[&[3, 4]], 1e-3, |t, v| t.cross_entropy_scaled(v[0], &[3, 0, 1], &[true, true, false], 0.4)),
        case("log_softmax_gather+entropy", &[&[3, 5]], 1e-3, |t, v| {
            let lp = t.log_softmax_gather(v[0], &[4, 0, 2])?;
            let a = weighted_sum(t, lp, 13)?;
            let h = t.entropy_scaled(v[0], &[true, false, true], 0.7)?;
            t.add(a, h)
        }),
        // the clipped objective has kinks at r = 1 ± eps; random inputs stay
        // clear of them with overwhelming probability
        case("ppo_clip+mse", &[&[4]], 1e-3, |t, v| {
            let p = t.ppo_clip_objective(v[0], &OLD, &ADV, &[true, true, false, true], 0.2, 0.5)?;
            let m = t.mse_scaled(v[0], &ADV, &[true; 4], 0.3)?;
            t.add(p, m)
        }),
        case("two_layer_mlp", &[&[5, 4], &[4, 6], &[6], &[6, 3], &[3]], 1e-3, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row(h, v[2])?;
            let h = t.gelu(h)?;
            let o = t.matmul(h, v[3])?;
            let o = t.add_row(o, v[4])?;
            t.cross_entropy(o, &[0, 2, 1, 1, 0], &[true; 5])
        }),
    ]
}

/// Every differentiable op, three random draws each; reports the worst
/// relative error per op.
pub fn op_suite() -> Vec<GradCheck> {
    let mut rng = RngStream::new(77);
    cases()
        .into_iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for _ in 0..3 {
                let inputs: Vec<Tensor> = c.shapes.iter().map(|s| rand_tensor(s, &mut rng, 1.0)).collect();
                let err = max_rel_error(&inputs, c.f.as_ref()).unwrap_or(f64::INFINITY);
                worst = worst.max(err);
            }
            GradCheck {
                name: c.name,
                max_rel_error: worst,
                tolerance: c.tol,
            }
        })
        .collect()
}
