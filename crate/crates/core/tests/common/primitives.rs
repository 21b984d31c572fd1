//! Every differentiable primitive as a scalar function of one tensor, plus
//! seeded evaluation points that keep clear of kinks.

use robustgs::ssm::ScanMode;
use robustgs::tensor::{concat, linear_recurrence};
use robustgs::{Result, SeededRng, Tape, Tensor, Var};

pub type Prim = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>>;

/// Fixed, non-symmetric weights so every output element reaches the loss.
fn weigh<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let w = Tensor::from_fn(y.shape(), |i| (0.7 * i as f64 + 0.3).sin() + 0.1)?;
    y.mul(tape.constant(w)?)?.sum()
}

fn halves<'t>(x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let n = x.shape()[0] / 2;
    Ok((x.slice(0, 0, n)?, x.slice(0, n, n)?))
}

fn add<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = halves(x)?;
    // Broadcast a row over the leading extent as well.
    weigh(t, a.add(b)?.add(b.slice(0, 1, 1)?.reshape([4])?)?)
}
fn sub<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = halves(x)?;
    weigh(t, a.sub(b)?)
}
fn mul<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = halves(x)?;
    weigh(t, a.mul(b)?.mul(b.slice(0, 2, 1)?.reshape([4])?)?)
}
fn div<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = halves(x)?;
    weigh(t, a.div(b.add_scalar(3.0)?)?)
}
fn matmul<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    // x is [7, 4]: a [3, 4] times b [4, 4].
    weigh(t, x.slice(0, 0, 3)?.matmul(x.slice(0, 3, 4)?)?)
}
fn exp<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.exp()?)
}
fn ln<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.add_scalar(2.0)?.ln()?)
}
fn softplus<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scale(3.0)?.softplus()?)
}
fn sigmoid<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scale(3.0)?.sigmoid()?)
}
fn tanh<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scale(2.0)?.tanh()?)
}
fn powf<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.add_scalar(2.0)?.powf(1.7)?)
}
fn abs<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.abs()?)
}
fn exprel<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scale(2.0)?.exprel()?)
}
fn exprel_small<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    // Arguments straddle the series threshold.
    weigh(t, x.scale(2e-4)?.exprel()?)
}
fn silu<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scale(2.0)?.silu()?)
}
fn neg_scale<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.neg()?.scale(-1.5)?.add_scalar(0.25)?)
}
fn sum<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    x.mul(x)?.sum()
}
fn sum_axis<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.sum_axis(1)?.mul(x.sum_axis(0)?.sum()?)?)
}
fn mean<'t>(_: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    x.exp()?.mean()
}
fn mean_axis<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.mean_axis(2)?.exp()?)
}
fn softmax<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scale(2.0)?.softmax(1)?)
}
fn log_softmax<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scale(2.0)?.log_softmax(0)?)
}
fn layer_norm<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.layer_norm(1e-5)?)
}
fn reshape<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.reshape([4, 6])?.exp()?)
}
fn permute<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(
        t,
        x.permute(&[2, 0, 1])?
            .exp()?
            .reshape([24])?
            .slice(0, 3, 12)?,
    )
}
fn transpose<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.transpose()?.matmul(x)?)
}
fn gather<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.gather(&[3, 0, 3, 1, 4, 4, 2])?.tanh()?)
}
fn scatter_add<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.scatter_add(&[2, 0, 2, 1, 5], 6)?.exp()?)
}
fn concatenate<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = halves(x)?;
    let y = concat(&[a.exp()?, b, a.mul(b)?], 1)?;
    weigh(t, y)
}
fn slice<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.slice(1, 1, 2)?.exp()?)
}
fn clip<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    weigh(t, x.clip(-0.5, 0.5)?)
}
fn recurrence<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    // x is [2, 9, 3]: coefficients in (0.1, 0.9) and inputs.
    let coef = x
        .slice(0, 0, 1)?
        .reshape([9, 3])?
        .scale(0.4)?
        .add_scalar(0.5)?;
    let input = x.slice(0, 1, 1)?.reshape([9, 3])?;
    let init = input.slice(0, 8, 1)?.reshape([3])?;
    weigh(
        t,
        linear_recurrence(coef, input, Some(init), ScanMode::Parallel)?,
    )
}

#[derive(Clone, Copy)]
pub enum Domain {
    Plain,
    /// Keeps every coordinate at least 0.1 away from zero.
    AwayFromZero,
    /// Keeps coordinates away from the clip bounds at ±0.5.
    AwayFromHalf,
}

pub fn point(shape: &[usize], domain: Domain, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u = rng.uniform_range(-1.0, 1.0);
        match domain {
            Domain::Plain => u,
            Domain::AwayFromZero => u.signum() * (0.1 + 0.9 * u.abs()),
            Domain::AwayFromHalf if (u.abs() - 0.5).abs() < 0.05 => u + 0.1 * u.signum(),
            _ => u,
        }
    })
    .unwrap()
}

pub fn cases() -> Vec<(&'static str, Vec<usize>, Prim, Domain)> {
    use Domain::*;
    vec![
        ("add", vec![6, 4], add, Plain),
        ("subtract", vec![6, 4], sub, Plain),
        ("multiply", vec![6, 4], mul, Plain),
        ("divide", vec![6, 4], div, Plain),
        ("matrix-multiply", vec![7, 4], matmul, Plain),
        ("exponential", vec![3, 4], exp, Plain),
        ("natural-log", vec![3, 4], ln, Plain),
        ("softplus", vec![3, 4], softplus, Plain),
        ("sigmoid", vec![3, 4], sigmoid, Plain),
        ("tanh", vec![3, 4], tanh, Plain),
        ("power", vec![3, 4], powf, Plain),
        ("abs", vec![3, 4], abs, AwayFromZero),
        ("exprel", vec![3, 4], exprel, Plain),
        ("exprel-near-zero", vec![3, 4], exprel_small, Plain),
        ("silu", vec![3, 4], silu, Plain),
        ("negate-scale-shift", vec![3, 4], neg_scale, Plain),
        ("reduce-sum", vec![3, 4], sum, Plain),
        ("reduce-sum-axis", vec![3, 4], sum_axis, Plain),
        ("reduce-mean", vec![3, 4], mean, Plain),
        ("reduce-mean-axis", vec![2, 3, 4], mean_axis, Plain),
        ("softmax", vec![3, 5], softmax, Plain),
        ("log-softmax", vec![3, 5], log_softmax, Plain),
        ("layer-normalization", vec![3, 6], layer_norm, Plain),
        ("reshape", vec![2, 3, 4], reshape, Plain),
        ("permute-axes", vec![2, 3, 4], permute, Plain),
        ("transpose", vec![3, 4], transpose, Plain),
        ("gather-by-index", vec![5, 3], gather, Plain),
        ("scatter-add-by-index", vec![5, 3], scatter_add, Plain),
        ("concatenate", vec![4, 3], concatenate, Plain),
        ("slice", vec![3, 4], slice, Plain),
        ("clip", vec![3, 4], clip, AwayFromHalf),
        ("linear-recurrence", vec![2, 9, 3], recurrence, Plain),
    ]
}
