//! Zero-order-hold discretization of a diagonal continuous-time SSM.
//!
//! For a diagonal state matrix the matrix exponential is elementwise:
//! `Ā = exp(Δa)` and `B̄ = ((exp(Δa) − 1) / a) · b = Δ · exprel(Δa) · b`.

use num_traits::Float;

use crate::error::{Error, Result};

/// Below this `|Δa|` the input scale uses its three-term series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// `(exp(z) − 1) / z` by the closed form.
pub fn exprel_closed<T: Float>(z: T) -> T {
    z.exp_m1() / z
}

/// `1 + z/2 + z²/6`, the series of `exprel` near zero.
pub fn exprel_series<T: Float>(z: T) -> T {
    let two = T::one() + T::one();
    let six = two * (two + T::one());
    T::one() + z / two + z * z / six
}

pub fn exprel<T: Float>(z: T) -> T {
    if z.abs() < T::from(SERIES_THRESHOLD).unwrap() {
        exprel_series(z)
    } else {
        exprel_closed(z)
    }
}

/// Dimensions of one scanned sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn lanes(&self) -> usize {
        self.channels * self.state
    }
}

/// Per-token discretized parameters, laid out `[len][channel][state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm<T> {
    pub dims: ScanDims,
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

fn check_lengths<T>(a: &[T], b: &[T], delta: &[T], dims: ScanDims) -> Result<()> {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    if a.len() != channels * state || b.len() != len * state || delta.len() != len * channels {
        return Err(Error::shape(
            "discretize-zoh",
            format!(
                "a {} (want {}), b {} (want {}), delta {} (want {})",
                a.len(),
                channels * state,
                b.len(),
                len * state,
                delta.len(),
                len * channels
            ),
        ));
    }
    Ok(())
}

fn discretize<T: Float>(
    a: &[T],
    b: &[T],
    delta: &[T],
    dims: ScanDims,
    allow_zero: bool,
) -> Result<DiscreteSsm<T>> {
    check_lengths(a, b, delta, dims)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "discretize-zoh",
        });
    }
    let bad_step = |d: &T| {
        if allow_zero {
            *d < T::zero()
        } else {
            *d <= T::zero()
        }
    };
    if delta.iter().any(|d| bad_step(d) || !d.is_finite()) {
        return Err(Error::invalid(
            "discretize-zoh requires positive step sizes",
        ));
    }
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let mut a_bar = Vec::with_capacity(len * channels * state);
    let mut b_bar = Vec::with_capacity(len * channels * state);
    for l in 0..len {
        for c in 0..channels {
            let dt = delta[l * channels + c];
            for n in 0..state {
                let z = dt * a[c * state + n];
                a_bar.push(z.exp());
                b_bar.push(dt * exprel(z) * b[l * state + n]);
            }
        }
    }
    Ok(DiscreteSsm { dims, a_bar, b_bar })
}

/// ZOH discretization. `a` is `[channels][state]`, `b` is `[len][state]`,
/// `delta` is `[len][channels]` and must be strictly positive.
pub fn discretize_zoh<T: Float>(
    a: &[T],
    b: &[T],
    delta: &[T],
    dims: ScanDims,
) -> Result<DiscreteSsm<T>> {
    discretize(a, b, delta, dims, false)
}

/// As [`discretize_zoh`] but admits `Δ = 0` (the `Ā = 1, B̄ = 0` limit).
pub fn discretize_zoh_allow_zero<T: Float>(
    a: &[T],
    b: &[T],
    delta: &[T],
    dims: ScanDims,
) -> Result<DiscreteSsm<T>> {
    discretize(a, b, delta, dims, true)
}
