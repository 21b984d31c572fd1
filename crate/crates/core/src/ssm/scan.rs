//! Value-level evaluation of the discrete recurrence
//! `h_k = Ā_k h_{k−1} + B̄_k x_k`, `y_k = C_k h_k + D x_k`.

use num_traits::Float;

use super::discretize::{DiscreteSsm, ScanDims};
use super::recurrence::{self, ScanMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput<T> {
    /// `[len][channel]`
    pub y: Vec<T>,
    /// `[channel][state]`
    pub final_state: Vec<T>,
}

/// Evaluates the scan. `x` is `[len][channel]`, `c` is `[len][state]`,
/// `d` is `[channel]`, `init` is `[channel][state]` (zero when absent).
pub fn scan<T: Float + Send + Sync>(
    ssm: &DiscreteSsm<T>,
    x: &[T],
    c: &[T],
    d: &[T],
    init: Option<&[T]>,
    mode: ScanMode,
) -> Result<ScanOutput<T>> {
    let ScanDims {
        len,
        channels,
        state,
    } = ssm.dims;
    if x.len() != len * channels
        || c.len() != len * state
        || d.len() != channels
        || init.is_some_and(|h| h.len() != channels * state)
        || ssm.a_bar.len() != len * channels * state
    {
        return Err(Error::shape(
            "scan",
            format!(
                "x {}, c {}, d {} for len {len}, channels {channels}, state {state}",
                x.len(),
                c.len(),
                d.len()
            ),
        ));
    }
    if len == 0 {
        return Err(Error::shape("scan", "empty sequence"));
    }
    let lanes = channels * state;
    let mut input = ssm.b_bar.clone();
    for l in 0..len {
        for ch in 0..channels {
            let xv = x[l * channels + ch];
            for v in &mut input[(l * channels + ch) * state..(l * channels + ch + 1) * state] {
                *v = *v * xv;
            }
        }
    }
    let states = recurrence::run(&ssm.a_bar, &input, init, len, lanes, mode);
    let mut y = vec![T::zero(); len * channels];
    for l in 0..len {
        let cl = &c[l * state..(l + 1) * state];
        for ch in 0..channels {
            let h = &states[(l * channels + ch) * state..(l * channels + ch + 1) * state];
            let acc = h
                .iter()
                .zip(cl)
                .fold(T::zero(), |s, (&hv, &cv)| s + hv * cv);
            y[l * channels + ch] = acc + d[ch] * x[l * channels + ch];
        }
    }
    Ok(ScanOutput {
        y,
        final_state: states[(len - 1) * lanes..].to_vec(),
    })
}

pub fn scan_sequential<T: Float + Send + Sync>(
    ssm: &DiscreteSsm<T>,
    x: &[T],
    c: &[T],
    d: &[T],
    init: Option<&[T]>,
) -> Result<ScanOutput<T>> {
    scan(ssm, x, c, d, init, ScanMode::Sequential)
}

pub fn scan_parallel<T: Float + Send + Sync>(
    ssm: &DiscreteSsm<T>,
    x: &[T],
    c: &[T],
    d: &[T],
    init: Option<&[T]>,
) -> Result<ScanOutput<T>> {
    scan(ssm, x, c, d, init, ScanMode::Parallel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(len: usize) -> ScanDims {
        ScanDims {
            len,
            channels: 2,
            state: 3,
        }
    }

    #[test]
    fn memoryless_when_a_bar_is_zero() {
        let len = 4;
        let ssm = DiscreteSsm {
            dims: dims(len),
            a_bar: vec![0.0; len * 6],
            b_bar: (0..len * 6).map(|i| 0.1 * i as f64).collect(),
        };
        let x: Vec<f64> = (0..len * 2).map(|i| 1.0 + i as f64).collect();
        let c: Vec<f64> = (0..len * 3).map(|i| (i as f64).cos()).collect();
        let d = [0.5, -0.25];
        let out = scan_sequential(&ssm, &x, &c, &d, None).unwrap();
        for l in 0..len {
            for ch in 0..2 {
                let mut want = 0.0;
                for n in 0..3 {
                    want += c[l * 3 + n] * ssm.b_bar[(l * 2 + ch) * 3 + n] * x[l * 2 + ch];
                }
                want += d[ch] * x[l * 2 + ch];
                assert!((out.y[l * 2 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_state() {
        let ssm = DiscreteSsm {
            dims: ScanDims {
                len: 1,
                channels: 1,
                state: 2,
            },
            a_bar: vec![0.5, 0.7],
            b_bar: vec![0.3, -0.2],
        };
        let out = scan_sequential(&ssm, &[2.0], &[1.0, 1.0], &[0.0], None).unwrap();
        assert_eq!(out.final_state, vec![0.6, -0.4]);
    }

    #[test]
    fn length_mismatch() {
        let ssm = DiscreteSsm {
            dims: dims(2),
            a_bar: vec![0.5; 12],
            b_bar: vec![0.5; 12],
        };
        assert!(scan_sequential(&ssm, &[1.0; 3], &[0.0; 6], &[0.0; 2], None).is_err());
        assert!(scan_parallel(&ssm, &[1.0; 4], &[0.0; 5], &[0.0; 2], None).is_err());
    }
}
