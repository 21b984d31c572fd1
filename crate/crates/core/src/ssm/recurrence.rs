//! Elementwise linear recurrences `h_k = a_k ⊙ h_{k-1} + u_k`.
//!
//! Storage is step-major: step `k` of lane `j` lives at `k * lanes + j`.
//! Two evaluators produce the same states: a left-to-right loop and a
//! work-efficient (up-sweep / down-sweep) prefix scan over the associative
//! combine `(a₂, u₂) ∘ (a₁, u₁) = (a₂a₁, a₂u₁ + u₂)`.

use num_traits::Float;
use rayon::prelude::*;

/// Which evaluator runs a recurrence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(ScanMode::Sequential),
            "parallel" => Ok(ScanMode::Parallel),
            other => Err(format!("unknown scan mode `{other}`")),
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScanMode::Sequential => "sequential",
            ScanMode::Parallel => "parallel",
        })
    }
}

/// Element of the scan monoid: the affine map `h ↦ a·h + u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine<T> {
    pub a: T,
    pub u: T,
}

impl<T: Float> Affine<T> {
    pub fn identity() -> Self {
        Self {
            a: T::one(),
            u: T::zero(),
        }
    }

    /// `later ∘ earlier`: apply `earlier` first.
    pub fn combine(later: Self, earlier: Self) -> Self {
        Self {
            a: later.a * earlier.a,
            u: later.a * earlier.u + later.u,
        }
    }

    pub fn apply(&self, h: T) -> T {
        self.a * h + self.u
    }
}

/// Evaluates the recurrence and returns every state.
pub fn run<T: Float + Send + Sync>(
    coef: &[T],
    input: &[T],
    init: Option<&[T]>,
    len: usize,
    lanes: usize,
    mode: ScanMode,
) -> Vec<T> {
    debug_assert_eq!(coef.len(), len * lanes);
    debug_assert_eq!(input.len(), len * lanes);
    match mode {
        ScanMode::Sequential => sequential(coef, input, init, len, lanes),
        ScanMode::Parallel => parallel(coef, input, init, len, lanes),
    }
}

fn sequential<T: Float>(
    coef: &[T],
    input: &[T],
    init: Option<&[T]>,
    len: usize,
    lanes: usize,
) -> Vec<T> {
    let mut states = vec![T::zero(); len * lanes];
    let zeros = vec![T::zero(); lanes];
    for k in 0..len {
        let (done, rest) = states.split_at_mut(k * lanes);
        let prev: &[T] = if k == 0 {
            init.unwrap_or(&zeros)
        } else {
            &done[(k - 1) * lanes..]
        };
        let base = k * lanes;
        for (j, h) in rest[..lanes].iter_mut().enumerate() {
            *h = coef[base + j] * prev[j] + input[base + j];
        }
    }
    states
}

/// Rows per rayon task; keeps per-task work above a few thousand elements.
fn min_chunks(lanes: usize, stride: usize) -> usize {
    (4096 / (lanes * stride).max(1)).max(1)
}

fn parallel<T: Float + Send + Sync>(
    coef: &[T],
    input: &[T],
    init: Option<&[T]>,
    len: usize,
    lanes: usize,
) -> Vec<T> {
    let n = len.next_power_of_two();
    let mut a = vec![T::one(); n * lanes];
    let mut u = vec![T::zero(); n * lanes];
    a[..len * lanes].copy_from_slice(coef);
    u[..len * lanes].copy_from_slice(input);
    // fold the initial state into the first step
    let mut first_u = input[..lanes].to_vec();
    if let Some(h0) = init {
        for j in 0..lanes {
            first_u[j] = coef[j] * h0[j] + input[j];
        }
        u[..lanes].copy_from_slice(&first_u);
    }

    // up-sweep: each block's last row becomes the composition of the block
    let mut stride = 2;
    while stride <= n {
        let half = stride / 2;
        a.par_chunks_mut(stride * lanes)
            .zip(u.par_chunks_mut(stride * lanes))
            .with_min_len(min_chunks(lanes, stride))
            .for_each(|(ab, ub)| {
                let (al, ar) = ab.split_at_mut((stride - 1) * lanes);
                let (ul, ur) = ub.split_at_mut((stride - 1) * lanes);
                let left = (half - 1) * lanes..half * lanes;
                for j in 0..lanes {
                    let e = Affine {
                        a: al[left.start + j],
                        u: ul[left.start + j],
                    };
                    let l = Affine { a: ar[j], u: ur[j] };
                    let c = Affine::combine(l, e);
                    ar[j] = c.a;
                    ur[j] = c.u;
                }
            });
        stride *= 2;
    }

    // down-sweep to exclusive prefixes
    for j in 0..lanes {
        a[(n - 1) * lanes + j] = T::one();
        u[(n - 1) * lanes + j] = T::zero();
    }
    let mut stride = n;
    while stride >= 2 {
        let half = stride / 2;
        a.par_chunks_mut(stride * lanes)
            .zip(u.par_chunks_mut(stride * lanes))
            .with_min_len(min_chunks(lanes, stride))
            .for_each(|(ab, ub)| {
                let (al, ar) = ab.split_at_mut((stride - 1) * lanes);
                let (ul, ur) = ub.split_at_mut((stride - 1) * lanes);
                let left = (half - 1) * lanes;
                for j in 0..lanes {
                    let subtree = Affine {
                        a: al[left + j],
                        u: ul[left + j],
                    };
                    let prefix = Affine { a: ar[j], u: ur[j] };
                    al[left + j] = prefix.a;
                    ul[left + j] = prefix.u;
                    let c = Affine::combine(subtree, prefix);
                    ar[j] = c.a;
                    ur[j] = c.u;
                }
            });
        stride /= 2;
    }

    // inclusive states: h_k = a_k · (exclusive prefix applied to 0) + u_k
    let mut states = vec![T::zero(); len * lanes];
    states
        .par_chunks_mut(lanes)
        .enumerate()
        .with_min_len(min_chunks(lanes, 1))
        .for_each(|(k, row)| {
            for j in 0..lanes {
                let i = k * lanes + j;
                let step_u = if k == 0 { first_u[j] } else { input[i] };
                row[j] = coef[i] * u[i] + step_u;
            }
        });
    states
}

/// Cotangents of a recurrence.
pub struct Adjoint {
    pub coef: Vec<f64>,
    pub input: Vec<f64>,
    pub init: Vec<f64>,
}

/// Reverse pass: `λ_k = g_k + a_{k+1} λ_{k+1}`, itself a recurrence run
/// back to front with the same evaluator.
pub fn adjoint(
    coef: &[f64],
    states: &[f64],
    init: Option<&[f64]>,
    grad: &[f64],
    len: usize,
    lanes: usize,
    mode: ScanMode,
) -> Adjoint {
    let mut rc = vec![0.0; len * lanes];
    let mut ru = vec![0.0; len * lanes];
    for j in 0..len {
        let src = len - 1 - j;
        ru[j * lanes..(j + 1) * lanes].copy_from_slice(&grad[src * lanes..(src + 1) * lanes]);
        if j > 0 {
            rc[j * lanes..(j + 1) * lanes]
                .copy_from_slice(&coef[(src + 1) * lanes..(src + 2) * lanes]);
        }
    }
    let rev = run(&rc, &ru, None, len, lanes, mode);
    let mut d_input = vec![0.0; len * lanes];
    for k in 0..len {
        let j = len - 1 - k;
        d_input[k * lanes..(k + 1) * lanes].copy_from_slice(&rev[j * lanes..(j + 1) * lanes]);
    }
    let mut d_coef = vec![0.0; len * lanes];
    for k in 0..len {
        for l in 0..lanes {
            let prev = if k == 0 {
                init.map_or(0.0, |h| h[l])
            } else {
                states[(k - 1) * lanes + l]
            };
            d_coef[k * lanes + l] = d_input[k * lanes + l] * prev;
        }
    }
    let d_init = (0..lanes).map(|l| coef[l] * d_input[l]).collect();
    Adjoint {
        coef: d_coef,
        input: d_input,
        init: d_init,
    }
}
