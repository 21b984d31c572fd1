//! A small soft-routed feature enhancement block and its gradient check.

use robustgs::mvssem::{Ablation, CrossState, Feb, FebContext, Layout, MvSsemConfig};
use robustgs::router::RouterConfig;
use robustgs::ssm::ScanMode;
use robustgs::tensor::{finite_difference_check, param_gradient_check, ParamId};
use robustgs::{ParamStore, SeededRng, Tape, Tensor};

pub fn toy_config(hard: bool) -> MvSsemConfig {
    MvSsemConfig {
        channels: 6,
        state: 3,
        z_dim: 4,
        head_hidden: 5,
        router: RouterConfig {
            classes: 3,
            d_inner: 5,
            temperature: 0.7,
            hard,
        },
        blocks: [1, 1, 1],
        ablation: Ablation::default(),
    }
}

pub fn randn(shape: Vec<usize>, rng: &mut SeededRng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal()).unwrap()
}

/// Adds noise to every parameter so no branch is at its zero init.
pub fn perturb_all(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = SeededRng::new(seed);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let old = store.value(id).clone();
        let v = Tensor::from_fn(old.shape().to_vec(), |i| {
            old.data()[i] + scale * rng.normal()
        })
        .unwrap();
        store.set_value(id, v).unwrap();
    }
}

pub const TOY: Layout = Layout {
    views: 2,
    height: 4,
    width: 4,
};

#[allow(clippy::too_many_arguments)]
pub fn feb_loss<'t>(
    feb: &Feb,
    tape: &'t Tape,
    store: &ParamStore,
    x: robustgs::Var<'t>,
    z: &Tensor,
    hidden: &Tensor,
    offset: &Tensor,
    w: &Tensor,
) -> robustgs::Result<robustgs::Var<'t>> {
    let cross = CrossState {
        hidden: vec![tape.constant(hidden.clone())?],
        offset: tape.constant(offset.clone())?,
        layout: TOY,
    };
    let mut ctx = FebContext {
        layout: TOY,
        z: Some(tape.constant(z.clone())?),
        ablation: Ablation::default(),
        mode: ScanMode::Sequential,
        rng: None,
    };
    let (y, _, _) = feb.forward(tape, store, x, &mut ctx, Some(&cross))?;
    y.mul(tape.constant(w.clone())?)?.sum()
}

/// Worst relative gradient errors `(parameters, tokens)` of one soft-routed
/// FEB with perturbed weights and a cross-stage state, at the token point
/// drawn from `seed`.
pub fn feb_gradient_errors(seed: u64) -> (f64, f64) {
    let cfg = toy_config(false);
    let mut store = ParamStore::new();
    let feb = Feb::new(&mut store, "feb", &cfg, &mut SeededRng::new(1)).unwrap();
    perturb_all(&mut store, 2, 0.3);
    let mut rng = SeededRng::new(seed);
    let x = randn(vec![32, 6], &mut rng, 1.0);
    let z = randn(vec![1, 4], &mut rng, 1.0);
    let hidden = randn(vec![6, 3], &mut rng, 0.5);
    let offset = randn(vec![32, 3], &mut rng, 0.5);
    let w = randn(vec![32, 6], &mut rng, 1.0);

    let ids = feb.params();
    let params = param_gradient_check(&mut store, &ids, 4, 1e-5, |tape, s| {
        let xv = tape.constant(x.clone())?;
        feb_loss(&feb, tape, s, xv, &z, &hidden, &offset, &w)
    })
    .unwrap();
    let tokens = finite_difference_check(
        |tape, xv| feb_loss(&feb, tape, &store, xv, &z, &hidden, &offset, &w),
        &x,
        1e-5,
    )
    .unwrap();
    (params, tokens)
}
