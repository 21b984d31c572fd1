use robustgs::degrade::ImageRGB;
use robustgs::gendeg::{patch_batch, GenDeg, GenDegConfig};
use robustgs::tensor::{finite_difference_check, param_gradient_check};
use robustgs::{ParamStore, SeededRng, Tape, Tensor};

fn image(size: usize, seed: u64) -> ImageRGB {
    let mut rng = SeededRng::new(seed);
    ImageRGB::new(
        size,
        size,
        (0..size * size * 3).map(|_| rng.uniform()).collect(),
    )
    .unwrap()
}

/// A small model whose zero-initialized layers are perturbed, so no
/// gradient is trivially zero.
fn perturbed() -> (ParamStore, GenDeg) {
    let cfg = GenDegConfig {
        width: 8,
        z_dim: 6,
        proxy_dim: 5,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let g = GenDeg::new(&mut store, "gendeg", cfg, &mut SeededRng::new(4)).unwrap();
    let mut rng = SeededRng::new(5);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| !p.is_frozen())
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let v = store.value(id).clone();
        let noisy =
            Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] + 0.2 * rng.normal()).unwrap();
        store.set_value(id, noisy).unwrap();
    }
    (store, g)
}

#[test]
fn reconstruction_gradient_wrt_the_embedding() {
    let (store, g) = perturbed();
    let clean = patch_batch(&[&image(16, 1), &image(16, 2)], 8).unwrap();
    let mut rng = SeededRng::new(6);
    for _ in 0..3 {
        let z = Tensor::from_fn(vec![2, 6], |_| rng.normal()).unwrap();
        let err = finite_difference_check(
            |tape, z| {
                let pred = g.reconstruct(tape, &store, tape.constant(clean.clone())?, z)?;
                let w =
                    tape.constant(Tensor::from_fn(pred.shape(), |i| (i as f64 * 0.37).cos())?)?;
                pred.mul(w)?.sum()
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }
}

#[test]
fn reconstruction_is_an_image_for_a_zero_embedding() {
    let (store, g) = perturbed();
    let clean = patch_batch(&[&image(16, 3)], 8).unwrap();
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(vec![1, 6]).unwrap()).unwrap();
    let pred = g
        .reconstruct(&tape, &store, tape.constant(clean.clone()).unwrap(), z)
        .unwrap();
    assert_eq!(pred.shape(), clean.shape().to_vec());
    assert!(pred.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn total_loss_gradient_over_every_trainable_parameter() {
    let (mut store, g) = perturbed();
    let clean = [image(16, 10), image(16, 11), image(16, 12)];
    let degraded = [image(16, 20), image(16, 21), image(16, 22)];
    let labels = [0, 4, 0];
    let ids = g.params();
    let err = param_gradient_check(&mut store, &ids, 3, 1e-5, |tape, s| {
        let c: Vec<&ImageRGB> = clean.iter().collect();
        let d: Vec<&ImageRGB> = degraded.iter().collect();
        Ok(g.losses(tape, s, &c, &d, &labels)?.total)
    })
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}
