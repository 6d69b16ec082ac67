use gbuf_autodiff::{ParamStore, Tensor};
use gbuf_enhance::discriminator::{score_level, DiscriminatorConfig, LabelMap, LevelDiscriminator};
use gbuf_enhance::trainer::{r1_param_grads, r1_penalty};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> (ParamStore, LevelDiscriminator) {
    let cfg = DiscriminatorConfig { widths: vec![4], strides: vec![1], max_groups: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let d = LevelDiscriminator::new(&mut store, "d", 2, &cfg, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    (store, d)
}

fn input() -> (Tensor, LabelMap) {
    let x = Tensor::from_fn(&[2, 5, 5], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
    let l = LabelMap::new(5, 5, (0..25).map(|i| i % 5).collect()).unwrap();
    (x, l)
}

fn patch_score(store: &ParamStore, d: &LevelDiscriminator, x: &Tensor, l: &LabelMap) -> f64 {
    score_level(d, store, x, Some(l)).unwrap().mean()
}

#[test]
fn penalty_matches_finite_differences() {
    let (store, d) = tiny();
    let (x, l) = input();
    let (pen, grad) = r1_penalty(&d, &store, &x, Some(&l)).unwrap();
    let h = 1e-6;
    let mut fd = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let gi = (patch_score(&store, &d, &xp, &l) - patch_score(&store, &d, &xm, &l)) / (2.0 * h);
        assert!((gi - grad.data()[i]).abs() < 1e-5 * (1.0 + gi.abs()));
        fd += gi * gi;
    }
    assert!(pen > 0.0);
    assert!((pen - fd).abs() / fd < 1e-3, "{pen} vs {fd}");
}

#[test]
fn penalty_parameter_gradient_matches_finite_differences() {
    let (store, d) = tiny();
    let (x, l) = input();
    let (_, grads) = r1_param_grads(&d, &store, &x, Some(&l), 1e-4).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (k, id) in store.ids().enumerate() {
        for i in (0..store.value(id).len()).step_by(7) {
            let pen_at = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[i] += delta;
                r1_penalty(&d, &s, &x, Some(&l)).unwrap().0
            };
            let fd = (pen_at(h) - pen_at(-h)) / (2.0 * h);
            let got = grads[k].data()[i];
            assert!((fd - got).abs() <= 1e-3 * (1.0 + fd.abs()), "{} [{i}]: fd {fd} vs {got}", store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 10);
}
