use gbuf_autodiff::Tensor;
use gbuf_enhance::backbone::{BackboneConfig, RandomConvBackbone};
use gbuf_enhance::metrics::{image_features, kid, skvd, LabeledImage, SkvdConfig, SubsetProtocol};
use gbuf_enhance::scenegen::{generate_dataset, LayoutConfig, StyleTag};
use gbuf_enhance::Exec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn noisy(images: &[Tensor], sigma: f64, seed: u64) -> Vec<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    images
        .iter()
        .map(|t| Tensor::from_vec(t.shape(), t.data().iter().map(|v| (v + n.sample(&mut r)).clamp(0.0, 1.0)).collect()).unwrap())
        .collect()
}

// Distances to clean targets must grow with the noise added to a copy of
// them, at every tap and for KID.
#[test]
fn distances_order_by_noise_level() {
    let cfg = LayoutConfig::default();
    let a = generate_dataset(&cfg, 60, 5, StyleTag::Target, Exec::Parallel).unwrap();
    let b = generate_dataset(&cfg, 60, 6, StyleTag::Target, Exec::Parallel).unwrap();
    let bb = RandomConvBackbone::new(&BackboneConfig { widths: vec![16, 32, 64, 64, 64], ..Default::default() }).unwrap();
    let proto = SubsetProtocol { subset_size: 50, n_subsets: 5, seed: 1 };
    let scfg = SkvdConfig { subsets: proto, max_patches: 600, ..Default::default() };
    let clean: Vec<Tensor> = a.iter().map(|s| s.image.clone()).collect();
    let fb = image_features(&b.iter().map(|s| s.image.clone()).collect::<Vec<_>>(), &bb, Exec::Parallel).unwrap();
    let lb: Vec<LabeledImage> = b.iter().map(|s| LabeledImage { image: &s.image, labels: &s.labels }).collect();
    let mut prev: Option<Vec<f64>> = None;
    for (k, sigma) in [0.0, 0.1, 0.3].into_iter().enumerate() {
        let imgs = if sigma == 0.0 { clean.clone() } else { noisy(&clean, sigma, k as u64) };
        let la: Vec<LabeledImage> = imgs.iter().zip(&a).map(|(i, s)| LabeledImage { image: i, labels: &s.labels }).collect();
        let mut vals = vec![kid(&image_features(&imgs, &bb, Exec::Parallel).unwrap(), &fb, &proto, Exec::Parallel).unwrap().value];
        vals.extend(skvd(&la, &lb, &bb, &[0, 1, 2, 3, 4], &scfg, Exec::Parallel).unwrap().iter().map(|r| r.value));
        if let Some(p) = &prev {
            for (t, (now, before)) in vals.iter().zip(p).enumerate() {
                assert!(now > before, "sigma {sigma}, metric {t}: {now} <= {before}");
            }
        }
        prev = Some(vals);
    }
}
