use advit::data::{augment_basic, generate_synthetic, Split, SyntheticSpec};
use advit::rng::RngState;

fn spec(classes: usize, per_class: usize, image_size: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec { classes, per_class, image_size, channels: 3, seed, total: None, split: Split::Train }
}

/// Multinomial logistic regression on raw pixels by full-batch gradient
/// descent; returns training accuracy.
fn linear_probe(x: &[Vec<f64>], y: &[usize], classes: usize, epochs: usize) -> f64 {
    let dim = x[0].len();
    let mut w = vec![0.0; classes * (dim + 1)];
    let lr = 0.5;
    for _ in 0..epochs {
        let mut grad = vec![0.0; w.len()];
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = (0..classes)
                .map(|c| {
                    let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
                    row[dim] + row[..dim].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let r = e[c] / s - (c == yi) as usize as f64;
                let g = &mut grad[c * (dim + 1)..(c + 1) * (dim + 1)];
                for (gj, xj) in g[..dim].iter_mut().zip(xi) {
                    *gj += r * xj;
                }
                g[dim] += r;
            }
        }
        let n = x.len() as f64;
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= lr * gj / n;
        }
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let score = |c: usize| {
                let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
                row[dim] + row[..dim].iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>()
            };
            let pred = (0..classes).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
            pred == yi
        })
        .count();
    correct as f64 / x.len() as f64
}

#[test]
fn synthetic_classes_are_linearly_separable() {
    let ds = generate_synthetic(&spec(3, 200, 16, 0)).unwrap();
    assert_eq!(ds.len(), 600);
    let x: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.pixels(i).iter().map(|&v| v as f64).collect()).collect();
    let acc = linear_probe(&x, ds.labels(), 3, 60);
    assert!(acc >= 0.9, "linear probe train accuracy {acc}");
}

#[test]
fn generation_is_seeded() {
    let a = generate_synthetic(&spec(3, 10, 16, 4)).unwrap();
    let b = generate_synthetic(&spec(3, 10, 16, 4)).unwrap();
    let c = generate_synthetic(&spec(3, 10, 16, 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for k in 0..3 {
        assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 10);
    }
    assert_eq!(a.labels(), c.labels());
}

#[test]
fn augmentation_keeps_pixels_in_range_and_from_the_padded_image() {
    let ds = generate_synthetic(&spec(4, 5, 16, 6)).unwrap();
    let mut rng = RngState::new(0);
    for i in 0..ds.len() {
        let x = ds.image::<f64>(i);
        let y = augment_basic(&x, 4, true, &mut rng);
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // every output pixel is either padding or a pixel of the same channel
        for ch in 0..3 {
            let src = &x.data()[ch * 256..(ch + 1) * 256];
            for v in &y.data()[ch * 256..(ch + 1) * 256] {
                assert!(*v == 0.0 || src.contains(v));
            }
        }
    }
}
