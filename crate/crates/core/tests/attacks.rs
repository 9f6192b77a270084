use advit::attacks::{pgd_attack, pgd_single, robust_eval, AttackConfig, LossKind};
use advit::autograd::{Graph, Var};
use advit::data::{Dataset, Split};
use advit::rng::RngState;
use advit::vit::{Classifier, GateVector, ModelParams, ViT, ViTConfig};
use advit::warmup::{expand_mask, masked_patch_count, PatchGrid};
use advit::{Result, Tensor};

/// `logits = Wᵀ·vec(x) + b` on a single-channel `side × side` image.
struct Linear {
    side: usize,
    w: Tensor<f64>,
    b: Tensor<f64>,
}

impl Linear {
    fn new(side: usize, w: Vec<f64>, b: Vec<f64>) -> Self {
        let c = b.len();
        Linear { side, w: Tensor::new(vec![side * side, c], w).unwrap(), b: Tensor::new(vec![c], b).unwrap() }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.b.numel();
        (0..c)
            .map(|k| self.b.data()[k] + x.iter().enumerate().map(|(i, v)| v * self.w.data()[i * c + k]).sum::<f64>())
            .collect()
    }
}

impl Classifier<f64> for Linear {
    fn input_shape(&self) -> [usize; 3] {
        [1, self.side, self.side]
    }

    fn num_classes(&self) -> usize {
        self.b.numel()
    }

    fn depth(&self) -> usize {
        0
    }

    fn patch_grid(&self) -> PatchGrid {
        PatchGrid { channels: 1, image_size: self.side, patch_size: 1 }
    }

    fn forward(&self, g: &mut Graph<f64>, input: Var, _gates: Option<&GateVector>) -> Result<Var> {
        let n = self.side * self.side;
        let row = g.reshape(input, &[1, n])?;
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let y = g.matmul(row, w)?;
        let y = g.add_row(y, b)?;
        g.reshape(y, &[self.num_classes()])
    }
}

fn tiny_vit(seed: u64) -> ViT<f32> {
    let cfg = ViTConfig {
        image_size: 8,
        channels: 3,
        patch_size: 2,
        embed_dim: 8,
        num_heads: 2,
        depth: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
    };
    let mut rng = RngState::new(seed);
    let params = ModelParams::randomized(&cfg, 0.3, &mut rng);
    ViT::new(cfg, params).unwrap()
}

fn image(shape: [usize; 3], rng: &mut RngState) -> Tensor<f32> {
    let n = shape.iter().product();
    // include exact box corners so the image-box clamp is exercised
    let data = (0..n)
        .map(|_| match rng.below(6) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.unit() as f32,
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn zero_radius_gives_zero_perturbation() {
    let model = tiny_vit(0);
    let mut rng = RngState::new(1);
    let xs: Vec<_> = (0..4).map(|_| image(model.input_shape(), &mut rng)).collect();
    for steps in [0, 1, 5] {
        let cfg = AttackConfig { epsilon: 0.0, steps, ..AttackConfig::pgd(steps) };
        for d in pgd_attack(&model, &xs, &[0, 1, 2, 0], &cfg, None, 0.0, 3).unwrap() {
            assert!(d.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn one_step_on_a_linear_margin_is_alpha_sign_w() {
    // class 1 minus class 0 margin has gradient w
    let w = [0.5, -2.0, 1.0, -0.25];
    let mut weights = Vec::new();
    for wi in w {
        weights.extend([0.0, wi]);
    }
    let model = Linear::new(2, weights, vec![0.0, 0.0]);
    let x = Tensor::from_f64(&[1, 2, 2], &[0.4, 0.5, 0.6, 0.3]).unwrap();
    let cfg = AttackConfig { epsilon: 0.05, step_size: 0.03, steps: 1, loss: LossKind::CwMargin, random_init: false };
    let d = pgd_single(&model, &x, 0, &cfg, None, 0.0, &mut RngState::new(0), |_| {}).unwrap();
    for (dv, wi) in d.data().iter().zip(w) {
        assert_eq!(*dv, 0.03 * wi.signum());
    }
    let ce = AttackConfig { loss: LossKind::CrossEntropy, ..cfg };
    let d = pgd_single(&model, &x, 0, &ce, None, 0.0, &mut RngState::new(0), |_| {}).unwrap();
    for (dv, wi) in d.data().iter().zip(w) {
        assert_eq!(*dv, 0.03 * wi.signum());
    }
}

#[test]
fn perturbations_stay_in_the_ball_and_the_box() {
    let model = tiny_vit(2);
    let grid = model.patch_grid();
    let mut rng = RngState::new(4);
    for trial in 0..1000u64 {
        let cfg = AttackConfig {
            epsilon: rng.uniform(0.0, 0.3),
            step_size: rng.uniform(0.0, 0.2),
            steps: rng.below(4),
            loss: if rng.bernoulli(0.5) { LossKind::CrossEntropy } else { LossKind::CwMargin },
            random_init: rng.bernoulli(0.7),
        };
        let k = rng.unit();
        let gates = GateVector::new((0..2).map(|_| rng.bernoulli(0.5)).collect());
        let x = image(model.input_shape(), &mut rng);
        let label = rng.below(3);
        let eps = cfg.epsilon;
        let mut seen = 0;
        let d = pgd_single(&model, &x, label, &cfg, Some(&gates), k, &mut RngState::new(trial), |step| {
            seen += 1;
            assert_eq!(step.mask.masked_count(), masked_patch_count(grid.num_patches(), k));
            let pixels = expand_mask::<f32>(step.mask, &grid).unwrap();
            for (&m, &v) in pixels.data().iter().zip(step.masked_delta.data()) {
                if m == 0.0 {
                    assert_eq!(v, 0.0);
                }
            }
        })
        .unwrap();
        assert_eq!(seen, cfg.steps);
        for (&dv, &xv) in d.data().iter().zip(x.data()) {
            let (dv, xv) = (dv as f64, xv as f64);
            assert!(dv.abs() <= eps + 1e-7, "trial {trial}: |δ| = {} > ε = {eps}", dv.abs());
            assert!((-1e-7..=1.0 + 1e-7).contains(&(xv + dv)), "trial {trial}: x+δ = {}", xv + dv);
        }
    }
}

#[test]
fn attacks_are_deterministic_given_a_seed() {
    let model = tiny_vit(5);
    let mut rng = RngState::new(6);
    let xs: Vec<_> = (0..6).map(|_| image(model.input_shape(), &mut rng)).collect();
    let ys = [0, 1, 2, 2, 1, 0];
    let cfg = AttackConfig::pgd(3);
    let gates = GateVector::new(vec![false, true]);
    let a = pgd_attack(&model, &xs, &ys, &cfg, Some(&gates), 0.5, 11).unwrap();
    let b = pgd_attack(&model, &xs, &ys, &cfg, Some(&gates), 0.5, 11).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.bit_eq(q)));
    let c = pgd_attack(&model, &xs, &ys, &cfg, Some(&gates), 0.5, 12).unwrap();
    assert!(a.iter().zip(&c).any(|(p, q)| !p.bit_eq(q)));
}

fn dataset(rng: &mut RngState, n: usize, side: usize, classes: usize) -> Dataset {
    let pixels = (0..n * side * side).map(|_| rng.unit() as f32).collect();
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    Dataset::new(pixels, labels, [1, side, side], classes, Split::Test).unwrap()
}

#[test]
fn zero_step_attack_reports_clean_accuracy() {
    let model = tiny_vit(7);
    let mut rng = RngState::new(8);
    let pixels = (0..20 * 3 * 64).map(|_| rng.unit() as f32).collect();
    let labels = (0..20).map(|i| i % 3).collect();
    let ds = Dataset::new(pixels, labels, [3, 8, 8], 3, Split::Test).unwrap();
    let none = AttackConfig { steps: 0, random_init: false, ..AttackConfig::pgd(0) };
    let r = robust_eval(&model, &ds, &[("n0".into(), none)], 0).unwrap();
    assert_eq!(r.attacks[0].robust_acc, r.clean_acc);
    assert_eq!(r.examples, 20);
}

#[test]
fn constant_model_accuracy_is_the_label_zero_fraction() {
    let model = Linear::new(3, vec![0.0; 9 * 4], vec![0.0; 4]);
    let mut rng = RngState::new(9);
    let ds = dataset(&mut rng, 40, 3, 4);
    let zeros = ds.labels().iter().filter(|&&l| l == 0).count() as f64 / 40.0;
    let attacks = [("pgd5".into(), AttackConfig::pgd(5)), ("cw5".into(), AttackConfig::cw(5))];
    let r = robust_eval(&model, &ds, &attacks, 1).unwrap();
    assert_eq!(r.clean_acc, zeros);
    for a in &r.attacks {
        assert_eq!(a.robust_acc, zeros);
    }
}

#[test]
fn linear_robust_accuracy_matches_vertex_enumeration() {
    let w = vec![0.9, -0.9, -1.4, 1.4, 0.3, -0.3, 2.0, -2.0];
    let model = Linear::new(2, w, vec![0.05, -0.05]);
    let eps = 0.1;
    let mut rng = RngState::new(10);
    let ds = dataset(&mut rng, 8, 2, 2);

    // worst case of a linear classifier over the clipped box is a vertex
    let mut robust = 0;
    for i in 0..8 {
        let x: Vec<f64> = ds.pixels(i).iter().map(|&v| v as f64).collect();
        let y = ds.label(i);
        let all_correct = (0..16u32).all(|signs| {
            let p: Vec<f64> = x
                .iter()
                .enumerate()
                .map(|(j, &xv)| {
                    if signs >> j & 1 == 1 {
                        (xv + eps).min(1.0)
                    } else {
                        (xv - eps).max(0.0)
                    }
                })
                .collect();
            let z = model.logits(&p);
            let pred = if z[1] > z[0] { 1 } else { 0 };
            pred == y
        });
        robust += all_correct as usize;
    }
    let oracle = robust as f64 / 8.0;

    let cfg = AttackConfig { epsilon: eps, step_size: eps, steps: 2, loss: LossKind::CwMargin, random_init: false };
    let r = robust_eval(&model, &ds, &[("cw".into(), cfg.clone())], 0).unwrap();
    assert_eq!(r.attacks[0].robust_acc, oracle);
    let ce = AttackConfig { loss: LossKind::CrossEntropy, ..cfg };
    let r = robust_eval(&model, &ds, &[("pgd".into(), ce)], 0).unwrap();
    assert_eq!(r.attacks[0].robust_acc, oracle);
    // the oracle must be informative on this data
    assert!(r.clean_acc > oracle, "clean {} oracle {oracle}", r.clean_acc);
}

#[test]
fn evaluation_is_deterministic_given_a_seed() {
    let model = tiny_vit(11);
    let mut rng = RngState::new(12);
    let pixels = (0..12 * 3 * 64).map(|_| rng.unit() as f32).collect();
    let labels = (0..12).map(|i| i % 3).collect();
    let ds = Dataset::new(pixels, labels, [3, 8, 8], 3, Split::Test).unwrap();
    let attacks = [("pgd3".into(), AttackConfig::pgd(3))];
    let a = robust_eval(&model, &ds, &attacks, 5).unwrap();
    let b = robust_eval(&model, &ds, &attacks, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gate_vector_length_is_checked() {
    let model = tiny_vit(13);
    let x = Tensor::<f32>::zeros(&model.input_shape());
    let r = pgd_single(&model, &x, 0, &AttackConfig::pgd(1), Some(&GateVector::open(5)), 0.0, &mut RngState::new(0), |_| {});
    assert!(r.is_err());
}
