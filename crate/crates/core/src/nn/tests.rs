use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_params(hidden: usize, critic: CriticMode, seed: u64, scale: f64) -> PolicyParams {
    let shape = NetworkShape::policy(hidden, critic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.gen_range(-scale..scale)).collect();
    PolicyParams::from_flat(shape, data).unwrap()
}

fn random_obs(rng: &mut impl Rng) -> Vec<f64> {
    (0..OBS_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Straight-line forward pass for comparison.
fn reference_forward(p: &PolicyParams, x: &[f64]) -> (Vec<f64>, f64) {
    let s = p.shape();
    let layer = |w: &[f64], b: &[f64], input: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|r| {
                let mut z = b[r];
                for c in 0..input.len() {
                    z += w[r * input.len() + c] * input[c];
                }
                z
            })
            .collect()
    };
    let tanh = |v: Vec<f64>| v.into_iter().map(f64::tanh).collect::<Vec<_>>();
    let h1 = tanh(layer(p.block("W1").unwrap(), p.block("b1").unwrap(), x));
    let h2 = tanh(layer(p.block("W2").unwrap(), p.block("b2").unwrap(), &h1));
    let logits = layer(p.block("W_pi").unwrap(), p.block("b_pi").unwrap(), &h2);
    let vin = if s.critic == CriticMode::Separate {
        let c1 = tanh(layer(p.block("Wc1").unwrap(), p.block("bc1").unwrap(), x));
        tanh(layer(p.block("Wc2").unwrap(), p.block("bc2").unwrap(), &c1))
    } else {
        h2
    };
    let value = layer(p.block("W_v").unwrap(), p.block("b_v").unwrap(), &vin)[0];
    (logits, value)
}

#[test]
fn zero_params_give_zero_outputs() {
    let p = PolicyParams::zeros(NetworkShape::policy(8, CriticMode::Shared));
    let out = p.forward(&Observation([0.3; OBS_DIM]));
    assert!(out.logits.iter().all(|&z| z == 0.0));
    assert_eq!(out.value, 0.0);
}

#[test]
fn output_biases_pass_through() {
    let mut p = PolicyParams::zeros(NetworkShape::policy(8, CriticMode::Shared));
    p.block_mut("b_pi")
        .unwrap()
        .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    p.block_mut("b_v").unwrap()[0] = -7.5;
    let out = p.forward(&Observation([0.9; OBS_DIM]));
    assert_eq!(out.logits, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(out.value, -7.5);
}

#[test]
fn forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for critic in [CriticMode::Shared, CriticMode::Separate] {
        for seed in 0..5 {
            let p = random_params(13, critic, seed, 0.4);
            let x = random_obs(&mut rng);
            let out = p.forward_slice(&x).unwrap();
            let (logits, value) = reference_forward(&p, &x);
            for (a, b) in out.logits.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((out.value - value).abs() < 1e-12);
        }
    }
}

#[test]
fn layout_agrees_with_block_table() {
    for critic in [CriticMode::Shared, CriticMode::Separate] {
        let s = NetworkShape::policy(7, critic);
        let l = s.layout();
        let names = ["W1", "b1", "W2", "b2", "W_pi", "b_pi", "W_v", "b_v"];
        let offs = [l.w1, l.b1, l.w2, l.b2, l.wpi, l.bpi, l.wv, l.bv];
        for (n, o) in names.iter().zip(offs) {
            assert_eq!(s.offset(n), Some(o));
        }
        if let Some(c) = l.critic {
            for (n, o) in ["Wc1", "bc1", "Wc2", "bc2"].iter().zip(c) {
                assert_eq!(s.offset(n), Some(o));
            }
        }
    }
}

#[test]
fn forward_rejects_wrong_width() {
    let p = PolicyParams::zeros(NetworkShape::policy(4, CriticMode::Shared));
    assert!(matches!(p.forward_slice(&[0.0; 5]), Err(Error::Shape(_))));
}

#[test]
fn init_is_orthogonal_and_deterministic() {
    let shape = NetworkShape::policy(32, CriticMode::Shared);
    let a = PolicyParams::init(shape, &mut ChaCha8Rng::seed_from_u64(9));
    let b = PolicyParams::init(shape, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    // W1 is 32x21: columns are orthonormal up to the gain.
    let w1 = a.block("W1").unwrap();
    for i in 0..OBS_DIM {
        for j in 0..OBS_DIM {
            let d: f64 = (0..32).map(|r| w1[r * OBS_DIM + i] * w1[r * OBS_DIM + j]).sum();
            let want = if i == j { 2.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-9);
        }
    }
    assert!(a.block("b1").unwrap().iter().all(|&x| x == 0.0));
    let wpi = a.block("W_pi").unwrap();
    for r in 0..NUM_ACTIONS {
        let n: f64 = wpi[r * 32..(r + 1) * 32].iter().map(|x| x * x).sum();
        assert!((n.sqrt() - 0.01).abs() < 1e-12);
    }
}

#[test]
fn softmax_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let (lp, h) = log_prob_and_entropy(&z);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let direct: f64 = {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            -e.iter()
                .map(|x| x / s)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        };
        assert!((h - direct).abs() < 1e-10);
    }
    let (lp, h) = log_prob_and_entropy(&[0.0; 6]);
    assert!(lp.iter().all(|&l| (l + 6f64.ln()).abs() < 1e-12));
    assert!((h - 6f64.ln()).abs() < 1e-12);
    let (lp, h) = log_prob_and_entropy(&[1000.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(lp.iter().all(|l| l.is_finite()));
    assert!(lp[0].abs() < 1e-12);
    assert!(h.abs() < 1e-12);
}

/// Test losses exercising every path through the heads.
#[derive(Clone, Copy, Debug)]
enum Kind {
    LogProb,
    Entropy,
    Value,
    Mixed,
}

struct Fixture {
    obs: Vec<Vec<f64>>,
    actions: Vec<usize>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    kind: Kind,
}

impl Fixture {
    fn new(n: usize, kind: Kind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            obs: (0..n).map(|_| random_obs(&mut rng)).collect(),
            actions: (0..n).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect(),
            targets: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            weights: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            kind,
        }
    }
}

impl HeadLoss for Fixture {
    fn observation(&self, i: usize) -> &[f64] {
        &self.obs[i]
    }

    fn sample<S: Scalar>(&self, i: usize, logits: &[S], value: S, dlogits: &mut [S]) -> (S, S) {
        let mut lp = vec![S::default(); logits.len()];
        let h = log_softmax(logits, &mut lp);
        let a = self.actions[i];
        let w = self.weights[i];
        let (use_lp, use_h, use_v) = match self.kind {
            Kind::LogProb => (1.0, 0.0, 0.0),
            Kind::Entropy => (0.0, 1.0, 0.0),
            Kind::Value => (0.0, 0.0, 1.0),
            Kind::Mixed => (1.0, 0.3, 0.5),
        };
        let err = value - S::cst(self.targets[i]);
        let loss = -(lp[a].scale(w * use_lp)) - h.scale(use_h) + (err * err).scale(use_v);
        // d(-w log p_a)/dz_k = w (p_k - [k == a])
        // d(-H)/dz_k = p_k (log p_k + H)
        for k in 0..logits.len() {
            let p = lp[k].exp();
            let ind = if k == a { 1.0 } else { 0.0 };
            dlogits[k] = (p - S::cst(ind)).scale(w * use_lp) + (p * (lp[k] + h)).scale(use_h);
        }
        (loss, err.scale(2.0 * use_v))
    }
}

fn loss_only(p: &PolicyParams, f: &Fixture) -> f64 {
    let idx: Vec<usize> = (0..f.obs.len()).collect();
    loss_and_grad(p, f, &idx).unwrap().0
}

#[test]
fn gradient_matches_finite_differences() {
    let h = 1e-5;
    for critic in [CriticMode::Shared, CriticMode::Separate] {
        for (n, kind) in [Kind::LogProb, Kind::Entropy, Kind::Value, Kind::Mixed]
            .into_iter()
            .enumerate()
        {
            let p = random_params(10, critic, 100 + n as u64, 0.5);
            let f = Fixture::new(7, kind, n as u64);
            let idx: Vec<usize> = (0..7).collect();
            let (_, g) = loss_and_grad(&p, &f, &idx).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            for _ in 0..200 {
                let k = rng.gen_range(0..p.len());
                let mut plus = p.clone();
                plus.as_mut_slice()[k] += h;
                let mut minus = p.clone();
                minus.as_mut_slice()[k] -= h;
                let fd = (loss_only(&plus, &f) - loss_only(&minus, &f)) / (2.0 * h);
                let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{kind:?} {critic:?} coord {k}: {} vs {fd}", g[k]);
            }
        }
    }
}

#[test]
fn value_loss_does_not_touch_actor_head() {
    let p = random_params(8, CriticMode::Shared, 5, 0.5);
    let f = Fixture::new(5, Kind::Value, 2);
    let (_, g) = loss_and_grad(&p, &f, &[0, 1, 2, 3, 4]).unwrap();
    let shape = p.shape();
    for name in ["W_pi", "b_pi"] {
        let off = shape.offset(name).unwrap();
        let len = shape.blocks().iter().find(|b| b.name == name).unwrap().len();
        assert!(g[off..off + len].iter().all(|&x| x == 0.0), "{name}");
    }
}

#[test]
fn separate_critic_isolates_trunks() {
    let p = random_params(8, CriticMode::Separate, 6, 0.5);
    let f = Fixture::new(5, Kind::Value, 3);
    let (_, g) = loss_and_grad(&p, &f, &[0, 1, 2, 3, 4]).unwrap();
    let w1 = p.shape().offset("W1").unwrap();
    let b2 = p.shape().offset("b2").unwrap() + 8;
    assert!(g[w1..b2].iter().all(|&x| x == 0.0));
    let f = Fixture::new(5, Kind::LogProb, 3);
    let (_, g) = loss_and_grad(&p, &f, &[0, 1, 2, 3, 4]).unwrap();
    let wc1 = p.shape().offset("Wc1").unwrap();
    assert!(g[wc1..].iter().all(|&x| x == 0.0));
}

#[test]
fn hvp_matches_gradient_differences() {
    let h = 1e-5;
    for critic in [CriticMode::Shared, CriticMode::Separate] {
        let p = random_params(9, critic, 77, 0.5);
        let f = Fixture::new(6, Kind::Mixed, 8);
        let idx: Vec<usize> = (0..6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hv = hessian_vector_product(&p, &f, &idx, &v).unwrap();
        let shifted = |sign: f64| {
            let data = p.as_slice().iter().zip(&v).map(|(x, d)| x + sign * h * d).collect();
            let q = PolicyParams::from_flat(*p.shape(), data).unwrap();
            loss_and_grad(&q, &f, &idx).unwrap().1
        };
        let (gp, gm) = (shifted(1.0), shifted(-1.0));
        let scale = hv.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for k in 0..p.len() {
            let fd = (gp[k] - gm[k]) / (2.0 * h);
            assert!(
                (hv[k] - fd).abs() < 1e-5 * scale.max(1.0),
                "coord {k}: {} vs {fd}",
                hv[k]
            );
        }
        // The real part of the dual pass is the ordinary gradient.
        assert!(hv.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn gradient_is_deterministic() {
    let p = random_params(16, CriticMode::Shared, 1, 0.3);
    let f = Fixture::new(10, Kind::Mixed, 1);
    let idx: Vec<usize> = (0..10).collect();
    let (la, ga) = loss_and_grad(&p, &f, &idx).unwrap();
    let (lb, gb) = loss_and_grad(&p, &f, &idx).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn empty_index_set_is_an_error() {
    let p = random_params(4, CriticMode::Shared, 1, 0.3);
    let f = Fixture::new(2, Kind::Value, 1);
    assert!(loss_and_grad(&p, &f, &[]).is_err());
}
