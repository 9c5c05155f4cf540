use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::load_checkpoint;

fn small_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.network.hidden = 16;
    run.ppo.horizon = 64;
    run.ppo.minibatch = 64;
    run.meta.inner_lr = 0.05;
    run.meta.outer_lr = 1e-3;
    run.meta.iterations = 2;
    run.meta.log_every = 1;
    run.meta.log_episodes = 2;
    run
}

fn setup(run: &RunConfig) -> Setup {
    Setup::new(ScenarioConfig::default(), run).unwrap()
}

fn tasks() -> TaskSet {
    TaskSet::new(vec![0.3, 0.4, 0.5], 0.7).unwrap()
}

fn bits(p: &PolicyParams) -> Vec<u64> {
    p.as_slice().iter().map(|x| x.to_bits()).collect()
}

/// `L(x) = 0.5 x'Ax - b'x` in two dimensions.
struct Quadratic {
    a: [[f64; 2]; 2],
    b: [f64; 2],
}

impl Quadratic {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..2).map(|i| self.a[i][0] * x[0] + self.a[i][1] * x[1]).collect()
    }
}

impl InnerObjective for Quadratic {
    fn grad(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(p).iter().zip(self.b).map(|(ax, b)| ax - b).collect())
    }
    fn hvp(&self, _: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(v))
    }
}

#[test]
fn second_order_matches_closed_form_on_quadratic() {
    let tr = Quadratic {
        a: [[2.0, 0.5], [0.5, 1.0]],
        b: [1.0, -1.0],
    };
    let vd = Quadratic {
        a: [[1.5, -0.3], [-0.3, 0.8]],
        b: [0.2, 0.7],
    };
    let theta = [0.4, -1.3];
    let alpha = 0.1;
    let chain = inner_sgd_chain(&tr, &theta, alpha, 1).unwrap();
    let phi = &chain[1];
    // phi = theta - alpha (A theta - b)
    let at = tr.apply(&theta);
    let want_phi = [theta[0] - alpha * (at[0] - 1.0), theta[1] - alpha * (at[1] + 1.0)];
    assert!((phi[0] - want_phi[0]).abs() < 1e-15 && (phi[1] - want_phi[1]).abs() < 1e-15);

    let outer = vd.grad(phi).unwrap();
    let so = chain_backprop(&tr, &chain, alpha, outer.clone()).unwrap();
    // d/dtheta L_vd(phi(theta)) = (I - alpha A)(C phi - d)
    let closed = [
        outer[0] - alpha * (2.0 * outer[0] + 0.5 * outer[1]),
        outer[1] - alpha * (0.5 * outer[0] + 1.0 * outer[1]),
    ];
    for i in 0..2 {
        assert!((so[i] - closed[i]).abs() / closed[i].abs() < 1e-8);
        // First order drops exactly alpha * A * outer.
        let hess_term = alpha * tr.apply(&outer)[i];
        assert!((outer[i] - so[i] - hess_term).abs() < 1e-12);
    }

    // Two inner steps: (I - alpha A)^2 (C phi_2 - d).
    let chain = inner_sgd_chain(&tr, &theta, alpha, 2).unwrap();
    let outer = vd.grad(&chain[2]).unwrap();
    let so = chain_backprop(&tr, &chain, alpha, outer.clone()).unwrap();
    let once = [
        outer[0] - alpha * tr.apply(&outer)[0],
        outer[1] - alpha * tr.apply(&outer)[1],
    ];
    let twice = [
        once[0] - alpha * tr.apply(&once)[0],
        once[1] - alpha * tr.apply(&once)[1],
    ];
    for i in 0..2 {
        assert!((so[i] - twice[i]).abs() / twice[i].abs() < 1e-8);
    }
}

#[test]
fn second_order_matches_finite_differences_on_ppo() {
    let mut run = small_run();
    run.network.hidden = 8;
    run.meta.inner_steps = 2;
    let s = setup(&run);
    let theta = s.init_params(3);
    let d_tr = s.rollout(&theta, 0.4, 11).unwrap();
    let d_vd = s.rollout(&theta, 0.4, 12).unwrap();
    let tr = s.objective(&d_tr).unwrap();
    let vd = s.objective(&d_vd).unwrap();
    let alpha = run.meta.inner_lr;
    let composite = |p: &[f64]| {
        let chain = inner_sgd_chain(&tr, p, alpha, 2).unwrap();
        vd.stats(&PolicyParams::from_flat(s.shape, chain[2].clone()).unwrap())
            .unwrap()
            .loss
    };
    let chain = inner_sgd_chain(&tr, theta.as_slice(), alpha, 2).unwrap();
    let g = chain_backprop(&tr, &chain, alpha, vd.grad(&chain[2]).unwrap()).unwrap();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let k = rng.gen_range(0..theta.len());
        let mut plus = theta.as_slice().to_vec();
        plus[k] += h;
        let mut minus = theta.as_slice().to_vec();
        minus[k] -= h;
        let fd = (composite(&plus) - composite(&minus)) / (2.0 * h);
        let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-4, "coord {k}: {} vs {fd}", g[k]);
    }
}

#[test]
fn zero_inner_lr_keeps_theta() {
    let mut run = small_run();
    run.meta.inner_lr = 0.0;
    let s = setup(&run);
    let theta = s.init_params(1);
    let a = inner_adapt(
        &s,
        &theta,
        0.4,
        TaskSeeds {
            train: 1,
            validation: 2,
        },
    )
    .unwrap();
    assert_eq!(bits(&a.phi), bits(&theta));
}

#[test]
fn one_inner_step_is_theta_minus_alpha_grad() {
    let run = small_run();
    let s = setup(&run);
    let theta = s.init_params(2);
    let seeds = TaskSeeds {
        train: 5,
        validation: 6,
    };
    let a = inner_adapt(&s, &theta, 0.3, seeds).unwrap();
    let d_tr = s.rollout(&theta, 0.3, 5).unwrap();
    assert_eq!(d_tr, a.d_tr);
    let all: Vec<usize> = (0..d_tr.len()).collect();
    let (_, g) = loss_and_grad(&theta, &PpoLoss::new(&d_tr, &run.ppo).unwrap(), &all).unwrap();
    for (k, gk) in g.iter().enumerate() {
        assert_eq!(a.phi.as_slice()[k], theta.as_slice()[k] - run.meta.inner_lr * gk);
    }
    let b = inner_adapt(&s, &theta, 0.3, seeds).unwrap();
    assert_eq!(bits(&a.phi), bits(&b.phi));
    assert_eq!(a.d_vd, b.d_vd);
}

#[test]
fn degenerate_maml_equals_joint_gradient_step() {
    let mut run = small_run();
    run.meta.inner_lr = 0.0;
    let s = setup(&run);
    let theta = s.init_params(4);
    let adam = AdamState::new(theta.len());
    let batch: Vec<(f64, TaskSeeds)> = [0.3, 0.4, 0.5]
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            (
                f,
                TaskSeeds {
                    train: 100 + i as u64,
                    validation: 200 + i as u64,
                },
            )
        })
        .collect();
    let meta = meta_update(&s, &theta, &adam, &batch, 1e-3).unwrap();
    let joint: Vec<(f64, u64)> = batch.iter().map(|&(f, seeds)| (f, seeds.validation)).collect();
    let pre = pretrained_update(&s, &theta, &adam, &joint, 1e-3).unwrap();
    for k in 0..theta.len() {
        let dm = meta.params.as_slice()[k] - theta.as_slice()[k];
        let dp = pre.params.as_slice()[k] - theta.as_slice()[k];
        assert!((dm - dp).abs() < 1e-12);
    }
    assert_eq!(meta.adam, pre.adam);
}

#[test]
fn single_task_meta_step_recomputed() {
    let run = small_run();
    let s = setup(&run);
    let theta = s.init_params(5);
    let adam = AdamState::new(theta.len());
    let seeds = TaskSeeds {
        train: 7,
        validation: 8,
    };
    let step = meta_update(&s, &theta, &adam, &[(0.5, seeds)], 1e-3).unwrap();

    let a = inner_adapt(&s, &theta, 0.5, seeds).unwrap();
    let all: Vec<usize> = (0..a.d_vd.len()).collect();
    let (_, mut g) = loss_and_grad(&a.phi, &PpoLoss::new(&a.d_vd, &run.ppo).unwrap(), &all).unwrap();
    clip_grad_norm(&mut g, run.ppo.max_grad_norm);
    let mut want = theta.clone();
    let mut st = AdamState::new(theta.len());
    adam_step(want.as_mut_slice(), &g, &mut st, 1e-3).unwrap();
    assert_eq!(bits(&step.params), bits(&want));
    assert_eq!(step.tasks.len(), 1);
    assert_eq!(step.env_steps, 2 * run.ppo.horizon as u64);
}

#[test]
fn second_order_meta_step_runs() {
    let mut run = small_run();
    run.meta.mode = MetaMode::Second;
    let s = setup(&run);
    let theta = s.init_params(6);
    let adam = AdamState::new(theta.len());
    let seeds = TaskSeeds {
        train: 1,
        validation: 2,
    };
    let so = meta_update(&s, &theta, &adam, &[(0.4, seeds)], 1e-3).unwrap();
    run.meta.mode = MetaMode::First;
    let fo = meta_update(&setup(&run), &theta, &adam, &[(0.4, seeds)], 1e-3).unwrap();
    assert!(so.params.is_finite());
    assert_ne!(bits(&so.params), bits(&fo.params));
}

#[test]
fn all_tasks_skipped_is_an_error() {
    let run = small_run();
    let s = setup(&run);
    let mut theta = s.init_params(1);
    theta.as_mut_slice()[0] = f64::NAN;
    let adam = AdamState::new(theta.len());
    let err = meta_update(
        &s,
        &theta,
        &adam,
        &[(
            0.3,
            TaskSeeds {
                train: 1,
                validation: 2,
            },
        )],
        1e-3,
    )
    .unwrap_err();
    assert!(matches!(err, Error::MetaBatchEmpty));
}

#[test]
fn annealing_schedule() {
    assert_eq!(annealed_lr(1e-3, 0, 10, true), 1e-3);
    assert!((annealed_lr(1e-3, 5, 10, true) - 5e-4).abs() < 1e-18);
    assert_eq!(annealed_lr(1e-3, 5, 10, false), 1e-3);
}

#[test]
fn zero_iterations_returns_initialization() {
    let mut run = small_run();
    run.meta.iterations = 0;
    let s = setup(&run);
    let r = train_meta(&s, &tasks(), 9, None).unwrap();
    assert_eq!(bits(&r.params), bits(&s.init_params(9)));
    assert!(r.log.is_empty());
    assert_eq!(r.env_steps, 0);
}

#[test]
fn training_is_reproducible_and_budgets_match() {
    let run = small_run();
    let s = setup(&run);
    let dir = tempfile::tempdir().unwrap();
    let a = train_meta(&s, &tasks(), 3, Some(TrainOutput { dir: dir.path() })).unwrap();
    let b = train_meta(&s, &tasks(), 3, None).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 6);
    assert!(a.log.iter().all(|r| r.success_rate.is_some()));

    let saved = load_checkpoint(&dir.path().join("meta.ckpt")).unwrap();
    assert_eq!(bits(&saved.params), bits(&a.params));
    assert_eq!(saved.adam.as_ref(), Some(&a.adam));
    assert!(dir.path().join("meta-train.csv").exists());

    let p = train_pretrained(&s, &tasks(), 3, None).unwrap();
    let q = train_pretrained(&s, &tasks(), 3, None).unwrap();
    assert_eq!(bits(&p.params), bits(&q.params));
    assert_eq!(p.env_steps, a.env_steps);
    assert_eq!(a.env_steps, 2 * 3 * 2 * run.ppo.horizon as u64);
}

#[test]
fn adapt_sequences() {
    let run = small_run();
    let s = setup(&run);
    let start = s.init_params(2);
    let none = adapt(&s, &start, 0.7, 0, 1).unwrap();
    assert_eq!(none.params, vec![start.clone()]);

    let a = adapt(&s, &start, 0.7, 3, 1).unwrap();
    let b = adapt(&s, &start, 0.7, 3, 1).unwrap();
    assert_eq!(a.params.len(), 4);
    assert_eq!(a.params, b.params);
    assert!(a.warning.is_none());

    let buf = s.rollout(&start, 0.7, derive_seed(1, "adapt/0")).unwrap();
    let all: Vec<usize> = (0..buf.len()).collect();
    let (_, g) = loss_and_grad(&start, &PpoLoss::new(&buf, &run.ppo).unwrap(), &all).unwrap();
    for (k, gk) in g.iter().enumerate() {
        assert_eq!(a.params[1].as_slice()[k], start.as_slice()[k] - run.meta.inner_lr * gk);
    }

    // Zero steps evaluates exactly like the checkpoint itself.
    let direct = evaluate(&s.sim, &start, 0.7, 4, 5, true).unwrap();
    let via = evaluate(&s.sim, &none.params[0], 0.7, 4, 5, true).unwrap();
    assert_eq!(direct, via);
}

#[test]
fn adapt_rejects_mismatched_shape() {
    let run = small_run();
    let s = setup(&run);
    let other = PolicyParams::zeros(NetworkShape::policy(4, crate::config::CriticMode::Shared));
    assert!(matches!(adapt(&s, &other, 0.7, 1, 0), Err(Error::Checkpoint(_))));
}

#[test]
fn task_set_rejects_test_in_train() {
    assert!(TaskSet::new(vec![0.3, 0.7], 0.7).is_err());
    assert!(TaskSet::new(vec![], 0.7).is_err());
    assert!(TaskSet::new(vec![0.3, 1.5], 0.7).is_err());
}
