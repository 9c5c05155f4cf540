//! Rollouts, generalized advantage estimation and the clipped PPO objective.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::PpoHyper;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, clip_grad_norm, log_prob_and_entropy, log_softmax, loss_and_grad, AdamState, HeadLoss, PolicyParams,
    Scalar,
};
use crate::reward::RewardBreakdown;
use crate::sim::{JointAction, Observation, TerminalFlag};

/// Standard deviations below this are treated as a degenerate buffer.
const NORM_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    /// Log-probability of the executed action under the behavior policy.
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub values: Vec<f64>,
    pub terminals: Vec<bool>,
    pub interventions: Vec<bool>,
    /// `V(s_T)` of the state after the last step, 0 if that step ended an episode.
    pub bootstrap_value: f64,
    /// Outcomes of the episodes that ended inside this buffer.
    pub outcomes: Vec<TerminalFlag>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn has_advantages(&self) -> bool {
        !self.actions.is_empty() && self.advantages.len() == self.actions.len()
    }

    pub fn intervention_count(&self) -> usize {
        self.interventions.iter().filter(|&&b| b).count()
    }

    /// Mean per-step reward breakdown.
    pub fn mean_breakdown(&self) -> RewardBreakdown {
        let n = self.breakdowns.len().max(1) as f64;
        let mut m = RewardBreakdown::default();
        for b in &self.breakdowns {
            m.comfort += b.comfort;
            m.efficiency += b.efficiency;
            m.safety += b.safety;
            m.total += b.total;
        }
        m.comfort /= n;
        m.efficiency /= n;
        m.safety /= n;
        m.total /= n;
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RolloutOptions {
    pub shield: bool,
    /// Argmax actions instead of sampling.
    pub greedy: bool,
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a categorical given log-probabilities.
pub fn sample_categorical<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Run exactly `horizon` environment steps, resetting after each terminal.
///
/// A running episode in `env` is continued rather than reset.
pub fn collect_rollout<E: Environment, R: Rng>(
    env: &mut E,
    params: &PolicyParams,
    horizon: usize,
    rng: &mut R,
    opts: RolloutOptions,
) -> Result<RolloutBuffer> {
    if horizon == 0 {
        return Err(Error::Invalid("rollout horizon must be positive".into()));
    }
    let mut buf = RolloutBuffer::default();
    let mut obs = match env.current() {
        Some(o) => o,
        None => env.reset()?,
    };
    for _ in 0..horizon {
        let out = params.forward(&obs);
        let (logp, _) = log_prob_and_entropy(&out.logits);
        let proposed = if opts.greedy {
            argmax(&out.logits)
        } else {
            sample_categorical(&logp, rng)
        };
        let proposed = JointAction::new(proposed)?;
        let executed = if opts.shield { env.shield(proposed)? } else { proposed };
        let t = env.step(executed)?;

        buf.observations.push(obs);
        buf.actions.push(executed.index());
        buf.log_probs.push(logp[executed.index()]);
        buf.rewards.push(t.reward.total);
        buf.breakdowns.push(t.reward);
        buf.values.push(out.value);
        buf.terminals.push(t.done());
        buf.interventions.push(executed != proposed);

        obs = if t.done() {
            buf.outcomes.push(t.outcome);
            env.reset()?
        } else {
            t.observation
        };
    }
    buf.bootstrap_value = if *buf.terminals.last().unwrap() {
        0.0
    } else {
        params.forward(&obs).value
    };
    Ok(buf)
}

/// GAE(λ) advantages and return targets, before any normalization.
///
/// `terminals[t]` cuts the recursion after step `t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shift to zero mean and scale to unit variance; a near-constant vector is
/// only centered.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if std >= NORM_GUARD {
            *x /= std;
        }
    }
}

/// Fill `advantages` (normalized) and `returns` (from raw advantages).
pub fn compute_gae(buf: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    let (mut adv, returns) = gae(
        &buf.rewards,
        &buf.values,
        &buf.terminals,
        buf.bootstrap_value,
        gamma,
        lambda,
    );
    normalize(&mut adv);
    buf.advantages = adv;
    buf.returns = returns;
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// The PPO objective over a buffer, as a loss to minimize:
/// `-surrogate + c1 (V - V_targ)^2 - c2 H`, averaged over samples.
#[derive(Debug, Clone, Copy)]
pub struct PpoLoss<'a> {
    pub buffer: &'a RolloutBuffer,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl<'a> PpoLoss<'a> {
    pub fn new(buffer: &'a RolloutBuffer, hyper: &PpoHyper) -> Result<Self> {
        if !buffer.has_advantages() {
            return Err(Error::Invalid("buffer has no advantages; run compute_gae first".into()));
        }
        Ok(Self {
            buffer,
            clip: hyper.clip,
            value_coef: hyper.value_coef,
            entropy_coef: hyper.entropy_coef,
        })
    }
}

impl HeadLoss for PpoLoss<'_> {
    fn observation(&self, i: usize) -> &[f64] {
        self.buffer.observations[i].as_slice()
    }

    fn sample<S: Scalar>(&self, i: usize, logits: &[S], value: S, dlogits: &mut [S]) -> (S, S) {
        let b = self.buffer;
        let a = b.actions[i];
        let adv = b.advantages[i];
        let mut lp = [S::default(); crate::sim::NUM_ACTIONS];
        let lp = &mut lp[..logits.len()];
        let entropy = log_softmax(logits, lp);
        let ratio = (lp[a] - S::cst(b.log_probs[i])).exp();

        // Unclipped branch when it is the minimum; otherwise the surrogate
        // is constant in the parameters.
        let r = ratio.val();
        let clipped = r.clamp(1.0 - self.clip, 1.0 + self.clip);
        let unclipped_active = r * adv <= clipped * adv;
        let (surrogate, d_lp_a) = if unclipped_active {
            (ratio.scale(adv), -(ratio.scale(adv)))
        } else {
            (S::cst(clipped * adv), S::default())
        };

        let err = value - S::cst(b.returns[i]);
        let loss = -surrogate + (err * err).scale(self.value_coef) - entropy.scale(self.entropy_coef);
        for k in 0..logits.len() {
            let p = lp[k].exp();
            let ind = if k == a { 1.0 } else { 0.0 };
            // d lp_a / dz_k = [k = a] - p_k ; d(-H)/dz_k = p_k (lp_k + H)
            dlogits[k] = d_lp_a * (S::cst(ind) - p) + (p * (lp[k] + entropy)).scale(self.entropy_coef);
        }
        (loss, err.scale(2.0 * self.value_coef))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Loss components of `params` on the given samples.
pub fn ppo_stats(params: &PolicyParams, loss: &PpoLoss, indices: &[usize]) -> Result<PpoStats> {
    if indices.is_empty() {
        return Err(Error::Shape("empty sample set".into()));
    }
    let b = loss.buffer;
    let mut s = PpoStats::default();
    for &i in indices {
        let out = params.forward(&b.observations[i]);
        let (lp, h) = log_prob_and_entropy(&out.logits);
        let r = (lp[b.actions[i]] - b.log_probs[i]).exp();
        s.policy_loss -= clipped_surrogate(r, b.advantages[i], loss.clip);
        s.value_loss += (out.value - b.returns[i]).powi(2);
        s.entropy += h;
        s.mean_ratio += r;
        if (r - 1.0).abs() > loss.clip {
            s.clip_fraction += 1.0;
        }
    }
    let n = indices.len() as f64;
    s.policy_loss /= n;
    s.value_loss /= n;
    s.entropy /= n;
    s.mean_ratio /= n;
    s.clip_fraction /= n;
    s.loss = s.policy_loss + loss.value_coef * s.value_loss - loss.entropy_coef * s.entropy;
    if !s.loss.is_finite() {
        return Err(Error::Diverged(format!("ppo loss {}", s.loss)));
    }
    Ok(s)
}

/// Scalar PPO loss on a set of samples.
pub fn ppo_loss(params: &PolicyParams, buffer: &RolloutBuffer, indices: &[usize], hyper: &PpoHyper) -> Result<f64> {
    Ok(ppo_stats(params, &PpoLoss::new(buffer, hyper)?, indices)?.loss)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateReport {
    /// Statistics at the start of each epoch.
    pub epochs: Vec<PpoStats>,
    /// True if the update stopped early on a non-finite loss or gradient.
    pub diverged: bool,
}

/// Multi-epoch minibatch PPO with Adam at `hyper.lr`.
///
/// On divergence the last finite parameters and optimizer state are
/// returned with `diverged` set.
pub fn ppo_update<R: Rng>(
    params: &PolicyParams,
    buffer: &RolloutBuffer,
    hyper: &PpoHyper,
    adam: &AdamState,
    rng: &mut R,
) -> Result<(PolicyParams, AdamState, UpdateReport)> {
    hyper.validate()?;
    let loss = PpoLoss::new(buffer, hyper)?;
    let mut p = params.clone();
    let mut state = adam.clone();
    let mut report = UpdateReport::default();
    let all: Vec<usize> = (0..buffer.len()).collect();
    let mut order = all.clone();
    for _ in 0..hyper.epochs {
        match ppo_stats(&p, &loss, &all) {
            Ok(s) => report.epochs.push(s),
            Err(Error::Diverged(_)) => {
                report.diverged = true;
                return Ok((p, state, report));
            }
            Err(e) => return Err(e),
        }
        order.shuffle(rng);
        for mb in order.chunks(hyper.minibatch) {
            let mut grad = match loss_and_grad(&p, &loss, mb) {
                Ok((_, g)) => g,
                Err(Error::Diverged(_)) => {
                    report.diverged = true;
                    return Ok((p, state, report));
                }
                Err(e) => return Err(e),
            };
            clip_grad_norm(&mut grad, hyper.max_grad_norm);
            let mut next = p.clone();
            let mut next_state = state.clone();
            adam_step(next.as_mut_slice(), &grad, &mut next_state, hyper.lr)?;
            if !next.is_finite() {
                report.diverged = true;
                return Ok((p, state, report));
            }
            p = next;
            state = next_state;
        }
    }
    Ok((p, state, report))
}
