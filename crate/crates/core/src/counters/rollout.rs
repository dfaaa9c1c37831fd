//! IRLC counting episodes.
//!
//! An episode repeatedly picks either a not-yet-counted object or the
//! terminal action from `[κᵗ, ζ]`; picking object `a` adds row `a` of the
//! interaction matrix to the logits. Greedy rollouts take the argmax, sampled
//! rollouts draw from the masked softmax. Selection stops at the terminal
//! action or once `cap` objects are counted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{log_softmax, softmax, Tensor};

/// Answers are bounded by this count.
pub const MAX_COUNT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Object(usize),
    Terminal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// `κᵗ` before each decision (full length `N`; selected entries are stale).
    pub kappa_trajectory: Vec<Vec<f64>>,
    pub zeta: f64,
    pub actions: Vec<Action>,
    /// `pᵗ` over `N + 1` actions, zero on masked objects, terminal last.
    pub step_distributions: Vec<Vec<f64>>,
    /// `log pᵗ(aᵗ)` per step.
    pub log_probs: Vec<f64>,
    pub count: usize,
    pub selected: Vec<usize>,
    /// Selection cap in force; once reached only the terminal action is offered.
    pub cap: usize,
}

impl Episode {
    /// Decision steps, `count + 1`.
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    /// Binary per-object weights (1 for counted objects).
    pub fn weights(&self, n: usize) -> Vec<f64> {
        let mut w = vec![0.0; n];
        for &i in &self.selected {
            w[i] = 1.0;
        }
        w
    }

    pub fn log_prob_sum(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Default selection cap: `min(N, 20)`.
pub fn default_cap(n: usize) -> usize {
    n.min(MAX_COUNT)
}

fn check_inputs(kappa0: &[f64], rho: &Tensor) -> Result<()> {
    let n = kappa0.len();
    if rho.len() != n * n || (n > 0 && rho.shape() != [n, n]) {
        return Err(shape_err("rollout", format!("κ has {n} entries but ρ is {:?}", rho.shape())));
    }
    Ok(())
}

fn rollout(
    kappa0: &[f64],
    zeta: f64,
    rho: &Tensor,
    cap: usize,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Episode> {
    check_inputs(kappa0, rho)?;
    let n = kappa0.len();
    let cap = cap.min(n);
    let mut kappa = kappa0.to_vec();
    let mut available = vec![true; n];
    let mut ep = Episode {
        kappa_trajectory: Vec::new(),
        zeta,
        actions: Vec::new(),
        step_distributions: Vec::new(),
        log_probs: Vec::new(),
        count: 0,
        selected: Vec::new(),
        cap,
    };
    loop {
        ep.kappa_trajectory.push(kappa.clone());
        let open: Vec<usize> = if ep.count < cap {
            (0..n).filter(|&i| available[i]).collect()
        } else {
            Vec::new()
        };
        let mut logits: Vec<f64> = open.iter().map(|&i| kappa[i]).collect();
        logits.push(zeta);
        let p = softmax(&logits);
        let lp = log_softmax(&logits);
        let k = choose(&p);
        let mut full = vec![0.0; n + 1];
        for (slot, &i) in open.iter().enumerate() {
            full[i] = p[slot];
        }
        full[n] = p[open.len()];
        ep.step_distributions.push(full);
        ep.log_probs.push(lp[k]);
        if k == open.len() {
            ep.actions.push(Action::Terminal);
            break;
        }
        let a = open[k];
        ep.actions.push(Action::Object(a));
        ep.selected.push(a);
        ep.count += 1;
        available[a] = false;
        for (kj, r) in kappa.iter_mut().zip(rho.row(a)) {
            *kj += r;
        }
    }
    Ok(ep)
}

/// Deterministic rollout taking the highest-valued available action
/// (ties toward the lower index; the terminal action sits last).
pub fn greedy_rollout(kappa0: &[f64], zeta: f64, rho: &Tensor, cap: usize) -> Result<Episode> {
    rollout(kappa0, zeta, rho, cap, |p| {
        crate::tensor::argmax(p).expect("terminal action is always available")
    })
}

/// Rollout drawing each action from the masked softmax.
pub fn sample_rollout<R: Rng + ?Sized>(
    kappa0: &[f64],
    zeta: f64,
    rho: &Tensor,
    cap: usize,
    rng: &mut R,
) -> Result<Episode> {
    rollout(kappa0, zeta, rho, cap, |p| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        // Rounding can leave `acc` just below 1; fall back to the last positive entry.
        p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
    })
}

/// Count error `|C − C_gt|`.
pub fn count_error(count: usize, gt: u32) -> f64 {
    (count as f64 - gt as f64).abs()
}

/// Self-critical reward `R = E_greedy − E_sampled`.
pub fn reward(sampled: &Episode, greedy: &Episode, gt: u32) -> f64 {
    count_error(greedy.count, gt) - count_error(sampled.count, gt)
}

/// `−R Σₜ log pᵗ(aᵗ)` evaluated from the recorded log-probabilities.
pub fn selfcritical_loss_value(sampled: &Episode, greedy: &Episode, gt: u32) -> f64 {
    -reward(sampled, greedy, gt) * sampled.log_prob_sum()
}

/// `−Σₜ H(pᵗ)` over the available actions of each step.
pub fn entropy_penalty_value(ep: &Episode) -> f64 {
    ep.step_distributions
        .iter()
        .map(|p| p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
        .sum()
}

/// Sum over counted objects of the mean Huber magnitude of their ρ row.
pub fn interaction_penalty_value(ep: &Episode, rho: &Tensor) -> f64 {
    let n = rho.cols().max(1) as f64;
    ep.selected
        .iter()
        .map(|&a| {
            rho.row(a)
                .iter()
                .map(|&r| crate::nn::huber(r.abs()).expect("magnitude is non-negative"))
                .sum::<f64>()
                / n
        })
        .sum()
}

/// Differentiable quantities of one episode, replayed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeTerms {
    /// `Σₜ log pᵗ(aᵗ)`.
    pub log_prob_sum: Var,
    /// `P_H = −Σₜ H(pᵗ)`.
    pub entropy_penalty: Var,
    /// `P_I`.
    pub interaction_penalty: Var,
}

/// Rebuilds an episode's action probabilities from differentiable `κ⁰` `[N]`,
/// `ζ` `[1]` and `ρ` `[N × N]`.
pub fn episode_terms(g: &mut Graph, kappa0: Var, zeta: Var, rho: Var, ep: &Episode) -> Result<EpisodeTerms> {
    let n = g.value(kappa0).len();
    if g.value(rho).len() != n * n {
        return Err(shape_err("episode_terms", format!("κ has {n} entries but ρ is {:?}", g.value(rho).shape())));
    }
    let mut kappa = kappa0;
    let mut available = vec![true; n];
    let mut log_terms = Vec::with_capacity(ep.actions.len());
    let mut entropy_terms = Vec::with_capacity(ep.actions.len());
    let mut rows = Vec::with_capacity(ep.selected.len());
    for (t, action) in ep.actions.iter().enumerate() {
        let offered: Vec<usize> = if t < ep.cap {
            (0..n).filter(|&i| available[i]).collect()
        } else {
            Vec::new()
        };
        let picked = g.gather(kappa, &offered)?;
        let logits = g.concat(&[picked, zeta]);
        let lp = g.log_softmax(logits)?;
        let slot = match action {
            Action::Terminal => offered.len(),
            Action::Object(a) => offered.iter().position(|i| i == a).ok_or_else(|| {
                shape_err("episode_terms", format!("action {a} not available at step {t}"))
            })?,
        };
        let chosen = g.gather(lp, &[slot])?;
        log_terms.push(chosen);
        let p = g.exp(lp);
        let plogp = g.mul(p, lp)?;
        entropy_terms.push(g.sum(plogp));
        if let Action::Object(a) = *action {
            available[a] = false;
            let r = g.row(rho, a)?;
            kappa = g.add(kappa, r)?;
            rows.push(r);
        }
    }
    let lps = g.concat(&log_terms);
    let log_prob_sum = g.sum(lps);
    let ents = g.concat(&entropy_terms);
    let entropy_penalty = g.sum(ents);
    let interaction_penalty = if rows.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut per_row = Vec::with_capacity(rows.len());
        for r in rows {
            let h = g.huber_abs(r);
            per_row.push(g.mean(h));
        }
        let all = g.concat(&per_row);
        g.sum(all)
    };
    Ok(EpisodeTerms {
        log_prob_sum,
        entropy_penalty,
        interaction_penalty,
    })
}
