use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Pndm,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "pndm" => Ok(SamplerKind::Pndm),
            other => Err(Error::Config(format!("unknown sampler `{other}` (expected ddpm or pndm)"))),
        }
    }
}

/// Decreasing timesteps `steps·k, (steps−1)·k, …, k` with `k = ⌊T/steps⌋`.
/// The caller steps from each entry to the next and from the last to 0.
pub fn step_indices(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!("{steps} sampling steps do not fit T = {t_max}")));
    }
    let k = t_max / steps;
    Ok((1..=steps).rev().map(|i| i * k).collect())
}

/// `(t, t_next)` pairs for a strided run, ending at 0.
pub fn transitions(t_max: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    let ts = step_indices(t_max, steps)?;
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
        .collect())
}

/// Ancestral DDPM transition from `t` to `t_next < t` with `σ² = β_eff`,
/// where `α_eff = ᾱ_t/ᾱ_{t_next}`. For `t_next = t − 1` this is the
/// single-step update with `α_t`, `β_t`.
pub fn ddpm_transition<T: Real>(
    sched: &NoiseSchedule,
    x_t: &[T],
    eps_hat: &[T],
    t: usize,
    t_next: usize,
    z: &[T],
) -> Result<Vec<T>> {
    if t == 0 || t > sched.t_max() || t_next >= t {
        return Err(Error::Timestep {
            t,
            lo: t_next + 1,
            hi: sched.t_max(),
        });
    }
    if x_t.len() != eps_hat.len() || x_t.len() != z.len() {
        return Err(Error::dim("ddpm_step", &[x_t.len()], &[eps_hat.len(), z.len()]));
    }
    if t_next == 0 && z.iter().any(|&v| v != T::zero()) {
        return Err(Error::State("the final DDPM step must use z = 0".into()));
    }
    let ab_t = sched.alpha_bar(t);
    let alpha = if t_next + 1 == t {
        sched.alpha(t)
    } else {
        ab_t / sched.alpha_bar(t_next)
    };
    let beta = 1.0 - alpha;
    let inv_sqrt_alpha = T::lit(1.0 / alpha.sqrt());
    let coef = T::lit(beta / (1.0 - ab_t).sqrt());
    let sigma = T::lit(beta.sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &zz)| inv_sqrt_alpha * (x - coef * e) + sigma * zz)
        .collect())
}

/// Single-step DDPM update `x_t → x_{t−1}`.
pub fn ddpm_step<T: Real>(sched: &NoiseSchedule, x_t: &[T], eps_hat: &[T], t: usize, z: &[T]) -> Result<Vec<T>> {
    ddpm_transition(sched, x_t, eps_hat, t, t.saturating_sub(1), z)
}

/// Pseudo-numerical transfer `φ(x_t, ε, t, t_next)`.
pub fn pndm_transfer<T: Real>(sched: &NoiseSchedule, x: &[T], eps: &[T], t: usize, t_next: usize) -> Vec<T> {
    let a_t = sched.alpha_bar(t);
    let a_n = sched.alpha_bar(t_next);
    let x_coef = T::lit((a_n / a_t).sqrt());
    let denom = a_t.sqrt() * (((1.0 - a_n) * a_t).sqrt() + ((1.0 - a_t) * a_n).sqrt());
    let e_coef = T::lit((a_n - a_t) / denom);
    x.iter().zip(eps).map(|(&xv, &ev)| x_coef * xv - e_coef * ev).collect()
}

/// Multistep combination `(55ε₀ − 59ε₁ + 37ε₂ − 9ε₃)/24`, newest first.
pub fn plms_combine<T: Real>(history: [&[T]; 4]) -> Vec<T> {
    let c = [55.0, -59.0, 37.0, -9.0].map(|v| T::lit(v / 24.0));
    (0..history[0].len())
        .map(|i| c[0] * history[0][i] + c[1] * history[1][i] + c[2] * history[2][i] + c[3] * history[3][i])
        .collect()
}

/// PNDM state: the last raw noise predictions (newest first) and the
/// timestep of the previous transition.
#[derive(Debug, Clone, Default)]
pub struct PndmState<T> {
    history: VecDeque<Vec<T>>,
    last_t: Option<usize>,
}

pub const PNDM_WARMUP: usize = 3;

impl<T: Real> PndmState<T> {
    pub fn new() -> Self {
        PndmState {
            history: VecDeque::with_capacity(4),
            last_t: None,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// One transition `t → t_next`.
    ///
    /// `eps_hat` is the model's prediction at `(x_t, t)`. During the first
    /// three transitions `eval(x, t)` supplies the three extra predictions of
    /// the pseudo-Runge-Kutta step; afterwards the stored history drives the
    /// linear multistep rule and `eval` is not called.
    pub fn step(
        &mut self,
        sched: &NoiseSchedule,
        x_t: &[T],
        eps_hat: Vec<T>,
        t: usize,
        t_next: usize,
        eval: &mut dyn FnMut(&[T], usize) -> Result<Vec<T>>,
    ) -> Result<Vec<T>> {
        if t_next >= t || t > sched.t_max() || self.last_t.is_some_and(|p| t >= p) {
            return Err(Error::State(format!(
                "PNDM timesteps must strictly decrease (previous {:?}, now {t} → {t_next})",
                self.last_t
            )));
        }
        if eps_hat.len() != x_t.len() {
            return Err(Error::dim("pndm_step", &[x_t.len()], &[eps_hat.len()]));
        }
        self.last_t = Some(t);
        if self.history.len() < PNDM_WARMUP {
            let mid = t - (t - t_next) / 2;
            let x1 = pndm_transfer(sched, x_t, &eps_hat, t, mid);
            let e2 = eval(&x1, mid)?;
            let x2 = pndm_transfer(sched, x_t, &e2, t, mid);
            let e3 = eval(&x2, mid)?;
            let x3 = pndm_transfer(sched, x_t, &e3, t, t_next);
            // The network has no t = 0 input; the last warmup probe uses t = 1.
            let e4 = eval(&x3, t_next.max(1))?;
            let sixth = T::lit(1.0 / 6.0);
            let two = T::lit(2.0);
            let e_prime: Vec<T> = (0..x_t.len())
                .map(|i| (eps_hat[i] + two * e2[i] + two * e3[i] + e4[i]) * sixth)
                .collect();
            self.history.push_front(eps_hat);
            return Ok(pndm_transfer(sched, x_t, &e_prime, t, t_next));
        }
        self.history.push_front(eps_hat);
        self.history.truncate(4);
        let h = &self.history;
        let e_prime = plms_combine([&h[0], &h[1], &h[2], &h[3]]);
        Ok(pndm_transfer(sched, x_t, &e_prime, t, t_next))
    }
}
