//! Sampling back-end: bootstrap particle filter, fixed-lag smoother and
//! FFBSi with rejection sampling.
//!
//! Particles are stored flat, time-major: the state of particle `i` at time
//! `t` occupies `particles[(t*M + i)*d .. (t*M + i + 1)*d]`. All indices are
//! 0-based.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ObservationSequence, StateSpaceModel};
use crate::rng::SimRng;

/// Weighted particle approximations of the filtering distributions together
/// with the ancestry needed to trace paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    n: usize,
    m: usize,
    dim: usize,
    particles: Vec<f64>,
    weights: Vec<f64>,
    ancestors: Vec<usize>,
    pub loglik: f64,
}

impl ParticleSystem {
    /// Builds a system from raw parts. `ancestors[t*M + i]` is the index at
    /// time t−1 of the parent of particle i at time t; row 0 is ignored.
    pub fn from_parts(
        dim: usize,
        m: usize,
        particles: Vec<f64>,
        weights: Vec<f64>,
        mut ancestors: Vec<usize>,
        loglik: f64,
    ) -> Result<Self> {
        if dim == 0 || m == 0 || weights.is_empty() || weights.len() % m != 0 {
            return Err(Error::Dimension("particle system needs M ≥ 1 and whole weight rows".into()));
        }
        let n = weights.len() / m;
        if particles.len() != n * m * dim || ancestors.len() != n * m {
            return Err(Error::Dimension("particle, weight and ancestor arrays disagree".into()));
        }
        if ancestors.iter().any(|&a| a >= m) {
            return Err(Error::Dimension("ancestor index out of range".into()));
        }
        for (i, a) in ancestors[..m].iter_mut().enumerate() {
            *a = i;
        }
        for t in 0..n {
            let row = &weights[t * m..(t + 1) * m];
            let s: f64 = row.iter().sum();
            if row.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("weights at t={t} are not normalized")));
            }
        }
        Ok(Self {
            n,
            m,
            dim,
            particles,
            weights,
            ancestors,
            loglik,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_particles(&self) -> usize {
        self.m
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, t: usize, i: usize) -> &[f64] {
        let k = (t * self.m + i) * self.dim;
        &self.particles[k..k + self.dim]
    }

    /// All particles at time t, flat.
    pub fn particles_at(&self, t: usize) -> &[f64] {
        &self.particles[t * self.m * self.dim..(t + 1) * self.m * self.dim]
    }

    pub fn weights(&self, t: usize) -> &[f64] {
        &self.weights[t * self.m..(t + 1) * self.m]
    }

    pub fn ancestors(&self, t: usize) -> &[usize] {
        &self.ancestors[t * self.m..(t + 1) * self.m]
    }

    pub fn ancestor(&self, t: usize, i: usize) -> usize {
        self.ancestors[t * self.m + i]
    }

    /// Weighted mean of the filtering distribution at t.
    pub fn filtered_mean(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, w) in self.weights(t).iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.particle(t, i)) {
                *o += w * x;
            }
        }
        out
    }
}

/// Draws `out.len()` ancestor indices from Cat(weights) in O(M + len) by
/// merging sorted uniforms (normalized exponential spacings) with the
/// cumulative weights. The result is sorted.
pub fn multinomial_resample(weights: &[f64], rng: &mut SimRng, out: &mut [usize]) {
    let k = out.len();
    if k == 0 {
        return;
    }
    let total: f64 = weights.iter().sum();
    let mut spacings = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    for _ in 0..=k {
        let e: f64 = rng.sample(Exp1);
        acc += e;
        spacings.push(acc);
    }
    let scale = total / acc;
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1);
    let mut i = 0;
    let mut cum = weights[0];
    for (slot, s) in out.iter_mut().zip(&spacings) {
        let u = s * scale;
        while cum < u && i < last {
            i += 1;
            cum += weights[i];
        }
        *slot = i;
    }
}

/// Index of the first cumulative weight exceeding `u`.
fn search_cumsum(cumsum: &[f64], u: f64) -> usize {
    cumsum.partition_point(|&c| c <= u).min(cumsum.len() - 1)
}

/// Normalizes log-weights in place into probabilities and returns
/// log of their mean before normalization.
fn normalize_log_weights(w: &mut [f64], t: usize) -> Result<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || w.iter().any(|v| v.is_nan()) {
        return Err(Error::DegenerateWeights { t });
    }
    let mut sum = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    Ok(max + sum.ln() - (w.len() as f64).ln())
}

/// Bootstrap particle filter with multinomial resampling at every step.
pub fn bootstrap_pf(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    y: &ObservationSequence,
    m: usize,
    rng: &mut SimRng,
) -> Result<ParticleSystem> {
    if m < 2 {
        return Err(Error::Config(format!("particle filter needs at least 2 particles, got {m}")));
    }
    if y.is_empty() || y.dim() != model.obs_dim() || theta.len() != model.n_params() {
        return Err(Error::Dimension("observations or parameters do not match the model".into()));
    }
    let n = y.len();
    let d = model.state_dim();
    let mut particles = vec![0.0; n * m * d];
    let mut weights = vec![0.0; n * m];
    let mut ancestors = vec![0usize; n * m];
    let mut loglik = 0.0;
    for (i, a) in ancestors[..m].iter_mut().enumerate() {
        *a = i;
    }
    for t in 0..n {
        let (past, rest) = particles.split_at_mut(t * m * d);
        let current = &mut rest[..m * d];
        if t == 0 {
            for x in current.chunks_exact_mut(d) {
                model.sample_initial(rng, x);
            }
        } else {
            let (wprev, _) = weights.split_at(t * m);
            let anc = &mut ancestors[t * m..(t + 1) * m];
            multinomial_resample(&wprev[(t - 1) * m..], rng, anc);
            let prev = &past[(t - 1) * m * d..];
            for (x, &a) in current.chunks_exact_mut(d).zip(anc.iter()) {
                model.sample_transition(theta, &prev[a * d..(a + 1) * d], rng, x);
            }
        }
        let yt = y.get(t);
        let w = &mut weights[t * m..(t + 1) * m];
        for (wi, x) in w.iter_mut().zip(current.chunks_exact(d)) {
            *wi = model.observation_logdensity(theta, yt, x);
        }
        loglik += normalize_log_weights(w, t)?;
    }
    Ok(ParticleSystem {
        n,
        m,
        dim: d,
        particles,
        weights,
        ancestors,
        loglik,
    })
}

/// Which particle smoother feeds the score estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmootherKind {
    FixedLag,
    Ffbsi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmootherConfig {
    pub kind: SmootherKind,
    /// Fixed-lag Δ.
    pub lag: usize,
    /// Forward particle count M.
    pub particles: usize,
    /// Backward trajectory count M̄.
    pub backward: usize,
    /// Rejection sampling stops once at most this many trajectories remain.
    pub m_limit: usize,
    /// Bound on the transition density; the model's own bound when absent.
    pub rho: Option<f64>,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            kind: SmootherKind::FixedLag,
            lag: 12,
            particles: 2000,
            backward: 100,
            m_limit: 10,
            rho: None,
        }
    }
}

impl SmootherConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("smoother needs at least 2 forward particles".into()));
        }
        match self.kind {
            SmootherKind::FixedLag if self.lag == 0 || self.lag > n => {
                Err(Error::Config(format!("lag must satisfy 0 < lag ≤ {n}, got {}", self.lag)))
            }
            SmootherKind::Ffbsi if self.backward == 0 || self.m_limit > self.backward => Err(Error::Config(
                format!("need 1 ≤ backward and m_limit ≤ backward, got {} and {}", self.backward, self.m_limit),
            )),
            _ => match self.rho {
                Some(r) if !(r > 0.0 && r.is_finite()) => Err(Error::Config("rho must be positive".into())),
                _ => Ok(()),
            },
        }
    }
}

/// Time at which the two-step smoothing distribution of (x_t, x_{t+1}) is
/// approximated by filtering, 0-based: min(N−1, t+1+Δ).
pub fn fixed_lag_horizon(t: usize, lag: usize, n: usize) -> usize {
    (t + 1 + lag).min(n - 1)
}

/// Calls `visit(t, i_t, i_{t+1}, w)` for every weighted pair at every
/// t < N−1, where `i_t`, `i_{t+1}` index particles at t and t+1 on the
/// ancestral line of particle j at time κ_t and w = w_{κ_t}^{(j)}.
pub fn visit_fixed_lag_pairs(ps: &ParticleSystem, lag: usize, mut visit: impl FnMut(usize, usize, usize, f64)) {
    let n = ps.len();
    let m = ps.n_particles();
    let mut idx: Vec<usize> = vec![0; m];
    for t in 0..n.saturating_sub(1) {
        let kappa = fixed_lag_horizon(t, lag, n);
        idx.iter_mut().enumerate().for_each(|(j, v)| *v = j);
        for s in ((t + 2)..=kappa).rev() {
            let anc = ps.ancestors(s);
            idx.iter_mut().for_each(|v| *v = anc[*v]);
        }
        let anc = ps.ancestors(t + 1);
        for (j, &w) in ps.weights(kappa).iter().enumerate() {
            visit(t, anc[idx[j]], idx[j], w);
        }
    }
}

/// Fixed-lag estimates of E[x_t | y_{1:N}] for every t; the last time uses
/// the filter weights.
pub fn fixed_lag_means(ps: &ParticleSystem, lag: usize) -> Vec<Vec<f64>> {
    let n = ps.len();
    let d = ps.state_dim();
    let mut out = vec![vec![0.0; d]; n];
    visit_fixed_lag_pairs(ps, lag, |t, i, _, w| {
        for (o, x) in out[t].iter_mut().zip(ps.particle(t, i)) {
            *o += w * x;
        }
    });
    if n > 0 {
        out[n - 1] = ps.filtered_mean(n - 1);
    }
    out
}

/// Weighted two-step samples: for each t < N−1, M pairs of particle indices
/// (i_t, i_{t+1}) with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepSamples {
    pub m: usize,
    pub index_t: Vec<usize>,
    pub index_next: Vec<usize>,
    pub weights: Vec<f64>,
}

impl TwoStepSamples {
    pub fn n_pairs(&self) -> usize {
        self.index_t.len() / self.m.max(1)
    }

    pub fn at(&self, t: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let r = t * self.m..(t + 1) * self.m;
        self.index_t[r.clone()]
            .iter()
            .zip(&self.index_next[r.clone()])
            .zip(&self.weights[r])
            .map(|((&a, &b), &w)| (a, b, w))
    }
}

pub fn fixed_lag_pairs(ps: &ParticleSystem, lag: usize) -> Result<TwoStepSamples> {
    if lag == 0 || lag > ps.len() {
        return Err(Error::Config(format!("lag must satisfy 0 < lag ≤ {}, got {lag}", ps.len())));
    }
    let cap = ps.len().saturating_sub(1) * ps.n_particles();
    let mut out = TwoStepSamples {
        m: ps.n_particles(),
        index_t: Vec::with_capacity(cap),
        index_next: Vec::with_capacity(cap),
        weights: Vec::with_capacity(cap),
    };
    visit_fixed_lag_pairs(ps, lag, |_, a, b, w| {
        out.index_t.push(a);
        out.index_next.push(b);
        out.weights.push(w);
    });
    Ok(out)
}

/// Pairs read off the ancestral paths of the final particles, weighted by
/// w_N. Suffers from path degeneracy for large N.
pub fn two_step_from_paths(ps: &ParticleSystem) -> TwoStepSamples {
    fixed_lag_pairs(ps, ps.len()).expect("full lag is always valid")
}

/// Backward-simulated trajectories, stored as indices into the forward
/// particles plus the corresponding states.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTrajectories {
    n: usize,
    count: usize,
    dim: usize,
    /// `indices[t*count + j]`
    indices: Vec<usize>,
    states: Vec<f64>,
    /// Proposals tried during rejection sampling.
    pub proposals: usize,
    /// Trajectory steps that fell back to exact sampling.
    pub fallbacks: usize,
}

impl BackwardTrajectories {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn index(&self, t: usize, j: usize) -> usize {
        self.indices[t * self.count + j]
    }

    pub fn state(&self, t: usize, j: usize) -> &[f64] {
        let k = (t * self.count + j) * self.dim;
        &self.states[k..k + self.dim]
    }

    /// Trajectories `range` only, for splitting estimates.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let c = range.len();
        let mut indices = Vec::with_capacity(self.n * c);
        let mut states = Vec::with_capacity(self.n * c * self.dim);
        for t in 0..self.n {
            for j in range.clone() {
                indices.push(self.index(t, j));
                states.extend_from_slice(self.state(t, j));
            }
        }
        Self {
            n: self.n,
            count: c,
            dim: self.dim,
            indices,
            states,
            proposals: 0,
            fallbacks: 0,
        }
    }

    pub fn mean(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for j in 0..self.count {
            for (o, x) in out.iter_mut().zip(self.state(t, j)) {
                *o += x / self.count as f64;
            }
        }
        out
    }
}

/// Forward filtering backward simulation. Each backward step first
/// rejection-samples from the backward kernel, proposing from the filter
/// weights and accepting with probability f(x_{t+1} | x_t^i)/ρ, in rounds
/// until at most `m_limit` trajectories are pending or M rounds have passed.
/// The remaining trajectories are drawn exactly from the normalized backward
/// weights w_t^i f(x_{t+1} | x_t^i).
pub fn ffbsi(
    model: &dyn StateSpaceModel,
    theta: &[f64],
    ps: &ParticleSystem,
    mbar: usize,
    m_limit: usize,
    rho: f64,
    rng: &mut SimRng,
) -> Result<BackwardTrajectories> {
    if mbar == 0 {
        return Err(Error::Config("need at least one backward trajectory".into()));
    }
    if !(rho > 0.0) {
        return Err(Error::Config("rho must be positive".into()));
    }
    let n = ps.len();
    let m = ps.n_particles();
    let d = ps.state_dim();
    let mut indices = vec![0usize; n * mbar];
    multinomial_resample(ps.weights(n - 1), rng, &mut indices[(n - 1) * mbar..]);

    let bound = rho * (1.0 + 1e-12);
    let mut cumsum = vec![0.0; m];
    let mut backward_w = vec![0.0; m];
    let mut pending: Vec<usize> = Vec::with_capacity(mbar);
    let mut proposals = 0;
    let mut fallbacks = 0;
    for t in (0..n - 1).rev() {
        let w = ps.weights(t);
        let mut c = 0.0;
        for (cs, wi) in cumsum.iter_mut().zip(w) {
            c += wi;
            *cs = c;
        }
        let (head, tail) = indices.split_at_mut((t + 1) * mbar);
        let next = &tail[..mbar];
        let cur = &mut head[t * mbar..];
        pending.clear();
        pending.extend(0..mbar);
        let mut rounds = 0;
        while pending.len() > m_limit && rounds < m {
            rounds += 1;
            let mut k = 0;
            while k < pending.len() {
                let j = pending[k];
                let i = search_cumsum(&cumsum, rng.random::<f64>() * c);
                let dens = model
                    .transition_logdensity(theta, ps.particle(t + 1, next[j]), ps.particle(t, i))
                    .exp();
                proposals += 1;
                if dens > bound {
                    return Err(Error::InvalidBound { t, rho, density: dens });
                }
                if rng.random::<f64>() * rho <= dens {
                    cur[j] = i;
                    pending.swap_remove(k);
                } else {
                    k += 1;
                }
            }
        }
        pending.sort_unstable();
        for &j in &pending {
            fallbacks += 1;
            let x_next = ps.particle(t + 1, next[j]);
            let mut total = 0.0;
            for (i, (bw, wi)) in backward_w.iter_mut().zip(w).enumerate() {
                let dens = if *wi > 0.0 {
                    model.transition_logdensity(theta, x_next, ps.particle(t, i)).exp()
                } else {
                    0.0
                };
                if dens > bound {
                    return Err(Error::InvalidBound { t, rho, density: dens });
                }
                total += wi * dens;
                *bw = total;
            }
            if !(total > 0.0) {
                return Err(Error::DegenerateWeights { t });
            }
            cur[j] = search_cumsum(&backward_w, rng.random::<f64>() * total);
        }
    }

    let mut states = Vec::with_capacity(n * mbar * d);
    for t in 0..n {
        for j in 0..mbar {
            states.extend_from_slice(ps.particle(t, indices[t * mbar + j]));
        }
    }
    Ok(BackwardTrajectories {
        n,
        count: mbar,
        dim: d,
        indices,
        states,
        proposals,
        fallbacks,
    })
}
