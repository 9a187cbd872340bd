//! Trajectory planners over the latent world model: imagination-style
//! random/policy-centered shooting for discrete actions and CEM-based MPC
//! for continuous actions. Both produce a per-candidate, per-step score
//! grid and pick the argmax trajectory's first action.

use crate::diffmath::{Array, DiffError, Graph, Var};
use crate::envs::{Action, Observation};
use crate::worldmodel::WorldModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("candidate buffer B·K·d_z = {b}·{k}·{d_z} exceeds memory cap {cap}")]
    MemoryCap {
        b: usize,
        k: usize,
        d_z: usize,
        cap: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Imagination,
    Mpc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    UniformRandom,
    PolicyCentered,
}

/// Functional form of the per-step score J_{b,k}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Partial discounted return plus a discounted value bootstrap at k.
    ReturnBootstrap,
    /// Running sum of per-step r + αV.
    StepValue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub kind: PlannerKind,
    pub candidates: usize,
    pub horizon: usize,
    pub cem_iterations: usize,
    pub elite_count: usize,
    pub sampler: Sampler,
    pub score_mode: ScoreMode,
    pub memory_cap: usize,
    /// Initial std for CEM / policy-centered continuous noise.
    pub noise_std: f64,
}

impl PlannerConfig {
    pub fn imagination_defaults() -> Self {
        PlannerConfig {
            kind: PlannerKind::Imagination,
            candidates: 64,
            horizon: 15,
            cem_iterations: 1,
            elite_count: 8,
            sampler: Sampler::UniformRandom,
            score_mode: ScoreMode::ReturnBootstrap,
            memory_cap: 50_000_000,
            noise_std: 1.0,
        }
    }

    pub fn mpc_defaults() -> Self {
        PlannerConfig {
            kind: PlannerKind::Mpc,
            candidates: 64,
            horizon: 8,
            cem_iterations: 4,
            elite_count: 8,
            sampler: Sampler::UniformRandom,
            score_mode: ScoreMode::ReturnBootstrap,
            memory_cap: 50_000_000,
            noise_std: 1.0,
        }
    }
}

/// B×K matrix of per-trajectory, per-step planner scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub scores: Array,
}

impl ScoreGrid {
    pub fn b(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.scores.shape()[1]
    }

    /// Final-step scores J_{·,K}.
    pub fn final_scores(&self) -> Vec<f64> {
        let k = self.k();
        (0..self.b()).map(|b| self.scores.at2(b, k - 1)).collect()
    }

    /// Argmax over J_{·,K} with lowest-index tie break.
    pub fn best_index(&self) -> usize {
        let scores = self.final_scores();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub first_action: Action,
    pub best_trajectory: usize,
    pub grid: ScoreGrid,
    /// (K+1) entries of B×d_z latents, index 0 is the broadcast start state.
    pub latents: Vec<Array>,
    /// K entries of B×action_dim action batches.
    pub actions: Vec<Array>,
    pub variance_floored: bool,
}

impl PlanResult {
    /// Hash of the candidate action tensors, for pairing assertions.
    pub fn actions_hash(&self) -> u64 {
        actions_hash(&self.actions)
    }
}

pub fn actions_hash(actions: &[Array]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for a in actions {
        a.shape().hash(&mut h);
        for v in a.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn check_cap(model: &WorldModel, cfg: &PlannerConfig) -> Result<(), PlanError> {
    let need = cfg.candidates * cfg.horizon * model.hyper.d_z;
    if need > cfg.memory_cap {
        return Err(PlanError::MemoryCap {
            b: cfg.candidates,
            k: cfg.horizon,
            d_z: model.hyper.d_z,
            cap: cfg.memory_cap,
        });
    }
    Ok(())
}

fn broadcast_z0(z0: &Array, b: usize) -> Array {
    // ones(B×1) · z0(1×d) keeps the plain path bit-identical to the graph
    // path, which broadcasts the same way
    let ones = Array::full(vec![b, 1], 1.0);
    ones.matmul(z0).unwrap()
}

fn discount_powers(gamma: f64, k: usize) -> Vec<f64> {
    let mut pows = Vec::with_capacity(k + 1);
    let mut gp = 1.0;
    for _ in 0..=k {
        pows.push(gp);
        gp *= gamma;
    }
    pows
}

fn score_column(
    running: &Array,
    r: &Array,
    v: &Array,
    gamma_pow: f64,
    alpha: f64,
    mode: ScoreMode,
) -> (Array, Array) {
    match mode {
        ScoreMode::ReturnBootstrap => {
            let new_running = running.add(&r.scale(gamma_pow)).unwrap();
            let j = new_running.add(&v.scale(alpha).scale(gamma_pow)).unwrap();
            (j, new_running)
        }
        ScoreMode::StepValue => {
            let step = r.add(&v.scale(alpha)).unwrap().scale(gamma_pow);
            let new_running = running.add(&step).unwrap();
            (new_running.clone(), new_running)
        }
    }
}

/// Roll fixed candidate actions forward and score them (no gradients).
/// Returns the B×K grid and the (K+1) latent batches.
pub fn score_with_actions_mode(
    model: &WorldModel,
    z0: &Array,
    actions: &[Array],
    mode: ScoreMode,
) -> Result<(ScoreGrid, Vec<Array>), PlanError> {
    let b = actions[0].shape()[0];
    let k = actions.len();
    let hp = &model.hyper;
    let pows = discount_powers(hp.gamma, k);
    let mut latents = Vec::with_capacity(k + 1);
    latents.push(broadcast_z0(z0, b));
    let mut running = Array::zeros(vec![b, 1]);
    let mut grid = Array::zeros(vec![b, k]);
    for step in 1..=k {
        let z = model.dynamics_step(&latents[step - 1], &actions[step - 1])?;
        let r = model.predict_reward(&z)?;
        let v = model.predict_value(&z)?;
        let (jcol, new_running) = score_column(&running, &r, &v, pows[step], hp.alpha, mode);
        running = new_running;
        for bi in 0..b {
            grid.set2(bi, step - 1, jcol.at2(bi, 0));
        }
        latents.push(z);
    }
    Ok((ScoreGrid { scores: grid }, latents))
}

/// Graph-path scoring: builds the same rollout inside `g` so the grid is
/// differentiable w.r.t. whatever feeds `z0`. Returns K column vars (B×1),
/// computed with the same operation order as the plain path.
pub fn score_columns_graph(
    g: &mut Graph,
    model: &WorldModel,
    vars: &crate::worldmodel::WorldModelVars,
    z0: Var,
    actions: &[Array],
    mode: ScoreMode,
) -> Result<Vec<Var>, PlanError> {
    let b = actions[0].shape()[0];
    let k = actions.len();
    let hp = &model.hyper;
    let pows = discount_powers(hp.gamma, k);
    let dynv = &vars.dynamics;
    let rewv = &vars.reward;
    let valv = &vars.value;
    let ones = g.constant(Array::full(vec![b, 1], 1.0))?;
    let mut z = g.matmul(ones, z0)?;
    let mut running = g.constant(Array::zeros(vec![b, 1]))?;
    let mut cols = Vec::with_capacity(k);
    for step in 1..=k {
        let av = g.constant(actions[step - 1].clone())?;
        let za = g.concat_cols(z, av)?;
        z = dynv.forward(g, za)?;
        let r = rewv.forward(g, z)?;
        let v = valv.forward(g, z)?;
        let col = match mode {
            ScoreMode::ReturnBootstrap => {
                let rs = g.scale(r, pows[step])?;
                running = g.add(running, rs)?;
                let va = g.scale(v, hp.alpha)?;
                let vg = g.scale(va, pows[step])?;
                g.add(running, vg)?
            }
            ScoreMode::StepValue => {
                let va = g.scale(v, hp.alpha)?;
                let rv = g.add(r, va)?;
                let stepv = g.scale(rv, pows[step])?;
                running = g.add(running, stepv)?;
                running
            }
        };
        cols.push(col);
    }
    Ok(cols)
}

fn sample_uniform_discrete(
    b: usize,
    k: usize,
    action_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Array> {
    (0..k)
        .map(|_| {
            let mut data = vec![0.0; b * action_dim];
            for bi in 0..b {
                let a = rng.gen_range(0..action_dim);
                data[bi * action_dim + a] = 1.0;
            }
            Array::from_vec(vec![b, action_dim], data).unwrap()
        })
        .collect()
}

fn sample_uniform_continuous(b: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Array> {
    (0..k)
        .map(|_| {
            let data = (0..b).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            Array::from_vec(vec![b, 1], data).unwrap()
        })
        .collect()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sample candidate action sequences for a start latent. Policy-centered
/// sampling walks the imagined latents and draws from the distilled policy
/// head at each step; it falls back to uniform when no head is present.
pub fn sample_candidates(
    model: &WorldModel,
    z0: &Array,
    cfg: &PlannerConfig,
    noise_seed: u64,
) -> Result<Vec<Array>, PlanError> {
    let b = cfg.candidates;
    let k = cfg.horizon;
    let hp = &model.hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let policy = match (cfg.sampler, &model.policy) {
        (Sampler::PolicyCentered, Some(p)) => Some(p),
        _ => None,
    };
    let Some(policy) = policy else {
        return Ok(if hp.discrete {
            sample_uniform_discrete(b, k, hp.action_dim, &mut rng)
        } else {
            sample_uniform_continuous(b, k, &mut rng)
        });
    };

    let mut z = broadcast_z0(z0, b);
    let mut actions = Vec::with_capacity(k);
    for _ in 0..k {
        let out = policy.forward(&z)?;
        let mut data = vec![0.0; b * hp.action_dim];
        if hp.discrete {
            for bi in 0..b {
                // Gumbel-max draw from the categorical logits
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for a in 0..hp.action_dim {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let gumbel = -(-u.ln()).ln();
                    let v = out.at2(bi, a) + gumbel;
                    if v > best_v {
                        best_v = v;
                        best = a;
                    }
                }
                data[bi * hp.action_dim + best] = 1.0;
            }
        } else {
            for bi in 0..b {
                let mean = out.at2(bi, 0).tanh();
                let a = (mean + cfg.noise_std * standard_normal(&mut rng)).clamp(-1.0, 1.0);
                data[bi] = a;
            }
        }
        let a = Array::from_vec(vec![b, hp.action_dim], data).unwrap();
        z = model.dynamics_step(&z, &a)?;
        actions.push(a);
    }
    Ok(actions)
}

fn first_action_of(model: &WorldModel, actions: &[Array], b_star: usize) -> Action {
    let a0 = &actions[0];
    if model.hyper.discrete {
        let dim = model.hyper.action_dim;
        let mut best = 0;
        for i in 0..dim {
            if a0.at2(b_star, i) > a0.at2(b_star, best) {
                best = i;
            }
        }
        Action::Discrete(best)
    } else {
        Action::Continuous(a0.at2(b_star, 0))
    }
}

/// Imagination-style shooting: sample B candidate sequences, roll them out,
/// score, and pick the argmax trajectory.
pub fn rollout_candidates(
    model: &WorldModel,
    z0: &Array,
    cfg: &PlannerConfig,
    noise_seed: u64,
) -> Result<PlanResult, PlanError> {
    check_cap(model, cfg)?;
    let actions = sample_candidates(model, z0, cfg, noise_seed)?;
    let (grid, latents) = score_with_actions_mode(model, z0, &actions, cfg.score_mode)?;
    let b_star = grid.best_index();
    Ok(PlanResult {
        first_action: first_action_of(model, &actions, b_star),
        best_trajectory: b_star,
        grid,
        latents,
        actions,
        variance_floored: false,
    })
}

/// Cross-entropy-method MPC for continuous actions: iteratively refit a
/// diagonal Gaussian over action sequences to the elites ranked by J_{·,K}.
pub fn cem_plan(
    model: &WorldModel,
    z0: &Array,
    cfg: &PlannerConfig,
    noise_seed: u64,
) -> Result<PlanResult, PlanError> {
    check_cap(model, cfg)?;
    let b = cfg.candidates;
    let k = cfg.horizon;
    let elites = cfg.elite_count.min(b);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut mean = vec![0.0; k];
    let mut std = vec![cfg.noise_std; k];
    let mut floored = false;
    let mut last: Option<(Vec<Array>, ScoreGrid, Vec<Array>)> = None;

    for _ in 0..cfg.cem_iterations.max(1) {
        let mut actions = Vec::with_capacity(k);
        for step in 0..k {
            let data: Vec<f64> = (0..b)
                .map(|_| (mean[step] + std[step] * standard_normal(&mut rng)).clamp(-1.0, 1.0))
                .collect();
            actions.push(Array::from_vec(vec![b, 1], data).unwrap());
        }
        let (grid, latents) = score_with_actions_mode(model, z0, &actions, cfg.score_mode)?;
        let finals = grid.final_scores();
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|x, y| finals[*y].partial_cmp(&finals[*x]).unwrap().then(x.cmp(y)));
        let elite_idx = &order[..elites];
        for step in 0..k {
            let vals: Vec<f64> = elite_idx.iter().map(|i| actions[step].at2(*i, 0)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            mean[step] = m;
            let s = var.sqrt();
            if s < 1e-3 {
                floored = true;
                std[step] = 1e-3;
            } else {
                std[step] = s;
            }
        }
        last = Some((actions, grid, latents));
    }
    let (actions, grid, latents) = last.unwrap();
    let b_star = grid.best_index();
    Ok(PlanResult {
        first_action: first_action_of(model, &actions, b_star),
        best_trajectory: b_star,
        grid,
        latents,
        actions,
        variance_floored: floored,
    })
}

/// Encode an observation, plan with the configured paradigm, and return the
/// argmax trajectory's first action (plus the full planning record).
pub fn act(
    model: &WorldModel,
    cfg: &PlannerConfig,
    obs: &Observation,
    noise_seed: u64,
) -> Result<PlanResult, PlanError> {
    let z0 = model.encode(obs)?;
    match cfg.kind {
        PlannerKind::Imagination => rollout_candidates(model, &z0, cfg, noise_seed),
        PlannerKind::Mpc => cem_plan(model, &z0, cfg, noise_seed),
    }
}
