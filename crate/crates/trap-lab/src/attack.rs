//! The trigger-conditioned ranking attack: patch application through a
//! tanh reparameterization, trigger-induced score deviations, the tail
//! mask and tail attack score, softmin-family aggregation, dual gating
//! losses, image-space regularizers, and the gradient loop over a proxy
//! dataset.

use crate::diffmath::{Array, DiffError, Graph, Var};
use crate::envs::{Observation, IMG_H, IMG_W};
use crate::planner::{
    sample_candidates, score_columns_graph, score_with_actions_mode, PlanError, PlannerConfig,
    ScoreGrid, ScoreMode,
};
use crate::worldmodel::{Adam, WorldModel, WorldModelVars};
use crate::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("patch rectangle anchor {anchor:?} size {size:?} exceeds {h}x{w} image")]
    PatchOutsideImage {
        anchor: (usize, usize),
        size: (usize, usize),
        h: usize,
        w: usize,
    },
    #[error("empty proxy dataset")]
    EmptyProxy,
    #[error("patch file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad patch file: {0}")]
    BadPatchFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    Replace,
    Add,
}

/// Trigger definition: mask rectangle, budget, and unconstrained patch
/// parameters. The realized perturbation is δ = ε·tanh(ρ), so ‖δ‖∞ ≤ ε
/// for every ρ.
#[derive(Debug, Clone)]
pub struct PatchSpec {
    pub anchor: (usize, usize),
    pub size: (usize, usize),
    pub epsilon: f64,
    pub rho: Array,
    pub mode: PatchMode,
}

impl PatchSpec {
    pub fn new(
        anchor: (usize, usize),
        size: (usize, usize),
        epsilon: f64,
        mode: PatchMode,
    ) -> Result<Self, AttackError> {
        if anchor.0 + size.0 > IMG_H || anchor.1 + size.1 > IMG_W {
            return Err(AttackError::PatchOutsideImage {
                anchor,
                size,
                h: IMG_H,
                w: IMG_W,
            });
        }
        Ok(PatchSpec {
            anchor,
            size,
            epsilon,
            rho: Array::zeros(vec![size.0, size.1, 3]),
            mode,
        })
    }

    /// Patch with an all-zero mask: applying it is the identity.
    pub fn zero_mask() -> Self {
        PatchSpec {
            anchor: (0, 0),
            size: (0, 0),
            epsilon: 64.0 / 255.0,
            rho: Array::zeros(vec![0, 0, 3]),
            mode: PatchMode::Replace,
        }
    }

    /// Square patch covering approximately `ratio` of the image area,
    /// anchored at the top-left corner.
    pub fn from_ratio(ratio: f64, epsilon: f64, mode: PatchMode) -> Result<Self, AttackError> {
        let side = ((ratio * (IMG_H * IMG_W) as f64).sqrt().round() as usize).max(1);
        let side = side.min(IMG_H).min(IMG_W);
        Self::new((0, 0), (side, side), epsilon, mode)
    }

    pub fn with_random_init(mut self, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.rho.data_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
        self
    }

    pub fn n_params(&self) -> usize {
        self.size.0 * self.size.1 * 3
    }

    pub fn is_zero_mask(&self) -> bool {
        self.n_params() == 0
    }

    /// Realized perturbation δ = ε·tanh(ρ), shape h×w×3.
    pub fn delta(&self) -> Array {
        self.rho.tanh().scale(self.epsilon)
    }

    /// Flat image index of patch coordinate (i, j, channel).
    fn image_index(&self, i: usize, j: usize, c: usize) -> usize {
        ((self.anchor.0 + i) * IMG_W + (self.anchor.1 + j)) * 3 + c
    }

    /// Iterate (flat patch index, flat image index).
    fn index_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (h, w) = self.size;
        (0..h).flat_map(move |i| {
            (0..w).flat_map(move |j| {
                (0..3).map(move |c| ((i * w + j) * 3 + c, self.image_index(i, j, c)))
            })
        })
    }

    pub fn rho_row(&self) -> Array {
        Array::from_vec(vec![1, self.n_params()], self.rho.data().to_vec()).unwrap()
    }

    pub fn set_rho_from_row(&mut self, row: &Array) {
        for (dst, src) in self.rho.data_mut().iter_mut().zip(row.data()) {
            *dst = *src;
        }
    }

    // ── patch file format ────────────────────────────────────────────
    // magic "TRAPPT1\0", u32 LE header length, JSON header (anchor, size,
    // epsilon, mode, config hash), then ρ as little-endian f64.

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), AttackError> {
        let header = PatchHeader {
            anchor: self.anchor,
            size: self.size,
            epsilon: self.epsilon,
            mode: self.mode,
            config_hash: config_hash.to_string(),
        };
        let hj = serde_json::to_vec(&header).map_err(|e| AttackError::BadPatchFile(e.to_string()))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"TRAPPT1\0")?;
        f.write_all(&(hj.len() as u32).to_le_bytes())?;
        f.write_all(&hj)?;
        for v in self.rho.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String), AttackError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"TRAPPT1\0" {
            return Err(AttackError::BadPatchFile("bad magic".into()));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut hbuf = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut hbuf)?;
        let header: PatchHeader =
            serde_json::from_slice(&hbuf).map_err(|e| AttackError::BadPatchFile(e.to_string()))?;
        let n = header.size.0 * header.size.1 * 3;
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut patch = PatchSpec::new(header.anchor, header.size, header.epsilon, header.mode)?;
        patch.rho = Array::from_vec(vec![header.size.0, header.size.1, 3], data)
            .map_err(|e| AttackError::BadPatchFile(e.to_string()))?;
        Ok((patch, header.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct PatchHeader {
    anchor: (usize, usize),
    size: (usize, usize),
    epsilon: f64,
    mode: PatchMode,
    config_hash: String,
}

/// Stamp the trigger onto an observation (no gradients).
pub fn apply_patch(obs: &Observation, patch: &PatchSpec) -> Observation {
    if patch.is_zero_mask() {
        return obs.clone();
    }
    let delta = patch.delta();
    let mut img = obs.image.data().to_vec();
    for (pi, ii) in patch.index_pairs() {
        let d = delta.data()[pi];
        img[ii] = match patch.mode {
            PatchMode::Replace => d.clamp(0.0, 1.0),
            PatchMode::Add => (img[ii] + d).clamp(0.0, 1.0),
        };
    }
    Observation::new(Array::from_vec(vec![IMG_H, IMG_W, 3], img).unwrap())
}

/// Graph-side patch application. `rho` must be a [1, n] leaf. The result
/// is the flattened [1, H·W·3] triggered observation, differentiable
/// w.r.t. ρ through the clamp's pass-through region, with the same values
/// as [`apply_patch`].
pub fn apply_patch_graph(
    g: &mut Graph,
    obs: &Observation,
    patch: &PatchSpec,
    rho: Var,
) -> Result<Var, AttackError> {
    let n = patch.n_params();
    let obs_dim = IMG_H * IMG_W * 3;
    if n == 0 {
        return Ok(g.constant(obs.flat_row())?);
    }
    let t = g.tanh(rho)?;
    let delta = g.scale(t, patch.epsilon)?;
    // 0/1 scatter matrix mapping patch coordinates into the flat image
    let mut scatter = Array::zeros(vec![n, obs_dim]);
    let mut mask = vec![0.0; obs_dim];
    for (pi, ii) in patch.index_pairs() {
        scatter.data_mut()[pi * obs_dim + ii] = 1.0;
        mask[ii] = 1.0;
    }
    let sc = g.constant(scatter)?;
    let spread = g.matmul(delta, sc)?;
    let base = match patch.mode {
        PatchMode::Replace => {
            let mut b = obs.flat_row();
            for (i, v) in b.data_mut().iter_mut().enumerate() {
                *v *= 1.0 - mask[i];
            }
            b
        }
        PatchMode::Add => obs.flat_row(),
    };
    let bc = g.constant(base)?;
    let pre = g.add(spread, bc)?;
    Ok(g.clamp(pre, 0.0, 1.0)?)
}

// ── attack configuration ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorMode {
    /// softmax-weighted by +S/τ: emphasizes the trajectories hardest to
    /// suppress (largest tail scores).
    SoftHardest,
    /// softmax-weighted by −S/τ: the literal softmin reading.
    SoftminLiteral,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Trap,
    ReturnDrop,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Tail quantile q ∈ (0,1]; each trajectory keeps max(1, ceil(q·K))
    /// of its highest clean-score steps.
    pub tail_quantile: f64,
    /// Safety margin β; resolved to 0.5× the std of clean J_{b,K} over
    /// the proxy set when absent.
    pub beta: Option<f64>,
    pub tau: f64,
    pub aggregator: AggregatorMode,
    pub lambda_sign: f64,
    pub lambda_mag: f64,
    pub lambda_tv: f64,
    pub lambda_l2: f64,
    pub eps_stab: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub objective: Objective,
    pub disable_tail: bool,
    pub disable_sign: bool,
    pub disable_mag: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            tail_quantile: 0.25,
            beta: None,
            tau: 1.0,
            aggregator: AggregatorMode::SoftHardest,
            lambda_sign: 1.0,
            lambda_mag: 1.0,
            lambda_tv: 1e-3,
            lambda_l2: 1e-4,
            eps_stab: 1e-8,
            learning_rate: 1e-2,
            steps: 300,
            batch_size: 16,
            objective: Objective::Trap,
            disable_tail: false,
            disable_sign: false,
            disable_mag: false,
        }
    }
}

impl AttackConfig {
    pub fn config_hash(&self) -> String {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(self).unwrap().hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

// ── loss primitives (plain evaluation) ───────────────────────────────

/// Clean and triggered score grids computed with shared candidate actions
/// (paired semantics).
pub fn score_pair(
    model: &WorldModel,
    pcfg: &PlannerConfig,
    obs: &Observation,
    patch: &PatchSpec,
    noise_seed: u64,
) -> Result<(ScoreGrid, ScoreGrid, Vec<Array>), AttackError> {
    let z0_clean = model.encode(obs)?;
    let actions = sample_candidates(model, &z0_clean, pcfg, noise_seed)?;
    let (clean, _) = score_with_actions_mode(model, &z0_clean, &actions, pcfg.score_mode)?;
    let triggered_obs = apply_patch(obs, patch);
    let z0_trig = model.encode(&triggered_obs)?;
    let (trig, _) = score_with_actions_mode(model, &z0_trig, &actions, pcfg.score_mode)?;
    Ok((clean, trig, actions))
}

/// Per trajectory, mark the m = max(1, ceil(q·K)) steps with the highest
/// clean scores; ties broken toward lower k. Exactly m ones per row.
pub fn tail_mask(clean: &Array, q: f64) -> Array {
    let (b, k) = (clean.shape()[0], clean.shape()[1]);
    let m = ((q * k as f64).ceil() as usize).clamp(1, k);
    let mut mask = Array::zeros(vec![b, k]);
    for bi in 0..b {
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|x, y| {
            clean
                .at2(bi, *y)
                .partial_cmp(&clean.at2(bi, *x))
                .unwrap()
                .then(x.cmp(y))
        });
        for sel in &idx[..m] {
            mask.set2(bi, *sel, 1.0);
        }
    }
    mask
}

/// Tail attack score S_b = Σ_k M_{b,k}·ΔJ_{b,k} / (Σ_k M_{b,k} + ε_stab).
pub fn tail_score(dj_row: &[f64], mask_row: &[f64], eps_stab: f64) -> f64 {
    let num: f64 = dj_row.iter().zip(mask_row).map(|(d, m)| m * d).sum();
    let den: f64 = mask_row.iter().sum::<f64>() + eps_stab;
    num / den
}

/// Reduce per-trajectory tail scores to the tail loss.
pub fn aggregate(s: &[f64], tau: f64, mode: AggregatorMode) -> f64 {
    assert!(!s.is_empty() && tau > 0.0);
    match mode {
        AggregatorMode::Mean => s.iter().sum::<f64>() / s.len() as f64,
        AggregatorMode::Max => s.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        AggregatorMode::SoftHardest | AggregatorMode::SoftminLiteral => {
            let sign = if matches!(mode, AggregatorMode::SoftHardest) {
                1.0
            } else {
                -1.0
            };
            // max-subtraction before exponentiation guards overflow
            let shift = s
                .iter()
                .map(|v| sign * v)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| ((sign * v - shift) / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().zip(s).map(|(w, v)| w / z * v).sum()
        }
    }
}

/// L_sign = (1/BK)·Σ 1(ΔJ > 0)·ΔJ²; the indicator is strict.
pub fn sign_gate_loss(dj: &Array) -> f64 {
    let n = dj.len() as f64;
    dj.data()
        .iter()
        .map(|d| if *d > 0.0 { d * d } else { 0.0 })
        .sum::<f64>()
        / n
}

/// L_mag = (1/BK)·Σ 1(ΔJ < −β)·(ΔJ + β)².
pub fn magnitude_gate_loss(dj: &Array, beta: f64) -> f64 {
    let n = dj.len() as f64;
    dj.data()
        .iter()
        .map(|d| {
            if *d < -beta {
                let t = d + beta;
                t * t
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n
}

/// Anisotropic L1 total variation and squared L2 energy of the realized
/// perturbation δ.
pub fn regularizers(patch: &PatchSpec) -> (f64, f64) {
    let delta = patch.delta();
    let (h, w) = patch.size;
    let at = |i: usize, j: usize, c: usize| delta.data()[(i * w + j) * 3 + c];
    let mut tv = 0.0;
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    tv += (at(i, j + 1, c) - at(i, j, c)).abs();
                }
                if i + 1 < h {
                    tv += (at(i + 1, j, c) - at(i, j, c)).abs();
                }
            }
        }
    }
    let l2 = delta.data().iter().map(|v| v * v).sum();
    (tv, l2)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tail: f64,
    pub sign: f64,
    pub mag: f64,
    pub tv: f64,
    pub l2: f64,
    pub total: f64,
}

/// Evaluate the full attack objective on a clean/triggered grid pair.
/// For the return-drop objective the triggered grid is expected to carry
/// step-value scores, whose final column is the discounted r+αV sum.
pub fn total_loss(
    clean: &ScoreGrid,
    trig: &ScoreGrid,
    patch: &PatchSpec,
    cfg: &AttackConfig,
    beta: f64,
) -> LossBreakdown {
    let (tv, l2) = regularizers(patch);
    let (tv, l2) = (cfg.lambda_tv * tv, cfg.lambda_l2 * l2);
    match cfg.objective {
        Objective::Trap | Objective::Random => {
            let dj = trig.scores.sub(&clean.scores).unwrap();
            let (b, k) = (dj.shape()[0], dj.shape()[1]);
            let mask = tail_mask(&clean.scores, cfg.tail_quantile);
            let tail = if cfg.disable_tail {
                0.0
            } else {
                let s: Vec<f64> = (0..b)
                    .map(|bi| {
                        let dj_row: Vec<f64> = (0..k).map(|ki| dj.at2(bi, ki)).collect();
                        let m_row: Vec<f64> = (0..k).map(|ki| mask.at2(bi, ki)).collect();
                        tail_score(&dj_row, &m_row, cfg.eps_stab)
                    })
                    .collect();
                aggregate(&s, cfg.tau, cfg.aggregator)
            };
            let sign = if cfg.disable_sign {
                0.0
            } else {
                cfg.lambda_sign * sign_gate_loss(&dj)
            };
            let mag = if cfg.disable_mag {
                0.0
            } else {
                cfg.lambda_mag * magnitude_gate_loss(&dj, beta)
            };
            LossBreakdown {
                tail,
                sign,
                mag,
                tv,
                l2,
                total: tail + sign + mag + tv + l2,
            }
        }
        Objective::ReturnDrop => {
            let finals = trig.final_scores();
            let rd = finals.iter().sum::<f64>() / finals.len() as f64;
            LossBreakdown {
                tail: rd,
                sign: 0.0,
                mag: 0.0,
                tv,
                l2,
                total: rd + tv + l2,
            }
        }
    }
}

// ── graph-side loss construction ─────────────────────────────────────

/// One proxy observation with everything frozen that the loss treats as
/// constant: candidate actions, the clean grid, and the tail mask.
pub struct TrapInstance {
    pub obs: Observation,
    pub actions: Vec<Array>,
    pub clean: ScoreGrid,
    pub mask: Array,
}

impl TrapInstance {
    pub fn prepare(
        model: &WorldModel,
        pcfg: &PlannerConfig,
        obs: &Observation,
        q: f64,
        noise_seed: u64,
    ) -> Result<Self, AttackError> {
        let z0 = model.encode(obs)?;
        let actions = sample_candidates(model, &z0, pcfg, noise_seed)?;
        let (clean, _) = score_with_actions_mode(model, &z0, &actions, pcfg.score_mode)?;
        let mask = tail_mask(&clean.scores, q);
        Ok(TrapInstance {
            obs: obs.clone(),
            actions,
            clean,
            mask,
        })
    }
}

/// Optional pre-frozen gates for finite-difference checks: when present,
/// the sign/magnitude indicators are taken from these constants instead of
/// the current ΔJ values.
pub struct FrozenGates {
    /// per instance: K columns of B×1 sign gates, then magnitude gates.
    pub sign: Vec<Vec<Array>>,
    pub mag: Vec<Vec<Array>>,
}

pub struct GraphLoss {
    pub total: Var,
    pub tail: f64,
    pub sign: f64,
    pub mag: f64,
    pub tv: f64,
    pub l2: f64,
    /// mean of masked ΔJ entries across instances (reporting only).
    pub mean_masked_dj: f64,
}

/// Build the attack objective into `g`, returning the scalar root and the
/// component values at the current point. Gate indicators and the tail
/// mask enter as constants.
pub fn build_attack_loss(
    g: &mut Graph,
    model: &WorldModel,
    vars: &WorldModelVars,
    patch: &PatchSpec,
    rho: Var,
    instances: &[TrapInstance],
    cfg: &AttackConfig,
    beta: f64,
    score_mode: ScoreMode,
    frozen: Option<&FrozenGates>,
) -> Result<GraphLoss, AttackError> {
    assert!(!instances.is_empty());
    let n_inst = instances.len() as f64;

    let mut tail_acc: Option<Var> = None;
    let mut sign_acc: Option<Var> = None;
    let mut mag_acc: Option<Var> = None;
    let mut rd_acc: Option<Var> = None;
    let mut masked_dj_sum = 0.0;
    let mut masked_cnt = 0.0;

    for (inst_i, inst) in instances.iter().enumerate() {
        let obs_var = apply_patch_graph(g, &inst.obs, patch, rho)?;
        let z0t = vars.encoder.forward(g, obs_var)?;
        let mode = if matches!(cfg.objective, Objective::ReturnDrop) {
            ScoreMode::StepValue
        } else {
            score_mode
        };
        let cols = score_columns_graph(g, model, vars, z0t, &inst.actions, mode)?;
        let (b, k) = (inst.clean.b(), inst.clean.k());

        if matches!(cfg.objective, Objective::ReturnDrop) {
            let last = *cols.last().unwrap();
            let m = g.mean(last)?;
            rd_acc = Some(match rd_acc {
                None => m,
                Some(t) => g.add(t, m)?,
            });
            continue;
        }

        // ΔJ columns against the constant clean grid
        let mut dj_cols = Vec::with_capacity(k);
        for (ki, col) in cols.iter().enumerate() {
            let clean_col = Array::from_vec(
                vec![b, 1],
                (0..b).map(|bi| inst.clean.scores.at2(bi, ki)).collect(),
            )
            .unwrap();
            let cc = g.constant(clean_col)?;
            dj_cols.push(g.sub(*col, cc)?);
        }

        // reporting: masked ΔJ statistics at the current point
        for (ki, dj) in dj_cols.iter().enumerate() {
            for bi in 0..b {
                let m = inst.mask.at2(bi, ki);
                if m > 0.0 {
                    masked_dj_sum += g.value(*dj).at2(bi, 0);
                    masked_cnt += 1.0;
                }
            }
        }

        if !cfg.disable_tail {
            // S_b: masked row sums scaled by the constant reciprocal count
            let mut acc: Option<Var> = None;
            for (ki, dj) in dj_cols.iter().enumerate() {
                let mcol = Array::from_vec(
                    vec![b, 1],
                    (0..b).map(|bi| inst.mask.at2(bi, ki)).collect(),
                )
                .unwrap();
                let t = g.mul_const(*dj, mcol)?;
                acc = Some(match acc {
                    None => t,
                    Some(a) => g.add(a, t)?,
                });
            }
            let masked_sum = acc.unwrap();
            let inv_cnt = Array::from_vec(
                vec![b, 1],
                (0..b)
                    .map(|bi| {
                        let cnt: f64 = (0..k).map(|ki| inst.mask.at2(bi, ki)).sum();
                        1.0 / (cnt + cfg.eps_stab)
                    })
                    .collect(),
            )
            .unwrap();
            let s = g.mul_const(masked_sum, inv_cnt)?;
            let agg = aggregate_graph(g, s, cfg.tau, cfg.aggregator)?;
            tail_acc = Some(match tail_acc {
                None => agg,
                Some(t) => g.add(t, agg)?,
            });
        }

        let bk = (b * k) as f64;
        if !cfg.disable_sign {
            let mut acc: Option<Var> = None;
            for (ki, dj) in dj_cols.iter().enumerate() {
                let gate = match frozen {
                    Some(f) => f.sign[inst_i][ki].clone(),
                    None => g.value(*dj).map(|d| if d > 0.0 { 1.0 } else { 0.0 }),
                };
                let sq = g.gated_square(*dj, gate)?;
                let sm = g.sum(sq)?;
                acc = Some(match acc {
                    None => sm,
                    Some(a) => g.add(a, sm)?,
                });
            }
            let l = g.scale(acc.unwrap(), 1.0 / bk)?;
            sign_acc = Some(match sign_acc {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        if !cfg.disable_mag {
            let mut acc: Option<Var> = None;
            for (ki, dj) in dj_cols.iter().enumerate() {
                let gate = match frozen {
                    Some(f) => f.mag[inst_i][ki].clone(),
                    None => g.value(*dj).map(|d| if d < -beta { 1.0 } else { 0.0 }),
                };
                let shifted = g.add_scalar(*dj, beta)?;
                let sq = g.gated_square(shifted, gate)?;
                let sm = g.sum(sq)?;
                acc = Some(match acc {
                    None => sm,
                    Some(a) => g.add(a, sm)?,
                });
            }
            let l = g.scale(acc.unwrap(), 1.0 / bk)?;
            mag_acc = Some(match mag_acc {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
    }

    // regularizers on δ
    let (tv_var, l2_var) = regularizers_graph(g, patch, rho)?;

    let mut total: Option<Var> = None;
    let mut add_term = |g: &mut Graph, term: Option<Var>, weight: f64| -> Result<(), AttackError> {
        if let Some(t) = term {
            let w = if weight == 1.0 { t } else { g.scale(t, weight)? };
            total = Some(match total {
                None => w,
                Some(acc) => g.add(acc, w)?,
            });
        }
        Ok(())
    };

    let inv = 1.0 / n_inst;
    let mut tail_val = 0.0;
    let mut sign_val = 0.0;
    let mut mag_val = 0.0;
    if let Some(t) = rd_acc {
        let avg = g.scale(t, inv)?;
        tail_val = g.value(avg).item();
        add_term(g, Some(avg), 1.0)?;
    }
    if let Some(t) = tail_acc {
        let avg = g.scale(t, inv)?;
        tail_val = g.value(avg).item();
        add_term(g, Some(avg), 1.0)?;
    }
    if let Some(t) = sign_acc {
        let avg = g.scale(t, inv)?;
        sign_val = cfg.lambda_sign * g.value(avg).item();
        add_term(g, Some(avg), cfg.lambda_sign)?;
    }
    if let Some(t) = mag_acc {
        let avg = g.scale(t, inv)?;
        mag_val = cfg.lambda_mag * g.value(avg).item();
        add_term(g, Some(avg), cfg.lambda_mag)?;
    }
    let tv_val = cfg.lambda_tv * tv_var.as_ref().map(|v| g.value(*v).item()).unwrap_or(0.0);
    let l2_val = cfg.lambda_l2 * l2_var.as_ref().map(|v| g.value(*v).item()).unwrap_or(0.0);
    add_term(g, tv_var, cfg.lambda_tv)?;
    add_term(g, l2_var, cfg.lambda_l2)?;

    let total = match total {
        Some(t) => t,
        None => g.constant(Array::scalar(0.0))?,
    };
    Ok(GraphLoss {
        total,
        tail: tail_val,
        sign: sign_val,
        mag: mag_val,
        tv: tv_val,
        l2: l2_val,
        mean_masked_dj: if masked_cnt > 0.0 {
            masked_dj_sum / masked_cnt
        } else {
            0.0
        },
    })
}

fn aggregate_graph(
    g: &mut Graph,
    s: Var,
    tau: f64,
    mode: AggregatorMode,
) -> Result<Var, AttackError> {
    match mode {
        AggregatorMode::Mean => Ok(g.mean(s)?),
        AggregatorMode::Max => {
            let vals = g.value(s).clone();
            let mut best = 0;
            for i in 0..vals.len() {
                if vals.data()[i] > vals.data()[best] {
                    best = i;
                }
            }
            let mut onehot = Array::zeros(vals.shape().to_vec());
            onehot.data_mut()[best] = 1.0;
            Ok(g.masked_weighted_sum(s, onehot)?)
        }
        AggregatorMode::SoftHardest | AggregatorMode::SoftminLiteral => {
            let sign = if matches!(mode, AggregatorMode::SoftHardest) {
                1.0
            } else {
                -1.0
            };
            let vals = g.value(s).clone();
            let shift = vals
                .data()
                .iter()
                .map(|v| sign * v)
                .fold(f64::NEG_INFINITY, f64::max);
            let signed = g.scale(s, sign)?;
            let shifted = g.add_scalar(signed, -shift)?;
            let scaled = g.scale(shifted, 1.0 / tau)?;
            let e = g.exp(scaled)?;
            let z = g.sum(e)?;
            let w = g.div_scalar_var(e, z)?;
            let ws = g.mul(w, s)?;
            Ok(g.sum(ws)?)
        }
    }
}

/// TV and L2 regularizers on δ, built from ρ inside the graph. The L1
/// absolute values use constant signs at the current point (exact value,
/// subgradient direction).
fn regularizers_graph(
    g: &mut Graph,
    patch: &PatchSpec,
    rho: Var,
) -> Result<(Option<Var>, Option<Var>), AttackError> {
    let (h, w) = patch.size;
    let n = patch.n_params();
    if n == 0 {
        return Ok((None, None));
    }
    let t = g.tanh(rho)?;
    let delta = g.scale(t, patch.epsilon)?;
    let sq = g.square(delta)?;
    let l2 = g.sum(sq)?;

    // horizontal+vertical difference pairs as a [n, p] right-multiplier
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let pidx = |i: usize, j: usize, c: usize| (i * w + j) * 3 + c;
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    pairs.push((pidx(i, j + 1, c), pidx(i, j, c)));
                }
                if i + 1 < h {
                    pairs.push((pidx(i + 1, j, c), pidx(i, j, c)));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Ok((None, Some(l2)));
    }
    let p = pairs.len();
    let mut dmat = Array::zeros(vec![n, p]);
    for (col, (plus, minus)) in pairs.iter().enumerate() {
        dmat.data_mut()[plus * p + col] = 1.0;
        dmat.data_mut()[minus * p + col] -= 1.0;
    }
    let dm = g.constant(dmat)?;
    let diffs = g.matmul(delta, dm)?;
    let signs = g.value(diffs).map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    let absd = g.mul_const(diffs, signs)?;
    let tv = g.sum(absd)?;
    Ok((Some(tv), Some(l2)))
}

// ── optimization loop ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLoss {
    pub tail: f64,
    pub sign: f64,
    pub mag: f64,
    pub tv: f64,
    pub l2: f64,
    pub total: f64,
    pub mean_masked_dj: f64,
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub patch: PatchSpec,
    pub history: Vec<StepLoss>,
    pub beta_resolved: f64,
    pub wall_clock_secs: f64,
    pub aborted: Option<String>,
}

/// Resolve the safety margin: configured value, or 0.5× the std of clean
/// final scores over (a prefix of) the proxy set.
pub fn resolve_beta(
    model: &WorldModel,
    pcfg: &PlannerConfig,
    proxy: &[Observation],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64, AttackError> {
    if let Some(b) = cfg.beta {
        return Ok(b);
    }
    let mut finals = Vec::new();
    for (i, obs) in proxy.iter().take(16).enumerate() {
        let z0 = model.encode(obs)?;
        let actions = sample_candidates(model, &z0, pcfg, derive_seed(seed, 7_000 + i as u64))?;
        let (grid, _) = score_with_actions_mode(model, &z0, &actions, pcfg.score_mode)?;
        finals.extend(grid.final_scores());
    }
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(0.5 * var.sqrt())
}

/// Optimize the patch parameters over a proxy observation set with an
/// adaptive per-coordinate first-order method. The tail mask is rebuilt
/// from the clean grids at every step.
pub fn optimize_patch(
    model: &WorldModel,
    pcfg: &PlannerConfig,
    proxy: &[Observation],
    init: PatchSpec,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackReport, AttackError> {
    if proxy.is_empty() {
        return Err(AttackError::EmptyProxy);
    }
    let start = std::time::Instant::now();
    let mut patch = init;

    if matches!(cfg.objective, Objective::Random) {
        // sample δ uniformly once; no gradients involved
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = patch.epsilon;
        for v in patch.rho.data_mut() {
            let d: f64 = rng.gen_range(-eps..=eps);
            let r = (d / eps).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
            *v = r.atanh();
        }
        return Ok(AttackReport {
            patch,
            history: Vec::new(),
            beta_resolved: cfg.beta.unwrap_or(0.0),
            wall_clock_secs: start.elapsed().as_secs_f64(),
            aborted: None,
        });
    }

    let beta = resolve_beta(model, pcfg, proxy, cfg, seed)?;
    let n = patch.n_params();
    let mut adam = Adam::new(cfg.learning_rate, &[n]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut history = Vec::with_capacity(cfg.steps);
    let mut last_finite = patch.clone();

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size.min(proxy.len()))
            .map(|_| rng.gen_range(0..proxy.len()))
            .collect();
        let mut instances = Vec::with_capacity(batch.len());
        for (bi, idx) in batch.iter().enumerate() {
            instances.push(TrapInstance::prepare(
                model,
                pcfg,
                &proxy[*idx],
                cfg.tail_quantile,
                derive_seed(seed, (step as u64) << 16 | bi as u64),
            )?);
        }

        let mut g = Graph::new();
        let vars = model.bind_all(&mut g)?;
        let rho = g.leaf(patch.rho_row())?;
        let built = build_attack_loss(
            &mut g,
            model,
            &vars,
            &patch,
            rho,
            &instances,
            cfg,
            beta,
            pcfg.score_mode,
            None,
        );
        let built = match built {
            Ok(b) => b,
            Err(e) => {
                return Ok(AttackReport {
                    patch: last_finite,
                    history,
                    beta_resolved: beta,
                    wall_clock_secs: start.elapsed().as_secs_f64(),
                    aborted: Some(format!("step {step}: {e}")),
                });
            }
        };
        let total_val = g.value(built.total).item();
        if !total_val.is_finite() {
            return Ok(AttackReport {
                patch: last_finite,
                history,
                beta_resolved: beta,
                wall_clock_secs: start.elapsed().as_secs_f64(),
                aborted: Some(format!("non-finite loss at step {step}")),
            });
        }
        g.backward(built.total)?;
        let grad = g.adjoint(rho).clone();

        history.push(StepLoss {
            tail: built.tail,
            sign: built.sign,
            mag: built.mag,
            tv: built.tv,
            l2: built.l2,
            total: total_val,
            mean_masked_dj: built.mean_masked_dj,
        });
        last_finite = patch.clone();

        let mut row = patch.rho_row();
        {
            let mut params: Vec<&mut Array> = vec![&mut row];
            adam.step(&mut params, &[&grad]);
        }
        patch.set_rho_from_row(&row);
    }

    Ok(AttackReport {
        patch,
        history,
        beta_resolved: beta,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check;
    use crate::envs::{Env, EnvKind};
    use crate::worldmodel::Hyper;

    fn small_pcfg() -> PlannerConfig {
        PlannerConfig {
            candidates: 8,
            horizon: 5,
            ..PlannerConfig::imagination_defaults()
        }
    }

    fn model() -> WorldModel {
        WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3)
    }

    #[test]
    fn zero_mask_patch_is_identity() {
        let (_, obs) = Env::reset(EnvKind::GridGoal, 5);
        let patched = apply_patch(&obs, &PatchSpec::zero_mask());
        assert_eq!(obs, patched);
    }

    #[test]
    fn saturated_rho_reaches_clamped_epsilon() {
        let mut patch = PatchSpec::new((0, 0), (2, 2), 0.25, PatchMode::Replace).unwrap();
        for v in patch.rho.data_mut() {
            *v = 1e6;
        }
        let (_, obs) = Env::reset(EnvKind::GridGoal, 5);
        let patched = apply_patch(&obs, &patch);
        for (pi, ii) in patch.index_pairs() {
            let _ = pi;
            let v = patched.image.data()[ii];
            assert!((v - 0.25).abs() < 1e-9, "v = {v}");
        }
    }

    #[test]
    fn replace_mode_hand_example() {
        // 1×1 patch, ε=0.25, ρ=0, replace: δ=0 replaces the pixel, clamp
        // is a no-op, so the pixel becomes 0
        let patch = PatchSpec::new((4, 4), (1, 1), 0.25, PatchMode::Replace).unwrap();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 5);
        let patched = apply_patch(&obs, &patch);
        for c in 0..3 {
            assert_eq!(patched.get(4, 4, c), 0.0);
        }
    }

    #[test]
    fn patch_outside_image_rejected() {
        assert!(matches!(
            PatchSpec::new((20, 20), (8, 8), 0.25, PatchMode::Replace),
            Err(AttackError::PatchOutsideImage { .. })
        ));
    }

    #[test]
    fn budget_invariant_holds_for_random_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [PatchMode::Replace, PatchMode::Add] {
            for _ in 0..500 {
                let eps = rng.gen_range(0.01..1.0);
                let mut patch = PatchSpec::new((0, 0), (3, 3), eps, mode).unwrap();
                for v in patch.rho.data_mut() {
                    *v = rng.gen_range(-100.0..100.0);
                }
                let delta = patch.delta();
                for d in delta.data() {
                    assert!(d.abs() <= eps);
                }
            }
        }
    }

    #[test]
    fn plain_and_graph_patch_paths_bit_identical() {
        let (_, obs) = Env::reset(EnvKind::GridGoal, 9);
        for mode in [PatchMode::Replace, PatchMode::Add] {
            let patch = PatchSpec::new((2, 3), (3, 4), 0.3, mode)
                .unwrap()
                .with_random_init(17, 2.0);
            let plain = apply_patch(&obs, &patch);
            let mut g = Graph::new();
            let rho = g.leaf(patch.rho_row()).unwrap();
            let ov = apply_patch_graph(&mut g, &obs, &patch, rho).unwrap();
            for (a, b) in plain.image.data().iter().zip(g.value(ov).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn score_pair_zero_mask_gives_zero_deviation() {
        let m = model();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 1);
        let (clean, trig, _) =
            score_pair(&m, &small_pcfg(), &obs, &PatchSpec::zero_mask(), 4).unwrap();
        assert_eq!(clean.scores, trig.scores);
    }

    #[test]
    fn score_pair_finite_for_random_patch() {
        let m = model();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 1);
        let patch = PatchSpec::new((0, 0), (7, 7), 0.25, PatchMode::Replace)
            .unwrap()
            .with_random_init(3, 1.0);
        let (clean, trig, _) = score_pair(&m, &small_pcfg(), &obs, &patch, 4).unwrap();
        let dj = trig.scores.sub(&clean.scores).unwrap();
        assert!(dj.is_finite_all());
    }

    #[test]
    fn tail_mask_hand_example() {
        let clean = Array::from_vec(vec![1, 5], vec![1.0, 5.0, 3.0, 9.0, 2.0]).unwrap();
        let mask = tail_mask(&clean, 0.4);
        assert_eq!(mask.data(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn tail_mask_q1_all_ones_and_tie_rule() {
        let clean = Array::from_vec(vec![1, 4], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let mask = tail_mask(&clean, 1.0);
        assert!(mask.data().iter().all(|v| *v == 1.0));
        let mask1 = tail_mask(&clean, 0.2);
        assert_eq!(mask1.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tail_score_hand_example() {
        let s = tail_score(
            &[-1.0, -3.0, 0.0, -5.0, 2.0],
            &[0.0, 1.0, 0.0, 1.0, 0.0],
            1e-8,
        );
        assert!((s - (-4.0)).abs() < 1e-7);
        assert_eq!(tail_score(&[1.0, 2.0], &[0.0, 0.0], 1e-8), 0.0);
        assert_eq!(tail_score(&[0.0, 0.0], &[1.0, 1.0], 1e-8), 0.0);
    }

    #[test]
    fn aggregate_constant_and_limits() {
        for mode in [
            AggregatorMode::SoftHardest,
            AggregatorMode::SoftminLiteral,
            AggregatorMode::Mean,
            AggregatorMode::Max,
        ] {
            let v = aggregate(&[0.7; 6], 1.0, mode);
            assert!((v - 0.7).abs() < 1e-12);
        }
        // τ→0+ soft_hardest approaches the max
        let v = aggregate(&[-2.0, 0.0], 1e-6, AggregatorMode::SoftHardest);
        assert!(v.abs() < 1e-9);
        // τ=1 hand value
        let v = aggregate(&[-2.0, 0.0], 1.0, AggregatorMode::SoftHardest);
        assert!((v - (-0.2384)).abs() < 1e-3, "v = {v}");
    }

    #[test]
    fn gate_losses_hand_examples() {
        let dj = Array::from_vec(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(sign_gate_loss(&dj), 2.0);
        let all_neg = Array::from_vec(vec![1, 3], vec![-1.0, 0.0, -0.5]).unwrap();
        assert_eq!(sign_gate_loss(&all_neg), 0.0);

        let dj = Array::from_vec(vec![1, 2], vec![-3.0, 0.5]).unwrap();
        assert_eq!(magnitude_gate_loss(&dj, 1.0), 2.0);
        let ok = Array::from_vec(vec![1, 2], vec![-1.0, 0.0]).unwrap();
        assert_eq!(magnitude_gate_loss(&ok, 1.0), 0.0);
        let single = Array::from_vec(vec![1, 1], vec![-2.0]).unwrap();
        assert_eq!(magnitude_gate_loss(&single, 0.0), 4.0);
    }

    #[test]
    fn regularizer_hand_examples() {
        // constant δ has zero TV
        let mut patch = PatchSpec::new((0, 0), (2, 2), 0.5, PatchMode::Replace).unwrap();
        for v in patch.rho.data_mut() {
            *v = 3.0;
        }
        let (tv, _) = regularizers(&patch);
        assert!(tv.abs() < 1e-12);

        // zero δ has zero energy
        let zero = PatchSpec::new((0, 0), (2, 2), 0.5, PatchMode::Replace).unwrap();
        let (_, l2) = regularizers(&zero);
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn total_loss_breakdown_sums() {
        let m = model();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 1);
        let patch = PatchSpec::new((0, 0), (5, 5), 0.25, PatchMode::Replace)
            .unwrap()
            .with_random_init(3, 1.0);
        let cfg = AttackConfig::default();
        let (clean, trig, _) = score_pair(&m, &small_pcfg(), &obs, &patch, 4).unwrap();
        let b = total_loss(&clean, &trig, &patch, &cfg, 0.5);
        assert!((b.total - (b.tail + b.sign + b.mag + b.tv + b.l2)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_mask_all_zero() {
        let m = model();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 1);
        let patch = PatchSpec::zero_mask();
        let cfg = AttackConfig::default();
        let (clean, trig, _) = score_pair(&m, &small_pcfg(), &obs, &patch, 4).unwrap();
        let b = total_loss(&clean, &trig, &patch, &cfg, 0.5);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn delta_j_gradient_passes_finite_difference_check() {
        let m = model();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 2);
        let pcfg = small_pcfg();
        let patch = PatchSpec::new((1, 1), (2, 2), 0.3, PatchMode::Replace)
            .unwrap()
            .with_random_init(5, 0.5);
        let inst = TrapInstance::prepare(&m, &pcfg, &obs, 0.25, 11).unwrap();
        let x = patch.rho_row();
        let err = grad_check(
            |g, rho| {
                let vars = m.bind_all(g)?;
                let ov = apply_patch_graph(g, &inst.obs, &patch, rho).map_err(flatten_err)?;
                let z0t = vars.encoder.forward(g, ov)?;
                let cols =
                    score_columns_graph(g, &m, &vars, z0t, &inst.actions, pcfg.score_mode)
                        .map_err(flatten_err)?;
                // mean of ΔJ over the grid
                let mut acc: Option<Var> = None;
                for (ki, col) in cols.iter().enumerate() {
                    let b = inst.clean.b();
                    let clean_col = Array::from_vec(
                        vec![b, 1],
                        (0..b).map(|bi| inst.clean.scores.at2(bi, ki)).collect(),
                    )
                    .unwrap();
                    let cc = g.constant(clean_col)?;
                    let dj = g.sub(*col, cc)?;
                    let s = g.sum(dj)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s)?,
                    });
                }
                let n = (inst.clean.b() * inst.clean.k()) as f64;
                g.scale(acc.unwrap(), 1.0 / n)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    fn flatten_err<E: std::fmt::Display>(_e: E) -> DiffError {
        DiffError::BadShape {
            op: "attack test",
            expected: "see message",
            got: vec![],
        }
    }

    #[test]
    fn optimize_zero_steps_returns_init() {
        let m = model();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 2);
        let init = PatchSpec::new((0, 0), (4, 4), 0.25, PatchMode::Replace)
            .unwrap()
            .with_random_init(1, 0.1);
        let cfg = AttackConfig {
            steps: 0,
            ..Default::default()
        };
        let report = optimize_patch(&m, &small_pcfg(), &[obs], init.clone(), &cfg, 0).unwrap();
        assert_eq!(report.patch.rho, init.rho);
        assert!(report.history.is_empty());
    }

    #[test]
    fn random_objective_respects_budget() {
        let m = model();
        let (_, obs) = Env::reset(EnvKind::GridGoal, 2);
        let init = PatchSpec::new((0, 0), (4, 4), 0.25, PatchMode::Replace).unwrap();
        let cfg = AttackConfig {
            objective: Objective::Random,
            ..Default::default()
        };
        let report = optimize_patch(&m, &small_pcfg(), &[obs], init, &cfg, 9).unwrap();
        for d in report.patch.delta().data() {
            assert!(d.abs() <= 0.25);
        }
        assert!(report.history.is_empty());
    }

    #[test]
    fn optimize_reduces_masked_deviation() {
        let m = model();
        let proxy: Vec<Observation> = (0..4).map(|s| Env::reset(EnvKind::GridGoal, s).1).collect();
        let init = PatchSpec::new((0, 0), (5, 5), 0.3, PatchMode::Replace)
            .unwrap()
            .with_random_init(1, 0.05);
        let cfg = AttackConfig {
            steps: 30,
            batch_size: 2,
            ..Default::default()
        };
        let pcfg = PlannerConfig {
            candidates: 8,
            horizon: 4,
            ..PlannerConfig::imagination_defaults()
        };
        let report = optimize_patch(&m, &pcfg, &proxy, init, &cfg, 0).unwrap();
        assert!(report.aborted.is_none());
        assert_eq!(report.history.len(), 30);
        let first = report.history.first().unwrap().mean_masked_dj;
        let last = report.history.last().unwrap().mean_masked_dj;
        assert!(last < first, "first {first}, last {last}");
    }

    #[test]
    fn patch_file_roundtrip() {
        let patch = PatchSpec::new((2, 2), (3, 3), 0.25, PatchMode::Add)
            .unwrap()
            .with_random_init(4, 1.0);
        let dir = std::env::temp_dir().join("trap_lab_patch_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("patch.trappt");
        patch.save(&path, "cafebabe").unwrap();
        let (loaded, hash) = PatchSpec::load(&path).unwrap();
        assert_eq!(hash, "cafebabe");
        assert_eq!(loaded.rho, patch.rho);
        assert_eq!(loaded.anchor, patch.anchor);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"TRAPPT1\0");
    }
}
