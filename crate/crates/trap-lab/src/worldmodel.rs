//! Learnable latent world model: encoder, dynamics, reward head, value
//! head, and an optional distilled policy head. Training minimizes latent
//! consistency, reward MSE, and value MSE against Monte-Carlo returns.

use crate::diffmath::{Array, DiffError, Graph, Result as DiffResult, Var};
use crate::envs::{Action, EnvKind, Observation, IMG_H, IMG_W};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const OBS_DIM: usize = IMG_H * IMG_W * 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("training diverged at epoch {epoch}, batch {batch}; returning last finite checkpoint")]
    Diverged { epoch: usize, batch: usize },
}

/// Fully-connected stack with tanh hidden activations. The output layer
/// is linear unless `output_tanh` is set (used by the encoder and
/// dynamics so latents stay bounded in (−1,1)^d).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(Array, Array)>,
    pub output_tanh: bool,
    /// added to every input coordinate before the first layer; the
    /// encoder uses it to center pixel inputs at the background level,
    /// which concentrates first-layer gradients on discriminative pixels
    pub input_offset: f64,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-s..s))
                .collect();
            let weight = Array::from_vec(vec![fan_in, fan_out], data).unwrap();
            let bias = Array::zeros(vec![fan_out]);
            layers.push((weight, bias));
        }
        Mlp {
            layers,
            output_tanh: false,
            input_offset: 0.0,
        }
    }

    pub fn with_output_tanh(mut self) -> Self {
        self.output_tanh = true;
        self
    }

    pub fn with_input_offset(mut self, offset: f64) -> Self {
        self.input_offset = offset;
        self
    }

    pub fn zeroed(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| (Array::zeros(vec![w[0], w[1]]), Array::zeros(vec![w[1]])))
            .collect();
        Mlp {
            layers,
            output_tanh: false,
            input_offset: 0.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().0.shape()[1]
    }

    pub fn forward(&self, x: &Array) -> DiffResult<Array> {
        let mut h = x.clone();
        if self.input_offset != 0.0 {
            h = h.add_scalar(self.input_offset);
        }
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_row(b)?;
            if i != last || self.output_tanh {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Bind parameters into a graph as leaves (for training) or constants
    /// (for attack optimization, where only the input carries gradient).
    pub fn bind(&self, g: &mut Graph) -> DiffResult<MlpVars> {
        let mut vars = Vec::new();
        for (w, b) in &self.layers {
            vars.push((g.leaf(w.clone())?, g.leaf(b.clone())?));
        }
        Ok(MlpVars {
            vars,
            output_tanh: self.output_tanh,
            input_offset: self.input_offset,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub vars: Vec<(Var, Var)>,
    pub output_tanh: bool,
    pub input_offset: f64,
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> DiffResult<Var> {
        let mut h = x;
        if self.input_offset != 0.0 {
            h = g.add_scalar(h, self.input_offset)?;
        }
        let last = self.vars.len() - 1;
        for (i, (w, b)) in self.vars.iter().enumerate() {
            let m = g.matmul(h, *w)?;
            h = g.add_row(m, *b)?;
            if i != last || self.output_tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// All core model parameters bound into one graph.
pub struct WorldModelVars {
    pub encoder: MlpVars,
    pub dynamics: MlpVars,
    pub reward: MlpVars,
    pub value: MlpVars,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyper {
    pub gamma: f64,
    pub alpha: f64,
    pub d_z: usize,
    pub action_dim: usize,
    pub discrete: bool,
}

impl Hyper {
    pub fn defaults(kind: EnvKind) -> Self {
        Hyper {
            gamma: 0.95,
            alpha: 0.3,
            d_z: 32,
            action_dim: kind.action_dim(),
            discrete: kind.discrete(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub reward: Mlp,
    pub value: Mlp,
    pub policy: Option<Mlp>,
    pub hyper: Hyper,
}

impl WorldModel {
    pub fn new(hyper: Hyper, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = hyper.d_z;
        WorldModel {
            encoder: Mlp::new(&[OBS_DIM, 128, 128, d], &mut rng)
                .with_output_tanh()
                .with_input_offset(-crate::envs::BACKGROUND),
            dynamics: Mlp::new(&[d + hyper.action_dim, 128, d], &mut rng).with_output_tanh(),
            reward: Mlp::new(&[d, 64, 1], &mut rng),
            value: Mlp::new(&[d, 64, 1], &mut rng),
            policy: None,
            hyper,
        }
    }

    pub fn encode(&self, o: &Observation) -> DiffResult<Array> {
        self.encoder.forward(&o.flat_row())
    }

    /// Batched encode of flattened observations (B×OBS_DIM).
    pub fn encode_batch(&self, flat: &Array) -> DiffResult<Array> {
        self.encoder.forward(flat)
    }

    /// One latent transition for a batch: z is B×d_z, a is B×action_dim.
    pub fn dynamics_step(&self, z: &Array, a: &Array) -> DiffResult<Array> {
        if a.shape().len() != 2 || a.shape()[1] != self.hyper.action_dim {
            return Err(DiffError::BadShape {
                op: "dynamics_step",
                expected: "B×action_dim action batch",
                got: a.shape().to_vec(),
            });
        }
        self.dynamics.forward(&z.concat_cols(a)?)
    }

    pub fn predict_reward(&self, z: &Array) -> DiffResult<Array> {
        self.reward.forward(z)
    }

    pub fn predict_value(&self, z: &Array) -> DiffResult<Array> {
        self.value.forward(z)
    }

    pub fn bind_all(&self, g: &mut Graph) -> DiffResult<WorldModelVars> {
        Ok(WorldModelVars {
            encoder: self.encoder.bind(g)?,
            dynamics: self.dynamics.bind(g)?,
            reward: self.reward.bind(g)?,
            value: self.value.bind(g)?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Array)> {
        let mut out = Vec::new();
        let push = |name: &str, mlp: &Mlp, out: &mut Vec<(String, Array)>| {
            for (i, (w, b)) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.w{i}"), w.clone()));
                out.push((format!("{name}.b{i}"), b.clone()));
            }
        };
        push("encoder", &self.encoder, &mut out);
        push("dynamics", &self.dynamics, &mut out);
        push("reward", &self.reward, &mut out);
        push("value", &self.value, &mut out);
        if let Some(p) = &self.policy {
            push("policy", p, &mut out);
        }
        out
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v: Vec<&mut Mlp> = vec![
            &mut self.encoder,
            &mut self.dynamics,
            &mut self.reward,
            &mut self.value,
        ];
        if let Some(p) = &mut self.policy {
            v.push(p);
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, a)| a.is_finite_all())
    }

    // ── checkpoint format ────────────────────────────────────────────
    // magic "TRAPWM1\0", u32 LE metadata length, JSON metadata, then all
    // parameter arrays as little-endian f64 in metadata order.

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let named = self.named_params();
        let meta = CheckpointMeta {
            version: 1,
            hyper: self.hyper.clone(),
            has_policy: self.policy.is_some(),
            arrays: named
                .iter()
                .map(|(n, a)| ArrayMeta {
                    name: n.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let meta_json = serde_json::to_vec(&meta)
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"TRAPWM1\0")?;
        f.write_all(&(meta_json.len() as u32).to_le_bytes())?;
        f.write_all(&meta_json)?;
        for (_, a) in &named {
            for v in a.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"TRAPWM1\0" {
            return Err(ModelError::BadCheckpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut meta_buf = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut meta_buf)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        let mut arrays = Vec::new();
        for am in &meta.arrays {
            let n: usize = am.shape.iter().product();
            let mut data = vec![0.0f64; n];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                f.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            arrays.push((
                am.name.clone(),
                Array::from_vec(am.shape.clone(), data)
                    .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?,
            ));
        }
        Self::from_named(meta.hyper, meta.has_policy, &arrays)
    }

    fn from_named(
        hyper: Hyper,
        has_policy: bool,
        arrays: &[(String, Array)],
    ) -> Result<Self, ModelError> {
        let mut model = WorldModel::new(hyper.clone(), 0);
        if has_policy {
            let out = if hyper.discrete { hyper.action_dim } else { hyper.action_dim };
            model.policy = Some(Mlp::zeroed(&[hyper.d_z, 64, out]));
        }
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        if names.len() != arrays.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "expected {} arrays, got {}",
                names.len(),
                arrays.len()
            )));
        }
        let mut flat: Vec<Array> = Vec::new();
        for (expected, (name, a)) in names.iter().zip(arrays) {
            if expected != name {
                return Err(ModelError::BadCheckpoint(format!(
                    "array order mismatch: expected {expected}, got {name}"
                )));
            }
            flat.push(a.clone());
        }
        let mut it = flat.into_iter();
        for mlp in model.mlps_mut() {
            for (w, b) in mlp.layers.iter_mut() {
                *w = it.next().unwrap();
                *b = it.next().unwrap();
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    hyper: Hyper,
    has_policy: bool,
    arrays: Vec<ArrayMeta>,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

// ── datasets ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RandomPolicy,
    PlannerPolicy,
}

#[derive(Debug, Clone)]
pub struct Episode {
    /// obs.len() == actions.len() + 1; transitions are contiguous.
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutDataset {
    pub episodes: Vec<Episode>,
    pub provenance: Provenance,
}

impl RolloutDataset {
    pub fn merge(mut self, other: RolloutDataset) -> RolloutDataset {
        self.episodes.extend(other.episodes);
        self
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len()).sum()
    }

    /// All observations, flattened (for proxy batches).
    pub fn all_observations(&self) -> Vec<Observation> {
        self.episodes
            .iter()
            .flat_map(|e| e.observations.iter().cloned())
            .collect()
    }
}

// ── training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// weight on the reward MSE; the reward head is the planner's main
    /// signal, and unweighted it is drowned out by the d_z-dimensional
    /// consistency term
    pub reward_weight: f64,
    pub value_weight: f64,
    /// extra dynamics-only epochs on latents cached from the final
    /// encoder; these are ~100× cheaper than full epochs (no pixel
    /// encoding) and the transition model needs far more passes than the
    /// encoder before its action conditioning becomes accurate
    pub dyn_refine_epochs: usize,
    pub dyn_refine_lr: f64,
    /// open-loop window length for the refinement regression; 1 fits
    /// single transitions. Longer windows are what make sub-pixel,
    /// partially observable dynamics (PushLine's hidden velocity)
    /// learnable: over several steps a sustained action moves the
    /// render by whole pixels even though no single step does
    pub dyn_refine_horizon: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 3e-4,
            reward_weight: 10.0,
            value_weight: 1.0,
            dyn_refine_epochs: 500,
            dyn_refine_lr: 1e-3,
            dyn_refine_horizon: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLoss {
    pub consistency: f64,
    pub reward: f64,
    pub value: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: WorldModel,
    pub losses: Vec<EpochLoss>,
    pub diverged: bool,
}

/// Per-coordinate adaptive first-order optimizer (Adam).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array], grads: &[&Array]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, gj) in g.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data_mut()[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

struct Transition {
    obs: Vec<f64>,
    action: Vec<f64>,
    reward: f64,
    next_obs: Vec<f64>,
    mc_return: f64,
}

fn flatten_transitions(dataset: &RolloutDataset, gamma: f64, action_dim: usize) -> Vec<Transition> {
    let mut out = Vec::new();
    for ep in &dataset.episodes {
        let n = ep.actions.len();
        let mut returns = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            acc = ep.rewards[t] + gamma * acc;
            returns[t] = acc;
        }
        for t in 0..n {
            out.push(Transition {
                obs: ep.observations[t].image.data().to_vec(),
                action: ep.actions[t].encode(action_dim),
                reward: ep.rewards[t],
                next_obs: ep.observations[t + 1].image.data().to_vec(),
                mc_return: returns[t],
            });
        }
    }
    out
}

fn batch_arrays(batch: &[&Transition], action_dim: usize) -> (Array, Array, Array, Array, Array) {
    let b = batch.len();
    let mut obs = Vec::with_capacity(b * OBS_DIM);
    let mut next = Vec::with_capacity(b * OBS_DIM);
    let mut act = Vec::with_capacity(b * action_dim);
    let mut rew = Vec::with_capacity(b);
    let mut ret = Vec::with_capacity(b);
    for t in batch {
        obs.extend_from_slice(&t.obs);
        next.extend_from_slice(&t.next_obs);
        act.extend_from_slice(&t.action);
        rew.push(t.reward);
        ret.push(t.mc_return);
    }
    (
        Array::from_vec(vec![b, OBS_DIM], obs).unwrap(),
        Array::from_vec(vec![b, action_dim], act).unwrap(),
        Array::from_vec(vec![b, 1], rew).unwrap(),
        Array::from_vec(vec![b, OBS_DIM], next).unwrap(),
        Array::from_vec(vec![b, 1], ret).unwrap(),
    )
}

/// Train encoder, dynamics, and heads on environment rollouts.
///
/// Loss per batch: latent consistency
/// ‖f(E(o_t),a_t) − stopgrad(E(o_{t+1}))‖² + reward MSE + value MSE against
/// Monte-Carlo discounted returns.
pub fn train_world_model(
    init: WorldModel,
    dataset: &RolloutDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if dataset.episodes.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut model = init;
    let hyper = model.hyper.clone();
    let transitions = flatten_transitions(dataset, hyper.gamma, hyper.action_dim);
    let sizes: Vec<usize> = core_param_sizes(&model);
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    let mut last_finite = model.clone();

    // Warmup-then-joint schedule: the first half of the epochs fits the
    // encoder and heads on the reward/value terms alone so the latent
    // space carries task signal before the consistency term starts
    // shaping it; the second half descends on the full objective, which
    // also pushes the encoder toward latents the dynamics can predict.
    let warmup_epochs = cfg.epochs.div_ceil(2);
    for epoch in 0..cfg.epochs {
        let phase = if epoch < warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Joint
        };
        let mut order: Vec<usize> = (0..transitions.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Transition> = chunk.iter().map(|i| &transitions[*i]).collect();
            let (obs, act, rew, next_obs, ret) = batch_arrays(&batch, hyper.action_dim);
            let step = train_step(
                &mut model, &mut adam, &obs, &act, &rew, &next_obs, &ret, cfg, phase,
            );
            match step {
                Ok((lc, lr, lv, lt)) if lt.is_finite() => {
                    sums.0 += lc;
                    sums.1 += lr;
                    sums.2 += lv;
                    sums.3 += lt;
                    batches += 1;
                    last_finite = model.clone();
                }
                _ => {
                    return Ok(TrainOutcome {
                        model: last_finite,
                        losses,
                        diverged: true,
                    });
                }
            }
            let _ = bi;
        }
        let n = batches.max(1) as f64;
        losses.push(EpochLoss {
            consistency: sums.0 / n,
            reward: sums.1 / n,
            value: sums.2 / n,
            total: sums.3 / n,
        });
    }
    if let Err(last) = refine_dynamics(&mut model, dataset, cfg, &mut rng, &mut losses) {
        return Ok(TrainOutcome {
            model: last,
            losses,
            diverged: true,
        });
    }
    Ok(TrainOutcome {
        model,
        losses,
        diverged: false,
    })
}

/// Dynamics-only refinement on latents cached from the frozen encoder.
///
/// Two details matter: (1) caching makes each epoch cheap enough to run
/// hundreds of them, which is what it takes for the transition model to
/// pick up the per-action latent displacements; (2) transitions whose
/// reward is an outlier above the dataset mean (the sparse bonus events)
/// are oversampled, because a handful of such samples per dataset
/// otherwise contributes nothing to the MSE and the planner never sees
/// the bonus coming.
fn refine_dynamics(
    model: &mut WorldModel,
    dataset: &RolloutDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    losses: &mut Vec<EpochLoss>,
) -> Result<(), WorldModel> {
    const BONUS_OVERSAMPLE: usize = 10;
    if cfg.dyn_refine_epochs == 0 || cfg.epochs == 0 {
        return Ok(());
    }
    let d_z = model.hyper.d_z;
    let ad = model.hyper.action_dim;
    let h = cfg.dyn_refine_horizon.max(1);

    // cache the latent of every observation in one batched pass per chunk
    let mut zs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(dataset.episodes.len());
    {
        let all: Vec<(usize, usize)> = dataset
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.observations.len()).map(move |t| (e, t)))
            .collect();
        for ep in &dataset.episodes {
            zs.push(vec![Vec::new(); ep.observations.len()]);
        }
        for chunk in all.chunks(256) {
            let mut flat = Vec::with_capacity(chunk.len() * OBS_DIM);
            for (e, t) in chunk {
                flat.extend_from_slice(dataset.episodes[*e].observations[*t].image.data());
            }
            let x = Array::from_vec(vec![chunk.len(), OBS_DIM], flat).unwrap();
            let z = model.encoder.forward(&x).unwrap();
            for (bi, (e, t)) in chunk.iter().enumerate() {
                zs[*e][*t] = (0..d_z).map(|j| z.at2(bi, j)).collect();
            }
        }
    }

    // oversample windows containing an outlier-high reward (sparse bonus)
    let all_rewards: Vec<f64> = dataset
        .episodes
        .iter()
        .flat_map(|ep| ep.rewards.iter().cloned())
        .collect();
    let n = all_rewards.len().max(1) as f64;
    let mean_r = all_rewards.iter().sum::<f64>() / n;
    let var_r = all_rewards.iter().map(|r| (r - mean_r) * (r - mean_r)).sum::<f64>() / n;
    let bonus_cut = mean_r + 3.0 * var_r.sqrt();

    let mut index: Vec<(usize, usize)> = Vec::new();
    for (e, ep) in dataset.episodes.iter().enumerate() {
        if ep.actions.len() < h {
            continue;
        }
        for t in 0..=ep.actions.len() - h {
            let reps = if ep.rewards[t..t + h].iter().any(|r| *r > bonus_cut) {
                BONUS_OVERSAMPLE
            } else {
                1
            };
            for _ in 0..reps {
                index.push((e, t));
            }
        }
    }
    if index.is_empty() {
        return Ok(());
    }

    let sizes: Vec<usize> = model
        .dynamics
        .layers
        .iter()
        .flat_map(|(w, b)| [w.len(), b.len()])
        .collect();
    let mut adam = Adam::new(cfg.dyn_refine_lr, &sizes);
    let mut last_finite = model.clone();
    for _ in 0..cfg.dyn_refine_epochs {
        index.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in index.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let mut g = Graph::new();
            let dynv = model.dynamics.bind(&mut g).map_err(|_| last_finite.clone())?;
            let z0: Vec<f64> = chunk.iter().flat_map(|(e, t)| zs[*e][*t].clone()).collect();
            let mut z = g
                .constant(Array::from_vec(vec![b, d_z], z0).unwrap())
                .map_err(|_| last_finite.clone())?;
            let mut acc = None;
            for step in 0..h {
                let a: Vec<f64> = chunk
                    .iter()
                    .flat_map(|(e, t)| dataset.episodes[*e].actions[*t + step].encode(ad))
                    .collect();
                let tg: Vec<f64> = chunk
                    .iter()
                    .flat_map(|(e, t)| zs[*e][*t + step + 1].clone())
                    .collect();
                let av = g
                    .constant(Array::from_vec(vec![b, ad], a).unwrap())
                    .map_err(|_| last_finite.clone())?;
                let tgt = g
                    .constant(Array::from_vec(vec![b, d_z], tg).unwrap())
                    .map_err(|_| last_finite.clone())?;
                let za = g.concat_cols(z, av).map_err(|_| last_finite.clone())?;
                z = dynv.forward(&mut g, za).map_err(|_| last_finite.clone())?;
                let diff = g.sub(z, tgt).map_err(|_| last_finite.clone())?;
                let sq = g.square(diff).map_err(|_| last_finite.clone())?;
                let s = g.sum(sq).map_err(|_| last_finite.clone())?;
                acc = Some(match acc {
                    None => s,
                    Some(prev) => g.add(prev, s).map_err(|_| last_finite.clone())?,
                });
            }
            let loss = g
                .scale(acc.unwrap(), 1.0 / (b as f64 * d_z as f64 * h as f64))
                .map_err(|_| last_finite.clone())?;
            if g.backward(loss).is_err() || !g.value(loss).item().is_finite() {
                return Err(last_finite);
            }
            let grads: Vec<Array> = dynv
                .vars
                .iter()
                .flat_map(|(w, b)| [g.adjoint(*w).clone(), g.adjoint(*b).clone()])
                .collect();
            let grad_refs: Vec<&Array> = grads.iter().collect();
            let mut params: Vec<&mut Array> = Vec::new();
            for (w, b) in model.dynamics.layers.iter_mut() {
                params.push(w);
                params.push(b);
            }
            adam.step(&mut params, &grad_refs);
            sum += g.value(loss).item();
            batches += 1;
        }
        last_finite = model.clone();
        losses.push(EpochLoss {
            consistency: sum / batches.max(1) as f64,
            reward: 0.0,
            value: 0.0,
            total: sum / batches.max(1) as f64,
        });
    }
    Ok(())
}

fn core_param_sizes(model: &WorldModel) -> Vec<usize> {
    let mut sizes = Vec::new();
    for mlp in [&model.encoder, &model.dynamics, &model.reward, &model.value] {
        for (w, b) in &mlp.layers {
            sizes.push(w.len());
            sizes.push(b.len());
        }
    }
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// encoder + reward/value heads; dynamics frozen
    Warmup,
    /// every module, full objective
    Joint,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut WorldModel,
    adam: &mut Adam,
    obs: &Array,
    act: &Array,
    rew: &Array,
    next_obs: &Array,
    ret: &Array,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<(f64, f64, f64, f64), ModelError> {
    let b = obs.shape()[0] as f64;
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g)?;
    let dynv = model.dynamics.bind(&mut g)?;
    let rewv = model.reward.bind(&mut g)?;
    let valv = model.value.bind(&mut g)?;

    let o = g.constant(obs.clone())?;
    let on = g.constant(next_obs.clone())?;
    let a = g.constant(act.clone())?;

    let zt = enc.forward(&mut g, o)?;
    let za = g.concat_cols(zt, a)?;
    let zp = dynv.forward(&mut g, za)?;
    // stopgrad target latent from the current encoder; per-dimension
    // mean so the term does not scale with d_z
    let ztar = g.constant(model.encode_batch(next_obs)?)?;
    let dcons = g.sub(zp, ztar)?;
    let dcons2 = g.square(dcons)?;
    let scons = g.sum(dcons2)?;
    let lcons = g.scale(scons, 1.0 / (b * model.hyper.d_z as f64))?;

    let zn = enc.forward(&mut g, on)?;
    let rhat = rewv.forward(&mut g, zn)?;
    let rtgt = g.constant(rew.clone())?;
    let dr = g.sub(rhat, rtgt)?;
    let dr2 = g.square(dr)?;
    let sr = g.sum(dr2)?;
    let lr0 = g.scale(sr, 1.0 / b)?;
    let lr = g.scale(lr0, cfg.reward_weight)?;

    // detached latent: Monte-Carlo return targets are noisy, and letting
    // their gradients reach the encoder washes out the reward signal
    let ztd = g.constant(model.encode_batch(obs)?)?;
    let vhat = valv.forward(&mut g, ztd)?;
    let vtgt = g.constant(ret.clone())?;
    let dv = g.sub(vhat, vtgt)?;
    let dv2 = g.square(dv)?;
    let sv = g.sum(dv2)?;
    let lv0 = g.scale(sv, 1.0 / b)?;
    let lv = g.scale(lv0, cfg.value_weight)?;

    let lcr = g.add(lcons, lr)?;
    let total = g.add(lcr, lv)?;
    // descend only on the phase's terms; `total` stays the reported loss
    let root = match phase {
        Phase::Warmup => g.add(lr, lv)?,
        Phase::Joint => total,
    };
    g.backward(root)?;

    let param_vars: Vec<Var> = [&enc, &dynv, &rewv, &valv]
        .iter()
        .flat_map(|m| m.vars.iter().flat_map(|(w, b)| [*w, *b]))
        .collect();
    // during warmup the dynamics stays frozen so it does not chase a
    // still-moving latent space
    let enc_n = 2 * enc.vars.len();
    let dyn_n = 2 * dynv.vars.len();
    let trainable = |idx: usize| match phase {
        Phase::Warmup => !(enc_n..enc_n + dyn_n).contains(&idx),
        Phase::Joint => true,
    };
    let grads: Vec<Array> = param_vars
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if trainable(i) {
                g.adjoint(*v).clone()
            } else {
                Array::zeros(g.value(*v).shape().to_vec())
            }
        })
        .collect();
    let grad_refs: Vec<&Array> = grads.iter().collect();

    let mut params: Vec<&mut Array> = Vec::new();
    for mlp in [
        &mut model.encoder,
        &mut model.dynamics,
        &mut model.reward,
        &mut model.value,
    ] {
        for (w, b) in mlp.layers.iter_mut() {
            params.push(w);
            params.push(b);
        }
    }
    adam.step(&mut params, &grad_refs);

    Ok((
        g.value(lcons).item(),
        g.value(lr).item(),
        g.value(lv).item(),
        g.value(total).item(),
    ))
}

// ── policy distillation ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 1,
        }
    }
}

/// Behavior-clone a policy head from planner-chosen actions. Cross-entropy
/// for discrete actions, MSE on the tanh-squashed mean for continuous.
pub fn distill_policy(
    model: &mut WorldModel,
    dataset: &RolloutDataset,
    cfg: &DistillConfig,
) -> Result<Vec<f64>, ModelError> {
    if dataset.episodes.is_empty() || dataset.transition_count() == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let hyper = model.hyper.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Mlp::new(&[hyper.d_z, 64, hyper.action_dim], &mut rng);

    // precompute latents with the frozen encoder
    let mut latents = Vec::new();
    let mut actions = Vec::new();
    for ep in &dataset.episodes {
        for (t, a) in ep.actions.iter().enumerate() {
            latents.push(model.encode(&ep.observations[t])?);
            actions.push(a.clone());
        }
    }

    let sizes: Vec<usize> = policy
        .layers
        .iter()
        .flat_map(|(w, b)| [w.len(), b.len()])
        .collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut curve = Vec::new();

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..latents.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut zdata = Vec::with_capacity(b * hyper.d_z);
            for i in chunk {
                zdata.extend_from_slice(latents[*i].data());
            }
            let z = Array::from_vec(vec![b, hyper.d_z], zdata).unwrap();

            let mut g = Graph::new();
            let pv = policy.bind(&mut g)?;
            let zv = g.constant(z)?;
            let out = pv.forward(&mut g, zv)?;
            let loss = if hyper.discrete {
                // mean(logsumexp(row) − logit[label]) with a constant
                // row-max shift for stability
                let vals = g.value(out).clone();
                let k = hyper.action_dim;
                let mut rowmax = Vec::with_capacity(b);
                for r in 0..b {
                    let m = (0..k).map(|c| vals.at2(r, c)).fold(f64::NEG_INFINITY, f64::max);
                    rowmax.push(m);
                }
                let shift_data: Vec<f64> = (0..b * k).map(|i| rowmax[i / k]).collect();
                let shift = g.constant(Array::from_vec(vec![b, k], shift_data)?)?;
                let zs = g.sub(out, shift)?;
                let e = g.exp(zs)?;
                let s = g.row_sum(e)?;
                let l = g.ln(s)?;
                let sl = g.sum(l)?;
                let with_max = g.add_scalar(sl, rowmax.iter().sum())?;
                let mut onehot = Array::zeros(vec![b, k]);
                for (r, i) in chunk.iter().enumerate() {
                    if let Action::Discrete(a) = &actions[*i] {
                        onehot.set2(r, *a, 1.0);
                    }
                }
                let picked = g.masked_weighted_sum(out, onehot)?;
                let diff = g.sub(with_max, picked)?;
                g.scale(diff, 1.0 / b as f64)?
            } else {
                let mean = g.tanh(out)?;
                let mut tgt = Array::zeros(vec![b, hyper.action_dim]);
                for (r, i) in chunk.iter().enumerate() {
                    if let Action::Continuous(a) = &actions[*i] {
                        tgt.set2(r, 0, *a);
                    }
                }
                let tv = g.constant(tgt)?;
                let d = g.sub(mean, tv)?;
                let d2 = g.square(d)?;
                g.mean(d2)?
            };
            g.backward(loss)?;
            let grads: Vec<Array> = pv
                .vars
                .iter()
                .flat_map(|(w, b)| [g.adjoint(*w).clone(), g.adjoint(*b).clone()])
                .collect();
            let grad_refs: Vec<&Array> = grads.iter().collect();
            let mut params: Vec<&mut Array> = policy
                .layers
                .iter_mut()
                .flat_map(|(w, b)| [w, b])
                .collect();
            adam.step(&mut params, &grad_refs);
            total += g.value(loss).item();
            batches += 1;
        }
        curve.push(total / batches.max(1) as f64);
    }
    model.policy = Some(policy);
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check;
    use crate::envs::Env;

    fn obs(seed: u64) -> Observation {
        Env::reset(EnvKind::GridGoal, seed).1
    }

    #[test]
    fn encode_is_deterministic() {
        let m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        let o = obs(5);
        let z1 = m.encode(&o).unwrap();
        let z2 = m.encode(&o).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1.shape(), &[1, 32]);
    }

    #[test]
    fn zero_encoder_outputs_bias() {
        let mut m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        m.encoder = Mlp::zeroed(&[OBS_DIM, 128, 128, 32]);
        let z1 = m.encode(&obs(1)).unwrap();
        let z2 = m.encode(&obs(2)).unwrap();
        assert_eq!(z1, z2);
        assert!(z1.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 7);
        // small synthetic encoder keeps the check fast
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let small = Mlp::new(&[6, 8, 4], &mut rng);
        let x = Array::from_vec(vec![1, 6], (0..6).map(|i| 0.1 * i as f64).collect()).unwrap();
        let err = grad_check(
            |g, x| {
                let vars = small.bind(g)?;
                let z = vars.forward(g, x)?;
                let s = g.square(z)?;
                g.sum(s)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
        let _ = m;
    }

    #[test]
    fn dynamics_rejects_wrong_action_arity() {
        let m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        let z = Array::zeros(vec![1, 32]);
        let a = Array::zeros(vec![1, 3]);
        assert!(m.dynamics_step(&z, &a).is_err());
    }

    #[test]
    fn dynamics_pure_and_zero_weight_constant() {
        let mut m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        let z = Array::from_vec(vec![1, 32], (0..32).map(|i| 0.01 * i as f64).collect()).unwrap();
        let a = Array::from_vec(vec![1, 5], vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let z1 = m.dynamics_step(&z, &a).unwrap();
        let z2 = m.dynamics_step(&z, &a).unwrap();
        assert_eq!(z1, z2);

        m.dynamics = Mlp::zeroed(&[37, 128, 32]);
        let c1 = m.dynamics_step(&z, &a).unwrap();
        let zz = Array::full(vec![1, 32], 0.5);
        let c2 = m.dynamics_step(&zz, &a).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn grad_check_through_three_step_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let enc = Mlp::new(&[6, 8, 4], &mut rng);
        let dynamics = Mlp::new(&[5, 8, 4], &mut rng);
        let rew = Mlp::new(&[4, 6, 1], &mut rng);
        let a = Array::from_vec(vec![1, 1], vec![0.3]).unwrap();
        let x = Array::from_vec(vec![1, 6], (0..6).map(|i| 0.05 * i as f64).collect()).unwrap();
        let err = grad_check(
            |g, x| {
                let ev = enc.bind(g)?;
                let dv = dynamics.bind(g)?;
                let rv = rew.bind(g)?;
                let av = g.constant(a.clone())?;
                let mut z = ev.forward(g, x)?;
                let mut total: Option<Var> = None;
                for _ in 0..3 {
                    let za = g.concat_cols(z, av)?;
                    z = dv.forward(g, za)?;
                    let r = rv.forward(g, z)?;
                    let rs = g.sum(r)?;
                    total = Some(match total {
                        None => rs,
                        Some(t) => g.add(t, rs)?,
                    });
                }
                Ok(total.unwrap())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn zero_weight_heads_output_bias() {
        let mut m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        m.reward = Mlp::zeroed(&[32, 64, 1]);
        let z = Array::full(vec![1, 32], 0.7);
        assert_eq!(m.predict_reward(&z).unwrap().item(), 0.0);
    }

    #[test]
    fn zero_epochs_returns_initialization_unchanged() {
        let m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        let before = m.named_params();
        let ds = tiny_dataset();
        let out = train_world_model(
            m,
            &ds,
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let after = out.model.named_params();
        assert_eq!(before.len(), after.len());
        for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
            assert_eq!(a, b);
        }
    }

    fn tiny_dataset() -> RolloutDataset {
        let mut episodes = Vec::new();
        for seed in 0..4 {
            let (mut env, o0) = Env::reset(EnvKind::GridGoal, seed);
            let mut observations = vec![o0];
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..8 {
                let a = Action::Discrete(rng.gen_range(0..5));
                let res = env.step(&a).unwrap();
                observations.push(res.observation);
                actions.push(a);
                rewards.push(res.reward);
                if res.done {
                    break;
                }
            }
            episodes.push(Episode {
                observations,
                actions,
                rewards,
            });
        }
        RolloutDataset {
            episodes,
            provenance: Provenance::RandomPolicy,
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            ..Default::default()
        };
        let run = || {
            let m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
            train_world_model(m, &ds, &cfg).unwrap()
        };
        let out1 = run();
        let out2 = run();
        assert!(!out1.diverged);
        assert!(out1.losses.iter().all(|l| l.total.is_finite()));
        assert!(out1.losses.last().unwrap().total < out1.losses[0].total);
        // determinism per seed
        for ((_, a), (_, b)) in out1
            .model
            .named_params()
            .iter()
            .zip(out2.model.named_params().iter())
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn distill_rejects_empty_dataset() {
        let mut m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        let ds = RolloutDataset {
            episodes: vec![],
            provenance: Provenance::PlannerPolicy,
        };
        assert!(matches!(
            distill_policy(&mut m, &ds, &DistillConfig::default()),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn distill_single_action_collapses_to_it() {
        let mut m = WorldModel::new(Hyper::defaults(EnvKind::GridGoal), 3);
        let mut ds = tiny_dataset();
        for ep in &mut ds.episodes {
            for a in &mut ep.actions {
                *a = Action::Discrete(2);
            }
        }
        distill_policy(&mut m, &ds, &DistillConfig::default()).unwrap();
        let policy = m.policy.as_ref().unwrap();
        let z = m.encode(&ds.episodes[0].observations[0]).unwrap();
        let logits = policy.forward(&z).unwrap();
        let argmax = (0..5)
            .max_by(|a, b| logits.at2(0, *a).partial_cmp(&logits.at2(0, *b)).unwrap())
            .unwrap();
        assert_eq!(argmax, 2);
    }

    #[test]
    fn distill_continuous_mean_is_within_bounds() {
        let mut m = WorldModel::new(Hyper::defaults(EnvKind::PushLine), 3);
        let (mut env, o0) = Env::reset(EnvKind::PushLine, 0);
        let mut observations = vec![o0];
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for i in 0..10 {
            let a = Action::Continuous(if i % 2 == 0 { 0.5 } else { -0.5 });
            let res = env.step(&a).unwrap();
            observations.push(res.observation);
            actions.push(a);
            rewards.push(res.reward);
        }
        let ds = RolloutDataset {
            episodes: vec![Episode {
                observations,
                actions,
                rewards,
            }],
            provenance: Provenance::PlannerPolicy,
        };
        distill_policy(&mut m, &ds, &DistillConfig::default()).unwrap();
        let z = m.encode(&ds.episodes[0].observations[0]).unwrap();
        let mean = m.policy.as_ref().unwrap().forward(&z).unwrap().tanh();
        assert!(mean.item() > -1.0 && mean.item() < 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let m = WorldModel::new(Hyper::defaults(EnvKind::PushLine), 11);
        let dir = std::env::temp_dir().join("trap_lab_wm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.trapwm");
        m.save(&path).unwrap();
        let loaded = WorldModel::load(&path).unwrap();
        for ((na, a), (nb, b)) in m.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        // magic bytes are as documented
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"TRAPWM1\0");
    }
}
