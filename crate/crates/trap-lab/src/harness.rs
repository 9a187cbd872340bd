//! Orchestration: paired episode evaluation, metrics, mechanism
//! diagnostics, sweeps, the ablation grid, persistence (CSV/JSON/SVG),
//! and the high-level entry points behind the CLI.

use crate::attack::{
    apply_patch, optimize_patch, score_pair, AttackConfig, AttackError, Objective, PatchMode,
    PatchSpec,
};
use crate::defenses::{defend, DefenseError, DefenseSpec};
use crate::derive_seed;
use crate::envs::{Action, Env, EnvError, EnvKind, Observation, DEFAULT_T};
use crate::planner::{
    act, sample_candidates, score_with_actions_mode, PlanError, PlannerConfig,
};
use crate::worldmodel::{
    train_world_model, Episode, ModelError, Provenance, RolloutDataset, TrainConfig, WorldModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Diff(#[from] crate::diffmath::DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty record list")]
    EmptyRecords,
    #[error("total clean wall-clock is zero")]
    ZeroCleanTime,
}

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    pub kind: EnvKind,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            kind: EnvKind::GridGoal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Data protocol: random-policy episodes, then planner-policy
    /// episodes collected with the once-trained model.
    pub random_episodes: usize,
    pub planner_episodes: usize,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            random_episodes: 400,
            planner_episodes: 100,
            train: TrainConfig::default(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSection {
    pub ratio: f64,
    pub epsilon: f64,
    pub mode: PatchMode,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection {
            ratio: 0.04,
            epsilon: 32.0 / 255.0,
            mode: PatchMode::Replace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// per-episode relative drop, then averaged (paired)
    PerEpisode,
    /// 100·(mean R_c − mean R_t)/|mean R_c|
    RatioOfMeans,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub episodes: usize,
    pub seed: u64,
    pub attack_seeds: usize,
    /// planner-policy episodes whose observations form the proxy set
    pub proxy_episodes: usize,
    pub probe_count: usize,
    pub drop_mode: DropMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 50,
            seed: 0,
            attack_seeds: 5,
            proxy_episodes: 10,
            probe_count: 8,
            drop_mode: DropMode::PerEpisode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub model: ModelSection,
    pub planner: PlannerConfig,
    pub attack: AttackConfig,
    pub patch: PatchSection,
    pub defense: DefenseSpec,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSection::default(),
            model: ModelSection::default(),
            planner: PlannerConfig::imagination_defaults(),
            attack: AttackConfig::default(),
            patch: PatchSection::default(),
            defense: DefenseSpec::None,
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Sensible env/planner pairing: GridGoal with the imagination
    /// planner, PushLine with CEM MPC.
    pub fn for_env(kind: EnvKind) -> Self {
        let mut cfg = ExperimentConfig {
            env: EnvSection { kind },
            ..Default::default()
        };
        match kind {
            EnvKind::GridGoal => {
                cfg.planner = PlannerConfig::imagination_defaults();
                cfg.planner.candidates = 16;
                cfg.planner.horizon = 8;
            }
            EnvKind::PushLine => {
                cfg.planner = PlannerConfig::mpc_defaults();
                cfg.planner.candidates = 16;
                cfg.planner.horizon = 15;
                cfg.planner.cem_iterations = 2;
                // One PushLine action moves the marker a fraction of a
                // pixel column, so single-transition regression cannot
                // pick up the action channel; fitting 8-step open-loop
                // rollouts makes the cumulative displacement visible.
                cfg.model.train.dyn_refine_horizon = 8;
                cfg.model.train.dyn_refine_epochs = 60;
            }
        }
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ── data collection and model preparation ────────────────────────────

/// Roll episodes in the real environment. `model` of `None` means the
/// uniform random policy; otherwise actions come from the planner.
pub fn collect_episodes(
    kind: EnvKind,
    model: Option<&WorldModel>,
    pcfg: &PlannerConfig,
    count: usize,
    master_seed: u64,
) -> Result<RolloutDataset, HarnessError> {
    let mut episodes = Vec::with_capacity(count);
    for ep in 0..count {
        let ep_seed = derive_seed(master_seed, ep as u64);
        let (mut env, mut obs) = Env::reset(kind, ep_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ep_seed, 1));
        let mut observations = vec![obs.clone()];
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for step in 0..DEFAULT_T {
            let action = match model {
                None => {
                    if kind.discrete() {
                        Action::Discrete(rng.gen_range(0..kind.action_dim()))
                    } else {
                        Action::Continuous(rng.gen_range(-1.0..=1.0))
                    }
                }
                Some(m) => {
                    act(m, pcfg, &obs, derive_seed(ep_seed, 10_000 + step as u64))?.first_action
                }
            };
            let res = env.step(&action)?;
            obs = res.observation;
            observations.push(obs.clone());
            actions.push(action);
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
    Ok(RolloutDataset {
        episodes,
        provenance: if model.is_none() {
            Provenance::RandomPolicy
        } else {
            Provenance::PlannerPolicy
        },
    })
}

/// Full data protocol: random-policy episodes, train, planner-policy
/// episodes under the trained model, retrain on the merged set.
pub fn prepare_model(cfg: &ExperimentConfig) -> Result<WorldModel, HarnessError> {
    let kind = cfg.env.kind;
    let seed = cfg.model.train.seed;
    let random = collect_episodes(
        kind,
        None,
        &cfg.planner,
        cfg.model.random_episodes,
        derive_seed(seed, 100),
    )?;
    let init = WorldModel::new(crate::worldmodel::Hyper::defaults(kind), cfg.model.init_seed);
    let first = train_world_model(init, &random, &cfg.model.train)?;
    let planner_data = collect_episodes(
        kind,
        Some(&first.model),
        &cfg.planner,
        cfg.model.planner_episodes,
        derive_seed(seed, 200),
    )?;
    let merged = random.merge(planner_data);
    let second_cfg = TrainConfig {
        seed: derive_seed(seed, 300),
        ..cfg.model.train.clone()
    };
    let second = train_world_model(first.model, &merged, &second_cfg)?;
    Ok(second.model)
}

/// Proxy observations: planner-policy episodes under the victim model.
pub fn collect_proxy_observations(
    kind: EnvKind,
    model: &WorldModel,
    pcfg: &PlannerConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Observation>, HarnessError> {
    let data = collect_episodes(kind, Some(model), pcfg, episodes, seed)?;
    Ok(data.all_observations())
}

// ── paired evaluation ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub clean_return: f64,
    pub triggered_return: f64,
    pub clean_len: usize,
    pub triggered_len: usize,
    pub clean_secs: f64,
    pub triggered_secs: f64,
    /// hash over action/reward bit patterns, for exact-trajectory checks
    pub clean_trace: u64,
    pub triggered_trace: u64,
}

struct EpisodeOutcome {
    ret: f64,
    len: usize,
    secs: f64,
    trace: u64,
}

fn run_episode(
    kind: EnvKind,
    model: &WorldModel,
    pcfg: &PlannerConfig,
    patch: Option<&PatchSpec>,
    defense: &DefenseSpec,
    env_seed: u64,
) -> Result<EpisodeOutcome, HarnessError> {
    let start = std::time::Instant::now();
    let (mut env, mut obs) = Env::reset(kind, env_seed);
    let mut ret = 0.0;
    let mut len = 0;
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    for step in 0..DEFAULT_T {
        let mut seen = obs.clone();
        if let Some(p) = patch {
            seen = apply_patch(&seen, p);
        }
        let seen = defend(&seen, defense)?;
        let plan = act(model, pcfg, &seen, derive_seed(env_seed, 10_000 + step as u64))?;
        let res = env.step(&plan.first_action)?;
        for v in plan.first_action.encode(model.hyper.action_dim) {
            v.to_bits().hash(&mut hasher);
        }
        res.reward.to_bits().hash(&mut hasher);
        ret += res.reward;
        len += 1;
        obs = res.observation;
        if res.done {
            break;
        }
    }
    Ok(EpisodeOutcome {
        ret,
        len,
        secs: start.elapsed().as_secs_f64(),
        trace: hasher.finish(),
    })
}

/// For each of E derived seeds, run one clean and one triggered episode
/// on the same environment seed. The trigger is stamped on every frame
/// of the triggered episode; the defense is applied in both conditions.
pub fn run_paired_episodes(
    kind: EnvKind,
    model: &WorldModel,
    pcfg: &PlannerConfig,
    patch: &PatchSpec,
    defense: &DefenseSpec,
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let mut records = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let env_seed = derive_seed(master_seed, 500_000 + ep as u64);
        let clean = run_episode(kind, model, pcfg, None, defense, env_seed)?;
        let trig = run_episode(kind, model, pcfg, Some(patch), defense, env_seed)?;
        records.push(EpisodeRecord {
            seed: env_seed,
            clean_return: clean.ret,
            triggered_return: trig.ret,
            clean_len: clean.len,
            triggered_len: trig.len,
            clean_secs: clean.secs,
            triggered_secs: trig.secs,
            clean_trace: clean.trace,
            triggered_trace: trig.trace,
        });
    }
    Ok(records)
}

// ── metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DropResult {
    pub percent: f64,
    /// episodes whose |R_c| fell below the 1e-8 denominator clamp
    pub clamped_episodes: usize,
}

/// Mean relative return drop in percent. Per-episode:
/// mean over episodes of 100·(R_c − R_t)/max(|R_c|, 1e-8).
pub fn mean_return_drop(
    records: &[EpisodeRecord],
    mode: DropMode,
) -> Result<DropResult, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    match mode {
        DropMode::PerEpisode => {
            let mut clamped = 0;
            let sum: f64 = records
                .iter()
                .map(|r| {
                    let denom = r.clean_return.abs();
                    let denom = if denom < 1e-8 {
                        clamped += 1;
                        1e-8
                    } else {
                        denom
                    };
                    100.0 * (r.clean_return - r.triggered_return) / denom
                })
                .sum();
            Ok(DropResult {
                percent: sum / records.len() as f64,
                clamped_episodes: clamped,
            })
        }
        DropMode::RatioOfMeans => {
            let n = records.len() as f64;
            let mc: f64 = records.iter().map(|r| r.clean_return).sum::<f64>() / n;
            let mt: f64 = records.iter().map(|r| r.triggered_return).sum::<f64>() / n;
            let denom = mc.abs();
            let clamped = usize::from(denom < 1e-8);
            Ok(DropResult {
                percent: 100.0 * (mc - mt) / denom.max(1e-8),
                clamped_episodes: clamped,
            })
        }
    }
}

/// 100·|{R_t < R_c}|/E, strict inequality — ties count as failure.
pub fn attack_success_rate(records: &[EpisodeRecord]) -> Result<f64, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let wins = records
        .iter()
        .filter(|r| r.triggered_return < r.clean_return)
        .count();
    Ok(100.0 * wins as f64 / records.len() as f64)
}

/// Total triggered wall-clock over total clean wall-clock. Raw ratio —
/// early-terminating triggered episodes legitimately push it below 1.
pub fn runtime_overhead(records: &[EpisodeRecord]) -> Result<f64, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let clean: f64 = records.iter().map(|r| r.clean_secs).sum();
    let trig: f64 = records.iter().map(|r| r.triggered_secs).sum();
    if clean <= 0.0 {
        return Err(HarnessError::ZeroCleanTime);
    }
    Ok(trig / clean)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_return_drop: f64,
    pub drop_std: f64,
    pub attack_success_rate: f64,
    pub runtime_overhead: f64,
    pub episodes: usize,
    pub clamped_episodes: usize,
    pub drop_mode: DropMode,
}

pub fn metrics_report(
    records: &[EpisodeRecord],
    mode: DropMode,
) -> Result<MetricsReport, HarnessError> {
    let drop = mean_return_drop(records, mode)?;
    let asr = attack_success_rate(records)?;
    let overhead = runtime_overhead(records)?;
    // std of the per-episode drops regardless of the aggregation mode
    let per: Vec<f64> = records
        .iter()
        .map(|r| 100.0 * (r.clean_return - r.triggered_return) / r.clean_return.abs().max(1e-8))
        .collect();
    let m = per.iter().sum::<f64>() / per.len() as f64;
    let var = per.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / per.len() as f64;
    Ok(MetricsReport {
        mean_return_drop: drop.percent,
        drop_std: var.sqrt(),
        attack_success_rate: asr,
        runtime_overhead: overhead,
        episodes: records.len(),
        clamped_episodes: drop.clamped_episodes,
        drop_mode: mode,
    })
}

// ── mechanism diagnostics ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceCurve {
    /// mean ‖z_k^clean − z_k^trig‖₂ for k = 1..K
    pub values: Vec<f64>,
}

/// Roll clean and triggered latents forward with identical candidate
/// action sequences and report the mean per-step L2 divergence.
pub fn latent_divergence(
    model: &WorldModel,
    pcfg: &PlannerConfig,
    probe_obs: &[Observation],
    patch: &PatchSpec,
    k: usize,
    seed: u64,
) -> Result<DivergenceCurve, HarnessError> {
    let pcfg = PlannerConfig {
        horizon: k,
        ..pcfg.clone()
    };
    let mut acc = vec![0.0; k];
    let mut n = 0usize;
    for (pi, obs) in probe_obs.iter().enumerate() {
        let z0c = model.encode(obs)?;
        let z0t = model.encode(&apply_patch(obs, patch))?;
        let actions = sample_candidates(model, &z0c, &pcfg, derive_seed(seed, pi as u64))?;
        let (_, lc) = score_with_actions_mode(model, &z0c, &actions, pcfg.score_mode)?;
        let (_, lt) = score_with_actions_mode(model, &z0t, &actions, pcfg.score_mode)?;
        let b = lc[0].shape()[0];
        for ki in 1..=k {
            let diff = lc[ki].sub(&lt[ki])?;
            let d_z = diff.shape()[1];
            let mut total = 0.0;
            for bi in 0..b {
                let mut sq = 0.0;
                for j in 0..d_z {
                    let v = diff.at2(bi, j);
                    sq += v * v;
                }
                total += sq.sqrt();
            }
            acc[ki - 1] += total / b as f64;
        }
        n += 1;
    }
    for v in acc.iter_mut() {
        *v /= n.max(1) as f64;
    }
    Ok(DivergenceCurve { values: acc })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankTransition {
    /// counts[i][j]: candidates in clean rank-bin i landing in
    /// triggered rank-bin j (bins are rank deciles for D=10)
    pub counts: Vec<Vec<u64>>,
    pub off_diagonal_mass: f64,
}

fn ranks_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|x, y| values[*y].partial_cmp(&values[*x]).unwrap().then(x.cmp(y)));
    let mut rank = vec![0; values.len()];
    for (r, i) in order.iter().enumerate() {
        rank[*i] = r;
    }
    rank
}

/// Clean-to-triggered rank transition matrix over shared candidate
/// actions, accumulated across probe states.
pub fn rank_transition(
    model: &WorldModel,
    pcfg: &PlannerConfig,
    probe_obs: &[Observation],
    patch: &PatchSpec,
    d: usize,
    seed: u64,
) -> Result<RankTransition, HarnessError> {
    let mut counts = vec![vec![0u64; d]; d];
    for (pi, obs) in probe_obs.iter().enumerate() {
        let (clean, trig, _) = score_pair(model, pcfg, obs, patch, derive_seed(seed, pi as u64))?;
        let b = clean.b();
        assert!(b >= d, "need at least {d} candidates, have {b}");
        let rc = ranks_desc(&clean.final_scores());
        let rt = ranks_desc(&trig.final_scores());
        for bi in 0..b {
            let ci = rc[bi] * d / b;
            let ti = rt[bi] * d / b;
            counts[ci][ti] += 1;
        }
    }
    let total: u64 = counts.iter().flatten().sum();
    let diag: u64 = (0..d).map(|i| counts[i][i]).sum();
    Ok(RankTransition {
        counts,
        off_diagonal_mass: if total == 0 {
            0.0
        } else {
            (total - diag) as f64 / total as f64
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<u64>,
    /// per-rank mean normalized score share (sorted descending, sums to 1)
    pub share: Vec<f64>,
}

/// Histogram of final scores over probes × candidates, plus the averaged
/// min-shifted, sum-normalized sorted score share per rank.
pub fn score_distribution(
    model: &WorldModel,
    pcfg: &PlannerConfig,
    probe_obs: &[Observation],
    seed: u64,
    bins: usize,
) -> Result<ScoreDistribution, HarnessError> {
    assert!(!probe_obs.is_empty());
    let mut all_finals: Vec<f64> = Vec::new();
    let mut share_acc: Option<Vec<f64>> = None;
    for (pi, obs) in probe_obs.iter().enumerate() {
        let z0 = model.encode(obs)?;
        let actions = sample_candidates(model, &z0, pcfg, derive_seed(seed, pi as u64))?;
        let (grid, _) = score_with_actions_mode(model, &z0, &actions, pcfg.score_mode)?;
        let mut finals = grid.final_scores();
        all_finals.extend(finals.iter().cloned());
        finals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let min = *finals.last().unwrap();
        let shifted: Vec<f64> = finals.iter().map(|v| v - min).collect();
        let sum: f64 = shifted.iter().sum();
        let b = shifted.len() as f64;
        let normalized: Vec<f64> = if sum > 0.0 {
            shifted.iter().map(|v| v / sum).collect()
        } else {
            // degenerate all-equal grid: uniform share
            shifted.iter().map(|_| 1.0 / b).collect()
        };
        match share_acc {
            None => share_acc = Some(normalized),
            Some(ref mut acc) => {
                for (a, v) in acc.iter_mut().zip(&normalized) {
                    *a += v;
                }
            }
        }
    }
    let n = probe_obs.len() as f64;
    let mut share = share_acc.unwrap();
    for v in share.iter_mut() {
        *v /= n;
    }
    let lo = all_finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all_finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut counts = vec![0u64; bins];
    for v in &all_finals {
        let idx = (((v - lo) / span) * bins as f64) as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let edges: Vec<f64> = (0..=bins).map(|i| lo + span * i as f64 / bins as f64).collect();
    Ok(ScoreDistribution {
        histogram_edges: edges,
        histogram_counts: counts,
        share,
    })
}

// ── sweeps and ablation ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PatchRatio,
    Epsilon,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "patch_ratio" => Some(SweepAxis::PatchRatio),
            "epsilon" => Some(SweepAxis::Epsilon),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_drop: f64,
    pub asr: f64,
    pub seeds: usize,
    /// per-seed drops (sign tests need these)
    pub per_seed_drop: Vec<f64>,
}

/// Optimize a fresh patch per attack seed and evaluate it on paired
/// episodes; report metrics averaged over attack seeds.
pub fn evaluate_attack_variant(
    cfg: &ExperimentConfig,
    model: &WorldModel,
    proxy: &[Observation],
    attack: &AttackConfig,
    patch_section: &PatchSection,
) -> Result<SweepRow, HarnessError> {
    let mut drops = Vec::new();
    let mut asrs = Vec::new();
    for si in 0..cfg.eval.attack_seeds.max(1) {
        let attack_seed = derive_seed(cfg.eval.seed, 900 + si as u64);
        let init = PatchSpec::from_ratio(
            patch_section.ratio,
            patch_section.epsilon,
            patch_section.mode,
        )?
        .with_random_init(derive_seed(attack_seed, 1), 0.05);
        let report = optimize_patch(model, &cfg.planner, proxy, init, attack, attack_seed)?;
        let records = run_paired_episodes(
            cfg.env.kind,
            model,
            &cfg.planner,
            &report.patch,
            &cfg.defense,
            cfg.eval.episodes,
            derive_seed(cfg.eval.seed, 7_700 + si as u64),
        )?;
        drops.push(mean_return_drop(&records, cfg.eval.drop_mode)?.percent);
        asrs.push(attack_success_rate(&records)?);
    }
    let n = drops.len() as f64;
    Ok(SweepRow {
        value: 0.0,
        mean_drop: drops.iter().sum::<f64>() / n,
        asr: asrs.iter().sum::<f64>() / n,
        seeds: drops.len(),
        per_seed_drop: drops,
    })
}

/// Re-optimize and evaluate the patch at each axis value.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    model: &WorldModel,
    proxy: &[Observation],
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>, HarnessError> {
    assert!(!values.is_empty());
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let section = match axis {
            SweepAxis::PatchRatio => PatchSection {
                ratio: *v,
                ..cfg.patch.clone()
            },
            SweepAxis::Epsilon => PatchSection {
                epsilon: *v,
                ..cfg.patch.clone()
            },
        };
        let mut row = evaluate_attack_variant(cfg, model, proxy, &cfg.attack, &section)?;
        row.value = *v;
        rows.push(row);
    }
    Ok(rows)
}

pub const ABLATION_VARIANTS: [&str; 7] = [
    "full",
    "no_mag",
    "no_sign",
    "no_both_gates",
    "no_tail",
    "return_drop",
    "random",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_drop: f64,
    pub asr: f64,
    pub per_seed_drop: Vec<f64>,
}

fn ablation_attack(base: &AttackConfig, variant: &str) -> AttackConfig {
    let mut a = base.clone();
    match variant {
        "full" => {}
        "no_mag" => a.disable_mag = true,
        "no_sign" => a.disable_sign = true,
        "no_both_gates" => {
            a.disable_sign = true;
            a.disable_mag = true;
        }
        // gates and regularizers only
        "no_tail" => a.disable_tail = true,
        "return_drop" => a.objective = Objective::ReturnDrop,
        "random" => a.objective = Objective::Random,
        other => panic!("unknown ablation variant {other}"),
    }
    a
}

/// Component ablation at ε = 32/255 over the seven standard variants.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    model: &WorldModel,
    proxy: &[Observation],
) -> Result<Vec<AblationRow>, HarnessError> {
    let section = PatchSection {
        epsilon: 32.0 / 255.0,
        ..cfg.patch.clone()
    };
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for variant in ABLATION_VARIANTS {
        let attack = ablation_attack(&cfg.attack, variant);
        let row = evaluate_attack_variant(cfg, model, proxy, &attack, &section)?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            mean_drop: row.mean_drop,
            asr: row.asr,
            per_seed_drop: row.per_seed_drop,
        });
    }
    Ok(rows)
}

// ── persistence: CSV, JSON, SVG ──────────────────────────────────────

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Minimal SVG line plot: one polyline per series over a shared x axis.
pub fn svg_line_plot(
    path: &Path,
    title: &str,
    xs: &[f64],
    series: &[(&str, &[f64])],
) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (_, ys) in series {
        for v in *ys {
            y_lo = y_lo.min(*v);
            y_hi = y_hi.max(*v);
        }
    }
    let xs_span = (x_hi - x_lo).max(1e-12);
    let ys_span = (y_hi - y_lo).max(1e-12);
    let px = |x: f64| pad + (x - x_lo) / xs_span * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y_lo) / ys_span * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        w / 2.0
    );
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    ));
    for (si, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(*ys)
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let color = colors[si % colors.len()];
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            pts.join(" "),
            w - pad + 4.0,
            pad + 16.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Grayscale heatmap of a nonnegative matrix (rank-transition display).
pub fn svg_heatmap(path: &Path, title: &str, matrix: &[Vec<u64>]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let d = matrix.len();
    let cell = 32.0;
    let pad = 40.0;
    let size = pad * 2.0 + cell * d as f64;
    let max = matrix.iter().flatten().cloned().max().unwrap_or(1).max(1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n\
         <rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        size / 2.0
    );
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let level = (255.0 * (1.0 - *v as f64 / max)).round() as u8;
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({level},{level},{level})\" stroke=\"#ccc\"/>\n",
                pad + cell * j as f64,
                pad + cell * i as f64
            ));
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

// ── CLI entry points ─────────────────────────────────────────────────

pub fn model_path(out_dir: &Path) -> std::path::PathBuf {
    out_dir.join("model.trapwm")
}

pub fn patch_path(out_dir: &Path) -> std::path::PathBuf {
    out_dir.join("patch.trappt")
}

fn load_model(out_dir: &Path) -> Result<WorldModel, HarnessError> {
    let path = model_path(out_dir);
    if !path.exists() {
        return Err(HarnessError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing checkpoint {}", path.display()),
        )));
    }
    Ok(WorldModel::load(&path)?)
}

fn load_patch(out_dir: &Path) -> Result<PatchSpec, HarnessError> {
    let path = patch_path(out_dir);
    if !path.exists() {
        return Err(HarnessError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing patch {}", path.display()),
        )));
    }
    Ok(PatchSpec::load(&path)?.0)
}

fn proxy_for(
    cfg: &ExperimentConfig,
    model: &WorldModel,
) -> Result<Vec<Observation>, HarnessError> {
    collect_proxy_observations(
        cfg.env.kind,
        model,
        &cfg.planner,
        cfg.eval.proxy_episodes,
        derive_seed(cfg.eval.seed, 40),
    )
}

fn probes_for(
    cfg: &ExperimentConfig,
    proxy: &[Observation],
) -> Vec<Observation> {
    let stride = (proxy.len() / cfg.eval.probe_count.max(1)).max(1);
    proxy.iter().step_by(stride).take(cfg.eval.probe_count).cloned().collect()
}

pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let model = prepare_model(cfg)?;
    model.save(&model_path(out_dir))?;
    Ok(())
}

pub fn cmd_optimize_patch(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), HarnessError> {
    let model = load_model(out_dir)?;
    let proxy = proxy_for(cfg, &model)?;
    let init = PatchSpec::from_ratio(cfg.patch.ratio, cfg.patch.epsilon, cfg.patch.mode)?
        .with_random_init(derive_seed(cfg.eval.seed, 2), 0.05);
    let report = optimize_patch(
        &model,
        &cfg.planner,
        &proxy,
        init,
        &cfg.attack,
        derive_seed(cfg.eval.seed, 3),
    )?;
    report.patch.save(&patch_path(out_dir), &cfg.attack.config_hash())?;
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                format!("{:.6e}", s.total),
                format!("{:.6e}", s.tail),
                format!("{:.6e}", s.sign),
                format!("{:.6e}", s.mag),
                format!("{:.6e}", s.tv),
                format!("{:.6e}", s.l2),
                format!("{:.6e}", s.mean_masked_dj),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("attack_history.csv"),
        &["step", "total", "tail", "sign", "mag", "tv", "l2", "mean_masked_dj"],
        &rows,
    )?;
    Ok(())
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), HarnessError> {
    let model = load_model(out_dir)?;
    let patch = load_patch(out_dir)?;
    let records = run_paired_episodes(
        cfg.env.kind,
        &model,
        &cfg.planner,
        &patch,
        &cfg.defense,
        cfg.eval.episodes,
        cfg.eval.seed,
    )?;
    let report = metrics_report(&records, cfg.eval.drop_mode)?;
    write_json(&out_dir.join("metrics.json"), &report)?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                format!("{:.6}", r.clean_return),
                format!("{:.6}", r.triggered_return),
                r.clean_len.to_string(),
                r.triggered_len.to_string(),
                format!("{:.6}", r.clean_secs),
                format!("{:.6}", r.triggered_secs),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("episodes.csv"),
        &[
            "seed",
            "clean_return",
            "triggered_return",
            "clean_len",
            "triggered_len",
            "clean_secs",
            "triggered_secs",
        ],
        &rows,
    )?;
    Ok(())
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    axis: SweepAxis,
    values: &[f64],
) -> Result<(), HarnessError> {
    let model = load_model(out_dir)?;
    let proxy = proxy_for(cfg, &model)?;
    let rows = run_sweep(cfg, &model, &proxy, axis, values)?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:.6}", r.value),
                format!("{:.4}", r.mean_drop),
                format!("{:.4}", r.asr),
                r.seeds.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("sweep.csv"),
        &["value", "mean_drop", "asr", "seeds"],
        &csv,
    )?;
    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let drops: Vec<f64> = rows.iter().map(|r| r.mean_drop).collect();
    let asrs: Vec<f64> = rows.iter().map(|r| r.asr).collect();
    svg_line_plot(
        &out_dir.join("plots/sweep.svg"),
        "budget sweep",
        &xs,
        &[("mean drop %", &drops), ("ASR %", &asrs)],
    )?;
    Ok(())
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), HarnessError> {
    let model = load_model(out_dir)?;
    let proxy = proxy_for(cfg, &model)?;
    let rows = run_ablation(cfg, &model, &proxy)?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                format!("{:.4}", r.mean_drop),
                format!("{:.4}", r.asr),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("ablation.csv"),
        &["variant", "mean_drop", "asr"],
        &csv,
    )?;
    Ok(())
}

pub fn cmd_diagnose(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), HarnessError> {
    let model = load_model(out_dir)?;
    let patch = load_patch(out_dir)?;
    let proxy = proxy_for(cfg, &model)?;
    let probes = probes_for(cfg, &proxy);

    let curve = latent_divergence(
        &model,
        &cfg.planner,
        &probes,
        &patch,
        cfg.planner.horizon,
        derive_seed(cfg.eval.seed, 60),
    )?;
    let rows: Vec<Vec<String>> = curve
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| vec![(k + 1).to_string(), format!("{:.6e}", v)])
        .collect();
    write_csv(&out_dir.join("divergence.csv"), &["k", "divergence"], &rows)?;
    let ks: Vec<f64> = (1..=curve.values.len()).map(|k| k as f64).collect();
    svg_line_plot(
        &out_dir.join("plots/divergence.svg"),
        "latent divergence",
        &ks,
        &[("||z_clean - z_trig||", &curve.values)],
    )?;

    let trans = rank_transition(
        &model,
        &cfg.planner,
        &probes,
        &patch,
        10,
        derive_seed(cfg.eval.seed, 61),
    )?;
    let rows: Vec<Vec<String>> = trans
        .counts
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(move |(j, c)| vec![i.to_string(), j.to_string(), c.to_string()])
                .collect::<Vec<_>>()
        })
        .collect();
    write_csv(
        &out_dir.join("rank_transition.csv"),
        &["clean_bin", "triggered_bin", "count"],
        &rows,
    )?;
    svg_heatmap(
        &out_dir.join("plots/rank_transition.svg"),
        "rank transition",
        &trans.counts,
    )?;

    let dist = score_distribution(
        &model,
        &cfg.planner,
        &probes,
        derive_seed(cfg.eval.seed, 62),
        20,
    )?;
    let rows: Vec<Vec<String>> = dist
        .share
        .iter()
        .enumerate()
        .map(|(r, s)| vec![(r + 1).to_string(), format!("{:.6e}", s)])
        .collect();
    write_csv(&out_dir.join("score_share.csv"), &["rank", "share"], &rows)?;
    let ranks: Vec<f64> = (1..=dist.share.len()).map(|r| r as f64).collect();
    svg_line_plot(
        &out_dir.join("plots/score_share.svg"),
        "normalized score share",
        &ranks,
        &[("share", &dist.share)],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rc: f64, rt: f64) -> EpisodeRecord {
        EpisodeRecord {
            seed: 0,
            clean_return: rc,
            triggered_return: rt,
            clean_len: 10,
            triggered_len: 10,
            clean_secs: 1.0,
            triggered_secs: 1.0,
            clean_trace: 0,
            triggered_trace: 0,
        }
    }

    fn tiny_cfg(kind: EnvKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_env(kind);
        cfg.planner.candidates = 8;
        cfg.planner.horizon = 3;
        cfg.planner.cem_iterations = 2;
        cfg.eval.episodes = 2;
        cfg.eval.proxy_episodes = 1;
        cfg.eval.probe_count = 2;
        cfg
    }

    fn random_model(kind: EnvKind) -> WorldModel {
        WorldModel::new(crate::worldmodel::Hyper::defaults(kind), 1)
    }

    #[test]
    fn drop_hand_examples() {
        let r = mean_return_drop(&[rec(100.0, 75.0)], DropMode::PerEpisode).unwrap();
        assert!((r.percent - 25.0).abs() < 1e-12);
        let r = mean_return_drop(&[rec(5.0, 5.0)], DropMode::PerEpisode).unwrap();
        assert_eq!(r.percent, 0.0);
    }

    #[test]
    fn drop_reproduces_pong_arithmetic() {
        // mean clean 20.31, mean triggered −13.09 → drop about 164.5%
        let r = mean_return_drop(&[rec(20.31, -13.09)], DropMode::PerEpisode).unwrap();
        assert!((r.percent - 164.5).abs() < 0.1, "{}", r.percent);
        let r2 = mean_return_drop(&[rec(20.31, -13.09)], DropMode::RatioOfMeans).unwrap();
        assert!((r2.percent - 164.5).abs() < 0.1);
    }

    #[test]
    fn drop_denominator_clamp_flags_episode() {
        let r = mean_return_drop(&[rec(0.0, -1.0)], DropMode::PerEpisode).unwrap();
        assert_eq!(r.clamped_episodes, 1);
        assert!(r.percent > 0.0);
    }

    #[test]
    fn asr_strict_inequality() {
        let recs = vec![rec(1.0, 0.5), rec(1.0, 1.0), rec(1.0, 2.0), rec(1.0, 0.9)];
        assert_eq!(attack_success_rate(&recs).unwrap(), 50.0);
        let ties = vec![rec(1.0, 1.0); 3];
        assert_eq!(attack_success_rate(&ties).unwrap(), 0.0);
        let all = vec![rec(1.0, 0.0); 3];
        assert_eq!(attack_success_rate(&all).unwrap(), 100.0);
        let three_of_four = vec![rec(1.0, 0.0), rec(1.0, 0.1), rec(1.0, 0.2), rec(1.0, 1.5)];
        assert_eq!(attack_success_rate(&three_of_four).unwrap(), 75.0);
    }

    #[test]
    fn empty_records_rejected() {
        assert!(mean_return_drop(&[], DropMode::PerEpisode).is_err());
        assert!(attack_success_rate(&[]).is_err());
        assert!(runtime_overhead(&[]).is_err());
    }

    #[test]
    fn overhead_examples() {
        assert_eq!(runtime_overhead(&[rec(1.0, 0.5)]).unwrap(), 1.0);
        let mut r = rec(1.0, 0.5);
        r.triggered_secs = 1.2;
        assert!((runtime_overhead(&[r]).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn metrics_order_independent() {
        let mut recs = vec![rec(10.0, 4.0), rec(8.0, 9.0), rec(5.0, 1.0), rec(3.0, 3.0)];
        let a = metrics_report(&recs, DropMode::PerEpisode).unwrap();
        recs.reverse();
        let b = metrics_report(&recs, DropMode::PerEpisode).unwrap();
        assert_eq!(a.mean_return_drop.to_bits(), b.mean_return_drop.to_bits());
        assert_eq!(a.attack_success_rate, b.attack_success_rate);
        assert_eq!(a.runtime_overhead.to_bits(), b.runtime_overhead.to_bits());
    }

    #[test]
    fn zero_mask_pairing_is_exact() {
        let cfg = tiny_cfg(EnvKind::GridGoal);
        let model = random_model(EnvKind::GridGoal);
        let records = run_paired_episodes(
            cfg.env.kind,
            &model,
            &cfg.planner,
            &PatchSpec::zero_mask(),
            &DefenseSpec::None,
            2,
            7,
        )
        .unwrap();
        for r in &records {
            assert_eq!(r.clean_return.to_bits(), r.triggered_return.to_bits());
            assert_eq!(r.clean_trace, r.triggered_trace);
            assert_eq!(r.clean_len, r.triggered_len);
        }
        let drop = mean_return_drop(&records, DropMode::PerEpisode).unwrap();
        assert_eq!(drop.percent, 0.0);
        assert_eq!(attack_success_rate(&records).unwrap(), 0.0);
    }

    #[test]
    fn paired_episodes_deterministic() {
        let cfg = tiny_cfg(EnvKind::PushLine);
        let model = random_model(EnvKind::PushLine);
        let patch = PatchSpec::from_ratio(0.04, 0.2, PatchMode::Replace)
            .unwrap()
            .with_random_init(3, 1.0);
        let a = run_paired_episodes(
            cfg.env.kind,
            &model,
            &cfg.planner,
            &patch,
            &DefenseSpec::None,
            2,
            11,
        )
        .unwrap();
        let b = run_paired_episodes(
            cfg.env.kind,
            &model,
            &cfg.planner,
            &patch,
            &DefenseSpec::None,
            2,
            11,
        )
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clean_return.to_bits(), y.clean_return.to_bits());
            assert_eq!(x.triggered_return.to_bits(), y.triggered_return.to_bits());
            assert_eq!(x.clean_trace, y.clean_trace);
            assert_eq!(x.triggered_trace, y.triggered_trace);
        }
    }

    #[test]
    fn zero_mask_divergence_and_transition_trivial() {
        let cfg = tiny_cfg(EnvKind::GridGoal);
        let model = random_model(EnvKind::GridGoal);
        let probes: Vec<Observation> = (0..3).map(|s| Env::reset(EnvKind::GridGoal, s).1).collect();
        let curve = latent_divergence(
            &model,
            &cfg.planner,
            &probes,
            &PatchSpec::zero_mask(),
            4,
            5,
        )
        .unwrap();
        assert_eq!(curve.values.len(), 4);
        assert!(curve.values.iter().all(|v| *v == 0.0));

        let trans = rank_transition(
            &model,
            &cfg.planner,
            &probes,
            &PatchSpec::zero_mask(),
            4,
            5,
        )
        .unwrap();
        assert_eq!(trans.off_diagonal_mass, 0.0);
        // row sums: B/D candidates per bin per probe
        let b = cfg.planner.candidates;
        for row in &trans.counts {
            let sum: u64 = row.iter().sum();
            assert_eq!(sum as usize, b / 4 * probes.len());
        }
    }

    #[test]
    fn divergence_positive_for_real_patch() {
        let cfg = tiny_cfg(EnvKind::GridGoal);
        let model = random_model(EnvKind::GridGoal);
        let probes: Vec<Observation> = (0..2).map(|s| Env::reset(EnvKind::GridGoal, s).1).collect();
        let patch = PatchSpec::from_ratio(0.09, 0.25, PatchMode::Replace)
            .unwrap()
            .with_random_init(2, 1.0);
        let curve = latent_divergence(&model, &cfg.planner, &probes, &patch, 4, 5).unwrap();
        assert!(curve.values[0] > 0.0);
    }

    #[test]
    fn score_share_sums_to_one_and_monotone() {
        let cfg = tiny_cfg(EnvKind::GridGoal);
        let model = random_model(EnvKind::GridGoal);
        let probes: Vec<Observation> = (0..3).map(|s| Env::reset(EnvKind::GridGoal, s).1).collect();
        let dist = score_distribution(&model, &cfg.planner, &probes, 3, 10).unwrap();
        let sum: f64 = dist.share.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for w in dist.share.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        let total: u64 = dist.histogram_counts.iter().sum();
        assert_eq!(total as usize, probes.len() * cfg.planner.candidates);
    }

    #[test]
    fn ablation_variant_set() {
        assert_eq!(ABLATION_VARIANTS.len(), 7);
        assert_eq!(
            ABLATION_VARIANTS.iter().filter(|v| **v == "full").count(),
            1
        );
        let base = AttackConfig::default();
        let nb = ablation_attack(&base, "no_both_gates");
        assert!(nb.disable_sign && nb.disable_mag && !nb.disable_tail);
        let nt = ablation_attack(&base, "no_tail");
        assert!(nt.disable_tail && !nt.disable_sign);
        let rd = ablation_attack(&base, "return_drop");
        assert_eq!(rd.objective, Objective::ReturnDrop);
    }

    #[test]
    fn csv_and_svg_written() {
        let dir = std::env::temp_dir().join("trap_lab_harness_io");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("t.csv");
        write_csv(
            &csv,
            &["a", "b"],
            &[vec!["1".into(), "2".into()], vec!["3".into(), "4".into()]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text, "a,b\n1,2\n3,4\n");

        let svg = dir.join("t.svg");
        svg_line_plot(&svg, "t", &[0.0, 1.0, 2.0], &[("y", &[1.0, 4.0, 9.0])]).unwrap();
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));

        let hm = dir.join("h.svg");
        svg_heatmap(&hm, "h", &[vec![3, 0], vec![1, 2]]).unwrap();
        assert!(std::fs::read_to_string(&hm).unwrap().contains("rect"));
    }

    #[test]
    fn config_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.eval.episodes, 50);
        assert_eq!(back.model.random_episodes, 200);
        assert!((back.patch.ratio - 0.09).abs() < 1e-12);
        assert!((back.patch.epsilon - 64.0 / 255.0).abs() < 1e-12);
        // partial config fills in defaults
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"env":{"kind":"push_line"},"eval":{"episodes":5}}"#).unwrap();
        assert_eq!(partial.env.kind, EnvKind::PushLine);
        assert_eq!(partial.eval.episodes, 5);
        assert_eq!(partial.eval.attack_seeds, 5);
    }

    #[test]
    fn mpc_pairing_uses_mpc_defaults() {
        use crate::planner::PlannerKind;
        let cfg = ExperimentConfig::for_env(EnvKind::PushLine);
        assert_eq!(cfg.planner.kind, PlannerKind::Mpc);
        let cfg = ExperimentConfig::for_env(EnvKind::GridGoal);
        assert_eq!(cfg.planner.kind, PlannerKind::Imagination);
    }

    #[test]
    fn collect_episodes_shapes() {
        let data = collect_episodes(
            EnvKind::GridGoal,
            None,
            &PlannerConfig::imagination_defaults(),
            3,
            9,
        )
        .unwrap();
        assert_eq!(data.episodes.len(), 3);
        for ep in &data.episodes {
            assert_eq!(ep.observations.len(), ep.actions.len() + 1);
            assert_eq!(ep.actions.len(), ep.rewards.len());
            assert!(ep.actions.len() <= DEFAULT_T);
        }
        assert_eq!(data.provenance, Provenance::RandomPolicy);
    }
}
