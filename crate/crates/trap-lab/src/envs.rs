//! Tiny deterministic pixel environments: a discrete grid navigation task
//! and a continuous 1-D pushing task. Rendering is a pure function of
//! state, and every episode is bit-reproducible from its seed.

use crate::diffmath::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMG_H: usize = 24;
pub const IMG_W: usize = 24;
pub const BACKGROUND: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment kind: {0}")]
    UnknownKind(String),
    #[error("invalid action {action} for {env}")]
    InvalidAction { env: &'static str, action: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    GridGoal,
    PushLine,
}

impl EnvKind {
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "grid_goal" => Ok(EnvKind::GridGoal),
            "push_line" => Ok(EnvKind::PushLine),
            other => Err(EnvError::UnknownKind(other.to_string())),
        }
    }

    pub fn discrete(self) -> bool {
        matches!(self, EnvKind::GridGoal)
    }

    /// Size of the action representation fed to the world model
    /// (one-hot width for discrete, vector width for continuous).
    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::GridGoal => 5,
            EnvKind::PushLine => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// 0=up, 1=down, 2=left, 3=right, 4=stay
    Discrete(usize),
    Continuous(f64),
}

impl Action {
    /// Dense representation used by the world model.
    pub fn encode(&self, dim: usize) -> Vec<f64> {
        match self {
            Action::Discrete(i) => {
                let mut v = vec![0.0; dim];
                v[*i] = 1.0;
                v
            }
            Action::Continuous(a) => vec![*a],
        }
    }
}

/// H×W×3 image with all channels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Array,
}

impl Observation {
    pub fn new(image: Array) -> Self {
        debug_assert_eq!(image.shape(), &[IMG_H, IMG_W, 3]);
        Observation { image }
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.image.data()[(r * IMG_W + c) * 3 + ch]
    }

    /// Flattened 1×(H·W·3) row for the encoder.
    pub fn flat_row(&self) -> Array {
        Array::from_vec(vec![1, IMG_H * IMG_W * 3], self.image.data().to_vec()).unwrap()
    }

    pub fn in_range(&self) -> bool {
        self.image.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub enum EnvState {
    GridGoal {
        agent: (usize, usize),
        goal: (usize, usize),
        step: usize,
    },
    PushLine {
        x: f64,
        v: f64,
        x_goal: f64,
        step: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Env {
    pub kind: EnvKind,
    pub state: EnvState,
    pub episode_len: usize,
    /// Out-of-range continuous actions are clamped and counted here.
    pub clamp_count: usize,
}

pub const GRID_N: usize = 8;
pub const DEFAULT_T: usize = 50;
pub const PUSHLINE_START_RANGE: (f64, f64) = (-0.8, 0.8);

impl Env {
    pub fn reset(kind: EnvKind, seed: u64) -> (Env, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = match kind {
            EnvKind::GridGoal => {
                let agent = (rng.gen_range(0..GRID_N), rng.gen_range(0..GRID_N));
                let mut goal = (rng.gen_range(0..GRID_N), rng.gen_range(0..GRID_N));
                while goal == agent {
                    goal = (rng.gen_range(0..GRID_N), rng.gen_range(0..GRID_N));
                }
                EnvState::GridGoal {
                    agent,
                    goal,
                    step: 0,
                }
            }
            EnvKind::PushLine => {
                let (lo, hi) = PUSHLINE_START_RANGE;
                let x = rng.gen_range(lo..=hi);
                let x_goal = rng.gen_range(lo..=hi);
                EnvState::PushLine {
                    x,
                    v: 0.0,
                    x_goal,
                    step: 0,
                }
            }
        };
        let env = Env {
            kind,
            state,
            episode_len: DEFAULT_T,
            clamp_count: 0,
        };
        let obs = env.render();
        (env, obs)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        match (&mut self.state, action) {
            (
                EnvState::GridGoal { agent, goal, step },
                Action::Discrete(a),
            ) => {
                if *a > 4 {
                    return Err(EnvError::InvalidAction {
                        env: "grid_goal",
                        action: a.to_string(),
                    });
                }
                let (mut r, mut c) = *agent;
                match a {
                    0 => r = r.saturating_sub(1),
                    1 => r = (r + 1).min(GRID_N - 1),
                    2 => c = c.saturating_sub(1),
                    3 => c = (c + 1).min(GRID_N - 1),
                    _ => {}
                }
                *agent = (r, c);
                *step += 1;
                let dist = r.abs_diff(goal.0) + c.abs_diff(goal.1);
                let mut reward = -(dist as f64) / (2.0 * GRID_N as f64);
                let reached = *agent == *goal;
                if reached {
                    reward += 1.0;
                }
                let done = reached || *step >= self.episode_len;
                Ok(StepResult {
                    observation: self.render(),
                    reward,
                    done,
                })
            }
            (
                EnvState::PushLine {
                    x,
                    v,
                    x_goal,
                    step,
                },
                Action::Continuous(a),
            ) => {
                let mut a = *a;
                if !(-1.0..=1.0).contains(&a) {
                    a = a.clamp(-1.0, 1.0);
                    self.clamp_count += 1;
                }
                *x += 0.1 * *v;
                *v = 0.9 * *v + 0.1 * a;
                *x = x.clamp(-1.2, 1.2);
                *step += 1;
                let reward = -(*x - *x_goal).abs();
                let done = *step >= self.episode_len;
                Ok(StepResult {
                    observation: self.render(),
                    reward,
                    done,
                })
            }
            _ => Err(EnvError::InvalidAction {
                env: match self.kind {
                    EnvKind::GridGoal => "grid_goal",
                    EnvKind::PushLine => "push_line",
                },
                action: format!("{action:?}"),
            }),
        }
    }

    /// Pure rendering of the current state. Draw order: background, goal,
    /// agent (agent wins when they coincide).
    pub fn render(&self) -> Observation {
        let mut img = vec![BACKGROUND; IMG_H * IMG_W * 3];
        let paint = |img: &mut Vec<f64>, r0: usize, r1: usize, c0: usize, c1: usize, col: [f64; 3]| {
            for r in r0..r1.min(IMG_H) {
                for c in c0..c1.min(IMG_W) {
                    for ch in 0..3 {
                        img[(r * IMG_W + c) * 3 + ch] = col[ch];
                    }
                }
            }
        };
        match &self.state {
            EnvState::GridGoal { agent, goal, .. } => {
                let tile_h = IMG_H / GRID_N;
                let tile_w = IMG_W / GRID_N;
                let tile = |cell: (usize, usize)| {
                    (
                        cell.0 * tile_h,
                        (cell.0 + 1) * tile_h,
                        cell.1 * tile_w,
                        (cell.1 + 1) * tile_w,
                    )
                };
                let (r0, r1, c0, c1) = tile(*goal);
                paint(&mut img, r0, r1, c0, c1, [0.0, 1.0, 0.0]);
                let (r0, r1, c0, c1) = tile(*agent);
                paint(&mut img, r0, r1, c0, c1, [1.0, 1.0, 1.0]);
            }
            EnvState::PushLine { x, x_goal, .. } => {
                let to_col = |x: f64| -> usize {
                    let t = (x + 1.2) / 2.4;
                    ((t * (IMG_W - 2) as f64).round() as usize).min(IMG_W - 2)
                };
                let gc = to_col(*x_goal);
                paint(&mut img, 0, IMG_H, gc, gc + 2, [0.0, 1.0, 0.0]);
                let ac = to_col(*x);
                paint(&mut img, 0, IMG_H, ac, ac + 2, [1.0, 1.0, 1.0]);
            }
        }
        Observation::new(Array::from_vec(vec![IMG_H, IMG_W, 3], img).unwrap())
    }

    pub fn step_count(&self) -> usize {
        match &self.state {
            EnvState::GridGoal { step, .. } => *step,
            EnvState::PushLine { step, .. } => *step,
        }
    }
}
