use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, ViewShape, WorldConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Bump level at which a fingertip counts as touching.
pub const CONTACT_LEVEL: f64 = 0.3;

/// Action channel that commands insertion when at least 0.5.
pub const INSERT_CHANNEL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum WorldPhase {
    Approach,
    /// Contact has been made at least once.
    Align,
    /// The effector has been within tolerance of the target.
    Insert,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldState {
    /// Episode seed; also keys the optional tactile noise.
    pub seed: u64,
    pub pos: [f64; 2],
    pub target: [f64; 2],
    pub contact: bool,
    pub phase: WorldPhase,
    pub step: usize,
}

impl WorldState {
    pub fn distance(&self) -> f64 {
        dist(self.pos, self.target)
    }
}

/// Stream shapes shared by episodes, files and models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeDims {
    pub views: Vec<ViewShape>,
    pub tactile_channels: usize,
    /// Width of proprio and action frames.
    pub frame: usize,
}

impl EpisodeDims {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            views: cfg.views.clone(),
            tactile_channels: cfg.tactile_channels,
            frame: cfg.action_dim(),
        }
    }

    pub fn fingertips(&self) -> usize {
        self.tactile_channels / 3
    }

    pub fn check(&self) -> Result<()> {
        if self.tactile_channels == 0 || self.tactile_channels % 3 != 0 {
            return Err(Error::Incompatible(format!(
                "the insertion world needs a multiple of 3 tactile channels, got {}",
                self.tactile_channels
            )));
        }
        if self.frame < 3 {
            return Err(Error::Incompatible(format!(
                "the insertion world needs frames of at least 3 values, got {}",
                self.frame
            )));
        }
        if self.views.is_empty() {
            return Err(Error::Incompatible(
                "the insertion world needs at least one view".into(),
            ));
        }
        Ok(())
    }
}

/// Everything observed at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub views: Vec<Tensor>,
    pub tactile: Vec<f64>,
    pub proprio: Vec<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Point `index` of the R2 additive recurrence, in `[0, 1)²`.
pub fn r2_point(index: u64) -> [f64; 2] {
    // Multipliers are 2^64 / g and 2^64 / g², with g the plastic number.
    const A1: u64 = 0xC13F_A9A9_02A6_328F;
    const A2: u64 = 0x91E1_0DA5_C79E_7B1D;
    let f =
        |a: u64| (index.wrapping_mul(a).wrapping_add(1 << 63) >> 11) as f64 / (1u64 << 53) as f64;
    [f(A1), f(A2)]
}

/// Target cell `[x0, y0, x1, y1]` containing `target`.
pub fn cell_box(cfg: &WorldConfig, target: [f64; 2]) -> [f64; 4] {
    let q = cfg.quantization;
    let cx = (target[0] / q).floor();
    let cy = (target[1] / q).floor();
    [
        cx * q,
        cy * q,
        ((cx + 1.0) * q).min(1.0),
        ((cy + 1.0) * q).min(1.0),
    ]
}

pub fn distance_to_box(p: [f64; 2], b: [f64; 4]) -> f64 {
    let dx = (b[0] - p[0]).max(0.0).max(p[0] - b[2]);
    let dy = (b[1] - p[1]).max(0.0).max(p[1] - b[3]);
    dx.hypot(dy)
}

/// Initial state of episode `seed`.
pub fn initial_state(cfg: &WorldConfig, seed: u64) -> WorldState {
    let [u, v] = r2_point(seed);
    let span = 1.0 - 2.0 * cfg.target_margin;
    let target = [cfg.target_margin + span * u, cfg.target_margin + span * v];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = cfg.start_jitter;
    let pos = if j > 0.0 {
        [0.5 + rng.random_range(-j..j), 0.5 + rng.random_range(-j..j)]
    } else {
        [0.5, 0.5]
    };
    let mut s = WorldState {
        seed,
        pos,
        target,
        contact: false,
        phase: WorldPhase::Approach,
        step: 0,
    };
    update_phase(cfg, &mut s);
    s
}

fn bump(cfg: &WorldConfig, pos: [f64; 2], target: [f64; 2]) -> f64 {
    let d = dist(pos, target);
    (-d * d / (2.0 * cfg.bump_width * cfg.bump_width)).exp()
}

fn update_phase(cfg: &WorldConfig, s: &mut WorldState) {
    s.contact = bump(cfg, s.pos, s.target) >= CONTACT_LEVEL;
    if s.contact {
        s.phase = s.phase.max(WorldPhase::Align);
    }
    if s.distance() < cfg.tolerance {
        s.phase = s.phase.max(WorldPhase::Insert);
    }
}

/// Fingertip `k` has gain `g_k = 1 - k/(2F)` and shear axes rotated by `kπ/4`.
/// Channels per fingertip: `g·b`, then the rotated offset scaled by `g·b/σ`.
pub fn tactile_clean(
    cfg: &WorldConfig,
    dims: &EpisodeDims,
    pos: [f64; 2],
    target: [f64; 2],
) -> Vec<f64> {
    let f = dims.fingertips();
    let b = bump(cfg, pos, target);
    let (dx, dy) = (target[0] - pos[0], target[1] - pos[1]);
    let mut out = Vec::with_capacity(3 * f);
    for k in 0..f {
        let g = 1.0 - k as f64 / (2.0 * f as f64);
        let (sn, cs) = (k as f64 * std::f64::consts::FRAC_PI_4).sin_cos();
        let s = g * b / cfg.bump_width;
        out.push(g * b);
        out.push(s * (cs * dx - sn * dy));
        out.push(s * (sn * dx + cs * dy));
    }
    out
}

/// Offset to the target recovered from fingertip 0, if it touches.
pub fn decode_offset(cfg: &WorldConfig, tactile: &[f64]) -> Option<[f64; 2]> {
    let n = tactile[0];
    (n >= CONTACT_LEVEL).then(|| {
        [
            cfg.bump_width * tactile[1] / n,
            cfg.bump_width * tactile[2] / n,
        ]
    })
}

fn render(view: &ViewShape, index: usize, cfg: &WorldConfig, s: &WorldState) -> Tensor {
    let (h, w) = (view.height, view.width);
    let cell = cell_box(cfg, s.target);
    let sigma = 1.0 / w.max(h) as f64;
    let plane: Vec<f64> = (0..h * w)
        .map(|i| {
            let px = ((i % w) as f64 + 0.5) / w as f64;
            let py = ((i / w) as f64 + 0.5) / h as f64;
            if index % 2 == 0 {
                let inside = px >= cell[0] && px < cell[2] && py >= cell[1] && py < cell[3];
                f64::from(u8::from(inside))
            } else {
                let d2 = (px - s.pos[0]).powi(2) + (py - s.pos[1]).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
        })
        .collect();
    let data = plane.iter().copied().cycle().take(view.len()).collect();
    Tensor::new([view.channels, h, w], data).expect("sized by view")
}

/// Renders the observation of `s`.
pub fn observe(cfg: &WorldConfig, dims: &EpisodeDims, s: &WorldState) -> Frame {
    let views = dims
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| render(v, i, cfg, s))
        .collect();
    let mut tactile = tactile_clean(cfg, dims, s.pos, s.target);
    if cfg.tactile_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(1 + s.step as u64);
        let n = Normal::new(0.0, cfg.tactile_noise).expect("validated noise level");
        for v in &mut tactile {
            *v += n.sample(&mut rng);
        }
    }
    let mut proprio = vec![0.0; dims.frame];
    proprio[0] = s.pos[0];
    proprio[1] = s.pos[1];
    Frame {
        views,
        tactile,
        proprio,
    }
}

/// Applies one action and returns the next state with its observation.
///
/// `(dx, dy)` is clipped to `max_step` in norm; an insert command ends the
/// episode without moving.
pub fn step(
    cfg: &WorldConfig,
    dims: &EpisodeDims,
    s: &WorldState,
    action: &[f64],
) -> (WorldState, Frame) {
    let mut n = *s;
    n.step += 1;
    if s.phase != WorldPhase::Done {
        if action[INSERT_CHANNEL] >= 0.5 {
            n.phase = WorldPhase::Done;
        } else {
            let (mut dx, mut dy) = (action[0], action[1]);
            if !(dx.is_finite() && dy.is_finite()) {
                dx = 0.0;
                dy = 0.0;
            }
            let norm = dx.hypot(dy);
            if norm > cfg.max_step {
                dx *= cfg.max_step / norm;
                dy *= cfg.max_step / norm;
            }
            n.pos = [
                (s.pos[0] + dx).clamp(0.0, 1.0),
                (s.pos[1] + dy).clamp(0.0, 1.0),
            ];
            update_phase(cfg, &mut n);
        }
    }
    let frame = observe(cfg, dims, &n);
    (n, frame)
}
