//! Flat `key=value` run configuration.
//!
//! Every knob of every module lives here under a dotted namespace. Unknown
//! keys are rejected. The canonical form lists every key in sorted order with
//! its effective value, so the digest does not depend on key order or on
//! whether a default was written out explicitly. `paths.*` keys are excluded
//! from the digest.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: cannot use {value:?}: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// The ablation ladder, each rung adding one mechanism to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Vision and proprioception only.
    WithoutTouch,
    /// Tactile tokens appended to the visual tokens.
    NaiveTouch,
    /// Bidirectional cross-attention between vision and touch.
    CrossAttention,
    /// Adds the future-tactile head as an auxiliary objective.
    NextTouchPred,
    /// Feeds future tactile back into action generation, with the curriculum.
    AutoRegressive,
    /// Gives the action path its own fusion stage.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::WithoutTouch,
        Variant::NaiveTouch,
        Variant::CrossAttention,
        Variant::NextTouchPred,
        Variant::AutoRegressive,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::WithoutTouch => "without_touch",
            Variant::NaiveTouch => "naive_touch",
            Variant::CrossAttention => "cross_attention",
            Variant::NextTouchPred => "next_touch_pred",
            Variant::AutoRegressive => "autoregressive",
            Variant::Full => "full",
        }
    }

    pub fn uses_tactile(self) -> bool {
        self >= Variant::NaiveTouch
    }

    pub fn uses_cross_attention(self) -> bool {
        self >= Variant::CrossAttention
    }

    pub fn has_tactile_head(self) -> bool {
        self >= Variant::NextTouchPred
    }

    pub fn feeds_back_tactile(self) -> bool {
        self >= Variant::AutoRegressive
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                format!(
                    "expected one of {}",
                    Variant::ALL.map(Variant::name).join(", ")
                )
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err("expected desk or paper".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ViewShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ViewShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for ViewShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| "expected CxHxW".to_string())?;
        match parts[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(ViewShape::new(c, h, w)),
            _ => Err("expected CxHxW with positive extents".into()),
        }
    }
}

/// Synthetic insertion world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// Cell size of the visual target rendering.
    pub quantization: f64,
    /// Success radius around the hidden target.
    pub tolerance: f64,
    /// Width of the tactile response bump.
    pub bump_width: f64,
    pub max_step: f64,
    pub horizon: usize,
    pub dt: f64,
    pub start_jitter: f64,
    /// Targets are placed in `[margin, 1 - margin]²`.
    pub target_margin: f64,
    /// Standard deviation of additive tactile noise; 0 disables it.
    pub tactile_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            quantization: 0.25,
            tolerance: 0.05,
            bump_width: 0.15,
            max_step: 0.06,
            horizon: 60,
            dt: 0.1,
            start_jitter: 0.05,
            target_margin: 0.1,
            tactile_noise: 0.0,
        }
    }
}

impl WorldConfig {
    /// A vision-only policy must not be able to localize the target: the
    /// success radius has to be smaller than half a visual cell.
    pub fn check_information_gap(&self) -> Result<()> {
        if self.tolerance < self.quantization / 2.0 {
            Ok(())
        } else {
            Err(ConfigError::Inconsistent(format!(
                "world.tolerance {} must be below half of world.quantization {}; otherwise vision alone can locate the target and touch adds nothing",
                self.tolerance, self.quantization
            )))
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("world.quantization", self.quantization),
            ("world.tolerance", self.tolerance),
            ("world.bump_width", self.bump_width),
            ("world.max_step", self.max_step),
            ("world.dt", self.dt),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(value_err(k, v, "must be positive"));
            }
        }
        if !(0.0..0.5).contains(&self.target_margin) {
            return Err(value_err(
                "world.target_margin",
                self.target_margin,
                "must be in [0, 0.5)",
            ));
        }
        if !(self.tactile_noise >= 0.0) {
            return Err(value_err(
                "world.tactile_noise",
                self.tactile_noise,
                "must be nonnegative",
            ));
        }
        if self.horizon == 0 {
            return Err(value_err("world.horizon", 0, "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scale: Scale,
    pub variant: Variant,
    pub dim: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub patch: usize,
    pub views: Vec<ViewShape>,
    pub proprio_history: usize,
    pub proprio_groups: Vec<usize>,
    pub tactile_history: usize,
    pub tactile_channels: usize,
    pub future_horizon: usize,
    pub chunk: usize,
    pub share_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Desk,
            variant: Variant::Full,
            dim: 32,
            heads: 4,
            latent_dim: 8,
            encoder_layers: 2,
            decoder_layers: 2,
            patch: 8,
            views: vec![ViewShape::new(1, 16, 16); 2],
            proprio_history: 3,
            proprio_groups: vec![3, 1, 1, 1, 0],
            tactile_history: 6,
            tactile_channels: 12,
            future_horizon: 6,
            chunk: 16,
            share_fusion: false,
        }
    }
}

impl ModelConfig {
    pub const PAPER_GROUPS: [usize; 5] = [7, 17, 7, 17, 2];
    pub const PAPER_VIEWS: [ViewShape; 4] = [
        ViewShape::new(3, 180, 320),
        ViewShape::new(3, 180, 320),
        ViewShape::new(3, 256, 280),
        ViewShape::new(3, 256, 280),
    ];
    pub const PAPER_PROPRIO_HISTORY: usize = 6;
    pub const PAPER_TACTILE_HISTORY: usize = 18;
    pub const PAPER_TACTILE_CHANNELS: usize = 60;
    pub const PAPER_CHUNK: usize = 100;

    /// Full-size observation and action shapes; width and depth stay at the
    /// desk defaults since nothing pins them.
    pub fn paper() -> Self {
        Self {
            scale: Scale::Paper,
            patch: 4,
            views: Self::PAPER_VIEWS.to_vec(),
            proprio_history: Self::PAPER_PROPRIO_HISTORY,
            proprio_groups: Self::PAPER_GROUPS.to_vec(),
            tactile_history: Self::PAPER_TACTILE_HISTORY,
            tactile_channels: Self::PAPER_TACTILE_CHANNELS,
            future_horizon: Self::PAPER_TACTILE_HISTORY,
            chunk: Self::PAPER_CHUNK,
            ..Self::default()
        }
    }

    /// Smallest configuration that still exercises every code path.
    pub fn micro() -> Self {
        Self {
            dim: 8,
            heads: 2,
            latent_dim: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            patch: 4,
            views: vec![ViewShape::new(1, 8, 8); 2],
            proprio_history: 2,
            tactile_history: 3,
            future_horizon: 2,
            chunk: 4,
            ..Self::default()
        }
    }

    /// Width of a proprio or action frame.
    pub fn action_dim(&self) -> usize {
        self.proprio_groups.iter().sum()
    }

    /// Width of a tactile window row: raw readings then deltas.
    pub fn tactile_width(&self) -> usize {
        2 * self.tactile_channels
    }

    pub fn patch_dim(&self, view: &ViewShape) -> usize {
        view.channels * self.patch * self.patch
    }

    pub fn visual_tokens(&self) -> usize {
        self.views
            .iter()
            .map(|v| (v.height / self.patch) * (v.width / self.patch))
            .sum()
    }

    /// `(offset, len)` of each arm group inside a frame.
    pub fn arm_groups(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::new();
        let mut at = 0;
        for (i, &len) in self.proprio_groups.iter().enumerate() {
            if i == 0 || i == 2 {
                offsets.push((at, len));
            }
            at += len;
        }
        offsets
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.dim", self.dim),
            ("model.heads", self.heads),
            ("model.latent_dim", self.latent_dim),
            ("model.encoder_layers", self.encoder_layers),
            ("model.decoder_layers", self.decoder_layers),
            ("model.patch", self.patch),
            ("model.proprio_history", self.proprio_history),
            ("model.tactile_history", self.tactile_history),
            ("model.tactile_channels", self.tactile_channels),
            ("model.future_horizon", self.future_horizon),
            ("model.chunk", self.chunk),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(value_err(k, v, "must be positive"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(ConfigError::Inconsistent(format!(
                "model.dim {} is not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        if self.views.is_empty() {
            return Err(value_err(
                "model.views",
                "",
                "at least one view is required",
            ));
        }
        for v in &self.views {
            if v.height % self.patch != 0 || v.width % self.patch != 0 {
                return Err(ConfigError::Inconsistent(format!(
                    "view {v} is not divisible into {p}x{p} patches",
                    p = self.patch
                )));
            }
        }
        if self.proprio_groups.len() != 5 {
            return Err(value_err(
                "model.proprio_groups",
                join(&self.proprio_groups),
                "expected five groups: arm, hand, arm, hand, neck",
            ));
        }
        if self.proprio_groups[0] == 0 {
            return Err(value_err(
                "model.proprio_groups",
                join(&self.proprio_groups),
                "first arm group is empty",
            ));
        }
        if self.scale == Scale::Paper {
            self.check_paper_shapes()?;
        }
        Ok(())
    }

    fn check_paper_shapes(&self) -> Result<()> {
        let mismatch = |key: &str, got: String, want: String| {
            Err(ConfigError::Inconsistent(format!(
                "paper scale requires {key} = {want}, got {got}"
            )))
        };
        if self.proprio_groups != Self::PAPER_GROUPS {
            return mismatch(
                "model.proprio_groups",
                join(&self.proprio_groups),
                join(&Self::PAPER_GROUPS),
            );
        }
        if self.proprio_history != Self::PAPER_PROPRIO_HISTORY {
            return mismatch(
                "model.proprio_history",
                self.proprio_history.to_string(),
                Self::PAPER_PROPRIO_HISTORY.to_string(),
            );
        }
        if self.tactile_history != Self::PAPER_TACTILE_HISTORY {
            return mismatch(
                "model.tactile_history",
                self.tactile_history.to_string(),
                Self::PAPER_TACTILE_HISTORY.to_string(),
            );
        }
        if self.tactile_channels != Self::PAPER_TACTILE_CHANNELS {
            return mismatch(
                "model.tactile_channels",
                self.tactile_channels.to_string(),
                Self::PAPER_TACTILE_CHANNELS.to_string(),
            );
        }
        if self.chunk != Self::PAPER_CHUNK {
            return mismatch(
                "model.chunk",
                self.chunk.to_string(),
                Self::PAPER_CHUNK.to_string(),
            );
        }
        if self.views != Self::PAPER_VIEWS {
            return mismatch("model.views", join(&self.views), join(&Self::PAPER_VIEWS));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub switch_fraction: f64,
    /// KL, joint-angle, tactile, arm.
    pub weights: [f64; 4],
    /// Position, rotation.
    pub lambdas: [f64; 2],
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            switch_fraction: 0.75,
            weights: [10.0, 1.0, 1.0, 1.0],
            lambdas: [1.0, 1.0],
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(value_err("train.epochs", 0, "must be positive"));
        }
        if self.batch == 0 {
            return Err(value_err("train.batch", 0, "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(value_err("train.lr", self.lr, "must be positive"));
        }
        for (k, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(value_err(k, v, "must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(value_err("train.eps", self.eps, "must be positive"));
        }
        if !(self.switch_fraction > 0.0 && self.switch_fraction <= 1.0) {
            return Err(value_err(
                "train.switch_fraction",
                self.switch_fraction,
                "must be in (0, 1]",
            ));
        }
        for (k, v) in WEIGHT_KEYS
            .iter()
            .zip(self.weights.iter().chain(&self.lambdas))
        {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(value_err(k, v, "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

const WEIGHT_KEYS: [&str; 6] = [
    "train.w_kl",
    "train.w_joint",
    "train.w_tactile",
    "train.w_arm",
    "train.lambda_position",
    "train.lambda_rotation",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub episodes: usize,
    pub seed: u64,
    pub heldout_episodes: usize,
    pub heldout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: 0,
            heldout_episodes: 10,
            heldout_seed: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    Zero,
    Sampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub runs: usize,
    pub replan_every: usize,
    pub blend: usize,
    /// Episode seeds for rollouts start here.
    pub seed: u64,
    pub latent: LatentMode,
    /// Stage 1 thresholds on distance to the target cell, in cell sizes.
    pub coarse_bands: [f64; 3],
    /// Stage 2 thresholds on the final distance to the target, in tolerances.
    pub fine_bands: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            replan_every: 1,
            blend: 0,
            seed: 100_000,
            latent: LatentMode::Zero,
            coarse_bands: [0.2, 0.5, 1.0],
            fine_bands: [1.0, 2.0, 4.0],
        }
    }
}

impl EvalConfig {
    fn validate(&self, chunk: usize) -> Result<()> {
        if self.runs == 0 {
            return Err(value_err("eval.runs", 0, "must be positive"));
        }
        if self.replan_every == 0 || self.replan_every > chunk {
            return Err(value_err(
                "eval.replan_every",
                self.replan_every,
                "must be in 1..=model.chunk",
            ));
        }
        if self.blend > chunk {
            return Err(value_err(
                "eval.blend",
                self.blend,
                "must not exceed model.chunk",
            ));
        }
        for (k, b) in [
            ("eval.coarse_bands", &self.coarse_bands),
            ("eval.fine_bands", &self.fine_bands),
        ] {
            if b.iter().any(|v| !(*v >= 0.0)) || b.windows(2).any(|w| w[0] > w[1]) {
                return Err(value_err(k, join(b), "must be nonnegative and ascending"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub data: String,
    pub out: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("ablate.seeds", "number of training seeds per variant in an ablation sweep"),
    ("data.episodes", "expert demonstrations to generate"),
    ("data.heldout_episodes", "episodes generated for held-out evaluation"),
    ("data.heldout_seed", "dataset seed of the held-out episodes"),
    ("data.seed", "dataset seed; episode i uses a sub-seed mixed from this and i"),
    ("eval.blend", "frames cross-faded between consecutive action chunks"),
    ("eval.coarse_bands", "stage 1 scores 3,2,1 when the closest approach to the target cell is at most these many cell sizes"),
    ("eval.fine_bands", "stage 2 scores 3,2,1 when the distance at insertion is below these many tolerances"),
    ("eval.latent", "style latent at inference: zero or sampled"),
    ("eval.replan_every", "environment steps between policy calls"),
    ("eval.runs", "closed-loop rollouts per evaluation"),
    ("eval.seed", "first episode seed used for rollouts"),
    ("model.chunk", "action chunk length"),
    ("model.decoder_layers", "decoder blocks in each head"),
    ("model.dim", "token width"),
    ("model.encoder_layers", "encoder blocks in the style encoder"),
    ("model.future_horizon", "future tactile frames predicted"),
    ("model.heads", "attention heads"),
    ("model.latent_dim", "style latent width"),
    ("model.patch", "square patch size for every view"),
    ("model.proprio_groups", "frame layout: arm,hand,arm,hand,neck widths"),
    ("model.proprio_history", "proprio frames per observation"),
    ("model.scale", "desk or paper; paper enforces the full-size shapes"),
    ("model.share_fusion", "reuse one fusion stage for both heads"),
    ("model.tactile_channels", "raw tactile channels per frame"),
    ("model.tactile_history", "tactile frames per observation"),
    ("model.variant", "ablation variant"),
    ("model.views", "camera views as CxHxW, comma separated"),
    ("paths.data", "dataset directory"),
    ("paths.out", "output directory"),
    ("train.batch", "samples per optimizer step"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.checkpoint_every", "epochs between checkpoints; 0 keeps only the final one"),
    ("train.epochs", "training epochs"),
    ("train.eps", "Adam denominator epsilon"),
    ("train.lambda_position", "weight of the end-effector position error"),
    ("train.lambda_rotation", "weight of the end-effector rotation error"),
    ("train.lr", "Adam learning rate"),
    ("train.seed", "initialization, shuffling and latent noise seed"),
    ("train.switch_fraction", "fraction of epochs trained on ground-truth future tactile"),
    ("train.w_arm", "weight of the end-effector loss"),
    ("train.w_joint", "weight of the action L1 loss"),
    ("train.w_kl", "weight of the KL term"),
    ("train.w_tactile", "weight of the future tactile L1 loss"),
    ("world.bump_width", "width of the tactile response around the hidden target"),
    ("world.dt", "simulation step in seconds"),
    ("world.horizon", "environment steps per episode"),
    ("world.max_step", "largest effector displacement per step"),
    ("world.quantization", "cell size of the rendered target"),
    ("world.start_jitter", "half-width of the uniform start offset around the centre"),
    ("world.tactile_noise", "standard deviation of additive tactile noise"),
    ("world.target_margin", "targets lie in [margin, 1 - margin] on both axes"),
    ("world.tolerance", "insertion succeeds within this distance of the target"),
];

fn value_err(key: &str, value: impl fmt::Display, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| value_err(key, value, "malformed list"))
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| value_err(key, value, &format!("expected {N} values")))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| value_err(key, value, &e.to_string()))
}

impl Config {
    /// Desk defaults with the model switched to the full-size shapes.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig::paper(),
            ..Self::default()
        }
    }

    /// Parses a document. Defaults come from the scale named by
    /// `model.scale`, wherever it appears in the text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            if pairs
                .iter()
                .any(|(_, key, _): &(usize, &str, &str)| *key == k)
            {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            pairs.push((i + 1, k, v));
        }
        let paper = pairs
            .iter()
            .find(|(_, k, _)| *k == "model.scale")
            .map(|(_, k, v)| parse::<Scale>(k, v))
            .transpose()?
            == Some(Scale::Paper);
        let mut cfg = if paper {
            Self::paper_scale()
        } else {
            Self::default()
        };
        for (_, k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> std::result::Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate(self.model.chunk)?;
        if self.data.episodes == 0 {
            return Err(value_err("data.episodes", 0, "must be positive"));
        }
        if self.ablate.seeds == 0 {
            return Err(value_err("ablate.seeds", 0, "must be positive"));
        }
        Ok(())
    }

    /// Sets one key from its text form. Does not validate cross-key constraints.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.world;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "world.quantization" => w.quantization = parse(key, v)?,
            "world.tolerance" => w.tolerance = parse(key, v)?,
            "world.bump_width" => w.bump_width = parse(key, v)?,
            "world.max_step" => w.max_step = parse(key, v)?,
            "world.horizon" => w.horizon = parse(key, v)?,
            "world.dt" => w.dt = parse(key, v)?,
            "world.start_jitter" => w.start_jitter = parse(key, v)?,
            "world.target_margin" => w.target_margin = parse(key, v)?,
            "world.tactile_noise" => w.tactile_noise = parse(key, v)?,
            "model.scale" => m.scale = parse(key, v)?,
            "model.variant" => m.variant = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.latent_dim" => m.latent_dim = parse(key, v)?,
            "model.encoder_layers" => m.encoder_layers = parse(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.views" => m.views = parse_list(key, v)?,
            "model.proprio_history" => m.proprio_history = parse(key, v)?,
            "model.proprio_groups" => m.proprio_groups = parse_list(key, v)?,
            "model.tactile_history" => m.tactile_history = parse(key, v)?,
            "model.tactile_channels" => m.tactile_channels = parse(key, v)?,
            "model.future_horizon" => m.future_horizon = parse(key, v)?,
            "model.chunk" => m.chunk = parse(key, v)?,
            "model.share_fusion" => m.share_fusion = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.switch_fraction" => t.switch_fraction = parse(key, v)?,
            "train.w_kl" => t.weights[0] = parse(key, v)?,
            "train.w_joint" => t.weights[1] = parse(key, v)?,
            "train.w_tactile" => t.weights[2] = parse(key, v)?,
            "train.w_arm" => t.weights[3] = parse(key, v)?,
            "train.lambda_position" => t.lambdas[0] = parse(key, v)?,
            "train.lambda_rotation" => t.lambdas[1] = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "data.episodes" => self.data.episodes = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.heldout_episodes" => self.data.heldout_episodes = parse(key, v)?,
            "data.heldout_seed" => self.data.heldout_seed = parse(key, v)?,
            "eval.runs" => self.eval.runs = parse(key, v)?,
            "eval.replan_every" => self.eval.replan_every = parse(key, v)?,
            "eval.blend" => self.eval.blend = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "eval.latent" => {
                self.eval.latent = match v {
                    "zero" => LatentMode::Zero,
                    "sampled" => LatentMode::Sampled,
                    _ => return Err(value_err(key, v, "expected zero or sampled")),
                }
            }
            "eval.coarse_bands" => self.eval.coarse_bands = parse_array(key, v)?,
            "eval.fine_bands" => self.eval.fine_bands = parse_array(key, v)?,
            "ablate.seeds" => self.ablate.seeds = parse(key, v)?,
            "paths.data" => self.paths.data = v.to_string(),
            "paths.out" => self.paths.out = v.to_string(),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Effective value of every key, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (w, m, t, e) = (&self.world, &self.model, &self.train, &self.eval);
        let mut out = vec![
            ("world.quantization", w.quantization.to_string()),
            ("world.tolerance", w.tolerance.to_string()),
            ("world.bump_width", w.bump_width.to_string()),
            ("world.max_step", w.max_step.to_string()),
            ("world.horizon", w.horizon.to_string()),
            ("world.dt", w.dt.to_string()),
            ("world.start_jitter", w.start_jitter.to_string()),
            ("world.target_margin", w.target_margin.to_string()),
            ("world.tactile_noise", w.tactile_noise.to_string()),
            ("model.scale", m.scale.name().to_string()),
            ("model.variant", m.variant.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.latent_dim", m.latent_dim.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.decoder_layers", m.decoder_layers.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.views", join(&m.views)),
            ("model.proprio_history", m.proprio_history.to_string()),
            ("model.proprio_groups", join(&m.proprio_groups)),
            ("model.tactile_history", m.tactile_history.to_string()),
            ("model.tactile_channels", m.tactile_channels.to_string()),
            ("model.future_horizon", m.future_horizon.to_string()),
            ("model.chunk", m.chunk.to_string()),
            ("model.share_fusion", m.share_fusion.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.switch_fraction", t.switch_fraction.to_string()),
            ("train.w_kl", t.weights[0].to_string()),
            ("train.w_joint", t.weights[1].to_string()),
            ("train.w_tactile", t.weights[2].to_string()),
            ("train.w_arm", t.weights[3].to_string()),
            ("train.lambda_position", t.lambdas[0].to_string()),
            ("train.lambda_rotation", t.lambdas[1].to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("data.episodes", self.data.episodes.to_string()),
            ("data.seed", self.data.seed.to_string()),
            (
                "data.heldout_episodes",
                self.data.heldout_episodes.to_string(),
            ),
            ("data.heldout_seed", self.data.heldout_seed.to_string()),
            ("eval.runs", e.runs.to_string()),
            ("eval.replan_every", e.replan_every.to_string()),
            ("eval.blend", e.blend.to_string()),
            ("eval.seed", e.seed.to_string()),
            (
                "eval.latent",
                match e.latent {
                    LatentMode::Zero => "zero",
                    LatentMode::Sampled => "sampled",
                }
                .to_string(),
            ),
            ("eval.coarse_bands", join(&e.coarse_bands)),
            ("eval.fine_bands", join(&e.fine_bands)),
            ("ablate.seeds", self.ablate.seeds.to_string()),
            ("paths.data", self.paths.data.clone()),
            ("paths.out", self.paths.out.clone()),
        ];
        out.sort_by_key(|(k, _)| *k);
        out
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Digest of everything except `paths.*`.
    pub fn digest(&self) -> String {
        self.digest_where(|k| !k.starts_with("paths."))
    }

    /// Digest of the `model.*` keys only. Two configs with the same model
    /// digest produce interchangeable checkpoints.
    pub fn model_digest(&self) -> String {
        self.digest_where(|k| k.starts_with("model."))
    }

    /// Digest of the keys that determine generated episodes.
    pub fn data_digest(&self) -> String {
        self.digest_where(|k| {
            k.starts_with("world.") || k.starts_with("data.") || DATA_SHAPE_KEYS.contains(&k)
        })
    }

    fn digest_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if keep(k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// Model keys that shape the recorded episode streams.
const DATA_SHAPE_KEYS: [&str; 5] = [
    "model.views",
    "model.proprio_groups",
    "model.tactile_channels",
    "model.tactile_history",
    "model.proprio_history",
];

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
