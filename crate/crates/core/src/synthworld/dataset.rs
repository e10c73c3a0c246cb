use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{Config, ModelConfig, WorldConfig};
use crate::policy::{Batch, Latent, Observation, PolicyModel, Sample};
use crate::synthworld::episode::Episode;
use crate::synthworld::expert::expert_action;
use crate::synthworld::world::{initial_state, observe, step, EpisodeDims, Frame, WorldPhase};
use crate::tensor::Tensor;
use crate::training::{ChannelStats, NormStats, TrainingSet};
use crate::{Error, Result};

pub const TASK_ID: &str = "synth_insertion";
pub const MANIFEST: &str = "manifest.txt";
pub const HELDOUT_DIR: &str = "heldout";

/// Seed of episode `i` in a dataset seeded with `base`: `base ^ i`.
pub fn episode_seed(base: u64, i: usize) -> u64 {
    base ^ i as u64
}

/// Runs the expert from the initial state of `seed` until it inserts or the horizon ends.
pub fn generate_episode(cfg: &WorldConfig, dims: &EpisodeDims, seed: u64) -> Episode {
    let mut s = initial_state(cfg, seed);
    let mut frame = observe(cfg, dims, &s);
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    while s.phase != WorldPhase::Done && frames.len() < cfg.horizon {
        let a = expert_action(cfg, dims, &s);
        let (n, f) = step(cfg, dims, &s, &a);
        frames.push(std::mem::replace(&mut frame, f));
        actions.push(a);
        s = n;
    }
    Episode {
        task: TASK_ID.into(),
        seed,
        dt: cfg.dt,
        dims: dims.clone(),
        frames,
        actions,
    }
}

/// `n` expert episodes seeded by [`episode_seed`]. Refuses worlds where
/// vision alone could localize the target.
pub fn generate_dataset(cfg: &Config, n: usize, seed: u64) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::Incompatible(
            "a dataset needs at least one episode".into(),
        ));
    }
    cfg.world.check_information_gap()?;
    let dims = EpisodeDims::from_model(&cfg.model);
    dims.check()?;
    Ok((0..n)
        .map(|i| generate_episode(&cfg.world, &dims, episode_seed(seed, i)))
        .collect())
}

/// Statistics of proprio, tactile rows and actions over every frame.
pub fn fit_stats(model: &ModelConfig, episodes: &[Episode]) -> NormStats {
    let rows: Vec<Vec<f64>> = episodes.iter().flat_map(Episode::tactile_rows).collect();
    let p = model.action_dim();
    NormStats {
        proprio: ChannelStats::fit(
            episodes
                .iter()
                .flat_map(|e| e.frames.iter().map(|f| &f.proprio[..])),
            p,
        ),
        tactile: ChannelStats::fit(rows.iter().map(|r| &r[..]), model.tactile_width()),
        action: ChannelStats::fit(
            episodes
                .iter()
                .flat_map(|e| e.actions.iter().map(|a| &a[..])),
            p,
        ),
    }
}

fn window(rows: &[&[f64]], t: usize, len: usize) -> Vec<f64> {
    (0..len)
        .flat_map(|k| {
            let i = (t + k + 1).saturating_sub(len);
            rows[i].iter().copied()
        })
        .collect()
}

/// Normalized observation at frame `t`, given the tactile rows of `frames`.
///
/// Histories end at `t` and are padded with frame 0 before the start.
pub fn observation_at(
    model: &ModelConfig,
    stats: &NormStats,
    frames: &[Frame],
    tactile: &[Vec<f64>],
    t: usize,
) -> Result<Observation> {
    let proprio: Vec<&[f64]> = frames.iter().map(|f| &f.proprio[..]).collect();
    let tac: Vec<&[f64]> = tactile.iter().map(|r| &r[..]).collect();
    let mut p = window(&proprio, t, model.proprio_history);
    stats.proprio.normalize(&mut p);
    let mut tw = window(&tac, t, model.tactile_history);
    stats.tactile.normalize(&mut tw);
    Ok(Observation {
        views: frames[t].views.clone(),
        proprio: Tensor::new([model.proprio_history, model.action_dim()], p)?,
        tactile: Tensor::new([model.tactile_history, model.tactile_width()], tw)?,
    })
}

/// Raw tactile of frames `t+1..=t+H_f` with their deltas. Past the end the
/// last frame repeats with zero change.
fn future_tactile(model: &ModelConfig, ep: &Episode, rows: &[Vec<f64>], t: usize) -> Vec<f64> {
    let c = ep.dims.tactile_channels;
    let last = rows.len() - 1;
    let mut out = Vec::with_capacity(model.future_horizon * 2 * c);
    for k in 1..=model.future_horizon {
        let i = t + k;
        if i <= last {
            out.extend_from_slice(&rows[i]);
        } else {
            out.extend_from_slice(&rows[last][..c]);
            out.extend(std::iter::repeat_n(0.0, c));
        }
    }
    out
}

/// One sample per frame. Action chunks past the end repeat the final
/// (insert) action.
pub fn episode_samples(
    model: &ModelConfig,
    stats: &NormStats,
    ep: &Episode,
) -> Result<Vec<Sample>> {
    let rows = ep.tactile_rows();
    let p = model.action_dim();
    (0..ep.len())
        .map(|t| {
            let obs = observation_at(model, stats, &ep.frames, &rows, t)?;
            let mut a = Vec::with_capacity(model.chunk * p);
            for k in 0..model.chunk {
                a.extend_from_slice(&ep.actions[(t + k).min(ep.len() - 1)]);
            }
            stats.action.normalize(&mut a);
            let mut f = future_tactile(model, ep, &rows, t);
            stats.tactile.normalize(&mut f);
            Ok(Sample {
                obs,
                actions: Tensor::new([model.chunk, p], a)?,
                future_tactile: Tensor::new([model.future_horizon, model.tactile_width()], f)?,
            })
        })
        .collect()
}

/// Samples from every episode, normalized by statistics fit on them.
pub fn training_set(model: &ModelConfig, episodes: &[Episode]) -> Result<TrainingSet> {
    let stats = fit_stats(model, episodes);
    let mut samples = Vec::new();
    for ep in episodes {
        samples.extend(episode_samples(model, &stats, ep)?);
    }
    Ok(TrainingSet { samples, stats })
}

/// Mean absolute error of forecast future tactile over every frame of
/// `episodes`, in normalized units.
pub fn future_tactile_l1(
    model: &PolicyModel,
    cfg: &ModelConfig,
    stats: &NormStats,
    episodes: &[Episode],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ep in episodes {
        let samples = episode_samples(cfg, stats, ep)?;
        for chunk in samples.chunks(64) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::from_samples(cfg, &refs)?;
            let pred = model.infer_tactile(&batch, Latent::Zero)?;
            let truth = batch.future_tactile.as_ref().expect("built from samples");
            sum += pred
                .data()
                .iter()
                .zip(truth.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            n += truth.len();
        }
    }
    Ok(sum / n.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }

    pub fn dir(self, root: &Path) -> PathBuf {
        match self {
            Split::Train => root.to_path_buf(),
            Split::Heldout => root.join(HELDOUT_DIR),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub len: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub config_digest: String,
    pub data_digest: String,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# config_digest={}\n# data_digest={}\n# split={}\n",
            self.config_digest,
            self.data_digest,
            self.split.name()
        );
        for e in &self.entries {
            writeln!(s, "{} {} {} {}", e.file, e.seed, e.len, e.success).expect("string write");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad =
            |line: usize, msg: &str| Error::Incompatible(format!("manifest line {line}: {msg}"));
        let mut config_digest = None;
        let mut digest = None;
        let mut split = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                match c.trim().split_once('=') {
                    Some(("config_digest", v)) => config_digest = Some(v.to_string()),
                    Some(("data_digest", v)) => digest = Some(v.to_string()),
                    Some(("split", "train")) => split = Some(Split::Train),
                    Some(("split", "heldout")) => split = Some(Split::Heldout),
                    _ => return Err(bad(i + 1, "unknown header")),
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let [file, seed, len, success] = f[..] else {
                return Err(bad(i + 1, "expected: file seed length success"));
            };
            entries.push(ManifestEntry {
                file: file.to_string(),
                seed: seed
                    .parse()
                    .map_err(|_| bad(i + 1, "seed is not an integer"))?,
                len: len
                    .parse()
                    .map_err(|_| bad(i + 1, "length is not an integer"))?,
                success: success
                    .parse()
                    .map_err(|_| bad(i + 1, "success must be true or false"))?,
            });
        }
        Ok(Self {
            config_digest: config_digest.ok_or_else(|| bad(0, "missing config_digest"))?,
            data_digest: digest.ok_or_else(|| bad(0, "missing data_digest"))?,
            split: split.ok_or_else(|| bad(0, "missing split"))?,
            entries,
        })
    }
}

/// Writes episodes as `episode_NNNN.bin` plus a manifest into the split's directory.
pub fn write_split(
    cfg: &Config,
    root: &Path,
    split: Split,
    episodes: &[Episode],
) -> Result<Manifest> {
    let dir = split.dir(root);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let file = format!("episode_{i:04}.bin");
        ep.save(&dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            seed: ep.seed,
            len: ep.len(),
            success: ep.succeeded(&cfg.world),
        });
    }
    let m = Manifest {
        config_digest: cfg.digest(),
        data_digest: cfg.data_digest(),
        split,
        entries,
    };
    let p = dir.join(MANIFEST);
    std::fs::write(&p, m.to_text()).map_err(|e| Error::io(&p, e))?;
    Ok(m)
}

/// Generates and writes both the training and held-out splits.
pub fn write_dataset(cfg: &Config, root: &Path) -> Result<(Manifest, Manifest)> {
    let d = &cfg.data;
    let train = generate_dataset(cfg, d.episodes, d.seed)?;
    let a = write_split(cfg, root, Split::Train, &train)?;
    let b = if d.heldout_episodes > 0 {
        let held = generate_dataset(cfg, d.heldout_episodes, d.heldout_seed)?;
        write_split(cfg, root, Split::Heldout, &held)?
    } else {
        write_split(cfg, root, Split::Heldout, &[])?
    };
    Ok((a, b))
}

/// Reads a split written under a config with the same data digest.
pub fn load_split(cfg: &Config, root: &Path, split: Split) -> Result<(Manifest, Vec<Episode>)> {
    let dir = split.dir(root);
    let p = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m = Manifest::parse(&text)?;
    let digest = cfg.data_digest();
    if m.data_digest != digest {
        return Err(Error::Incompatible(format!(
            "{} was generated with data digest {}, the config has {digest}",
            p.display(),
            m.data_digest
        )));
    }
    if m.split != split {
        return Err(Error::Incompatible(format!(
            "{} is not a {} split",
            p.display(),
            split.name()
        )));
    }
    let dims = EpisodeDims::from_model(&cfg.model);
    let episodes = m
        .entries
        .iter()
        .map(|e| Episode::load(&dir.join(&e.file), &dims))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, episodes))
}

/// The training split if present on disk, otherwise generated in memory.
pub fn load_or_generate(cfg: &Config, root: Option<&Path>, split: Split) -> Result<Vec<Episode>> {
    if let Some(r) = root {
        if split.dir(r).join(MANIFEST).exists() {
            return Ok(load_split(cfg, r, split)?.1);
        }
    }
    let d = &cfg.data;
    match split {
        Split::Train => generate_dataset(cfg, d.episodes, d.seed),
        Split::Heldout => generate_dataset(cfg, d.heldout_episodes.max(1), d.heldout_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::world::WorldState;

    fn micro() -> Config {
        let mut c = Config::default();
        c.model = ModelConfig::micro();
        c.data.episodes = 4;
        c.data.heldout_episodes = 2;
        c
    }

    #[test]
    fn expert_succeeds_on_first_hundred_seeds() {
        let cfg = Config::default();
        let eps = generate_dataset(&cfg, 100, 0).unwrap();
        for ep in &eps {
            assert!(ep.succeeded(&cfg.world), "seed {}", ep.seed);
            assert!(ep.len() <= cfg.world.horizon);
            assert_eq!(ep.frames.len(), ep.actions.len());
        }
    }

    #[test]
    fn next_tactile_is_exactly_recomputable() {
        let cfg = Config::default();
        let dims = EpisodeDims::from_model(&cfg.model);
        let ep = generate_episode(&cfg.world, &dims, 11);
        let mut s: WorldState = initial_state(&cfg.world, 11);
        for t in 0..ep.len() - 1 {
            let (n, f) = step(&cfg.world, &dims, &s, &ep.actions[t]);
            assert_eq!(f.tactile, ep.frames[t + 1].tactile);
            s = n;
        }
    }

    #[test]
    fn datasets_are_seeded_by_xor() {
        let cfg = micro();
        let eps = generate_dataset(&cfg, 3, 1000).unwrap();
        let seeds: Vec<u64> = eps.iter().map(|e| e.seed).collect();
        assert_eq!(seeds, vec![1000, 1001, 1002]);
        assert_eq!(generate_dataset(&cfg, 3, 1000).unwrap(), eps);
    }

    #[test]
    fn information_gap_is_enforced() {
        let mut cfg = micro();
        cfg.world.tolerance = 0.2;
        assert!(matches!(
            generate_dataset(&cfg, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(generate_dataset(&micro(), 0, 0).is_err());
    }

    #[test]
    fn samples_have_model_shapes_and_padding() {
        let cfg = micro();
        let eps = generate_dataset(&cfg, 2, 0).unwrap();
        let set = training_set(&cfg.model, &eps).unwrap();
        assert_eq!(
            set.samples.len(),
            eps.iter().map(Episode::len).sum::<usize>()
        );
        let refs: Vec<&Sample> = set.samples.iter().collect();
        Batch::from_samples(&cfg.model, &refs).unwrap();

        // The last sample's chunk repeats the insert action.
        let last = &set.samples[eps[0].len() - 1];
        let mut a = last.actions.clone();
        set.stats.action.denormalize(a.data_mut());
        for k in 0..cfg.model.chunk {
            assert!((a.row(k)[2] - 1.0).abs() < 1e-12);
        }
        // At frame 0 the tactile window repeats frame 0 with zero change.
        let first = &set.samples[0];
        let mut w = first.obs.tactile.clone();
        set.stats.tactile.denormalize(w.data_mut());
        let c = cfg.model.tactile_channels;
        for k in 0..cfg.model.tactile_history {
            for j in 0..c {
                assert!((w.row(k)[j] - eps[0].frames[0].tactile[j]).abs() < 1e-12);
                assert!(w.row(k)[c + j].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splits_round_trip_with_manifests() {
        let cfg = micro();
        let dir = tempfile::tempdir().unwrap();
        let (m, h) = write_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert!(m.entries.iter().all(|e| e.success));
        assert_eq!(h.entries[0].seed, 1000);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        let (_, eps) = load_split(&cfg, dir.path(), Split::Train).unwrap();
        assert_eq!(eps, generate_dataset(&cfg, 4, 0).unwrap());

        let again = tempfile::tempdir().unwrap();
        write_dataset(&cfg, again.path()).unwrap();
        let f = "episode_0002.bin";
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap()
        );

        let mut other = cfg.clone();
        other.world.bump_width = 0.1;
        assert!(matches!(
            load_split(&other, dir.path(), Split::Train),
            Err(Error::Incompatible(_))
        ));
    }
}
