//! Recorded demonstrations and their binary file format.
//!
//! ```text
//! magic    8 bytes  "VTACEPIS"
//! version  u32
//! task     u32 length + utf-8
//! seed     u64
//! dt       f64
//! views    u32 count, then count × (c, h, w) as u32
//! tactile  u32 channels
//! frame    u32 proprio/action width
//! frames   u64
//! frames × { every view, tactile, proprio, action } as f64
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use crate::checkpoint::{FormatError, Reader, Writer};
use crate::config::{ViewShape, WorldConfig};
use crate::synthworld::world::{
    initial_state, observe, step, EpisodeDims, Frame, WorldPhase, WorldState,
};
use crate::tensor::Tensor;
use crate::Result;

pub const EPISODE_MAGIC: &[u8; 8] = b"VTACEPIS";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: String,
    pub seed: u64,
    pub dt: f64,
    pub dims: EpisodeDims,
    /// Observation before each action.
    pub frames: Vec<Frame>,
    pub actions: Vec<Vec<f64>>,
}

/// Result of driving the world with a recorded action stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub frames: Vec<Frame>,
    pub final_state: WorldState,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Raw tactile followed by its change from the previous frame (zero at frame 0).
    pub fn tactile_rows(&self) -> Vec<Vec<f64>> {
        tactile_rows(&self.frames)
    }

    pub fn replay(&self, cfg: &WorldConfig) -> Replay {
        let mut s = initial_state(cfg, self.seed);
        let mut frames = vec![observe(cfg, &self.dims, &s)];
        for a in &self.actions {
            let (n, f) = step(cfg, &self.dims, &s, a);
            s = n;
            frames.push(f);
        }
        frames.pop();
        Replay {
            frames,
            final_state: s,
        }
    }

    /// Whether replay ends inserted within tolerance.
    pub fn succeeded(&self, cfg: &WorldConfig) -> bool {
        let s = self.replay(cfg).final_state;
        s.phase == WorldPhase::Done && s.distance() < cfg.tolerance
    }

    fn stride(dims: &EpisodeDims) -> usize {
        dims.views.iter().map(ViewShape::len).sum::<usize>()
            + dims.tactile_channels
            + 2 * dims.frame
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(EPISODE_MAGIC, EPISODE_VERSION);
        w.str(&self.task);
        w.u64(self.seed);
        w.f64s(&[self.dt]);
        w.u32(self.dims.views.len() as u32);
        for v in &self.dims.views {
            w.u32(v.channels as u32);
            w.u32(v.height as u32);
            w.u32(v.width as u32);
        }
        w.u32(self.dims.tactile_channels as u32);
        w.u32(self.dims.frame as u32);
        w.u64(self.frames.len() as u64);
        for (f, a) in self.frames.iter().zip(&self.actions) {
            for v in &f.views {
                w.f64s(v.data());
            }
            w.f64s(&f.tactile);
            w.f64s(&f.proprio);
            w.f64s(a);
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::open(data, EPISODE_MAGIC, "episode", EPISODE_VERSION)?;
        let task = r.str()?;
        let seed = r.u64()?;
        let dt = r.f64s(1)?[0];
        let nv = r.u32()? as usize;
        let mut views = Vec::with_capacity(nv.min(64));
        for _ in 0..nv {
            let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            views.push(ViewShape::new(c, h, w));
        }
        let dims = EpisodeDims {
            views,
            tactile_channels: r.u32()? as usize,
            frame: r.u32()? as usize,
        };
        let count = r.u64()?;
        let stride = Self::stride(&dims) as u64 * 8;
        let expected = count
            .checked_mul(stride)
            .and_then(|b| b.checked_add(r.position() as u64))
            .ok_or_else(|| FormatError::Corrupt("frame count overflows".into()))?;
        if expected != r.total() as u64 {
            if expected > r.total() as u64 {
                return Err(FormatError::Truncated {
                    expected,
                    actual: r.total() as u64,
                });
            }
            return Err(FormatError::Corrupt(format!(
                "{} bytes after the last frame",
                r.total() as u64 - expected
            )));
        }
        let mut frames = Vec::with_capacity(count as usize);
        let mut actions = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut vs = Vec::with_capacity(dims.views.len());
            for v in &dims.views {
                let t = Tensor::new([v.channels, v.height, v.width], r.f64s(v.len())?)
                    .map_err(|e| FormatError::Corrupt(e.to_string()))?;
                vs.push(t);
            }
            frames.push(Frame {
                views: vs,
                tactile: r.f64s(dims.tactile_channels)?,
                proprio: r.f64s(dims.frame)?,
            });
            actions.push(r.f64s(dims.frame)?);
        }
        Ok(Self {
            task,
            seed,
            dt,
            dims,
            frames,
            actions,
        })
    }

    /// Decodes and checks the header dims against `expected`.
    pub fn from_bytes_expecting(
        data: &[u8],
        expected: &EpisodeDims,
    ) -> std::result::Result<Self, FormatError> {
        let ep = Self::from_bytes(data)?;
        let d = &ep.dims;
        let mismatch = |what: &str, header: usize, want: usize| FormatError::DimMismatch {
            what: what.into(),
            header: header as u64,
            expected: want as u64,
        };
        if d.views.len() != expected.views.len() {
            return Err(mismatch("view count", d.views.len(), expected.views.len()));
        }
        for (i, (a, b)) in d.views.iter().zip(&expected.views).enumerate() {
            if a.len() != b.len() || a != b {
                return Err(mismatch(
                    &format!("view {i} ({a} vs {b}) values"),
                    a.len(),
                    b.len(),
                ));
            }
        }
        if d.tactile_channels != expected.tactile_channels {
            return Err(mismatch(
                "tactile channels",
                d.tactile_channels,
                expected.tactile_channels,
            ));
        }
        if d.frame != expected.frame {
            return Err(mismatch("frame width", d.frame, expected.frame));
        }
        Ok(ep)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: &Path, expected: &EpisodeDims) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_bytes_expecting(&data, expected)
            .map_err(|e| crate::Error::Incompatible(format!("{}: {e}", path.display())))
    }
}

/// Per-frame `[raw, raw - previous raw]`, with zero change at the first frame.
pub fn tactile_rows(frames: &[Frame]) -> Vec<Vec<f64>> {
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut row = f.tactile.clone();
            match t.checked_sub(1) {
                Some(p) => row.extend(f.tactile.iter().zip(&frames[p].tactile).map(|(a, b)| a - b)),
                None => row.extend(std::iter::repeat_n(0.0, f.tactile.len())),
            }
            row
        })
        .collect()
}
