use crate::checkpoint::{Checkpoint, FormatError};
use crate::tensor::{Graph, Result, Tensor, Var};

/// Per-channel affine normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Mean and population standard deviation of each column.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, width: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            for j in 0..width {
                sum[j] += r[j];
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(width);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &rows {
            for j in 0..width {
                sq[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / n as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// In place over consecutive rows of `width()` values.
    pub fn normalize(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(self.width()) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn denormalize(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(self.width()) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
    }

    pub fn normalized(&self, t: &Tensor) -> Tensor {
        let mut t = t.clone();
        self.normalize(t.data_mut());
        t
    }

    pub fn denormalized(&self, t: &Tensor) -> Tensor {
        let mut t = t.clone();
        self.denormalize(t.data_mut());
        t
    }

    /// `x·std + mean` on the graph, for `x: [.., width]`.
    pub fn denormalize_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).len() / self.width();
        let std = Tensor::new([self.width()], self.std.clone())?;
        let mean = Tensor::new([self.width()], self.mean.clone())?;
        let std = g.constant(std);
        let mean = g.constant(mean);
        let s = g.tile(std, rows)?;
        let s = g.reshape(s, shape.clone())?;
        let m = g.tile(mean, rows)?;
        let m = g.reshape(m, shape)?;
        let y = g.mul(x, s)?;
        g.add(y, m)
    }
}

/// Statistics for every normalized stream.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub proprio: ChannelStats,
    pub tactile: ChannelStats,
    pub action: ChannelStats,
}

impl NormStats {
    pub fn identity(proprio: usize, tactile: usize, action: usize) -> Self {
        Self {
            proprio: ChannelStats::identity(proprio),
            tactile: ChannelStats::identity(tactile),
            action: ChannelStats::identity(action),
        }
    }

    fn streams(&self) -> [(&'static str, &ChannelStats); 3] {
        [
            ("proprio", &self.proprio),
            ("tactile", &self.tactile),
            ("action", &self.action),
        ]
    }

    pub fn to_blobs(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, s) in self.streams() {
            let w = s.width();
            out.push((
                format!("norm.{name}.mean"),
                Tensor::new([w], s.mean.clone()).expect("width > 0"),
            ));
            out.push((
                format!("norm.{name}.std"),
                Tensor::new([w], s.std.clone()).expect("width > 0"),
            ));
        }
        out
    }

    pub fn from_checkpoint(c: &Checkpoint) -> std::result::Result<Self, FormatError> {
        let get = |stream: &str| -> std::result::Result<ChannelStats, FormatError> {
            let fetch = |field: &str| {
                let name = format!("norm.{stream}.{field}");
                c.get(&name)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| FormatError::Corrupt(format!("missing {name}")))
            };
            Ok(ChannelStats {
                mean: fetch("mean")?,
                std: fetch("std")?,
            })
        };
        Ok(Self {
            proprio: get("proprio")?,
            tactile: get("tactile")?,
            action: get("action")?,
        })
    }
}
