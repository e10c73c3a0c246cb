use crate::config::{ModelConfig, ViewShape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One normalized observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// One `[C, H, W]` image per configured view.
    pub views: Vec<Tensor>,
    /// `[H_p, P]`.
    pub proprio: Tensor,
    /// `[H_t, 2C]`: raw readings then frame deltas.
    pub tactile: Tensor,
}

/// A training sample: an observation plus its supervision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub obs: Observation,
    /// `[H_a, P]`.
    pub actions: Tensor,
    /// `[H_f, 2C]`.
    pub future_tactile: Tensor,
}

/// Stacked model inputs with a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// Per view `[B, L_view, C·p·p]`.
    pub patches: Vec<Tensor>,
    pub proprio: Tensor,
    pub tactile: Tensor,
    pub actions: Option<Tensor>,
    pub future_tactile: Option<Tensor>,
}

/// Splits a `[C, H, W]` image into non-overlapping `p × p` patches,
/// returning `[(H/p)·(W/p), C·p·p]` in row-major patch order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Incompatible(format!(
            "expected a CxHxW image, got shape {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Incompatible(format!(
            "image {c}x{h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let d = image.data();
    let width = c * patch * patch;
    let mut out = Vec::with_capacity(ph * pw * width);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new([ph * pw, width], out)?)
}

fn check_shape(what: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() == want {
        Ok(())
    } else {
        Err(Error::Incompatible(format!(
            "{what}: expected shape {want:?}, got {:?}",
            t.shape()
        )))
    }
}

fn stack(parts: Vec<&Tensor>) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(Tensor::new(shape, data)?)
}

impl Observation {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.views.len() != cfg.views.len() {
            return Err(Error::Incompatible(format!(
                "expected {} views, got {}",
                cfg.views.len(),
                self.views.len()
            )));
        }
        for (i, (v, s)) in self.views.iter().zip(&cfg.views).enumerate() {
            let ViewShape {
                channels,
                height,
                width,
            } = *s;
            check_shape(&format!("view {i}"), v, &[channels, height, width])?;
        }
        check_shape(
            "proprio",
            &self.proprio,
            &[cfg.proprio_history, cfg.action_dim()],
        )?;
        check_shape(
            "tactile",
            &self.tactile,
            &[cfg.tactile_history, cfg.tactile_width()],
        )?;
        Ok(())
    }
}

impl Batch {
    /// Inference batch from observations.
    pub fn from_observations(cfg: &ModelConfig, obs: &[&Observation]) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::Incompatible("empty batch".into()));
        }
        for o in obs {
            o.check(cfg)?;
        }
        let mut patches = Vec::with_capacity(cfg.views.len());
        for v in 0..cfg.views.len() {
            let per: Vec<Tensor> = obs
                .iter()
                .map(|o| patchify(&o.views[v], cfg.patch))
                .collect::<Result<_>>()?;
            patches.push(stack(per.iter().collect())?);
        }
        Ok(Self {
            size: obs.len(),
            patches,
            proprio: stack(obs.iter().map(|o| &o.proprio).collect())?,
            tactile: stack(obs.iter().map(|o| &o.tactile).collect())?,
            actions: None,
            future_tactile: None,
        })
    }

    /// Training batch with targets.
    pub fn from_samples(cfg: &ModelConfig, samples: &[&Sample]) -> Result<Self> {
        let obs: Vec<&Observation> = samples.iter().map(|s| &s.obs).collect();
        let mut b = Self::from_observations(cfg, &obs)?;
        for s in samples {
            check_shape("actions", &s.actions, &[cfg.chunk, cfg.action_dim()])?;
            check_shape(
                "future tactile",
                &s.future_tactile,
                &[cfg.future_horizon, cfg.tactile_width()],
            )?;
        }
        b.actions = Some(stack(samples.iter().map(|s| &s.actions).collect())?);
        b.future_tactile = Some(stack(samples.iter().map(|s| &s.future_tactile).collect())?);
        Ok(b)
    }
}

/// Cross-fades the start of `new` with what remains of the previous chunk.
///
/// Frame `k < blend` becomes `(1 - k/blend)·prev[k] + (k/blend)·new[k]`
/// where `prev[k]` exists; every other frame of `new` passes through.
pub fn temporal_smooth(prev_tail: Option<&Tensor>, new: &Tensor, blend: usize) -> Result<Tensor> {
    let &[len, width] = new.shape() else {
        return Err(Error::Incompatible(format!(
            "chunk must be 2-d, got {:?}",
            new.shape()
        )));
    };
    if blend > len {
        return Err(Error::Incompatible(format!(
            "blend horizon {blend} exceeds chunk length {len}"
        )));
    }
    let mut out = new.clone();
    let Some(prev) = prev_tail else {
        return Ok(out);
    };
    if prev.rank() != 2 || prev.shape()[1] != width {
        return Err(Error::Incompatible(format!(
            "previous chunk {:?} does not match new chunk {:?}",
            prev.shape(),
            new.shape()
        )));
    }
    let overlap = blend.min(prev.shape()[0]);
    for k in 0..overlap {
        let a = k as f64 / blend as f64;
        for j in 0..width {
            let i = k * width + j;
            out.data_mut()[i] = (1.0 - a) * prev.data()[i] + a * new.data()[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_cover_image_in_order() {
        let img = Tensor::from_fn([1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        let two = Tensor::from_fn([2, 2, 2], |i| i as f64);
        assert_eq!(
            patchify(&two, 2).unwrap().row(0),
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
        );
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn zero_blend_passes_new_chunk() {
        let prev = Tensor::full([4, 2], 1.0);
        let new = Tensor::from_fn([4, 2], |i| i as f64);
        assert_eq!(temporal_smooth(Some(&prev), &new, 0).unwrap(), new);
        assert_eq!(temporal_smooth(None, &new, 2).unwrap(), new);
    }

    #[test]
    fn identical_chunks_are_fixed_points() {
        let c = Tensor::from_fn([5, 3], |i| (i as f64).sin());
        let out = temporal_smooth(Some(&c), &c, 4).unwrap();
        assert!(out.max_abs_diff(&c) < 1e-15);
    }

    #[test]
    fn blend_is_linear_cross_fade() {
        let prev = Tensor::from_fn([6, 2], |i| 10.0 + i as f64);
        let new = Tensor::from_fn([6, 2], |i| -(i as f64));
        let b = 4;
        let out = temporal_smooth(Some(&prev), &new, b).unwrap();
        for k in 0..6 {
            for j in 0..2 {
                let i = k * 2 + j;
                let want = if k < b {
                    let a = k as f64 / b as f64;
                    (1.0 - a) * prev.data()[i] + a * new.data()[i]
                } else {
                    new.data()[i]
                };
                assert_eq!(out.data()[i], want);
            }
        }
        assert!(temporal_smooth(Some(&prev), &new, 7).is_err());
    }
}
