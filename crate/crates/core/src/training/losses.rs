use crate::config::ModelConfig;
use crate::tensor::{Graph, Result, TensorError, Var};

/// `0.5·Σ(exp(lv) + mu² - 1 - lv)` over the latent axis, averaged over the
/// batch. Unbatched `[Z]` inputs count as a batch of one.
pub fn kl_diag_gaussian(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let batch = match g.shape(mu) {
        [_] => 1,
        [b, _] => *b,
        s => {
            return Err(TensorError::Invalid {
                op: "kl",
                reason: format!("expected [Z] or [B, Z], got {s:?}"),
            })
        }
    };
    let e = g.exp(logvar)?;
    let m2 = g.square(mu)?;
    let t = g.add(e, m2)?;
    let t = g.sub(t, 1.0)?;
    let t = g.sub(t, logvar)?;
    let s = g.sum(t)?;
    g.mul(s, 0.5 / batch as f64)
}

/// Mean absolute error over every entry.
pub fn l1(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Planar chain with unit links over the first (up to) three joints of each
/// arm group. Pose is `(x, y, 0)`; rotation is the axis-angle `(0, 0, Σθ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFk {
    /// `(offset, joints)` of each arm inside an action frame.
    pub arms: Vec<(usize, usize)>,
    /// Joint angles beyond `±joint_limit` are counted as violations.
    pub joint_limit: f64,
}

impl PlanarFk {
    pub const MAX_JOINTS: usize = 3;

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            arms: cfg
                .arm_groups()
                .into_iter()
                .filter(|&(_, len)| len > 0)
                .map(|(off, len)| (off, len.min(Self::MAX_JOINTS)))
                .collect(),
            joint_limit: std::f64::consts::PI,
        }
    }

    /// Position and rotation of one arm for plain joint values.
    pub fn pose(angles: &[f64]) -> ([f64; 3], [f64; 3]) {
        let (mut x, mut y, mut phi) = (0.0, 0.0, 0.0);
        for &a in angles.iter().take(Self::MAX_JOINTS) {
            phi += a;
            x += phi.cos();
            y += phi.sin();
        }
        ([x, y, 0.0], [0.0, 0.0, phi])
    }

    /// Number of joint values outside the limits in frames of width `frame`.
    pub fn violations(&self, data: &[f64], frame: usize) -> usize {
        data.chunks_exact(frame)
            .map(|f| {
                self.arms
                    .iter()
                    .flat_map(|&(off, n)| &f[off..off + n])
                    .filter(|a| a.abs() > self.joint_limit)
                    .count()
            })
            .sum()
    }

    /// Per arm `(x, y, phi)`, each shaped `[.., 1]` for actions `[.., P]`.
    fn forward(&self, g: &mut Graph, actions: Var) -> Result<Vec<(Var, Var, Var)>> {
        let axis = g.shape(actions).len() - 1;
        let mut out = Vec::with_capacity(self.arms.len());
        for &(off, n) in &self.arms {
            let mut phi: Option<Var> = None;
            let (mut x, mut y): (Option<Var>, Option<Var>) = (None, None);
            for j in 0..n {
                let a = g.slice(actions, axis, off + j, off + j + 1)?;
                let p = match phi {
                    None => a,
                    Some(p) => g.add(p, a)?,
                };
                let (c, s) = (g.cos(p)?, g.sin(p)?);
                x = Some(match x {
                    None => c,
                    Some(x) => g.add(x, c)?,
                });
                y = Some(match y {
                    None => s,
                    Some(y) => g.add(y, s)?,
                });
                phi = Some(p);
            }
            out.push((
                x.expect("arm has a joint"),
                y.expect("arm has a joint"),
                phi.expect("arm has a joint"),
            ));
        }
        Ok(out)
    }
}

/// `λ1·mean‖Δp‖² + λ2·mean‖Δr‖₁` over frames and arms, on denormalized actions.
pub fn arm_loss(
    g: &mut Graph,
    fk: &PlanarFk,
    pred: Var,
    target: Var,
    lambdas: [f64; 2],
) -> Result<Var> {
    let (p, t) = (fk.forward(g, pred)?, fk.forward(g, target)?);
    let axis = g.shape(pred).len() - 1;
    let mut pos = Vec::with_capacity(p.len());
    let mut rot = Vec::with_capacity(p.len());
    for ((px, py, pr), (tx, ty, tr)) in p.into_iter().zip(t) {
        let dx = g.sub(px, tx)?;
        let dy = g.sub(py, ty)?;
        let dx2 = g.square(dx)?;
        let dy2 = g.square(dy)?;
        pos.push(g.add(dx2, dy2)?);
        let dr = g.sub(pr, tr)?;
        rot.push(g.abs(dr)?);
    }
    let pos = g.concat(&pos, axis)?;
    let rot = g.concat(&rot, axis)?;
    let pos = g.mean(pos)?;
    let rot = g.mean(rot)?;
    let pos = g.mul(pos, lambdas[0])?;
    let rot = g.mul(rot, lambdas[1])?;
    g.add(pos, rot)
}

/// Each loss term of one forward pass. `tactile` is `None` when the variant
/// has no forecasting head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub kl: f64,
    pub joint: f64,
    pub tactile: Option<f64>,
    pub arm: f64,
}

/// `w1·KL + w2·JA + w3·tactile + w4·arm`; an absent tactile term adds zero.
///
/// The evaluation order matches the graph built by
/// [`PolicyModel::forward_train`](crate::policy::PolicyModel::forward_train),
/// so the two agree bit for bit.
pub fn composite_loss(parts: &LossParts, w: [f64; 4]) -> f64 {
    let mut total = w[0] * parts.kl;
    total += w[1] * parts.joint;
    total += w[2] * parts.tactile.unwrap_or(0.0);
    total += w[3] * parts.arm;
    total
}

/// Loss parts plus their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub total: f64,
    pub parts: LossParts,
    /// Joint values outside the kinematic limits in the predicted chunk.
    pub fk_violations: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([3]));
        let k = kl_diag_gaussian(&mut g, z, z).unwrap();
        assert_eq!(g.value(k).item(), Some(0.0));
        let mu = g.constant(t(&[2], &[1.0, 0.0]));
        let lv = g.constant(Tensor::zeros([2]));
        let k = kl_diag_gaussian(&mut g, mu, lv).unwrap();
        assert_eq!(g.value(k).item(), Some(0.5));
        // batch mean
        let mu = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let lv = g.constant(Tensor::zeros([2, 2]));
        let k = kl_diag_gaussian(&mut g, mu, lv).unwrap();
        assert_eq!(g.value(k).item(), Some(0.25));
    }

    #[test]
    fn kl_gradient() {
        let mu = t(&[2, 3], &[0.3, -0.2, 0.9, 1.1, -0.7, 0.05]);
        let lv = t(&[2, 3], &[-0.4, 0.2, 0.1, 0.6, -1.0, 0.3]);
        let r = finite_diff_check(|g, v| kl_diag_gaussian(g, v[0], v[1]), &[mu, lv]).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn l1_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([2, 4], |i| i as f64));
        let b = g.constant(Tensor::from_fn([2, 4], |i| i as f64 + 0.3));
        let same = l1(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item(), Some(0.0));
        let off = l1(&mut g, a, b).unwrap();
        assert!((g.value(off).item().unwrap() - 0.3).abs() < 1e-15);
        let c = g.constant(t(&[2, 4], &[1.0, -1.0, 0.0, 2.0, 0.5, 0.5, 3.0, -2.0]));
        let z = g.constant(Tensor::zeros([2, 4]));
        let v = l1(&mut g, c, z).unwrap();
        assert_eq!(g.value(v).item(), Some(10.0 / 8.0));
    }

    #[test]
    fn l1_gradient_away_from_ties() {
        let p = Tensor::from_fn([3, 2], |i| i as f64 * 0.37 - 0.8);
        let r = finite_diff_check(
            |g, v| {
                let target = g.constant(Tensor::from_fn([3, 2], |i| (i as f64 * 0.91).sin()));
                l1(g, v[0], target)
            },
            &[p],
        )
        .unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn planar_pose() {
        let (p, r) = PlanarFk::pose(&[0.0, 0.0, 0.0]);
        assert_eq!(p, [3.0, 0.0, 0.0]);
        assert_eq!(r, [0.0, 0.0, 0.0]);
        let (p, r) = PlanarFk::pose(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0, 9.0]);
        assert!(p[0].abs() < 1e-15 && (p[1] - 3.0).abs() < 1e-15);
        assert_eq!(r[2], std::f64::consts::FRAC_PI_2);
    }

    fn fk() -> PlanarFk {
        PlanarFk::from_config(&ModelConfig::default())
    }

    #[test]
    fn arm_loss_zero_for_equal_and_matches_manual() {
        let fk = fk();
        let a = Tensor::from_fn([2, 3, 6], |i| (i as f64 * 0.3).sin());
        let mut g = Graph::new();
        let p = g.constant(a.clone());
        let l = arm_loss(&mut g, &fk, p, p, [1.0, 1.0]).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));

        // manual recomputation through the plain pose function
        let b = Tensor::from_fn([2, 3, 6], |i| (i as f64 * 0.7).cos());
        let q = g.constant(b.clone());
        let l = arm_loss(&mut g, &fk, p, q, [0.7, 1.3]).unwrap();
        let (mut pos, mut rot, mut n) = (0.0, 0.0, 0.0);
        for (fa, fb) in a.data().chunks(6).zip(b.data().chunks(6)) {
            for &(off, len) in &fk.arms {
                let (pa, ra) = PlanarFk::pose(&fa[off..off + len]);
                let (pb, rb) = PlanarFk::pose(&fb[off..off + len]);
                pos += (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2);
                rot += (ra[2] - rb[2]).abs();
                n += 1.0;
            }
        }
        let want = 0.7 * pos / n + 1.3 * rot / n;
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn arm_loss_gradient() {
        let fk = fk();
        let a = Tensor::from_fn([2, 6], |i| (i as f64 * 1.3).sin());
        let r = finite_diff_check(
            |g, v| {
                let target = g.constant(Tensor::from_fn([2, 6], |i| (i as f64 * 0.4).cos()));
                arm_loss(g, &fk, v[0], target, [1.0, 0.5])
            },
            &[a],
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn violations_are_counted() {
        let fk = fk();
        let frame = [4.0, 0.0, -3.5, 0.0, 0.1, 0.0];
        assert_eq!(fk.violations(&frame, 6), 2);
    }

    #[test]
    fn composite_arithmetic() {
        let parts = LossParts {
            kl: 0.1,
            joint: 0.2,
            tactile: Some(0.3),
            arm: 0.4,
        };
        assert!((composite_loss(&parts, [1.0; 4]) - 1.0).abs() < 1e-15);
        let absent = LossParts {
            tactile: None,
            ..parts
        };
        assert_eq!(
            composite_loss(&absent, [2.0, 3.0, 0.0, 5.0]),
            2.0 * 0.1 + 3.0 * 0.2 + 5.0 * 0.4
        );
        let base = composite_loss(&parts, [1.0, 1.0, 1.0, 1.0]);
        let doubled = composite_loss(&parts, [1.0, 2.0, 1.0, 1.0]);
        assert!((doubled - base - 0.2).abs() < 1e-15);
    }
}
