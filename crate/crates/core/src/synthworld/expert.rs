use crate::config::WorldConfig;
use crate::synthworld::world::{
    cell_box, decode_offset, step, tactile_clean, EpisodeDims, WorldPhase, WorldState,
    INSERT_CHANNEL,
};
use crate::tensor::Tensor;

fn clip(cfg: &WorldConfig, d: [f64; 2]) -> [f64; 2] {
    let n = d[0].hypot(d[1]);
    if n > cfg.max_step {
        [d[0] * cfg.max_step / n, d[1] * cfg.max_step / n]
    } else {
        d
    }
}

/// Scripted demonstrator.
///
/// Without contact it pursues the centre of the rendered target cell. In
/// contact it moves by the offset decoded from the fingertip reading, and
/// inserts once that offset is under half the tolerance.
pub fn expert_action(cfg: &WorldConfig, dims: &EpisodeDims, s: &WorldState) -> Vec<f64> {
    let mut a = vec![0.0; dims.frame];
    if s.phase == WorldPhase::Done {
        return a;
    }
    let reading = tactile_clean(cfg, dims, s.pos, s.target);
    let d = match decode_offset(cfg, &reading) {
        Some(off) if off[0].hypot(off[1]) < cfg.tolerance / 2.0 => {
            a[INSERT_CHANNEL] = 1.0;
            return a;
        }
        Some(off) => clip(cfg, off),
        None => {
            let c = cell_box(cfg, s.target);
            let centre = [(c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0];
            clip(cfg, [centre[0] - s.pos[0], centre[1] - s.pos[1]])
        }
    };
    a[0] = d[0];
    a[1] = d[1];
    a
}

/// The next `len` expert actions from `s`, zero after the episode ends.
pub fn expert_chunk(cfg: &WorldConfig, dims: &EpisodeDims, s: &WorldState, len: usize) -> Tensor {
    let mut out = Vec::with_capacity(len * dims.frame);
    let mut cur = *s;
    for _ in 0..len {
        let a = expert_action(cfg, dims, &cur);
        cur = step(cfg, dims, &cur, &a).0;
        out.extend(a);
    }
    Tensor::new([len, dims.frame], out).expect("sized by chunk")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthworld::world::initial_state;

    fn setup() -> (WorldConfig, EpisodeDims) {
        (
            WorldConfig::default(),
            EpisodeDims::from_model(&ModelConfig::default()),
        )
    }

    #[test]
    fn inserts_at_target() {
        let (cfg, dims) = setup();
        let mut s = initial_state(&cfg, 0);
        s.pos = s.target;
        s.phase = WorldPhase::Insert;
        let a = expert_action(&cfg, &dims, &s);
        assert_eq!(a[INSERT_CHANNEL], 1.0);
        assert_eq!(step(&cfg, &dims, &s, &a).0.phase, WorldPhase::Done);
    }

    #[test]
    fn far_states_pursue_the_cell_centre() {
        let (cfg, dims) = setup();
        let mut s = initial_state(&cfg, 0);
        s.target = [0.8, 0.15];
        s.pos = [0.1, 0.9];
        let a = expert_action(&cfg, &dims, &s);
        let want = (0.125f64 - 0.9).atan2(0.875 - 0.1);
        assert!((a[1].atan2(a[0]) - want).abs() < 1e-9);
        assert!((a[0].hypot(a[1]) - cfg.max_step).abs() < 1e-15);
    }

    #[test]
    fn chunk_matches_stepping() {
        let (cfg, dims) = setup();
        let s = initial_state(&cfg, 4);
        let c = expert_chunk(&cfg, &dims, &s, 40);
        let mut cur = s;
        for t in 0..40 {
            let a = expert_action(&cfg, &dims, &cur);
            assert_eq!(c.row(t), &a[..]);
            cur = step(&cfg, &dims, &cur, &a).0;
        }
        assert_eq!(cur.phase, WorldPhase::Done);
    }
}
