use super::*;
use crate::nn::sinusoidal;
use crate::tensor::Checker;
use crate::training::losses::composite_loss;
use rand::Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn sample(cfg: &ModelConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, tw) = (cfg.action_dim(), cfg.tactile_width());
    Sample {
        obs: Observation {
            views: cfg
                .views
                .iter()
                .map(|v| rand_tensor(&[v.channels, v.height, v.width], &mut rng))
                .collect(),
            proprio: rand_tensor(&[cfg.proprio_history, p], &mut rng),
            tactile: rand_tensor(&[cfg.tactile_history, tw], &mut rng),
        },
        actions: rand_tensor(&[cfg.chunk, p], &mut rng),
        future_tactile: rand_tensor(&[cfg.future_horizon, tw], &mut rng),
    }
}

fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
    let samples: Vec<Sample> = (0..n).map(|i| sample(cfg, seed * 100 + i as u64)).collect();
    Batch::from_samples(cfg, &samples.iter().collect::<Vec<_>>()).unwrap()
}

fn micro(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..ModelConfig::micro()
    }
}

fn objective(cfg: &ModelConfig) -> Objective {
    Objective::new(
        cfg,
        [10.0, 1.0, 1.0, 1.0],
        [1.0, 1.0],
        ChannelStats::identity(cfg.action_dim()),
    )
}

#[test]
fn output_shapes() {
    let cfg = micro(Variant::Full);
    let m = PolicyModel::new(&cfg, 0).unwrap();
    let bt = batch(&cfg, 3, 1);
    let mut g = Graph::new();
    let b = m.params.bind(&mut g, false);
    let a = g.constant(bt.actions.clone().unwrap());
    let p = g.constant(bt.proprio.clone());
    let (mu, lv) = m.encode_style(&mut g, &b, a, p).unwrap();
    assert_eq!(g.shape(mu), &[3, cfg.latent_dim]);
    assert_eq!(g.shape(lv), &[3, cfg.latent_dim]);
    let out = m
        .forward(&mut g, &b, &bt, Latent::Zero, Phase::Predicted)
        .unwrap();
    assert_eq!(g.shape(out.actions), &[3, cfg.chunk, cfg.action_dim()]);
    assert_eq!(
        g.shape(out.tactile.unwrap()),
        &[3, cfg.future_horizon, cfg.tactile_width()]
    );
}

#[test]
fn desk_visual_token_count() {
    let cfg = ModelConfig::default();
    let m = PolicyModel::new(&cfg, 0).unwrap();
    let bt = batch(&cfg, 1, 2);
    let mut g = Graph::new();
    let b = m.params.bind(&mut g, false);
    let e = m.embed_observations(&mut g, &b, &bt).unwrap();
    assert_eq!(g.shape(e.visual), &[1, 8, cfg.dim]);
    assert_eq!(
        g.shape(e.tactile.unwrap()),
        &[1, cfg.tactile_history, cfg.dim]
    );
}

#[test]
fn zero_images_embed_to_positions() {
    let cfg = micro(Variant::Full);
    let m = PolicyModel::new(&cfg, 0).unwrap();
    let mut s = sample(&cfg, 3);
    for v in &mut s.obs.views {
        *v = Tensor::zeros(v.shape().to_vec());
    }
    let bt = Batch::from_samples(&cfg, &[&s]).unwrap();
    let mut g = Graph::new();
    let b = m.params.bind(&mut g, false);
    let e = m.embed_observations(&mut g, &b, &bt).unwrap();
    let pe = sinusoidal(cfg.visual_tokens(), cfg.dim);
    assert_eq!(g.value(e.visual).data(), pe.data());
}

#[test]
fn zero_weights_give_zero_outputs() {
    let cfg = micro(Variant::Full);
    let mut m = PolicyModel::new(&cfg, 0).unwrap();
    m.params.fill(0.0);
    let bt = batch(&cfg, 2, 4);
    let mut g = Graph::new();
    let b = m.params.bind(&mut g, false);
    let noise = gaussian(2, cfg.latent_dim, 9);
    let out = m
        .forward(&mut g, &b, &bt, Latent::Posterior(&noise), Phase::Predicted)
        .unwrap();
    for v in [
        out.mu.unwrap(),
        out.logvar.unwrap(),
        out.actions,
        out.tactile.unwrap(),
    ] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn reparameterize_cases() {
    let mut g = Graph::new();
    let mu = g.constant(Tensor::from_fn([3], |i| i as f64 - 1.0));
    let lv = g.constant(Tensor::from_fn([3], |i| i as f64 * 0.3));
    let zero = g.constant(Tensor::zeros([3]));
    let z = reparameterize(&mut g, mu, lv, zero).unwrap();
    assert_eq!(g.value(z), g.value(mu));
    let n = g.constant(Tensor::from_fn([3], |i| 0.5 - i as f64));
    let z = reparameterize(&mut g, zero, zero, n).unwrap();
    assert_eq!(g.value(z), g.value(n));
}

#[test]
fn reparameterize_logvar_gradient() {
    let noise = Tensor::from_fn([4], |i| 0.3 * i as f64 - 0.4);
    let lv = Tensor::from_fn([4], |i| 0.2 * i as f64 - 0.3);
    let mut g = Graph::new();
    let mu = g.constant(Tensor::zeros([4]));
    let l = g.param(lv.clone());
    let nv = g.constant(noise.clone());
    let z = reparameterize(&mut g, mu, l, nv).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    for (i, d) in g.grad(l).unwrap().iter().enumerate() {
        let want = 0.5 * (lv.data()[i] / 2.0).exp() * noise.data()[i];
        assert!((d - want).abs() < 1e-15);
    }
    let r = crate::tensor::finite_diff_check(
        |g, v| {
            let mu = g.constant(Tensor::zeros([4]));
            let n = g.constant(noise.clone());
            let z = reparameterize(g, mu, v[0], n)?;
            g.sum(z)
        },
        &[lv],
    )
    .unwrap();
    assert!(r.passes(1e-8), "{r:?}");
}

#[test]
fn memory_grows_along_the_ladder() {
    let cfg = ModelConfig::default();
    let counts: Vec<MemoryLayout> = Variant::ALL
        .iter()
        .map(|&variant| {
            PolicyModel::new(
                &ModelConfig {
                    variant,
                    ..cfg.clone()
                },
                0,
            )
            .unwrap()
            .memory_layout()
        })
        .collect();
    let action: Vec<usize> = counts.iter().map(|c| c.action_head).collect();
    assert_eq!(action, vec![12, 18, 18, 18, 24, 24]);
    let tactile: Vec<Option<usize>> = counts.iter().map(|c| c.tactile_head).collect();
    assert_eq!(
        tactile,
        vec![None, None, None, Some(18), Some(18), Some(18)]
    );
    let params: Vec<usize> = Variant::ALL
        .iter()
        .map(|&variant| {
            PolicyModel::new(
                &ModelConfig {
                    variant,
                    ..cfg.clone()
                },
                0,
            )
            .unwrap()
            .params
            .numel()
        })
        .collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]), "{params:?}");
}

#[test]
fn memory_layout_matches_graph() {
    for variant in Variant::ALL {
        let cfg = micro(variant);
        let m = PolicyModel::new(&cfg, 1).unwrap();
        let bt = batch(&cfg, 1, 5);
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let e = m.embed_observations(&mut g, &b, &bt).unwrap();
        let fused = m.observation_tokens(&mut g, &b, &e, 1).unwrap();
        let want = m.memory_layout().action_head;
        let extra = if variant.feeds_back_tactile() {
            cfg.future_horizon
        } else {
            0
        };
        assert_eq!(
            1 + cfg.proprio_history + g.shape(fused)[1] + extra,
            want,
            "{variant}"
        );
    }
}

#[test]
fn predicted_phase_needs_tactile_head() {
    for variant in [
        Variant::WithoutTouch,
        Variant::NaiveTouch,
        Variant::CrossAttention,
    ] {
        let cfg = micro(variant);
        let m = PolicyModel::new(&cfg, 0).unwrap();
        let bt = batch(&cfg, 1, 6);
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        assert!(matches!(
            m.forward(&mut g, &b, &bt, Latent::Zero, Phase::Predicted),
            Err(Error::Incompatible(_))
        ));
    }
}

#[test]
fn loss_bundle_is_consistent() {
    for variant in Variant::ALL {
        let cfg = micro(variant);
        let m = PolicyModel::new(&cfg, 2).unwrap();
        let bt = batch(&cfg, 2, 7);
        let obj = objective(&cfg);
        let noise = gaussian(2, cfg.latent_dim, 1);
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, true);
        let (total, bundle) = m
            .forward_train(&mut g, &b, &bt, &noise, Phase::GroundTruth, &obj)
            .unwrap();
        assert_eq!(
            bundle.parts.tactile.is_some(),
            variant.has_tactile_head(),
            "{variant}"
        );
        assert_eq!(g.value(total).item().unwrap(), bundle.total);
        assert_eq!(composite_loss(&bundle.parts, obj.weights), bundle.total);
    }
}

#[test]
fn perfect_predictions_have_zero_supervised_loss() {
    let cfg = micro(Variant::Full);
    let mut m = PolicyModel::new(&cfg, 0).unwrap();
    m.params.fill(0.0);
    let mut bt = batch(&cfg, 2, 8);
    bt.actions = Some(Tensor::zeros([2, cfg.chunk, cfg.action_dim()]));
    bt.future_tactile = Some(Tensor::zeros([2, cfg.future_horizon, cfg.tactile_width()]));
    let noise = gaussian(2, cfg.latent_dim, 1);
    let mut g = Graph::new();
    let b = m.params.bind(&mut g, false);
    let (_, bundle) = m
        .forward_train(&mut g, &b, &bt, &noise, Phase::Predicted, &objective(&cfg))
        .unwrap();
    assert_eq!(bundle.parts.joint, 0.0);
    assert_eq!(bundle.parts.tactile, Some(0.0));
    assert_eq!(bundle.parts.arm, 0.0);
    assert_eq!(bundle.parts.kl, 0.0);
}

#[test]
fn forward_is_deterministic() {
    let cfg = micro(Variant::Full);
    let run = || {
        let m = PolicyModel::new(&cfg, 3).unwrap();
        let bt = batch(&cfg, 2, 9);
        let noise = gaussian(2, cfg.latent_dim, 4);
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, true);
        let (total, bundle) = m
            .forward_train(&mut g, &b, &bt, &noise, Phase::Predicted, &objective(&cfg))
            .unwrap();
        g.backward(total).unwrap();
        let grads: Vec<u64> = b
            .vars()
            .iter()
            .flat_map(|&v| {
                g.grad(v)
                    .unwrap_or(&[])
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect();
        (bundle.total.to_bits(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn inference_latent_modes() {
    let cfg = micro(Variant::Full);
    let m = PolicyModel::new(&cfg, 5).unwrap();
    let bt = batch(&cfg, 1, 10);
    let a = m.infer(&bt, Latent::Zero).unwrap();
    let b = m.infer(&bt, Latent::Zero).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[1, cfg.chunk, cfg.action_dim()]);
    let s1 = m.infer(&bt, Latent::Sampled(1)).unwrap();
    let s2 = m.infer(&bt, Latent::Sampled(2)).unwrap();
    assert!(s1.max_abs_diff(&s2) > 0.0);
}

#[test]
fn feedback_source_changes_actions() {
    let cfg = micro(Variant::Full);
    let m = PolicyModel::new(&cfg, 6).unwrap();
    let bt = batch(&cfg, 1, 11);
    let actions = |phase| {
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let out = m.forward(&mut g, &b, &bt, Latent::Zero, phase).unwrap();
        g.value(out.actions).clone()
    };
    assert!(actions(Phase::GroundTruth).max_abs_diff(&actions(Phase::Predicted)) > 0.0);
}

#[test]
fn shared_fusion_drops_second_stage() {
    let cfg = ModelConfig {
        share_fusion: true,
        ..micro(Variant::Full)
    };
    let shared = PolicyModel::new(&cfg, 0).unwrap();
    let ar = PolicyModel::new(&micro(Variant::AutoRegressive), 0).unwrap();
    assert_eq!(shared.params.numel(), ar.params.numel());
    assert!(shared.params.find("fusion2.v_from_t.q.weight").is_none());
}

#[test]
fn micro_model_gradient_on_sampled_parameters() {
    let cfg = micro(Variant::Full);
    let m = PolicyModel::new(&cfg, 7).unwrap();
    let bt = batch(&cfg, 1, 12);
    let obj = objective(&cfg);
    let noise = gaussian(1, cfg.latent_dim, 2);
    let inputs = m.params.tensors().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let coords: Vec<(usize, usize)> = (0..20)
        .map(|_| {
            let i = rng.random_range(0..inputs.len());
            (i, rng.random_range(0..inputs[i].len()))
        })
        .collect();
    let r = Checker::default()
        .check_coords(
            |g, v| {
                let b = Bound::from_vars(v.to_vec());
                let (total, _) = m
                    .forward_train(g, &b, &bt, &noise, Phase::Predicted, &obj)
                    .map_err(|e| crate::tensor::TensorError::Invalid {
                        op: "forward_train",
                        reason: e.to_string(),
                    })?;
                Ok(total)
            },
            &inputs,
            &coords,
        )
        .unwrap();
    assert!(r.passes(1e-3), "{r:?}");
}
