use super::*;
use crate::config::{one_block_scene, ModelConfig, SceneConfig, PROPRIO_DIM};
use crate::wm::DecoderKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        deter: 12,
        factors: 4,
        classes: 4,
        object_latent: 8,
        extractor_hidden: vec![10],
        image_feature: 10,
        proprio_feature: 4,
        mlp_hidden: vec![12],
        encoder_depth: 4,
        object_decoder_depth: 4,
        monolithic_decoder_depth: 4,
        capacity_match_tolerance: 0.1,
        kl_balance: 0.8,
        free_bits: 0.0,
    }
}

fn tiny_scene() -> SceneConfig {
    one_block_scene(8)
}

fn tiny_model(seed: u64) -> WorldModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WorldModel::new(&mut rng, &tiny_cfg(), &tiny_scene(), 3, DecoderKind::Object).unwrap()
}

fn tiny_head(seed: u64, state_dim: usize) -> BehaviorHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BehaviorHead::new(&mut rng, "explore", state_dim, 3, &[16], 0.1, 100).unwrap()
}

#[test]
fn lambda_returns_match_the_hand_recursion_example() {
    let r = lambda_returns(&[1.0, 1.0], &[0.0, 0.0, 10.0], 0.9, 0.5).unwrap();
    assert_eq!(r.len(), 2);
    assert!((r[1] - 10.0).abs() < 1e-12);
    assert!((r[0] - 5.5).abs() < 1e-12);
}

#[test]
fn lambda_zero_is_the_one_step_bootstrap() {
    let rewards = [0.3, -0.7, 1.1];
    let values = [5.0, 2.0, -1.0, 4.0];
    let g = 0.97;
    let r = lambda_returns(&rewards, &values, g, 0.0).unwrap();
    for t in 0..3 {
        assert!((r[t] - (rewards[t] + g * values[t + 1])).abs() < 1e-12);
    }
}

#[test]
fn lambda_one_is_the_discounted_sum_with_bootstrap() {
    let rewards = [1.0, 2.0, 3.0];
    let values = [9.0, 9.0, 9.0, 4.0];
    let g = 0.9;
    let r = lambda_returns(&rewards, &values, g, 1.0).unwrap();
    // R_t = sum_{k>=t} g^{k-t} r_{k+1} + g^{H-t} v_H
    let expect0 = 1.0 + g * (2.0 + g * (3.0 + g * 4.0));
    let expect2 = 3.0 + g * 4.0;
    assert!((r[0] - expect0).abs() < 1e-12);
    assert!((r[2] - expect2).abs() < 1e-12);
}

#[test]
fn lambda_returns_validate_inputs() {
    assert!(lambda_returns(&[1.0], &[0.0, 0.0], -0.1, 0.5).is_err());
    assert!(lambda_returns(&[1.0], &[0.0, 0.0], 0.9, 1.5).is_err());
    assert!(lambda_returns(&[1.0], &[0.0], 0.9, 0.5).is_err());
    assert!(lambda_returns(&[1.0], &[0.0, 0.0, 0.0], 0.9, 0.5).is_err());
}

#[test]
fn returns_scale_linearly_with_rewards() {
    // with zero values, scaling rewards by c scales every return by c, so a
    // greedy ranking over actions is invariant to positive reward scaling
    let rewards = [0.2, -1.0, 0.5, 0.9];
    let values = [0.0; 5];
    let base = lambda_returns(&rewards, &values, 0.99, 0.95).unwrap();
    let scaled_r: Vec<f64> = rewards.iter().map(|r| r * 7.5).collect();
    let scaled = lambda_returns(&scaled_r, &values, 0.99, 0.95).unwrap();
    for (b, s) in base.iter().zip(scaled.iter()) {
        assert!((s - 7.5 * b).abs() < 1e-9);
    }
}

#[test]
fn tensor_returns_match_the_scalar_path_per_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, b) = (6, 4);
    let rewards: Vec<Vec<f64>> = (0..h)
        .map(|_| (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let values: Vec<Vec<f64>> = (0..=h)
        .map(|_| (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let rt: Vec<Tensor> = rewards
        .iter()
        .map(|r| Tensor::constant(ArrayD::from_shape_vec(vec![b], r.clone()).unwrap()))
        .collect();
    let vt: Vec<Tensor> = values
        .iter()
        .map(|v| Tensor::constant(ArrayD::from_shape_vec(vec![b], v.clone()).unwrap()))
        .collect();
    let out = lambda_returns_tensor(&rt, &vt, 0.99, 0.95).unwrap();
    for col in 0..b {
        let r_col: Vec<f64> = rewards.iter().map(|r| r[col]).collect();
        let v_col: Vec<f64> = values.iter().map(|v| v[col]).collect();
        let expect = lambda_returns(&r_col, &v_col, 0.99, 0.95).unwrap();
        for t in 0..h {
            assert_eq!(out[t].data()[[col]], expect[t]);
        }
    }
}

proptest! {
    #[test]
    fn returns_equal_an_independent_backward_recursion(
        rewards in proptest::collection::vec(-10.0f64..10.0, 1..32),
        tail in proptest::collection::vec(-10.0f64..10.0, 1..33),
        gamma in 0.0f64..1.0,
        lambda in 0.0f64..1.0,
    ) {
        let h = rewards.len();
        let mut values = tail.clone();
        values.resize(h + 1, 0.25);
        let got = lambda_returns(&rewards, &values, gamma, lambda).unwrap();
        // oracle: same recursion written out independently
        let mut expect = vec![0.0; h + 1];
        expect[h] = values[h];
        for t in (0..h).rev() {
            expect[t] = rewards[t]
                + gamma * ((1.0 - lambda) * values[t + 1] + lambda * expect[t + 1]);
        }
        for t in 0..h {
            prop_assert_eq!(got[t], expect[t]);
        }
    }
}

#[test]
fn returns_agree_with_the_weighted_n_step_definition() {
    // R^l_t = (1-l) sum_{n=1}^{H-t-1} l^{n-1} G_n + l^{H-t-1} G_{H-t},
    // G_n = sum_{k=1..n} g^{k-1} r_{t+k} + g^n v_{t+n}
    let rewards = [0.4, -0.2, 0.9, 0.1];
    let values = [1.0, -0.5, 0.3, 0.8, 2.0];
    let (g, l) = (0.9, 0.7);
    let got = lambda_returns(&rewards, &values, g, l).unwrap();
    let h = rewards.len();
    for t in 0..h {
        let n_step = |n: usize| -> f64 {
            let mut acc = 0.0;
            for k in 1..=n {
                acc += g.powi(k as i32 - 1) * rewards[t + k - 1];
            }
            acc + g.powi(n as i32) * values[t + n]
        };
        let span = h - t;
        let mut expect = 0.0;
        for n in 1..span {
            expect += (1.0 - l) * l.powi(n as i32 - 1) * n_step(n);
        }
        expect += l.powi(span as i32 - 1) * n_step(span);
        assert!((got[t] - expect).abs() < 1e-9, "t={t}: {} vs {expect}", got[t]);
    }
}

#[test]
fn sampled_log_density_matches_the_closed_form() {
    // rig a bias-only actor so mean and std are known exactly
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let actor = GaussianActor::new(&mut rng, 1, &[], 3, 0.1);
    let mut params = Vec::new();
    actor.params("a", &mut params);
    let (w_name, w) = &params[0];
    let (b_name, bias) = &params[1];
    assert_eq!(w_name, "a.l0.w");
    assert_eq!(b_name, "a.l0.b");
    w.set_data(ArrayD::zeros(vec![1, 6]));
    let raw = [0.3, -0.8, 1.2, -0.4, 0.0, 0.9];
    bias.set_data(ArrayD::from_shape_vec(vec![6], raw.to_vec()).unwrap());

    let feat = Tensor::zeros(&[1, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (action, log_prob) = actor.sample(&feat, &mut rng);
    assert_eq!(action.shape(), &[1, 3]);
    assert_eq!(log_prob.shape(), &[1]);

    let softplus = |x: f64| x.max(0.0) + (1.0 + (-x.abs()).exp()).ln();
    let mut expect = 0.0;
    for j in 0..3 {
        let mean = raw[j];
        let std = softplus(raw[3 + j]) + 0.1;
        let a = action.data()[[0, j]];
        assert!(a.abs() < 1.0);
        let u = a.atanh();
        let eps = (u - mean) / std;
        expect += -std.ln() - 0.5 * crate::wm::loss::LN_2PI - 0.5 * eps * eps;
        expect -= (1.0 - a * a + 1e-6).ln();
    }
    assert!(
        (log_prob.data()[[0]] - expect).abs() < 1e-8,
        "{} vs {expect}",
        log_prob.data()[[0]]
    );
}

#[test]
fn mean_action_is_tanh_of_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let actor = GaussianActor::new(&mut rng, 1, &[], 2, 0.1);
    let mut params = Vec::new();
    actor.params("a", &mut params);
    params[0].1.set_data(ArrayD::zeros(vec![1, 4]));
    params[1]
        .1
        .set_data(ArrayD::from_shape_vec(vec![4], vec![0.7, -2.0, 0.0, 0.0]).unwrap());
    let a = actor.mean_action(&Tensor::zeros(&[1, 1]));
    assert!((a.data()[[0, 0]] - 0.7f64.tanh()).abs() < 1e-12);
    assert!((a.data()[[0, 1]] - (-2.0f64).tanh()).abs() < 1e-12);
}

#[test]
fn environment_actions_stay_in_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let actor = GaussianActor::new(&mut rng, 4, &[8], 3, 0.1);
    let feat = Tensor::constant(ArrayD::from_shape_fn(vec![5, 4], |_| rng.gen_range(-2.0..2.0)));
    let a = actor.act(&feat, &mut rng, 0.5);
    assert_eq!(a.shape(), &[5, 3]);
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));

    // same rng state, same draw
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(actor.act(&feat, &mut r1, 0.3), actor.act(&feat, &mut r2, 0.3));
}

#[test]
fn imagine_rolls_the_requested_horizon() {
    let wm = tiny_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let actor = GaussianActor::new(&mut rng, wm.state_dim(), &[16], 3, 0.1);
    let start = wm.initial_state(2);
    let traj = imagine(&wm, &actor, &start, 1, &mut rng, SampleMode::Sample).unwrap();
    assert_eq!(traj.feats.len(), 2);
    assert_eq!(traj.actions.len(), 1);
    assert_eq!(traj.log_probs.len(), 1);
    assert_eq!(traj.horizon(), 1);
    assert_eq!(traj.batch_size(), 2);
    assert_eq!(traj.feats[0].shape(), &[2, wm.state_dim()]);
    assert_eq!(traj.actions[0].shape(), &[2, 3]);

    assert!(imagine(&wm, &actor, &start, 0, &mut rng, SampleMode::Sample).is_err());
}

#[test]
fn imagine_is_deterministic_under_a_fixed_rng() {
    let wm = tiny_model(0);
    let mut arng = ChaCha8Rng::seed_from_u64(2);
    let actor = GaussianActor::new(&mut arng, wm.state_dim(), &[16], 3, 0.1);
    let start = wm.initial_state(2);
    let mut r1 = ChaCha8Rng::seed_from_u64(11);
    let mut r2 = ChaCha8Rng::seed_from_u64(11);
    let a = imagine(&wm, &actor, &start, 5, &mut r1, SampleMode::Sample).unwrap();
    let b = imagine(&wm, &actor, &start, 5, &mut r2, SampleMode::Sample).unwrap();
    for t in 0..=5 {
        assert_eq!(a.feats[t].data().clone(), b.feats[t].data().clone());
    }
}

#[test]
fn parallel_trajectories_do_not_interact() {
    let wm = tiny_model(0);
    let mut arng = ChaCha8Rng::seed_from_u64(2);
    let actor = GaussianActor::new(&mut arng, wm.state_dim(), &[16], 3, 0.1);
    let z_dim = 16;

    let start_a = wm.initial_state(3);
    let mut r1 = ChaCha8Rng::seed_from_u64(4);
    let ta = imagine(&wm, &actor, &start_a, 4, &mut r1, SampleMode::Sample).unwrap();

    // perturb only row 1 of the starting deterministic state
    let mut h = ndarray::Array2::<f64>::zeros((3, 12));
    for j in 0..12 {
        h[[1, j]] = 0.5;
    }
    let start_b = crate::wm::LatentState {
        h: Tensor::constant(h.into_dyn()),
        z: Tensor::zeros(&[3, z_dim]),
        logits: Tensor::zeros(&[3, z_dim]),
    };
    let mut r2 = ChaCha8Rng::seed_from_u64(4);
    let tb = imagine(&wm, &actor, &start_b, 4, &mut r2, SampleMode::Sample).unwrap();

    for t in 0..=4 {
        let fa = ta.feats[t].data().clone();
        let fb = tb.feats[t].data().clone();
        for j in 0..wm.state_dim() {
            assert_eq!(fa[[0, j]], fb[[0, j]], "row 0 affected at t={t}");
            assert_eq!(fa[[2, j]], fb[[2, j]], "row 2 affected at t={t}");
        }
    }
    let fa = ta.feats[1].data().clone();
    let fb = tb.feats[1].data().clone();
    assert!((0..wm.state_dim()).any(|j| fa[[1, j]] != fb[[1, j]]));
}

#[test]
fn critics_output_exactly_zero_at_construction() {
    let head = tiny_head(5, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let feat = Tensor::constant(ArrayD::from_shape_fn(vec![7, 20], |_| rng.gen_range(-3.0..3.0)));
    assert!(head.value(&feat).data().iter().all(|&v| v == 0.0));
    assert!(head.target_value(&feat).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_rewards_on_a_fresh_head_give_zero_value_losses() {
    let wm = tiny_model(0);
    let head = tiny_head(5, wm.state_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let traj = imagine(&wm, &head.actor, &wm.initial_state(2), 4, &mut rng, SampleMode::Sample).unwrap();
    let rewards: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[2])).collect();
    let up = head.update(&traj, &rewards, 0.99, 0.95, 3e-4).unwrap();
    // zero-init critic => zero values => zero returns => zero critic loss,
    // and the actor loss is purely the entropy bonus
    assert_eq!(up.stats.critic_loss, 0.0);
    assert_eq!(up.stats.mean_return, 0.0);
    assert!((up.stats.actor_loss - (-3e-4) * up.stats.entropy).abs() < 1e-12);
}

#[test]
fn constant_rewards_keep_targets_under_the_geometric_bound() {
    let wm = tiny_model(0);
    let head = tiny_head(5, wm.state_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, c, gamma) = (15, 0.7, 0.99);
    let traj = imagine(&wm, &head.actor, &wm.initial_state(3), h, &mut rng, SampleMode::Sample).unwrap();
    let rewards: Vec<Tensor> = (0..h)
        .map(|_| Tensor::constant(ArrayD::from_elem(vec![3], c)))
        .collect();
    let values: Vec<Tensor> = traj.feats.iter().map(|f| head.target_value(f)).collect();
    let returns = lambda_returns_tensor(&rewards, &values, gamma, 0.95).unwrap();
    let bound = c / (1.0 - gamma) + 1e-9;
    for r in &returns {
        assert!(r.data().iter().all(|&v| v <= bound && v >= 0.0));
    }
}

#[test]
fn update_validates_reward_alignment_and_finiteness() {
    let wm = tiny_model(0);
    let head = tiny_head(5, wm.state_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let traj = imagine(&wm, &head.actor, &wm.initial_state(2), 3, &mut rng, SampleMode::Sample).unwrap();

    let short: Vec<Tensor> = (0..2).map(|_| Tensor::zeros(&[2])).collect();
    assert!(head.update(&traj, &short, 0.99, 0.95, 3e-4).is_err());

    let mut bad = vec![Tensor::zeros(&[2]), Tensor::zeros(&[2])];
    bad.push(Tensor::constant(ArrayD::from_elem(vec![2], f64::NAN)));
    let err = head.update(&traj, &bad, 0.99, 0.95, 3e-4).err().expect("NaN must fail");
    assert!(err.to_string().contains("behavior.explore"), "{err}");
}

#[test]
fn target_critic_updates_on_the_configured_schedule() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut head = BehaviorHead::new(&mut rng, "task", 6, 3, &[8], 0.1, 4).unwrap();
    // push the live critic away from the zero init
    for (_, p) in head.critic_params() {
        p.set_data(ArrayD::from_elem(p.shape(), 0.3));
    }
    let feat = Tensor::constant(ArrayD::from_shape_fn(vec![2, 6], |_| rng.gen_range(-1.0..1.0)));
    let live = head.value(&feat).data().clone();
    assert_ne!(live, head.target_value(&feat).data().clone());

    head.after_step();
    head.after_step();
    head.after_step();
    assert_ne!(live, head.target_value(&feat).data().clone(), "updated early");
    head.after_step();
    assert_eq!(live, head.target_value(&feat).data().clone(), "missed update");
    assert_eq!(head.update_count(), 4);
}

#[test]
fn heads_own_disjoint_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let explore = BehaviorHead::new(&mut rng, "explore", 6, 3, &[8], 0.1, 100).unwrap();
    let task = BehaviorHead::new(&mut rng, "task", 6, 3, &[8], 0.1, 100).unwrap();
    let mut names: Vec<String> = explore
        .params()
        .into_iter()
        .chain(task.params())
        .map(|(n, _)| n)
        .collect();
    let before = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), before);

    // mutating one head's parameters leaves the other bit-identical
    let task_snapshot: Vec<_> = task.params().iter().map(|(_, p)| p.data().clone()).collect();
    for (_, p) in explore.params() {
        p.set_data(ArrayD::from_elem(p.shape(), 7.7));
    }
    for ((_, p), snap) in task.params().iter().zip(task_snapshot.iter()) {
        assert_eq!(&p.data().clone(), snap);
    }
}

#[test]
fn checkpoint_params_include_the_target_critic() {
    let head = tiny_head(13, 6);
    let params = head.params();
    assert!(params.iter().any(|(n, _)| n.starts_with("explore.actor")));
    assert!(params.iter().any(|(n, _)| n.starts_with("explore.critic")));
    assert!(params.iter().any(|(n, _)| n.starts_with("explore.target")));
    let n_actor = head.actor_params().len();
    let n_critic = head.critic_params().len();
    assert_eq!(params.len(), n_actor + 2 * n_critic);
}

#[test]
fn behavior_gradients_match_finite_differences() {
    // expected-mode latents and a reseeded rng per evaluation make both
    // losses smooth deterministic functions of the parameters
    let wm = tiny_model(0);
    let head = tiny_head(5, wm.state_dim());

    let compute = || -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let traj = imagine(&wm, &head.actor, &wm.initial_state(2), 3, &mut rng, SampleMode::Expected)
            .unwrap();
        let rewards: Vec<Tensor> = traj.feats[1..]
            .iter()
            .map(|f| {
                let b = f.shape()[0];
                wm.predict_reward(f).reshape(&[b])
            })
            .collect();
        let up = head.update(&traj, &rewards, 0.99, 0.95, 3e-4).unwrap();
        (up.actor_loss, up.critic_loss)
    };

    let (actor_loss, _) = compute();
    actor_loss.backward();
    let actor_params = head.actor_params();
    let mut coord_rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..4 {
        let (name, p) = &actor_params[coord_rng.gen_range(0..actor_params.len())];
        let flat = coord_rng.gen_range(0..p.len());
        let g = p.grad().expect("actor param missing grad").as_slice().unwrap()[flat];
        let orig = p.data().as_slice().unwrap()[flat];
        let h = 1e-5 * orig.abs().max(1.0);
        let eval = |v: f64| {
            let mut d = p.data().clone();
            d.as_slice_mut().unwrap()[flat] = v;
            p.set_data(d);
            compute().0.value()
        };
        let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        eval(orig);
        let denom = fd.abs().max(g.abs()).max(1e-3);
        assert!(((fd - g) / denom).abs() < 1e-4, "{name}[{flat}]: fd {fd} vs {g}");
    }
    for (_, p) in &actor_params {
        p.zero_grad();
    }
    // clear spill into world-model and critic parameters
    for (_, p) in wm.params() {
        p.zero_grad();
    }

    // nudge the critic off its zero init so its gradient is informative
    for (_, p) in head.critic_params() {
        let d = ArrayD::from_shape_fn(p.shape(), |_| coord_rng.gen_range(-0.2..0.2));
        p.set_data(d);
    }
    let (_, critic_loss) = compute();
    critic_loss.backward();
    let critic_params = head.critic_params();
    for _ in 0..4 {
        let (name, p) = &critic_params[coord_rng.gen_range(0..critic_params.len())];
        let flat = coord_rng.gen_range(0..p.len());
        let g = p.grad().expect("critic param missing grad").as_slice().unwrap()[flat];
        let orig = p.data().as_slice().unwrap()[flat];
        let h = 1e-5 * orig.abs().max(1.0);
        let eval = |v: f64| {
            let mut d = p.data().clone();
            d.as_slice_mut().unwrap()[flat] = v;
            p.set_data(d);
            compute().1.value()
        };
        let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        eval(orig);
        let denom = fd.abs().max(g.abs()).max(1e-3);
        assert!(((fd - g) / denom).abs() < 1e-4, "{name}[{flat}]: fd {fd} vs {g}");
    }
}

#[test]
fn actor_gradient_reaches_the_policy_through_dynamics() {
    let wm = tiny_model(0);
    let head = tiny_head(5, wm.state_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let traj = imagine(&wm, &head.actor, &wm.initial_state(2), 4, &mut rng, SampleMode::Sample).unwrap();
    // reward depends on the latent, so the actor only gets gradient signal
    // through the imagined dynamics
    let rewards: Vec<Tensor> = traj.feats[1..]
        .iter()
        .map(|f| {
            let b = f.shape()[0];
            wm.predict_reward(f).reshape(&[b])
        })
        .collect();
    let up = head.update(&traj, &rewards, 0.99, 0.95, 0.0).unwrap();
    up.actor_loss.backward();
    let nonzero = head
        .actor_params()
        .iter()
        .any(|(_, p)| p.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)));
    assert!(nonzero, "no gradient reached the actor");
    for (_, p) in head.actor_params() {
        p.zero_grad();
    }
    for (_, p) in wm.params() {
        p.zero_grad();
    }
}

#[test]
fn proprio_dim_matches_the_simulator_contract() {
    // the actor consumes world-model features, never raw proprio; this pins
    // the shared constant so a simulator change breaks loudly here too
    assert_eq!(PROPRIO_DIM, 5);
}
