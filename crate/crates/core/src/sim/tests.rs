use super::task::task_reward;
use super::*;
use crate::config::{
    faucet_scene, one_block_scene, two_block_scene, AreasConfig, Direction, SceneConfig,
    TaskConfig, TaskKind,
};
use proptest::prelude::*;
use std::f64::consts::PI;

fn env_with(scene: SceneConfig) -> Env {
    Env::new(scene, TaskConfig::default(), AreasConfig::default()).unwrap()
}

/// Scene with the gripper starting at the origin and one block far away, so
/// kinematics can be probed without touching anything.
fn free_space_scene() -> SceneConfig {
    let mut scene = one_block_scene(16);
    scene.gripper_start = (0.0, 0.0);
    scene.objects[0].pose = (0.6, 0.6, 0.0);
    scene
}

#[test]
fn reset_is_deterministic() {
    let mut a = env_with(two_block_scene(32));
    let mut b = env_with(two_block_scene(32));
    let oa = a.reset(0);
    let ob = b.reset(17);
    assert_eq!(oa.image, ob.image);
    assert_eq!(oa.segmask, ob.segmask);
    assert_eq!(oa.proprio, ob.proprio);

    let (sa, ..) = a.step([0.3, -0.2, -1.0]).unwrap();
    let (sb, ..) = b.step([0.3, -0.2, -1.0]).unwrap();
    assert_eq!(sa.image, sb.image);
    assert_eq!(sa.proprio, sb.proprio);
}

#[test]
fn segmask_labels_partition_the_image() {
    let mut env = env_with(one_block_scene(32));
    let obs = env.reset(0);
    let mut seen = [false; 3];
    for &v in obs.segmask.iter() {
        assert!(v <= 1, "one-block scene may only use labels 0 and 1");
        seen[v as usize] = true;
    }
    assert!(seen[0] && seen[1], "background and the block must both appear");

    let mut env2 = env_with(two_block_scene(64));
    let obs2 = env2.reset(0);
    let labels: std::collections::BTreeSet<u8> = obs2.segmask.iter().copied().collect();
    assert_eq!(labels, [0u8, 1, 2].into_iter().collect());
}

#[test]
fn image_shape_follows_scene() {
    let mut env = env_with(one_block_scene(16));
    let obs = env.reset(0);
    assert_eq!(obs.image.shape(), [3, 16, 16]);
    assert_eq!(obs.segmask.shape(), [16, 16]);
    assert_eq!(obs.proprio.len(), 5);

    let mut scene = one_block_scene(16);
    scene.depth_channel = true;
    let mut env = env_with(scene);
    assert_eq!(env.reset(0).image.shape(), [4, 16, 16]);
}

#[test]
fn unit_action_moves_one_step_size() {
    let mut env = env_with(free_space_scene());
    env.reset(0);
    let (obs, _, done) = env.step([1.0, 0.0, -1.0]).unwrap();
    assert!(!done);
    assert_eq!(env.state().gripper, (0.05, 0.0));
    assert_eq!(obs.proprio, vec![0.05, 0.0, 0.0, 0.05, 0.0]);
}

#[test]
fn action_components_clamp_to_unit_box() {
    let mut env = env_with(free_space_scene());
    env.reset(0);
    env.step([7.0, -250.0, -1.0]).unwrap();
    let (gx, gy) = env.state().gripper;
    assert!((gx - 0.05).abs() < 1e-15);
    assert!((gy + 0.05).abs() < 1e-15);
}

#[test]
fn gripper_stops_exactly_at_the_wall() {
    let mut scene = free_space_scene();
    scene.gripper_start = (0.98, 0.0);
    let mut env = env_with(scene);
    env.reset(0);
    let (obs, ..) = env.step([1.0, 0.0, -1.0]).unwrap();
    assert_eq!(env.state().gripper.0, 1.0);
    assert!((obs.proprio[3] - 0.02).abs() < 1e-15, "applied dx is the truncated delta");
}

#[test]
fn grasp_applies_before_motion() {
    let mut scene = one_block_scene(16);
    scene.gripper_start = (0.0, 0.0);
    scene.objects[0].pose = (0.0, 0.0, 0.0);
    let mut env = env_with(scene);
    env.reset(0);
    // One action both closes the grip and moves: the block must come along.
    let (obs, ..) = env.step([1.0, 0.0, 1.0]).unwrap();
    assert_eq!(env.state().grasped, Some(1));
    assert_eq!(env.state().gripper, (0.05, 0.0));
    assert_eq!(obs.info.poses[0], (0.05, 0.0, 0.0));
}

#[test]
fn release_drops_the_object() {
    let mut scene = one_block_scene(16);
    scene.gripper_start = (0.0, 0.0);
    scene.objects[0].pose = (0.0, 0.0, 0.0);
    let mut env = env_with(scene);
    env.reset(0);
    env.step([0.0, 0.0, 1.0]).unwrap();
    assert_eq!(env.state().grasped, Some(1));
    let (obs, ..) = env.step([0.0, 0.0, -1.0]).unwrap();
    assert_eq!(env.state().grasped, None);
    assert_eq!(obs.proprio[2], 0.0);
}

#[test]
fn grasp_requires_contact() {
    let mut env = env_with(free_space_scene());
    env.reset(0);
    env.step([0.0, 0.0, 1.0]).unwrap();
    assert_eq!(env.state().grasped, None, "closing in free space grasps nothing");
}

#[test]
fn faucet_is_not_graspable() {
    let mut scene = faucet_scene(16);
    scene.gripper_start = (0.0, 0.2);
    let mut env = env_with(scene);
    env.reset(0);
    env.step([0.0, 0.0, 1.0]).unwrap();
    assert_eq!(env.state().grasped, None);
}

#[test]
fn carried_block_keeps_the_gripper_offset() {
    let mut scene = one_block_scene(16);
    scene.gripper_start = (0.1, 0.0);
    scene.objects[0].pose = (0.0, 0.0, 0.0);
    let mut env = env_with(scene);
    env.reset(0);
    env.step([0.0, 0.0, 1.0]).unwrap();
    let off0 = (
        env.state().gripper.0 - env.state().poses[0].0,
        env.state().gripper.1 - env.state().poses[0].1,
    );
    for a in [[1.0, 0.3, 1.0], [-0.4, 1.0, 1.0], [1.0, 1.0, 1.0]] {
        env.step(a).unwrap();
        let off = (
            env.state().gripper.0 - env.state().poses[0].0,
            env.state().gripper.1 - env.state().poses[0].1,
        );
        assert!((off.0 - off0.0).abs() < 1e-12 && (off.1 - off0.1).abs() < 1e-12);
    }
}

#[test]
fn push_moves_block_to_exactly_contact_distance() {
    let mut scene = one_block_scene(16);
    // radius = 1.5 * 0.12 = 0.18; start just outside and drive in.
    scene.gripper_start = (-0.2, 0.0);
    scene.objects[0].pose = (0.0, 0.0, 0.0);
    let mut env = env_with(scene);
    env.reset(0);
    let radius = 1.5 * 0.12;
    for _ in 0..10 {
        env.step([1.0, 0.0, -1.0]).unwrap();
        let (gx, gy) = env.state().gripper;
        let (ox, oy, _) = env.state().poses[0];
        let dist = (gx - ox).hypot(gy - oy);
        assert!(
            dist >= radius - 1e-12,
            "block must never end up inside the contact disc (dist {dist})"
        );
    }
    // After driving straight through, the block has been pushed along +x.
    assert!(env.state().poses[0].0 > 0.25);
    assert_eq!(env.state().poses[0].1, 0.0);
}

#[test]
fn faucet_rotates_from_tangential_push() {
    let mut scene = faucet_scene(16);
    let he = scene.objects[0].half_extent;
    let r = HANDLE_SCALE * he;
    // Handle tip at theta = 0 sits at (r, 0.2); park the gripper there.
    scene.gripper_start = (r, 0.2);
    let mut env = env_with(scene);
    env.reset(0);
    let (obs, ..) = env.step([0.0, 1.0, -1.0]).unwrap();
    let (cx, cy, theta) = obs.info.poses[0];
    assert_eq!((cx, cy), (0.0, 0.2), "faucet base never translates");
    assert!((theta - 0.05 / r).abs() < 1e-12, "dtheta = tangential motion / handle radius");

    // Radial pushes leave the angle unchanged.
    let mut env2 = env_with({
        let mut s = faucet_scene(16);
        s.gripper_start = (r - 0.05, 0.2);
        s
    });
    env2.reset(0);
    env2.step([1.0, 0.0, -1.0]).unwrap();
    assert_eq!(env2.state().poses[0].2, 0.0);
}

#[test]
fn contact_flags_use_the_interaction_point() {
    let mut scene = one_block_scene(16);
    scene.gripper_start = (0.18, 0.0); // exactly the contact radius away
    scene.objects[0].pose = (0.0, 0.0, 0.0);
    let mut env = env_with(scene);
    let obs = env.reset(0);
    assert!(obs.info.contacts[0], "boundary counts as contact");

    let mut scene2 = one_block_scene(16);
    scene2.gripper_start = (0.25, 0.0);
    scene2.objects[0].pose = (0.0, 0.0, 0.0);
    let mut env2 = env_with(scene2);
    assert!(!env2.reset(0).info.contacts[0]);
}

#[test]
fn step_before_reset_and_after_done_are_protocol_errors() {
    let mut scene = one_block_scene(16);
    scene.episode_len = 2;
    let mut env = env_with(scene);
    assert!(matches!(
        env.step([0.0, 0.0, 0.0]),
        Err(Error::Protocol(_))
    ));
    env.reset(0);
    let (_, _, done) = env.step([0.0, 0.0, -1.0]).unwrap();
    assert!(!done);
    let (_, _, done) = env.step([0.0, 0.0, -1.0]).unwrap();
    assert!(done, "episode ends after episode_len steps");
    assert!(matches!(
        env.step([0.0, 0.0, 0.0]),
        Err(Error::Protocol(_))
    ));
    env.reset(1);
    env.step([0.0, 0.0, 0.0]).unwrap();
}

#[test]
fn image_is_quantized_losslessly() {
    let mut env = env_with(two_block_scene(32));
    let obs = env.reset(0);
    let real = obs.image_f64();
    let back = real.mapv(|v| (v * 255.0).round() as u8);
    assert_eq!(back, obs.image);
}

fn state_with_pose(env: &Env, pose: (f64, f64, f64), grasped: Option<usize>) -> SimState {
    let mut state = env.state().clone();
    state.poses[0] = pose;
    state.grasped = grasped;
    state.grip_closed = grasped.is_some();
    state
}

#[test]
fn push_sparse_reward_fires_inside_the_band() {
    let scene = one_block_scene(16);
    let task = TaskConfig {
        kind: TaskKind::PushSparse,
        object_id: 1,
        direction: Direction::Right,
        ..TaskConfig::default()
    };
    let areas = AreasConfig::default();
    let mut env = Env::new(scene, task.clone(), areas.clone()).unwrap();
    env.reset(0);
    let spawn = env.spawn_poses().to_vec();

    for (dx, expect) in [(0.1, 0.0), (0.25, 1.0), (0.3, 1.0), (0.4, 1.0), (0.5, 0.0)] {
        let state = state_with_pose(&env, (dx, 0.0, 0.0), None);
        assert_eq!(task_reward(&task, &areas, &spawn, &state), expect, "dx = {dx}");
    }
    // displacement along the wrong axis never pays
    let state = state_with_pose(&env, (0.0, 0.3, 0.0), None);
    assert_eq!(task_reward(&task, &areas, &spawn, &state), 0.0);
}

#[test]
fn lift_sparse_requires_the_grasp() {
    let scene = one_block_scene(16);
    let task = TaskConfig {
        kind: TaskKind::LiftSparse,
        object_id: 1,
        direction: Direction::Far,
        ..TaskConfig::default()
    };
    let areas = AreasConfig::default();
    let mut env = Env::new(scene, task.clone(), areas.clone()).unwrap();
    env.reset(0);
    let spawn = env.spawn_poses().to_vec();

    let lifted_free = state_with_pose(&env, (0.0, 0.06, 0.0), None);
    assert_eq!(task_reward(&task, &areas, &spawn, &lifted_free), 0.0);
    let lifted_held = state_with_pose(&env, (0.0, 0.06, 0.0), Some(1));
    assert_eq!(task_reward(&task, &areas, &spawn, &lifted_held), 1.0);
    let low_held = state_with_pose(&env, (0.0, 0.02, 0.0), Some(1));
    assert_eq!(task_reward(&task, &areas, &spawn, &low_held), 0.0);
}

#[test]
fn turn_sparse_wraps_the_angle_difference() {
    let scene = faucet_scene(16);
    let task = TaskConfig {
        kind: TaskKind::TurnSparse,
        object_id: 1,
        direction: Direction::Right,
        turn_threshold: PI / 2.0,
        ..TaskConfig::default()
    };
    let areas = AreasConfig::default();
    let mut env = Env::new(scene, task.clone(), areas.clone()).unwrap();
    env.reset(0);
    let spawn = env.spawn_poses().to_vec();

    let quarter = state_with_pose(&env, (0.0, 0.2, PI / 2.0), None);
    assert_eq!(task_reward(&task, &areas, &spawn, &quarter), 1.0);
    let slight = state_with_pose(&env, (0.0, 0.2, 0.3), None);
    assert_eq!(task_reward(&task, &areas, &spawn, &slight), 0.0);
    // 2 pi - 0.1 is only 0.1 away once wrapped
    let wrapped = state_with_pose(&env, (0.0, 0.2, 2.0 * PI - 0.1), None);
    assert_eq!(task_reward(&task, &areas, &spawn, &wrapped), 0.0);
}

#[test]
fn dense_rewards_are_bounded_and_peak_at_the_goal() {
    let areas = AreasConfig::default();
    let spawn = [(0.0, 0.0, 0.0)];
    let mid = 0.5 * (areas.band_min + areas.band_max);

    let push = TaskConfig {
        kind: TaskKind::PushDense,
        object_id: 1,
        direction: Direction::Right,
        ..TaskConfig::default()
    };
    let mut env = Env::new(one_block_scene(16), push.clone(), areas.clone()).unwrap();
    env.reset(0);
    let at_goal = state_with_pose(&env, (mid, 0.0, 0.0), None);
    assert_eq!(task_reward(&push, &areas, &spawn, &at_goal), 0.0);
    for pose in [(-0.9, 0.9, 0.0), (0.0, 0.0, 0.0), (0.5, -0.4, 0.0)] {
        let r = task_reward(&push, &areas, &spawn, &state_with_pose(&env, pose, None));
        assert!((-1.0..=0.0).contains(&r), "dense reward {r} out of range");
    }

    let turn = TaskConfig {
        kind: TaskKind::TurnDense,
        object_id: 1,
        direction: Direction::Right,
        turn_threshold: PI / 2.0,
        ..TaskConfig::default()
    };
    let mut fenv = Env::new(faucet_scene(16), turn.clone(), areas.clone()).unwrap();
    fenv.reset(0);
    let fspawn = fenv.spawn_poses().to_vec();
    let done = state_with_pose(&fenv, (0.0, 0.2, PI / 2.0), None);
    assert_eq!(task_reward(&turn, &areas, &fspawn, &done), 0.0);
    // The angular gap at reset exceeds 1 rad, so the penalty saturates.
    let start = state_with_pose(&fenv, (0.0, 0.2, 0.0), None);
    assert_eq!(task_reward(&turn, &areas, &fspawn, &start), -1.0);
    let near = state_with_pose(&fenv, (0.0, 0.2, PI / 2.0 - 0.5), None);
    assert!((task_reward(&turn, &areas, &fspawn, &near) + 0.5).abs() < 1e-12);
}

#[test]
fn reward_is_emitted_by_step() {
    let mut scene = one_block_scene(16);
    scene.gripper_start = (0.0, 0.0);
    scene.episode_len = 40;
    let task = TaskConfig {
        kind: TaskKind::PushSparse,
        object_id: 1,
        direction: Direction::Right,
        ..TaskConfig::default()
    };
    let mut env = Env::new(scene, task, AreasConfig::default()).unwrap();
    env.reset(0);
    // Grasp the block (gripper starts on its center) and drag it right into
    // the band: 7 steps of +0.05 = 0.35.
    let mut paid = 0.0;
    for _ in 0..7 {
        let (_, r, _) = env.step([1.0, 0.0, 1.0]).unwrap();
        paid += r;
    }
    assert!(paid >= 1.0, "band entry pays sparse reward, got {paid}");
}

#[test]
fn overlapping_objects_are_rejected() {
    let mut scene = two_block_scene(16);
    scene.objects[1].pose = ((-0.3) + 0.1, 0.1, 0.0);
    assert!(Env::new(scene, TaskConfig::default(), AreasConfig::default()).is_err());
}

#[test]
fn observation_matches_palette_colors() {
    let mut env = env_with(one_block_scene(64));
    let obs = env.reset(0);
    let palette = super::render::mask_palette(env.scene());
    assert_eq!(palette.len(), 2);
    // Every pixel labeled 1 carries the block color in the RGB planes.
    let color = env.scene().objects[0].color;
    let (h, w) = (64, 64);
    let mut block_pixels = 0;
    for r in 0..h {
        for c in 0..w {
            if obs.segmask[[r, c]] == 1 {
                block_pixels += 1;
                for ch in 0..3 {
                    assert_eq!(obs.image[[ch, r, c]], color[ch]);
                }
            }
        }
    }
    assert!(block_pixels > 4, "block must cover multiple pixels at 64x64");
}

fn action_strategy() -> impl Strategy<Value = Vec<[f64; 3]>> {
    proptest::collection::vec(
        (-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5).prop_map(|(a, b, c)| [a, b, c]),
        1..60,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn everything_stays_inside_the_workspace(actions in action_strategy()) {
        let mut scene = two_block_scene(8);
        scene.episode_len = 100;
        let mut env = env_with(scene);
        env.reset(0);
        for a in actions {
            env.step(a).unwrap();
            let (gx, gy) = env.state().gripper;
            prop_assert!((-1.0..=1.0).contains(&gx) && (-1.0..=1.0).contains(&gy));
            for &(ox, oy, _) in &env.state().poses {
                prop_assert!((-1.0..=1.0).contains(&ox) && (-1.0..=1.0).contains(&oy));
            }
        }
    }

    #[test]
    fn grasped_object_moves_exactly_with_the_gripper(actions in action_strategy()) {
        let mut scene = one_block_scene(8);
        scene.gripper_start = (0.0, 0.0);
        scene.objects[0].pose = (0.0, 0.0, 0.0);
        scene.episode_len = 100;
        let mut env = env_with(scene);
        env.reset(0);
        env.step([0.0, 0.0, 1.0]).unwrap();
        prop_assert_eq!(env.state().grasped, Some(1));
        for a in actions {
            let before_g = env.state().gripper;
            let before_o = env.state().poses[0];
            let held = [a[0], a[1], 1.0];
            env.step(held).unwrap();
            let dg = (env.state().gripper.0 - before_g.0, env.state().gripper.1 - before_g.1);
            let dobj = (env.state().poses[0].0 - before_o.0, env.state().poses[0].1 - before_o.1);
            prop_assert!((dg.0 - dobj.0).abs() < 1e-12 && (dg.1 - dobj.1).abs() < 1e-12);
        }
    }

    #[test]
    fn replayed_actions_reproduce_the_trajectory(actions in action_strategy()) {
        let mut scene = two_block_scene(8);
        scene.episode_len = 100;
        let mut a = env_with(scene.clone());
        let mut b = env_with(scene);
        a.reset(3);
        b.reset(9);
        for act in actions {
            let (oa, ra, da) = a.step(act).unwrap();
            let (ob, rb, db) = b.step(act).unwrap();
            prop_assert_eq!(oa.image, ob.image);
            prop_assert_eq!(oa.proprio, ob.proprio);
            prop_assert_eq!(ra, rb);
            prop_assert_eq!(da, db);
        }
    }
}
