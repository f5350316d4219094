use coagent::env::{
    Cell, Direction, Environment, FiniteMdpSpec, FourRooms, FourRoomsEnv, MdpError, FOUR_ROOMS_LAYOUT, GRID_SIZE,
    N_CELLS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Upper 1% point of χ² with `df` degrees of freedom (Wilson–Hilferty).
fn chi2_upper_1pct(df: f64) -> f64 {
    let z = 2.326_347_874_040_841;
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn layout_has_four_rooms_and_four_hallways() {
    let rooms = FourRooms::new();
    assert_eq!(rooms.n_cells(), N_CELLS);
    let grid: Vec<Vec<char>> = FOUR_ROOMS_LAYOUT.lines().map(|l| l.chars().collect()).collect();
    assert_eq!(grid.len(), GRID_SIZE);
    assert!(grid.iter().all(|r| r.len() == GRID_SIZE));
    // wall rows/columns split the interior; hallways sit on them
    let on_wall_line = |r: usize, c: usize| r == 6 || c == 6;
    let mut hallways = 0;
    let mut quadrants = [0usize; 4];
    for cell in 0..rooms.n_cells() {
        let (r, c) = rooms.coord(Cell(cell));
        assert_eq!(grid[r][c], ' ');
        if on_wall_line(r, c) {
            hallways += 1;
        } else {
            quadrants[usize::from(r > 6) * 2 + usize::from(c > 6)] += 1;
        }
    }
    assert_eq!(hallways, 4);
    // the lower rooms start one row further down, so the rooms are 5×5 each
    assert_eq!(quadrants, [25, 25, 25, 25]);
}

#[test]
fn cell_index_is_a_bijection() {
    let rooms = FourRooms::new();
    for cell in 0..N_CELLS {
        let (r, c) = rooms.coord(Cell(cell));
        assert_eq!(rooms.cell_at(r, c), Some(Cell(cell)));
    }
    assert_eq!(rooms.cell_at(0, 0), None);
}

#[test]
fn goals_are_uniform_and_never_on_the_start() {
    let rooms = FourRooms::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut counts = vec![0usize; N_CELLS];
    for _ in 0..n {
        let s = rooms.reset(&mut rng);
        assert_ne!(s.agent, s.goal);
        counts[s.goal.0] += 1;
    }
    let expected = n as f64 / N_CELLS as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < chi2_upper_1pct((N_CELLS - 1) as f64), "chi2 = {chi2}");
}

#[test]
fn reset_replays_under_a_fixed_seed() {
    let rooms = FourRooms::new();
    let a = rooms.reset(&mut ChaCha8Rng::seed_from_u64(5));
    let b = rooms.reset(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

#[test]
fn kernel_is_two_thirds_intended_one_ninth_otherwise() {
    let rooms = FourRooms::new();
    for cell in 0..N_CELLS {
        for action in Direction::ALL {
            let kernel = rooms.transition_kernel(Cell(cell), action);
            assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut by_hand = vec![0.0; N_CELLS];
            for dir in Direction::ALL {
                by_hand[rooms.neighbor(Cell(cell), dir).0] += if dir == action { 6.0 } else { 1.0 };
            }
            for (p, w) in kernel.iter().zip(&by_hand) {
                assert!((p - w / 9.0).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn sampled_moves_match_the_kernel() {
    let rooms = FourRooms::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40_000;
    // an open-room cell, a hallway and a corner
    for (r, c) in [(3, 3), (6, 2), (1, 1)] {
        let cell = rooms.cell_at(r, c).unwrap();
        for action in Direction::ALL {
            let mut counts = vec![0usize; N_CELLS];
            for _ in 0..n {
                let dir = rooms.sample_direction(action, &mut rng);
                counts[rooms.neighbor(cell, dir).0] += 1;
            }
            for (next, p) in rooms.transition_kernel(cell, action).iter().enumerate() {
                let sd = (p * (1.0 - p) / n as f64).sqrt();
                let freq = counts[next] as f64 / n as f64;
                assert!(
                    (freq - p).abs() <= 5.0 * sd + 1e-12,
                    "cell {cell:?} {action:?} -> {next}"
                );
            }
        }
    }
}

#[test]
fn stepping_toward_an_adjacent_goal_succeeds_two_thirds_of_the_time() {
    let rooms = FourRooms::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let agent = rooms.cell_at(3, 3).unwrap();
    let goal = rooms.neighbor(agent, Direction::Right);
    let n = 30_000;
    let mut hits = 0;
    for _ in 0..n {
        let mut state = coagent::env::FourRoomsState { agent, goal };
        let out = rooms.step(&mut state, Direction::Right, &mut rng);
        assert_eq!(out.done, out.reward == 1.0);
        assert_eq!(out.done, out.next == goal.0);
        hits += usize::from(out.done);
    }
    let freq = hits as f64 / n as f64;
    let sd = (2.0 / 9.0 / n as f64).sqrt();
    assert!((freq - 2.0 / 3.0).abs() < 5.0 * sd, "{freq}");
}

#[test]
fn corner_failures_stay_put() {
    let rooms = FourRooms::new();
    let corner = rooms.cell_at(1, 1).unwrap();
    assert_eq!(rooms.neighbor(corner, Direction::Up), corner);
    assert_eq!(rooms.neighbor(corner, Direction::Left), corner);
    let kernel = rooms.transition_kernel(corner, Direction::Right);
    assert!((kernel[corner.0] - 2.0 / 9.0).abs() < 1e-15);
}

#[test]
fn reward_only_on_entering_the_goal() {
    let mut env = FourRoomsEnv::new(ChaCha8Rng::seed_from_u64(21));
    for _ in 0..50 {
        env.reset();
        for t in 0..5000 {
            let out = env.step(t % 4);
            assert_eq!(out.reward, if out.done { 1.0 } else { 0.0 });
            if out.done {
                assert_eq!(out.next, env.state().goal.0);
                break;
            }
        }
    }
}

#[test]
fn bundled_fixture_files_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    for name in ["mdp3.json", "mdp5.json"] {
        let spec = FiniteMdpSpec::load(&dir.join(name)).unwrap();
        assert!(spec.validate().is_ok());
        assert_eq!(spec.n_actions, 2);
        assert!(spec.reward.iter().flatten().flatten().all(|r| (0.0..=1.0).contains(r)));
    }
}

#[test]
fn validation_names_the_failing_part() {
    let chain = FiniteMdpSpec {
        n_states: 2,
        n_actions: 1,
        transition: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 0.9]]],
        reward: vec![vec![vec![0.0; 2]]; 2],
        gamma: 0.9,
        init_dist: vec![1.0, 0.0],
    };
    assert!(matches!(
        chain.validate(),
        Err(MdpError::RowSum {
            state: 1,
            action: 0,
            ..
        })
    ));
    let bad_gamma = FiniteMdpSpec {
        gamma: 1.2,
        transition: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
        ..chain
    };
    assert_eq!(bad_gamma.validate(), Err(MdpError::Gamma(1.2)));
}
