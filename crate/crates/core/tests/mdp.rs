mod common;

use cltv::mdp::{
    generate_dataset, make_env, optimal_q, policy_matrix, solve_q_values, solve_values, Domain, EnvSpec, TabularMdp,
    TabularPolicy,
};
use common::{draw, mean, random_mdp, std_error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn visit_frequencies_match_exact_state_distribution() {
    let mdp = make_env(&EnvSpec::grid(4, 4, 0.0)).unwrap();
    let pol = TabularPolicy::uniform(16, 4);
    let horizon = 50;
    let ds = generate_dataset(&mdp, &pol, 100, horizon, 5, Domain::Target).unwrap();

    // Exact mean visit distribution over steps 0..horizon by propagating the start distribution.
    let (p_pi, _) = policy_matrix(&mdp, &pol).unwrap();
    let mut d = mdp.initial_dist().to_vec();
    let mut exact = vec![0.0; 16];
    for _ in 0..horizon {
        for (e, v) in exact.iter_mut().zip(&d) {
            *e += v / horizon as f64;
        }
        let mut next = vec![0.0; 16];
        for x in 0..16 {
            for y in 0..16 {
                next[y] += d[x] * p_pi[x * 16 + y];
            }
        }
        d = next;
    }

    // Per-trajectory visit fractions are i.i.d., so their spread gives the error bar.
    let per_traj: Vec<Vec<f64>> = ds
        .trajectories
        .iter()
        .map(|t| {
            let mut f = vec![0.0; 16];
            for tr in t.transitions() {
                f[tr.state] += 1.0 / horizon as f64;
            }
            f
        })
        .collect();
    for x in 0..16 {
        let col: Vec<f64> = per_traj.iter().map(|f| f[x]).collect();
        let (m, se) = (mean(&col), std_error(&col));
        assert!((m - exact[x]).abs() <= 3.0 * se + 1e-12, "state {x}: empirical {m}, exact {}, se {se}", exact[x]);
    }
}

fn discounted_rollout(mdp: &TabularMdp, pol: &TabularPolicy, x0: usize, u0: Option<usize>, rng: &mut ChaCha8Rng) -> f64 {
    let (mut x, mut total, mut disc) = (x0, 0.0, 1.0);
    let table = pol.prob_table();
    let na = mdp.n_actions();
    for step in 0..400 {
        let u = match (step, u0) {
            (0, Some(u)) => u,
            _ => draw(&table[x * na..(x + 1) * na], rng),
        };
        let next = draw(mdp.row(x, u), rng);
        total += disc * mdp.r(x, u, next);
        disc *= mdp.gamma();
        x = next;
    }
    total
}

#[test]
fn monte_carlo_returns_agree_with_linear_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..3 {
        let mdp = random_mdp(6, 3, 0.9, &mut rng);
        let logits: Vec<f64> = (0..18).map(|i| ((i * 7 + trial) % 5) as f64 * 0.4).collect();
        let pol = TabularPolicy::from_logits(6, 3, logits).unwrap();
        let v = solve_values(&mdp, &pol).unwrap();
        for x in [0, 3, 5] {
            let rets: Vec<f64> = (0..2000).map(|_| discounted_rollout(&mdp, &pol, x, None, &mut rng)).collect();
            let (m, se) = (mean(&rets), std_error(&rets));
            assert!((m - v[x]).abs() <= 3.0 * se, "trial {trial} state {x}: mc {m} exact {} se {se}", v[x]);
        }
    }
}

#[test]
fn q_values_of_a_five_state_mdp_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mdp = random_mdp(5, 2, 0.8, &mut rng);
    let pol = TabularPolicy::from_logits(5, 2, vec![0.3, -0.2, 1.0, 0.0, -1.0, 0.5, 0.0, 0.0, 2.0, -2.0]).unwrap();
    let q = solve_q_values(&mdp, &pol).unwrap();
    for x in 0..5 {
        for u in 0..2 {
            let rets: Vec<f64> = (0..1500).map(|_| discounted_rollout(&mdp, &pol, x, Some(u), &mut rng)).collect();
            let (m, se) = (mean(&rets), std_error(&rets));
            assert!((m - q.q(x, u)).abs() <= 3.5 * se, "({x},{u}): mc {m} exact {} se {se}", q.q(x, u));
        }
    }
}

#[test]
fn relabelling_states_permutes_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, na) = (7, 3);
    let mdp = random_mdp(n, na, 0.95, &mut rng);
    let perm = [4, 0, 6, 2, 1, 5, 3];
    let mut p = vec![0.0; n * na * n];
    let mut r = vec![0.0; n * na * n];
    for x in 0..n {
        for u in 0..na {
            for y in 0..n {
                let dst = (perm[x] * na + u) * n + perm[y];
                p[dst] = mdp.p(x, u, y);
                r[dst] = mdp.r(x, u, y);
            }
        }
    }
    let relabelled = TabularMdp::new(n, na, p, r, 0.95, vec![1.0 / n as f64; n], vec![false; n]).unwrap();
    let logits: Vec<f64> = (0..n * na).map(|i| (i as f64 * 0.37).sin()).collect();
    let pol = TabularPolicy::from_logits(n, na, logits.clone()).unwrap();
    let mut permuted_logits = vec![0.0; n * na];
    for x in 0..n {
        permuted_logits[perm[x] * na..(perm[x] + 1) * na].copy_from_slice(&logits[x * na..(x + 1) * na]);
    }
    let pol2 = TabularPolicy::from_logits(n, na, permuted_logits).unwrap();
    let a = solve_q_values(&mdp, &pol).unwrap();
    let b = solve_q_values(&relabelled, &pol2).unwrap();
    for x in 0..n {
        for u in 0..na {
            assert!((a.q(x, u) - b.q(perm[x], u)).abs() < 1e-9);
        }
    }
    let oa = optimal_q(&mdp, 1e-12, 100_000).unwrap();
    let ob = optimal_q(&relabelled, 1e-12, 100_000).unwrap();
    for x in 0..n {
        assert!((oa.v[x] - ob.v[perm[x]]).abs() < 1e-8);
    }
}

#[test]
fn optimal_policy_dominates_uniform_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let mdp = random_mdp(8, 3, 0.9, &mut rng);
        let opt = optimal_q(&mdp, 1e-12, 100_000).unwrap();
        let greedy = TabularPolicy::greedy(8, 3, &opt.q).unwrap();
        let vg = solve_values(&mdp, &greedy).unwrap();
        let vu = solve_values(&mdp, &TabularPolicy::uniform(8, 3)).unwrap();
        for x in 0..8 {
            assert!((vg[x] - opt.v[x]).abs() < 1e-8);
            assert!(vg[x] >= vu[x] - 1e-12);
        }
    }
}
