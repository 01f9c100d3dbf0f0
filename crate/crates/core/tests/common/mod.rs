//! Oracles and property checks shared by the property tests and the
//! acceptance run. Each check panics with a diagnostic on violation.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsma_mec::baselines::{random_allocation, tdma_feasible, tdma_maximin, BaselineKind};
use rsma_mec::config::RunConfig;
use rsma_mec::harness::run_instance_full;
use rsma_mec::matching::{MatchingState, PreferenceKind};
use rsma_mec::rates::{
    group_rates, Allocation, DecodingOrder, GroupOrder, Part, PowerAllocation, Solution, SubMessage,
};
use rsma_mec::sca::{
    bisection_mcor, eta_upper_bound, init_decoding_order, linearize, order_from_powers,
    solve_inner, zl_values, GroupProblem, ScaSettings, SolverStats, SplitMode,
};
use rsma_mec::scenario::{generate_scenario, Scenario, SystemConfig};

pub fn system(m: usize, n: usize, k: usize) -> SystemConfig {
    SystemConfig {
        num_servers: m,
        num_channels: n,
        num_devices: k,
        ..SystemConfig::default()
    }
}

pub fn random_powers(rng: &mut ChaCha8Rng, budget: &[f64], parts: usize) -> Vec<f64> {
    budget
        .iter()
        .flat_map(|&p| {
            let total = p * rng.gen_range(0.0..=1.0);
            let share = if parts == 2 {
                rng.gen_range(0.0..=1.0)
            } else {
                1.0
            };
            let mut v = vec![total * share];
            if parts == 2 {
                v.push(total * (1.0 - share));
            }
            v
        })
        .collect()
}

/// A random one-server subproblem at the default scale.
pub fn random_problem(
    rng: &mut ChaCha8Rng,
    devices: usize,
    channels: usize,
    mode: SplitMode,
) -> GroupProblem {
    let cfg = system(1, channels, devices);
    let scenario = generate_scenario(&cfg, rng.gen()).unwrap();
    let chans: Vec<Option<usize>> = (0..devices)
        .map(|_| Some(rng.gen_range(0..channels)))
        .collect();
    let alloc = Allocation::from_assignment(1, channels, vec![Some(0); devices], chans).unwrap();
    GroupProblem::new(&scenario, &alloc, 0, mode)
}

pub fn random_orders(rng: &mut ChaCha8Rng, problem: &GroupProblem) -> Vec<GroupOrder> {
    if rng.gen_bool(0.5) {
        init_decoding_order(problem)
    } else {
        let p = random_powers(rng, &problem.max_power, problem.parts);
        order_from_powers(problem, &p)
    }
}

pub fn taylor_anchor_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let devices = rng.gen_range(1..=4);
        let mode = if rng.gen_bool(0.8) {
            SplitMode::Rsma
        } else {
            SplitMode::Noma
        };
        let pr = random_problem(&mut rng, devices, 2, mode);
        let orders = random_orders(&mut rng, &pr);
        let eta = rng.gen_range(0.0..0.99) * pr.frequency;
        // Keep the reference strictly inside the box so central differences
        // stay feasible.
        let p_ref: Vec<f64> = random_powers(&mut rng, &pr.max_power, pr.parts)
            .iter()
            .map(|p| p * 0.98 + 1e-3 * pr.max_power[0])
            .collect();
        let lin = linearize(&pr, &orders, &p_ref, eta).unwrap();
        let l_exact: Vec<f64> = zl_values(&pr, &orders, &p_ref, eta)
            .unwrap()
            .iter()
            .map(|x| x.1)
            .collect();
        for (a, b) in lin.eval(&p_ref).iter().zip(&l_exact) {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "anchor {a} vs {b}");
        }
        for (k, grad) in lin.gradient.iter().enumerate() {
            let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for j in 0..p_ref.len() {
                let h = 1e-6 * pr.max_power[j / pr.parts];
                let mut up = p_ref.clone();
                let mut down = p_ref.clone();
                up[j] += h;
                down[j] -= h;
                let lu = zl_values(&pr, &orders, &up, eta).unwrap()[k].1;
                let ld = zl_values(&pr, &orders, &down, eta).unwrap()[k].1;
                let fd = (lu - ld) / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() <= 1e-5 * scale.max(f64::MIN_POSITIVE),
                    "device {k} message {j}: fd {fd} vs analytic {}",
                    grad[j]
                );
            }
        }
        // The tangent plane over-estimates the concave l everywhere.
        for _ in 0..10 {
            let p = random_powers(&mut rng, &pr.max_power, pr.parts);
            let l = zl_values(&pr, &orders, &p, eta).unwrap();
            for (hat, (_, exact)) in lin.eval(&p).iter().zip(&l) {
                assert!(*hat >= exact - 1e-9 * exact.abs(), "{hat} < {exact}");
            }
        }
    }
}

/// `min_k (z_k - l̂_k)` from first principles for the grid oracle.
pub struct Surrogate<'a> {
    pr: &'a GroupProblem,
    /// Decoding position of each local message on its channel.
    later: Vec<Vec<usize>>,
    eta: f64,
    lin: rsma_mec::sca::Minorant,
}

impl<'a> Surrogate<'a> {
    fn new(pr: &'a GroupProblem, orders: &[GroupOrder], p_ref: &[f64], eta: f64) -> Self {
        let n = pr.num_messages();
        let mut later = vec![Vec::new(); n];
        for go in orders {
            let seq: Vec<usize> = go
                .order
                .sequence()
                .iter()
                .map(|m| pr.message_index(*m).unwrap())
                .collect();
            for (i, &j) in seq.iter().enumerate() {
                later[j] = seq[i + 1..].to_vec();
            }
        }
        let lin = linearize(pr, orders, p_ref, eta).unwrap();
        Self {
            pr,
            later,
            eta,
            lin,
        }
    }

    /// `z_k - l̂_k` of both devices.
    fn pieces(&self, p: &[f64]) -> Vec<f64> {
        let pr = self.pr;
        let parts = pr.parts;
        let h = |j: usize| pr.gains[j / parts];
        let mut own_w = vec![0.0; pr.num_devices()];
        let mut own_v = vec![0.0; pr.num_devices()];
        for j in 0..pr.num_messages() {
            let base = pr.noise_power + self.later[j].iter().map(|&q| h(q) * p[q]).sum::<f64>();
            own_w[j / parts] += pr.bandwidth * (base + h(j) * p[j]).log2();
            own_v[j / parts] += pr.bandwidth * base.log2();
        }
        let tot_v: f64 = own_v.iter().sum();
        let l_hat = self.lin.eval(p);
        (0..pr.num_devices())
            .map(|k| {
                (pr.frequency - self.eta) * own_w[k] + self.eta * (tot_v - own_v[k]) - l_hat[k]
            })
            .collect()
    }

    fn value(&self, p: &[f64]) -> f64 {
        self.pieces(p).into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Powers from `(total_k, share_k)` grid coordinates:
/// `p_{k,1} = total_k P_k share_k`, `p_{k,2} = total_k P_k (1 - share_k)`.
/// The budget face is sampled exactly.
pub fn powers_at(x: &[f64; 4], budget: &[f64; 2]) -> [f64; 4] {
    let (a, b) = (x[0] * budget[0], x[2] * budget[1]);
    [a * x[1], a * (1.0 - x[1]), b * x[3], b * (1.0 - x[3])]
}

/// Best value of `score` over a grid with `steps` points per axis inside
/// `[lo, hi] ⊆ [0, 1]^4`.
pub fn grid_max(
    score: &dyn Fn(&[f64; 4]) -> f64,
    lo: &[f64; 4],
    hi: &[f64; 4],
    steps: usize,
) -> (f64, [f64; 4]) {
    let axis = |i: usize| -> Vec<f64> {
        (0..steps)
            .map(|t| lo[i] + (hi[i] - lo[i]) * t as f64 / (steps - 1) as f64)
            .collect()
    };
    let axes = [axis(0), axis(1), axis(2), axis(3)];
    let mut best = (f64::NEG_INFINITY, [0.0; 4]);
    for &t1 in &axes[0] {
        for &s1 in &axes[1] {
            for &t2 in &axes[2] {
                for &s2 in &axes[3] {
                    let x = [t1, s1, t2, s2];
                    let v = score(&x);
                    if v > best.0 {
                        best = (v, x);
                    }
                }
            }
        }
    }
    best
}

/// Dense grid followed by a shrinking local grid that recentres on every
/// improvement.
pub fn grid_search(score: &dyn Fn(&[f64; 4]) -> f64, steps: usize) -> f64 {
    let (mut best, mut at) = grid_max(score, &[0.0; 4], &[1.0; 4], steps);
    let mut width = 2.0 / (steps - 1) as f64;
    while width > 1e-7 {
        let lo: [f64; 4] = std::array::from_fn(|i| (at[i] - width).max(0.0));
        let hi: [f64; 4] = std::array::from_fn(|i| (at[i] + width).min(1.0));
        let (v, x) = grid_max(score, &lo, &hi, 5);
        if v > best {
            best = v;
            at = x;
        } else {
            width *= 0.5;
        }
    }
    best
}

pub fn two_device_inner_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let settings = ScaSettings::default();
    for case in 0..20 {
        let pr = random_problem(&mut rng, 2, 1, SplitMode::Rsma);
        let orders = random_orders(&mut rng, &pr);
        let eta = rng.gen_range(0.05..0.5) * eta_upper_bound(std::slice::from_ref(&pr));
        let p_ref = random_powers(&mut rng, &pr.max_power, 2);
        let s = Surrogate::new(&pr, &orders, &p_ref, eta);
        let out = solve_inner(&pr, &orders, &p_ref, eta, &settings).unwrap();
        let at_solution = s.value(&out.powers);
        assert!(
            (at_solution - out.objective).abs() <= 1e-9 * out.objective.abs(),
            "case {case}: reported {} vs recomputed {at_solution}",
            out.objective
        );

        let budget = [pr.max_power[0], pr.max_power[1]];
        // Primal: the max-min value on a 50^4 grid, refined locally. A lower
        // bound on the optimum.
        let primal = grid_search(&|x| s.value(&powers_at(x, &budget)), 50);
        // Dual: min over λ of the smooth weighted problem, an upper bound the
        // grid can resolve without tracking the kink of the minimum.
        let weighted = |lambda: f64| {
            grid_search(
                &|x| {
                    let v = s.pieces(&powers_at(x, &budget));
                    lambda * v[0] + (1.0 - lambda) * v[1]
                },
                12,
            )
        };
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (0.0, 1.0);
        let (mut c, mut d) = (b - golden * (b - a), a + golden * (b - a));
        let (mut fc, mut fd) = (weighted(c), weighted(d));
        while b - a > 1e-5 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - golden * (b - a);
                fc = weighted(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + golden * (b - a);
                fd = weighted(d);
            }
        }
        let dual = fc.min(fd).min(weighted(0.0)).min(weighted(1.0));
        assert!(
            primal <= dual + 1e-6 * dual.abs(),
            "case {case}: bounds cross"
        );
        let rel = (out.objective - dual).abs() / dual.abs();
        assert!(
            rel <= 1e-3,
            "case {case}: solver {} vs oracle bounds [{primal}, {dual}] (rel {rel:e})",
            out.objective
        );
    }
}

pub fn analytic_single_user_instances() {
    // B = 1 Hz, σ²B = 1, hP = 3 → R = 2; F = 2, T = 1.
    let cfg = SystemConfig {
        num_servers: 1,
        num_channels: 1,
        num_devices: 1,
        bandwidth_hz: 1.0,
        deadline_s: 1.0,
        noise_psd_w_per_hz: 1.0,
        max_tx_power_w: 1.0,
        server_frequency_bps: 2.0,
        ..SystemConfig::default()
    };
    let (r, f) = (2.0f64, 2.0f64);
    let expected = r * f / (f + r);
    let scenario = Scenario::from_gains(cfg.clone(), vec![3.0]).unwrap();
    let alloc = Allocation::from_assignment(1, 1, vec![Some(0)], vec![Some(0)]).unwrap();
    let settings = ScaSettings::default();
    let eps = 1e-4 * r.min(f);
    for mode in [SplitMode::Rsma, SplitMode::Noma] {
        let sol = bisection_mcor(
            &scenario,
            &alloc,
            &settings,
            mode,
            &mut SolverStats::default(),
        )
        .unwrap();
        assert!((sol.mcor - expected).abs() <= eps, "{mode:?}: {}", sol.mcor);
    }
    let tdma = tdma_maximin(&scenario, &alloc, &settings).unwrap();
    assert!((tdma.mcor - expected).abs() <= eps, "{}", tdma.mcor);

    // Two identical devices share one server: each gets half.
    let two = SystemConfig {
        num_devices: 2,
        ..cfg
    };
    let scenario = Scenario::from_gains(two, vec![3.0, 3.0]).unwrap();
    let alloc = Allocation::from_assignment(1, 1, vec![Some(0); 2], vec![Some(0); 2]).unwrap();
    let tdma = tdma_maximin(&scenario, &alloc, &settings).unwrap();
    assert!((tdma.mcor - expected / 2.0).abs() <= eps, "{}", tdma.mcor);
}

/// Feasibility of the TDMA time-allocation LP for one server, solved as a
/// generic linear program over the slot lengths.
pub fn tdma_lp_feasible(frequency: f64, deadline: f64, rates: &[f64], theta: f64) -> bool {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    // Mbit and seconds keep the coefficients near unity.
    let (f, th) = (frequency / 1e6, theta / 1e6);
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let t: Vec<_> = rates
        .iter()
        .map(|_| lp.add_var(0.0, (0.0, f64::INFINITY)))
        .collect();
    for (&v, &r) in t.iter().zip(rates) {
        lp.add_constraint(&[(v, r / 1e6 / deadline)], ComparisonOp::Ge, th);
    }
    let load: Vec<_> = t
        .iter()
        .zip(rates)
        .map(|(&v, &r)| (v, f + r / 1e6))
        .collect();
    lp.add_constraint(&load, ComparisonOp::Le, f * deadline);
    let time: Vec<_> = t.iter().map(|&v| (v, 1.0)).collect();
    lp.add_constraint(&time, ComparisonOp::Le, deadline);
    match lp.solve() {
        Ok(_) => true,
        Err(minilp::Error::Infeasible) => false,
        Err(e) => panic!("LP failed: {e}"),
    }
}

pub fn tdma_minimal_times_agree_with_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut yes, mut no) = (0, 0);
    for _ in 0..100 {
        let k = rng.gen_range(1..=8);
        let frequency = rng.gen_range(5e6..40e6);
        let rates: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2e6..30e6)).collect();
        // Common rate of the minimal-slot schedule, computed in closed form.
        let inv: f64 = rates.iter().map(|r| 1.0 / r).sum();
        let star = (frequency / (frequency * inv + k as f64)).min(1.0 / inv);
        let theta = star * rng.gen_range(0.5..1.5);
        let ours = tdma_feasible(frequency, 1.0, &rates, theta);
        let lp = tdma_lp_feasible(frequency, 1.0, &rates, theta);
        assert_eq!(ours, lp, "k={k} F={frequency} θ={theta} θ*={star}");
        if ours {
            yes += 1;
        } else {
            no += 1;
        }
    }
    assert!(yes > 20 && no > 20, "{yes} feasible, {no} infeasible");
}

pub fn terminal_matchings_have_no_blocking_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut capped = 0;
    for case in 0..200 {
        let m = rng.gen_range(1..=3);
        let n = rng.gen_range(2..=4);
        let k = rng.gen_range(3..=10);
        let scenario = generate_scenario(&system(m, n, k), rng.gen()).unwrap();
        let mode = if rng.gen_bool(0.7) {
            SplitMode::Rsma
        } else {
            SplitMode::Noma
        };
        let kind = if rng.gen_bool(0.5) {
            PreferenceKind::MaxMin
        } else {
            PreferenceKind::SumRate
        };
        let budget = vec![scenario.max_power(0); k];
        let p = random_powers(&mut rng, &budget, 2);
        let powers = PowerAllocation::from_pairs(p.chunks(2).map(|c| [c[0], c[1]]).collect());
        let t_offload: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..0.9)).collect();
        let mut state = MatchingState::new(&scenario, &powers, t_offload, vec![0.0; k], mode, kind);
        if mode == SplitMode::Noma && rng.gen_bool(0.3) {
            state = state.with_tdma_rates();
        }
        state.gs_channel_matching();
        let (_, cap_hit) = state.swap_refine(10 * k * k);
        if cap_hit {
            capped += 1;
            continue;
        }
        let groups = state.groups().to_vec();
        let without = |g: &[usize], d: usize| -> Vec<usize> {
            g.iter().copied().filter(|&x| x != d).collect()
        };
        let with = |g: &[usize], d: usize| -> Vec<usize> {
            let mut v = g.to_vec();
            v.push(d);
            v.sort_unstable();
            v
        };
        for (a, ga) in groups.iter().enumerate() {
            for (b, gb) in groups.iter().enumerate().skip(a + 1) {
                for &x in ga {
                    for &y in gb {
                        let (ra, rb) = (without(ga, x), without(gb, y));
                        let before = [
                            state.device_channel_pref(x, a, &ra),
                            state.device_channel_pref(y, b, &rb),
                            state.channel_utility(a, ga),
                            state.channel_utility(b, gb),
                        ];
                        let after = [
                            state.device_channel_pref(x, b, &rb),
                            state.device_channel_pref(y, a, &ra),
                            state.channel_utility(a, &with(&ra, y)),
                            state.channel_utility(b, &with(&rb, x)),
                        ];
                        let blocking = before.iter().zip(&after).all(|(u, v)| v >= u)
                            && before.iter().zip(&after).any(|(u, v)| v > u);
                        assert!(!blocking, "case {case}: devices {x} and {y} block");
                    }
                }
            }
        }
    }
    assert!(capped < 20, "swap cap hit on {capped} of 200 instances");
}

pub fn assert_schedule_identities(scenario: &Scenario, sol: &Solution, label: &str) {
    let t = scenario.config().deadline_s;
    for m in 0..scenario.num_servers() {
        let (t_o, t_c) = (sol.schedule.t_offload[m], sol.schedule.t_compute[m]);
        assert!(
            (t_o + t_c - t).abs() <= 1e-9 * t,
            "{label}: t_o + t_c = {}",
            t_o + t_c
        );
        let devs = sol.allocation.server_devices(m);
        let used: f64 = devs.iter().map(|&k| sol.schedule.frequency[k]).sum();
        assert!(
            used <= scenario.frequency(m) * (1.0 + 1e-9),
            "{label}: frequency overrun"
        );
        for &k in &devs {
            let f = sol.schedule.frequency[k];
            if f > 0.0 {
                let compute_time = sol.rates[k] * t / f;
                assert!(
                    (compute_time - t_c).abs() <= 1e-9 * t,
                    "{label}: device {k} {compute_time} vs {t_c}"
                );
            }
            if sol.tdma_slots.is_none() {
                let r = t_o / t * sol.link_rates[k];
                assert!(
                    (r - sol.rates[k]).abs() <= 1e-9 * r.max(1.0),
                    "{label}: device {k} rate"
                );
            }
        }
    }
    let min = sol.rates.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(sol.mcor, min, "{label}: mcor is not the minimum rate");
}

pub fn check_monotone_traces(rows: &[rsma_mec::sca::ScaTraceRow], label: &str) {
    for w in rows.windows(2) {
        if w[1].iteration > 0 {
            assert!(
                w[1].objective >= w[0].objective,
                "{label}: step {} server {} round {}: {} after {}",
                w[1].step,
                w[1].server,
                w[1].round,
                w[1].objective,
                w[0].objective
            );
        }
    }
}

pub fn schedules_and_traces_on_emitted_solutions() {
    let mut small = RunConfig::default();
    small.system = system(1, 1, 2);
    let mut mid = RunConfig::default();
    mid.system = system(2, 2, 5);
    for (cfg, seeds) in [(&small, 0..4u64), (&mid, 10..13)] {
        for seed in seeds {
            for algo in BaselineKind::ALL {
                let out = match run_instance_full(cfg, seed, algo, true, false) {
                    Ok(o) => o,
                    Err(rsma_mec::Error::GroupTooLarge { .. }) => continue,
                    Err(e) => panic!("{algo} seed {seed}: {e}"),
                };
                let label = format!("{algo} seed {seed}");
                assert_schedule_identities(&out.scenario, &out.solution, &label);
                if let Some(rows) = &out.sca_trace {
                    check_monotone_traces(rows, &label);
                }
            }
        }
    }
}

pub fn random_allocations_are_valid_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hist = [0usize; 4];
    for _ in 0..10_000 {
        let a = random_allocation(&mut rng, 3, 4, 6);
        assert!(a.is_valid() && a.is_complete());
        hist[a.channel_of(0).unwrap()] += 1;
    }
    let chi2: f64 = hist
        .iter()
        .map(|&h| (h as f64 - 2500.0).powi(2) / 2500.0)
        .sum();
    // 3 degrees of freedom, 0.1% critical value.
    assert!(chi2 < 16.27, "χ² = {chi2}");
}

/// Sum of all sub-message rates on one channel against the multiple-access
/// sum capacity, over 1000 random groups, orders and powers.
pub fn sic_telescoping_random_groups() {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let k = rng.gen_range(1..=6);
        let cfg = system(1, 1, k);
        let gains: Vec<f64> = (0..k)
            .map(|_| 10f64.powf(rng.gen_range(-14.0..-8.0)))
            .collect();
        let scenario = Scenario::from_gains(cfg.clone(), gains.clone()).unwrap();
        let p = random_powers(&mut rng, &vec![cfg.max_tx_power_w; k], 2);
        let powers = PowerAllocation::from_pairs(p.chunks(2).map(|c| [c[0], c[1]]).collect());
        let mut seq: Vec<SubMessage> = (0..k)
            .flat_map(|d| {
                [
                    SubMessage::new(d, Part::First),
                    SubMessage::new(d, Part::Second),
                ]
            })
            .collect();
        seq.shuffle(&mut rng);
        let order = DecodingOrder::new(seq).unwrap();
        let total: f64 = group_rates(&scenario, 0, 0, &order, &powers).iter().sum();
        let noise = cfg.noise_psd_w_per_hz * cfg.bandwidth_hz;
        let rx: f64 = (0..k).map(|d| gains[d] * powers.total(d)).sum();
        let expected = cfg.bandwidth_hz * (1.0 + rx / noise).log2();
        assert!(
            (total - expected).abs() <= 1e-10 * expected.max(f64::MIN_POSITIVE),
            "case {case}: {total} vs {expected}"
        );
    }
}
