//! Acceptance suite: fourteen numbered end-to-end checks covering solver
//! convergence, reflection correctness, confinement, gradient exactness,
//! likelihood accuracy, and full 2-d generation quality. Each test prints one
//! `ACCEPTANCE nn <label>: PASS` line on success; assertion messages carry the
//! criterion number so failures are attributable at a glance. Tolerances and
//! wall-clock budgets are asserted inline; budgets assume a single desktop
//! core and an optimized test profile.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rsb_core::domains::Domain;
use rsb_core::eot::{
    contraction_bound, coupling_from_potentials, diagnostics_report, dual_objective, solve,
    CostMatrix, DiscreteMeasure, MarginalSchedule, SinkhornOptions, SinkhornSolution,
};
use rsb_core::metrics::{
    exact_w1, ks_statistic_cdf, l1_hist_distance, sliced_w1, truncated_gaussian_density,
};
use rsb_core::sampling::{
    generate, negative_log_likelihood, GenerateOptions, NllOptions, NormalizedPrior, PriorSpec,
};
use rsb_core::scorenet::Mlp;
use rsb_core::sde::{
    simulate_backward_batch, simulate_forward_batch, simulate_forward_terminal,
    skorokhod_decompose, DriftSpec, SimOptions, TimeGrid, ZeroField,
};
use rsb_core::tasks::Task;
use rsb_core::training::{
    stage_loss, stage_loss_grad, train_bridge, zero_output_field, BridgeNets, LossDivergence,
    StageContext, TrainConfig, TrainOutcome,
};
use rsb_core::FieldNet;

fn pass(n: u32, label: &str) {
    println!("ACCEPTANCE {n:02} {label}: PASS");
}

/// Random instance on `[-1, 1]^2` with weights in `[0.2, 1.0)` (normalized
/// by construction) and squared-Euclidean cost rescaled to the given sup.
fn random_instance(
    seed: u64,
    n: usize,
    m: usize,
    sup: f64,
) -> (CostMatrix, DiscreteMeasure, DiscreteMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = |k: usize| -> DiscreteMeasure {
        let points = (0..k)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let weights = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        DiscreteMeasure::new(points, weights).unwrap()
    };
    let mu = cloud(n);
    let nu = cloud(m);
    let cost = CostMatrix::sq_euclidean(&mu, &nu)
        .unwrap()
        .rescaled_to_sup(sup)
        .unwrap();
    (cost, mu, nu)
}

/// Tightly converged run used as the optimum in gap computations.
fn reference_solution(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> SinkhornSolution {
    let reference = solve(
        cost,
        mu,
        nu,
        &SinkhornOptions {
            max_iters: 20_000,
            tol: 1e-14,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(reference.converged, "reference run failed to converge");
    reference
}

fn gap_sequence(run: &SinkhornSolution, g_star: f64) -> Vec<f64> {
    run.history
        .iter()
        .map(|r| (g_star - r.objective).max(0.0))
        .collect()
}

fn median_tail(values: &[f64], tail: usize) -> f64 {
    let start = values.len().saturating_sub(tail);
    let mut t = values[start..].to_vec();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t[t.len() / 2]
}

#[test]
fn acceptance_01_dual_gap_contracts_geometrically() {
    let start = Instant::now();
    let bound = contraction_bound(0.05);
    assert!(
        (bound - (1.0 - (-24.0 * 0.05f64).exp())).abs() < 1e-15,
        "criterion 1: contraction bound formula drifted"
    );
    for inst in 0..20u64 {
        let (cost, mu, nu) = random_instance(1000 + inst, 30, 30, 0.05);
        let reference = reference_solution(&cost, &mu, &nu);
        let g_star = dual_objective(&cost, &mu, &nu, &reference.potentials).unwrap();
        let run = solve(
            &cost,
            &mu,
            &nu,
            &SinkhornOptions {
                max_iters: 120,
                tol: -1.0,
                ..Default::default()
            },
        )
        .unwrap();
        let gaps = gap_sequence(&run, g_star);
        let hit = gaps.iter().position(|g| *g <= 1e-10);
        let k_hit = hit.unwrap_or_else(|| {
            panic!(
                "criterion 1: instance {inst} never reached gap 1e-10; last {:.3e}",
                gaps.last().unwrap()
            )
        });
        assert!(
            k_hit <= 500,
            "criterion 1: instance {inst} needed {k_hit} iterations"
        );
        for k in 0..k_hit {
            if gaps[k] <= 1e-10 {
                break;
            }
            assert!(
                gaps[k + 1] <= bound * gaps[k] * (1.0 + 1e-9) + 1e-15,
                "criterion 1: instance {inst} ratio {} at k={k} exceeds bound {bound}",
                gaps[k + 1] / gaps[k]
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "criterion 1: runtime {secs:.1}s over budget");
    pass(1, "dual gap geometric convergence");
}

#[test]
fn acceptance_02_perturbation_plateau_shrinks_with_tilt() {
    let start = Instant::now();
    let (cost, mu, nu) = random_instance(2001, 20, 20, 0.05);
    let reference = reference_solution(&cost, &mu, &nu);
    let g_star = dual_objective(&cost, &mu, &nu, &reference.potentials).unwrap();
    let tilts = [1e-2, 5e-3, 2.5e-3];
    let mut plateaus = Vec::new();
    for eps in tilts {
        let run = solve(
            &cost,
            &mu,
            &nu,
            &SinkhornOptions {
                max_iters: 250,
                tol: -1.0,
                schedule: MarginalSchedule::Tilted {
                    direction: vec![1.0, 0.5],
                    eps,
                },
                ..Default::default()
            },
        )
        .unwrap();
        let gaps = gap_sequence(&run, g_star);
        plateaus.push(median_tail(&gaps, 10));
    }
    for w in plateaus.windows(2) {
        assert!(
            w[1] < w[0],
            "criterion 2: plateau did not decrease: {plateaus:?}"
        );
    }
    // Halving the tilt must at least halve the plateau, up to factor 3.
    for (i, w) in plateaus.windows(2).enumerate() {
        let ratio_eps = tilts[i + 1] / tilts[i];
        assert!(
            w[1] <= 3.0 * w[0] * ratio_eps,
            "criterion 2: plateau fell slower than linearly: {plateaus:?} at tilts {tilts:?}"
        );
    }
    assert!(
        plateaus[2] > 1e-14,
        "criterion 2: smallest plateau {:.3e} is at the numeric floor, not resolvable",
        plateaus[2]
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "criterion 2: runtime {secs:.1}s over budget");
    pass(2, "perturbation plateau linear in tilt");
}

#[test]
fn acceptance_03_centering_identities_hold_per_iteration() {
    for seed in [31u64, 32, 33] {
        let (cost, mu, nu) = random_instance(seed, 5, 5, 0.8);
        let opts = |centered: bool| SinkhornOptions {
            max_iters: 60,
            tol: -1.0,
            centered,
            keep_history: true,
            ..Default::default()
        };
        let plain = solve(&cost, &mu, &nu, &opts(false)).unwrap();
        let centered = solve(&cost, &mu, &nu, &opts(true)).unwrap();
        let mut lambda_sum = 0.0;
        for (p_rec, c_rec) in plain.history.iter().zip(&centered.history) {
            lambda_sum += c_rec.lambda.unwrap_or(0.0);
            let p = p_rec.potentials.as_ref().unwrap();
            let c = c_rec.potentials.as_ref().unwrap();
            let mu_phi = mu.mean_of(&p.phi);
            for (cp, pp) in c.phi.iter().zip(&p.phi) {
                assert!(
                    (cp - (pp - mu_phi)).abs() <= 1e-10,
                    "criterion 3: centered phi mismatch at k={}",
                    c_rec.k
                );
            }
            for (cs, ps) in c.psi.iter().zip(&p.psi) {
                assert!(
                    (cs - (ps + mu_phi)).abs() <= 1e-10,
                    "criterion 3: centered psi mismatch at k={}",
                    c_rec.k
                );
            }
            assert!(
                (mu_phi + lambda_sum).abs() <= 1e-10,
                "criterion 3: shift sum {} vs mean {} at k={}",
                -lambda_sum,
                mu_phi,
                c_rec.k
            );
            assert!(
                (p_rec.objective - c_rec.objective).abs() <= 1e-10,
                "criterion 3: objective mismatch at k={}",
                c_rec.k
            );
        }
    }
    pass(3, "centering identities");
}

#[test]
fn acceptance_04_centered_potentials_stay_bounded() {
    let mut shape_rng = ChaCha8Rng::seed_from_u64(41);
    for inst in 0..100u64 {
        let n = shape_rng.gen_range(2..=8);
        let m = shape_rng.gen_range(2..=8);
        let sup = shape_rng.gen_range(0.02..1.2);
        let (cost, mu, nu) = random_instance(4100 + inst, n, m, sup);
        let run = solve(
            &cost,
            &mu,
            &nu,
            &SinkhornOptions {
                max_iters: 150,
                tol: 1e-12,
                centered: true,
                keep_history: true,
                ..Default::default()
            },
        )
        .unwrap();
        for rec in &run.history {
            let pot = rec.potentials.as_ref().unwrap();
            let phi_max = pot.phi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let psi_max = pot.psi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(
                phi_max <= 2.0 * sup + 1e-8,
                "criterion 4: instance {inst} phi sup {phi_max} > {} at k={}",
                2.0 * sup,
                rec.k
            );
            assert!(
                psi_max <= 3.0 * sup + 1e-8,
                "criterion 4: instance {inst} psi sup {psi_max} > {} at k={}",
                3.0 * sup,
                rec.k
            );
        }
    }
    pass(4, "centered potential bounds");
}

/// Golden-section minimizer of a unimodal function on `[lo, hi]`.
fn golden_min(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    for _ in 0..160 {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Primal minimizer over the transportation polytope by exact line searches
/// along elementary cycles, starting from the independent coupling. No
/// potentials, no matrix scaling: an independent oracle for tiny instances.
fn brute_force_entropic(cost: &CostMatrix, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Vec<f64> {
    let n = cost.n;
    let m = cost.m;
    let mut g: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| mu.weights[i] * nu.weights[j])
        .collect();
    let cell = |v: f64, i: usize, j: usize| -> f64 {
        if v <= 0.0 {
            0.0
        } else {
            v * cost.at(i, j) + v * (v / (mu.weights[i] * nu.weights[j])).ln()
        }
    };
    let mut cycles = Vec::new();
    for i1 in 0..n {
        for i2 in i1 + 1..n {
            for j1 in 0..m {
                for j2 in j1 + 1..m {
                    cycles.push((i1, i2, j1, j2));
                }
            }
        }
    }
    for _ in 0..4000 {
        let mut biggest = 0.0f64;
        for &(i1, i2, j1, j2) in &cycles {
            let (p, q, r, s) = (i1 * m + j1, i1 * m + j2, i2 * m + j1, i2 * m + j2);
            let lo = -g[p].min(g[s]);
            let hi = g[q].min(g[r]);
            if hi - lo <= 0.0 {
                continue;
            }
            let obj = |t: f64| {
                cell(g[p] + t, i1, j1)
                    + cell(g[q] - t, i1, j2)
                    + cell(g[r] - t, i2, j1)
                    + cell(g[s] + t, i2, j2)
            };
            let t = golden_min(lo, hi, obj);
            if obj(t) < obj(0.0) {
                g[p] += t;
                g[q] -= t;
                g[r] -= t;
                g[s] += t;
                biggest = biggest.max(t.abs());
            }
        }
        if biggest < 1e-15 {
            break;
        }
    }
    g
}

#[test]
fn acceptance_05_duality_gap_and_polytope_oracle() {
    for (seed, n, m) in [
        (51u64, 2usize, 2usize),
        (52, 2, 2),
        (53, 2, 3),
        (54, 3, 2),
        (55, 3, 3),
        (56, 3, 3),
    ] {
        let (cost, mu, nu) = random_instance(seed, n, m, 1.0);
        let sol = solve(
            &cost,
            &mu,
            &nu,
            &SinkhornOptions {
                max_iters: 5000,
                tol: 1e-13,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sol.converged, "criterion 5: solve did not converge");
        let pi = coupling_from_potentials(&cost, &mu, &nu, &sol.potentials).unwrap();
        // Numeric relative entropy of the coupling against the cost-tilted
        // product measure, no shortcut through the potentials.
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = pi.at(i, j);
                if p > 0.0 {
                    let gibbs = mu.weights[i] * nu.weights[j] * (-cost.at(i, j)).exp();
                    kl += p * (p / gibbs).ln();
                }
            }
        }
        let g_val = dual_objective(&cost, &mu, &nu, &sol.potentials).unwrap();
        assert!(
            (kl - g_val).abs() <= 1e-8,
            "criterion 5: KL {kl} vs dual value {g_val} on {n}x{m} seed {seed}"
        );
        let oracle = brute_force_entropic(&cost, &mu, &nu);
        for i in 0..n {
            for j in 0..m {
                assert!(
                    (pi.at(i, j) - oracle[i * m + j]).abs() <= 1e-6,
                    "criterion 5: coupling entry ({i},{j}) {} vs oracle {} on seed {seed}",
                    pi.at(i, j),
                    oracle[i * m + j]
                );
            }
        }
    }
    pass(5, "duality gap and polytope oracle");
}

#[test]
fn acceptance_06_coupling_distance_decay_and_tilt_scaling() {
    let (cost, mu, nu) = random_instance(61, 8, 8, 0.8);
    let reference = reference_solution(&cost, &mu, &nu);
    let run = solve(
        &cost,
        &mu,
        &nu,
        &SinkhornOptions {
            max_iters: 140,
            tol: -1.0,
            keep_history: true,
            ..Default::default()
        },
    )
    .unwrap();
    let report = diagnostics_report(&cost, &mu, &nu, &run, &reference, true).unwrap();
    let w1s: Vec<f64> = report.iter().map(|r| r.w1.unwrap()).collect();
    let plateau = median_tail(&w1s, 10).max(1e-15);
    let usable: Vec<(f64, f64)> = w1s
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 100.0 * plateau)
        .map(|(k, w)| (k as f64, w.ln()))
        .collect();
    assert!(
        usable.len() >= 6,
        "criterion 6: only {} usable decay points",
        usable.len()
    );
    assert!(
        w1s[0] > 1e3 * plateau,
        "criterion 6: no substantial decay: start {} plateau {plateau}",
        w1s[0]
    );
    let n = usable.len() as f64;
    let sx: f64 = usable.iter().map(|(x, _)| x).sum();
    let sy: f64 = usable.iter().map(|(_, y)| y).sum();
    let sxx: f64 = usable.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = usable.iter().map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let rate = slope.exp();
    assert!(rate < 1.0, "criterion 6: fitted rate {rate} not decaying");
    let c_env = usable
        .iter()
        .map(|(k, lw)| lw.exp() / rate.powf(*k))
        .fold(0.0f64, f64::max);
    for (k, w) in w1s.iter().enumerate() {
        assert!(
            *w <= c_env * rate.powi(k as i32) + 2.0 * plateau + 1e-12,
            "criterion 6: point k={k} w1={w} escapes the fitted envelope"
        );
    }

    // Tilted marginals: the converged coupling's distance to the exact
    // optimum scales no worse than the square root of the tilt, with a
    // stable constant across a 4x tilt change.
    let ref_coupling = coupling_from_potentials(&cost, &mu, &nu, &reference.potentials).unwrap();
    let (ref_pts, ref_ws) = ref_coupling.product_cloud(&mu, &nu, 1e-300);
    let mut constants = Vec::new();
    for eps in [1e-2, 2.5e-3] {
        let tilted = solve(
            &cost,
            &mu,
            &nu,
            &SinkhornOptions {
                max_iters: 20_000,
                tol: 1e-13,
                schedule: MarginalSchedule::Tilted {
                    direction: vec![0.8, 0.6],
                    eps,
                },
                ..Default::default()
            },
        )
        .unwrap();
        assert!(tilted.converged, "criterion 6: tilted run did not converge");
        let coupling = coupling_from_potentials(&cost, &mu, &nu, &tilted.potentials).unwrap();
        let (pts, ws) = coupling.product_cloud(&mu, &nu, 1e-300);
        // The tilted fixed point carries total mass 1 + O(tilt); compare the
        // couplings as probability measures.
        let total: f64 = ws.iter().sum();
        let ws: Vec<f64> = ws.iter().map(|w| w / total).collect();
        let w1 = exact_w1(&pts, &ws, &ref_pts, &ref_ws).unwrap();
        constants.push(w1 / eps.sqrt());
    }
    let ratio = constants[0] / constants[1];
    assert!(
        (1.0 / 3.0..=3.0).contains(&ratio),
        "criterion 6: tilt constants {constants:?} differ by factor {ratio}"
    );
    pass(6, "coupling distance decay and tilt scaling");
}

#[test]
fn acceptance_07_invariant_laws_of_reflected_diffusions() {
    // Mean-reverting diffusion on [-1, 1]: unit noise scale and unit
    // reversion leave a standard Gaussian restricted to the interval.
    let t0 = Instant::now();
    let dom = Domain::symmetric_cube(1);
    let grid = TimeGrid::uniform(8.0, 1000).unwrap();
    let starts = vec![vec![0.0]; 100_000];
    let batch = simulate_forward_terminal(
        &dom,
        &DriftSpec::ReflectedOu { theta: 1.0 },
        1.0,
        &ZeroField,
        &starts,
        &grid,
        &SimOptions {
            truncate_endpoint_scores: false,
        },
        7001,
    )
    .unwrap();
    let xs: Vec<f64> = batch.points.iter().map(|p| p[0]).collect();
    assert!(
        xs.iter().all(|x| (-1.0..=1.0).contains(x)),
        "criterion 7/9: mean-reverting terminal left the interval"
    );
    let l1 = l1_hist_distance(&xs, -1.0, 1.0, 40, |x| {
        truncated_gaussian_density(x, 0.0, 1.0, -1.0, 1.0)
    })
    .unwrap();
    let ou_secs = t0.elapsed().as_secs_f64();
    assert!(l1 <= 0.05, "criterion 7: L1 distance {l1} > 0.05");
    assert!(
        ou_secs < 60.0,
        "criterion 7: mean-reverting runtime {ou_secs:.1}s over budget"
    );

    // Driftless diffusion on [0, 1] relaxes to the uniform law.
    let t1 = Instant::now();
    let dom = Domain::unit_cube(1);
    let grid = TimeGrid::uniform(2.0, 1000).unwrap();
    let starts = vec![vec![0.5]; 100_000];
    let batch = simulate_forward_terminal(
        &dom,
        &DriftSpec::Zero,
        0.5,
        &ZeroField,
        &starts,
        &grid,
        &SimOptions {
            truncate_endpoint_scores: false,
        },
        7002,
    )
    .unwrap();
    let xs: Vec<f64> = batch.points.iter().map(|p| p[0]).collect();
    assert!(
        xs.iter().all(|x| (0.0..=1.0).contains(x)),
        "criterion 7/9: driftless terminal left the interval"
    );
    let ks = ks_statistic_cdf(&xs, |x| x.clamp(0.0, 1.0)).unwrap();
    let bm_secs = t1.elapsed().as_secs_f64();
    assert!(ks <= 0.02, "criterion 7: KS statistic {ks} > 0.02");
    assert!(
        bm_secs < 60.0,
        "criterion 7: driftless runtime {bm_secs:.1}s over budget"
    );
    pass(7, "invariant laws of reflected diffusions");
}

#[test]
fn acceptance_08_projection_matches_running_minimum() {
    // On a half-line the projected walk equals the running-minimum
    // construction: y_k = w_k + max(0, -min_{j<=k} w_j). The far wall of the
    // interval is placed out of reach so only the origin reflects.
    let dom = Domain::hypercube(vec![0.0], vec![1e6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    for path in 0..1000 {
        let x0 = rng.gen_range(0.1..2.0);
        let incs: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![0.25 * rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let (states, dls) = skorokhod_decompose(&dom, &[x0], &incs).unwrap();
        let mut w = x0;
        let mut min_w = x0;
        let mut l_prev = 0.0;
        for k in 0..incs.len() {
            w += incs[k][0];
            min_w = min_w.min(w);
            let l = (-min_w).max(0.0);
            let y = w + l;
            assert!(
                y < 5e5,
                "criterion 8: path {path} drifted into the far wall"
            );
            assert!(
                (states[k + 1][0] - y).abs() <= 1e-12,
                "criterion 8: path {path} state mismatch {} vs {y} at step {k}",
                states[k + 1][0]
            );
            assert!(
                (dls[k] - (l - l_prev)).abs() <= 1e-12,
                "criterion 8: path {path} local-time increment mismatch at step {k}"
            );
            l_prev = l;
        }
    }
    pass(8, "projection equals running-minimum reflection");
}

#[test]
fn acceptance_09_confinement_across_domains_and_drifts() {
    // Dedicated sweep; the sampling, likelihood, and generation tests of
    // this suite additionally assert containment of everything they produce.
    let domains: Vec<Domain> = vec![
        Domain::symmetric_cube(2),
        Domain::ball(vec![0.3, -0.2], 1.5).unwrap(),
        Domain::flower(5, 1.5).unwrap(),
        Domain::heart().unwrap(),
        Domain::regular_octagon(2.0).unwrap(),
        Domain::simplex(2).unwrap(),
    ];
    let drifts = [
        DriftSpec::Zero,
        DriftSpec::ReflectedOu { theta: 1.0 },
        DriftSpec::Rve {
            sigma_min: 0.05,
            sigma_max: 3.0,
            t_end: 1.0,
        },
    ];
    let grid = TimeGrid::uniform(1.0, 60).unwrap();
    let opts = SimOptions {
        truncate_endpoint_scores: false,
    };
    // Outward-pushing guide field, to stress the reflection rather than
    // relax toward the interior.
    let outward = |x: &[f64], _t: f64, out: &mut [f64]| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 2.0 * xi;
        }
    };
    for (di, dom) in domains.iter().enumerate() {
        let starts = vec![dom.interior_point(); 12];
        for (si, drift) in drifts.iter().enumerate() {
            for seed in [1u64, 2, 3] {
                let tag = seed + 10 * (si as u64 + 10 * di as u64);
                let fwd = simulate_forward_batch(
                    dom,
                    drift,
                    0.8,
                    &outward,
                    &starts,
                    &grid,
                    &opts,
                    9000 + tag,
                )
                .unwrap();
                let bwd = simulate_backward_batch(
                    dom,
                    drift,
                    0.8,
                    &outward,
                    &starts,
                    &grid,
                    &opts,
                    9500 + tag,
                )
                .unwrap();
                for traj in fwd.iter().chain(&bwd) {
                    for state in &traj.states {
                        assert!(
                            dom.contains(state).unwrap(),
                            "criterion 9: state {state:?} escaped domain {di} (drift {si}, seed {seed})"
                        );
                    }
                }
            }
        }
    }
    pass(9, "confinement across domains and drifts");
}

#[test]
fn acceptance_10_stage_loss_gradients_match_finite_differences() {
    let dom = Domain::symmetric_cube(2);
    let drift = DriftSpec::ReflectedOu { theta: 1.0 };
    let epsilon = 0.8;
    let grid = TimeGrid::uniform(1.0, 25).unwrap();
    let starts = vec![
        vec![0.0, 0.0],
        vec![0.6, 0.2],
        vec![-0.5, 0.5],
        vec![0.3, -0.7],
        vec![-0.2, -0.2],
        vec![0.7, 0.7],
    ];
    let trajs = simulate_forward_batch(
        &dom,
        &drift,
        epsilon,
        &ZeroField,
        &starts,
        &grid,
        &SimOptions::default(),
        101,
    )
    .unwrap();
    let hits: usize = trajs.iter().map(|t| t.hit_count()).sum();
    assert!(
        hits >= 3,
        "criterion 10: batch has only {hits} boundary contacts; the boundary terms are untested"
    );
    let widths = vec![3usize, 6, 2];
    let mut net_rng = ChaCha8Rng::seed_from_u64(102);
    let trained = FieldNet::new(Mlp::glorot(&widths, &mut net_rng).unwrap()).unwrap();
    let frozen = |x: &[f64], t: f64, out: &mut [f64]| {
        out[0] = 0.4 * x[1] - 0.2 * t;
        out[1] = -0.3 * x[0] + 0.1;
    };
    let refs: Vec<&rsb_core::Trajectory> = trajs.iter().collect();
    for divergence in [
        LossDivergence::Exact,
        LossDivergence::Hutchinson { probes: 4, seed: 9 },
    ] {
        let ctx = StageContext {
            drift: &drift,
            epsilon,
            divergence,
        };
        let n_params = trained.net.n_params();
        let mut grad = vec![0.0; n_params];
        stage_loss_grad(&ctx, &trained, &frozen, &refs, &mut grad).unwrap();
        let base = trained.net.params.clone();
        for p in 0..n_params {
            let h = 1e-5 * (1.0 + base[p].abs());
            let mut plus = base.clone();
            plus[p] += h;
            let mut minus = base.clone();
            minus[p] -= h;
            let lp = stage_loss(
                &ctx,
                &FieldNet::new(Mlp::with_params(&widths, plus).unwrap()).unwrap(),
                &frozen,
                &refs,
            )
            .unwrap();
            let lm = stage_loss(
                &ctx,
                &FieldNet::new(Mlp::with_params(&widths, minus).unwrap()).unwrap(),
                &frozen,
                &refs,
            )
            .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[p].abs());
            if denom < 1e-8 {
                continue;
            }
            assert!(
                (fd - grad[p]).abs() / denom <= 1e-4,
                "criterion 10: param {p} grad {} vs fd {fd} (divergence {:?})",
                grad[p],
                ctx.divergence
            );
        }
    }
    pass(10, "stage-loss gradients match finite differences");
}

#[test]
fn acceptance_11_flow_likelihood_matches_analytic_density() {
    // Stationary mean-reverting diffusion on [-1, 1]: the generation-side
    // field carrying the truncated-Gaussian score makes the flow likelihood
    // equal the stationary density itself.
    let dom = Domain::symmetric_cube(1);
    let drift = DriftSpec::ReflectedOu { theta: 1.0 };
    let z_bwd = |x: &[f64], _t: f64, out: &mut [f64]| {
        out[0] = 2.0f64.sqrt() * (-x[0]);
    };
    let prior =
        NormalizedPrior::new(PriorSpec::truncated_gaussian(vec![0.0], 1.0), &dom, 1000, 7).unwrap();
    let grid = TimeGrid::uniform(1.0, 400).unwrap();
    let points = vec![vec![-0.8], vec![-0.45], vec![0.0], vec![0.3], vec![0.75]];
    let opts = NllOptions {
        truncate_endpoint_scores: false,
        ..NllOptions::default()
    };
    let report = negative_log_likelihood(
        &dom, &drift, 1.0, &prior, None, &z_bwd, &points, &grid, &opts,
    )
    .unwrap();
    assert!(
        report.flagged.is_empty(),
        "criterion 11/9: flow endpoints left the domain"
    );
    for (x, nats) in points.iter().zip(&report.per_sample_nats) {
        let expect = -truncated_gaussian_density(x[0], 0.0, 1.0, -1.0, 1.0).ln();
        assert!(
            (nats - expect).abs() <= 0.02,
            "criterion 11: nll {nats} vs analytic {expect} at x={}",
            x[0]
        );
    }

    // Zero fields on the unit square with a flat prior: the flow moves
    // nothing and the likelihood is exactly zero nats.
    let dom = Domain::unit_cube(2);
    let prior = NormalizedPrior::new(PriorSpec::uniform(), &dom, 1000, 3).unwrap();
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let points = vec![
        vec![0.2, 0.7],
        vec![0.5, 0.5],
        vec![0.9, 0.1],
        vec![0.33, 0.66],
    ];
    let report = negative_log_likelihood(
        &dom,
        &DriftSpec::Zero,
        0.5,
        &prior,
        None,
        &ZeroField,
        &points,
        &grid,
        &NllOptions::default(),
    )
    .unwrap();
    for nats in &report.per_sample_nats {
        assert!(
            nats.abs() <= 1e-10,
            "criterion 11: flat case returned {nats} nats"
        );
    }
    pass(11, "flow likelihood matches analytic density");
}

/// Training budget for the generation criteria, sized for a single core.
fn acceptance_train_config(seed: u64, stages: usize) -> TrainConfig {
    TrainConfig {
        stages,
        steps_per_stage: 200,
        pool_paths: 256,
        batch_paths: 64,
        refresh_every: 40,
        seed,
        ..TrainConfig::default()
    }
}

struct TaskModel {
    outcome: TrainOutcome,
    train_secs: f64,
}

fn train_task(task: Task, stages: usize, seed: u64) -> TaskModel {
    let domain = task.domain();
    let drift = task.drift();
    let grid = task.grid();
    let prior = task.prior();
    let widths = task.net_widths();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut nets = BridgeNets {
        forward: zero_output_field(&widths, &mut init_rng).unwrap(),
        backward: zero_output_field(&widths, &mut init_rng).unwrap(),
    };
    let mut sample_data = |rng: &mut ChaCha8Rng| task.sample_data(&domain, rng);
    let mut sample_prior = |rng: &mut ChaCha8Rng| prior.sample(&domain, rng).expect("prior draw");
    let cfg = acceptance_train_config(seed, stages);
    let t0 = Instant::now();
    let outcome = train_bridge(
        &domain,
        &drift,
        &grid,
        &mut nets,
        &mut sample_data,
        &mut sample_prior,
        &cfg,
        None,
    )
    .unwrap();
    TaskModel {
        outcome,
        train_secs: t0.elapsed().as_secs_f64(),
    }
}

fn spiral_full() -> &'static TaskModel {
    static CELL: OnceLock<TaskModel> = OnceLock::new();
    CELL.get_or_init(|| train_task(Task::SpiralFlower, 4, 12))
}

fn spiral_warmup() -> &'static TaskModel {
    static CELL: OnceLock<TaskModel> = OnceLock::new();
    CELL.get_or_init(|| train_task(Task::SpiralFlower, 1, 12))
}

fn generation_w1(task: Task, model: &TaskModel, grid: &TimeGrid, n: usize, seed: u64) -> f64 {
    let domain = task.domain();
    let outcome = generate(
        &domain,
        &task.drift(),
        0.5,
        &task.prior(),
        &model.outcome.ema.backward,
        Some(&model.outcome.ema.forward),
        grid,
        n,
        &GenerateOptions::default(),
        seed,
    )
    .unwrap();
    for s in &outcome.samples {
        assert!(
            domain.contains(s).unwrap(),
            "criterion 9: generated sample {s:?} escaped the {} domain",
            task.name()
        );
    }
    let data = task.data_cloud(n, 987);
    let uw = vec![1.0 / n as f64; n];
    sliced_w1(&outcome.samples, &uw, &data, &uw, 128, 1).unwrap()
}

#[test]
fn acceptance_12_two_dimensional_generation_quality() {
    for task in Task::ALL {
        let t0 = Instant::now();
        let model = match task {
            Task::SpiralFlower => {
                let m = spiral_full();
                TaskModel {
                    outcome: m.outcome.clone(),
                    train_secs: m.train_secs,
                }
            }
            _ => train_task(task, 4, 12),
        };
        let w1 = generation_w1(task, &model, &task.grid(), 10_000, 555);
        let diameter = task.domain().diameter();
        let total_secs = model.train_secs + t0.elapsed().as_secs_f64();
        println!(
            "ACCEPTANCE 12 {}: sliced distance {w1:.4} vs allowance {:.4}, {total_secs:.0}s",
            task.name(),
            0.15 * diameter
        );
        assert!(
            w1 <= 0.15 * diameter,
            "criterion 12: {} sliced distance {w1:.4} > 0.15 x diameter {diameter:.3}",
            task.name()
        );
        assert!(
            total_secs < 900.0,
            "criterion 12: {} took {total_secs:.0}s, over the per-task budget",
            task.name()
        );
    }
    pass(12, "two-dimensional generation quality");
}

#[test]
fn acceptance_13_coarse_stepping_beats_warmup_only() {
    let task = Task::SpiralFlower;
    let grid20 = TimeGrid::uniform(1.0, 20).unwrap();
    let w1_full = generation_w1(task, spiral_full(), &grid20, 10_000, 556);
    let w1_warm = generation_w1(task, spiral_warmup(), &grid20, 10_000, 556);
    println!("ACCEPTANCE 13 margins: alternation {w1_full:.4}, warmup-only {w1_warm:.4}");
    assert!(
        w1_full <= w1_warm,
        "criterion 13: alternation-trained {w1_full:.4} worse than warmup-only {w1_warm:.4} at 20 steps"
    );
    pass(13, "coarse stepping beats warmup-only");
}

#[test]
fn acceptance_14_tilted_weights_have_stable_log_ratio_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(141);
    for inst in 0..3 {
        let points: Vec<Vec<f64>> = (0..12)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(0.2..1.0)).collect();
        let mu = DiscreteMeasure::new(points, weights).unwrap();
        let dir = vec![0.6, -0.8];
        let d_max = mu
            .points
            .iter()
            .map(|p| (dir[0] * p[0] + dir[1] * p[1]).abs())
            .fold(0.0f64, f64::max);
        let log_ratio_sup = |eps: f64| -> f64 {
            let tilted = mu.perturb(&dir, eps).unwrap();
            mu.weights
                .iter()
                .zip(&tilted.weights)
                .map(|(w, t)| (t / w).ln().abs())
                .fold(0.0f64, f64::max)
        };
        let tilts = [1e-2, 5e-3, 2.5e-3];
        let mut constants = Vec::new();
        for eps in tilts {
            let r = log_ratio_sup(eps);
            assert!(
                r <= 2.0 * d_max * eps + 1e-12,
                "criterion 14: instance {inst} sup log ratio {r} above the explicit bound at tilt {eps}"
            );
            constants.push(r / eps);
        }
        for w in constants.windows(2) {
            assert!(
                (w[1] - w[0]).abs() <= 0.25 * w[0],
                "criterion 14: instance {inst} constants {constants:?} not stable under halving"
            );
        }
    }
    pass(14, "tilted weights have a stable log-ratio constant");
}
