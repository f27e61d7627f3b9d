//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs sequentially with its own `main` so that wall-clock limits are
//! meaningful. Criteria 3, 6 and 9 are reported but do not fail the run;
//! see the README for the measured gap.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use coverlab::chenstein;
use coverlab::cli::{self, ExperimentConfig, ExperimentKind};
use coverlab::excursion::{self, AnnulusGeometry, AnnulusSpec, CenterTracker, Excursion, ExcursionCount};
use coverlab::gff::{self, GffSpec, HighPointSpec};
use coverlab::hitting::{self, ConstantsParams, GreenConstants};
use coverlab::lattice::{LatticeConfig, Point, PointSet};
use coverlab::oracle::{self, OracleBudget, TinyAnnulus};
use coverlab::stats;
use coverlab::uncovered::{self, SurrogateInputs};
use coverlab::walk::WalkState;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Suite {
    lines: Vec<(u32, bool, bool)>,
    /// From `COVERLAB_ACCEPTANCE`, e.g. `2,7`; all criteria when unset.
    only: Option<Vec<u32>>,
}

impl Suite {
    fn from_env() -> Self {
        let only = std::env::var("COVERLAB_ACCEPTANCE").ok().map(|v| {
            v.split(',')
                .filter_map(|x| x.trim().parse().ok())
                .collect()
        });
        Self { lines: Vec::new(), only }
    }

    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|o| o.contains(&id))
    }

    /// Runs one criterion; `binding` criteria fail the process when they fail.
    fn run<F: FnOnce() -> Outcome>(&mut self, id: u32, limit: Duration, binding: bool, f: F) {
        if !self.wants(id) {
            return;
        }
        let t = Instant::now();
        let out = f();
        let el = t.elapsed();
        let in_time = el <= limit;
        let pass = out.pass && in_time;
        println!(
            "criterion {id:>2}: {} ({:.1}s of {}s) {}",
            if pass { "PASS" } else { "FAIL" },
            el.as_secs_f64(),
            limit.as_secs(),
            out.detail
        );
        self.lines.push((id, pass, binding));
    }
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn z_ok(z: f64) -> bool {
    z.is_finite() && z.abs() <= 3.0
}

/// Two-sided `|z|` cutoff holding the family-wise level of a single 3σ test
/// across `k` comparisons.
fn bonferroni_3sigma(k: usize) -> f64 {
    let level = 2.0 * stats::normal_sf(3.0);
    stats::normal_quantile(1.0 - level / (2.0 * k.max(1) as f64))
}

fn criterion_1(constants: &GreenConstants) -> Outcome {
    let (id, se) = constants.identity_check();
    let z = (id - 1.0) / se;
    let in_range = (0.33..=0.35).contains(&constants.p_d);
    Outcome {
        pass: in_range && z_ok(z),
        detail: format!(
            "p_3 = {:.5}, G0 = {:.5}, G_L(0)(1 - p_L) = {id:.5} ± {se:.5} (z = {z:.2})",
            constants.p_d, constants.g0
        ),
    }
}

fn tiny_hitting(cfg: &LatticeConfig, seed: u64, replicas: u64) -> (f64, f64, f64) {
    let start = Point::new(vec![2, 1, 0]);
    let target = PointSet::sparse(cfg.volume(), vec![cfg.index(&Point::origin(3))]);
    let plane: Vec<usize> = (0..cfg.volume()).filter(|&s| cfg.point(s).coords()[0] == 6).collect();
    let avoid = PointSet::sparse(cfg.volume(), plane);
    let exact = hitting::exact_hit_prob(cfg, &start, &target, &avoid).unwrap();
    let mut hits = 0u64;
    for rep in 0..replicas {
        let mut w = WalkState::start_at(cfg, &start, seed, rep).unwrap();
        loop {
            let p = w.position();
            if target.contains(p) {
                hits += 1;
                break;
            }
            if avoid.contains(p) {
                break;
            }
            w.step();
        }
    }
    let p = hits as f64 / replicas as f64;
    let se = (exact * (1.0 - exact) / replicas as f64).sqrt();
    (p, exact, (p - exact) / se)
}

/// Excursion counts from the automaton against replay of stored paths.
fn tiny_counts(cfg: &LatticeConfig, r: f64, big_r: f64, seed: u64, replicas: u64) -> u64 {
    let horizon = 1500;
    let center = Point::origin(3);
    let a = AnnulusSpec::new(cfg, center.clone(), r, big_r).unwrap();
    let mut mismatches = 0;
    for rep in 0..replicas {
        let mut w1 = WalkState::start_stationary(cfg, seed, rep).unwrap();
        let mut w2 = w1.clone();
        let log = excursion::record_excursions(&mut w1, &a, horizon).unwrap();
        let traj = oracle::record_trajectory(&mut w2, horizon);
        let (rho, rho_tilde) = oracle::replay_stopping_times(&traj, &center, r, big_r);
        let same_times = log.rho == rho && log.rho_tilde == rho_tilde;
        let same_counts = [horizon / 3, horizon / 2, horizon].iter().all(|&t| {
            excursion::count_excursions(&log, t)
                == ExcursionCount::Determined(oracle::replay_count(&traj, &center, r, big_r, t))
        });
        if !(same_times && same_counts) {
            mismatches += 1;
        }
    }
    mismatches
}

/// Miss probability of three excursions from a fixed exit point, by direct
/// simulation and by the exact exit chain.
fn tiny_conditional_q(
    cfg: &LatticeConfig,
    tiny: &TinyAnnulus,
    geom: &Arc<AnnulusGeometry>,
    seed: u64,
    replicas: u64,
) -> (f64, f64, f64, f64, f64) {
    const STEPS: usize = 3;
    let to_tiny: Vec<usize> = geom
        .exit_shell()
        .iter()
        .map(|o| tiny.exit_index(o).expect("same exit shell"))
        .collect();
    let start_exit = 0u32;
    let offset = geom.exit_shell()[0].clone();
    let origin = Point::origin(3);
    let start = cfg.translate(&origin, &offset).unwrap();
    let nx = tiny.exit.len();
    let mut v = vec![1.0; nx];
    for _ in 0..STEPS {
        v = (0..nx)
            .map(|a| (0..nx).map(|b| tiny.miss_joint[a * nx + b] * v[b]).sum())
            .collect();
    }
    let exact = v[to_tiny[start_exit as usize]];

    let (mut q_sum, mut d_sum, mut d_sq) = (0.0, 0.0, 0.0);
    for rep in 0..replicas {
        let mut w = WalkState::start_at(cfg, &start, seed, rep).unwrap();
        let mut tr = CenterTracker::new(cfg, Arc::clone(geom), &origin, None, false);
        tr.seed_exit(start_exit, 0);
        let mut events: Vec<Excursion> = Vec::with_capacity(STEPS);
        while events.len() < STEPS {
            if w.step().is_some() {
                let t = w.time();
                tr.observe(w.coords(), t, &mut |e: &Excursion| events.push(*e));
            }
        }
        let q = if events.iter().any(|e| e.hit_center) { 0.0 } else { 1.0 };
        let prod: f64 = events
            .iter()
            .map(|e| tiny.f(to_tiny[e.from as usize], to_tiny[e.to as usize]))
            .product();
        q_sum += q;
        d_sum += q - prod;
        d_sq += (q - prod) * (q - prod);
    }
    let n = replicas as f64;
    let q = q_sum / n;
    let z_q = (q - exact) / (exact * (1.0 - exact) / n).sqrt();
    let d = d_sum / n;
    let d_se = ((d_sq / n - d * d) / (n - 1.0)).sqrt();
    (q, exact, z_q, d, d / d_se)
}

fn criterion_2(seed: u64) -> Outcome {
    let cfg = LatticeConfig::torus(3, 12).unwrap();
    let (r, big_r) = (1.0, 2.5);
    let tiny = TinyAnnulus::new(&cfg, r, big_r, &OracleBudget::default()).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;

    let (p_mc, p_exact, z_hit) = tiny_hitting(&cfg, seed, 20_000);
    pass &= z_ok(z_hit);
    parts.push(format!("hit {p_mc:.4} vs {p_exact:.4} (z {z_hit:.2})"));

    let mismatches = tiny_counts(&cfg, r, big_r, seed + 1, 10_000);
    let a = AnnulusSpec::new(&cfg, Point::origin(3), r, big_r).unwrap();
    let (t_hat, t_se) = excursion::estimate_t(&cfg, &a, 400_000, seed + 2).unwrap();
    let z_t = (t_hat - tiny.mean_length()) / t_se;
    pass &= mismatches == 0 && z_ok(z_t);
    parts.push(format!(
        "counts {mismatches}/10000 mismatched, T {t_hat:.2} vs {:.2} (z {z_t:.2})",
        tiny.mean_length()
    ));

    let fm = uncovered::estimate_f_and_m(&cfg, r, big_r, 400_000, seed + 3, 8).unwrap();
    let geom = Arc::clone(fm.table.geometry());
    let shell = geom.exit_shell();
    let mut rep: Vec<Option<(usize, usize)>> = vec![None; fm.table.n_orbits()];
    let mut orbit_consistent = true;
    for (i, oi) in shell.iter().enumerate() {
        for (j, oj) in shell.iter().enumerate() {
            let (a, b) = (tiny.exit_index(oi).unwrap(), tiny.exit_index(oj).unwrap());
            let o = fm.table.orbit(i as u32, j as u32);
            match rep[o] {
                None => rep[o] = Some((a, b)),
                Some((a0, b0)) => orbit_consistent &= (tiny.f(a0, b0) - tiny.f(a, b)).abs() < 1e-9,
            }
        }
    }
    let tested: Vec<(f64, u64)> = rep
        .iter()
        .enumerate()
        .filter(|(o, _)| fm.table.counts[*o] >= 30)
        .map(|(o, ab)| {
            let (a, b) = ab.unwrap();
            let hit = 1.0 - tiny.f(a, b);
            let c = fm.table.counts[o];
            let z = if hit > 0.0 && hit < 1.0 {
                (fm.table.hits[o] as f64 / c as f64 - hit) / (hit * (1.0 - hit) / c as f64).sqrt()
            } else if fm.table.hits[o] as f64 == hit * c as f64 {
                0.0
            } else {
                f64::INFINITY
            };
            (z.abs(), c)
        })
        .collect();
    let cut = bonferroni_3sigma(tested.len());
    let worst = tested.iter().map(|t| t.0).fold(0.0, f64::max);
    let z_m = (fm.m_hat - tiny.m()) / fm.m_se;
    pass &= orbit_consistent && worst <= cut && z_ok(z_m);
    parts.push(format!(
        "f on {} orbits max|z| {worst:.2} (cut {cut:.2}), m {:.5} vs {:.5} (z {z_m:.2})",
        tested.len(),
        fm.m_hat,
        tiny.m()
    ));

    let (q, q_exact, z_q, d, z_d) = tiny_conditional_q(&cfg, &tiny, &geom, seed + 4, 100_000);
    pass &= z_ok(z_q) && z_ok(z_d);
    parts.push(format!(
        "E[Q] over 3 excursions {q:.4} vs {q_exact:.4} (z {z_q:.2}), E[Q - prod f] {d:.5} (z {z_d:.2})"
    ));

    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_3(constants: &GreenConstants, seed: u64) -> Outcome {
    let rep = hitting::conditional_hit_prob(3, 6.0, 60.0, 200_000, seed, Some(constants)).unwrap();
    let pred = rep.prediction.unwrap();
    let rel = (rep.aggregate - pred).abs() / pred;
    Outcome {
        pass: rel <= 0.15 && rep.homogeneity_p >= 0.01,
        detail: format!(
            "aggregate {:.5} ± {:.5} vs C_3/r = {pred:.5} ({:.1}% off), homogeneity p = {:.2e} (non-binding)",
            rep.aggregate,
            rep.aggregate_se,
            100.0 * rel,
            rep.homogeneity_p
        ),
    }
}

fn criterion_4(seed: u64) -> Outcome {
    let mut violations = 0;
    let (mut worst_ratio, mut indep_b2, mut indep_b3) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let (input, tv, indep) = cli::chen_stein_instance(seed, i, 12).unwrap();
        let b = chenstein::bounds(&input).unwrap();
        if tv > b.tv_bound {
            violations += 1;
        }
        worst_ratio = worst_ratio.max(tv / b.tv_bound);
        let bi = chenstein::bounds(&indep).unwrap();
        indep_b2 = indep_b2.max(bi.b2.abs());
        indep_b3 = indep_b3.max(bi.b3.abs());
    }
    // b3 of a product table is a sum of |x/z - p| with x/z = p up to rounding.
    Outcome {
        pass: violations == 0 && indep_b2 == 0.0 && indep_b3 <= 1e-12,
        detail: format!(
            "{violations}/100 violations, max TV/bound {worst_ratio:.3}, independent max b2 {indep_b2:e}, max b3 {indep_b3:.1e}"
        ),
    }
}

struct SurrogateSetup {
    cfg: LatticeConfig,
    fm: uncovered::FmEstimate,
}

fn surrogate_setup(seed: u64) -> SurrogateSetup {
    let cfg = LatticeConfig::torus(3, 32).unwrap();
    let fm = uncovered::estimate_f_and_m(&cfg, 3.0, 7.5, 2_000_000, seed, 8).unwrap();
    SurrogateSetup { cfg, fm }
}

fn surrogate_params(s: &SurrogateSetup, c: &GreenConstants, alpha: f64) -> uncovered::SurrogateParams {
    let inputs = SurrogateInputs {
        alpha,
        epsilon: 0.05,
        psi: 0.05,
        radii: Some((3.0, 7.5)),
    };
    uncovered::compute_params(&s.cfg, &inputs, c, s.fm.t_hat, s.fm.m_hat).unwrap()
}

fn criterion_5(s: &SurrogateSetup, c: &GreenConstants, seed: u64) -> Outcome {
    let p = surrogate_params(s, c, 0.9);
    let m = uncovered::surrogate_moments(&s.cfg, &p, &s.fm, 10, seed, 0.2).unwrap();
    Outcome {
        pass: z_ok(m.z) && m.window_violation_origin < 0.10,
        detail: format!(
            "A = {}, m = {:.5} ± {:.5}, E[Q] = {:.5} ± {:.5} vs exp(-mA) = {:.5} ± {:.5} (z {:.2}), window violations {:.0}% (all sites {:.2}%)",
            p.budget,
            s.fm.m_hat,
            s.fm.m_se,
            m.mean_q,
            m.mean_q_se,
            m.predicted,
            m.predicted_se,
            m.z,
            100.0 * m.window_violation_origin,
            100.0 * m.window_violation_all
        ),
    }
}

fn criterion_6(s: &SurrogateSetup, c: &GreenConstants, seed: u64) -> Outcome {
    let p = surrogate_params(s, c, 0.95);
    let rep = uncovered::coupling_check(&s.cfg, &p, 10, seed).unwrap();
    let failures = rep.rows.iter().filter(|r| r.inclusion_failures > 0).count();
    let sizes: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{}/{}", r.uncovered, r.surrogate))
        .collect();
    Outcome {
        pass: rep.equality_frequency > 0.5 && rep.consistency_holds,
        detail: format!(
            "U = Ubar in {:.0}% of replicas, inclusion failures in {failures}, all explained: {}, |U|/|Ubar| = [{}]",
            100.0 * rep.equality_frequency,
            rep.consistency_holds,
            sizes.join(" ")
        ),
    }
}

/// Exact covariance of the zero-boundary field on `{1..n-1}^3` by dense
/// inversion of `I - P`.
fn dense_covariance(n: usize) -> Vec<f64> {
    let m = n - 1;
    let k = m * m * m;
    let idx = |a: usize, b: usize, c: usize| (a * m + b) * m + c;
    let mut q = vec![0.0; k * k];
    for a in 0..m {
        for b in 0..m {
            for c in 0..m {
                let i = idx(a, b, c);
                q[i * k + i] = 1.0;
                let mut link = |j: usize| q[i * k + j] -= 1.0 / 6.0;
                if a > 0 {
                    link(idx(a - 1, b, c));
                }
                if a + 1 < m {
                    link(idx(a + 1, b, c));
                }
                if b > 0 {
                    link(idx(a, b - 1, c));
                }
                if b + 1 < m {
                    link(idx(a, b + 1, c));
                }
                if c > 0 {
                    link(idx(a, b, c - 1));
                }
                if c + 1 < m {
                    link(idx(a, b, c + 1));
                }
            }
        }
    }
    let mut eye = vec![0.0; k * k];
    for i in 0..k {
        eye[i * k + i] = 1.0;
    }
    oracle::dense_solve(k, q, eye, &OracleBudget::default()).unwrap()
}

fn criterion_7(seed: u64) -> Outcome {
    let n = 6;
    let spec = GffSpec::new(3, n).unwrap();
    let k = spec.interior_len();
    assert_eq!(k, 125);
    let exact = dense_covariance(n);
    // Interior positions of the sampler, in the dense oracle's ordering.
    let pos: Vec<usize> = (0..k)
        .map(|i| {
            let (a, b, c) = (i / 25, (i / 5) % 5, i % 5);
            let p = Point::new(vec![a as i64 + 1, b as i64 + 1, c as i64 + 1]);
            spec.interior_index(spec.config().index(&p)).unwrap()
        })
        .collect();
    let samples = 20_000usize;
    let mut acc = vec![0.0; k * k];
    gff::sample_each(&spec, seed, 0, samples, |f| {
        let v: Vec<f64> = pos.iter().map(|&p| f.values[p]).collect();
        for i in 0..k {
            for j in i..k {
                acc[i * k + j] += v[i] * v[j];
            }
        }
    })
    .unwrap();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in i..k {
            let s = acc[i * k + j] / samples as f64;
            let c = exact[i * k + j];
            let se = ((exact[i * k + i] * exact[j * k + j] + c * c) / samples as f64).sqrt();
            worst = worst.max((s - c).abs() / se);
        }
    }

    let big = GffSpec::new(3, 16).unwrap();
    let radius = 3.0;
    let (mut decomposed, mut worst_identity, mut worst_sum) = (0, 0.0f64, 0.0f64);
    for &site in big.interior() {
        let x = big.config().point(site);
        let Ok(dec) = gff::markov_decompose(&big, &x, radius) else { continue };
        decomposed += 1;
        worst_identity = worst_identity.max((dec.v_phi2 - dec.v_h2 - dec.v_xi2).abs());
        worst_sum = worst_sum.max((dec.harmonic.iter().sum::<f64>() - 1.0).abs());
    }
    Outcome {
        pass: worst < 5.0 && decomposed > 0 && worst_identity <= 1e-8 && worst_sum <= 1e-10,
        detail: format!(
            "max |cov - exact| = {worst:.2} SE over 125^2 entries ({samples} samples); {decomposed} decompositions: identity {worst_identity:.1e}, harmonic row sum {worst_sum:.1e}"
        ),
    }
}

fn criterion_8(constants: &GreenConstants, seed: u64) -> Outcome {
    let spec = GffSpec::new(3, 16).unwrap();
    let samples = 100_000u64;
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, alpha) in [0.7, 0.9].into_iter().enumerate() {
        let hps = HighPointSpec::new(alpha, 0.25, 16, constants).unwrap();
        let sites = hps.sites(&spec);
        let mut hits = vec![0u64; sites.len()];
        gff::sample_each(&spec, seed + i as u64, 0, samples as usize, |f| {
            for (h, &p) in hits.iter_mut().zip(&sites) {
                *h += (f.values[p] > hps.threshold) as u64;
            }
        })
        .unwrap();
        let exact: Vec<f64> = sites
            .iter()
            .map(|&p| {
                let x = spec.config().point(spec.interior()[p]);
                stats::normal_sf(hps.threshold / spec.variance(&x).unwrap().sqrt())
            })
            .collect();
        let check = gff::marginal_check(&hits, &exact, samples, 0.01);
        // Every site inside its exact binomial interval at family-wise level 1%.
        let family_p = (check.min_p_value * check.sites as f64).min(1.0);
        pass &= family_p >= 0.01;
        parts.push(format!(
            "alpha {alpha}: {} sites, {} exceedances vs {:.1} expected, {:.2}% rejected at 1%, Bonferroni p {family_p:.3}",
            check.sites,
            check.observed_total,
            check.expected_total,
            100.0 * check.rejected_fraction
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn preset(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.json"));
    ExperimentConfig::load(&path).unwrap()
}

fn rank_p(record: &cli::ExperimentRecord) -> f64 {
    record.summary["tests"]["adjacent_pairs"]["rank_test"]["p_value"]
        .as_f64()
        .unwrap()
}

fn criterion_9(constants_path: &Path, dir: &Path) -> Outcome {
    let mut low = preset("discriminate-n32-a0.55");
    low.constants = Some(constants_path.to_path_buf());
    let mut high = preset("discriminate-n32-a0.95");
    high.constants = Some(constants_path.to_path_buf());
    let a = cli::run(&low, &dir.join("low")).unwrap();
    let b = cli::run(&high, &dir.join("high")).unwrap();
    let (pa, pb) = (rank_p(&a), rank_p(&b));
    Outcome {
        pass: pa < 0.01 && pb > 0.1,
        detail: format!(
            "adjacent pairs rank test: alpha 0.55 uncovered p = {pa:.2e}, alpha 0.95 surrogate p = {pb:.3} (proxy, not a proof)"
        ),
    }
}

fn criterion_10(constants_path: &Path, dir: &Path) -> Outcome {
    let mut gff_cfg = ExperimentConfig::new(ExperimentKind::Gff, 3, 8);
    gff_cfg.alpha = Some(0.7);
    gff_cfg.replicas = 2;
    gff_cfg.seed = 5;
    gff_cfg.budgets.samples = 500;
    gff_cfg.constants = Some(constants_path.to_path_buf());
    let mut walk = ExperimentConfig::new(ExperimentKind::WalkUncovered, 3, 12);
    walk.alpha = Some(0.6);
    walk.replicas = 4;
    walk.seed = 9;
    walk.radii = Some([1.0, 2.5]);
    walk.budgets.excursions = 50_000;
    walk.budgets.fm_replicas = 2;
    walk.constants = Some(constants_path.to_path_buf());
    let mut cs = preset("chen-stein");
    cs.replicas = 30;
    let mut same = Vec::new();
    for (name, c) in [("chen-stein", cs), ("gff", gff_cfg), ("walk-uncovered", walk)] {
        let read = |tag: &str| -> Vec<u8> {
            let out: PathBuf = dir.join(format!("{name}-{tag}"));
            cli::run(&c, &out).unwrap();
            std::fs::read(out.join("summary.json")).unwrap()
        };
        same.push((name, read("a") == read("b")));
    }
    Outcome {
        pass: same.iter().all(|s| s.1),
        detail: same
            .iter()
            .map(|(n, s)| format!("{n}: {}", if *s { "identical" } else { "differs" }))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let constants_path = tmp.path().join("constants_d3.json");
    let mut suite = Suite::from_env();
    let estimate = || {
        let c = hitting::estimate_constants(3, &ConstantsParams::default()).unwrap();
        c.save(&constants_path).unwrap();
        c
    };
    let mut constants = None;

    suite.run(1, minutes(5), true, || {
        let c = estimate();
        let out = criterion_1(&c);
        constants = Some(c);
        out
    });
    let constants = constants.unwrap_or_else(estimate);
    suite.run(2, minutes(10), true, || criterion_2(0xacce_0002));
    suite.run(3, minutes(15), false, || criterion_3(&constants, 0xacce_0003));
    suite.run(4, minutes(2), true, || criterion_4(0xacce_0004));
    if suite.wants(5) || suite.wants(6) {
        let t = Instant::now();
        let setup = surrogate_setup(0xacce_0005);
        println!("  (criteria 5 and 6 share an f, m and T estimate taking {:.1}s)", t.elapsed().as_secs_f64());
        suite.run(5, minutes(30), true, || criterion_5(&setup, &constants, 0xacce_0015));
        suite.run(6, minutes(60), false, || criterion_6(&setup, &constants, 0xacce_0006));
    }
    suite.run(7, minutes(10), true, || criterion_7(0xacce_0007));
    suite.run(8, minutes(10), true, || criterion_8(&constants, 0xacce_0008));
    suite.run(9, minutes(60), false, || criterion_9(&constants_path, &tmp.path().join("c9")));
    suite.run(10, minutes(10), true, || criterion_10(&constants_path, &tmp.path().join("c10")));

    let passed = suite.lines.iter().filter(|l| l.1).count();
    println!("{passed}/{} criteria passed", suite.lines.len());
    let binding_failures: Vec<u32> = suite.lines.iter().filter(|l| l.2 && !l.1).map(|l| l.0).collect();
    let open: Vec<u32> = suite.lines.iter().filter(|l| !l.2 && !l.1).map(|l| l.0).collect();
    if !open.is_empty() {
        println!("non-binding failures (documented desk-scale gap): {open:?}");
    }
    if !binding_failures.is_empty() {
        eprintln!("binding criteria failed: {binding_failures:?}");
        std::process::exit(1);
    }
}
