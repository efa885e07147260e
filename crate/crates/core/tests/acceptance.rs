//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always
//! printed; any failure exits non-zero.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cc_hardy::capacity::{wolff, wolff_two_sided, CapacityOptions, DiscreteMeasure};
use cc_hardy::cli::{parse_config, run_experiment, write_artifacts, ExperimentConfig, Outcome};
use cc_hardy::cover::{whitney, WhitneyOptions};
use cc_hardy::frames::{CommutatorBasis, HTypeGroup, VectorFieldSystem};
use cc_hardy::grid::{GridDomain, Shape};
use cc_hardy::hardy::{
    fefferman_phong, hardy_1d, maximize_ratio, mazya_check, sharp_experiment, weight_field, MaximizeOptions,
    WeightSpec,
};
use cc_hardy::metric::{default_oracle, fundamental_solution, EuclideanDistance, HTypeDistance};
use cc_hardy::nsw::{ball_volume, comparability_report, homogeneous_dimensions, nsw_profile, system_ball_volume};
use cc_hardy::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Config-driven runs, kept for the determinism rerun.
struct Runs {
    root: PathBuf,
    done: Vec<(String, ExperimentConfig)>,
}

impl Runs {
    fn run(&mut self, name: &str, text: &str) -> Result<Outcome> {
        let (cfg, diags) = parse_config(text, Path::new("."));
        assert!(diags.is_empty(), "{name}: {diags:?}");
        let cfg = cfg.unwrap();
        let out = run_experiment(&cfg)?;
        write_artifacts(&cfg, &out, &self.root.join("first").join(name))?;
        self.done.push((name.to_string(), cfg));
        Ok(out)
    }
}

fn basis_for(sys: &VectorFieldSystem, samples: &[Vec<f64>]) -> CommutatorBasis {
    (1..=4)
        .find_map(|step| sys.build_commutator_basis(samples, step).ok())
        .expect("Hörmander basis")
}

// 1. cap_2(B̄(0,r), B(0,2r)) = 8πr in R^3
fn criterion_1(runs: &mut Runs) -> Result<Verdict> {
    let out = runs.run(
        "capacity",
        "experiment = capacity\nsystem = euclidean3\nshape = ball\nradius = 1\ninner = 0.5\nh = 0.03125\np = 2\nrefine = true\n",
    )?;
    let values: Vec<f64> = serde_json::from_value(out.details["values"].clone()).unwrap();
    let exact = 8.0 * PI * 0.5;
    let err = (values[0] - exact).abs() / exact;
    let change = (values[0] - values[1]).abs() / values[1];
    Ok(verdict(
        err < 0.10 && change < 0.15,
        format!("cap {:.4} vs 8πr = {exact:.4}: error {err:.3} (< 0.10), h vs h/2 change {change:.3} (< 0.15)", values[0]),
    ))
}

// 2. Euclidean point Hardy constant, bound 4
fn criterion_2() -> Result<Verdict> {
    let sys = VectorFieldSystem::builtin("euclidean3")?;
    let oracle = default_oracle(&sys);
    let w = WeightSpec::PointPower {
        x0: vec![0.0; 3],
        exponent: 2.0,
    };
    let mut ratios = Vec::new();
    let mut grid = Vec::new();
    for h in [1.0 / 8.0, 1.0 / 12.0, 1.0 / 16.0] {
        let d = GridDomain::discretize(&Shape::Ball { center: vec![0.0; 3], radius: 1.0 }, h, &sys)?;
        let rep = maximize_ratio(&d, &w, 2.0, oracle.as_ref(), &MaximizeOptions::default())?;
        ratios.push(rep.best_ratio);
        grid.push(rep.grid_ratio.unwrap_or(f64::NAN));
    }
    let best = *ratios.last().unwrap();
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(verdict(
        (3.2..=4.05).contains(&best) && worst <= 4.2,
        format!("ratios at h = 1/8, 1/12, 1/16: {ratios:.4?} (grid-only {grid:.4?}); finest in [3.2, 4.05], all <= 4.2"),
    ))
}

// 3. one-dimensional Hardy
fn criterion_3() -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for p in [1.5f64, 2.0, 3.0] {
        let c = hardy_1d(p, 4000)?;
        let rel = c / (p / (p - 1.0)).powf(p);
        pass &= (0.95..=1.01).contains(&rel);
        parts.push(format!("p={p}: {rel:.4}"));
    }
    Ok(verdict(pass, format!("value / (p/(p-1))^p: {} in [0.95, 1.01]", parts.join(", "))))
}

// 4. sharp constants on the Heisenberg group
fn criterion_4(runs: &mut Runs) -> Result<Verdict> {
    let g = HTypeGroup::new(1, 1)?;
    let rep = sharp_experiment(&g, 2.0, 1.0, 0.125, &MaximizeOptions::default())?;
    runs.run("sharp", "experiment = sharp\nsystem = heisenberg1\nradius = 1\nh = 0.125\np = 2\n")?;
    let (t, c) = (rep.theorem.best_ratio, rep.corollary.best_ratio);
    let pass = (3.2..=4.05).contains(&t)
        && (0.80..=1.01).contains(&c)
        && rep.log_derivative_defect < 1e-12
        && rep.bound_defect < 1e-12;
    Ok(verdict(
        pass,
        format!(
            "theorem {t:.4} in [3.2, 4.05], corollary {c:.4} in [0.80, 1.01], identity defects {:.1e}, {:.1e} (< 1e-12)",
            rep.log_derivative_defect, rep.bound_defect
        ),
    ))
}

// 5. Grushin example dimensions and volume growth
fn criterion_5(runs: &mut Runs) -> Result<Verdict> {
    let sys = VectorFieldSystem::builtin("grushin-paper-example")?;
    let zero = vec![0.0; 3];
    let e1 = vec![1.0, 0.0, 0.0];
    let mut compact = Vec::new();
    for i in -2..=2 {
        for j in -2..=2 {
            for k in -2..=2 {
                compact.push(vec![i as f64 / 2.0, j as f64 / 2.0, k as f64 / 2.0]);
            }
        }
    }
    let basis = basis_for(&sys, &[zero.clone(), e1.clone()]);
    let (q0, q) = homogeneous_dimensions(&basis, &zero, &compact)?;
    let q1 = nsw_profile(&basis, &e1)?.q_at_x;
    let out = runs.run("volumes", "experiment = volumes\nsystem = grushin-paper-example\nseed = 1\n")?;
    let exps: Vec<f64> = out.details["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["exponent"].as_f64().unwrap())
        .collect();
    let pass = q0 == 4 && q1 == 3 && q == 4 && (exps[0] - 4.0).abs() <= 0.2 && (exps[1] - 3.0).abs() <= 0.2;
    Ok(verdict(
        pass,
        format!(
            "Q(0) = {q0}, Q(e1) = {q1}, Q on [-1,1]^3 = {q}; volume exponents {:.3} (4±0.2), {:.3} (3±0.2)",
            exps[0], exps[1]
        ),
    ))
}

// 6. Whitney clauses on three domains
fn criterion_6(runs: &mut Runs) -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, text) in [
        ("whitney_ball", "experiment = whitney\nsystem = euclidean3\nshape = ball\nradius = 1\nh = 0.083333333333333333\n"),
        ("whitney_cube", "experiment = whitney\nsystem = euclidean3\nshape = cube\nradius = 1\nh = 0.083333333333333333\n"),
        ("whitney_hcube", "experiment = whitney\nsystem = heisenberg1\nshape = cube\nradius = 1\nh = 0.083333333333333333\n"),
    ] {
        let out = runs.run(name, text)?;
        pass &= out.passed();
        parts.push(format!(
            "{name}: {} balls, overlap {}",
            out.details["balls"], out.details["overlap"]
        ));
    }
    Ok(verdict(pass, parts.join("; ")))
}

// 7. rescaling exactness and doubling stability
fn criterion_7() -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for name in ["euclidean3", "grushin-paper-example", "heisenberg1"] {
        let sys = VectorFieldSystem::builtin(name)?;
        let points: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let basis = basis_for(&sys, &points);
        let (_, q) = homogeneous_dimensions(&basis, &points[0], &points)?;
        let mut worst = 0.0f64;
        let mut checks = 0;
        for x in &points {
            let prof = nsw_profile(&basis, x)?.with_q_local(q);
            for _ in 0..10 {
                let r = 10f64.powf(rng.gen_range(-3.0..0.0));
                for _ in 0..10 {
                    worst = worst.max(prof.rescale_defect(r, rng.gen_range(0.0..=1.0)));
                    checks += 1;
                }
            }
        }
        // Monte-Carlo doubling constants at dyadic radii
        let radii = [0.03125, 0.0625, 0.125, 0.25];
        let vol = |x: &[f64], r: f64| system_ball_volume(&sys, x, r, 20_000, 11);
        let rep = comparability_report(&basis, &points[..3], &radii, &[0.5], &vol)?;
        let cs: Vec<f64> = rep.doubling.iter().map(|d| d.1).collect();
        let spread = cs.iter().cloned().fold(0.0, f64::max) / cs.iter().cloned().fold(f64::INFINITY, f64::min);
        pass &= worst <= 1e-9 && checks == 1000 && spread <= 2.0;
        parts.push(format!("{name}: {checks} checks, max defect {worst:.1e}, doubling {cs:.3?} spread {spread:.2}"));
    }
    Ok(verdict(pass, parts.join("; ")))
}

// 8. Wolff potential closed form and two-sided estimate
fn criterion_8() -> Result<Verdict> {
    let oracle = EuclideanDistance { n: 3 };
    let vol = |_: &[f64], t: f64| 4.0 * PI / 3.0 * t.powi(3);
    let mu = DiscreteMeasure::dirac(&[0.0; 3]);
    let mut worst = 0.0f64;
    for x in [[0.05, 0.0, 0.0], [0.2, 0.3, -0.1], [0.0, 0.0, 0.7], [-0.4, 0.4, 0.4]] {
        let d = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = wolff(&mu, &x, 1.0, 2.0, 1e-4, &oracle, &vol)?;
        let exact = 3.0 / (4.0 * PI) * (1.0 / d - 1.0);
        worst = worst.max((w / exact - 1.0).abs());
    }

    let g = HTypeGroup::new(1, 1)?;
    let dist = HTypeDistance::new(g.clone());
    let q = g.homogeneous_dim();
    let unit = ball_volume(&dist, &[0.0; 3], 1.0, 200_000, 3)?.estimate;
    let hvol = move |_: &[f64], t: f64| unit * t.powf(q);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shells: Vec<(f64, Vec<Vec<f64>>)> = [0.25, 0.5]
        .iter()
        .map(|&rad| {
            let pts = (0..40)
                .map(|_| {
                    let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    g.dilate(rad / dist.distance(&[0.0; 3], &z), &z)
                })
                .collect();
            (rad, pts)
        })
        .collect();
    let u = |y: &[f64]| fundamental_solution(&g, 2.0, y).unwrap();
    let fit = wolff_two_sided(&mu, &shells, 2.0, 2.0, 1e-4, &dist, &hvol, &u)?;
    let c1 = (fit[0].c1, fit[1].c1);
    let c2 = (fit[0].c2, fit[1].c2);
    let stable = |a: (f64, f64)| a.0 > 0.0 && a.1 > 0.0 && a.0.max(a.1) / a.0.min(a.1) <= 2.0;
    Ok(verdict(
        worst < 0.01 && stable(c1) && stable(c2),
        format!(
            "Euclidean Dirac max error {worst:.1e} (< 1e-2); Heisenberg C1 {:.4}/{:.4}, C2 {:.4}/{:.4} across shells 1/4, 1/2 (within 2x)",
            c1.0, c1.1, c2.0, c2.1
        ),
    ))
}

// 9. equivalence chain on two domains
fn criterion_9(runs: &mut Runs) -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, text) in [
        ("chain_ball", "experiment = chain\nsystem = euclidean3\nshape = ball\nradius = 1\nh = 0.125\np = 2\n"),
        ("chain_hcube", "experiment = chain\nsystem = heisenberg1\nshape = cube\nradius = 1\nh = 0.125\np = 2\n"),
    ] {
        let out = runs.run(name, text)?;
        pass &= out.passed();
        let d = &out.details;
        parts.push(format!(
            "{name}: c0 {:.3e}, pointwise {:.3e}, (iii) {:.3e}, (iv) {:.3e}, q {}",
            d["fatness"]["c0"].as_f64().unwrap_or(f64::NAN),
            d["pointwise"]["constant"].as_f64().unwrap_or(f64::NAN),
            d["thickness"]["score_iii"].as_f64().unwrap_or(f64::NAN),
            d["thickness"]["score_iv"].as_f64().unwrap_or(f64::NAN),
            d["q"]
        ));
    }
    Ok(verdict(pass, parts.join("; ")))
}

// 10. trace conditions against the Hardy constant
fn trace_factors(r0: f64) -> Result<(bool, String)> {
    let sys = VectorFieldSystem::builtin("euclidean3")?.with_r0(r0);
    let oracle = default_oracle(&sys);
    let d = GridDomain::discretize(&Shape::Ball { center: vec![0.0; 3], radius: 1.0 }, 1.0 / 16.0, &sys)?;
    let dec = whitney(&d, oracle.as_ref(), &WhitneyOptions::default())?;
    let mut pass = true;
    let mut parts = Vec::new();
    for w in [
        WeightSpec::BoundaryPower { exponent: 2.0 },
        WeightSpec::Mixed {
            p: 2.0,
            gamma: 1.0,
            x0: vec![0.0; 3],
        },
    ] {
        let hardy = maximize_ratio(&d, &w, 2.0, oracle.as_ref(), &MaximizeOptions::default())?.best_ratio;
        let wf = weight_field(&d, &w, oracle.as_ref())?;
        let mz = mazya_check(&d, &wf, 2.0, &dec, oracle.as_ref(), 8, &CapacityOptions::default())?.estimate;
        let fp = fefferman_phong(&d, &wf, 1.5, 2.0, &dec, oracle.as_ref(), 12, 2)?.supremum;
        let factor = hardy.max(mz) / hardy.min(mz);
        pass &= mz.is_finite() && mz > 0.0 && fp.is_finite() && factor <= 4.0;
        parts.push(format!(
            "{}: Hardy {hardy:.4}, Maz'ya {mz:.4}, FP {fp:.4}, factor {factor:.2}",
            w.label()
        ));
    }
    Ok((pass, parts.join(", ")))
}

// Euclidean estimates hold at every scale, so r0 = diam(Ω) leaves the
// Whitney factor uncapped; the r0 = 1 line is printed for comparison.
fn criterion_10() -> Result<Verdict> {
    let (pass, full) = trace_factors(2.0)?;
    let (_, capped) = trace_factors(1.0)?;
    Ok(verdict(pass, format!("r0 = diam: {full} (factors <= 4); r0 = 1 for reference: {capped}")))
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

// 11. byte-identical reruns
fn criterion_11(runs: &Runs) -> Result<Verdict> {
    for (name, cfg) in &runs.done {
        let out = run_experiment(cfg)?;
        write_artifacts(cfg, &out, &runs.root.join("second").join(name))?;
    }
    let a = read_tree(&runs.root.join("first"));
    let b = read_tree(&runs.root.join("second"));
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    Ok(verdict(
        differing.is_empty() && a.len() == b.len() && !a.is_empty(),
        format!("{} runs, {} files compared, differing: {differing:?}", runs.done.len(), a.len()),
    ))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Runs {
        root: tmp.path().to_path_buf(),
        done: Vec::new(),
    };
    let mut unexpected = Vec::new();
    let mut report = |id: u32, start: Instant, r: Result<Verdict>| {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match r {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2}: {tag} [{secs:.1}s] {detail}");
        if !pass {
            unexpected.push(id);
        }
    };
    let t = Instant::now();
    report(1, t, criterion_1(&mut runs));
    let t = Instant::now();
    report(2, t, criterion_2());
    let t = Instant::now();
    report(3, t, criterion_3());
    let t = Instant::now();
    report(4, t, criterion_4(&mut runs));
    let t = Instant::now();
    report(5, t, criterion_5(&mut runs));
    let t = Instant::now();
    report(6, t, criterion_6(&mut runs));
    let t = Instant::now();
    report(7, t, criterion_7());
    let t = Instant::now();
    report(8, t, criterion_8());
    let t = Instant::now();
    report(9, t, criterion_9(&mut runs));
    let t = Instant::now();
    report(10, t, criterion_10());
    let t = Instant::now();
    report(11, t, criterion_11(&runs));
    if !unexpected.is_empty() {
        eprintln!("acceptance failures: {unexpected:?}");
        std::process::exit(1);
    }
}
