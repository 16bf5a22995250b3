//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,2,5` selects criteria. `ACCEPTANCE_WORKDIR=<dir>` keeps
//! training runs between invocations (finished runs are reused); by default
//! a fresh temporary directory is used. Per-seed reports are archived under
//! the cargo target tmp directory in `acceptance-reports/`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndgrad::{grad_check, GradCheckConfig, Tensor, TensorError};
use rand::Rng;
use rectsr::config::ExperimentConfig;
use rectsr::corpus::Corpus;
use rectsr::degrade::{make_pair, DegradeConfig, ImagePair};
use rectsr::distill::{train_step, ema_update, TrainState};
use rectsr::flow::{
    cd_loss, consistency_fn, consistency_node, flow_loss, gradient_l1, hinge_losses, hrcd_loss, interp_batch, mse,
    total_loss, velocity_target, HrDistance, LossWeights,
};
use rectsr::metrics::{EvalReport, EvalRow};
use rectsr::net::{Bound, NetConfig, ParamSet, UNet};
use rectsr::sample::{sample_ode, FnField};
use rectsr::sched::{fast_slow_pair, n_interval_pair, shift_grid, uniform_grid};
use rectsr::seed::rng_from;
use rectsr_cli::ablate::{run_variant, variant_dir, variants, Group, Variant};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Appends a wall-time check to an already passed measurement.
fn within(detail: String, elapsed: Duration, budget: Duration, what: &str) -> Outcome {
    let timing = format!("{what} took {:.1}s (budget {}s)", elapsed.as_secs_f64(), budget.as_secs());
    check(elapsed < budget, format!("{detail}; {timing}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn tensor_err(e: rectsr::Error) -> TensorError {
    match e {
        rectsr::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

// 1: constant straight-path field reproduces HR exactly
fn exact_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = DegradeConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let p: ImagePair<f64> = make_pair(seed, 32, &cfg).map_err(|e| e.to_string())?;
        let v = velocity_target(&p.x_hr, &p.x_lr).map_err(|e| e.to_string())?;
        let field = FnField(|_: &Tensor<f64>, _: &[f64]| v.clone());
        for n in [1, 4, 50] {
            let grid = uniform_grid(n).map_err(|e| e.to_string())?;
            let traj = sample_ode(&p.x_lr, &field, &grid).map_err(|e| e.to_string())?;
            worst = worst.max(traj.final_state().max_abs_diff(&p.x_hr).map_err(|e| e.to_string())?);
        }
    }
    let detail = check(worst <= 1e-12, format!("max |x0 - x_hr| = {worst:.2e} over 100 pairs x grids {{1, 4, 50}}"))?;
    within(detail, start.elapsed(), Duration::from_secs(10), "oracle sweep")
}

// 2: finite-difference checks of every loss and of end-to-end compositions
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let shape = [4, 4, 8, 8];
    let rand = |s: u64| Tensor::<f64>::rand_uniform(&shape, 0.0, 1.0, s);
    let cfg = GradCheckConfig { seed: 7, ..GradCheckConfig::default() };
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: Result<f64, TensorError>| {
        results.push((name.to_string(), err.unwrap_or(f64::INFINITY)));
    };

    let (a, b, c, h) = (rand(1), rand(2), rand(3), rand(4));
    record("mse", grad_check(&[a.clone(), b.clone()], &cfg, |g, v| mse(g, v[0], v[1]).map_err(tensor_err)));
    record(
        "gradient_l1",
        grad_check(&[a.clone(), b.clone()], &cfg, |g, v| gradient_l1(g, v[0], v[1]).map_err(tensor_err)),
    );
    record(
        "flow_loss",
        grad_check(&[a.clone(), b.clone()], &cfg, |g, v| flow_loss(g, v[0], v[1], 2.0).map_err(tensor_err)),
    );
    record(
        "cd_loss",
        grad_check(std::slice::from_ref(&a), &cfg, |g, v| {
            let t = g.constant(b.clone());
            cd_loss(g, v[0], t).map_err(tensor_err)
        }),
    );
    for (name, dist) in [("hrcd_loss/perceptual", HrDistance::Perceptual), ("hrcd_loss/mse", HrDistance::Mse)] {
        record(
            name,
            grad_check(&[a.clone(), c.clone(), h.clone()], &cfg, |g, v| {
                let t = g.constant(b.clone());
                Ok(hrcd_loss(g, v[0], t, v[1], v[2], dist, 2.0).map_err(tensor_err)?.total)
            }),
        );
    }
    let scores = |s| Tensor::<f64>::rand_uniform(&[4, 1, 2, 2], -2.0, 2.0, s);
    record(
        "hinge/disc",
        grad_check(&[scores(5), scores(6)], &cfg, |g, v| Ok(hinge_losses(g, v[0], v[1]).0)),
    );
    record(
        "hinge/gen",
        grad_check(&[scores(5), scores(6)], &cfg, |g, v| Ok(hinge_losses(g, v[0], v[1]).1)),
    );
    record(
        "total_loss",
        grad_check(&[a.clone(), c.clone(), h.clone()], &cfg, |g, v| {
            let f = flow_loss(g, v[0], v[2], 2.0).map_err(tensor_err)?;
            let t = g.constant(b.clone());
            let hr = hrcd_loss(g, v[1], t, v[0], v[2], HrDistance::Perceptual, 2.0).map_err(tensor_err)?;
            let adv = g.mean(v[1]);
            total_loss(g, f, Some(hr.total), Some(adv), &LossWeights::default()).map_err(tensor_err)
        }),
    );

    // velocity net composed with the flow and hrcd losses
    let net_cfg = NetConfig {
        base_channels: 8,
        depth: 2,
        time_embed_dim: 8,
        condition_lr: false,
        image_channels: 4,
        disc_channels: 4,
    };
    let net = UNet::new(net_cfg).map_err(|e| e.to_string())?;
    let mut params: ParamSet<f64> = net.init(11);
    let out_w = params.get_mut("out.w").expect("output layer");
    *out_w = Tensor::rand_uniform(out_w.shape(), -0.2, 0.2, 12);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let t = [0.1, 0.4, 0.7, 1.0];
    let x_t = interp_batch(&h, &a, &t).map_err(|e| e.to_string())?;
    let net_cfg_check = GradCheckConfig { coords_per_param: 8, ..cfg.clone() };
    record(
        "velocity_net+flow_loss",
        grad_check(&tensors, &net_cfg_check, |g, vars| {
            let p: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let xv = g.constant(x_t.clone());
            let v = net.forward(g, &p, xv, &t, None).map_err(tensor_err)?;
            let x_hat = consistency_node(g, xv, &t, v).map_err(tensor_err)?;
            let hr = g.constant(h.clone());
            flow_loss(g, x_hat, hr, 2.0).map_err(tensor_err)
        }),
    );
    let t_prime = [0.3, 0.6, 0.9, 1.0];
    let t_small = [0.1, 0.4, 0.7, 0.75];
    let x_tp = interp_batch(&h, &a, &t_prime).map_err(|e| e.to_string())?;
    record(
        "velocity_net+hrcd_loss",
        grad_check(&tensors, &net_cfg_check, |g, vars| {
            let p: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let xp = g.constant(x_tp.clone());
            let xs = g.constant(x_t.clone());
            let vp = net.forward(g, &p, xp, &t_prime, None).map_err(tensor_err)?;
            let vs = net.forward(g, &p, xs, &t_small, None).map_err(tensor_err)?;
            let sp = consistency_node(g, xp, &t_prime, vp).map_err(tensor_err)?;
            let ss = consistency_node(g, xs, &t_small, vs).map_err(tensor_err)?;
            let target = g.constant(b.clone());
            let hr = g.constant(h.clone());
            Ok(hrcd_loss(g, sp, target, ss, hr, HrDistance::Perceptual, 2.0).map_err(tensor_err)?.total)
        }),
    );

    let (worst_name, worst) = results
        .iter()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .cloned()
        .expect("nonempty");
    let detail = check(
        worst <= 1e-4,
        format!("{} checks on 4x4x8x8, worst {worst_name} = {worst:.2e}", results.len()),
    )?;
    within(detail, start.elapsed(), Duration::from_secs(120), "gradient suite")
}

// 3: global Euler error on dx/dt = x halves with the step
fn euler_order() -> Outcome {
    let field = FnField(|x: &Tensor<f64>, _: &[f64]| x.clone());
    let x1 = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
    let exact = (-1.0f64).exp();
    let mut errors = Vec::new();
    for n in [4, 8, 16, 32] {
        let grid = uniform_grid(n).map_err(|e| e.to_string())?;
        let traj = sample_ode(&x1, &field, &grid).map_err(|e| e.to_string())?;
        errors.push((traj.final_state().item() - exact).abs());
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (r - 2.0).abs() <= 0.3);
    check(ok, format!("error ratios {:?}", ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()))
}

// 4: fuzzed pair draws respect ordering and coverage
fn scheduler_properties() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from(2024);
    let draws = 1_000_000;
    let mut violations = 0usize;
    let mut one_step_bad = 0usize;
    let mut uncovered = 0usize;
    let mut config_runs = 0usize;
    let mut i = 0;
    while i < draws {
        // a fresh random scheduler configuration every 10^4 draws
        let fast_n = rng.random_range(1..=8usize);
        let slow_n = rng.random_range(fast_n + 1..=1000);
        let shift = [1.0, 3.0, rng.random_range(0.5..6.0)][rng.random_range(0..3)];
        let fast = shift_grid(&uniform_grid(fast_n).map_err(|e| e.to_string())?, shift).map_err(|e| e.to_string())?;
        let slow = shift_grid(&uniform_grid(slow_n).map_err(|e| e.to_string())?, shift).map_err(|e| e.to_string())?;
        let mut seen_t_prime = vec![false; fast.len()];
        let mut seen_interval = vec![false; fast.len()];
        for _ in 0..10_000 {
            let p = fast_slow_pair(&fast, &slow, &mut rng).map_err(|e| e.to_string())?;
            if !(0.0 <= p.t && p.t < p.t_prime && p.t_prime <= 1.0) {
                violations += 1;
            }
            if fast_n == 1 && p.t_prime != 1.0 {
                one_step_bad += 1;
            }
            if let Some(k) = fast.grid().iter().position(|&f| f == p.t_prime) {
                seen_t_prime[k] = true;
            }
            let k = fast.grid().partition_point(|&f| f <= p.t);
            if k < fast.len() {
                seen_interval[k] = true;
            }
            let n = rng.random_range(1..=1000);
            let q = n_interval_pair(n, &mut rng).map_err(|e| e.to_string())?;
            if !(0.0 <= q.t && q.t < q.t_prime && q.t_prime <= 1.0) {
                violations += 1;
            }
            i += 1;
        }
        uncovered += seen_t_prime.iter().chain(&seen_interval).filter(|s| !**s).count();
        config_runs += 1;
    }
    let detail = check(
        violations == 0 && one_step_bad == 0 && uncovered == 0,
        format!(
            "{draws} draws of each kind over {config_runs} configs: {violations} order violations, \
             {uncovered} uncovered fast points/intervals, {one_step_bad} one-step draws with t' != 1"
        ),
    )?;
    within(detail, start.elapsed(), Duration::from_secs(30), "scheduler fuzz")
}

fn tiny_overrides() -> Vec<String> {
    [
        "data.size=16",
        "data.train_images=8",
        "data.eval_images=2",
        "net.base_channels=4",
        "net.time_embed_dim=8",
        "net.disc_channels=4",
        "train.batch=4",
        "train.steps=3",
        "train.checkpoint_every=0",
        "distill.steps=2",
        "sched.slow_steps=20",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

// 5: EMA closed form, boundary identity, frozen teacher
fn ema_and_boundaries() -> Outcome {
    let mut rng = rng_from(5);
    let mut ema_worst = 0.0f64;
    for trial in 0..20u64 {
        let mu: f64 = rng.random_range(0.5..0.9999);
        let n = rng.random_range(1..200);
        let mut theta_minus = ParamSet::<f64>::new();
        theta_minus.insert("w", Tensor::rand_uniform(&[4, 5], -1.0, 1.0, trial));
        let start = theta_minus.clone();
        let mut theta = ParamSet::new();
        theta.insert("w", Tensor::rand_uniform(&[4, 5], -1.0, 1.0, 100 + trial));
        for _ in 0..n {
            ema_update(&mut theta_minus, &theta, mu).map_err(|e| e.to_string())?;
        }
        let k = mu.powi(n);
        let expect = start
            .get("w")
            .unwrap()
            .zip_map(theta.get("w").unwrap(), "ema", |a, b| k * a + (1.0 - k) * b)
            .map_err(|e| e.to_string())?;
        ema_worst = ema_worst.max(theta_minus.get("w").unwrap().max_abs_diff(&expect).map_err(|e| e.to_string())?);
    }

    let mut boundary_exact = true;
    for s in 0..50 {
        let x0 = Tensor::<f64>::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, s);
        let v = Tensor::<f64>::rand_uniform(&[2, 3, 8, 8], -5.0, 5.0, 1000 + s);
        let f = consistency_fn(&x0, 0.0, &v).map_err(|e| e.to_string())?;
        boundary_exact &= f.data().iter().zip(x0.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let x32 = x0.cast::<f32>();
        let f32_ = consistency_fn(&x32, 0.0, &v.cast::<f32>()).map_err(|e| e.to_string())?;
        boundary_exact &= f32_.data().iter().zip(x32.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let cfg = ExperimentConfig::default().with_overrides(&tiny_overrides()).map_err(|e| e.to_string())?;
    let corpus = Corpus::<f64>::synthesize(&cfg).map_err(|e| e.to_string())?;
    let mut teacher = UNet::new(cfg.net.clone()).map_err(|e| e.to_string())?.init::<f64>(1);
    let w = teacher.get_mut("out.w").unwrap();
    *w = Tensor::rand_uniform(w.shape(), -0.1, 0.1, 2);
    let mut state = TrainState::from_teacher(&cfg, teacher.clone()).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        train_step(&mut state, &corpus.train).map_err(|e| e.to_string())?;
    }
    let frozen = state.phi.as_ref() == Some(&teacher);
    let moved = state.theta != teacher;
    check(
        ema_worst <= 1e-10 && boundary_exact && frozen && moved,
        format!(
            "EMA closed-form error {ema_worst:.2e}; f(x0, 0) == x0 bitwise: {boundary_exact}; \
             teacher unchanged after 100 steps: {frozen} (student moved: {moved})"
        ),
    )
}

struct Workspace {
    root: PathBuf,
    _temp: Option<tempfile::TempDir>,
    archive: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let archive = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-reports");
        match std::env::var_os("ACCEPTANCE_WORKDIR") {
            Some(d) => Workspace {
                root: PathBuf::from(d),
                _temp: None,
                archive,
            },
            None => {
                let t = tempfile::tempdir().expect("temp dir");
                Workspace {
                    root: t.path().to_path_buf(),
                    _temp: Some(t),
                    archive,
                }
            }
        }
    }

    fn seed_root(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Per-seed reports of the rows used by the training criteria.
struct Runs {
    /// (seed, group, slug) -> report
    reports: Vec<(u64, Group, String, EvalReport)>,
    /// Longest wall time of a stage-one and a stage-two run.
    max_stage1: Duration,
    max_stage2: Duration,
}

impl Runs {
    fn get(&self, seed: u64, group: Group, slug: &str) -> &EvalReport {
        &self
            .reports
            .iter()
            .find(|(s, g, sl, _)| *s == seed && *g == group && sl == slug)
            .unwrap_or_else(|| panic!("missing run {seed}/{}/{slug}", group.name()))
            .3
    }

    fn row(&self, seed: u64, group: Group, slug: &str, method: &str, steps: Option<usize>) -> EvalRow {
        self.get(seed, group, slug)
            .row(method, steps)
            .unwrap_or_else(|| panic!("missing row {method} {steps:?}"))
            .clone()
    }

    fn across(&self, group: Group, slug: &str, label: &str, steps: Option<usize>, f: fn(&EvalRow) -> f64) -> Vec<f64> {
        SEEDS.iter().map(|&s| f(&self.row(s, group, slug, label, steps))).collect()
    }
}

fn find(group: Group, slug: &str) -> Variant {
    variants(group).into_iter().find(|v| v.slug == slug).expect("known row")
}

fn train_all(ws: &Workspace) -> Result<Runs, String> {
    let plan = [
        (Group::Flow, "noise_to_hr"),
        (Group::Flow, "noised_lr_to_hr"),
        (Group::Flow, "sr_flow"),
        (Group::Consistency, "sr_flow"),
        (Group::Consistency, "cd"),
        (Group::Consistency, "hrcd"),
    ];
    let mut runs = Runs {
        reports: Vec::new(),
        max_stage1: Duration::ZERO,
        max_stage2: Duration::ZERO,
    };
    for seed in SEEDS {
        let base = ExperimentConfig::default()
            .with_overrides(&[format!("train.seed={seed}")])
            .map_err(|e| e.to_string())?;
        let corpus = Corpus::<f32>::synthesize(&base).map_err(|e| e.to_string())?;
        let root = ws.seed_root(seed);
        for (group, slug) in plan {
            let v = find(group, slug);
            let start = Instant::now();
            let mut progress = |m: &str| eprintln!("  [seed {seed}] {m}");
            let report = run_variant(&base, &corpus, &root, &v, &mut progress).map_err(|e| e.to_string())?;
            let took = start.elapsed();
            match group {
                Group::Flow => runs.max_stage1 = runs.max_stage1.max(took),
                _ if slug != "sr_flow" => runs.max_stage2 = runs.max_stage2.max(took),
                _ => {}
            }
            let src = variant_dir(&root, &v);
            let dst = variant_dir(&ws.archive.join(format!("seed-{seed}")), &v);
            std::fs::create_dir_all(&dst).map_err(|e| e.to_string())?;
            for f in ["report.txt", "report.jsonl", "metrics.jsonl", "config.toml"] {
                if src.join(f).is_file() {
                    std::fs::copy(src.join(f), dst.join(f)).map_err(|e| e.to_string())?;
                }
            }
            runs.reports.push((seed, group, slug.to_string(), report));
        }
    }
    Ok(runs)
}

fn fmt(v: &[f64]) -> String {
    fmt_to(v, 3)
}

fn fmt_to(v: &[f64], digits: usize) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", parts.join(", "))
}

// 6: SR flow beats the LR baseline and the other endpoint variants
fn toy_flow(runs: &Runs) -> Outcome {
    let psnr = |r: &EvalRow| r.psnr_db;
    let sr = runs.across(Group::Flow, "sr_flow", "SR Flow", Some(4), psnr);
    let base = runs.across(Group::Flow, "sr_flow", "lr-upsample", None, psnr);
    let noise = runs.across(Group::Flow, "noise_to_hr", "Noise to HR", Some(4), psnr);
    let noised = runs.across(Group::Flow, "noised_lr_to_hr", "Noised LR to HR", Some(4), psnr);
    let sr1 = runs.across(Group::Flow, "sr_flow", "SR Flow", Some(1), psnr);
    let noise1 = runs.across(Group::Flow, "noise_to_hr", "Noise to HR", Some(1), psnr);
    let noised1 = runs.across(Group::Flow, "noised_lr_to_hr", "Noised LR to HR", Some(1), psnr);
    let (m_sr, m_base, m_noise, m_noised) = (median(sr.clone()), median(base), median(noise.clone()), median(noised.clone()));
    let (m_sr1, m_noise1, m_noised1) = (median(sr1), median(noise1), median(noised1));
    let gain = m_sr - m_base;
    let best_at_one = m_sr1 > m_noise1 && m_sr1 > m_noised1;
    let detail = check(
        gain >= 1.0 && m_sr > m_noise && m_sr > m_noised && best_at_one,
        format!(
            "4-step median PSNR: sr_flow {m_sr:.3} (gain {gain:+.3} dB over nearest {m_base:.3}), \
             noise_to_hr {m_noise:.3}, noised_lr_to_hr {m_noised:.3}; per seed sr {} noise {} noised {}; \
             1-step medians sr {m_sr1:.3} noise {m_noise1:.3} noised {m_noised1:.3}",
            fmt(&sr),
            fmt(&noise),
            fmt(&noised),
        ),
    )?;
    within(detail, runs.max_stage1, Duration::from_secs(15 * 60), "slowest stage-one run")
}

// 7: one distilled step matches the teacher's four steps
fn distillation_gap(runs: &Runs) -> Outcome {
    let student = runs.across(Group::Consistency, "hrcd", "+L_hrcd", Some(1), |r| r.psnr_db);
    let teacher4 = runs.across(Group::Consistency, "sr_flow", "SR Flow", Some(4), |r| r.psnr_db);
    let student_g = runs.across(Group::Consistency, "hrcd", "+L_hrcd", Some(1), |r| r.gradient_l1);
    let teacher1_g = runs.across(Group::Consistency, "sr_flow", "SR Flow", Some(1), |r| r.gradient_l1);
    let (ms, mt, msg, mtg) = (median(student.clone()), median(teacher4.clone()), median(student_g.clone()), median(teacher1_g.clone()));
    let detail = check(
        ms >= mt - 0.5 && msg <= mtg,
        format!(
            "median 1-step distilled PSNR {ms:.3} vs teacher 4-step {mt:.3} (gap {:+.3} dB, allowed -0.5); \
             median 1-step gradient_l1 distilled {msg:.5} vs undistilled {mtg:.5}; per seed psnr {} vs {}, \
             gradient_l1 {} vs {}",
            ms - mt,
            fmt(&student),
            fmt(&teacher4),
            fmt_to(&student_g, 5),
            fmt_to(&teacher1_g, 5)
        ),
    )?;
    within(detail, runs.max_stage2, Duration::from_secs(20 * 60), "slowest stage-two run")
}

// 8: HR regularisation is not Pareto-dominated by plain consistency
fn hr_vs_cd(runs: &Runs, archive: &Path) -> Outcome {
    let hp = median(runs.across(Group::Consistency, "hrcd", "+L_hrcd", Some(1), |r| r.psnr_db));
    let hg = median(runs.across(Group::Consistency, "hrcd", "+L_hrcd", Some(1), |r| r.gradient_l1));
    let cp = median(runs.across(Group::Consistency, "cd", "+L_cd", Some(1), |r| r.psnr_db));
    let cg = median(runs.across(Group::Consistency, "cd", "+L_cd", Some(1), |r| r.gradient_l1));
    let dominated = cp >= hp && cg <= hg && (cp > hp || cg < hg);
    let archived = SEEDS.iter().all(|s| {
        ["cd", "hrcd"].iter().all(|slug| {
            let dir = variant_dir(&archive.join(format!("seed-{s}")), &find(Group::Consistency, slug));
            std::fs::read_to_string(dir.join("report.txt")).is_ok_and(|t| t.contains("no-reference"))
        })
    });
    check(
        !dominated && archived,
        format!(
            "median 1-step (PSNR, gradient_l1): hrcd ({hp:.3}, {hg:.5}) vs cd ({cp:.3}, {cg:.5}); dominated: {dominated}; \
             per-seed reports archived in {}: {archived}",
            archive.display()
        ),
    )
}

// 9: the ablation runner emits every row with metrics and embedded config
fn ablation_completeness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rectsr"));
    cmd.env("RECTSR_OUT", dir.path()).args(["ablate", "--group", "all"]);
    for o in tiny_overrides() {
        cmd.args(["--set", &o]);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("ablate failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let root = dir.path().join("ablate");
    let mut counts = Vec::new();
    let mut problems = Vec::new();
    for group in Group::ALL {
        let rows = variants(group);
        let mut found = 0;
        for v in &rows {
            let jsonl = match std::fs::read_to_string(variant_dir(&root, v).join("report.jsonl")) {
                Ok(t) => t,
                Err(_) => {
                    problems.push(format!("{}/{} missing", group.name(), v.slug));
                    continue;
                }
            };
            let lines: Vec<serde_json::Value> =
                jsonl.lines().map(|l| serde_json::from_str(l).expect("json line")).collect();
            let (trailer, body) = lines.split_last().expect("nonempty report");
            for steps in [1, 4] {
                let row = body.iter().find(|r| r["method"] == v.label.as_str() && r["steps"] == steps);
                let populated = row.is_some_and(|r| {
                    r["psnr_db"].as_f64().is_some_and(f64::is_finite)
                        && r["ssim"].as_f64().is_some_and(f64::is_finite)
                        && r["gradient_l1"].as_f64().is_some_and(f64::is_finite)
                });
                if !populated {
                    problems.push(format!("{}/{} lacks a {steps}-step row", group.name(), v.slug));
                }
            }
            if !trailer["config"]["sched"].is_object() || !trailer["config"]["train"].is_object() {
                problems.push(format!("{}/{} has no embedded config", group.name(), v.slug));
            }
            found += 1;
        }
        counts.push(format!("{} {}/{}", group.name(), found, rows.len()));
    }
    let expected = [3, 4, 7];
    let sizes_ok = Group::ALL.iter().zip(expected).all(|(g, n)| variants(*g).len() == n);
    let labels: Vec<String> = variants(Group::Schedule).into_iter().map(|v| v.label).collect();
    check(
        problems.is_empty() && sizes_ok,
        format!("reports: {}; schedule rows {:?}; problems: {:?}", counts.join(", "), labels, problems),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let ws = Workspace::new();
    let mut failures = 0;
    let mut report = |n: u32, name: &str, outcome: std::thread::Result<Outcome>| {
        let line = match outcome {
            Ok(Ok(detail)) => format!("criterion {n} PASS {name}: {detail}"),
            Ok(Err(detail)) => {
                failures += 1;
                format!("criterion {n} FAIL {name}: {detail}")
            }
            Err(panic) => {
                failures += 1;
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("criterion {n} FAIL {name}: panicked: {msg}")
            }
        };
        println!("{line}");
    };
    let quick: [(u32, &str, fn() -> Outcome); 5] = [
        (1, "exact-oracle flow identity", exact_oracle),
        (2, "gradient suite", gradient_suite),
        (3, "Euler order", euler_order),
        (4, "scheduler properties", scheduler_properties),
        (5, "EMA and boundary identities", ema_and_boundaries),
    ];
    for (n, name, f) in quick {
        if wanted(n) {
            report(n, name, catch_unwind(f));
        }
    }
    if wanted(6) || wanted(7) || wanted(8) {
        eprintln!("training 3 seeds x (3 flow variants + 2 distillations) under {}", ws.root.display());
        match catch_unwind(AssertUnwindSafe(|| train_all(&ws))) {
            Ok(Ok(runs)) => {
                if wanted(6) {
                    report(6, "toy flow training", catch_unwind(AssertUnwindSafe(|| toy_flow(&runs))));
                }
                if wanted(7) {
                    report(7, "distillation closes the step gap", catch_unwind(AssertUnwindSafe(|| distillation_gap(&runs))));
                }
                if wanted(8) {
                    report(8, "HR regularisation vs plain CD", catch_unwind(AssertUnwindSafe(|| hr_vs_cd(&runs, &ws.archive))));
                }
            }
            other => {
                let outcome: std::thread::Result<Outcome> = match other {
                    Ok(Err(e)) => Ok(Err(format!("training failed: {e}"))),
                    Err(p) => Err(p),
                    Ok(Ok(_)) => unreachable!(),
                };
                let msg = match &outcome {
                    Ok(Err(e)) => e.clone(),
                    _ => "training panicked".to_string(),
                };
                for (n, name) in [(6, "toy flow training"), (7, "distillation closes the step gap"), (8, "HR regularisation vs plain CD")] {
                    if wanted(n) {
                        report(n, name, Ok(Err(msg.clone())));
                    }
                }
            }
        }
    }
    if wanted(9) {
        report(9, "ablation runner completeness", catch_unwind(ablation_completeness));
    }
    if failures > 0 {
        println!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
