//! Acceptance suite. Runs every criterion sequentially at its stated
//! tolerance and runtime limit and prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p dpft --test acceptance`

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    gaussian_closed_form_epsilon, max_fd_error, max_replacement_change, random_batch, random_small_model,
    random_views, rdp_by_integration,
};
use dpft::accountant::{calibrate_sigma, default_orders, epsilon_for, rdp_subsampled_gaussian};
use dpft::data::augment_views;
use dpft::finetune::{effective_dimension, select_trainable, FineTuneStrategy};
use dpft::harness::{self, report_emit, CellStatus, ExperimentConfig, SweepOutput, REFERENCE_LABEL};
use dpft::optim::{clip, dp_sgd_step, l2_norm, poisson_sample, ClipConfig, NoiseStream, PrivateBatch, StepConfig};
use dpft::seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn desk_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    ExperimentConfig::load(&path).expect("committed desk config parses")
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for _ in 0..20 {
        let model = random_small_model(&mut rng);
        largest = largest.max(model.num_params());
        if model.num_params() > 500 {
            return Err(format!("model with {} params", model.num_params()));
        }
        let n = rng.random_range(1..5);
        let (x, labels) = random_batch(&model, n, &mut rng);
        worst = worst.max(max_fd_error(&model, &x, &labels));
    }
    let detail = format!("20 models (<= {largest} params), max rel err {worst:.2e} < 1e-6");
    if worst < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn clipping_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_ratio: f64 = 0.0;
    let mut identities = 0;
    for i in 0..10_000 {
        let d = rng.random_range(1..200);
        let scale = 10f64.powf(rng.random_range(-6.0..6.0));
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let v: Vec<f64> = common::normal_vec(d, &mut rng).iter().map(|x| x * scale).collect();
        let out = clip(&v, c).map_err(|e| format!("vector {i}: {e}"))?;
        let ratio = l2_norm(&out) / c;
        worst_ratio = worst_ratio.max(ratio);
        if ratio > 1.0 + 1e-12 {
            return Err(format!("vector {i}: clipped norm {} > C = {c}", l2_norm(&out)));
        }
        if l2_norm(&v) <= c {
            identities += 1;
            if out.iter().zip(&v).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("vector {i}: below threshold but modified"));
            }
        }
    }
    let zero = clip(&[0.0; 16], 1.0).map_err(|e| e.to_string())?;
    if zero.iter().any(|v| *v != 0.0) {
        return Err("zero vector changed".into());
    }
    Ok(format!(
        "10^4 vectors, max ||clip(g)||/C - 1 = {:.1e}, {identities} identities, zero vector safe",
        worst_ratio - 1.0
    ))
}

fn sensitivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for k in [1, 4] {
        for trial in 0..100 {
            let model = random_small_model(&mut rng);
            let c = 10f64.powf(rng.random_range(-2.0..1.0));
            let views: Vec<_> = (0..3).map(|_| random_views(&model, k, 3.0, &mut rng)).collect();
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..model.num_classes())).collect();
            let other = random_views(&model, k, 3.0, &mut rng);
            let other_label = rng.random_range(0..model.num_classes());
            let change = max_replacement_change(&model, &views, &labels, (&other, other_label), c);
            worst = worst.max(change / c);
            if change > 2.0 * c * (1.0 + 1e-12) {
                return Err(format!("K={k} trial {trial}: change {change} > 2C = {}", 2.0 * c));
            }
        }
    }
    Ok(format!("100 trials x K in {{1, 4}}, max change / C = {worst:.6} <= 2"))
}

fn closed_form() -> Outcome {
    let (eps, alpha) = epsilon_for(1.0, 1.0, 1, 1e-5, &default_orders()).map_err(|e| e.to_string())?;
    let detail = format!(
        "eps = {eps:.6} at alpha = {alpha} (continuous optimum {:.6}), |eps - 5.29853| = {:.2e}",
        gaussian_closed_form_epsilon(1e-5),
        (eps - 5.29853).abs()
    );
    if (eps - 5.29853).abs() < 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn integration_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &alpha in &[2.0, 3.0, 5.0, 8.0, 16.0, 32.0] {
        for &q in &[0.01, 0.1, 0.5] {
            for &sigma in &[0.5, 1.0, 2.0] {
                let exact = rdp_subsampled_gaussian(q, sigma, alpha).map_err(|e| e.to_string())?;
                let oracle = rdp_by_integration(q, sigma, alpha);
                let rel = (exact - oracle).abs() / oracle.abs();
                worst = worst.max(rel);
                cases += 1;
                if !(rel < 1e-6) {
                    return Err(format!("alpha={alpha} q={q} sigma={sigma}: {exact} vs {oracle} (rel {rel:.2e})"));
                }
            }
        }
    }
    Ok(format!("{cases} (alpha, q, sigma) cases, max rel err {worst:.2e} < 1e-6"))
}

fn calibration_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let orders = default_orders();
    let mut worst_gap: f64 = 0.0;
    for i in 0..20 {
        let eps = 10f64.powf(rng.random_range(-0.5..1.0));
        let delta = 10f64.powf(rng.random_range(-8.0..-4.0));
        let q = 10f64.powf(rng.random_range(-3.0..-0.3));
        let steps = rng.random_range(1..3000);
        let sigma = calibrate_sigma(eps, delta, q, steps).map_err(|e| format!("tuple {i}: {e}"))?;
        let (got, _) = epsilon_for(q, sigma, steps, delta, &orders).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(1.0 - got / eps);
        if !(got <= eps && got >= eps * (1.0 - 1e-3)) {
            return Err(format!(
                "tuple {i} (eps={eps}, delta={delta:e}, q={q}, T={steps}): recomputed {got}"
            ));
        }
    }
    Ok(format!("20 tuples, max relative shortfall {worst_gap:.2e} <= 1e-3, never above target"))
}

/// Desk-scale model and private data shared by the two step-level criteria.
fn desk_pieces() -> Result<(ExperimentConfig, dpft::data::TransferTask, dpft::nn::Model), String> {
    let cfg = desk_config();
    let task = harness::load_task(&cfg).map_err(|e| e.to_string())?;
    let model = harness::init_model(&cfg, &task).map_err(|e| e.to_string())?;
    Ok((cfg, task, model))
}

fn mask_invariance() -> Outcome {
    let (cfg, task, start) = desk_pieces()?;
    let strategy = FineTuneStrategy::FirstLastLayers;
    let mask = select_trainable(&start, &strategy).map_err(|e| e.to_string())?;
    let private = &task.private_train;
    let q = 32.0 / private.len() as f64;
    let step = StepConfig::new(0.5, 32.0, cfg.augment.multiplicity).map_err(|e| e.to_string())?;
    let clip = ClipConfig::new(1.0).map_err(|e| e.to_string())?;
    let mut sampler = seed::stream(1, &[seed::tag::SAMPLING]);
    let mut noise = NoiseStream::new(2);
    let mut model = start.clone();
    for t in 0..100 {
        let picked = poisson_sample(private.len(), q, &mut sampler).map_err(|e| e.to_string())?;
        let views = picked
            .iter()
            .map(|&i| augment_views(&private.example(i), &cfg.augment, private.ids[i], t, 3))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let batch = PrivateBatch {
            views,
            labels: picked.iter().map(|&i| private.labels[i]).collect(),
        };
        model = dp_sgd_step(&model, &batch, mask.coords(), clip, 1.0, step, &mut noise)
            .map_err(|e| format!("step {t}: {e}"))?
            .0;
    }
    let (before, after) = (start.params_flat(), model.params_flat());
    let mut frozen = 0;
    let mut moved = 0;
    for (j, &on) in mask.coords().iter().enumerate() {
        if on {
            moved += usize::from(before[j] != after[j]);
        } else {
            frozen += 1;
            if before[j].to_bits() != after[j].to_bits() {
                return Err(format!("frozen coordinate {j} changed"));
            }
        }
    }
    Ok(format!(
        "100 steps, {frozen} frozen coordinates bitwise unchanged, {moved}/{} trainable moved",
        effective_dimension(&mask)
    ))
}

fn noise_statistics() -> Outcome {
    let (_, _, model) = desk_pieces()?;
    let mask = select_trainable(&model, &FineTuneStrategy::FirstLastLayers).map_err(|e| e.to_string())?;
    let d = effective_dimension(&mask);
    let (sigma, c, lr, b) = (1.3, 0.8, 0.25, 64.0);
    let step = StepConfig::new(lr, b, 1).map_err(|e| e.to_string())?;
    let clip = ClipConfig::new(c).map_err(|e| e.to_string())?;
    let mut noise = NoiseStream::new(17);
    let steps = 100_000usize.div_ceil(d) + 1;
    let before = model.params_flat();
    let (mut sum, mut sum_sq, mut count, mut norm_total) = (0.0, 0.0, 0usize, 0.0);
    for _ in 0..steps {
        let (next, stats) = dp_sgd_step(&model, &PrivateBatch::default(), mask.coords(), clip, sigma, step, &mut noise)
            .map_err(|e| e.to_string())?;
        norm_total += stats.noise_norm;
        for (j, (a, z)) in before.iter().zip(next.params_flat()).enumerate() {
            if mask.coords()[j] {
                // The empty-batch update is -lr * z / B.
                let noise_j = (a - z) * b / lr;
                sum += noise_j;
                sum_sq += noise_j * noise_j;
                count += 1;
            } else if *a != z {
                return Err(format!("frozen coordinate {j} received noise"));
            }
        }
    }
    let mean = sum / count as f64;
    let std = (sum_sq / count as f64 - mean * mean).sqrt();
    let target_std = sigma * c;
    let mean_norm = norm_total / steps as f64;
    let target_norm = sigma * c * (d as f64).sqrt();
    let std_err = (std / target_std - 1.0).abs();
    let norm_err = (mean_norm / target_norm - 1.0).abs();
    let detail = format!(
        "{count} samples: std {std:.4} vs sigma*C {target_std:.4} ({:.2}%), mean norm {mean_norm:.3} vs sigma*C*sqrt(d={d}) {target_norm:.3} ({:.2}%)",
        100.0 * std_err,
        100.0 * norm_err
    );
    if count >= 100_000 && std_err < 0.02 && norm_err < 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_desk_sweep() -> Result<SweepOutput, String> {
    harness::run_sweep(&desk_config()).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let a = run_desk_sweep()?;
    let b = run_desk_sweep()?;
    let (ja, jb) = (a.report.without_timing().to_json(), b.report.without_timing().to_json());
    if ja != jb {
        return Err("reports differ".into());
    }
    let bitwise = a.report.records.iter().zip(&b.report.records).all(|(x, y)| {
        let bits = |v: Option<f64>| v.map(f64::to_bits);
        bits(x.accuracy_ema) == bits(y.accuracy_ema)
            && bits(x.accuracy_raw) == bits(y.accuracy_raw)
            && bits(x.realized_epsilon) == bits(y.realized_epsilon)
    });
    if !bitwise || a.trace != b.trace {
        return Err("accuracy fields or traces differ".into());
    }
    Ok(format!(
        "{} records and {} trace points identical (wall-time excluded), {} JSON bytes",
        a.report.records.len(),
        a.trace.len(),
        ja.len()
    ))
}

fn desk_sweep() -> Outcome {
    let out = run_desk_sweep()?;
    let report = &out.report;
    if report.records.len() != 12 {
        return Err(format!("{} records, expected 12", report.records.len()));
    }
    for r in &report.records {
        if r.status != CellStatus::Completed {
            return Err(format!("{} eps={} failed: {:?}", r.strategy, r.target_epsilon, r.status));
        }
        match r.realized_epsilon {
            Some(e) if e <= r.target_epsilon => {}
            other => return Err(format!("{} eps={}: realized {other:?}", r.strategy, r.target_epsilon)),
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = report_emit(report, &out.trace, dir.path()).map_err(|e| e.to_string())?;
    let table = std::fs::read_to_string(&files.table).map_err(|e| e.to_string())?;
    let json = std::fs::read_to_string(&files.json).map_err(|e| e.to_string())?;
    let has_reference = report.reference.rows.iter().any(|row| {
        row.dataset == "CIFAR-100" && row.strategy_label == "First-Last-Layers" && row.accuracy[1] == 77.9
    });
    if !(table.contains(REFERENCE_LABEL) && json.contains(REFERENCE_LABEL) && has_reference) {
        return Err("reference values missing or unlabeled".into());
    }
    println!("{table}");
    let acc: Vec<String> = report
        .records
        .iter()
        .map(|r| format!("{}@{}={:.1}", r.strategy, r.target_epsilon, 100.0 * r.accuracy_ema.unwrap_or(f64::NAN)))
        .collect();
    Ok(format!("12 cells completed, realized eps <= target everywhere; {}", acc.join(" ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("gradient oracle", Duration::from_secs(10), gradient_oracle),
        ("clipping suite", Duration::from_secs(1), clipping_suite),
        ("sensitivity brute force", Duration::from_secs(10), sensitivity),
        ("accountant vs closed form", Duration::from_secs(1), closed_form),
        ("accountant vs integration oracle", Duration::from_secs(30), integration_oracle),
        ("calibration round-trip", Duration::from_secs(10), calibration_round_trip),
        ("mask invariance", Duration::from_secs(30), mask_invariance),
        ("noise statistics", Duration::from_secs(30), noise_statistics),
        ("end-to-end determinism", Duration::from_secs(300), determinism),
        ("desk-scale sweep", Duration::from_secs(600), desk_sweep),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let took = started.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= *limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded runtime limit")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} [{:>2}] {name}: {detail} ({:.2}s / {}s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
