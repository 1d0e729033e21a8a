//! Self-verification: finite-difference gradient checks for every loss path
//! plus the per-module property oracles, reported as a pass/fail table.

use std::time::{Duration, Instant};

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Graph};
use crate::error::Result;
use crate::isw;
use crate::snr;
use crate::synthdata;
use crate::training::{finite_difference_check, CheckComponent};

/// One row of the self-test table.
#[derive(Debug, Clone)]
pub struct SelftestEntry {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Full self-test outcome.
#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub entries: Vec<SelftestEntry>,
    pub elapsed: Duration,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<34} {:<6} detail\n", "check", "status"));
        out.push_str(&format!("{}\n", "-".repeat(78)));
        for e in &self.entries {
            let status = if e.passed { "pass" } else { "FAIL" };
            out.push_str(&format!("{:<34} {:<6} {}\n", e.name, status, e.detail));
        }
        out.push_str(&format!(
            "{}\n{} checks, {} failed, {:.1}s\n",
            "-".repeat(78),
            self.entries.len(),
            self.entries.iter().filter(|e| !e.passed).count(),
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

/// Outcome of the whitening-efficacy experiment.
#[derive(Debug, Clone)]
pub struct WhiteningEfficacy {
    pub initial_offdiag: f64,
    pub final_offdiag: f64,
    /// `1 - final/initial`.
    pub reduction: f64,
    pub steps: usize,
}

fn mean_offdiag(theta: &ndarray::Array3<f64>) -> f64 {
    let (_, c, _) = theta.dim();
    let mut acc = 0.0;
    let mut count = 0usize;
    for n in 0..theta.dim().0 {
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    acc += theta[(n, i, j)].abs();
                    count += 1;
                }
            }
        }
    }
    acc / count as f64
}

/// Gradient descent on the whitening objective over a learnable linear
/// channel map applied to fixed random features. Measures how far the mean
/// absolute off-diagonal covariance drops.
pub fn whitening_efficacy(seed: u64, steps: usize) -> Result<WhiteningEfficacy> {
    let c = 8usize;
    let (h, w) = (8usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Correlated features: random mixing of independent noise guarantees a
    // non-trivial starting covariance.
    let base = Array2::<f64>::from_shape_fn((c, h * w), |_| rng.random::<f64>() * 2.0 - 1.0);
    let mixing = Array2::<f64>::from_shape_fn((c, c), |_| rng.random::<f64>() * 0.8);
    let features = mixing.dot(&base);
    let mut map = Array2::<f64>::eye(c);

    let theta_of = |map: &Array2<f64>| -> Result<ndarray::Array3<f64>> {
        let mixed = map.dot(&features);
        let f4 = mixed.into_shape_with_order((1, c, h, w)).expect("contiguous");
        Ok(isw::covariance_array(&f4, true))
    };
    let initial = mean_offdiag(&theta_of(&map)?);

    for step in 0..steps {
        let mut g = Graph::<f64>::new();
        let map_var = g.leaf(map.clone().into_dyn());
        let feat = g.constant(features.clone().into_dyn());
        let mixed = autodiff::matmul(&mut g, map_var, feat)?;
        let f4 = autodiff::reshape(&mut g, mixed, &[1, c, h, w])?;
        let centered = isw::center_features(&mut g, f4)?;
        let theta = isw::covariance(&mut g, centered)?;
        let loss = isw::deep_whitening_loss(&mut g, theta)?;
        let mut grads = g.backward(loss)?;
        let grad = grads.take(map_var).expect("map receives gradient");
        let grad = grad.into_dimensionality::<ndarray::Ix2>().expect("square map");
        // polynomially decayed step keeps the L1 descent from oscillating
        let lr = 2.0 * (1.0 - step as f64 / steps as f64);
        map.zip_mut_with(&grad, |m, &gv| *m -= lr * gv);
    }
    let final_offdiag = mean_offdiag(&theta_of(&map)?);
    Ok(WhiteningEfficacy {
        initial_offdiag: initial,
        final_offdiag,
        reduction: 1.0 - final_offdiag / initial,
        steps,
    })
}

fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn entry(name: &str, passed: bool, detail: String) -> SelftestEntry {
    SelftestEntry { name: name.to_string(), passed, detail }
}

fn partition_identity<A: crate::Element>(seeds: u64, tol: f64) -> SelftestEntry {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
        let params = snr::SnrParams::<A>::init_he(4, 16, A::lit(1e-5), &mut rng)
            .expect("valid params");
        let f64_data = rand4((2, 4, 3, 3), seed);
        let f_data = f64_data.mapv(|v| A::lit(v));
        let mut g = Graph::<A>::new();
        let vars = params.bind_leaf(&mut g);
        let f = g.constant(f_data.into_dyn());
        let out =
            snr::snr_forward(&mut g, f, &vars, A::lit(1e-5), snr::AttentionMode::PerSample)
                .expect("valid forward");
        let fv = g.value(f);
        let nv = g.value(out.normalized);
        let rp = g.value(out.residual_plus);
        let rm = g.value(out.residual_minus);
        let ev = g.value(out.enhanced);
        let cv = g.value(out.corrupted);
        for i in 0..fv.len() {
            let f_ = fv.as_slice().unwrap()[i].as_f64();
            let n_ = nv.as_slice().unwrap()[i].as_f64();
            let rp_ = rp.as_slice().unwrap()[i].as_f64();
            let rm_ = rm.as_slice().unwrap()[i].as_f64();
            let e_ = ev.as_slice().unwrap()[i].as_f64();
            let c_ = cv.as_slice().unwrap()[i].as_f64();
            worst = worst.max(((f_ - n_) - (rp_ + rm_)).abs());
            worst = worst.max((e_ + c_ - n_ - f_).abs());
        }
    }
    let name = format!("partition_identity_f{}", A::DTYPE_BYTES as usize * 8);
    entry(&name, worst < tol, format!("max abs dev {worst:.3e} (tol {tol:.0e})"))
}

fn instance_norm_postconditions(seeds: u64) -> SelftestEntry {
    let eps = 1e-5;
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for seed in 0..seeds {
        let x = rand4((2, 3, 4, 5), seed ^ 0x1f);
        let mut g = Graph::<f64>::new();
        let f = g.constant(x.into_dyn());
        let y = snr::instance_normalize(&mut g, f, eps).expect("finite input");
        let yv = g.value(y).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let xv = g.value(f).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for n in 0..2 {
            for ch in 0..3 {
                let xp = xv.slice(ndarray::s![n, ch, .., ..]);
                let xm = xp.mean().unwrap();
                let xvar = xp.mapv(|v| (v - xm) * (v - xm)).mean().unwrap();
                if xvar <= 100.0 * eps {
                    continue;
                }
                let plane = yv.slice(ndarray::s![n, ch, .., ..]);
                let m = plane.mean().unwrap();
                let var = plane.mapv(|v| (v - m) * (v - m)).mean().unwrap();
                worst_mean = worst_mean.max(m.abs());
                worst_std = worst_std.max((var.sqrt() - 1.0).abs());
            }
        }
    }
    entry(
        "instance_norm_postconditions",
        worst_mean < 1e-6 && worst_std < 1e-3,
        format!("|mean| max {worst_mean:.2e}, |std-1| max {worst_std:.2e}"),
    )
}

fn entropy_bounds(seeds: u64) -> SelftestEntry {
    let mut ok = true;
    let mut detail = String::new();
    for seed in 0..seeds {
        let c = 2 + (seed % 5) as usize;
        let x = rand4((2, c, 3, 3), seed ^ 0x2f).mapv(|v| v * 10.0);
        let mut g = Graph::<f64>::new();
        let f = g.constant(x.into_dyn());
        let e = snr::pixel_entropy(&mut g, f).expect("valid input");
        let upper = (c as f64).ln() + 1e-12;
        for &v in g.value(e).iter() {
            if !(0.0..=upper).contains(&v) {
                ok = false;
                detail = format!("seed {seed}: entropy {v} outside [0, ln {c}]");
            }
        }
    }
    if detail.is_empty() {
        detail = format!("{seeds} tensors within [0, ln C]");
    }
    entry("entropy_bounds", ok, detail)
}

fn pair_variance_closed_form(seeds: u64) -> SelftestEntry {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a);
        let to =
            ndarray::Array3::<f64>::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let ta =
            ndarray::Array3::<f64>::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let v = isw::pair_variance(&to, &ta).expect("matched shapes");
        for i in 0..4 {
            for j in 0..4 {
                let mut closed = 0.0;
                for n in 0..3 {
                    let d = to[(n, i, j)] - ta[(n, i, j)];
                    closed += d * d / 4.0;
                }
                closed /= 3.0;
                worst = worst.max((v[(i, j)] - closed).abs());
            }
        }
    }
    entry(
        "pair_variance_closed_form",
        worst < 1e-10,
        format!("max abs dev {worst:.3e} (tol 1e-10)"),
    )
}

fn covariance_symmetry_psd(seeds: u64) -> SelftestEntry {
    let mut ok = true;
    let mut detail = format!("{seeds} tensors symmetric and PSD");
    let mut rng = ChaCha8Rng::seed_from_u64(0x4b);
    for seed in 0..seeds {
        let x = rand4((2, 5, 3, 4), seed ^ 0x4c);
        let theta = isw::covariance_array(&x, true);
        for n in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    if (theta[(n, i, j)] - theta[(n, j, i)]).abs() > 1e-10 {
                        ok = false;
                        detail = format!("seed {seed}: asymmetry at ({i},{j})");
                    }
                }
            }
            let z: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mut quad = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    quad += z[i] * theta[(n, i, j)] * z[j];
                }
            }
            if quad < -1e-10 {
                ok = false;
                detail = format!("seed {seed}: z^T theta z = {quad}");
            }
        }
    }
    entry("covariance_symmetry_psd", ok, detail)
}

fn kmeans_vs_brute_force(sets: u64) -> SelftestEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d);
    let sse = |values: &[f64], assign: &[usize]| -> f64 {
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for (&v, &a) in values.iter().zip(assign) {
            sums[a] += v;
            counts[a] += 1;
        }
        let means = [
            if counts[0] > 0 { sums[0] / counts[0] as f64 } else { 0.0 },
            if counts[1] > 0 { sums[1] / counts[1] as f64 } else { 0.0 },
        ];
        values.iter().zip(assign).map(|(&v, &a)| (v - means[a]) * (v - means[a])).sum()
    };
    for set in 0..sets {
        let n = rng.random_range(2..=10);
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 8.0).collect();
        let km = isw::kmeans_1d(&values, 2, 50, set).expect("non-empty");
        let got = sse(&values, &km.assignments);
        let mut best = f64::INFINITY;
        for bits in 1..(1u32 << n) - 1 {
            let assign: Vec<usize> = (0..n).map(|i| ((bits >> i) & 1) as usize).collect();
            best = best.min(sse(&values, &assign));
        }
        if got > best + 1e-9 {
            return entry(
                "kmeans_vs_brute_force",
                false,
                format!("set {set}: SSE {got:.6} vs optimal {best:.6}"),
            );
        }
    }
    entry("kmeans_vs_brute_force", true, format!("{sets} sets optimal"))
}

fn margin_loss_properties() -> SelftestEntry {
    let xs: Vec<f64> = (-60..=60).map(|i| i as f64 / 4.0).collect();
    let mut ok = true;
    for w in xs.windows(2) {
        if snr::margin_loss_scalar(w[0]) >= snr::margin_loss_scalar(w[1]) {
            ok = false;
        }
    }
    for &x in &xs {
        let m = snr::margin_loss_scalar(x);
        if !(m > x.max(0.0)) || !m.is_finite() {
            ok = false;
        }
    }
    entry("margin_loss_properties", ok, "monotone, finite, above max(0, x)".into())
}

fn corpus_round_trip() -> SelftestEntry {
    let run = || -> Result<String> {
        let dir = tempfile_dir()?;
        let cfg = synthdata::CorpusConfig {
            out_dir: dir.join("corpus"),
            seed: 31,
            n_source: 20,
            n_target: 4,
            size: 32,
            force: false,
        };
        let manifest = synthdata::build_corpus(&cfg)?;
        let corpus = synthdata::load_dataset(&cfg.out_dir)?;
        let train = corpus.load_split(synthdata::Split::Train)?;
        let detail = format!(
            "splits {}/{}/{}/{}",
            manifest.counts["train"],
            manifest.counts["val"],
            manifest.counts["test-source"],
            manifest.counts["test-target"]
        );
        if train.len() != manifest.counts["train"] {
            return Err(crate::SrwError::Data("count mismatch after reload".into()));
        }
        std::fs::remove_dir_all(&dir).ok();
        Ok(detail)
    };
    match run() {
        Ok(detail) => entry("corpus_round_trip", true, detail),
        Err(e) => entry("corpus_round_trip", false, e.to_string()),
    }
}

fn tempfile_dir() -> Result<std::path::PathBuf> {
    let base = std::env::temp_dir().join(format!("srwseg-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&base).map_err(|e| crate::SrwError::io_at(&base, e))?;
    Ok(base)
}

/// Runs every check; deterministic given the seed.
pub fn run_selftest(seed: u64) -> SelftestReport {
    let start = Instant::now();
    let mut entries = Vec::new();

    for component in CheckComponent::ALL {
        let tol = component.default_tolerance();
        match finite_difference_check(component, seed, tol) {
            Ok(report) => entries.push(entry(
                &format!("grad_{}", report.name),
                report.passed,
                format!(
                    "max rel err {:.3e} (tol {:.0e}, {} probes{})",
                    report.max_rel_err,
                    report.tolerance,
                    report.checked,
                    if report.skipped > 0 {
                        format!(", {} skipped", report.skipped)
                    } else {
                        String::new()
                    }
                ),
            )),
            Err(e) => entries.push(entry(
                &format!("grad_{}", component.name()),
                false,
                format!("errored: {e}"),
            )),
        }
    }

    entries.push(partition_identity::<f32>(100, 1e-5));
    entries.push(partition_identity::<f64>(100, 1e-10));
    entries.push(instance_norm_postconditions(100));
    entries.push(entropy_bounds(100));
    entries.push(pair_variance_closed_form(100));
    entries.push(covariance_symmetry_psd(100));
    entries.push(kmeans_vs_brute_force(50));
    entries.push(margin_loss_properties());

    match whitening_efficacy(seed, 500) {
        Ok(w) => entries.push(entry(
            "whitening_efficacy",
            w.reduction >= 0.9,
            format!(
                "off-diag {:.4} -> {:.4} ({:.1}% reduction in {} steps)",
                w.initial_offdiag,
                w.final_offdiag,
                100.0 * w.reduction,
                w.steps
            ),
        )),
        Err(e) => entries.push(entry("whitening_efficacy", false, e.to_string())),
    }

    match synthdata::modality_separability(200, 64, seed ^ 0x99) {
        Ok(acc) => entries.push(entry(
            "modality_separability",
            acc >= 0.95,
            format!("linear probe accuracy {:.3} over 200 scenes", acc),
        )),
        Err(e) => entries.push(entry("modality_separability", false, e.to_string())),
    }

    entries.push(corpus_round_trip());

    SelftestReport { entries, elapsed: start.elapsed() }
}
