//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `SVASTIN_ACCEPTANCE=1,2,8` restricts the run to a subset. The trained
//! victim is cached under the cargo target tmpdir and reused by subsets that
//! skip criterion 4; criterion 4 itself always retrains.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use svastin::attack::{ablation_arms, attack_item, quantize_clamp, Ablation, AttackConfig, AttackResult, SuiteItem};
use svastin::coupling::StinConfig;
use svastin::harness::{execute_run, file_fingerprint, run_suite, write_run, Method, RunConfig, RunInputs};
use svastin::metrics::{fid, psnr_from_mse, ssim, MetricReport};
use svastin::video_io::save_dataset;
use svastin::victim::{accuracy, frame_dataset, generate_dataset, train_victim, CnnConfig, Dataset, SyntheticVideoSpec, ToyCnn, TrainConfig};
use svastin::wavelet3d::{haar3_forward, haar3_inverse};
use svastin::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Run {
    items: Vec<SuiteItem>,
    results: Vec<AttackResult>,
    report: MetricReport,
    dir: PathBuf,
}

/// Lazily built state shared by the end-to-end criteria.
struct Ctx {
    root: PathBuf,
    data: Option<Dataset>,
    victim: Option<ToyCnn<f32>>,
    svastin: Option<Run>,
    cfg: RunConfig,
}

impl Ctx {
    fn data(&mut self) -> &Dataset {
        self.data.get_or_insert_with(|| generate_dataset(&SyntheticVideoSpec::default()).expect("dataset"))
    }

    fn data_dir(&mut self) -> PathBuf {
        let dir = self.root.join("data");
        let fp = self.data().fingerprint();
        let stored = fs::read_to_string(dir.join("fingerprint.txt")).unwrap_or_default();
        if stored.trim() != fp {
            let d = self.data.as_ref().unwrap();
            save_dataset(&dir, d).expect("save dataset");
        }
        dir
    }

    fn victim_path(&self) -> PathBuf {
        self.root.join("victim.svck")
    }

    fn train_victim(&mut self) -> (f64, usize) {
        let spec = self.data().spec.clone();
        let d = self.data.as_ref().unwrap();
        let mut m = ToyCnn::<f32>::new(CnnConfig { in_channels: spec.channels, num_classes: spec.num_classes, ..Default::default() })
            .expect("victim");
        let report = train_victim(&mut m, &d.train, &d.val, &TrainConfig::default()).expect("training");
        m.save(&self.victim_path()).expect("save victim");
        fs::write(self.root.join("victim.data"), d.fingerprint()).expect("write victim tag");
        let acc = accuracy(&m, &d.val).expect("accuracy");
        self.victim = Some(m);
        (acc, report.val_accuracy.len())
    }

    fn victim(&mut self) -> &ToyCnn<f32> {
        if self.victim.is_none() {
            let fp = self.data().fingerprint();
            let tag = fs::read_to_string(self.root.join("victim.data")).unwrap_or_default();
            match ToyCnn::<f32>::load(&self.victim_path()) {
                Ok(m) if tag == fp => self.victim = Some(m),
                _ => {
                    self.train_victim();
                }
            }
        }
        self.victim.as_ref().unwrap()
    }

    fn svastin(&mut self) -> &Run {
        if self.svastin.is_none() {
            self.victim();
            let dir = self.root.join("run_svastin");
            let fp = file_fingerprint(&self.victim_path()).expect("victim fingerprint");
            let (data, victim) = (self.data.as_ref().unwrap(), self.victim.as_ref().unwrap());
            let inputs = RunInputs { data, victim, victim_fingerprint: fp };
            let (items, manifest, _) = execute_run(Method::Svastin, &self.cfg, &inputs).expect("svastin run");
            let _ = fs::remove_dir_all(&dir);
            write_run(&dir, &items, &manifest).expect("write run");
            let results = manifest.records.iter().map(|r| r.result.clone()).collect();
            self.svastin = Some(Run { items, results, report: manifest.aggregate, dir });
        }
        self.svastin.as_ref().unwrap()
    }

    /// Results of `arm` over the suite, reusing the main run when the
    /// configuration is the default one.
    fn arm(&mut self, arm: &AttackConfig) -> Vec<AttackResult> {
        let base = self.cfg.attack.clone();
        let run = self.svastin();
        if *arm == base {
            return run.results.clone();
        }
        let items = run.items.clone();
        let f = self.victim.as_ref().unwrap();
        items.iter().map(|it| attack_item(it, f, arm).expect("ablation arm")).collect()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn c1_wavelet() -> Outcome {
    let mut worst_rt: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    for seed in 0..100u64 {
        let x = common::random_video(&[3, 8, 16, 16], seed);
        let c = haar3_forward(&x).unwrap();
        worst_rt = worst_rt.max(haar3_inverse(&c).unwrap().max_abs_diff(&x));
        worst_energy = worst_energy.max((c.sq_norm() - x.sq_norm()).abs() / x.sq_norm());
    }
    let mut worst_oracle: f64 = 0.0;
    for bits in 0u32..256 {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| ((bits >> i) & 1) as f64);
        worst_oracle = worst_oracle.max(haar3_forward(&x).unwrap().max_abs_diff(&common::haar3_oracle(&x)));
    }
    outcome(
        worst_rt <= 1e-6 && worst_energy <= 1e-6 && worst_oracle <= 1e-12,
        format!("round trip {worst_rt:.1e}, energy {worst_energy:.1e}, oracle {worst_oracle:.1e}"),
    )
}

fn c2_stin() -> Outcome {
    let mut worst: f32 = 0.0;
    for seed in 0..200u64 {
        let stin = common::drawn_stin::<f32>(StinConfig { num_blocks: 4, ..Default::default() }, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_c = Tensor::uniform(&[3, 4, 16, 8], 0.0, 1.0, &mut rng);
        let x_t = Tensor::uniform(&[3, 4, 16, 8], 0.0, 1.0, &mut rng);
        let (x_a, x_r) = stin.forward(&x_c, &x_t).unwrap();
        let (c, t) = stin.inverse(&x_a, &x_r).unwrap();
        worst = worst.max(c.max_abs_diff(&x_c)).max(t.max_abs_diff(&x_t));
    }
    outcome(worst <= 1e-4, format!("worst round trip {worst:.1e} over 200 draws, M = 4"))
}

fn c3_gradients() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 1..=3 {
        let r = common::adversarial_gradcheck(seed, 8);
        pass &= r.passes();
        parts.push(format!(
            "adv#{seed} params {:.1e} ({} groups, {}/{} on kinks) x_t {:.1e}",
            r.worst_group,
            r.groups,
            r.params.kinks(),
            r.params.total(),
            r.x_t.smooth_error()
        ));
        let g = common::guidance_gradcheck(seed);
        pass &= g.passes();
        parts.push(format!("guide#{seed} {:.1e}", g.smooth_error()));
    }
    outcome(pass, parts.join("; "))
}

fn c4_victim(ctx: &mut Ctx) -> Outcome {
    let (acc, epochs) = ctx.train_victim();
    let d = ctx.data.as_ref().unwrap();
    let k = d.num_classes();
    let (train, val) = frame_dataset(d).expect("frames");
    let mut control = ToyCnn::<f32>::new(CnnConfig { in_channels: d.spec.channels, num_classes: k, ..CnnConfig::framewise() }).unwrap();
    train_victim(&mut control, &train, &val, &TrainConfig::default()).expect("control training");
    let control_acc = accuracy(&control, &val).unwrap();
    let bound = 1.0 / k as f64 + 0.15;
    outcome(
        acc >= 0.95 && epochs <= 30 && control_acc <= bound,
        format!("3D val acc {acc:.3} after {epochs} epochs; framewise control {control_acc:.3} (bound {bound:.3})"),
    )
}

fn c5_efficacy(ctx: &mut Ctx) -> Outcome {
    let run = ctx.svastin();
    let ok = run.report.fr_numerator;
    let worst_epochs = run.results.iter().map(|r| r.epochs_used).max().unwrap_or(0);
    outcome(
        ok >= 18 && run.report.fr_denominator == 20 && worst_epochs <= 200,
        format!(
            "{ok}/{} successes, mean epochs {:.1}, PSNR {:.2}, SSIM {:.3}",
            run.report.fr_denominator, run.report.mean_epochs, run.report.psnr, run.report.ssim
        ),
    )
}

fn common_success_means(a: &[AttackResult], b: &[AttackResult], f: impl Fn(&AttackResult) -> f64) -> (f64, f64, usize) {
    let both: Vec<usize> = (0..a.len()).filter(|&i| a[i].success && b[i].success).collect();
    (mean(both.iter().map(|&i| f(&a[i]))), mean(both.iter().map(|&i| f(&b[i]))), both.len())
}

fn c6_imperceptibility(ctx: &mut Ctx) -> Outcome {
    ctx.svastin();
    let run = ctx.svastin.as_ref().unwrap();
    let f = ctx.victim.as_ref().unwrap();
    let cw = run_suite(Method::Cw, &run.items, f, &ctx.cfg).expect("cw");
    let sparse = run_suite(Method::Sparse, &run.items, f, &ctx.cfg).expect("sparse");
    let finite = |r: &AttackResult| r.metrics.psnr.min(99.0);
    let (p_s, p_cw, n_cw) = common_success_means(&run.results, &cw, finite);
    let (l_s, l_sp, n_sp) = common_success_means(&run.results, &sparse, |r| r.metrics.l21);
    let fr = |r: &[AttackResult]| r.iter().filter(|x| x.success).count();
    outcome(
        n_cw > 0 && n_sp > 0 && p_s >= p_cw + 1.0 && l_s <= l_sp,
        format!(
            "PSNR svastin {p_s:.2} vs cw_l2 {p_cw:.2} on {n_cw} common; l2,1 svastin {l_s:.4} vs sparse {l_sp:.4} on {n_sp} common; FR cw {}/20 sparse {}/20",
            fr(&cw),
            fr(&sparse)
        ),
    )
}

fn arm_results(ctx: &mut Ctx, which: Ablation) -> Vec<(String, Vec<AttackResult>)> {
    let base = ctx.cfg.attack.clone();
    ablation_arms(which, &base).into_iter().map(|(name, cfg)| (name, ctx.arm(&cfg))).collect()
}

fn c7_ablations(ctx: &mut Ctx) -> Outcome {
    let epochs = |r: &[AttackResult]| mean(r.iter().map(|x| x.epochs_used as f64));
    let fr = |r: &[AttackResult]| r.iter().filter(|x| x.success).count();
    let mse = |r: &[AttackResult]| mean(r.iter().map(|x| x.metrics.mse));

    let dims = arm_results(ctx, Ablation::Dims);
    let (e2, e3) = (epochs(&dims[0].1), epochs(&dims[1].1));
    let a = e3 < e2;

    let target = arm_results(ctx, Ablation::Target);
    let (hct, cgt, gtvl) = (&target[0].1, &target[1].1, &target[2].1);
    let b = fr(gtvl) >= fr(hct) && mse(gtvl) < mse(hct);

    let lll = arm_results(ctx, Ablation::Lll);
    let (without, with) = (&lll[0].1, &lll[1].1);
    let lower = with.iter().zip(without).filter(|(w, wo)| w.metrics.lll_energy < wo.metrics.lll_energy).count();
    let c = lower * 10 >= with.len() * 9;

    outcome(
        a && b && c,
        format!(
            "(a) epochs 3D {e3:.1} vs 2D {e2:.1} {}; (b) FR gtvl {} hct {} cgt {}, MSE gtvl {:.2} hct {:.2} cgt {:.2} {}; (c) lll lower on {lower}/{} {}",
            if a { "ok" } else { "FAIL" },
            fr(gtvl),
            fr(hct),
            fr(cgt),
            mse(gtvl),
            mse(hct),
            mse(cgt),
            if b { "ok" } else { "FAIL" },
            with.len(),
            if c { "ok" } else { "FAIL" },
        ),
    )
}

fn c8_metrics(ctx: &mut Ctx) -> Outcome {
    let mut pass = true;
    let mut identity_max: f64 = 0.0;
    let (videos, pairs): (Vec<Tensor<f32>>, Vec<_>) = match &ctx.svastin {
        Some(run) => (run.items.iter().map(|i| i.x_c.clone()).collect(), run.results.iter().map(|r| r.metrics).collect()),
        None => {
            let vs: Vec<Tensor<f32>> = ctx.data().val.iter().take(20).map(|s| s.video.clone()).collect();
            let pairs = vs
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let shifted = quantize_clamp(&v.map(|x| x + 0.01 * (i % 3) as f32));
                    svastin::metrics::PairMetrics::compute(&shifted, v).unwrap()
                })
                .collect();
            (vs, pairs)
        }
    };
    for p in &pairs {
        let want = psnr_from_mse(p.mse);
        let diff = if want.is_infinite() { if p.psnr == want { 0.0 } else { f64::INFINITY } } else { (p.psnr - want).abs() };
        identity_max = identity_max.max(diff);
    }
    pass &= identity_max <= 1e-9;
    let f = ctx.victim();
    let fid_self = fid(&videos, &videos, f).unwrap();
    pass &= fid_self <= 1e-6;
    let ssim_self = videos.iter().map(|v| (ssim(v, v).unwrap() - 1.0).abs()).fold(0.0, f64::max);
    pass &= ssim_self <= 1e-12;
    let idem = videos.iter().all(|v| {
        let q = quantize_clamp(&v.map(|x| x * 1.3 - 0.1));
        quantize_clamp(&q) == q
    });
    pass &= idem;
    outcome(
        pass,
        format!(
            "PSNR/MSE identity {identity_max:.1e} over {} pairs; fid(A,A) {fid_self:.1e}; |ssim(x,x)-1| {ssim_self:.1e}; quantization idempotent {idem}",
            pairs.len()
        ),
    )
}

fn c9_determinism(ctx: &mut Ctx) -> Outcome {
    let data_dir = ctx.data_dir();
    let victim = ctx.victim_path();
    ctx.svastin();
    let first = ctx.svastin.as_ref().unwrap().dir.clone();
    let second = ctx.root.join("run_svastin_replay");
    let _ = fs::remove_dir_all(&second);
    let status = Command::new(env!("CARGO_BIN_EXE_svastin"))
        .args(["attack", "--victim"])
        .arg(&victim)
        .arg("--suite")
        .arg(&data_dir)
        .arg("--manifest")
        .arg(first.join("manifest.json"))
        .arg("--out")
        .arg(&second)
        .env("RUST_LOG", "warn")
        .status()
        .expect("spawn svastin");
    if !status.success() {
        return outcome(false, format!("replay exited with {status}"));
    }
    let a = fs::read_to_string(first.join("aggregate.csv")).unwrap();
    let b = fs::read_to_string(second.join("aggregate.csv")).unwrap();
    let r = fs::read_to_string(first.join("results.csv")).unwrap() == fs::read_to_string(second.join("results.csv")).unwrap();
    outcome(a == b && r, format!("aggregate.csv identical: {}, results.csv identical: {r}", a == b))
}

const BUDGETS: [u64; 9] = [10, 60, 300, 900, 3600, 5400, 7200, 60, 3600];

fn main() -> ExitCode {
    let wanted: BTreeSet<usize> = match std::env::var("SVASTIN_ACCEPTANCE") {
        Ok(s) if !s.trim().is_empty() => s.split(',').filter_map(|p| p.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    };
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&root).expect("tmpdir");
    let mut ctx = Ctx { root, data: None, victim: None, svastin: None, cfg: RunConfig::default() };

    let mut failed = 0;
    for id in wanted {
        let t0 = Instant::now();
        let o = match id {
            1 => c1_wavelet(),
            2 => c2_stin(),
            3 => c3_gradients(),
            4 => c4_victim(&mut ctx),
            5 => c5_efficacy(&mut ctx),
            6 => c6_imperceptibility(&mut ctx),
            7 => c7_ablations(&mut ctx),
            8 => c8_metrics(&mut ctx),
            9 => c9_determinism(&mut ctx),
            _ => continue,
        };
        let took = t0.elapsed();
        let budget = Duration::from_secs(BUDGETS[id - 1]);
        let pass = o.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id}: {} {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
