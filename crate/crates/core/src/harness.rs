//! Experiment plumbing behind the command-line tool: configuration, suite
//! construction, parallel suite runs, manifests and report files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{attack_item, run_ablation, Ablation, AblationArm, AttackConfig, AttackResult, SuiteItem};
use crate::baselines::{run_baseline, BaselineConfig, BaselineMethod};
use crate::error::{Error, Result};
use crate::metrics::{fid, MetricReport};
use crate::tensor::Tensor;
use crate::victim::{Classifier, Dataset, Sample};
use crate::video_io::{read_json, write_json, write_png_video, write_raw};

pub const SEED_ENV: &str = "SVASTIN_SEED";

/// Explicit value, else `SVASTIN_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(0),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Svastin,
    Cw,
    Sparse,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Svastin => "svastin",
            Method::Cw => BaselineMethod::CwL2.label(),
            Method::Sparse => BaselineMethod::SparseL21.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub size: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { size: 20, seed: 0 }
    }
}

/// Everything a run depends on besides its inputs. Written as TOML with
/// dotted keys, e.g. `attack.loss.lambda_a = 0.3`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub attack: AttackConfig,
    pub baseline: BaselineConfig,
    pub suite: SuiteConfig,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let v = v.trim();
    let parsed = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), parsed))
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_dotted(&mut table, &k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(Error::io(p))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.baseline.validate()?;
        if self.suite.size == 0 {
            return Err(Error::Config("suite.size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn confidence_of<C: Classifier<f32> + ?Sized>(f: &C, x: &Tensor<f32>, label: usize) -> Result<(bool, f64)> {
    let z = f.logits(x)?;
    let p = crate::tape::softmax(&z.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let best = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
    Ok((best == label, p[label]))
}

/// Sources come round-robin over classes from correctly classified
/// validation clips; each target differs from its source class and gets a
/// random correctly classified training guide plus the most confident one.
/// Classes without a usable clip are skipped with a warning.
pub fn build_suite<C: Classifier<f32> + ?Sized>(
    data: &Dataset,
    f: &C,
    cfg: &SuiteConfig,
) -> Result<(Vec<SuiteItem>, Vec<String>)> {
    let k = data.num_classes();
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let correct = |split: &[Sample]| -> Result<Vec<Vec<(usize, f64)>>> {
        let mut by_class = vec![Vec::new(); k];
        for (i, s) in split.iter().enumerate() {
            let (ok, conf) = confidence_of(f, &s.video, s.label)?;
            if ok {
                by_class[s.label].push((i, conf));
            }
        }
        Ok(by_class)
    };
    let mut sources = correct(&data.val)?;
    let guides = correct(&data.train)?;
    for (c, list) in sources.iter_mut().enumerate() {
        list.shuffle(&mut rng);
        if list.is_empty() {
            warnings.push(format!("class {c}: no correctly classified validation clip, skipped as a source"));
        }
    }
    let usable_targets: Vec<usize> = (0..k).filter(|&c| !guides[c].is_empty()).collect();
    for c in (0..k).filter(|c| guides[*c].is_empty()) {
        warnings.push(format!("class {c}: no correctly classified training clip, skipped as a target"));
    }
    let hct: Vec<Option<usize>> = guides
        .iter()
        .map(|g| g.iter().fold(None, |b: Option<(usize, f64)>, &(i, c)| if b.map_or(true, |b| c > b.1) { Some((i, c)) } else { b }))
        .map(|b| b.map(|b| b.0))
        .collect();

    let mut items = Vec::new();
    let mut cursor = vec![0usize; k];
    let max_rounds = data.val.len() + k;
    'outer: for round in 0..max_rounds {
        for class in 0..k {
            if items.len() == cfg.size {
                break 'outer;
            }
            let Some(&(src, _)) = sources[class].get(cursor[class]) else {
                continue;
            };
            cursor[class] += 1;
            let targets: Vec<usize> = usable_targets.iter().copied().filter(|&t| t != class).collect();
            if targets.is_empty() {
                continue;
            }
            let y_t = targets[rng.gen_range(0..targets.len())];
            let guide = guides[y_t][rng.gen_range(0..guides[y_t].len())].0;
            items.push(SuiteItem {
                source_index: src,
                source_label: class,
                y_t,
                x_c: data.val[src].video.clone(),
                x_g: data.train[guide].video.clone(),
                x_hct: data.train[hct[y_t].expect("non-empty guide list")].video.clone(),
            });
        }
        if round > 0 && cursor.iter().zip(&sources).all(|(c, s)| *c >= s.len()) {
            break;
        }
    }
    if items.len() < cfg.size {
        warnings.push(format!("suite has {} of {} requested items", items.len(), cfg.size));
    }
    Ok((items, warnings))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs one method over the suite; results keep suite order.
pub fn run_suite<C: Classifier<f32> + ?Sized>(
    method: Method,
    suite: &[SuiteItem],
    f: &C,
    cfg: &RunConfig,
) -> Result<Vec<AttackResult>> {
    use rayon::prelude::*;
    let run = |it: &SuiteItem| -> Result<AttackResult> {
        match method {
            Method::Svastin => attack_item(it, f, &cfg.attack),
            Method::Cw => run_baseline(&it.x_c, it.y_t, f, &BaselineConfig { method: BaselineMethod::CwL2, ..cfg.baseline.clone() }),
            Method::Sparse => {
                run_baseline(&it.x_c, it.y_t, f, &BaselineConfig { method: BaselineMethod::SparseL21, ..cfg.baseline.clone() })
            }
        }
    };
    pool(cfg.workers)?.install(|| suite.par_iter().map(run).collect())
}

pub fn aggregate<C: Classifier<f32> + ?Sized>(suite: &[SuiteItem], results: &[AttackResult], f: &C) -> Result<MetricReport> {
    let pairs: Vec<_> = results.iter().map(|r| r.metrics).collect();
    let success: Vec<bool> = results.iter().map(|r| r.success).collect();
    let epochs: Vec<usize> = results.iter().map(|r| r.epochs_used).collect();
    let adv: Vec<Tensor<f32>> = results.iter().map(|r| r.x_a.clone()).collect();
    let clean: Vec<Tensor<f32>> = suite.iter().map(|s| s.x_c.clone()).collect();
    let fid = fid(&adv, &clean, f).ok();
    MetricReport::aggregate(&pairs, &success, &epochs, fid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub index: usize,
    pub source_index: usize,
    pub source_label: usize,
    pub target: usize,
    #[serde(flatten)]
    pub result: AttackResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub method: Method,
    pub config: RunConfig,
    pub dataset_fingerprint: String,
    pub victim_fingerprint: String,
    pub code_version: String,
    pub records: Vec<VideoRecord>,
    pub aggregate: MetricReport,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(Error::io(path))?))
}

pub fn run_id(method: Method, cfg: &RunConfig, dataset_fp: &str, victim_fp: &str) -> Result<String> {
    let snapshot = serde_json::to_string(&(method, cfg, dataset_fp, victim_fp)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_hex(snapshot.as_bytes())[..16].to_string())
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Fails if the inputs on disk differ from the ones the manifest recorded.
    pub fn verify_inputs(&self, dataset_fp: &str, victim_fp: &str) -> Result<()> {
        if self.dataset_fingerprint != dataset_fp {
            return Err(Error::Integrity(format!(
                "dataset fingerprint {dataset_fp} differs from recorded {}",
                self.dataset_fingerprint
            )));
        }
        if self.victim_fingerprint != victim_fp {
            return Err(Error::Integrity(format!(
                "victim fingerprint {victim_fp} differs from recorded {}",
                self.victim_fingerprint
            )));
        }
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub const RESULTS_HEADER: &str = "index,source_index,source_label,target,success,epochs,confidence,mse,ssim,psnr,l21,l21_sum,lll_energy";
pub const AGGREGATE_HEADER: &str = "method,MSE,SSIM,PSNR,PSNR_of_mean_MSE,l21,l21_sum,FID,FR,epochs";

pub fn results_csv(records: &[VideoRecord]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in records {
        let m = &r.result.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.index,
            r.source_index,
            r.source_label,
            r.target,
            r.result.success,
            r.result.epochs_used,
            fmt(r.result.final_confidence),
            fmt(m.mse),
            fmt(m.ssim),
            fmt(m.psnr),
            fmt(m.l21),
            fmt(m.l21_sum),
            fmt(m.lll_energy)
        ));
    }
    s
}

pub fn aggregate_row(label: &str, a: &MetricReport) -> String {
    format!(
        "{label},{},{},{},{},{},{},{},{}/{},{}",
        fmt(a.mse),
        fmt(a.ssim),
        fmt(a.psnr),
        fmt(a.psnr_of_mean_mse),
        fmt(a.l21),
        fmt(a.l21_sum),
        a.fid.map_or("nan".into(), fmt),
        a.fr_numerator,
        a.fr_denominator,
        fmt(a.mean_epochs)
    )
}

pub fn summary_text(title: &str, rows: &[(String, MetricReport)]) -> String {
    let mut s = format!("{title}\n");
    for (name, a) in rows {
        s.push_str(&format!(
            "\n[{name}]\nMSE      {}\nSSIM     {}\nPSNR     {} (per-video mean), {} (of mean MSE)\nl2,1     {} (per frame), {} (sum)\nFID      {} (toy features)\nFR       {}/{}\nepochs   {}\nnote     {}\n",
            fmt(a.mse),
            fmt(a.ssim),
            fmt(a.psnr),
            fmt(a.psnr_of_mean_mse),
            fmt(a.l21),
            fmt(a.l21_sum),
            a.fid.map_or("n/a".into(), fmt),
            a.fr_numerator,
            a.fr_denominator,
            fmt(a.mean_epochs),
            a.scale_note
        ));
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

/// Persists videos, per-video CSV, aggregate CSV, summary and manifest.
pub fn write_run(out: &Path, suite: &[SuiteItem], manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(out).map_err(Error::io(out))?;
    for (rec, item) in manifest.records.iter().zip(suite) {
        let dir = video_dir(out, rec.index);
        write_png_video(&dir.join("x_a"), &rec.result.x_a)?;
        write_png_video(&dir.join("x_c"), &item.x_c)?;
        if !rec.result.x_r.is_empty() {
            write_raw(&dir.join("x_r.svvt"), &rec.result.x_r)?;
        }
    }
    write_text(&out.join("results.csv"), &results_csv(&manifest.records))?;
    write_text(
        &out.join("aggregate.csv"),
        &format!("{AGGREGATE_HEADER}\n{}\n", aggregate_row(manifest.method.label(), &manifest.aggregate)),
    )?;
    write_text(
        &out.join("summary.txt"),
        &summary_text(&format!("run {}", manifest.run_id), &[(manifest.method.label().to_string(), manifest.aggregate.clone())]),
    )?;
    write_json(&out.join("manifest.json"), manifest)
}

pub fn video_dir(out: &Path, index: usize) -> PathBuf {
    out.join("videos").join(format!("{index:03}"))
}

pub struct RunInputs<'a, C: ?Sized> {
    pub data: &'a Dataset,
    pub victim: &'a C,
    pub victim_fingerprint: String,
}

/// Builds the suite, runs `method`, and assembles the manifest.
pub fn execute_run<C: Classifier<f32> + ?Sized>(
    method: Method,
    cfg: &RunConfig,
    inputs: &RunInputs<'_, C>,
) -> Result<(Vec<SuiteItem>, RunManifest, Vec<String>)> {
    cfg.validate()?;
    let (suite, warnings) = build_suite(inputs.data, inputs.victim, &cfg.suite)?;
    if suite.is_empty() {
        return Err(Error::Precondition("no usable suite items".into()));
    }
    let results = run_suite(method, &suite, inputs.victim, cfg)?;
    let aggregate = aggregate(&suite, &results, inputs.victim)?;
    let dataset_fingerprint = inputs.data.fingerprint();
    let records = suite
        .iter()
        .zip(results)
        .enumerate()
        .map(|(index, (it, result))| VideoRecord {
            index,
            source_index: it.source_index,
            source_label: it.source_label,
            target: it.y_t,
            result,
        })
        .collect();
    let manifest = RunManifest {
        run_id: run_id(method, cfg, &dataset_fingerprint, &inputs.victim_fingerprint)?,
        method,
        config: cfg.clone(),
        dataset_fingerprint,
        victim_fingerprint: inputs.victim_fingerprint.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        records,
        aggregate,
    };
    Ok((suite, manifest, warnings))
}

pub const ABLATION_HEADER: &str = "arm,MSE,SSIM,PSNR,l21,FID,Epochs,FR,lll_energy";

/// Runs the paired arms and returns `(comparison csv, summary text, arms)`.
pub fn execute_ablation<C: Classifier<f32> + ?Sized>(
    which: Ablation,
    cfg: &RunConfig,
    data: &Dataset,
    f: &C,
) -> Result<(String, String, Vec<AblationArm>)> {
    cfg.validate()?;
    let (suite, _) = build_suite(data, f, &cfg.suite)?;
    if suite.is_empty() {
        return Err(Error::Precondition("no usable suite items".into()));
    }
    let arms = pool(cfg.workers)?.install(|| run_ablation(which, &suite, f, &cfg.attack))?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut rows = Vec::new();
    for arm in &arms {
        let a = aggregate(&suite, &arm.results, f)?;
        let lll = arm.results.iter().map(|r| r.metrics.lll_energy).sum::<f64>() / arm.results.len() as f64;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}/{},{}\n",
            arm.name,
            fmt(a.mse),
            fmt(a.ssim),
            fmt(a.psnr),
            fmt(a.l21),
            a.fid.map_or("nan".into(), fmt),
            fmt(a.mean_epochs),
            a.fr_numerator,
            a.fr_denominator,
            fmt(lll)
        ));
        rows.push((arm.name.clone(), a));
    }
    let summary = summary_text(&format!("ablation {which:?}"), &rows);
    Ok((csv, summary, arms))
}

/// Loss trace as a standalone SVG line chart.
pub fn loss_trace_svg(trace: &[f64], title: &str) -> String {
    let (w, h, pad) = (480.0, 240.0, 30.0);
    let finite: Vec<f64> = trace.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = trace.len().max(2) - 1;
    let pts: Vec<String> = trace
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
            let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"18\" font-size=\"12\">{title} (min {lo:.4}, max {hi:.4})</text>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n</svg>\n",
        pts.join(" ")
    )
}

/// `|x_a - x_c| * gain`, frames side by side along W, clamped to `[0, 1]`.
pub fn residual_grid(x_a: &Tensor<f32>, x_c: &Tensor<f32>, gain: f32) -> Result<Tensor<f32>> {
    x_a.same_shape(x_c, "residual grid")?;
    let [c, t, w, h] = x_a.dims4()?;
    let mut out = Tensor::zeros(&[c, 1, w * t, h]);
    for ci in 0..c {
        for ti in 0..t {
            for xi in 0..w {
                for yi in 0..h {
                    let i = ((ci * t + ti) * w + xi) * h + yi;
                    let v = ((x_a.data()[i] - x_c.data()[i]).abs() * gain).min(1.0);
                    out.data_mut()[(ci * w * t + ti * w + xi) * h + yi] = v;
                }
            }
        }
    }
    Ok(out)
}
