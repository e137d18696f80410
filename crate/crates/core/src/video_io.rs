//! On-disk video containers and dataset directories.
//!
//! A PNG container is a directory of 8-bit frames `frame_0000.png`, ... plus
//! `video.json` carrying the shape, a nominal frame rate and the channel
//! order. PNG width is the W axis and PNG height the H axis. The raw `.svvt`
//! file keeps unquantised tensors:
//!
//! ```text
//! magic b"SVVT", version u8 (= 1), C, T, W, H as u32 LE, C*T*W*H f32 LE
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::victim::{Dataset, Motion, Sample, SyntheticVideoSpec};

pub const RAW_MAGIC: &[u8; 4] = b"SVVT";
pub const RAW_VERSION: u8 = 1;
const RAW_HEADER: usize = 4 + 1 + 16;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { kind: "svvt", reason: reason.into() }
}

pub fn encode_raw(x: &Tensor<f32>) -> Result<Vec<u8>> {
    let dims = x.dims4()?;
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * x.len());
    out.extend_from_slice(RAW_MAGIC);
    out.push(RAW_VERSION);
    for d in dims {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?.to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(buf: &[u8]) -> Result<Tensor<f32>> {
    if buf.len() < RAW_HEADER || &buf[..4] != RAW_MAGIC {
        return Err(bad("missing SVVT header"));
    }
    if buf[4] != RAW_VERSION {
        return Err(bad(format!("unsupported version {}", buf[4])));
    }
    let dims: Vec<usize> =
        buf[5..RAW_HEADER].chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize).collect();
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows"))?;
    let payload = &buf[RAW_HEADER..];
    if Some(payload.len()) != n.checked_mul(4) {
        return Err(bad(format!("payload of {} bytes for shape {dims:?}", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor::from_vec(&dims, data)
}

pub fn write_raw(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let bytes = encode_raw(x)?;
    fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(Error::io(path))
}

pub fn read_raw(path: &Path) -> Result<Tensor<f32>> {
    decode_raw(&fs::read(path).map_err(Error::io(path))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    /// `[C, T, W, H]`.
    pub shape: [usize; 4],
    pub fps: f64,
    pub channel_order: String,
    pub frames: Vec<String>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Writes the quantised frames of `x` (1 or 3 channels) into `dir`.
pub fn write_png_video(dir: &Path, x: &Tensor<f32>) -> Result<()> {
    let [c, t, w, h] = x.dims4()?;
    let order = match c {
        1 => "gray",
        3 => "rgb",
        _ => return Err(Error::shape(format!("png container stores 1 or 3 channels, got {c}"))),
    };
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let at = |ci: usize, ti: usize, xi: u32, yi: u32| x.data()[((ci * t + ti) * w + xi as usize) * h + yi as usize];
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let name = format!("frame_{ti:04}.png");
        let path = dir.join(&name);
        let saved = if c == 3 {
            ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |xi, yi| {
                Rgb([to_u8(at(0, ti, xi, yi)), to_u8(at(1, ti, xi, yi)), to_u8(at(2, ti, xi, yi))])
            })
            .save(&path)
        } else {
            ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |xi, yi| Luma([to_u8(at(0, ti, xi, yi))])).save(&path)
        };
        saved.map_err(|source| Error::Image { path: path.clone(), source })?;
        frames.push(name);
    }
    let manifest = VideoManifest { shape: [c, t, w, h], fps: 8.0, channel_order: order.into(), frames };
    write_json(&dir.join("video.json"), &manifest)
}

pub fn read_png_video(dir: &Path) -> Result<Tensor<f32>> {
    let m: VideoManifest = read_json(&dir.join("video.json"))?;
    let [c, t, w, h] = m.shape;
    if m.frames.len() != t || !(c == 1 && m.channel_order == "gray" || c == 3 && m.channel_order == "rgb") {
        return Err(Error::Format { kind: "video manifest", reason: format!("{}: inconsistent fields", dir.display()) });
    }
    let mut data = vec![0f32; c * t * w * h];
    for (ti, name) in m.frames.iter().enumerate() {
        let path = dir.join(name);
        let img = image::open(&path).map_err(|source| Error::Image { path: path.clone(), source })?.to_rgb8();
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::Format { kind: "video frame", reason: format!("{} has the wrong size", path.display()) });
        }
        for (xi, yi, px) in img.enumerate_pixels() {
            for ci in 0..c {
                data[((ci * t + ti) * w + xi as usize) * h + yi as usize] = px.0[ci] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&m.shape, data)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, s + "\n").map_err(Error::io(path))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let s = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&s).map_err(|e| Error::Format { kind: "json", reason: format!("{}: {e}", path.display()) })
}

fn clip_dir(root: &Path, split: &str, index: usize) -> PathBuf {
    root.join(split).join(format!("{index:05}"))
}

/// Writes `spec.json`, `index.csv` and one PNG container per clip.
pub fn save_dataset(root: &Path, d: &Dataset) -> Result<()> {
    fs::create_dir_all(root).map_err(Error::io(root))?;
    write_json(&root.join("spec.json"), &d.spec)?;
    let mut index = String::from("split,index,label,class,path\n");
    for (split, samples) in [("train", &d.train), ("val", &d.val)] {
        for (i, s) in samples.iter().enumerate() {
            let dir = clip_dir(root, split, i);
            write_png_video(&dir, &s.video)?;
            let class = d.spec.classes()[s.label].name();
            index.push_str(&format!("{split},{i},{},{class},{split}/{i:05}\n", s.label));
        }
    }
    let p = root.join("index.csv");
    fs::write(&p, index).map_err(Error::io(&p))?;
    let fp = root.join("fingerprint.txt");
    fs::write(&fp, d.fingerprint() + "\n").map_err(Error::io(&fp))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let spec: SyntheticVideoSpec = read_json(&root.join("spec.json"))?;
    let p = root.join("index.csv");
    let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let bad_row = |n: usize| Error::Format { kind: "dataset index", reason: format!("line {n} is malformed") };
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad_row(n + 1));
        }
        let label: usize = cols[2].parse().map_err(|_| bad_row(n + 1))?;
        if label >= spec.num_classes || Motion::ALL.get(label).map(|m| m.name()) != Some(cols[3]) {
            return Err(bad_row(n + 1));
        }
        let sample = Sample { video: read_png_video(&root.join(cols[4]))?, label };
        match cols[0] {
            "train" => train.push(sample),
            "val" => val.push(sample),
            _ => return Err(bad_row(n + 1)),
        }
    }
    let d = Dataset { spec, train, val };
    let fp = root.join("fingerprint.txt");
    if let Ok(want) = fs::read_to_string(&fp) {
        if want.trim() != d.fingerprint() {
            return Err(Error::Integrity(format!("{} does not match its fingerprint", root.display())));
        }
    }
    Ok(d)
}
