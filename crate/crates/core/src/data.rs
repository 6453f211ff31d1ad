//! Dataset ingestion (GoPro, DVD and REDS layouts), manifests, synthetic
//! motion-blur generation, augmentation and batch sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{gaussian_noise, NoiseSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Gopro,
    Dvd,
    Reds,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub frame_index: usize,
    pub blur_path: PathBuf,
    pub sharp_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Skipped frames, one line each.
    pub warnings: Vec<String>,
}

impl Manifest {
    fn sort(&mut self) {
        self.entries.sort();
    }

    /// Entries grouped per sequence, in manifest order.
    pub fn sequences(&self) -> Vec<(&str, Vec<&ManifestEntry>)> {
        let mut map: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(&e.sequence_id).or_default().push(e);
        }
        map.into_iter().collect()
    }

    /// Entries whose sequence id starts with `split/`.
    pub fn split(&self, split: &str) -> Manifest {
        let prefix = format!("{split}/");
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.sequence_id.starts_with(&prefix))
                .cloned()
                .collect(),
            warnings: Vec::new(),
        }
    }

    /// Tab-separated, paths relative to the manifest's directory when possible.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for e in &self.entries {
            let sharp = e.sharp_path.as_deref().map(rel).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.sequence_id, e.frame_index, rel(&e.blur_path), sharp));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Dataset(format!("{}:{}: expected 4 fields", path.display(), n + 1)));
            }
            let frame_index = f[1]
                .parse()
                .map_err(|_| Error::Dataset(format!("{}:{}: bad frame index {:?}", path.display(), n + 1, f[1])))?;
            entries.push(ManifestEntry {
                sequence_id: f[0].to_string(),
                frame_index,
                blur_path: base.join(f[2]),
                sharp_path: (!f[3].is_empty()).then(|| base.join(f[3])),
            });
        }
        if entries.is_empty() {
            return Err(Error::Dataset(format!("{} lists no frames", path.display())));
        }
        Ok(Self {
            entries,
            warnings: Vec::new(),
        })
    }
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn frames_in(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
            continue;
        }
        if let Some(idx) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.push((idx, p));
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Builds a manifest from a dataset tree; frames without a sharp counterpart are skipped.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let (splits, blur_name, sharp_name): (&[&str], &str, &str) = match layout {
        Layout::Gopro => (&["train", "test"], "blur", "sharp"),
        Layout::Dvd => (&["train", "test"], "input", "GT"),
        Layout::Reds => (&["train", "val"], "blur", "sharp"),
    };
    // (sequence id, blur dir, sharp dir)
    let mut seqs = Vec::new();
    for split in splits {
        let sd = root.join(split);
        if !sd.is_dir() {
            continue;
        }
        match layout {
            Layout::Gopro | Layout::Dvd => {
                for seq in subdirs(&sd)? {
                    let id = format!("{split}/{}", dir_name(&seq));
                    seqs.push((id, seq.join(blur_name), seq.join(sharp_name)));
                }
            }
            Layout::Reds => {
                let bd = sd.join(blur_name);
                if !bd.is_dir() {
                    continue;
                }
                for seq in subdirs(&bd)? {
                    let name = dir_name(&seq);
                    seqs.push((format!("{split}/{name}"), seq, sd.join(sharp_name).join(&name)));
                }
            }
        }
    }
    let mut m = Manifest::default();
    for (id, blur_dir, sharp_dir) in seqs {
        if !blur_dir.is_dir() {
            continue;
        }
        let blind = !sharp_dir.is_dir();
        for (idx, blur_path) in frames_in(&blur_dir)? {
            let sharp_path = sharp_dir.join(blur_path.file_name().expect("file"));
            if blind {
                m.entries.push(ManifestEntry {
                    sequence_id: id.clone(),
                    frame_index: idx,
                    blur_path,
                    sharp_path: None,
                });
            } else if sharp_path.is_file() {
                m.entries.push(ManifestEntry {
                    sequence_id: id.clone(),
                    frame_index: idx,
                    blur_path,
                    sharp_path: Some(sharp_path),
                });
            } else {
                let w = format!("{id}: no sharp counterpart for {}", blur_path.display());
                log::warn!("{w}");
                m.warnings.push(w);
            }
        }
    }
    if m.entries.is_empty() {
        return Err(Error::Dataset(format!("no frame pairs found under {}", root.display())));
    }
    m.sort();
    log::info!("scanned {}: {} frames in {} sequences", root.display(), m.entries.len(), m.sequences().len());
    Ok(m)
}

/// Reads an 8-bit PNG as `[3, H, W]` in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes `[C, H, W]` (C = 1 or 3) as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape(format!("png needs [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = img.data();
    let mut buf = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for k in 0..3 {
            buf[3 * i + k] = q(d[(k % c) * h * w + i]);
        }
    }
    let im = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    im.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    TranslatingTexture,
    MovingPolygons,
    Static,
}

/// Motion directions drawn per clip (per polygon for `moving_polygons`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    /// The eight compass directions.
    #[default]
    Compass,
    /// Left or right.
    Horizontal,
}

impl Motion {
    fn draw(self, rng: &mut ChaCha8Rng) -> (isize, isize) {
        match self {
            Motion::Compass => DIRECTIONS[rng.gen_range(0..8)],
            Motion::Horizontal => DIRECTIONS[4 * rng.gen_range(0..2)],
        }
    }
}

/// Synthetic motion-blur set: each blurred frame averages `N` high-rate frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub pattern: Pattern,
    pub high_rate_frames_per_blur: usize,
    /// Integer pixels per high-rate frame, per axis.
    pub velocity: usize,
    pub motion: Motion,
    pub noise: NoiseSpec,
    /// Blurred frames per sequence.
    pub clip_length: usize,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub seed: u64,
    pub clips: usize,
    /// The last `test_clips` sequences go to the test split.
    pub test_clips: usize,
    pub channels: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::TranslatingTexture,
            high_rate_frames_per_blur: 9,
            velocity: 1,
            motion: Motion::Compass,
            noise: NoiseSpec::default(),
            clip_length: 5,
            image_size: [64, 64],
            seed: 0,
            clips: 64,
            test_clips: 8,
            channels: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        let n = self.high_rate_frames_per_blur;
        if n == 0 || n % 2 == 0 {
            return Err(Error::contract(format!("high-rate frames per blur must be odd, got {n}")));
        }
        let [h, w] = self.image_size;
        if h < 4 || w < 4 {
            return Err(Error::contract("synthetic frames must be at least 4×4"));
        }
        if self.velocity * n > h.min(w) / 4 {
            return Err(Error::contract(format!(
                "velocity {} × {n} frames exceeds a quarter of the {h}×{w} frame",
                self.velocity
            )));
        }
        if self.clip_length == 0 || self.clips == 0 || self.test_clips > self.clips || self.channels == 0 {
            return Err(Error::contract("synthetic counts must be positive, with test clips ≤ clips"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSequence {
    /// `split/clip_NNN`.
    pub id: String,
    pub blur: Vec<Tensor<f32>>,
    pub sharp: Vec<Tensor<f32>>,
    /// Exact circular-convolution kernel linking sharp to blurred frames (pure translation only).
    pub kernel: Option<Tensor<f64>>,
}

const DIRECTIONS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// Random periodic texture `[C, H, W]`: a few sinusoids plus wrapped rectangles.
fn texture(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut data = vec![0.5f32; c * h * w];
    let tau = std::f64::consts::TAU;
    for _ in 0..3 {
        let (fy, fx) = (rng.gen_range(-4i32..=4) as f64, rng.gen_range(1i32..=6) as f64);
        for ch in 0..c {
            let (amp, ph) = (rng.gen_range(0.03..0.08), rng.gen_range(0.0..tau));
            for i in 0..h {
                for j in 0..w {
                    let t = tau * (fy * i as f64 / h as f64 + fx * j as f64 / w as f64) + ph;
                    data[(ch * h + i) * w + j] += (amp * t.sin()) as f32;
                }
            }
        }
    }
    for _ in 0..4 {
        let (top, left) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, rw) = (rng.gen_range(h / 8..=h / 3), rng.gen_range(w / 8..=w / 3));
        for ch in 0..c {
            let v = rng.gen_range(-0.2..0.2f32);
            for i in 0..rh {
                for j in 0..rw {
                    data[(ch * h + (top + i) % h) * w + (left + j) % w] += v;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.05, 0.95));
    Tensor::from_vec(&[c, h, w], data).expect("sized")
}

/// `x[p − (dy, dx)]` with wrap-around.
fn roll(x: &Tensor<f32>, dy: isize, dx: isize) -> Tensor<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![0.0f32; d.len()];
    for ch in 0..c {
        for i in 0..h {
            let si = (i as isize - dy).rem_euclid(h as isize) as usize;
            for j in 0..w {
                let sj = (j as isize - dx).rem_euclid(w as isize) as usize;
                out[(ch * h + i) * w + j] = d[(ch * h + si) * w + sj];
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("same shape")
}

fn mean_frames(frames: &[Tensor<f32>]) -> Tensor<f32> {
    let n = frames.len() as f32;
    let mut acc = vec![0.0f32; frames[0].len()];
    for f in frames {
        acc.iter_mut().zip(f.data()).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::from_vec(frames[0].shape(), acc).expect("same shape")
}

/// Line kernel `L×L`, `L = (N − 1)·v + 1`, with `N` taps of weight `1/N` along `dir`.
/// `N` must be odd so the line is centred.
pub fn translation_kernel(n: usize, velocity: usize, dir: (isize, isize)) -> Tensor<f64> {
    assert!(n % 2 == 1, "translation kernel needs an odd tap count, got {n}");
    let l = (n - 1) * velocity + 1;
    let cc = (l / 2) as isize;
    let c = (n / 2) as isize;
    let mut k = vec![0.0; l * l];
    for t in 0..n as isize {
        let off = (t - c) * velocity as isize;
        let (a, b) = (cc + off * dir.0, cc + off * dir.1);
        k[a as usize * l + b as usize] += 1.0 / n as f64;
    }
    Tensor::from_vec(&[l, l], k).expect("sized")
}

/// Blurs a periodic base image translating by `velocity·dir` per high-rate frame.
/// Returns `(blurred, sharp)` per output frame, noise-free.
pub fn translate_sequence(
    base: &Tensor<f32>,
    dir: (isize, isize),
    velocity: usize,
    n: usize,
    frames: usize,
) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
    let v = velocity as isize;
    let at = |j: usize| roll(base, j as isize * v * dir.0, j as isize * v * dir.1);
    (0..frames)
        .map(|t| {
            let hr: Vec<_> = (0..n).map(|k| at(t * n + k)).collect();
            (mean_frames(&hr), hr[n / 2].clone())
        })
        .unzip()
}

struct Polygon {
    centre: (f64, f64),
    vertices: Vec<(f64, f64)>,
    colour: Vec<f32>,
    dir: (isize, isize),
}

impl Polygon {
    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, motion: Motion) -> Self {
        let k = rng.gen_range(3..=6);
        let r = rng.gen_range(h.min(w) as f64 / 8.0..h.min(w) as f64 / 4.0);
        let rot = rng.gen_range(0.0..std::f64::consts::TAU);
        let vertices = (0..k)
            .map(|i| {
                let a = rot + std::f64::consts::TAU * i as f64 / k as f64;
                let rr = r * rng.gen_range(0.7..1.0);
                (rr * a.sin(), rr * a.cos())
            })
            .collect();
        Self {
            centre: (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)),
            vertices,
            colour: (0..c).map(|_| rng.gen_range(0.05..0.95)).collect(),
            dir: motion.draw(rng),
        }
    }

    /// Even-odd rule on the wrapped offset from the centre.
    fn contains(&self, p: (f64, f64), shift: (f64, f64), h: f64, w: f64) -> bool {
        let wrap = |d: f64, n: f64| (d + n / 2.0).rem_euclid(n) - n / 2.0;
        let y = wrap(p.0 - self.centre.0 - shift.0, h);
        let x = wrap(p.1 - self.centre.1 - shift.1, w);
        let vs = &self.vertices;
        let mut inside = false;
        for i in 0..vs.len() {
            let (a, b) = (vs[i], vs[(i + 1) % vs.len()]);
            if (a.0 > y) != (b.0 > y) && x < (b.1 - a.1) * (y - a.0) / (b.0 - a.0) + a.1 {
                inside = !inside;
            }
        }
        inside
    }
}

fn polygon_frame(bg: &Tensor<f32>, polys: &[Polygon], j: usize, velocity: usize) -> Tensor<f32> {
    let (c, h, w) = (bg.shape()[0], bg.shape()[1], bg.shape()[2]);
    let mut out = bg.clone();
    let d = out.data_mut();
    for poly in polys {
        let s = (j * velocity) as f64;
        let shift = (s * poly.dir.0 as f64, s * poly.dir.1 as f64);
        for i in 0..h {
            for k in 0..w {
                if poly.contains((i as f64 + 0.5, k as f64 + 0.5), shift, h as f64, w as f64) {
                    for ch in 0..c {
                        d[(ch * h + i) * w + k] = poly.colour[ch];
                    }
                }
            }
        }
    }
    out
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One synthetic sequence, determined by `(spec.seed, index)` alone.
pub fn synth_sequence(spec: &SynthSpec, index: usize) -> Result<SynthSequence> {
    spec.validate()?;
    let mut rng = clip_rng(spec.seed, index);
    let [h, w] = spec.image_size;
    let (c, n, t) = (spec.channels, spec.high_rate_frames_per_blur, spec.clip_length);
    let base = texture(&mut rng, c, h, w);
    let (blur, sharp, kernel) = match spec.pattern {
        Pattern::Static => (vec![base.clone(); t], vec![base; t], None),
        Pattern::TranslatingTexture => {
            let dir = spec.motion.draw(&mut rng);
            let (b, s) = translate_sequence(&base, dir, spec.velocity, n, t);
            (b, s, Some(translation_kernel(n, spec.velocity, dir)))
        }
        Pattern::MovingPolygons => {
            let bg = base.map(|v| 0.5 + 0.4 * (v - 0.5));
            let polys: Vec<_> = (0..rng.gen_range(2..=3)).map(|_| Polygon::random(&mut rng, c, h, w, spec.motion)).collect();
            let (b, s) = (0..t)
                .map(|f| {
                    let hr: Vec<_> = (0..n).map(|k| polygon_frame(&bg, &polys, f * n + k, spec.velocity)).collect();
                    (mean_frames(&hr), hr[n / 2].clone())
                })
                .unzip();
            (b, s, None)
        }
    };
    let noise_seed: u64 = rng.gen();
    let blur = blur
        .into_iter()
        .enumerate()
        .map(|(f, b)| {
            if spec.noise.sigma == 0.0 {
                return b;
            }
            let nz = gaussian_noise(b.len(), spec.noise.sigma, noise_seed.wrapping_add(f as u64));
            let data = b.data().iter().zip(&nz).map(|(v, e)| (v + e).clamp(0.0, 1.0)).collect();
            Tensor::from_vec(b.shape(), data).expect("same shape")
        })
        .collect();
    let split = if index + spec.test_clips >= spec.clips { "test" } else { "train" };
    Ok(SynthSequence {
        id: format!("{split}/clip_{index:03}"),
        blur,
        sharp,
        kernel,
    })
}

/// Every sequence of the spec; generation is per-clip seeded and so order-independent.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<SynthSequence>> {
    spec.validate()?;
    (0..spec.clips).map(|i| synth_sequence(spec, i)).collect()
}

/// Writes `out/<split>/<clip>/{blur,sharp}/NNNNNN.png`, `kernel.json` when known,
/// and `out/manifest.tsv`.
pub fn write_synth(out: &Path, seqs: &[SynthSequence], force: bool) -> Result<Manifest> {
    if out.exists() {
        let nonempty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if nonempty && !force {
            return Err(Error::contract(format!("{} is not empty (use --force)", out.display())));
        }
    }
    let mut m = Manifest::default();
    for s in seqs {
        let dir = out.join(&s.id);
        let (bd, sd) = (dir.join("blur"), dir.join("sharp"));
        for d in [&bd, &sd] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, (b, x)) in s.blur.iter().zip(&s.sharp).enumerate() {
            let name = format!("{i:06}.png");
            save_png(&bd.join(&name), b)?;
            save_png(&sd.join(&name), x)?;
            m.entries.push(ManifestEntry {
                sequence_id: s.id.clone(),
                frame_index: i,
                blur_path: bd.join(&name),
                sharp_path: Some(sd.join(&name)),
            });
        }
        if let Some(k) = &s.kernel {
            let json = serde_json::json!({ "shape": k.shape(), "data": k.data() });
            let p = dir.join("kernel.json");
            fs::write(&p, json.to_string()).map_err(|e| Error::io(&p, e))?;
        }
    }
    m.sort();
    m.write_tsv(&out.join("manifest.tsv"))?;
    Ok(m)
}

/// Reads a `kernel.json` written by [`write_synth`].
pub fn read_kernel(path: &Path) -> Result<Tensor<f64>> {
    #[derive(Deserialize)]
    struct K {
        shape: Vec<usize>,
        data: Vec<f64>,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let k: K = serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Tensor::from_vec(&k.shape, k.data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Square crop side; `None` keeps the full frame.
    pub crop: Option<usize>,
    pub flip_h: bool,
    pub flip_v: bool,
    pub transpose: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: Some(128),
            flip_h: true,
            flip_v: true,
            transpose: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            crop: None,
            flip_h: false,
            flip_v: false,
            transpose: false,
        }
    }
}

/// One draw of the geometric transform, shared by both members of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDecision {
    pub top: usize,
    pub left: usize,
    pub size: (usize, usize),
    pub flip_h: bool,
    pub flip_v: bool,
    pub transpose: bool,
}

impl AugmentDecision {
    pub fn draw(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut impl Rng) -> Result<Self> {
        let (ch, cw) = match cfg.crop {
            Some(c) if c > h || c > w => {
                return Err(Error::contract(format!("crop {c} exceeds frame {h}×{w}")));
            }
            Some(c) => (c, c),
            None => (h, w),
        };
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        let flip_h = cfg.flip_h && rng.gen_bool(0.5);
        let flip_v = cfg.flip_v && rng.gen_bool(0.5);
        let transpose = cfg.transpose && rng.gen_bool(0.5) && ch == cw;
        Ok(Self {
            top,
            left,
            size: (ch, cw),
            flip_h,
            flip_v,
            transpose,
        })
    }

    /// Source pixel for output position `(i, j)`.
    pub fn source(&self, i: usize, j: usize) -> (usize, usize) {
        let (ch, cw) = self.size;
        let (mut a, mut b) = if self.transpose { (j, i) } else { (i, j) };
        if self.flip_v {
            a = ch - 1 - a;
        }
        if self.flip_h {
            b = cw - 1 - b;
        }
        (self.top + a, self.left + b)
    }

    pub fn output_size(&self) -> (usize, usize) {
        if self.transpose {
            (self.size.1, self.size.0)
        } else {
            self.size
        }
    }

    /// Applies the transform to `[C, H, W]`.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = x.shape();
        if s.len() != 3 || s[1] < self.top + self.size.0 || s[2] < self.left + self.size.1 {
            return Err(Error::shape(format!("augment of {s:?} with {self:?}")));
        }
        let (c, w) = (s[0], s[2]);
        let (oh, ow) = self.output_size();
        let d = x.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let (si, sj) = self.source(i, j);
                    out.push(d[(ch * s[1] + si) * w + sj]);
                }
            }
        }
        Tensor::from_vec(&[c, oh, ow], out)
    }
}

/// Same random crop, flips and transpose on blur (`[T·C, H, W]`) and sharp (`[C, H, W]`).
pub fn augment(
    cfg: &AugmentConfig,
    blur: &Tensor<f32>,
    sharp: &Tensor<f32>,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (bs, ss) = (blur.shape(), sharp.shape());
    if bs.len() != 3 || ss.len() != 3 || bs[1..] != ss[1..] {
        return Err(Error::shape(format!("augment pair {bs:?} / {ss:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = AugmentDecision::draw(cfg, bs[1], bs[2], &mut rng)?;
    Ok((d.apply(blur)?, d.apply(sharp)?))
}

/// Reflection without edge repetition: `−1 → 1`, `len → len − 2`.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSequence {
    pub id: String,
    pub blur: Vec<Tensor<f32>>,
    pub sharp: Vec<Tensor<f32>>,
}

/// Frames held in memory, `[C, H, W]` each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedDataset {
    pub sequences: Vec<PairedSequence>,
}

impl PairedDataset {
    pub fn from_synth(seqs: &[SynthSequence]) -> Self {
        Self {
            sequences: seqs
                .iter()
                .map(|s| PairedSequence {
                    id: s.id.clone(),
                    blur: s.blur.clone(),
                    sharp: s.sharp.clone(),
                })
                .collect(),
        }
    }

    /// Loads every pair of the manifest, decoding PNGs on `workers` threads.
    pub fn load(manifest: &Manifest, workers: usize) -> Result<Self> {
        let jobs: Vec<&ManifestEntry> = manifest.entries.iter().collect();
        let workers = workers.clamp(1, jobs.len().max(1));
        let chunk = jobs.len().div_ceil(workers);
        let decoded: Vec<Result<Vec<(Tensor<f32>, Tensor<f32>)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk.max(1))
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|e| {
                                let sp = e.sharp_path.as_ref().ok_or_else(|| {
                                    Error::Dataset(format!("{} frame {} has no sharp frame", e.sequence_id, e.frame_index))
                                })?;
                                Ok((load_png(&e.blur_path)?, load_png(sp)?))
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader thread")).collect()
        });
        let mut pairs = Vec::with_capacity(jobs.len());
        for part in decoded {
            pairs.extend(part?);
        }
        let mut ds = PairedDataset::default();
        for (e, (b, x)) in jobs.iter().zip(pairs) {
            if ds.sequences.last().map(|s| s.id != e.sequence_id).unwrap_or(true) {
                ds.sequences.push(PairedSequence {
                    id: e.sequence_id.clone(),
                    blur: Vec::new(),
                    sharp: Vec::new(),
                });
            }
            let seq = ds.sequences.last_mut().expect("pushed");
            if b.shape() != x.shape() || seq.blur.first().map(|f| f.shape() != b.shape()).unwrap_or(false) {
                return Err(Error::Dataset(format!("{}: frame sizes differ", e.sequence_id)));
            }
            seq.blur.push(b);
            seq.sharp.push(x);
        }
        Ok(ds)
    }

    pub fn pairs(&self) -> usize {
        self.sequences.iter().map(|s| s.blur.len()).sum()
    }

    /// `(C, H, W)` of the first frame.
    pub fn frame_shape(&self) -> Result<(usize, usize, usize)> {
        let f = self
            .sequences
            .first()
            .and_then(|s| s.blur.first())
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        let s = f.shape();
        Ok((s[0], s[1], s[2]))
    }

    /// Blurred frames `centre − T/2 ..= centre + T/2` (reflected at the ends), stacked to `[T·C, H, W]`.
    pub fn window(&self, seq: usize, centre: usize, t: usize) -> Result<Tensor<f32>> {
        let s = &self.sequences[seq];
        let half = (t / 2) as isize;
        let first = s.blur[centre].shape();
        let mut data = Vec::with_capacity(t * s.blur[centre].len());
        for o in -half..=half {
            data.extend_from_slice(s.blur[reflect_index(centre as isize + o, s.blur.len())].data());
        }
        Tensor::from_vec(&[t * first[0], first[1], first[2]], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub frames: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub workers: usize,
    pub queue_depth: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            frames: 5,
            augment: AugmentConfig {
                crop: Some(32),
                ..AugmentConfig::default()
            },
            seed: 0,
            workers: 1,
            queue_depth: 4,
        }
    }
}

/// `y`: `[B, T·C, h, w]` blurred windows; `x`: `[B, C, h, w]` sharp centre frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub y: Tensor<f32>,
    pub x: Tensor<f32>,
}

/// Batch for `step`, drawn with replacement; depends only on `(cfg.seed, step)`.
pub fn make_batch(ds: &PairedDataset, cfg: &SamplerConfig, step: u64) -> Result<Batch> {
    let total = ds.pairs();
    if total == 0 {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.frames % 2 == 0 {
        return Err(Error::contract("batch size ≥ 1 and an odd window length are required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let (mut ys, mut xs) = (Vec::new(), Vec::new());
    for _ in 0..cfg.batch_size {
        let mut k = rng.gen_range(0..total);
        let mut seq = 0;
        while k >= ds.sequences[seq].blur.len() {
            k -= ds.sequences[seq].blur.len();
            seq += 1;
        }
        let y = ds.window(seq, k, cfg.frames)?;
        let x = &ds.sequences[seq].sharp[k];
        let (ya, xa) = augment(&cfg.augment, &y, x, rng.gen())?;
        let batched = |t: Tensor<f32>| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)
        };
        ys.push(batched(ya)?);
        xs.push(batched(xa)?);
    }
    Ok(Batch {
        y: Tensor::stack_batch(&ys)?,
        x: Tensor::stack_batch(&xs)?,
    })
}

/// Background batch producer for consecutive steps. Worker `k` builds every
/// step `≡ k (mod workers)` into its own bounded queue, so order is fixed.
pub struct Prefetcher {
    queues: Vec<Receiver<Result<Batch>>>,
    next: u64,
    start: u64,
    handles: Vec<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn new(ds: Arc<PairedDataset>, cfg: SamplerConfig, start: u64, end: u64) -> Self {
        let workers = cfg.workers.max(1) as u64;
        let mut queues = Vec::new();
        let mut handles = Vec::new();
        for k in 0..workers {
            let (tx, rx) = sync_channel(cfg.queue_depth.max(1));
            let (ds, cfg) = (ds.clone(), cfg.clone());
            handles.push(std::thread::spawn(move || {
                let mut step = start + k;
                while step < end {
                    if tx.send(make_batch(&ds, &cfg, step)).is_err() {
                        return;
                    }
                    step += workers;
                }
            }));
            queues.push(rx);
        }
        Self {
            queues,
            next: start,
            start,
            handles,
        }
    }

    /// Returns `(step, batch)`, or `None` once the range is exhausted.
    pub fn next_batch(&mut self) -> Option<(u64, Result<Batch>)> {
        let q = ((self.next - self.start) % self.queues.len() as u64) as usize;
        let b = self.queues[q].recv().ok()?;
        let step = self.next;
        self.next += 1;
        Some((step, b))
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.queues.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
