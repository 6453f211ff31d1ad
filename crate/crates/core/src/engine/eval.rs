use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::metrics::{psnr, ssim, ColorSpace};
use super::train::PinvPath;
use super::Stage;
use crate::blur::BlurModel;
use crate::data::{reflect_index, PairedDataset};
use crate::error::{Error, Result};
use crate::pinv::{inverse_loss, penrose_chain, PinvModel};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::types::charbonnier;
use crate::vdn::{Ablation, Mode, VdnModel};

pub const REFERENCE_TAG: &str = "paper-reference (not asserted)";
const EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Observed `y` against the simulated `Hx`.
    BlurSim,
    /// `Hx` against `HH⁺Hx`.
    PinvSim,
    /// Sharp `x` against the restored `x*`.
    Deblur,
}

/// Replicates `[C, H, W]` by reflection up to multiples of `m`, adding a batch axis.
pub fn pad_reflect(t: &Tensor<f32>, m: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("pad_reflect needs [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let d = t.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for i in 0..ph {
            let si = reflect_index(i as isize, h);
            for j in 0..pw {
                out.push(d[(ch * h + si) * w + reflect_index(j as isize, w)]);
            }
        }
    }
    Tensor::from_vec(&[1, c, ph, pw], out)
}

/// Top-left `h×w` of `[1, C, H', W']` as `[C, h, w]`.
pub fn crop(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (_, c, ph, pw) = t.dims4()?;
    if h > ph || w > pw {
        return Err(Error::shape("crop larger than tensor"));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let base = (ch * ph + i) * pw;
            out.extend_from_slice(&d[base..base + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
}

/// The inference path: vdn weights plus, when the flags ask for it, frozen blur and pinv models.
pub struct Restorer {
    model: VdnModel,
    store: ParamStore<f32>,
    path: Option<PinvPath>,
}

impl Restorer {
    pub fn new(vdn: &Checkpoint, blur: Option<&Checkpoint>, pinv: Option<&Checkpoint>) -> Result<Self> {
        let (model, store) = vdn.vdn_model()?;
        let path = if model.cfg.flags.needs_pinv() {
            let missing = |s: Stage| Error::Prerequisite(format!("this vdn checkpoint uses H⁺y and needs a {s} checkpoint"));
            let b = blur.ok_or_else(|| missing(Stage::Blur))?;
            let p = pinv.ok_or_else(|| missing(Stage::Pinv))?;
            Some(PinvPath::load(b, p)?)
        } else {
            None
        };
        Ok(Self { model, store, path })
    }

    pub fn frames(&self) -> usize {
        self.model.cfg.frames
    }

    pub fn channels(&self) -> usize {
        self.model.cfg.channels
    }

    pub fn ablation(&self) -> Option<Ablation> {
        Ablation::from_flags(self.model.cfg.flags)
    }

    fn multiple(&self) -> usize {
        let d = self.model.cfg.divisor();
        if self.path.is_some() {
            d.max(8)
        } else {
            d
        }
    }

    /// Restores the centre of a stacked window `[T·C, H, W]`; output `[C, H, W]`, unclamped.
    pub fn restore_window(&self, window: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = window.shape();
        if s.len() != 3 || s[0] != self.frames() * self.channels() {
            return Err(Error::shape(format!(
                "window must be [{}, H, W], got {s:?}",
                self.frames() * self.channels()
            )));
        }
        let y = pad_reflect(window, self.multiple())?;
        let pinv_y = self.path.as_ref().map(|p| p.apply(&y)).transpose()?;
        let mut g = Graph::new();
        let yv = g.input(y);
        let pv = pinv_y.map(|t| g.input(t));
        let out = self.model.forward_restore(&mut g, &self.store, yv, pv, Mode::Eval, None)?;
        crop(g.value(out.x_star), s[1], s[2])
    }

    /// Sliding window over a whole sequence of `[C, H, W]` frames, reflected at the ends;
    /// one clamped output per input frame.
    pub fn restore_sequence(&self, frames: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        if frames.is_empty() {
            return Err(Error::Dataset("no frames to restore".into()));
        }
        let half = (self.frames() / 2) as isize;
        (0..frames.len())
            .map(|k| {
                let mut data = Vec::new();
                for o in -half..=half {
                    let f = &frames[reflect_index(k as isize + o, frames.len())];
                    if f.shape() != frames[0].shape() || f.shape()[0] != self.channels() {
                        return Err(Error::shape(format!("frame shape {:?} does not fit the model", f.shape())));
                    }
                    data.extend_from_slice(f.data());
                }
                let s = frames[0].shape();
                let w = Tensor::from_vec(&[self.frames() * s[0], s[1], s[2]], data)?;
                Ok(clamp01(&self.restore_window(&w)?))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Sequence,
    Mean,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub label: String,
    pub sequence: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub loss: Option<f64>,
    pub tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// `(stage, config hash, weights checksum)` of every checkpoint used.
    pub provenance: Vec<(Stage, String, String)>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn mean(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.kind == RowKind::Mean && r.label == label)
    }

    /// One JSON record per line: a header, then every row.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({
            "kind": "header",
            "mode": self.mode,
            "provenance": self.provenance,
        })
        .to_string();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("plain data"));
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", serde_json::to_value(self.mode).expect("enum").as_str().unwrap_or(""));
        for (stage, hash, sum) in &self.provenance {
            let _ = writeln!(s, "{stage} checkpoint: config {hash} weights {sum}");
        }
        let _ = writeln!(s, "{:<28} {:<20} {:>6} {:>9} {:>8} {:>10}  note", "label", "sequence", "frames", "psnr", "ssim", "loss");
        for r in &self.rows {
            let loss = r.loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<28} {:<20} {:>6} {:>9.4} {:>8.4} {:>10}  {}",
                r.label,
                r.sequence,
                r.frames,
                r.psnr,
                r.ssim,
                loss,
                r.tag.as_deref().unwrap_or("")
            );
        }
        s
    }
}

fn reference(label: &str, psnr: f64, ssim: f64) -> ReportRow {
    ReportRow {
        kind: RowKind::Reference,
        label: label.into(),
        sequence: "-".into(),
        frames: 0,
        psnr,
        ssim,
        loss: None,
        tag: Some(REFERENCE_TAG.into()),
    }
}

/// Full-scale published numbers, attached to reports for context only.
pub fn reference_rows(mode: EvalMode, ablation: Option<Ablation>) -> Vec<ReportRow> {
    match mode {
        EvalMode::BlurSim => vec![reference("full-scale blur simulation", 38.85, 0.995)],
        EvalMode::PinvSim => vec![reference("full-scale pinv simulation", 59.69, 0.999)],
        EvalMode::Deblur => {
            let mut rows = vec![
                reference("full-scale GoPro", 32.31, 0.9369),
                reference("full-scale DVD", 32.95, 0.9444),
                reference("full-scale REDS", 32.91, 0.9262),
            ];
            if let Some(a) = ablation {
                // (DVD, GoPro, REDS) for each lattice point
                let v: [(f64, f64); 3] = match a {
                    Ablation::Baseline => [(31.63, 0.9308), (31.07, 0.9206), (31.50, 0.9056)],
                    Ablation::WInput => [(32.78, 0.9428), (32.14, 0.9351), (32.70, 0.9242)],
                    Ablation::WOutput => [(32.83, 0.9437), (32.20, 0.9358), (32.79, 0.9251)],
                    Ablation::WVdn => [(32.91, 0.9441), (32.27, 0.9364), (32.88, 0.9257)],
                    Ablation::Full => [(32.95, 0.9444), (32.31, 0.9369), (32.91, 0.9262)],
                };
                for (name, (p, s)) in ["DVD", "GoPro", "REDS"].iter().zip(v) {
                    rows.push(reference(&format!("full-scale {name} {}", a.label()), p, s));
                }
            }
            rows
        }
    }
}

pub struct EvalRequest<'a> {
    pub mode: EvalMode,
    pub blur: Option<&'a Checkpoint>,
    pub pinv: Option<&'a Checkpoint>,
    pub vdn: Option<&'a Checkpoint>,
    pub space: ColorSpace,
    pub workers: usize,
}

enum Models {
    Blur(BlurModel, ParamStore<f32>),
    Pinv(BlurModel, ParamStore<f32>, PinvModel, ParamStore<f32>),
    Deblur(Restorer),
}

/// Per frame: `(label, psnr, ssim, loss)` for every row family.
type FrameScores = Vec<(String, f64, f64, f64)>;

fn score_frame(models: &Models, ds: &PairedDataset, seq: usize, k: usize, space: ColorSpace) -> Result<FrameScores> {
    let s = &ds.sequences[seq];
    let x = &s.sharp[k];
    let yc = &s.blur[k];
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let metric = |a: &Tensor<f32>, b: &Tensor<f32>| -> Result<(f64, f64)> { Ok((psnr(a, b, space)?, ssim(a, b)?)) };
    match models {
        Models::Blur(m, st) => {
            let y = pad_reflect(&ds.window(seq, k, m.cfg.frames)?, 8)?;
            let xp = pad_reflect(x, 8)?;
            let c = x.shape()[0];
            let mut g = Graph::new();
            let (yv, xv) = (g.input(y), g.input(xp));
            let ycv = g.slice_channels(yv, m.cfg.frames / 2 * c, c)?;
            let (loss, hx) = m.loss(&mut g, st, yv, ycv, xv, EPS)?;
            let sim = clamp01(&crop(g.value(hx.full()), h, w)?);
            let (p, q) = metric(yc, &sim)?;
            Ok(vec![("blur_sim".into(), p, q, g.value(loss).data()[0] as f64)])
        }
        Models::Pinv(b, bs, pm, ps) => {
            let y = pad_reflect(&ds.window(seq, k, b.cfg.frames)?, 8)?;
            let xp = pad_reflect(x, 8)?;
            let mut g = Graph::new();
            let (yv, xv) = (g.input(y), g.input(xp));
            let chain = penrose_chain(&mut g, (b, bs), (pm, ps), yv, xv)?;
            let loss = inverse_loss(&mut g, &chain.hx, &chain.hhphx, EPS)?;
            let hx = clamp01(&crop(g.value(chain.hx.full()), h, w)?);
            let hhphx = clamp01(&crop(g.value(chain.hhphx.full()), h, w)?);
            let (p, q) = metric(&hx, &hhphx)?;
            Ok(vec![("pinv_sim".into(), p, q, g.value(loss).data()[0] as f64)])
        }
        Models::Deblur(r) => {
            let x_star = r.restore_window(&ds.window(seq, k, r.frames())?)?;
            let label = r.ablation().map(|a| a.label()).unwrap_or("deblur");
            let restored = clamp01(&x_star);
            let (p, q) = metric(x, &restored)?;
            let (ip, iq) = metric(x, yc)?;
            Ok(vec![
                (label.to_string(), p, q, charbonnier(x, &x_star, EPS)?),
                ("identity".to_string(), ip, iq, charbonnier(x, yc, EPS)?),
            ])
        }
    }
}

/// Scores every frame of every sequence, per-sequence and overall means, plus reference rows.
/// Sequences are split over `workers` threads; the output does not depend on the split.
pub fn evaluate(req: &EvalRequest, ds: &PairedDataset) -> Result<EvalReport> {
    let mut provenance = Vec::new();
    let mut note = |c: &Checkpoint| provenance.push((c.meta.stage, c.meta.config_hash.clone(), c.meta.weights_checksum.clone()));
    let need = |c: Option<&'static str>, v: Option<&Checkpoint>| -> Result<()> {
        match (c, v) {
            (Some(s), None) => Err(Error::Prerequisite(format!("{:?} evaluation needs a {s} checkpoint", req.mode))),
            _ => Ok(()),
        }
    };
    let models = match req.mode {
        EvalMode::BlurSim => {
            need(Some("blur"), req.blur)?;
            let c = req.blur.expect("checked");
            note(c);
            let (m, s) = c.blur_model()?;
            Models::Blur(m, s)
        }
        EvalMode::PinvSim => {
            need(Some("blur"), req.blur)?;
            need(Some("pinv"), req.pinv)?;
            let (bc, pc) = (req.blur.expect("checked"), req.pinv.expect("checked"));
            note(bc);
            note(pc);
            let path = PinvPath::load(bc, pc)?;
            Models::Pinv(path.blur, path.blur_store, path.pinv, path.pinv_store)
        }
        EvalMode::Deblur => {
            need(Some("vdn"), req.vdn)?;
            let v = req.vdn.expect("checked");
            let r = Restorer::new(v, req.blur, req.pinv)?;
            if r.path.is_some() {
                note(req.blur.expect("restorer checked"));
                note(req.pinv.expect("restorer checked"));
            }
            note(v);
            Models::Deblur(r)
        }
    };
    if ds.sequences.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let workers = req.workers.clamp(1, ds.sequences.len());
    let per_seq: Vec<Result<Vec<FrameScores>>> = std::thread::scope(|s| {
        let models = &models;
        let handles: Vec<_> = (0..workers)
            .map(|wk| {
                s.spawn(move || {
                    (wk..ds.sequences.len())
                        .step_by(workers)
                        .map(|seq| {
                            (0..ds.sequences[seq].blur.len())
                                .map(|k| score_frame(models, ds, seq, k, req.space))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let done: Vec<Vec<_>> = handles.into_iter().map(|h| h.join().expect("eval thread")).collect();
        let mut parts: Vec<_> = done.into_iter().map(|v| v.into_iter()).collect();
        (0..ds.sequences.len())
            .map(|seq| parts[seq % workers].next().expect("one result per sequence"))
            .collect()
    });

    // label → (psnr sum, ssim sum, loss sum, frames)
    let mut overall: Vec<(String, f64, f64, f64, usize)> = Vec::new();
    let mut rows = Vec::new();
    for (seq, frames) in per_seq.into_iter().enumerate() {
        let frames = frames?;
        let families = frames.first().map(|f| f.len()).unwrap_or(0);
        for fam in 0..families {
            let label = frames[0][fam].0.clone();
            let n = frames.len();
            let (p, q, l) = frames.iter().fold((0.0, 0.0, 0.0), |a, f| (a.0 + f[fam].1, a.1 + f[fam].2, a.2 + f[fam].3));
            rows.push(ReportRow {
                kind: RowKind::Sequence,
                label: label.clone(),
                sequence: ds.sequences[seq].id.clone(),
                frames: n,
                psnr: p / n as f64,
                ssim: q / n as f64,
                loss: Some(l / n as f64),
                tag: None,
            });
            match overall.iter_mut().find(|o| o.0 == label) {
                Some(o) => {
                    o.1 += p;
                    o.2 += q;
                    o.3 += l;
                    o.4 += n;
                }
                None => overall.push((label, p, q, l, n)),
            }
        }
    }
    for (label, p, q, l, n) in overall {
        rows.push(ReportRow {
            kind: RowKind::Mean,
            label,
            sequence: "*".into(),
            frames: n,
            psnr: p / n as f64,
            ssim: q / n as f64,
            loss: Some(l / n as f64),
            tag: None,
        });
    }
    let ablation = match &models {
        Models::Deblur(r) => r.ablation(),
        _ => None,
    };
    rows.extend(reference_rows(req.mode, ablation));
    Ok(EvalReport {
        mode: req.mode,
        provenance,
        rows,
    })
}
