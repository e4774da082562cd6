//! On-disk sequences and tracker runs.
//!
//! A sequence directory holds `meta.txt` (`key=value` lines),
//! `groundtruth.csv` and `frames/NNNNNN.bin`. A frame file is five
//! little-endian `i32` (height, width, channels, modality code, frame
//! index) followed by `f32` pixels, row-major with interleaved channels:
//! three for RGB, six when an auxiliary image follows each RGB triple.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::embedding::{Modality, MultiModalFrame};
use crate::error::{Error, Result};
use crate::harness::metrics::SequenceResult;
use crate::harness::synthetic::{FrameSource, SyntheticSequence};
use crate::harness::tracker::TrackerRun;
use crate::numerics::Tensor;

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn encode_frame(frame: &MultiModalFrame, index: usize) -> Result<Vec<u8>> {
    frame.validate()?;
    let (h, w) = (frame.height(), frame.width());
    let channels = if frame.aux.is_some() { 6 } else { 3 };
    let mut out = Vec::with_capacity(20 + h * w * channels * 4);
    for v in [h, w, channels, frame.modality.code(), index] {
        let v = i32::try_from(v).map_err(|_| Error::Format(format!("header value {v} overflows i32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let rgb = frame.rgb.data();
    for px in 0..h * w {
        for c in 0..3 {
            out.extend_from_slice(&(rgb[px * 3 + c] as f32).to_le_bytes());
        }
        if let Some(aux) = &frame.aux {
            for c in 0..3 {
                out.extend_from_slice(&(aux.data()[px * 3 + c] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decodes a frame file; returns the frame and its stored index.
pub fn decode_frame(bytes: &[u8], text: Option<Vec<f64>>) -> Result<(MultiModalFrame, usize)> {
    if bytes.len() < 20 {
        return Err(Error::Format("frame file shorter than its header".into()));
    }
    let mut header = [0usize; 5];
    for (k, h) in header.iter_mut().enumerate() {
        let v = i32::from_le_bytes(bytes[k * 4..k * 4 + 4].try_into().expect("4 bytes"));
        *h = usize::try_from(v).map_err(|_| Error::Format(format!("negative header field {v}")))?;
    }
    let [h, w, channels, code, index] = header;
    let modality = Modality::from_code(code)?;
    if channels != 3 && channels != 6 {
        return Err(Error::Format(format!("unsupported channel count {channels}")));
    }
    let body = &bytes[20..];
    if body.len() != h * w * channels * 4 {
        return Err(Error::Format(format!(
            "frame body has {} bytes, header implies {}",
            body.len(),
            h * w * channels * 4
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let (rgb, aux) = if channels == 3 {
        (vals, None)
    } else {
        let rgb = vals.chunks(6).flat_map(|p| p[..3].to_vec()).collect();
        let aux = vals.chunks(6).flat_map(|p| p[3..].to_vec()).collect();
        (rgb, Some(aux))
    };
    let frame = MultiModalFrame {
        rgb: Tensor::new(vec![h, w, 3], rgb)?,
        aux: aux.map(|a| Tensor::new(vec![h, w, 3], a)).transpose()?,
        modality,
        text: if modality.has_text() { text } else { None },
    };
    frame.validate()?;
    Ok((frame, index))
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:06}.bin"))
}

/// Writes every frame, the ground truth and the metadata of a sequence.
pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut meta = format!(
        "scenario={}\nmodality={}\nlength={}\nseed={}\nframe_size={}\n",
        seq.scenario,
        seq.modality,
        seq.len(),
        seq.seed,
        seq.size
    );
    if let Some(t) = &seq.text {
        let vals: Vec<String> = t.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(meta, "text={}", vals.join(","));
    }
    fs::write(dir.join("meta.txt"), meta)?;
    let mut gt = String::from("frame,cx,cy,w,h,visibility\n");
    for t in 0..seq.len() {
        let b = seq.gt_box(t);
        let _ = writeln!(gt, "{t},{:?},{:?},{:?},{:?},{:?}", b[0], b[1], b[2], b[3], seq.visibility[t]);
        fs::write(frame_path(dir, t), encode_frame(&seq.frame(t)?, t)?)?;
    }
    fs::write(dir.join("groundtruth.csv"), gt)?;
    Ok(())
}

/// A sequence read lazily from disk.
#[derive(Clone, Debug)]
pub struct DiskSequence {
    pub dir: PathBuf,
    pub id: String,
    pub scenario: String,
    pub modality: Modality,
    pub gt: Vec<[f64; 4]>,
    pub size: (usize, usize),
    pub text: Option<Vec<f64>>,
}

impl DiskSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.txt");
        let meta = fs::read_to_string(&meta_path)?;
        let mut scenario = None;
        let mut modality = None;
        let mut size = None;
        let mut text = None;
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(&meta_path, format!("bad line {line:?}")))?;
            match k.trim() {
                "scenario" => scenario = Some(v.trim().to_string()),
                "modality" => modality = Some(v.trim().parse::<Modality>()?),
                "frame_size" => size = v.trim().parse::<usize>().ok(),
                "text" => {
                    text = Some(
                        v.split(',')
                            .map(|x| x.trim().parse::<f64>().map_err(|_| format_err(&meta_path, "bad text value")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => {}
            }
        }
        let gt_path = dir.join("groundtruth.csv");
        let gt_text = fs::read_to_string(&gt_path)?;
        let mut gt = Vec::new();
        for line in gt_text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .skip(1)
                .take(4)
                .map(|x| x.trim().parse::<f64>().map_err(|_| format_err(&gt_path, format!("bad row {line:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(format_err(&gt_path, format!("short row {line:?}")));
            }
            gt.push([vals[0], vals[1], vals[2], vals[3]]);
        }
        let size = size.ok_or_else(|| format_err(&meta_path, "missing frame_size"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            scenario: scenario.ok_or_else(|| format_err(&meta_path, "missing scenario"))?,
            modality: modality.ok_or_else(|| format_err(&meta_path, "missing modality"))?,
            gt,
            size: (size, size),
            text,
        })
    }
}

impl FrameSource for DiskSequence {
    fn len(&self) -> usize {
        self.gt.len()
    }

    fn frame(&self, t: usize) -> Result<MultiModalFrame> {
        let path = frame_path(&self.dir, t);
        let (frame, index) = decode_frame(&fs::read(&path)?, self.text.clone())?;
        if index != t || frame.modality != self.modality {
            return Err(format_err(&path, "header does not match the sequence"));
        }
        Ok(frame)
    }

    fn gt_box(&self, t: usize) -> [f64; 4] {
        self.gt[t]
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn frame_size(&self) -> (usize, usize) {
        self.size
    }
}

const RUN_HEADER: &str =
    "frame,pred_cx,pred_cy,pred_w,pred_h,gt_cx,gt_cy,gt_w,gt_h,iou,score,tokens,bank_size,dsf_norm";

/// A run file: `#`-prefixed metadata, then one CSV row per frame.
pub fn run_to_csv(result: &SequenceResult) -> String {
    let r = &result.run;
    let mut out = format!(
        "# sequence_id={}\n# scenario={}\n# frame_size={}x{}\n{RUN_HEADER}\n",
        result.sequence_id, result.scenario, result.frame_size.0, result.frame_size.1
    );
    for t in 0..r.boxes.len() {
        let (p, g) = (r.boxes[t], result.gt[t]);
        let _ = writeln!(
            out,
            "{t},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{:?}",
            p[0],
            p[1],
            p[2],
            p[3],
            g[0],
            g[1],
            g[2],
            g[3],
            r.ious[t],
            r.scores[t],
            r.token_counts[t],
            r.bank_trace[t].len(),
            r.dsf_norms[t]
        );
    }
    out
}

/// Reads a run file back. The bank trace keeps only its length.
pub fn run_from_csv(text: &str) -> Result<SequenceResult> {
    let bad = |msg: String| Error::Format(format!("run file: {msg}"));
    let mut id = None;
    let mut scenario = None;
    let mut size = None;
    let mut run = TrackerRun::default();
    let mut gt = Vec::new();
    let mut header_seen = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(meta) = line.strip_prefix('#') {
            let (k, v) = meta.trim().split_once('=').ok_or_else(|| bad(format!("bad metadata {line:?}")))?;
            match k {
                "sequence_id" => id = Some(v.to_string()),
                "scenario" => scenario = Some(v.to_string()),
                "frame_size" => {
                    let (w, h) = v.split_once('x').ok_or_else(|| bad(format!("bad frame size {v:?}")))?;
                    size = Some((
                        w.parse().map_err(|_| bad(format!("bad width {w:?}")))?,
                        h.parse().map_err(|_| bad(format!("bad height {h:?}")))?,
                    ));
                }
                _ => {}
            }
            continue;
        }
        if !header_seen {
            if line.trim() != RUN_HEADER {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(bad(format!("row has {} fields", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("bad integer {s:?}")));
        run.boxes.push([num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?]);
        gt.push([num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?]);
        run.ious.push(num(f[9])?);
        run.scores.push(num(f[10])?);
        run.token_counts.push(int(f[11])?);
        run.bank_trace.push((0..int(f[12])?).collect());
        run.dsf_norms.push(num(f[13])?);
    }
    Ok(SequenceResult {
        sequence_id: id.ok_or_else(|| bad("missing sequence_id".into()))?,
        scenario: scenario.ok_or_else(|| bad("missing scenario".into()))?,
        run,
        gt,
        frame_size: size.ok_or_else(|| bad("missing frame_size".into()))?,
    })
}
