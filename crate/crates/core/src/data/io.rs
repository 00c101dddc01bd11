//! On-disk dataset layout: binary netpbm frames and masks, PFM response maps,
//! a CSV of sentence annotations and a JSON split manifest.
//!
//! ```text
//! <root>/world.json
//! <root>/manifest.json            {"train": [...], "test": [...]}
//! <root>/annotations.csv          video_id,instance_id,sentence
//! <root>/videos/<id>/actors.json
//! <root>/videos/<id>/frame_00000.ppm
//! <root>/videos/<id>/flow_x_00000.pgm, flow_y_00000.pgm
//! <root>/videos/<id>/mask_<instance>.pgm
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::shapeworld::{
    generate_videos, samples_of, Actor, AnnotatedSample, ShapeWorldSpec, Split, Video, FLOW_STEPS,
};
use crate::error::{config_err, input_err, Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::{Map, Mask, Volume};
use crate::videoenc::{StreamKind, VideoClip};

const FLOW_ZERO: f64 = 128.0;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// A decoded 8-bit netpbm image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Parses `P5` (gray) or `P6` (RGB) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported netpbm magic {m:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("bad netpbm {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} is not 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * channels;
    if bytes.len() < start + need {
        return Err(Error::Format(format!(
            "raster has {} bytes, expected {need}",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: bytes[start..start + need].to_vec(),
    })
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_pnm(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_pnm(img))
}

fn gray(img: Image, path: &Path) -> Result<Image> {
    if img.channels != 1 {
        return Err(Error::Format(format!(
            "{} is not a grayscale image",
            path.display()
        )));
    }
    Ok(img)
}

/// Masks are stored as 0/255 grayscale.
pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_image(
        path,
        &Image {
            width: m.width,
            height: m.height,
            channels: 1,
            data: m.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        },
    )
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = gray(read_image(path)?, path)?;
    let data = img
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            v => Err(Error::Format(format!(
                "{}: mask value {v} is neither 0 nor 255",
                path.display()
            ))),
        })
        .collect::<Result<_>>()?;
    Ok(Mask {
        height: img.height,
        width: img.width,
        data,
    })
}

/// Label maps are stored as grayscale with 0 for background and `class + 1` elsewhere.
pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    let data = l
        .data
        .iter()
        .map(|c| match c {
            None => Ok(0),
            Some(c) if *c < 255 => Ok(*c as u8 + 1),
            Some(c) => Err(input_err!("class {c} does not fit an 8-bit label map")),
        })
        .collect::<Result<_>>()?;
    write_image(
        path,
        &Image {
            width: l.width,
            height: l.height,
            channels: 1,
            data,
        },
    )
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = gray(read_image(path)?, path)?;
    Ok(LabelMap {
        height: img.height,
        width: img.width,
        data: img
            .data
            .iter()
            .map(|&v| v.checked_sub(1).map(usize::from))
            .collect(),
    })
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn encode_pfm(m: &Map<f32>) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", m.size, m.size).into_bytes();
    for i in (0..m.size).rev() {
        for j in 0..m.size {
            out.extend_from_slice(&m.get(i, j).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Map<f32>> {
    let mut lines = Vec::new();
    let mut pos = 0;
    while lines.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated PFM header".into()))?;
        lines.push(
            String::from_utf8_lossy(&bytes[pos..pos + end])
                .trim()
                .to_owned(),
        );
        pos += end + 1;
    }
    if lines[0] != "Pf" {
        return Err(Error::Format(format!("PFM magic {:?} is not Pf", lines[0])));
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format("bad PFM size".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(Error::Format(format!(
            "PFM size {:?} is not square",
            lines[1]
        )));
    }
    let scale: f64 = lines[2]
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Format("only little-endian PFM is supported".into()));
    }
    let n = dims[0];
    if bytes.len() - pos != 4 * n * n {
        return Err(Error::Format(format!(
            "PFM raster has {} bytes, expected {}",
            bytes.len() - pos,
            4 * n * n
        )));
    }
    let mut out = Map::<f32>::zeros(n);
    for (k, c) in bytes[pos..].chunks_exact(4).enumerate() {
        let (row, j) = (n - 1 - k / n, k % n);
        out.data[row * n + j] = f32::from_le_bytes(c.try_into().expect("4 bytes"));
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, m: &Map<f32>) -> Result<()> {
    write_bytes(path, &encode_pfm(m))
}

pub fn read_pfm(path: &Path) -> Result<Map<f32>> {
    decode_pfm(&read_bytes(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub video_id: String,
    pub instance_id: String,
    pub sentence: String,
}

pub const ANNOTATION_HEADER: [&str; 3] = ["video_id", "instance_id", "sentence"];

pub fn write_annotations<W: Write>(out: W, rows: &[AnnotationRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out);
    w.write_record(ANNOTATION_HEADER)?;
    for r in rows {
        w.write_record(
            [&r.video_id, &r.instance_id, &format!("\"{}\"", r.sentence)].map(|s| s.as_str()),
        )
        .map_err(Error::from)?;
    }
    w.flush()
        .map_err(|e| Error::io(Path::new("<annotations>"), e))
}

/// Reads `video_id,instance_id,sentence` rows; the sentence may be quoted.
pub fn read_annotations<R: Read>(input: R) -> Result<Vec<AnnotationRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().map(str::trim).ne(ANNOTATION_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be {}", ANNOTATION_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let sentence = rec[2].trim().trim_matches('"').to_owned();
        if sentence.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty sentence".into(),
            });
        }
        out.push(AnnotationRow {
            video_id: rec[0].to_owned(),
            instance_id: rec[1].to_owned(),
            sentence,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn frame_name(prefix: &str, t: usize, ext: &str) -> String {
    format!("{prefix}_{t:05}.{ext}")
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn flow_to_u8(v: f32) -> u8 {
    (FLOW_ZERO + FLOW_STEPS * v as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

fn write_video(dir: &Path, v: &Video) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let actors = serde_json::to_vec_pretty(&v.actors)?;
    write_bytes(&dir.join("actors.json"), &actors)?;
    let a = &v.appearance.frames;
    let f = &v.flow.frames;
    let plane = a.height * a.width;
    for t in 0..a.frames {
        let rgb = &a.data[t * plane * 3..(t + 1) * plane * 3];
        let img = Image {
            width: a.width,
            height: a.height,
            channels: 3,
            data: rgb.iter().map(|&x| to_u8(x)).collect(),
        };
        write_image(&dir.join(frame_name("frame", t, "ppm")), &img)?;
        let uv = &f.data[t * plane * 2..(t + 1) * plane * 2];
        for (c, name) in ["flow_x", "flow_y"].iter().enumerate() {
            let data = uv
                .iter()
                .skip(c)
                .step_by(2)
                .map(|&x| flow_to_u8(x))
                .collect();
            write_image(
                &dir.join(frame_name(name, t, "pgm")),
                &Image {
                    width: f.width,
                    height: f.height,
                    channels: 1,
                    data,
                },
            )?;
        }
    }
    for (k, m) in v.masks.iter().enumerate() {
        write_mask(&dir.join(format!("mask_{}.pgm", Video::instance_id(k))), m)?;
    }
    Ok(())
}

fn count_frames(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while dir.join(frame_name("frame", n, "ppm")).exists() {
        n += 1;
    }
    if n == 0 {
        return Err(input_err!("{} contains no frames", dir.display()));
    }
    Ok(n)
}

fn read_video(dir: &Path, id: &str, spec: &ShapeWorldSpec) -> Result<Video> {
    let actors: Vec<Actor> = serde_json::from_slice(&read_bytes(&dir.join("actors.json"))?)?;
    let n = count_frames(dir)?;
    let mut app: Option<Volume<f32>> = None;
    let mut flow: Option<Volume<f32>> = None;
    for t in 0..n {
        let img = read_image(&dir.join(frame_name("frame", t, "ppm")))?;
        if img.channels != 3 {
            return Err(Error::Format(format!("frame {t} of {id} is not RGB")));
        }
        let a = app.get_or_insert_with(|| Volume::zeros(n, img.height, img.width, 3));
        if (img.height, img.width) != (a.height, a.width) {
            return Err(Error::Format(format!("frame {t} of {id} changes size")));
        }
        let plane = a.height * a.width;
        for (d, &s) in a.data[t * plane * 3..(t + 1) * plane * 3]
            .iter_mut()
            .zip(&img.data)
        {
            *d = s as f32 / 255.0;
        }
        let fx = gray(read_image(&dir.join(frame_name("flow_x", t, "pgm")))?, dir)?;
        let fy = gray(read_image(&dir.join(frame_name("flow_y", t, "pgm")))?, dir)?;
        if fx.data.len() != plane || fy.data.len() != plane {
            return Err(Error::Format(format!(
                "flow of frame {t} of {id} has the wrong size"
            )));
        }
        let f = flow.get_or_insert_with(|| Volume::zeros(n, img.height, img.width, 2));
        for p in 0..plane {
            f.data[(t * plane + p) * 2] = ((fx.data[p] as f64 - FLOW_ZERO) / FLOW_STEPS) as f32;
            f.data[(t * plane + p) * 2 + 1] = ((fy.data[p] as f64 - FLOW_ZERO) / FLOW_STEPS) as f32;
        }
    }
    let masks = (0..actors.len())
        .map(|k| read_mask(&dir.join(format!("mask_{}.pgm", Video::instance_id(k)))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Video {
        id: id.to_owned(),
        variant: spec.variant,
        appearance: VideoClip::new(StreamKind::Appearance, app.expect("n >= 1"))?,
        flow: VideoClip::new(StreamKind::Flow, flow.expect("n >= 1"))?,
        actors,
        masks,
        center: n / 2,
    })
}

/// Renders both splits of a shape world into `root`.
pub fn write_dataset(
    root: &Path,
    spec: &ShapeWorldSpec,
    train: usize,
    test: usize,
    force: bool,
) -> Result<Manifest> {
    if root.exists() {
        let nonempty = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(input_err!(
                "{} already exists and is not empty; pass --force to overwrite",
                root.display()
            ));
        }
        if nonempty {
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Manifest::default();
    let mut rows = Vec::new();
    for (split, count) in [(Split::Train, train), (Split::Test, test)] {
        if count == 0 {
            continue;
        }
        for v in generate_videos(spec, split, count)? {
            write_video(&root.join("videos").join(&v.id), &v)?;
            for s in samples_of(Arc::new(v)) {
                rows.push(AnnotationRow {
                    video_id: s.video_id,
                    instance_id: s.instance_id,
                    sentence: s.sentence,
                });
            }
            match split {
                Split::Train => manifest
                    .train
                    .push(rows.last().expect("one actor").video_id.clone()),
                Split::Test => manifest
                    .test
                    .push(rows.last().expect("one actor").video_id.clone()),
            }
        }
    }
    write_bytes(&root.join("world.json"), &serde_json::to_vec_pretty(spec)?)?;
    write_bytes(
        &root.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    let path = root.join("annotations.csv");
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_annotations(BufWriter::new(f), &rows)?;
    Ok(manifest)
}

/// Dataset root on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: ShapeWorldSpec,
    pub manifest: Manifest,
    pub annotations: Vec<AnnotationRow>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let spec: ShapeWorldSpec = serde_json::from_slice(&read_bytes(&root.join("world.json"))?)?;
        let manifest: Manifest = serde_json::from_slice(&read_bytes(&root.join("manifest.json"))?)?;
        let path = root.join("annotations.csv");
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let annotations = read_annotations(std::io::BufReader::new(f))?;
        Ok(Self {
            root: root.to_owned(),
            spec,
            manifest,
            annotations,
        })
    }

    pub fn video(&self, id: &str) -> Result<Video> {
        read_video(&self.root.join("videos").join(id), id, &self.spec)
    }

    /// All annotated samples of one split, in manifest order.
    pub fn samples(&self, split: Split) -> Result<Vec<AnnotatedSample>> {
        let mut by_video: HashMap<&str, Vec<&AnnotationRow>> = HashMap::new();
        for row in &self.annotations {
            by_video.entry(row.video_id.as_str()).or_default().push(row);
        }
        let mut out = Vec::new();
        for id in self.manifest.ids(split) {
            let video = Arc::new(self.video(id)?);
            let rows = by_video
                .get(id.as_str())
                .ok_or_else(|| config_err!("video {id} has no annotations"))?;
            for row in rows {
                let instance = (0..video.actors.len())
                    .find(|&k| Video::instance_id(k) == row.instance_id)
                    .ok_or_else(|| config_err!("video {id} has no instance {}", row.instance_id))?;
                out.push(AnnotatedSample {
                    instance,
                    sentence: row.sentence.clone(),
                    gt_mask: video.masks[instance].clone(),
                    video_id: id.clone(),
                    instance_id: row.instance_id.clone(),
                    video: Arc::clone(&video),
                });
            }
        }
        Ok(out)
    }
}
