//! On-disk dataset: binary PPM images, `annotations.jsonl`, `manifest.json`.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::detector::{Annotation, BBox};
use crate::domain::Domain;
use crate::error::{Error, Result};

use super::scene::{generate_scene_in, SceneSpec};
use super::shift::{apply_domain_shift, ShiftRange};
use super::{scene_rng, Stream};

pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const VAL_DIR: &str = "val";
pub const FORMAT: &str = "maf-shapes/1";

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub file: String,
    pub domain: Domain,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

/// An image with its domain label and (possibly empty) annotation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub file: String,
    pub domain: Domain,
    pub image: Tensor,
    pub annotation: Annotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    /// Labeled target-domain validation images, written under `val/`.
    pub n_val: usize,
    pub scene: SceneSpec,
    pub shift: ShiftRange,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_source: 200,
            n_target: 200,
            n_val: 100,
            scene: SceneSpec::default(),
            shift: ShiftRange::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: GenConfig,
    pub annotations_sha256: String,
    pub val_annotations_sha256: String,
    pub images_sha256: String,
}

/// Training images plus the labeled target validation split.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn to_bytes(image: &Tensor) -> Result<(Vec<u8>, u32, u32)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("ppm", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok((out, w as u32, h as u32))
}

/// Rounds to the 8-bit grid images are stored on.
pub fn quantize(image: &Tensor) -> Result<Tensor> {
    let (bytes, w, h) = to_bytes(image)?;
    from_bytes(&bytes, w as usize, h as usize)
}

fn from_bytes(bytes: &[u8], w: usize, h: usize) -> Result<Tensor> {
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in bytes.chunks(3).enumerate() {
        let (y, x) = (i / w, i % w);
        for c in 0..3 {
            data[(c * h + y) * w + x] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (bytes, w, h) = to_bytes(image)?;
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, w, h, ExtendedColorType::Rgb8)
        .map_err(|e| Error::InvalidArgument(format!("ppm encode: {e}")))?;
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !buf.starts_with(b"P6") {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let img = image::load_from_memory_with_format(&buf, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = img
        .as_rgb8()
        .ok_or_else(|| Error::format(path, "expected 8-bit RGB samples"))?;
    from_bytes(rgb.as_raw(), rgb.width() as usize, rgb.height() as usize)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn jsonl(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn record(file: String, domain: Domain, ann: Option<&Annotation>) -> Record {
    let (boxes, labels) = match ann {
        Some(a) => (a.boxes.iter().map(BBox::to_array).collect(), a.labels.clone()),
        None => (Vec::new(), Vec::new()),
    };
    Record {
        file,
        domain,
        boxes,
        labels,
    }
}

/// Draws the image for one (stream, index): source scenes as drawn, target
/// scenes through a per-image sampled shift.
pub fn render(cfg: &GenConfig, stream: Stream, index: u64) -> Result<(Tensor, Annotation)> {
    let spec = SceneSpec {
        seed: cfg.seed,
        ..cfg.scene.clone()
    };
    let scene = generate_scene_in(&spec, stream, index)?;
    let image = match stream {
        Stream::Source => scene.image,
        Stream::Target | Stream::Val => {
            let mut rng = scene_rng(cfg.seed, Stream::shift_of(stream), index);
            let shift = cfg.shift.sample(&mut rng);
            apply_domain_shift(&scene.image, &shift, rng.gen())?
        }
    };
    Ok((quantize(&image)?, scene.annotation))
}

/// Writes `n_source + n_target` training images with `annotations.jsonl`,
/// `n_val` labeled target images under `val/`, and `manifest.json`.
pub fn write_dataset(dir: &Path, cfg: &GenConfig) -> Result<Manifest> {
    if cfg.n_source == 0 {
        return Err(Error::InvalidArgument("n_source must be positive: the source domain is the labeled one".into()));
    }
    cfg.scene.validate()?;
    cfg.shift.validate()?;
    let mut cfg = cfg.clone();
    cfg.scene.seed = cfg.seed;
    let val_dir = dir.join(VAL_DIR);
    fs::create_dir_all(&val_dir).map_err(|e| Error::io(&val_dir, e))?;

    let mut images = Sha256::new();
    let mut train = Vec::with_capacity(cfg.n_source + cfg.n_target);
    let mut val = Vec::with_capacity(cfg.n_val);
    let jobs = [
        (Stream::Source, cfg.n_source, dir),
        (Stream::Target, cfg.n_target, dir),
        (Stream::Val, cfg.n_val, val_dir.as_path()),
    ];
    for (stream, n, out_dir) in jobs {
        for i in 0..n {
            let (image, ann) = render(&cfg, stream, i as u64)?;
            let file = format!("{}_{i:05}.ppm", stream.file_prefix());
            let bytes = encode_ppm(&image)?;
            images.update(&bytes);
            let path = out_dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            match stream {
                Stream::Source => train.push(record(file, Domain::Source, Some(&ann))),
                Stream::Target => train.push(record(file, Domain::Target, None)),
                Stream::Val => val.push(record(file, Domain::Target, Some(&ann))),
            }
        }
    }
    let train_bytes = jsonl(&train)?;
    let val_bytes = jsonl(&val)?;
    for (path, bytes) in [(dir.join(ANNOTATIONS), &train_bytes), (val_dir.join(ANNOTATIONS), &val_bytes)] {
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: cfg,
        annotations_sha256: sha_hex(&train_bytes),
        val_annotations_sha256: sha_hex(&val_bytes),
        images_sha256: hex::encode(images.finalize()),
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if r.boxes.len() != r.labels.len() {
            return Err(Error::format(path, format!("line {}: boxes and labels differ in length", n + 1)));
        }
        out.push(r);
    }
    Ok(out)
}

/// Reads every image listed in `dir/annotations.jsonl`.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index = dir.join(ANNOTATIONS);
    read_records(&index)?
        .into_iter()
        .map(|r| {
            let path = dir.join(&r.file);
            let boxes = r
                .boxes
                .iter()
                .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::format(&index, format!("{}: {e}", r.file)))?;
            let annotation = Annotation::new(boxes, r.labels).map_err(|e| Error::format(&index, e.to_string()))?;
            Ok(Sample {
                image: read_ppm(&path)?,
                file: r.file,
                domain: r.domain,
                annotation,
            })
        })
        .collect()
}

/// Training split of `dir` separated by domain, plus `dir/val`.
pub fn read_datasets(dir: &Path) -> Result<Datasets> {
    let (source, target) = read_dataset(dir)?
        .into_iter()
        .partition::<Vec<_>, _>(|s| s.domain == Domain::Source);
    let val_dir = dir.join(VAL_DIR);
    let val = if val_dir.join(ANNOTATIONS).exists() {
        read_dataset(&val_dir)?
    } else {
        Vec::new()
    };
    Ok(Datasets { source, target, val })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Path of the validation split inside a dataset directory.
pub fn val_dir(dir: &Path) -> PathBuf {
    dir.join(VAL_DIR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            seed: 3,
            n_source: 4,
            n_target: 3,
            n_val: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn ppm_round_trip_is_exact_after_quantization() {
        let (img, _) = render(&small(), Stream::Source, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &img).unwrap();
        assert!(fs::read(&p).unwrap().starts_with(b"P6"));
        assert_eq!(read_ppm(&p).unwrap().data(), img.data());
    }

    #[test]
    fn write_read_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        write_dataset(dir.path(), &cfg).unwrap();
        let d = read_datasets(dir.path()).unwrap();
        assert_eq!((d.source.len(), d.target.len(), d.val.len()), (4, 3, 2));
        assert!(d.target.iter().all(|s| s.annotation.is_empty()));
        assert!(d.val.iter().all(|s| !s.annotation.is_empty() && s.domain == Domain::Target));
        let (img, ann) = render(&cfg, Stream::Source, 2).unwrap();
        assert_eq!(d.source[2].image.data(), img.data());
        assert_eq!(d.source[2].annotation, ann);
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small()).unwrap();
        fs::remove_file(dir.path().join("target_00001.ppm")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("target_00001.ppm"), "{err}");
    }

    #[test]
    fn refuses_empty_source() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_source: 0,
            ..small()
        };
        assert!(write_dataset(dir.path(), &cfg).is_err());
    }
}
