//! On-disk formats: tensor containers, PNG images, datasets and checkpoints.
//!
//! A tensor container is the magic `SLS1`, a little-endian `u32` dtype code
//! (1 = f32, 2 = f64), a `u32` rank, `rank` `u32` dims and a row-major
//! little-endian payload. A checkpoint is the magic `SLSK`, a `u32` entry
//! count and that many `(u32 name length, UTF-8 name, tensor container)`
//! entries.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::datagen::{SceneDataset, View};
use crate::image::{ColorImage, InlierMask};
use crate::residual_stats::ResidualHistogram;
use crate::semantic_mask::{ClusterMap, FeatureMap};
use crate::smallnet::{Activation, DenseNet};
use crate::splat2d::{Glo, Splat, SplatModel, SPLAT_PARAMS};
use crate::trainer::{TrainConfig, TrainState};

pub const TENSOR_MAGIC: &[u8; 4] = b"SLS1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLSK";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Png(#[from] png::DecodingError),
    #[error(transparent)]
    PngEncode(#[from] png::EncodingError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T, IoError> {
    Err(IoError::Corrupt(msg.into()))
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Self::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Self::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: TensorData::F64(data),
        }
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<(), IoError> {
    let v = u32::try_from(v).map_err(|_| IoError::Corrupt(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize, IoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<(), IoError> {
    if t.dims.iter().product::<usize>() != t.data.len() {
        return corrupt("tensor dims do not match payload");
    }
    w.write_all(TENSOR_MAGIC)?;
    let dtype = match t.data {
        TensorData::F32(_) => 1,
        TensorData::F64(_) => 2,
    };
    write_u32(w, dtype)?;
    write_u32(w, t.dims.len())?;
    for &d in &t.dims {
        write_u32(w, d)?;
    }
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Upper bound on elements accepted from a header, to reject corrupt sizes
/// before allocating.
const MAX_ELEMENTS: usize = 1 << 31;

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return corrupt("bad tensor magic");
    }
    let dtype = read_u32(r)?;
    let rank = read_u32(r)?;
    if rank > 16 {
        return corrupt(format!("implausible tensor rank {rank}"));
    }
    let dims = (0..rank)
        .map(|_| read_u32(r))
        .collect::<Result<Vec<_>, _>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| IoError::Corrupt("tensor too large".into()))?;
    let data = match dtype {
        1 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            TensorData::F32(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        2 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            TensorData::F64(
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return corrupt(format!("unknown dtype code {other}")),
    };
    Ok(Tensor { dims, data })
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), IoError> {
    let mut w = create(path)?;
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor, IoError> {
    let mut r = open(path)?;
    let t = read_tensor(&mut r)?;
    if r.read(&mut [0u8])? != 0 {
        return corrupt("trailing bytes after tensor");
    }
    Ok(t)
}

fn write_png(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    bytes: &[u8],
) -> Result<(), IoError> {
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()?;
    Ok(())
}

fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>), IoError> {
    let dec = png::Decoder::new(open(path)?);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != want || info.bit_depth != png::BitDepth::Eight {
        return corrupt(format!(
            "{}: expected 8-bit {want:?}, found {:?} {:?}",
            path.display(),
            info.bit_depth,
            info.color_type
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn write_rgb_png(path: &Path, img: &ColorImage) -> Result<(), IoError> {
    write_png(
        path,
        img.width,
        img.height,
        png::ColorType::Rgb,
        None,
        &img.to_rgb8(),
    )
}

pub fn read_rgb_png(path: &Path) -> Result<ColorImage, IoError> {
    let (w, h, bytes) = read_png(path, png::ColorType::Rgb)?;
    Ok(ColorImage::from_rgb8(w, h, &bytes))
}

/// Grayscale mask, 0 = outlier and 255 = inlier.
pub fn write_mask_png(path: &Path, mask: &InlierMask) -> Result<(), IoError> {
    write_png(
        path,
        mask.width,
        mask.height,
        png::ColorType::Grayscale,
        None,
        &mask.to_gray8(),
    )
}

pub fn read_mask_png(path: &Path) -> Result<InlierMask, IoError> {
    let (w, h, bytes) = read_png(path, png::ColorType::Grayscale)?;
    Ok(InlierMask::new(
        w,
        h,
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

fn label_color(label: u32) -> [u8; 3] {
    let mut x = (label as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 29;
    [(x >> 8) as u8, (x >> 24) as u8, (x >> 40) as u8]
}

/// Indexed-color PNG with one palette entry per cluster, or RGB when there
/// are more than 256 clusters.
pub fn write_cluster_png(path: &Path, clusters: &ClusterMap) -> Result<(), IoError> {
    if clusters.count <= 256 {
        let palette = (0..clusters.count as u32).flat_map(label_color).collect();
        let bytes: Vec<u8> = clusters.labels.iter().map(|&l| l as u8).collect();
        write_png(
            path,
            clusters.width,
            clusters.height,
            png::ColorType::Indexed,
            Some(palette),
            &bytes,
        )
    } else {
        let bytes: Vec<u8> = clusters
            .labels
            .iter()
            .flat_map(|&l| label_color(l))
            .collect();
        write_png(
            path,
            clusters.width,
            clusters.height,
            png::ColorType::Rgb,
            None,
            &bytes,
        )
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn features_tensor(f: &FeatureMap) -> Tensor {
    let data = f
        .data
        .rows()
        .into_iter()
        .flat_map(|r| r.to_vec())
        .map(|v| v as f32)
        .collect();
    Tensor::f32(vec![f.height, f.width, f.channels()], data)
}

fn tensor_features(t: &Tensor, w: usize, h: usize) -> Result<FeatureMap, IoError> {
    if t.dims.len() != 3 || t.dims[0] != h || t.dims[1] != w {
        return corrupt(format!(
            "feature tensor dims {:?} do not match {w}x{h}",
            t.dims
        ));
    }
    let data = Array2::from_shape_vec((w * h, t.dims[2]), t.data.to_f64())
        .map_err(|e| IoError::Corrupt(e.to_string()))?;
    Ok(FeatureMap::new(w, h, data))
}

/// Writes the dataset layout: per-view `view_####.png`, `clean_####.png`,
/// `mask_####.png` and `feat_####.bin`, plus `base.png`, `scene.cfg` and
/// `seed.txt`. `scene_cfg` should hold the generator keys.
pub fn save_dataset(dir: &Path, data: &SceneDataset, scene_cfg: &str) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::File {
        path: dir.to_path_buf(),
        source,
    })?;
    for v in &data.views {
        let i = v.id;
        write_rgb_png(&dir.join(format!("view_{i:04}.png")), &v.image)?;
        write_rgb_png(&dir.join(format!("clean_{i:04}.png")), &v.clean)?;
        write_mask_png(&dir.join(format!("mask_{i:04}.png")), &v.gt_inliers)?;
        save_tensor(
            &dir.join(format!("feat_{i:04}.bin")),
            &features_tensor(&v.features),
        )?;
    }
    write_rgb_png(&dir.join("base.png"), &data.base)?;
    write_text(&dir.join("scene.cfg"), scene_cfg)?;
    write_text(&dir.join("seed.txt"), &format!("{}\n", data.seed))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset, IoError> {
    if !dir.is_dir() {
        return Err(IoError::File {
            path: dir.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let cfg = ExperimentConfig::from_text(&read_text(&dir.join("scene.cfg"))?)?;
    let seed_text = read_text(&dir.join("seed.txt"))?;
    let seed = seed_text
        .trim()
        .parse()
        .map_err(|_| IoError::Corrupt(format!("bad seed `{}`", seed_text.trim())))?;
    let base = read_rgb_png(&dir.join("base.png"))?;
    let (w, h) = (base.width, base.height);
    let mut views = Vec::with_capacity(cfg.gen.views);
    for i in 0..cfg.gen.views {
        let image = read_rgb_png(&dir.join(format!("view_{i:04}.png")))?;
        let clean = read_rgb_png(&dir.join(format!("clean_{i:04}.png")))?;
        let gt_inliers = read_mask_png(&dir.join(format!("mask_{i:04}.png")))?;
        if [
            (image.width, image.height),
            (clean.width, clean.height),
            (gt_inliers.width, gt_inliers.height),
        ]
        .iter()
        .any(|&d| d != (w, h))
        {
            return corrupt(format!("view {i} dimensions differ from base image"));
        }
        let features = tensor_features(&load_tensor(&dir.join(format!("feat_{i:04}.bin")))?, w, h)?;
        views.push(View {
            id: i,
            image,
            clean,
            gt_inliers,
            features,
        });
    }
    Ok(SceneDataset {
        cfg: cfg.gen,
        seed,
        base,
        views,
    })
}

fn write_entry(w: &mut impl Write, name: &str, t: &Tensor) -> Result<(), IoError> {
    write_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, t)
}

/// Writes the full training state with `f64` tensors so evaluation of a
/// restored state reproduces the in-memory one exactly.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<(), IoError> {
    let mut entries = vec![(
        "step".to_string(),
        Tensor::f64(vec![1], vec![state.step as f64]),
    )];
    let m = &state.model;
    let splat_data = m
        .splats
        .iter()
        .flat_map(|s| {
            let mut row = s.params().to_vec();
            row.push(s.depth);
            row
        })
        .collect();
    entries.push((
        "splats".into(),
        Tensor::f64(vec![m.len(), SPLAT_PARAMS + 1], splat_data),
    ));
    if let Some(glo) = &m.glo {
        entries.push((
            "glo.latents".into(),
            Tensor::f64(
                vec![glo.latents.len(), glo.dim()],
                glo.latents.iter().flatten().copied().collect(),
            ),
        ));
        let p = glo.mapper.flat_params();
        entries.push(("glo.mapper".into(), Tensor::f64(vec![p.len()], p)));
    }
    let mut hist = state.hist.buckets().to_vec();
    hist.push(state.hist.overflow());
    entries.push(("hist".into(), Tensor::f64(vec![hist.len()], hist)));
    if let Some(c) = &state.classifier {
        let p = c.flat_params();
        entries.push(("classifier".into(), Tensor::f64(vec![p.len()], p)));
    }
    let mut w = create(path)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, entries.len())?;
    for (name, t) in &entries {
        write_entry(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Network shapes come
/// from `cfg` and the dataset's feature width.
pub fn load_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    views: usize,
    feature_dim: usize,
) -> Result<TrainState, IoError> {
    let mut r = open(path)?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return corrupt("bad checkpoint magic");
    }
    let count = read_u32(&mut r)?;
    if count > 64 {
        return corrupt(format!("implausible entry count {count}"));
    }
    let mut entries = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        if len > 256 {
            return corrupt("entry name too long");
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| IoError::Corrupt("entry name is not UTF-8".into()))?;
        entries.insert(name, read_tensor(&mut r)?);
    }
    let mut take = |name: &str| -> Result<Tensor, IoError> {
        entries
            .remove(name)
            .ok_or_else(|| IoError::Corrupt(format!("checkpoint lacks `{name}`")))
    };

    let step = take("step")?.data.to_f64();
    let step = match step.as_slice() {
        [s] if *s >= 0.0 && s.fract() == 0.0 => *s as u64,
        _ => return corrupt("bad step entry"),
    };
    let splats_t = take("splats")?;
    if splats_t.dims.len() != 2 || splats_t.dims[1] != SPLAT_PARAMS + 1 {
        return corrupt(format!("bad splat tensor dims {:?}", splats_t.dims));
    }
    let splats = splats_t
        .data
        .to_f64()
        .chunks_exact(SPLAT_PARAMS + 1)
        .map(|row| Splat::from_params(&row[..SPLAT_PARAMS], row[SPLAT_PARAMS]))
        .collect();
    let mut model = SplatModel::new(splats);
    // Only shapes matter here; every value is overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if cfg.glo_enabled {
        let mut glo = Glo::new(views, cfg.glo_dim, &mut rng);
        let lat = take("glo.latents")?;
        if lat.dims != [views, cfg.glo_dim] {
            return corrupt(format!("latent dims {:?} do not match config", lat.dims));
        }
        glo.latents = lat
            .data
            .to_f64()
            .chunks(cfg.glo_dim)
            .map(|c| c.to_vec())
            .collect();
        glo.mapper
            .set_flat_params(&take("glo.mapper")?.data.to_f64())
            .map_err(|e| IoError::Corrupt(e.to_string()))?;
        model.glo = Some(glo);
    }
    let mut hist = take("hist")?.data.to_f64();
    let overflow = hist
        .pop()
        .ok_or_else(|| IoError::Corrupt("empty histogram".into()))?;
    let hist = ResidualHistogram::from_parts(cfg.hist, hist, overflow)
        .map_err(|e| IoError::Corrupt(e.to_string()))?;
    let classifier = if cfg.mode == crate::trainer::MaskMode::SlsMlp {
        let mut dims = vec![feature_dim + 4 * cfg.sls.pe_degree];
        dims.extend(&cfg.sls.hidden);
        dims.push(1);
        let mut acts = vec![Activation::Relu; cfg.sls.hidden.len()];
        acts.push(Activation::Sigmoid);
        let mut net = DenseNet::new(&dims, &acts, true, &mut rng)
            .map_err(|e| IoError::Corrupt(e.to_string()))?;
        net.set_flat_params(&take("classifier")?.data.to_f64())
            .map_err(|e| IoError::Corrupt(e.to_string()))?;
        Some(net)
    } else {
        None
    };
    Ok(TrainState {
        model,
        hist,
        classifier,
        step,
    })
}
